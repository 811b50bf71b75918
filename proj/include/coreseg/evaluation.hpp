#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "coreseg/errors.hpp"

namespace coreseg {

// Pixelwise unknown-detection metrics. Scores are raw minimum reconstruction
// errors: higher means "more unknown", so they rank the positive class
// directly without sign flips.

// Rank-based AUROC (Mann-Whitney), ties credited 1/2. Equals the probability
// that a random unknown pixel outranks a random known one.
inline double auroc_unknown(const std::vector<double>& scores, const std::vector<bool>& is_unknown) {
    if (scores.size() != is_unknown.size()) throw ValueError("auroc: score/truth size mismatch");
    const std::size_t n = scores.size();
    std::size_t n_pos = 0;
    for (bool b : is_unknown) n_pos += b ? 1u : 0u;
    const std::size_t n_neg = n - n_pos;
    if (n_pos == 0 || n_neg == 0) {
        throw ValueError("auroc: undefined, both known and unknown pixels are required (" +
                         std::to_string(n_pos) + " unknown, " + std::to_string(n_neg) + " known)");
    }

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    // Average ranks within tie groups keep every rank sum an exact multiple
    // of 1/2, so the result matches pairwise counting bit for bit.
    double rank_sum_pos = 0.0;
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
        const double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
        for (std::size_t t = i; t <= j; ++t) {
            if (is_unknown[order[t]]) rank_sum_pos += avg_rank;
        }
        i = j + 1;
    }
    const double u = rank_sum_pos - 0.5 * static_cast<double>(n_pos) * static_cast<double>(n_pos + 1);
    return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

struct RocCurve {
    std::vector<double> thresholds;  // descending
    std::vector<double> tpr;
    std::vector<double> fpr;
    double auroc = 0.0;
};

// Stepwise ROC over the unique score values, from (0,0) to (1,1); the
// trapezoidal area credits ties with half weight, matching auroc_unknown.
inline RocCurve roc_curve(const std::vector<double>& scores, const std::vector<bool>& is_unknown) {
    if (scores.size() != is_unknown.size()) throw ValueError("roc_curve: score/truth size mismatch");
    std::size_t n_pos = 0;
    for (bool b : is_unknown) n_pos += b ? 1u : 0u;
    const std::size_t n_neg = scores.size() - n_pos;
    if (n_pos == 0 || n_neg == 0) throw ValueError("roc_curve: both classes required");

    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

    RocCurve curve;
    curve.thresholds.push_back(std::numeric_limits<double>::infinity());
    curve.tpr.push_back(0.0);
    curve.fpr.push_back(0.0);
    std::size_t tp = 0, fp = 0, i = 0;
    double area = 0.0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
        for (std::size_t t = i; t <= j; ++t) {
            if (is_unknown[order[t]]) ++tp; else ++fp;
        }
        const double new_tpr = static_cast<double>(tp) / static_cast<double>(n_pos);
        const double new_fpr = static_cast<double>(fp) / static_cast<double>(n_neg);
        area += 0.5 * (new_tpr + curve.tpr.back()) * (new_fpr - curve.fpr.back());
        curve.thresholds.push_back(scores[order[i]]);
        curve.tpr.push_back(new_tpr);
        curve.fpr.push_back(new_fpr);
        i = j + 1;
    }
    curve.auroc = area;
    return curve;
}

struct EvalCounts {
    long total_pixels = 0;
    long known_pixels = 0;
    long unknown_pixels = 0;
    long ignored_pixels = 0;
};

struct EvalReport {
    std::string scenario;
    int uuc_original_id = -1;
    std::string uuc_name;
    bool auroc_defined = false;
    double auroc_unknown = std::numeric_limits<double>::quiet_NaN();
    double closed_accuracy = std::numeric_limits<double>::quiet_NaN();
    double quantile = std::numeric_limits<double>::quiet_NaN();
    double tau = std::numeric_limits<double>::quiet_NaN();
    EvalCounts counts;
};

// Pooled pixel evaluation of one scenario. `scores` are min-errors, `truth`
// the remapped ground-truth labels (unknown sentinel = num_known), and
// `closed_pred`/`closed_truth` feed the closed-set accuracy restricted to
// truly-known pixels. IGNORE pixels must already be excluded by the caller
// passing truth == kIgnore entries, which are skipped here.
struct ScenarioPixels {
    std::vector<double> scores;
    std::vector<int> truth;        // remapped labels, unknown = num_known, ignore = -1
    std::vector<int> closed_pred;  // closed-set predicted class per pixel
    int num_known = 0;
};

inline EvalReport evaluate_scenario_pixels(const ScenarioPixels& px) {
    if (px.scores.size() != px.truth.size() || px.scores.size() != px.closed_pred.size()) {
        throw ValueError("evaluate_scenario: input size mismatch");
    }
    EvalReport rep;
    std::vector<double> scores;
    std::vector<bool> is_unknown;
    long correct = 0, known = 0;
    for (std::size_t i = 0; i < px.scores.size(); ++i) {
        rep.counts.total_pixels += 1;
        const int t = px.truth[i];
        if (t == -1) {
            rep.counts.ignored_pixels += 1;
            continue;
        }
        const bool unknown = t == px.num_known;
        scores.push_back(px.scores[i]);
        is_unknown.push_back(unknown);
        if (unknown) {
            rep.counts.unknown_pixels += 1;
        } else {
            rep.counts.known_pixels += 1;
            ++known;
            if (px.closed_pred[i] == t) ++correct;
        }
    }
    if (known > 0) rep.closed_accuracy = static_cast<double>(correct) / static_cast<double>(known);
    if (rep.counts.unknown_pixels > 0 && rep.counts.known_pixels > 0) {
        rep.auroc_defined = true;
        rep.auroc_unknown = auroc_unknown(scores, is_unknown);
    }
    return rep;
}

struct Aggregate {
    double mean = std::numeric_limits<double>::quiet_NaN();
    double stddev = std::numeric_limits<double>::quiet_NaN();
    int count = 0;
};

// Sample standard deviation (the usual "mean +/- std" table convention).
inline Aggregate aggregate_values(const std::vector<double>& values) {
    Aggregate a;
    a.count = static_cast<int>(values.size());
    if (values.empty()) return a;
    a.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
    if (values.size() == 1) {
        a.stddev = 0.0;
        return a;
    }
    double ss = 0.0;
    for (double v : values) ss += (v - a.mean) * (v - a.mean);
    a.stddev = std::sqrt(ss / static_cast<double>(values.size() - 1));
    return a;
}

}  // namespace coreseg
