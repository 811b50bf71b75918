#pragma once

#include <algorithm>
#include <cmath>
#include <future>
#include <limits>
#include <string>
#include <vector>

#include "coreseg/reconstruction.hpp"

namespace coreseg {

// Per-class reconstruction errors: row k holds the error map obtained by
// conditioning every pixel on class k.
template <typename Scalar>
struct ErrorVolume {
    int height = 0;
    int width = 0;
    int num_classes = 0;
    MatX<Scalar> errors;  // (num_classes, height * width), non-negative

    Eigen::Index pixels() const { return static_cast<Eigen::Index>(height) * width; }
};

// Sweeps all class-constant conditionings over precomputed frozen encoder
// features. Classes are independent read-only evaluations, so the parallel
// path computes each slice in its own task; results are bitwise identical to
// the sequential path.
template <typename Scalar>
ErrorVolume<Scalar> sweep_error_volume(const Cae<Scalar>& cae, const std::vector<Tensor3<Scalar>>& features,
                                       const Tensor3<Scalar>& x, bool parallel = false) {
    const int k = cae.arch.num_classes;
    if (k <= 0) throw ValueError("sweep: no known classes to condition on");
    ErrorVolume<Scalar> vol;
    vol.height = x.height;
    vol.width = x.width;
    vol.num_classes = k;
    vol.errors.resize(k, x.pixels());

    auto run_class = [&](int cls) {
        const Tensor3<Scalar> cond = class_constant_map<Scalar>(cls, x.height, x.width, k);
        const CaeTrace<Scalar> trace = cae_forward(cae, features, cond);
        vol.errors.row(cls) = l1_error_map(x, trace.recon).values.matrix().transpose();
    };

    if (parallel) {
        std::vector<std::future<void>> tasks;
        tasks.reserve(static_cast<std::size_t>(k));
        for (int cls = 0; cls < k; ++cls) {
            tasks.push_back(std::async(std::launch::async, run_class, cls));
        }
        for (auto& t : tasks) t.get();
    } else {
        for (int cls = 0; cls < k; ++cls) run_class(cls);
    }
    return vol;
}

// Deploy-time sweep straight from a raster patch.
template <typename Scalar>
ErrorVolume<Scalar> sweep_conditionings(const UNet<Scalar>& backbone, const Cae<Scalar>& cae,
                                        const Tensor3<Scalar>& x, bool parallel = false) {
    if (!(backbone.arch == cae.arch)) throw ShapeError("sweep: backbone/CAE architecture mismatch");
    const EncoderTrace<Scalar> enc = encoder_forward(backbone, x);
    return sweep_error_volume(cae, enc.act, x, parallel);
}

// Pixelwise minimum over the class axis; arg ties break to the lowest index.
template <typename Scalar>
struct ScoreMap {
    int height = 0;
    int width = 0;
    ArrX<Scalar> min_error;
    Eigen::VectorXi argmin_class;
};

template <typename Scalar>
ScoreMap<Scalar> min_reduce(const ErrorVolume<Scalar>& vol) {
    if (vol.num_classes < 1 || vol.errors.size() == 0) throw ValueError("min_reduce: empty error volume");
    ScoreMap<Scalar> sm;
    sm.height = vol.height;
    sm.width = vol.width;
    sm.min_error.resize(vol.pixels());
    sm.argmin_class.resize(vol.pixels());
    for (Eigen::Index p = 0; p < vol.pixels(); ++p) {
        int best = 0;
        Scalar best_v = vol.errors(0, p);
        for (int k = 1; k < vol.num_classes; ++k) {
            if (vol.errors(k, p) < best_v) {
                best_v = vol.errors(k, p);
                best = k;
            }
        }
        sm.min_error(p) = best_v;
        sm.argmin_class(p) = best;
    }
    return sm;
}

// ---------------------------------------------------------------------------
// Quantile threshold calibration

struct ThresholdSpec {
    double quantile = 0.5;
    double tau = 0.0;
    std::string calibration_source = "validation";
};

// Linear-interpolation empirical quantile over a mutable buffer (selection
// based, no full sort). Boundary semantics: q = 0 returns the minimum (so a
// ">= tau" rule rejects everything), q = 1 returns max + ulp (rejects
// nothing).
inline double quantile_interpolated(std::vector<double>& values, double q) {
    if (values.empty()) throw ValueError("quantile: empty score collection");
    if (!(q >= 0.0 && q <= 1.0)) throw ValueError("quantile: q must lie in [0, 1]");
    const std::size_t n = values.size();
    if (q >= 1.0) {
        const double m = *std::max_element(values.begin(), values.end());
        return std::nextafter(m, std::numeric_limits<double>::infinity());
    }
    const double pos = q * static_cast<double>(n - 1);
    const std::size_t lo = static_cast<std::size_t>(pos);
    const double frac = pos - static_cast<double>(lo);
    std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(lo), values.end());
    const double v_lo = values[lo];
    if (frac == 0.0) return v_lo;
    std::nth_element(values.begin() + static_cast<std::ptrdiff_t>(lo + 1),
                     values.begin() + static_cast<std::ptrdiff_t>(lo + 1), values.end());
    const double v_hi = values[lo + 1];
    return v_lo + frac * (v_hi - v_lo);
}

inline ThresholdSpec calibrate_threshold(std::vector<double> scores, double q,
                                         const std::string& source = "validation") {
    ThresholdSpec spec;
    spec.quantile = q;
    spec.calibration_source = source;
    spec.tau = quantile_interpolated(scores, q);
    return spec;
}

// Accepts streamed chunks of min-error scores and calibrates once complete.
class StreamingCalibrator {
public:
    void add(double score) { scores_.push_back(score); }

    template <typename Scalar>
    void add_chunk(const ArrX<Scalar>& chunk) {
        scores_.reserve(scores_.size() + static_cast<std::size_t>(chunk.size()));
        for (Eigen::Index i = 0; i < chunk.size(); ++i) scores_.push_back(static_cast<double>(chunk(i)));
    }

    std::size_t count() const { return scores_.size(); }
    const std::vector<double>& scores() const { return scores_; }

    ThresholdSpec calibrate(double q, const std::string& source = "validation") const {
        return calibrate_threshold(scores_, q, source);
    }

private:
    std::vector<double> scores_;
};

// ---------------------------------------------------------------------------
// Fusion with the closed-set prediction

struct OpenSetPrediction {
    LabelMask labels;  // {0..K-1} plus unknown sentinel K
    ThresholdSpec spec;
    LabelMask closed_labels;
};

// A pixel is unknown iff its minimum reconstruction error is at or above tau;
// otherwise it keeps the closed-set class.
template <typename Scalar>
OpenSetPrediction fuse(const LabelMask& closed, const ScoreMap<Scalar>& score, const ThresholdSpec& spec) {
    if (closed.height != score.height || closed.width != score.width) throw ShapeError("fuse: shape mismatch");
    OpenSetPrediction pred;
    pred.spec = spec;
    pred.closed_labels = closed;
    pred.labels = LabelMask(closed.height, closed.width, closed.num_known);
    for (Eigen::Index p = 0; p < closed.labels.size(); ++p) {
        const bool unknown = static_cast<double>(score.min_error(p)) >= spec.tau;
        pred.labels.labels(p) = unknown ? closed.unknown_id() : closed.labels(p);
    }
    return pred;
}

}  // namespace coreseg
