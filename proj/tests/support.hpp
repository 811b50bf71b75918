#pragma once

// Shared test utilities: finite-difference gradient checking and independent
// brute-force oracles. Oracles here intentionally re-derive results through a
// different computational route than the library.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "coreseg/nn.hpp"
#include "coreseg/rng.hpp"
#include "coreseg/tensor.hpp"

namespace testsupport {

using coreseg::MatX;
using coreseg::ParamRef;
using coreseg::Rng;
using coreseg::Tensor3;

template <typename Scalar>
Tensor3<Scalar> random_tensor(int h, int w, int c, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor3<Scalar> t(h, w, c);
    for (Eigen::Index r = 0; r < t.data.rows(); ++r) {
        for (Eigen::Index col = 0; col < t.data.cols(); ++col) {
            t.data(r, col) = static_cast<Scalar>(rng.uniform(lo, hi));
        }
    }
    return t;
}

// Central-difference gradient check over every parameter element. Returns the
// worst-case deviation |analytic - fd| normalized by the largest gradient
// magnitude (infinity-norm relative error).
template <typename Scalar>
double gradcheck(const std::vector<ParamRef<Scalar>>& params, const std::vector<ParamRef<Scalar>>& analytic,
                 const std::function<double()>& loss, double step = 1e-5) {
    double max_abs = 0.0;
    double max_diff = 0.0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        MatX<Scalar>& theta = *params[i].value;
        const MatX<Scalar>& grad = *analytic[i].value;
        for (Eigen::Index r = 0; r < theta.rows(); ++r) {
            for (Eigen::Index c = 0; c < theta.cols(); ++c) {
                const Scalar orig = theta(r, c);
                const double h = step * std::max(1.0, std::abs(static_cast<double>(orig)));
                theta(r, c) = orig + static_cast<Scalar>(h);
                const double lp = loss();
                theta(r, c) = orig - static_cast<Scalar>(h);
                const double lm = loss();
                theta(r, c) = orig;
                const double fd = (lp - lm) / (2.0 * h);
                const double an = static_cast<double>(grad(r, c));
                max_abs = std::max({max_abs, std::abs(fd), std::abs(an)});
                max_diff = std::max(max_diff, std::abs(fd - an));
            }
        }
    }
    if (max_abs == 0.0) return max_diff == 0.0 ? 0.0 : 1.0;
    return max_diff / max_abs;
}

// O(n^2) pairwise AUROC oracle: wins + half-credit ties over all
// (unknown, known) pairs.
inline double auroc_bruteforce(const std::vector<double>& scores, const std::vector<bool>& is_unknown) {
    double wins = 0.0;
    long pairs = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (!is_unknown[i]) continue;
        for (std::size_t j = 0; j < scores.size(); ++j) {
            if (is_unknown[j]) continue;
            ++pairs;
            if (scores[i] > scores[j]) {
                wins += 1.0;
            } else if (scores[i] == scores[j]) {
                wins += 0.5;
            }
        }
    }
    return wins / static_cast<double>(pairs);
}

// Sort-based linear-interpolation quantile oracle (full sort route).
inline double quantile_sort_oracle(std::vector<double> values, double q) {
    std::sort(values.begin(), values.end());
    const std::size_t n = values.size();
    const double pos = q * static_cast<double>(n - 1);
    const std::size_t lo = static_cast<std::size_t>(pos);
    const double frac = pos - static_cast<double>(lo);
    if (lo + 1 >= n) return values[n - 1];
    return values[lo] + frac * (values[lo + 1] - values[lo]);
}

}  // namespace testsupport
