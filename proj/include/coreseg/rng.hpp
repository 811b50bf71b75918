#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "coreseg/errors.hpp"

namespace coreseg {

// Seeded random source with hand-rolled value mappings so that streams are
// reproducible bit-for-bit on a given platform regardless of the standard
// library's distribution internals.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1).
    double uniform() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Standard normal via Box-Muller; consumes two uniforms per draw.
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    // Uniform integer in [0, n).
    int uniform_int(int n) {
        if (n <= 0) throw ValueError("Rng::uniform_int: n must be positive");
        return static_cast<int>(engine_() % static_cast<std::uint64_t>(n));
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (int i = static_cast<int>(v.size()) - 1; i > 0; --i) {
            std::swap(v[i], v[static_cast<std::size_t>(uniform_int(i + 1))]);
        }
    }

    std::vector<int> permutation(int n) {
        std::vector<int> p(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) p[static_cast<std::size_t>(i)] = i;
        shuffle(p);
        return p;
    }

    // Sattolo's algorithm: a uniformly random cyclic permutation. Every cycle
    // of length n >= 2 is fixed-point free, which is exactly the pairing
    // contract needed for non-match sampling.
    std::vector<int> cyclic_derangement(int n) {
        if (n < 2) throw ValueError("cyclic_derangement: need n >= 2, got " + std::to_string(n));
        std::vector<int> p(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) p[static_cast<std::size_t>(i)] = i;
        for (int i = n - 1; i > 0; --i) {
            const int j = uniform_int(i);  // strictly below i
            std::swap(p[static_cast<std::size_t>(i)], p[static_cast<std::size_t>(j)]);
        }
        return p;
    }

private:
    std::mt19937_64 engine_;
};

// Stable seed derivation for independent sub-streams (per stage, per scene...).
inline std::uint64_t derive_seed(std::uint64_t base, const std::string& tag) {
    std::uint64_t h = 1469598103934665603ull ^ base;
    for (unsigned char c : tag) {
        h ^= c;
        h *= 1099511628211ull;
    }
    h ^= base >> 32;
    h *= 1099511628211ull;
    return h;
}

inline std::uint64_t derive_seed(std::uint64_t base, const std::string& tag, std::uint64_t index) {
    return derive_seed(base, tag + "#" + std::to_string(index));
}

}  // namespace coreseg
