#pragma once

#include <cstdint>
#include <cstring>
#include <string>

#include <Eigen/Dense>

namespace coreseg {

// Streaming FNV-1a (64-bit). Used for parameter fingerprints and stage keys;
// these are integrity/identity checks, not cryptographic guarantees.
class Fnv1a64 {
public:
    void update(const void* bytes, std::size_t n) {
        const auto* p = static_cast<const unsigned char*>(bytes);
        for (std::size_t i = 0; i < n; ++i) {
            h_ ^= p[i];
            h_ *= 1099511628211ull;
        }
    }

    void update_string(const std::string& s) {
        update(s.data(), s.size());
        const unsigned char sep = 0xff;  // keep "ab"+"c" distinct from "a"+"bc"
        update(&sep, 1);
    }

    void update_u64(std::uint64_t v) {
        unsigned char b[8];
        for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
        update(b, 8);
    }

    // Hash the logical (row, col) traversal so the digest does not depend on
    // Eigen's storage order.
    template <typename Derived>
    void update_matrix(const Eigen::MatrixBase<Derived>& m) {
        using Scalar = typename Derived::Scalar;
        update_u64(static_cast<std::uint64_t>(m.rows()));
        update_u64(static_cast<std::uint64_t>(m.cols()));
        for (Eigen::Index r = 0; r < m.rows(); ++r) {
            for (Eigen::Index c = 0; c < m.cols(); ++c) {
                Scalar v = m(r, c);
                unsigned char buf[sizeof(Scalar)];
                std::memcpy(buf, &v, sizeof(Scalar));
                update(buf, sizeof(Scalar));
            }
        }
    }

    std::uint64_t digest() const { return h_; }

    std::string hex_digest() const {
        static const char* digits = "0123456789abcdef";
        std::string out(16, '0');
        std::uint64_t v = h_;
        for (int i = 15; i >= 0; --i) {
            out[static_cast<std::size_t>(i)] = digits[v & 0xf];
            v >>= 4;
        }
        return out;
    }

private:
    std::uint64_t h_ = 1469598103934665603ull;
};

inline std::string fnv1a_hex(const std::string& payload) {
    Fnv1a64 h;
    h.update(payload.data(), payload.size());
    return h.hex_digest();
}

}  // namespace coreseg
