#pragma once

#include <Eigen/Dense>

#include <string>
#include <vector>

#include "coreseg/errors.hpp"

namespace coreseg {

template <typename Scalar>
using MatX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using VecX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using ArrX = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

// Default scalar for the experiment pipeline. The numeric core is templated,
// so tests may instantiate double where finite-difference accuracy matters.
using Real = float;

// Dense H x W x C feature map stored channels-by-pixels: data(c, y * width + x).
// The channels-as-rows layout makes convolution an im2col matrix product and
// per-pixel reductions column-wise expressions.
template <typename Scalar>
struct Tensor3 {
    int height = 0;
    int width = 0;
    int channels = 0;
    MatX<Scalar> data;  // (channels, height * width)

    Tensor3() = default;
    Tensor3(int h, int w, int c)
        : height(h), width(w), channels(c), data(MatX<Scalar>::Zero(c, static_cast<Eigen::Index>(h) * w)) {}

    Eigen::Index pixels() const { return static_cast<Eigen::Index>(height) * width; }

    Scalar& at(int y, int x, int c) { return data(c, static_cast<Eigen::Index>(y) * width + x); }
    Scalar at(int y, int x, int c) const { return data(c, static_cast<Eigen::Index>(y) * width + x); }

    bool same_shape(const Tensor3& other) const {
        return height == other.height && width == other.width && channels == other.channels;
    }

    bool all_finite() const { return data.allFinite(); }

    template <typename Other>
    Tensor3<Other> cast() const {
        Tensor3<Other> out;
        out.height = height;
        out.width = width;
        out.channels = channels;
        out.data = data.template cast<Other>();
        return out;
    }
};

inline std::string shape_string(int h, int w, int c) {
    return std::to_string(h) + "x" + std::to_string(w) + "x" + std::to_string(c);
}

template <typename Scalar>
void require_same_shape(const Tensor3<Scalar>& a, const Tensor3<Scalar>& b, const std::string& where) {
    if (!a.same_shape(b)) {
        throw ShapeError(where + ": shape mismatch " + shape_string(a.height, a.width, a.channels) + " vs " +
                         shape_string(b.height, b.width, b.channels));
    }
}

// Channel concatenation of tensors sharing a spatial grid.
template <typename Scalar>
Tensor3<Scalar> concat_channels(const std::vector<const Tensor3<Scalar>*>& parts) {
    if (parts.empty()) throw ValueError("concat_channels: no inputs");
    int c_total = 0;
    for (const auto* p : parts) {
        if (p->height != parts[0]->height || p->width != parts[0]->width) {
            throw ShapeError("concat_channels: spatial mismatch");
        }
        c_total += p->channels;
    }
    Tensor3<Scalar> out(parts[0]->height, parts[0]->width, c_total);
    int row = 0;
    for (const auto* p : parts) {
        out.data.middleRows(row, p->channels) = p->data;
        row += p->channels;
    }
    return out;
}

}  // namespace coreseg
