#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "coreseg/rng.hpp"
#include "coreseg/tensor.hpp"

namespace coreseg {

// Same-padding convolution, kernel 1x1 or 3x3, stride 1.
// Weight layout: weight(co, (ky*k + kx) * in_ch + ci), bias(co, 0).
template <typename Scalar>
struct ConvLayer {
    int in_channels = 0;
    int out_channels = 0;
    int kernel = 3;
    MatX<Scalar> weight;
    MatX<Scalar> bias;  // (out_channels, 1)

    void set_zero() {
        weight.setZero();
        bias.setZero();
    }
};

template <typename Scalar>
ConvLayer<Scalar> make_conv(int in_ch, int out_ch, int kernel, Rng& rng, double weight_std = -1.0,
                            double bias_value = 0.0) {
    ConvLayer<Scalar> layer;
    layer.in_channels = in_ch;
    layer.out_channels = out_ch;
    layer.kernel = kernel;
    const int fan_in = in_ch * kernel * kernel;
    const double std = weight_std >= 0.0 ? weight_std : std::sqrt(2.0 / fan_in);
    layer.weight.resize(out_ch, fan_in);
    for (Eigen::Index r = 0; r < layer.weight.rows(); ++r) {
        for (Eigen::Index c = 0; c < layer.weight.cols(); ++c) {
            layer.weight(r, c) = static_cast<Scalar>(rng.normal() * std);
        }
    }
    layer.bias = MatX<Scalar>::Constant(out_ch, 1, static_cast<Scalar>(bias_value));
    return layer;
}

// A conv layer with the same geometry but zeroed arrays, for gradient buffers.
template <typename Scalar>
ConvLayer<Scalar> zeros_like(const ConvLayer<Scalar>& layer) {
    ConvLayer<Scalar> g;
    g.in_channels = layer.in_channels;
    g.out_channels = layer.out_channels;
    g.kernel = layer.kernel;
    g.weight = MatX<Scalar>::Zero(layer.weight.rows(), layer.weight.cols());
    g.bias = MatX<Scalar>::Zero(layer.bias.rows(), 1);
    return g;
}

namespace detail {

// im2col for 3x3 same padding: rows grouped per kernel offset so each
// (ky, kx, y) slab is one contiguous block copy.
template <typename Scalar>
MatX<Scalar> im2col3(const Tensor3<Scalar>& in) {
    const int h = in.height, w = in.width, c = in.channels;
    MatX<Scalar> cols = MatX<Scalar>::Zero(static_cast<Eigen::Index>(c) * 9, in.pixels());
    for (int ky = 0; ky < 3; ++ky) {
        for (int kx = 0; kx < 3; ++kx) {
            const int dy = ky - 1, dx = kx - 1;
            const Eigen::Index row0 = static_cast<Eigen::Index>(ky * 3 + kx) * c;
            for (int y = 0; y < h; ++y) {
                const int iy = y + dy;
                if (iy < 0 || iy >= h) continue;
                const int x0 = dx < 0 ? -dx : 0;
                const int x1 = dx > 0 ? w - dx : w;  // exclusive
                if (x1 <= x0) continue;
                const Eigen::Index len = x1 - x0;
                cols.block(row0, static_cast<Eigen::Index>(y) * w + x0, c, len) =
                    in.data.block(0, static_cast<Eigen::Index>(iy) * w + (x0 + dx), c, len);
            }
        }
    }
    return cols;
}

template <typename Scalar>
void col2im3_accumulate(const MatX<Scalar>& dcols, Tensor3<Scalar>& din) {
    const int h = din.height, w = din.width, c = din.channels;
    for (int ky = 0; ky < 3; ++ky) {
        for (int kx = 0; kx < 3; ++kx) {
            const int dy = ky - 1, dx = kx - 1;
            const Eigen::Index row0 = static_cast<Eigen::Index>(ky * 3 + kx) * c;
            for (int y = 0; y < h; ++y) {
                const int iy = y + dy;
                if (iy < 0 || iy >= h) continue;
                const int x0 = dx < 0 ? -dx : 0;
                const int x1 = dx > 0 ? w - dx : w;
                if (x1 <= x0) continue;
                const Eigen::Index len = x1 - x0;
                din.data.block(0, static_cast<Eigen::Index>(iy) * w + (x0 + dx), c, len) +=
                    dcols.block(row0, static_cast<Eigen::Index>(y) * w + x0, c, len);
            }
        }
    }
}

}  // namespace detail

template <typename Scalar>
Tensor3<Scalar> conv_forward(const ConvLayer<Scalar>& layer, const Tensor3<Scalar>& in) {
    if (in.channels != layer.in_channels) {
        throw ShapeError("conv_forward: expected " + std::to_string(layer.in_channels) + " channels, got " +
                         std::to_string(in.channels));
    }
    Tensor3<Scalar> out(in.height, in.width, layer.out_channels);
    if (layer.kernel == 1) {
        out.data.noalias() = layer.weight * in.data;
    } else {
        out.data.noalias() = layer.weight * detail::im2col3(in);
    }
    out.data.colwise() += layer.bias.col(0);
    return out;
}

// Accumulates parameter gradients into `grad`; writes the input gradient into
// `din` (resized) when non-null.
template <typename Scalar>
void conv_backward(const ConvLayer<Scalar>& layer, const Tensor3<Scalar>& in, const Tensor3<Scalar>& dout,
                   ConvLayer<Scalar>& grad, Tensor3<Scalar>* din) {
    if (layer.kernel == 1) {
        grad.weight.noalias() += dout.data * in.data.transpose();
        grad.bias.col(0).noalias() += dout.data.rowwise().sum();
        if (din) {
            *din = Tensor3<Scalar>(in.height, in.width, in.channels);
            din->data.noalias() = layer.weight.transpose() * dout.data;
        }
        return;
    }
    const MatX<Scalar> cols = detail::im2col3(in);
    grad.weight.noalias() += dout.data * cols.transpose();
    grad.bias.col(0).noalias() += dout.data.rowwise().sum();
    if (din) {
        *din = Tensor3<Scalar>(in.height, in.width, in.channels);
        const MatX<Scalar> dcols = layer.weight.transpose() * dout.data;
        detail::col2im3_accumulate(dcols, *din);
    }
}

// 2x2 max pooling, stride 2. Ties resolve to the first candidate in scan
// order (top-left, top-right, bottom-left, bottom-right).
template <typename Scalar>
Tensor3<Scalar> maxpool2_forward(const Tensor3<Scalar>& in, Eigen::MatrixXi& argmax) {
    if (in.height % 2 != 0 || in.width % 2 != 0) throw ShapeError("maxpool2: odd spatial size");
    const int ho = in.height / 2, wo = in.width / 2;
    Tensor3<Scalar> out(ho, wo, in.channels);
    argmax.resize(in.channels, out.pixels());
    for (int y = 0; y < ho; ++y) {
        for (int x = 0; x < wo; ++x) {
            const Eigen::Index po = static_cast<Eigen::Index>(y) * wo + x;
            const Eigen::Index base = static_cast<Eigen::Index>(2 * y) * in.width + 2 * x;
            const Eigen::Index cand[4] = {base, base + 1, base + in.width, base + in.width + 1};
            for (int c = 0; c < in.channels; ++c) {
                Scalar best = in.data(c, cand[0]);
                int best_i = 0;
                for (int i = 1; i < 4; ++i) {
                    const Scalar v = in.data(c, cand[i]);
                    if (v > best) {
                        best = v;
                        best_i = i;
                    }
                }
                out.data(c, po) = best;
                argmax(c, po) = static_cast<int>(cand[best_i]);
            }
        }
    }
    return out;
}

template <typename Scalar>
Tensor3<Scalar> maxpool2_backward(const Eigen::MatrixXi& argmax, const Tensor3<Scalar>& dout, int h_in, int w_in) {
    Tensor3<Scalar> din(h_in, w_in, dout.channels);
    for (Eigen::Index p = 0; p < dout.pixels(); ++p) {
        for (int c = 0; c < dout.channels; ++c) {
            din.data(c, argmax(c, p)) += dout.data(c, p);
        }
    }
    return din;
}

namespace detail {

// Axis resampling taps for x2 bilinear upsampling (half-pixel centers).
struct UpAxis {
    std::vector<int> lo, hi;
    std::vector<double> t;
};

inline UpAxis up_axis(int n_in) {
    UpAxis a;
    const int n_out = 2 * n_in;
    a.lo.resize(static_cast<std::size_t>(n_out));
    a.hi.resize(static_cast<std::size_t>(n_out));
    a.t.resize(static_cast<std::size_t>(n_out));
    for (int o = 0; o < n_out; ++o) {
        const double src = 0.5 * o - 0.25;
        int l = static_cast<int>(std::floor(src));
        double t = src - l;
        int h = l + 1;
        if (l < 0) {
            l = 0;
            h = 0;
        }
        if (h > n_in - 1) h = n_in - 1;
        if (l > n_in - 1) l = n_in - 1;
        a.lo[static_cast<std::size_t>(o)] = l;
        a.hi[static_cast<std::size_t>(o)] = h;
        a.t[static_cast<std::size_t>(o)] = t;
    }
    return a;
}

}  // namespace detail

// x2 bilinear upsampling. Linear in the input, so the backward pass is the
// exact adjoint with the same tap weights.
template <typename Scalar>
Tensor3<Scalar> upsample2_forward(const Tensor3<Scalar>& in) {
    const detail::UpAxis ay = detail::up_axis(in.height);
    const detail::UpAxis ax = detail::up_axis(in.width);
    Tensor3<Scalar> out(in.height * 2, in.width * 2, in.channels);
    for (int oy = 0; oy < out.height; ++oy) {
        const double ty = ay.t[static_cast<std::size_t>(oy)];
        const Eigen::Index ry0 = static_cast<Eigen::Index>(ay.lo[static_cast<std::size_t>(oy)]) * in.width;
        const Eigen::Index ry1 = static_cast<Eigen::Index>(ay.hi[static_cast<std::size_t>(oy)]) * in.width;
        for (int ox = 0; ox < out.width; ++ox) {
            const double tx = ax.t[static_cast<std::size_t>(ox)];
            const int lx = ax.lo[static_cast<std::size_t>(ox)], hx = ax.hi[static_cast<std::size_t>(ox)];
            const Eigen::Index po = static_cast<Eigen::Index>(oy) * out.width + ox;
            out.data.col(po) = static_cast<Scalar>((1 - ty) * (1 - tx)) * in.data.col(ry0 + lx) +
                               static_cast<Scalar>((1 - ty) * tx) * in.data.col(ry0 + hx) +
                               static_cast<Scalar>(ty * (1 - tx)) * in.data.col(ry1 + lx) +
                               static_cast<Scalar>(ty * tx) * in.data.col(ry1 + hx);
        }
    }
    return out;
}

template <typename Scalar>
Tensor3<Scalar> upsample2_backward(const Tensor3<Scalar>& dout, int h_in, int w_in) {
    const detail::UpAxis ay = detail::up_axis(h_in);
    const detail::UpAxis ax = detail::up_axis(w_in);
    Tensor3<Scalar> din(h_in, w_in, dout.channels);
    for (int oy = 0; oy < dout.height; ++oy) {
        const double ty = ay.t[static_cast<std::size_t>(oy)];
        const Eigen::Index ry0 = static_cast<Eigen::Index>(ay.lo[static_cast<std::size_t>(oy)]) * w_in;
        const Eigen::Index ry1 = static_cast<Eigen::Index>(ay.hi[static_cast<std::size_t>(oy)]) * w_in;
        for (int ox = 0; ox < dout.width; ++ox) {
            const double tx = ax.t[static_cast<std::size_t>(ox)];
            const int lx = ax.lo[static_cast<std::size_t>(ox)], hx = ax.hi[static_cast<std::size_t>(ox)];
            const Eigen::Index po = static_cast<Eigen::Index>(oy) * dout.width + ox;
            din.data.col(ry0 + lx) += static_cast<Scalar>((1 - ty) * (1 - tx)) * dout.data.col(po);
            din.data.col(ry0 + hx) += static_cast<Scalar>((1 - ty) * tx) * dout.data.col(po);
            din.data.col(ry1 + lx) += static_cast<Scalar>(ty * (1 - tx)) * dout.data.col(po);
            din.data.col(ry1 + hx) += static_cast<Scalar>(ty * tx) * dout.data.col(po);
        }
    }
    return din;
}

template <typename Scalar>
Tensor3<Scalar> relu_forward(const Tensor3<Scalar>& in) {
    Tensor3<Scalar> out = in;
    out.data = out.data.cwiseMax(Scalar(0));
    return out;
}

// Derivative at exactly zero is taken as zero.
template <typename Scalar>
Tensor3<Scalar> relu_backward(const Tensor3<Scalar>& pre, const Tensor3<Scalar>& dout) {
    Tensor3<Scalar> din(pre.height, pre.width, pre.channels);
    din.data = (pre.data.array() > Scalar(0)).select(dout.data, MatX<Scalar>::Zero(pre.data.rows(), pre.data.cols()));
    return din;
}

// Per-pixel argmax over class scores; ties break toward the lowest index.
template <typename Scalar>
Eigen::VectorXi argmax_classes(const Tensor3<Scalar>& logits) {
    Eigen::VectorXi labels(logits.pixels());
    for (Eigen::Index p = 0; p < logits.pixels(); ++p) {
        int best = 0;
        Scalar best_v = logits.data(0, p);
        for (int k = 1; k < logits.channels; ++k) {
            if (logits.data(k, p) > best_v) {
                best_v = logits.data(k, p);
                best = k;
            }
        }
        labels(p) = best;
    }
    return labels;
}

template <typename Scalar>
struct CrossEntropyResult {
    double loss = 0.0;
    Eigen::Index valid_pixels = 0;
    Tensor3<Scalar> dlogits;
};

// Mean per-pixel cross entropy over pixels whose label lies in [0, num_known);
// every other pixel (unknown / ignore sentinels) contributes exactly zero loss
// and zero gradient.
template <typename Scalar>
CrossEntropyResult<Scalar> softmax_cross_entropy_masked(const Tensor3<Scalar>& logits, const Eigen::VectorXi& labels,
                                                        int num_known) {
    if (labels.size() != logits.pixels()) throw ShapeError("cross_entropy: label count mismatch");
    CrossEntropyResult<Scalar> res;
    res.dlogits = Tensor3<Scalar>(logits.height, logits.width, logits.channels);
    for (Eigen::Index p = 0; p < logits.pixels(); ++p) {
        const int lab = labels(p);
        if (lab < 0 || lab >= num_known) continue;
        ++res.valid_pixels;
    }
    if (res.valid_pixels == 0) return res;

    const Scalar inv_n = Scalar(1) / static_cast<Scalar>(res.valid_pixels);
    for (Eigen::Index p = 0; p < logits.pixels(); ++p) {
        const int lab = labels(p);
        if (lab < 0 || lab >= num_known) continue;
        const auto col = logits.data.col(p);
        const Scalar m = col.maxCoeff();
        ArrX<Scalar> shifted = (col.array() - m);
        ArrX<Scalar> ex = shifted.exp();
        const Scalar denom = ex.sum();
        res.loss += static_cast<double>(std::log(denom) - shifted(lab));
        res.dlogits.data.col(p) = (ex / denom).matrix() * inv_n;
        res.dlogits.data(lab, p) -= inv_n;
    }
    res.loss /= static_cast<double>(res.valid_pixels);
    return res;
}

// ---------------------------------------------------------------------------
// Parameters and optimization

template <typename Scalar>
struct ParamRef {
    std::string name;
    MatX<Scalar>* value = nullptr;
};

template <typename Scalar>
void append_conv_params(std::vector<ParamRef<Scalar>>& out, const std::string& prefix, ConvLayer<Scalar>& layer) {
    out.push_back({prefix + ".w", &layer.weight});
    out.push_back({prefix + ".b", &layer.bias});
}

template <typename Scalar>
class AdamOptimizer {
public:
    explicit AdamOptimizer(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(const std::vector<ParamRef<Scalar>>& params, const std::vector<ParamRef<Scalar>>& grads) {
        if (params.size() != grads.size()) throw ValueError("AdamOptimizer: param/grad count mismatch");
        if (m_.empty()) {
            for (const auto& p : params) {
                m_.push_back(MatX<Scalar>::Zero(p.value->rows(), p.value->cols()));
                v_.push_back(MatX<Scalar>::Zero(p.value->rows(), p.value->cols()));
            }
        }
        ++t_;
        const Scalar b1 = static_cast<Scalar>(beta1_), b2 = static_cast<Scalar>(beta2_);
        const Scalar bc1 = Scalar(1) - static_cast<Scalar>(std::pow(beta1_, t_));
        const Scalar bc2 = Scalar(1) - static_cast<Scalar>(std::pow(beta2_, t_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            const MatX<Scalar>& g = *grads[i].value;
            m_[i] = b1 * m_[i] + (Scalar(1) - b1) * g;
            v_[i] = b2 * v_[i] + (Scalar(1) - b2) * g.cwiseProduct(g);
            params[i].value->array() -= static_cast<Scalar>(lr_) * (m_[i].array() / bc1) /
                                        ((v_[i].array() / bc2).sqrt() + static_cast<Scalar>(eps_));
        }
    }

private:
    double lr_, beta1_, beta2_, eps_;
    long t_ = 0;
    std::vector<MatX<Scalar>> m_, v_;
};

}  // namespace coreseg
