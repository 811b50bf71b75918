#pragma once

#include <string>
#include <vector>

#include "coreseg/backbone.hpp"
#include "coreseg/nn.hpp"

namespace coreseg {

// Head weights start near zero so that, combined with the head biases
// (gamma -> 1, beta -> 0), the conditioning path is an identity map at
// initialization up to noise well below 1e-2 per element.
inline constexpr double kCondHeadInitStd = 1e-5;

// Builds a pixelwise one-hot conditioning map from dense labels in [0, K).
template <typename Scalar>
Tensor3<Scalar> one_hot_map(const Eigen::VectorXi& labels, int h, int w, int num_classes) {
    if (labels.size() != static_cast<Eigen::Index>(h) * w) throw ShapeError("one_hot_map: label count mismatch");
    Tensor3<Scalar> out(h, w, num_classes);
    for (Eigen::Index p = 0; p < labels.size(); ++p) {
        const int k = labels(p);
        if (k < 0 || k >= num_classes) {
            throw ValueError("one_hot_map: label " + std::to_string(k) + " outside [0, " +
                             std::to_string(num_classes) + ")");
        }
        out.data(k, p) = Scalar(1);
    }
    return out;
}

// Constant-class conditioning: channel k set to one at every pixel.
template <typename Scalar>
Tensor3<Scalar> class_constant_map(int class_id, int h, int w, int num_classes) {
    if (class_id < 0 || class_id >= num_classes) {
        throw ValueError("class_constant_map: class " + std::to_string(class_id) + " outside [0, " +
                         std::to_string(num_classes) + ")");
    }
    Tensor3<Scalar> out(h, w, num_classes);
    out.data.row(class_id).setOnes();
    return out;
}

// Conditioning labels for training data: pixels whose label is not a known
// class (ignore / unknown sentinels) borrow the closed-set predicted class,
// matching deploy time where no ground truth exists.
inline Eigen::VectorXi prepare_conditioning_labels(const LabelMask& mask, const LabelMask& closed_prediction) {
    if (mask.pixels() != closed_prediction.pixels()) throw ShapeError("prepare_conditioning_labels: size mismatch");
    Eigen::VectorXi out(mask.labels.size());
    for (Eigen::Index p = 0; p < mask.labels.size(); ++p) {
        const int v = mask.labels(p);
        out(p) = (v >= 0 && v < mask.num_known) ? v : closed_prediction.labels(p);
    }
    return out;
}

// Conditioning encoder: a trunk mirroring the backbone encoder (conv + relu,
// pooled between blocks) fed by the K-channel conditioning map, plus one
// linear 3x3 head per block emitting the FiLM parameter at that block's
// shape. Two independent instances provide gamma and beta.
template <typename Scalar>
struct CondNet {
    ArchDescriptor arch;  // in_channels = conditioning channel count
    std::vector<ConvLayer<Scalar>> trunk;
    std::vector<ConvLayer<Scalar>> heads;
};

template <typename Scalar>
CondNet<Scalar> init_cond_net(const ArchDescriptor& backbone_arch, Rng& rng, double head_bias) {
    CondNet<Scalar> net;
    net.arch = backbone_arch;
    net.arch.in_channels = backbone_arch.num_classes;
    net.arch.validate();
    for (int i = 0; i < net.arch.blocks; ++i) {
        const int in_ch = i == 0 ? net.arch.in_channels : net.arch.width(i - 1);
        net.trunk.push_back(make_conv<Scalar>(in_ch, net.arch.width(i), 3, rng));
        net.heads.push_back(make_conv<Scalar>(net.arch.width(i), net.arch.width(i), 3, rng, kCondHeadInitStd, head_bias));
    }
    return net;
}

template <typename Scalar>
CondNet<Scalar> zeros_like(const CondNet<Scalar>& net) {
    CondNet<Scalar> g;
    g.arch = net.arch;
    for (const auto& l : net.trunk) g.trunk.push_back(zeros_like(l));
    for (const auto& l : net.heads) g.heads.push_back(zeros_like(l));
    return g;
}

template <typename Scalar>
void append_cond_params(std::vector<ParamRef<Scalar>>& out, const std::string& prefix, CondNet<Scalar>& net) {
    for (std::size_t i = 0; i < net.trunk.size(); ++i) {
        append_conv_params(out, prefix + ".trunk" + std::to_string(i), net.trunk[i]);
    }
    for (std::size_t i = 0; i < net.heads.size(); ++i) {
        append_conv_params(out, prefix + ".head" + std::to_string(i), net.heads[i]);
    }
}

// Pins the conditioning output to an exact constant (used by tests and the
// identity contract): zero head weights, bias = value.
template <typename Scalar>
void force_constant_output(CondNet<Scalar>& net, double value) {
    for (auto& h : net.heads) {
        h.weight.setZero();
        h.bias.setConstant(static_cast<Scalar>(value));
    }
}

template <typename Scalar>
struct CondTrace {
    Tensor3<Scalar> input;
    std::vector<Tensor3<Scalar>> pre;
    std::vector<Tensor3<Scalar>> act;
    std::vector<Tensor3<Scalar>> pooled;
    std::vector<Eigen::MatrixXi> pool_arg;
    std::vector<Tensor3<Scalar>> taps;  // per-block FiLM parameter maps
};

template <typename Scalar>
CondTrace<Scalar> cond_forward(const CondNet<Scalar>& net, const Tensor3<Scalar>& cond) {
    if (cond.channels != net.arch.in_channels) {
        throw ShapeError("cond_forward: expected " + std::to_string(net.arch.in_channels) + " channels, got " +
                         std::to_string(cond.channels));
    }
    net.arch.check_input(cond.height, cond.width);
    CondTrace<Scalar> t;
    t.input = cond;
    t.pooled.resize(static_cast<std::size_t>(net.arch.blocks));
    t.pool_arg.resize(static_cast<std::size_t>(net.arch.blocks));
    for (int i = 0; i < net.arch.blocks; ++i) {
        const Tensor3<Scalar>* in = &cond;
        if (i > 0) {
            t.pooled[static_cast<std::size_t>(i)] =
                maxpool2_forward(t.act[static_cast<std::size_t>(i - 1)], t.pool_arg[static_cast<std::size_t>(i)]);
            in = &t.pooled[static_cast<std::size_t>(i)];
        }
        t.pre.push_back(conv_forward(net.trunk[static_cast<std::size_t>(i)], *in));
        t.act.push_back(relu_forward(t.pre.back()));
        t.taps.push_back(conv_forward(net.heads[static_cast<std::size_t>(i)], t.act.back()));
    }
    return t;
}

// Accumulates gradients of the per-block taps into `grads`.
template <typename Scalar>
void cond_backward(const CondNet<Scalar>& net, const CondTrace<Scalar>& t, const std::vector<Tensor3<Scalar>>& dtaps,
                   CondNet<Scalar>& grads) {
    const int b = net.arch.blocks;
    if (static_cast<int>(dtaps.size()) != b) throw ShapeError("cond_backward: tap gradient count mismatch");
    Tensor3<Scalar> dact_chain;  // gradient flowing down the trunk from deeper blocks
    for (int i = b - 1; i >= 0; --i) {
        Tensor3<Scalar> dact;
        conv_backward(net.heads[static_cast<std::size_t>(i)], t.act[static_cast<std::size_t>(i)],
                      dtaps[static_cast<std::size_t>(i)], grads.heads[static_cast<std::size_t>(i)], &dact);
        if (i < b - 1) dact.data += dact_chain.data;
        const Tensor3<Scalar> dpre = relu_backward(t.pre[static_cast<std::size_t>(i)], dact);
        if (i == 0) {
            conv_backward(net.trunk[0], t.input, dpre, grads.trunk[0], static_cast<Tensor3<Scalar>*>(nullptr));
        } else {
            Tensor3<Scalar> dpooled;
            conv_backward(net.trunk[static_cast<std::size_t>(i)], t.pooled[static_cast<std::size_t>(i)], dpre,
                          grads.trunk[static_cast<std::size_t>(i)], &dpooled);
            const auto& prev_act = t.act[static_cast<std::size_t>(i - 1)];
            dact_chain = maxpool2_backward(t.pool_arg[static_cast<std::size_t>(i)], dpooled, prev_act.height,
                                           prev_act.width);
        }
    }
}

template <typename Scalar>
struct FiLMParams {
    std::vector<Tensor3<Scalar>> gamma;
    std::vector<Tensor3<Scalar>> beta;
};

template <typename Scalar>
struct CondEncoding {
    FiLMParams<Scalar> film;
    CondTrace<Scalar> gamma_trace;
    CondTrace<Scalar> beta_trace;
};

// Runs both auxiliary encoders over a shared conditioning input.
template <typename Scalar>
CondEncoding<Scalar> encode_condition(const CondNet<Scalar>& gamma_net, const CondNet<Scalar>& beta_net,
                                      const Tensor3<Scalar>& cond) {
    CondEncoding<Scalar> enc;
    enc.gamma_trace = cond_forward(gamma_net, cond);
    enc.beta_trace = cond_forward(beta_net, cond);
    enc.film.gamma = enc.gamma_trace.taps;
    enc.film.beta = enc.beta_trace.taps;
    return enc;
}

// Pixelwise FiLM: f_i = gamma_i (.) e_i + beta_i, blockwise.
template <typename Scalar>
std::vector<Tensor3<Scalar>> modulate(const std::vector<Tensor3<Scalar>>& e, const FiLMParams<Scalar>& p) {
    if (e.size() != p.gamma.size() || e.size() != p.beta.size()) {
        throw ShapeError("modulate: block count mismatch");
    }
    std::vector<Tensor3<Scalar>> f;
    f.reserve(e.size());
    for (std::size_t i = 0; i < e.size(); ++i) {
        require_same_shape(e[i], p.gamma[i], "modulate gamma block " + std::to_string(i));
        require_same_shape(e[i], p.beta[i], "modulate beta block " + std::to_string(i));
        Tensor3<Scalar> fi(e[i].height, e[i].width, e[i].channels);
        fi.data = p.gamma[i].data.cwiseProduct(e[i].data) + p.beta[i].data;
        f.push_back(std::move(fi));
    }
    return f;
}

// Gradients of the modulation w.r.t. the FiLM parameters for frozen e.
template <typename Scalar>
void modulate_backward(const std::vector<Tensor3<Scalar>>& e, const std::vector<Tensor3<Scalar>>& df,
                       std::vector<Tensor3<Scalar>>& dgamma, std::vector<Tensor3<Scalar>>& dbeta) {
    dgamma.clear();
    dbeta.clear();
    for (std::size_t i = 0; i < e.size(); ++i) {
        Tensor3<Scalar> dg(e[i].height, e[i].width, e[i].channels);
        dg.data = df[i].data.cwiseProduct(e[i].data);
        dgamma.push_back(std::move(dg));
        dbeta.push_back(df[i]);
    }
}

}  // namespace coreseg
