#pragma once

#include <string>
#include <vector>

#include "coreseg/data.hpp"
#include "coreseg/hash.hpp"
#include "coreseg/nn.hpp"

namespace coreseg {

// Geometry of the segmentation network and of the conditioning encoders that
// mirror it. Block i runs at spatial scale 1/2^i with width base_width * 2^i.
struct ArchDescriptor {
    int blocks = 4;
    int base_width = 32;
    int num_classes = 0;
    int in_channels = 0;

    int width(int level) const { return base_width << level; }
    int spatial_divisor() const { return 1 << (blocks - 1); }

    void validate() const {
        if (blocks < 2) throw ValueError("architecture: need at least 2 blocks");
        if (base_width < 1) throw ValueError("architecture: base width must be positive");
        if (num_classes < 1) throw ValueError("architecture: need at least one class");
        if (in_channels < 1) throw ValueError("architecture: need at least one input channel");
    }

    void check_input(int h, int w) const {
        const int d = spatial_divisor();
        if (h % d != 0 || w % d != 0) {
            throw ShapeError("input " + std::to_string(h) + "x" + std::to_string(w) + " must be divisible by " +
                             std::to_string(d) + " for " + std::to_string(blocks) + " blocks");
        }
    }

    bool operator==(const ArchDescriptor& o) const {
        return blocks == o.blocks && base_width == o.base_width && num_classes == o.num_classes &&
               in_channels == o.in_channels;
    }
};

// U-net style segmentation network: encoder blocks (conv + relu, 2x2 max pool
// between blocks), decoder stages consuming [upsampled deeper activation ||
// encoder skip], and a 1x1 classification head.
template <typename Scalar>
struct UNet {
    ArchDescriptor arch;
    std::vector<ConvLayer<Scalar>> enc;  // blocks entries
    std::vector<ConvLayer<Scalar>> dec;  // blocks-1 entries, dec[i] emits width(i)
    ConvLayer<Scalar> head;              // 1x1 -> num_classes
};

template <typename Scalar>
UNet<Scalar> init_unet(const ArchDescriptor& arch, Rng& rng) {
    arch.validate();
    UNet<Scalar> net;
    net.arch = arch;
    for (int i = 0; i < arch.blocks; ++i) {
        const int in_ch = i == 0 ? arch.in_channels : arch.width(i - 1);
        net.enc.push_back(make_conv<Scalar>(in_ch, arch.width(i), 3, rng));
    }
    for (int i = 0; i < arch.blocks - 1; ++i) {
        net.dec.push_back(make_conv<Scalar>(arch.width(i + 1) + arch.width(i), arch.width(i), 3, rng));
    }
    net.head = make_conv<Scalar>(arch.width(0), arch.num_classes, 1, rng);
    return net;
}

template <typename Scalar>
UNet<Scalar> zeros_like(const UNet<Scalar>& net) {
    UNet<Scalar> g;
    g.arch = net.arch;
    for (const auto& l : net.enc) g.enc.push_back(zeros_like(l));
    for (const auto& l : net.dec) g.dec.push_back(zeros_like(l));
    g.head = zeros_like(net.head);
    return g;
}

template <typename Scalar>
std::vector<ParamRef<Scalar>> unet_params(UNet<Scalar>& net) {
    std::vector<ParamRef<Scalar>> out;
    for (std::size_t i = 0; i < net.enc.size(); ++i) append_conv_params(out, "enc" + std::to_string(i), net.enc[i]);
    for (std::size_t i = 0; i < net.dec.size(); ++i) append_conv_params(out, "dec" + std::to_string(i), net.dec[i]);
    append_conv_params(out, "head", net.head);
    return out;
}

// Content hash of the encoder parameters in declaration order. This is the
// frozen-weights witness carried by downstream checkpoints.
template <typename Scalar>
std::string fingerprint_encoder(const UNet<Scalar>& net) {
    Fnv1a64 h;
    h.update_u64(static_cast<std::uint64_t>(net.arch.blocks));
    h.update_u64(static_cast<std::uint64_t>(net.arch.base_width));
    h.update_u64(static_cast<std::uint64_t>(net.arch.num_classes));
    h.update_u64(static_cast<std::uint64_t>(net.arch.in_channels));
    for (std::size_t i = 0; i < net.enc.size(); ++i) {
        h.update_string("enc" + std::to_string(i));
        h.update_matrix(net.enc[i].weight);
        h.update_matrix(net.enc[i].bias);
    }
    return h.hex_digest();
}

template <typename Scalar>
std::string fingerprint_all_params(UNet<Scalar>& net) {
    Fnv1a64 h;
    for (const auto& p : unet_params(net)) {
        h.update_string(p.name);
        h.update_matrix(*p.value);
    }
    return h.hex_digest();
}

template <typename Scalar>
struct EncoderTrace {
    Tensor3<Scalar> input;
    std::vector<Tensor3<Scalar>> pre;     // conv pre-activations per block
    std::vector<Tensor3<Scalar>> act;     // e_i = relu(pre_i)
    std::vector<Tensor3<Scalar>> pooled;  // pooled input of block i (i >= 1)
    std::vector<Eigen::MatrixXi> pool_arg;
};

template <typename Scalar>
struct UNetTrace {
    EncoderTrace<Scalar> enc;
    std::vector<Tensor3<Scalar>> up;       // per decoder level i in [0, blocks-1)
    std::vector<Tensor3<Scalar>> cat;
    std::vector<Tensor3<Scalar>> dec_pre;
    std::vector<Tensor3<Scalar>> dec_act;
    Tensor3<Scalar> logits;
};

template <typename Scalar>
EncoderTrace<Scalar> encoder_forward(const UNet<Scalar>& net, const Tensor3<Scalar>& x) {
    if (x.channels != net.arch.in_channels) {
        throw ShapeError("encoder: expected " + std::to_string(net.arch.in_channels) + " input channels, got " +
                         std::to_string(x.channels));
    }
    net.arch.check_input(x.height, x.width);
    EncoderTrace<Scalar> t;
    t.input = x;
    t.pooled.resize(static_cast<std::size_t>(net.arch.blocks));
    t.pool_arg.resize(static_cast<std::size_t>(net.arch.blocks));
    for (int i = 0; i < net.arch.blocks; ++i) {
        const Tensor3<Scalar>* in = &x;
        if (i > 0) {
            t.pooled[static_cast<std::size_t>(i)] =
                maxpool2_forward(t.act[static_cast<std::size_t>(i - 1)], t.pool_arg[static_cast<std::size_t>(i)]);
            in = &t.pooled[static_cast<std::size_t>(i)];
        }
        t.pre.push_back(conv_forward(net.enc[static_cast<std::size_t>(i)], *in));
        t.act.push_back(relu_forward(t.pre.back()));
    }
    return t;
}

template <typename Scalar>
UNetTrace<Scalar> unet_forward(const UNet<Scalar>& net, const Tensor3<Scalar>& x) {
    UNetTrace<Scalar> t;
    t.enc = encoder_forward(net, x);
    const int b = net.arch.blocks;
    t.up.resize(static_cast<std::size_t>(b - 1));
    t.cat.resize(static_cast<std::size_t>(b - 1));
    t.dec_pre.resize(static_cast<std::size_t>(b - 1));
    t.dec_act.resize(static_cast<std::size_t>(b - 1));
    const Tensor3<Scalar>* deeper = &t.enc.act[static_cast<std::size_t>(b - 1)];
    for (int i = b - 2; i >= 0; --i) {
        auto& up = t.up[static_cast<std::size_t>(i)];
        up = upsample2_forward(*deeper);
        t.cat[static_cast<std::size_t>(i)] = concat_channels<Scalar>({&up, &t.enc.act[static_cast<std::size_t>(i)]});
        t.dec_pre[static_cast<std::size_t>(i)] =
            conv_forward(net.dec[static_cast<std::size_t>(i)], t.cat[static_cast<std::size_t>(i)]);
        t.dec_act[static_cast<std::size_t>(i)] = relu_forward(t.dec_pre[static_cast<std::size_t>(i)]);
        deeper = &t.dec_act[static_cast<std::size_t>(i)];
    }
    t.logits = conv_forward(net.head, *deeper);
    return t;
}

// Backpropagates dlogits through the whole network, accumulating parameter
// gradients into `grads` (same geometry as the net, typically zeros_like).
template <typename Scalar>
void unet_backward(const UNet<Scalar>& net, const UNetTrace<Scalar>& t, const Tensor3<Scalar>& dlogits,
                   UNet<Scalar>& grads) {
    const int b = net.arch.blocks;
    std::vector<Tensor3<Scalar>> de(static_cast<std::size_t>(b));  // grads w.r.t. encoder activations
    for (int i = 0; i < b; ++i) {
        const auto& e = t.enc.act[static_cast<std::size_t>(i)];
        de[static_cast<std::size_t>(i)] = Tensor3<Scalar>(e.height, e.width, e.channels);
    }

    Tensor3<Scalar> da;  // grad w.r.t. current decoder activation
    conv_backward(net.head, t.dec_act[0], dlogits, grads.head, &da);
    for (int i = 0; i <= b - 2; ++i) {
        const Tensor3<Scalar> dpre = relu_backward(t.dec_pre[static_cast<std::size_t>(i)], da);
        Tensor3<Scalar> dcat;
        conv_backward(net.dec[static_cast<std::size_t>(i)], t.cat[static_cast<std::size_t>(i)], dpre,
                      grads.dec[static_cast<std::size_t>(i)], &dcat);
        const int up_ch = t.up[static_cast<std::size_t>(i)].channels;
        Tensor3<Scalar> dup(dcat.height, dcat.width, up_ch);
        dup.data = dcat.data.topRows(up_ch);
        de[static_cast<std::size_t>(i)].data += dcat.data.bottomRows(dcat.channels - up_ch);
        const auto& deeper = i == b - 2 ? t.enc.act[static_cast<std::size_t>(b - 1)]
                                        : t.dec_act[static_cast<std::size_t>(i + 1)];
        Tensor3<Scalar> dd = upsample2_backward(dup, deeper.height, deeper.width);
        if (i == b - 2) {
            de[static_cast<std::size_t>(b - 1)].data += dd.data;
        } else {
            da = std::move(dd);
        }
    }

    for (int i = b - 1; i >= 0; --i) {
        const Tensor3<Scalar> dpre = relu_backward(t.enc.pre[static_cast<std::size_t>(i)], de[static_cast<std::size_t>(i)]);
        const Tensor3<Scalar>& in = i == 0 ? t.enc.input : t.enc.pooled[static_cast<std::size_t>(i)];
        if (i == 0) {
            conv_backward(net.enc[0], in, dpre, grads.enc[0], static_cast<Tensor3<Scalar>*>(nullptr));
        } else {
            Tensor3<Scalar> dpooled;
            conv_backward(net.enc[static_cast<std::size_t>(i)], in, dpre, grads.enc[static_cast<std::size_t>(i)],
                          &dpooled);
            const auto& prev_act = t.enc.act[static_cast<std::size_t>(i - 1)];
            de[static_cast<std::size_t>(i - 1)].data +=
                maxpool2_backward(t.enc.pool_arg[static_cast<std::size_t>(i)], dpooled, prev_act.height, prev_act.width)
                    .data;
        }
    }
}

template <typename Scalar>
LabelMask predict_closed(const UNet<Scalar>& net, const Tensor3<Scalar>& x) {
    const UNetTrace<Scalar> t = unet_forward(net, x);
    LabelMask mask(x.height, x.width, net.arch.num_classes);
    mask.labels = argmax_classes(t.logits);
    return mask;
}

}  // namespace coreseg
