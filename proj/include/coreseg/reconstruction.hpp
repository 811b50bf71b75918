#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "coreseg/conditioning.hpp"

namespace coreseg {

// Reconstruction decoder. Every stage consumes the channel concatenation
// [previous activation || f_i || e_i]; at the deepest stage the previous
// activation is the latent itself (the deepest encoder block output). A 1x1
// linear head maps the full-resolution activation back to image channels.
template <typename Scalar>
struct CaeDecoder {
    std::vector<ConvLayer<Scalar>> stages;  // indexed by level, stages[i] emits width(i)
    ConvLayer<Scalar> out_head;
};

// Full conditional autoencoder: the two FiLM encoders plus the decoder.
template <typename Scalar>
struct Cae {
    ArchDescriptor arch;  // backbone architecture this CAE is shaped for
    CondNet<Scalar> gamma;
    CondNet<Scalar> beta;
    CaeDecoder<Scalar> dec;
};

template <typename Scalar>
Cae<Scalar> init_cae(const ArchDescriptor& backbone_arch, Rng& rng) {
    backbone_arch.validate();
    Cae<Scalar> cae;
    cae.arch = backbone_arch;
    cae.gamma = init_cond_net<Scalar>(backbone_arch, rng, 1.0);
    cae.beta = init_cond_net<Scalar>(backbone_arch, rng, 0.0);
    const int b = backbone_arch.blocks;
    for (int i = 0; i < b; ++i) {
        const int prev_ch = i == b - 1 ? backbone_arch.width(b - 1) : backbone_arch.width(i + 1);
        const int in_ch = prev_ch + 2 * backbone_arch.width(i);  // prev + f_i + e_i
        cae.dec.stages.push_back(make_conv<Scalar>(in_ch, backbone_arch.width(i), 3, rng));
    }
    cae.dec.out_head = make_conv<Scalar>(backbone_arch.width(0), backbone_arch.in_channels, 1, rng);
    return cae;
}

template <typename Scalar>
Cae<Scalar> zeros_like(const Cae<Scalar>& cae) {
    Cae<Scalar> g;
    g.arch = cae.arch;
    g.gamma = zeros_like(cae.gamma);
    g.beta = zeros_like(cae.beta);
    for (const auto& l : cae.dec.stages) g.dec.stages.push_back(zeros_like(l));
    g.dec.out_head = zeros_like(cae.dec.out_head);
    return g;
}

template <typename Scalar>
std::vector<ParamRef<Scalar>> cae_params(Cae<Scalar>& cae) {
    std::vector<ParamRef<Scalar>> out;
    append_cond_params(out, "gamma", cae.gamma);
    append_cond_params(out, "beta", cae.beta);
    for (std::size_t i = 0; i < cae.dec.stages.size(); ++i) {
        append_conv_params(out, "dec" + std::to_string(i), cae.dec.stages[i]);
    }
    append_conv_params(out, "out", cae.dec.out_head);
    return out;
}

template <typename Scalar>
std::string fingerprint_cae(Cae<Scalar>& cae) {
    Fnv1a64 h;
    for (const auto& p : cae_params(cae)) {
        h.update_string(p.name);
        h.update_matrix(*p.value);
    }
    return h.hex_digest();
}

template <typename Scalar>
struct CaeTrace {
    CondEncoding<Scalar> cond;
    std::vector<Tensor3<Scalar>> f;    // modulated features per block
    std::vector<Tensor3<Scalar>> up;   // upsampled previous activation (levels < blocks-1)
    std::vector<Tensor3<Scalar>> cat;  // stage inputs
    std::vector<Tensor3<Scalar>> pre;
    std::vector<Tensor3<Scalar>> act;
    Tensor3<Scalar> recon;
};

// Forward pass over frozen encoder features `e` (one tensor per block).
template <typename Scalar>
CaeTrace<Scalar> cae_forward(const Cae<Scalar>& cae, const std::vector<Tensor3<Scalar>>& e,
                             const Tensor3<Scalar>& cond) {
    const int b = cae.arch.blocks;
    if (static_cast<int>(e.size()) != b) throw ShapeError("cae_forward: expected " + std::to_string(b) + " blocks");
    CaeTrace<Scalar> t;
    t.cond = encode_condition(cae.gamma, cae.beta, cond);
    t.f = modulate(e, t.cond.film);
    t.up.resize(static_cast<std::size_t>(b));
    t.cat.resize(static_cast<std::size_t>(b));
    t.pre.resize(static_cast<std::size_t>(b));
    t.act.resize(static_cast<std::size_t>(b));
    for (int i = b - 1; i >= 0; --i) {
        const Tensor3<Scalar>* prev;
        if (i == b - 1) {
            prev = &e[static_cast<std::size_t>(b - 1)];
        } else {
            t.up[static_cast<std::size_t>(i)] = upsample2_forward(t.act[static_cast<std::size_t>(i + 1)]);
            prev = &t.up[static_cast<std::size_t>(i)];
        }
        t.cat[static_cast<std::size_t>(i)] =
            concat_channels<Scalar>({prev, &t.f[static_cast<std::size_t>(i)], &e[static_cast<std::size_t>(i)]});
        t.pre[static_cast<std::size_t>(i)] =
            conv_forward(cae.dec.stages[static_cast<std::size_t>(i)], t.cat[static_cast<std::size_t>(i)]);
        t.act[static_cast<std::size_t>(i)] = relu_forward(t.pre[static_cast<std::size_t>(i)]);
    }
    t.recon = conv_forward(cae.dec.out_head, t.act[0]);
    return t;
}

// Backward pass for the reconstruction gradient; the frozen features receive
// no gradient by construction (their branches are dropped).
template <typename Scalar>
void cae_backward(const Cae<Scalar>& cae, const std::vector<Tensor3<Scalar>>& e, const CaeTrace<Scalar>& t,
                  const Tensor3<Scalar>& drecon, Cae<Scalar>& grads) {
    const int b = cae.arch.blocks;
    std::vector<Tensor3<Scalar>> df(static_cast<std::size_t>(b));
    Tensor3<Scalar> da;
    conv_backward(cae.dec.out_head, t.act[0], drecon, grads.dec.out_head, &da);
    for (int i = 0; i < b; ++i) {
        const Tensor3<Scalar> dpre = relu_backward(t.pre[static_cast<std::size_t>(i)], da);
        Tensor3<Scalar> dcat;
        conv_backward(cae.dec.stages[static_cast<std::size_t>(i)], t.cat[static_cast<std::size_t>(i)], dpre,
                      grads.dec.stages[static_cast<std::size_t>(i)], &dcat);
        const int prev_ch =
            i == b - 1 ? cae.arch.width(b - 1) : t.up[static_cast<std::size_t>(i)].channels;
        const int f_ch = t.f[static_cast<std::size_t>(i)].channels;
        df[static_cast<std::size_t>(i)] = Tensor3<Scalar>(dcat.height, dcat.width, f_ch);
        df[static_cast<std::size_t>(i)].data = dcat.data.middleRows(prev_ch, f_ch);
        if (i < b - 1) {
            Tensor3<Scalar> dprev(dcat.height, dcat.width, prev_ch);
            dprev.data = dcat.data.topRows(prev_ch);
            const auto& deeper = t.act[static_cast<std::size_t>(i + 1)];
            da = upsample2_backward(dprev, deeper.height, deeper.width);
        }
        // i == b-1: the previous activation is the frozen latent; dropped.
    }
    std::vector<Tensor3<Scalar>> dgamma, dbeta;
    modulate_backward(e, df, dgamma, dbeta);
    cond_backward(cae.gamma, t.cond.gamma_trace, dgamma, grads.gamma);
    cond_backward(cae.beta, t.cond.beta_trace, dbeta, grads.beta);
}

// ---------------------------------------------------------------------------
// Errors and the match / non-match training loss

template <typename Scalar>
struct ErrorMap {
    int height = 0;
    int width = 0;
    ArrX<Scalar> values;  // per-pixel channel-mean absolute error
};

template <typename Scalar>
ErrorMap<Scalar> l1_error_map(const Tensor3<Scalar>& x, const Tensor3<Scalar>& xhat) {
    require_same_shape(x, xhat, "l1_error_map");
    ErrorMap<Scalar> em;
    em.height = x.height;
    em.width = x.width;
    em.values = (x.data - xhat.data).cwiseAbs().colwise().mean().transpose().array();
    return em;
}

// Scalar L1 over pixels whose label is a known class; everything else
// (ignore / unknown sentinels) is excluded from the loss and its gradient.
template <typename Scalar>
struct MaskedL1 {
    double loss = 0.0;
    Eigen::Index valid_pixels = 0;
};

template <typename Scalar>
MaskedL1<Scalar> masked_l1(const Tensor3<Scalar>& x, const Tensor3<Scalar>& xhat, const Eigen::VectorXi* labels,
                           int num_known, Tensor3<Scalar>* dxhat) {
    require_same_shape(x, xhat, "masked_l1");
    MaskedL1<Scalar> res;
    if (dxhat) *dxhat = Tensor3<Scalar>(x.height, x.width, x.channels);
    std::vector<Eigen::Index> valid;
    valid.reserve(static_cast<std::size_t>(x.pixels()));
    for (Eigen::Index p = 0; p < x.pixels(); ++p) {
        if (!labels || ((*labels)(p) >= 0 && (*labels)(p) < num_known)) valid.push_back(p);
    }
    res.valid_pixels = static_cast<Eigen::Index>(valid.size());
    if (valid.empty()) return res;

    const double inv = 1.0 / (static_cast<double>(res.valid_pixels) * x.channels);
    for (const Eigen::Index p : valid) {
        res.loss += static_cast<double>((x.data.col(p) - xhat.data.col(p)).template lpNorm<1>());
        if (dxhat) {
            for (int c = 0; c < x.channels; ++c) {
                const Scalar d = xhat.data(c, p) - x.data(c, p);
                dxhat->data(c, p) = d > 0 ? static_cast<Scalar>(inv) : (d < 0 ? -static_cast<Scalar>(inv) : Scalar(0));
            }
        }
    }
    res.loss *= inv;
    return res;
}

// Mean per-pixel hinge on the non-match error: every valid pixel whose
// channel-mean error falls short of the margin contributes margin - err_p.
// The returned gradient is d(term)/d(xhat), gated per pixel.
template <typename Scalar>
struct HingeL1 {
    double term = 0.0;
    Eigen::Index valid_pixels = 0;
};

template <typename Scalar>
HingeL1<Scalar> masked_hinge_l1(const Tensor3<Scalar>& x, const Tensor3<Scalar>& xhat, const Eigen::VectorXi* labels,
                                int num_known, double margin, Tensor3<Scalar>* dxhat) {
    require_same_shape(x, xhat, "masked_hinge_l1");
    HingeL1<Scalar> res;
    if (dxhat) *dxhat = Tensor3<Scalar>(x.height, x.width, x.channels);
    std::vector<Eigen::Index> valid;
    valid.reserve(static_cast<std::size_t>(x.pixels()));
    for (Eigen::Index p = 0; p < x.pixels(); ++p) {
        if (!labels || ((*labels)(p) >= 0 && (*labels)(p) < num_known)) valid.push_back(p);
    }
    res.valid_pixels = static_cast<Eigen::Index>(valid.size());
    if (valid.empty()) return res;

    const double inv_n = 1.0 / static_cast<double>(res.valid_pixels);
    const double inv_nc = inv_n / x.channels;
    for (const Eigen::Index p : valid) {
        const double err = static_cast<double>((x.data.col(p) - xhat.data.col(p)).template lpNorm<1>()) / x.channels;
        if (err >= margin) continue;
        res.term += (margin - err) * inv_n;
        if (dxhat) {
            for (int c = 0; c < x.channels; ++c) {
                const Scalar d = xhat.data(c, p) - x.data(c, p);
                dxhat->data(c, p) =
                    d > 0 ? -static_cast<Scalar>(inv_nc) : (d < 0 ? static_cast<Scalar>(inv_nc) : Scalar(0));
            }
        }
    }
    return res;
}

enum class NonmatchMode { literal, hinge };

inline std::string nonmatch_mode_name(NonmatchMode m) { return m == NonmatchMode::literal ? "literal" : "hinge"; }
inline NonmatchMode nonmatch_mode_from_name(const std::string& s) {
    if (s == "literal") return NonmatchMode::literal;
    if (s == "hinge") return NonmatchMode::hinge;
    throw ValueError("unknown nonmatch mode: " + s);
}

struct LossReport {
    double total = 0.0;
    double match_term = 0.0;
    double nonmatch_term = 0.0;
    double alpha = 0.0;
};

// Combined reconstruction loss over a match and a non-match reconstruction.
// literal: total = L1(x, xhat_m) + alpha * L1(x, xhat_nm)
// hinge:   total = L1(x, xhat_m) + alpha * mean_p max(0, margin - err_p(x, xhat_nm))
// The hinge is applied per pixel so that every pixel of a wrongly conditioned
// reconstruction is pushed to the margin, matching the pixelwise decision
// rule used at deploy time.
template <typename Scalar>
LossReport training_loss(const Tensor3<Scalar>& x, const Tensor3<Scalar>& xhat_m, const Tensor3<Scalar>& xhat_nm,
                         double alpha, NonmatchMode mode = NonmatchMode::literal, double margin = 0.0,
                         const Eigen::VectorXi* labels = nullptr, int num_known = 0) {
    if (!std::isfinite(alpha)) throw ValueError("training_loss: alpha must be finite");
    if (!x.all_finite() || !xhat_m.all_finite() || !xhat_nm.all_finite()) {
        throw ValueError("training_loss: non-finite inputs");
    }
    LossReport report;
    report.alpha = alpha;
    report.match_term = masked_l1<Scalar>(x, xhat_m, labels, num_known, nullptr).loss;
    if (mode == NonmatchMode::literal) {
        report.nonmatch_term = masked_l1<Scalar>(x, xhat_nm, labels, num_known, nullptr).loss;
    } else {
        report.nonmatch_term = masked_hinge_l1<Scalar>(x, xhat_nm, labels, num_known, margin, nullptr).term;
    }
    report.total = report.match_term + alpha * report.nonmatch_term;
    return report;
}

// Within-batch non-match pairing: a seeded cyclic permutation, so no image is
// ever paired with its own mask.
inline std::vector<int> nonmatch_pairing(int batch_size, Rng& rng) {
    if (batch_size < 2) {
        throw ValueError("nonmatch pairing: batch of " + std::to_string(batch_size) +
                         " has no non-match partner available");
    }
    return rng.cyclic_derangement(batch_size);
}

inline std::vector<LabelMask> sample_nonmatch_mask(const std::vector<LabelMask>& batch, Rng& rng) {
    const std::vector<int> perm = nonmatch_pairing(static_cast<int>(batch.size()), rng);
    std::vector<LabelMask> out(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        out[i] = batch[static_cast<std::size_t>(perm[i])];
    }
    return out;
}

}  // namespace coreseg
