#pragma once

#include <chrono>
#include <cmath>
#include <string>
#include <vector>

#include "coreseg/backbone.hpp"
#include "coreseg/evaluation.hpp"
#include "coreseg/openset.hpp"
#include "coreseg/reconstruction.hpp"

namespace coreseg {

namespace detail {

inline double seconds_since(const std::chrono::steady_clock::time_point& t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// Batch index partition; a trailing singleton joins the previous batch so
// within-batch non-match pairing always has a partner.
inline std::vector<std::vector<int>> make_batches(const std::vector<int>& order, int batch_size) {
    std::vector<std::vector<int>> batches;
    for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(batch_size)) {
        const std::size_t end = std::min(order.size(), i + static_cast<std::size_t>(batch_size));
        batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                             order.begin() + static_cast<std::ptrdiff_t>(end));
    }
    if (batches.size() >= 2 && batches.back().size() == 1) {
        batches[batches.size() - 2].push_back(batches.back().front());
        batches.pop_back();
    }
    return batches;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Closed-set segmentation training

struct ClosedTrainHyper {
    double lr = 1e-3;
    int epochs = 30;
    int batch = 4;
    std::uint64_t seed = 0;
};

struct ClosedEpochStats {
    int epoch = 0;
    double train_loss = 0.0;
    double val_accuracy = 0.0;
    double wall_seconds = 0.0;
};

template <typename Scalar>
struct ClosedTrainResult {
    UNet<Scalar> model;
    int best_epoch = -1;
    double best_val_accuracy = 0.0;
    std::vector<ClosedEpochStats> log;
};

template <typename Scalar>
double closed_set_accuracy(const UNet<Scalar>& model, const std::vector<Sample<Scalar>>& samples) {
    long correct = 0, total = 0;
    for (const auto& s : samples) {
        const UNetTrace<Scalar> trace = unet_forward(model, s.image.pixels);
        const Eigen::VectorXi pred = argmax_classes(trace.logits);
        for (Eigen::Index p = 0; p < s.mask.labels.size(); ++p) {
            const int t = s.mask.labels(p);
            if (t < 0 || t >= s.mask.num_known) continue;
            ++total;
            if (pred(p) == t) ++correct;
        }
    }
    if (total == 0) throw TrainingError("validation set has no known-class pixels");
    return static_cast<double>(correct) / static_cast<double>(total);
}

// Trains the U-net on known-class pixels only and returns the epoch snapshot
// with the best validation pixel accuracy (earliest epoch wins ties).
template <typename Scalar>
ClosedTrainResult<Scalar> train_closed_set(const ArchDescriptor& arch, const std::vector<Sample<Scalar>>& train,
                                           const std::vector<Sample<Scalar>>& val, const ClosedTrainHyper& hyper) {
    if (train.empty()) throw TrainingError("closed-set training: empty training set");
    if (val.empty()) throw TrainingError("closed-set training: empty validation set");

    Rng init_rng(derive_seed(hyper.seed, "closed/init"));
    Rng batch_rng(derive_seed(hyper.seed, "closed/batches"));

    ClosedTrainResult<Scalar> result;
    result.model = init_unet<Scalar>(arch, init_rng);
    UNet<Scalar> best = result.model;
    AdamOptimizer<Scalar> opt(hyper.lr);
    UNet<Scalar> grads = zeros_like(result.model);
    const auto params = unet_params(result.model);
    const auto grad_refs = unet_params(grads);

    std::vector<bool> has_valid(train.size());
    for (std::size_t i = 0; i < train.size(); ++i) {
        bool any = false;
        for (Eigen::Index p = 0; p < train[i].mask.labels.size() && !any; ++p) {
            const int t = train[i].mask.labels(p);
            any = t >= 0 && t < train[i].mask.num_known;
        }
        has_valid[i] = any;
    }

    const auto t0 = std::chrono::steady_clock::now();
    for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
        std::vector<int> order = batch_rng.permutation(static_cast<int>(train.size()));
        double epoch_loss = 0.0;
        long steps = 0;
        for (const auto& batch : detail::make_batches(order, hyper.batch)) {
            int n_eff = 0;
            for (int idx : batch) n_eff += has_valid[static_cast<std::size_t>(idx)] ? 1 : 0;
            if (n_eff == 0) continue;
            const Scalar scale = Scalar(1) / static_cast<Scalar>(n_eff);

            for (auto& ref : grad_refs) ref.value->setZero();
            double batch_loss = 0.0;
            for (int idx : batch) {
                const auto& s = train[static_cast<std::size_t>(idx)];
                if (!has_valid[static_cast<std::size_t>(idx)]) continue;
                const UNetTrace<Scalar> trace = unet_forward(result.model, s.image.pixels);
                CrossEntropyResult<Scalar> ce =
                    softmax_cross_entropy_masked(trace.logits, s.mask.labels, s.mask.num_known);
                batch_loss += ce.loss / n_eff;
                ce.dlogits.data *= scale;
                unet_backward(result.model, trace, ce.dlogits, grads);
            }
            if (!std::isfinite(batch_loss)) {
                throw TrainingError("closed-set training: non-finite loss at epoch " + std::to_string(epoch));
            }
            opt.step(params, grad_refs);
            epoch_loss += batch_loss;
            ++steps;
        }

        ClosedEpochStats stats;
        stats.epoch = epoch;
        stats.train_loss = steps > 0 ? epoch_loss / static_cast<double>(steps) : 0.0;
        stats.val_accuracy = closed_set_accuracy(result.model, val);
        stats.wall_seconds = detail::seconds_since(t0);
        result.log.push_back(stats);

        if (result.best_epoch < 0 || stats.val_accuracy > result.best_val_accuracy) {
            result.best_epoch = epoch;
            result.best_val_accuracy = stats.val_accuracy;
            best = result.model;
        }
    }
    result.model = best;
    return result;
}

// ---------------------------------------------------------------------------
// Conditional reconstruction training

struct CaeTrainHyper {
    double alpha = 0.5;
    double margin = 0.5;
    NonmatchMode mode = NonmatchMode::hinge;
    double lr = 1e-3;
    int epochs = 30;
    int batch = 4;
    std::uint64_t seed = 0;
};

struct CaeStepStats {
    long step = 0;
    double match = 0.0;
    double nonmatch = 0.0;  // hinge-transformed in hinge mode
    double alpha = 0.0;
    double total = 0.0;
};

struct CaeEpochStats {
    int epoch = 0;
    double match = 0.0;
    double nonmatch = 0.0;
    double total = 0.0;
    bool val_auroc_defined = false;
    double val_auroc = std::numeric_limits<double>::quiet_NaN();
    double wall_seconds = 0.0;
};

template <typename Scalar>
struct CaeTrainResult {
    Cae<Scalar> model;
    int best_epoch = -1;
    double best_val_auroc = std::numeric_limits<double>::quiet_NaN();
    std::vector<CaeEpochStats> epochs;
    std::vector<CaeStepStats> steps;
    std::string backbone_fingerprint;
};

// Frozen per-sample context reused across epochs: encoder features plus the
// one-hot conditioning prepared from ground truth (sentinel pixels borrow the
// closed-set prediction).
template <typename Scalar>
struct PreparedSample {
    Tensor3<Scalar> x;
    std::vector<Tensor3<Scalar>> features;
    Eigen::VectorXi labels;      // remapped ground truth
    Eigen::VectorXi cond_labels; // conditioning classes, all in [0, K)
    bool has_valid = false;
};

template <typename Scalar>
PreparedSample<Scalar> prepare_sample(const UNet<Scalar>& backbone, const Sample<Scalar>& s) {
    PreparedSample<Scalar> prep;
    prep.x = s.image.pixels;
    const UNetTrace<Scalar> trace = unet_forward(backbone, s.image.pixels);
    prep.features = trace.enc.act;
    prep.labels = s.mask.labels;
    LabelMask closed(s.mask.height, s.mask.width, s.mask.num_known);
    closed.labels = argmax_classes(trace.logits);
    prep.cond_labels = prepare_conditioning_labels(s.mask, closed);
    for (Eigen::Index p = 0; p < prep.labels.size() && !prep.has_valid; ++p) {
        prep.has_valid = prep.labels(p) >= 0 && prep.labels(p) < s.mask.num_known;
    }
    return prep;
}

// Validation open-set AUROC for epoch selection: sweep all class-constant
// conditionings, take pixelwise minimum error, rank against is-unknown truth.
template <typename Scalar>
std::pair<bool, double> validation_auroc(const Cae<Scalar>& cae, const std::vector<PreparedSample<Scalar>>& val) {
    std::vector<double> scores;
    std::vector<bool> truth;
    std::size_t n_unknown = 0, n_known = 0;
    for (const auto& s : val) {
        const ErrorVolume<Scalar> vol = sweep_error_volume(cae, s.features, s.x, false);
        const ScoreMap<Scalar> sm = min_reduce(vol);
        for (Eigen::Index p = 0; p < s.labels.size(); ++p) {
            const int t = s.labels(p);
            if (t == LabelMask::kIgnore) continue;
            const bool unknown = t == cae.arch.num_classes;
            scores.push_back(static_cast<double>(sm.min_error(p)));
            truth.push_back(unknown);
            (unknown ? n_unknown : n_known) += 1;
        }
    }
    if (n_unknown == 0 || n_known == 0) return {false, std::numeric_limits<double>::quiet_NaN()};
    return {true, auroc_unknown(scores, truth)};
}

// Trains the conditional autoencoder against the frozen backbone. Epoch
// selection maximizes the validation open-set AUROC; if that is undefined for
// every epoch (no unknown pixels in validation) the final epoch is kept.
template <typename Scalar>
CaeTrainResult<Scalar> train_cae(const UNet<Scalar>& backbone, const std::vector<Sample<Scalar>>& train,
                                 const std::vector<Sample<Scalar>>& val, const CaeTrainHyper& hyper) {
    if (train.size() < 2) throw TrainingError("CAE training: need at least 2 training samples for non-match pairing");
    if (hyper.batch < 2) throw TrainingError("CAE training: batch size must be at least 2");
    if (val.empty()) throw TrainingError("CAE training: empty validation set");

    const std::string fp_before = fingerprint_encoder(backbone);

    std::vector<PreparedSample<Scalar>> prep_train, prep_val;
    prep_train.reserve(train.size());
    for (const auto& s : train) prep_train.push_back(prepare_sample(backbone, s));
    prep_val.reserve(val.size());
    for (const auto& s : val) prep_val.push_back(prepare_sample(backbone, s));

    const int k = backbone.arch.num_classes;
    Rng init_rng(derive_seed(hyper.seed, "cae/init"));
    Rng batch_rng(derive_seed(hyper.seed, "cae/batches"));

    CaeTrainResult<Scalar> result;
    result.backbone_fingerprint = fp_before;
    result.model = init_cae<Scalar>(backbone.arch, init_rng);
    Cae<Scalar> best = result.model;
    AdamOptimizer<Scalar> opt(hyper.lr);
    Cae<Scalar> grads = zeros_like(result.model);
    const auto params = cae_params(result.model);
    const auto grad_refs = cae_params(grads);

    const auto t0 = std::chrono::steady_clock::now();
    long global_step = 0;
    for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
        std::vector<int> order = batch_rng.permutation(static_cast<int>(prep_train.size()));
        double ep_match = 0.0, ep_nonmatch = 0.0, ep_total = 0.0;
        long ep_steps = 0;

        for (const auto& batch : detail::make_batches(order, hyper.batch)) {
            if (batch.size() < 2) continue;  // no non-match partner available
            const std::vector<int> pairing = nonmatch_pairing(static_cast<int>(batch.size()), batch_rng);
            int n_eff = 0;
            for (int idx : batch) n_eff += prep_train[static_cast<std::size_t>(idx)].has_valid ? 1 : 0;
            if (n_eff == 0) continue;
            const Scalar scale = Scalar(1) / static_cast<Scalar>(n_eff);

            for (auto& ref : grad_refs) ref.value->setZero();
            double match_sum = 0.0, nonmatch_sum = 0.0;
            for (std::size_t bi = 0; bi < batch.size(); ++bi) {
                const auto& item = prep_train[static_cast<std::size_t>(batch[bi])];
                if (!item.has_valid) continue;
                const auto& partner = prep_train[static_cast<std::size_t>(batch[static_cast<std::size_t>(
                    pairing[bi])])];

                const Tensor3<Scalar> cond_m =
                    one_hot_map<Scalar>(item.cond_labels, item.x.height, item.x.width, k);
                const Tensor3<Scalar> cond_nm =
                    one_hot_map<Scalar>(partner.cond_labels, item.x.height, item.x.width, k);

                CaeTrace<Scalar> trace_m = cae_forward(result.model, item.features, cond_m);
                CaeTrace<Scalar> trace_nm = cae_forward(result.model, item.features, cond_nm);

                Tensor3<Scalar> dm, dnm;
                const MaskedL1<Scalar> l1_m = masked_l1(item.x, trace_m.recon, &item.labels, k, &dm);

                double nonmatch_term;
                if (hyper.mode == NonmatchMode::literal) {
                    nonmatch_term = masked_l1(item.x, trace_nm.recon, &item.labels, k, &dnm).loss;
                } else {
                    nonmatch_term =
                        masked_hinge_l1(item.x, trace_nm.recon, &item.labels, k, hyper.margin, &dnm).term;
                }
                match_sum += l1_m.loss;
                nonmatch_sum += nonmatch_term;

                dm.data *= scale;
                cae_backward(result.model, item.features, trace_m, dm, grads);
                const Scalar nm_factor = static_cast<Scalar>(hyper.alpha) * scale;
                if (nm_factor != Scalar(0) && dnm.data.size() > 0) {
                    dnm.data *= nm_factor;
                    cae_backward(result.model, item.features, trace_nm, dnm, grads);
                }
            }

            CaeStepStats step;
            step.step = global_step++;
            step.match = match_sum / n_eff;
            step.nonmatch = nonmatch_sum / n_eff;
            step.alpha = hyper.alpha;
            step.total = step.match + hyper.alpha * step.nonmatch;
            if (!std::isfinite(step.total)) {
                throw TrainingError("CAE training: non-finite loss at epoch " + std::to_string(epoch));
            }
            result.steps.push_back(step);
            ep_match += step.match;
            ep_nonmatch += step.nonmatch;
            ep_total += step.total;
            ++ep_steps;

            opt.step(params, grad_refs);
        }

        CaeEpochStats stats;
        stats.epoch = epoch;
        if (ep_steps > 0) {
            stats.match = ep_match / static_cast<double>(ep_steps);
            stats.nonmatch = ep_nonmatch / static_cast<double>(ep_steps);
            stats.total = ep_total / static_cast<double>(ep_steps);
        }
        const auto [defined, auroc] = validation_auroc(result.model, prep_val);
        stats.val_auroc_defined = defined;
        stats.val_auroc = auroc;
        stats.wall_seconds = detail::seconds_since(t0);
        result.epochs.push_back(stats);

        if (defined && (result.best_epoch < 0 || auroc > result.best_val_auroc)) {
            result.best_epoch = epoch;
            result.best_val_auroc = auroc;
            best = result.model;
        }
    }
    if (result.best_epoch >= 0) {
        result.model = best;
    } else {
        result.best_epoch = hyper.epochs - 1;  // AUROC undefined throughout: keep final weights
    }

    const std::string fp_after = fingerprint_encoder(backbone);
    if (fp_after != fp_before) {
        throw TrainingError("CAE training: frozen encoder fingerprint drifted (contract violation)");
    }
    return result;
}

}  // namespace coreseg
