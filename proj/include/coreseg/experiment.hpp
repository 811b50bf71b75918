#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "coreseg/checkpoint.hpp"
#include "coreseg/config.hpp"
#include "coreseg/report.hpp"

namespace coreseg {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Stage artifact bookkeeping: every stage writes a small meta file carrying
// its stage key (a hash over the stage's effective inputs, chained through
// upstream fingerprints). A stage is reused only when the key matches; any
// upstream change therefore invalidates everything downstream.

struct StagePaths {
    fs::path root;

    fs::path data_dir() const { return root / "data"; }
    fs::path scenes_dir() const { return data_dir() / "scenes"; }
    fs::path dataset_meta() const { return data_dir() / "dataset.meta.json"; }

    fs::path scenario_dir(const std::string& name) const { return root / "scenarios" / name; }
    fs::path backbone_ckpt(const std::string& s) const { return scenario_dir(s) / "backbone.ckpt"; }
    fs::path backbone_meta(const std::string& s) const { return scenario_dir(s) / "backbone.meta.json"; }
    fs::path closed_log(const std::string& s) const { return scenario_dir(s) / "closed_train.csv"; }
    fs::path cae_ckpt(const std::string& s) const { return scenario_dir(s) / "cae.ckpt"; }
    fs::path cae_meta(const std::string& s) const { return scenario_dir(s) / "cae.meta.json"; }
    fs::path cae_log(const std::string& s) const { return scenario_dir(s) / "cae_train.csv"; }
    fs::path cae_steps(const std::string& s) const { return scenario_dir(s) / "cae_steps.csv"; }
    fs::path scores_dir(const std::string& s) const { return scenario_dir(s) / "scores"; }
    fs::path scores_meta(const std::string& s) const { return scores_dir(s) / "scores.meta.json"; }
    fs::path calibration_file(const std::string& s) const { return scenario_dir(s) / "calibration.json"; }
    fs::path calibration_meta(const std::string& s) const { return scenario_dir(s) / "calibration.meta.json"; }
    fs::path report_file(const std::string& s) const { return scenario_dir(s) / "report.json"; }
    fs::path report_meta(const std::string& s) const { return scenario_dir(s) / "report.meta.json"; }
    fs::path renders_dir(const std::string& s) const { return scenario_dir(s) / "renders"; }

    fs::path suite_report_json() const { return root / "suite_report.json"; }
    fs::path suite_report_csv() const { return root / "suite_report.csv"; }
    fs::path summary_html() const { return root / "summary.html"; }
};

inline void write_stage_meta(const fs::path& path, const std::string& kind, const std::string& stage_key,
                             const std::string& cfg_hash, const nlohmann::json& upstream) {
    nlohmann::json meta;
    meta["kind"] = kind;
    meta["stage_key"] = stage_key;
    meta["config_hash"] = cfg_hash;
    meta["upstream"] = upstream;
    atomic_write_file(path.string(), [&](std::ostream& out) { out << meta.dump(2) << "\n"; });
}

inline std::optional<nlohmann::json> read_stage_meta(const fs::path& path, const std::string& kind,
                                                     const std::string& expected_key) {
    if (!fs::exists(path)) return std::nullopt;
    try {
        nlohmann::json meta = nlohmann::json::parse(read_file_bytes(path.string()));
        if (meta.value("kind", "") != kind) return std::nullopt;
        if (meta.value("stage_key", "") != expected_key) return std::nullopt;
        return meta;
    } catch (...) {
        return std::nullopt;
    }
}

inline std::string hash_json(const nlohmann::json& j) { return fnv1a_hex(j.dump()); }

// ---------------------------------------------------------------------------
// Dataset stage

struct DatasetBundle {
    std::vector<Scene<Real>> scenes;  // raw pixel values (pre-normalization)
    std::vector<std::string> class_names;
    SceneSplit split;
    ChannelStats stats;
    bool normalized = false;
    std::string stage_key;
};

inline std::string dataset_stage_key(const ExperimentConfig& cfg) {
    const nlohmann::json cj = config_to_json(cfg);
    return hash_json({{"dataset", cj.at("dataset")}, {"seed", cfg.seed}});
}

inline std::string scene_name(int index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "scene_%03d", index);
    return buf;
}

inline DatasetBundle stage_dataset(const ExperimentConfig& cfg, const StagePaths& paths, bool allow_cache = true) {
    DatasetBundle bundle;
    bundle.stage_key = dataset_stage_key(cfg);
    const std::string cfg_hash = config_hash(cfg);

    if (cfg.dataset.kind == DatasetConfig::Kind::synthetic) {
        bundle.class_names.clear();
        for (const auto& c : cfg.dataset.synth.classes) bundle.class_names.push_back(c.name);
        const bool cached = allow_cache && read_stage_meta(paths.dataset_meta(), "dataset", bundle.stage_key).has_value();
        for (int i = 0; i < cfg.dataset.num_scenes; ++i) {
            const std::string id = scene_name(i);
            if (cached) {
                bundle.scenes.push_back(load_scene<Real>(paths.scenes_dir().string(), id));
                continue;
            }
            SyntheticSceneSpec spec = cfg.dataset.synth;
            spec.seed = derive_seed(cfg.seed, "scene", static_cast<std::uint64_t>(i));
            const Sample<Real> sample = generate_synthetic<Real>(spec);
            Scene<Real> scene;
            scene.id = id;
            scene.pixels = sample.image.pixels;
            scene.channel_names = spec.channel_names;
            scene.class_names = bundle.class_names;
            scene.mask = sample.mask;
            save_scene(paths.scenes_dir().string(), scene);
            bundle.scenes.push_back(std::move(scene));
        }
    } else {
        for (const auto& id : cfg.dataset.scene_ids) {
            bundle.scenes.push_back(load_scene<Real>(cfg.dataset.scenes_dir, id));
        }
        bundle.class_names = bundle.scenes.front().class_names;
        for (const auto& s : bundle.scenes) {
            if (s.class_names != bundle.class_names) {
                throw ConfigError("dataset: scene '" + s.id + "' disagrees on class vocabulary");
            }
        }
    }

    // scene-level split (explicit id lists or seeded largest-remainder)
    if (cfg.dataset.explicit_split) {
        auto index_of = [&](const std::string& id) {
            for (std::size_t i = 0; i < bundle.scenes.size(); ++i) {
                if (bundle.scenes[i].id == id) return static_cast<int>(i);
            }
            throw ConfigError("dataset/split: unknown scene id '" + id + "'");
        };
        for (const auto& id : cfg.dataset.split_train) bundle.split.train.push_back(index_of(id));
        for (const auto& id : cfg.dataset.split_val) bundle.split.val.push_back(index_of(id));
        for (const auto& id : cfg.dataset.split_test) bundle.split.test.push_back(index_of(id));
    } else {
        bundle.split = split_dataset(static_cast<int>(bundle.scenes.size()), cfg.dataset.split, cfg.seed);
    }

    if (cfg.dataset.normalize) {
        std::vector<const Tensor3<Real>*> train_images;
        for (int idx : bundle.split.train) train_images.push_back(&bundle.scenes[static_cast<std::size_t>(idx)].pixels);
        bundle.stats = fit_normalization<Real>(train_images);
        bundle.normalized = true;
    }

    nlohmann::json upstream;
    upstream["split"] = {{"train", bundle.split.train}, {"val", bundle.split.val}, {"test", bundle.split.test}};
    if (bundle.normalized) upstream["normalization"] = {{"mins", bundle.stats.mins}, {"maxs", bundle.stats.maxs}};
    write_stage_meta(paths.dataset_meta(), "dataset", bundle.stage_key, cfg_hash, upstream);
    return bundle;
}

// ---------------------------------------------------------------------------
// Scenario resolution and per-scenario data preparation

inline std::vector<ScenarioSpec> resolve_scenarios(const ExperimentConfig& cfg,
                                                   const std::vector<std::string>& class_names) {
    std::vector<ScenarioSpec> out;
    if (cfg.scenarios.empty()) {
        for (const auto& name : class_names) out.push_back({"uuc_" + name, {name}});
        return out;
    }
    for (const auto& s : cfg.scenarios) {
        for (const auto& held : s.held_out) {
            bool found = false;
            for (const auto& name : class_names) found = found || name == held;
            if (!found) {
                throw ConfigError("/scenarios: held-out class '" + held + "' does not exist in the dataset");
            }
        }
        out.push_back(s);
    }
    return out;
}

inline const ScenarioSpec& find_scenario(const std::vector<ScenarioSpec>& scenarios, const std::string& name) {
    for (const auto& s : scenarios) {
        if (s.name == name) return s;
    }
    throw ConfigError("unknown scenario '" + name + "'");
}

struct ScenarioContext {
    ScenarioSpec spec;
    LocoSpec loco;
    ArchDescriptor arch;
    std::vector<Sample<Real>> train, val, test;
};

inline ScenarioContext build_scenario_context(const ExperimentConfig& cfg, const DatasetBundle& bundle,
                                              const ScenarioSpec& scenario) {
    ScenarioContext ctx;
    ctx.spec = scenario;
    std::set<int> held_ids;
    for (const auto& name : scenario.held_out) {
        for (std::size_t i = 0; i < bundle.class_names.size(); ++i) {
            if (bundle.class_names[i] == name) held_ids.insert(static_cast<int>(i));
        }
    }
    if (held_ids.size() != scenario.held_out.size()) {
        throw ConfigError("scenario '" + scenario.name + "': unresolved held-out class");
    }
    ctx.loco = LocoSpec::make(bundle.class_names, held_ids);
    if (ctx.loco.num_known < 1) throw ConfigError("scenario '" + scenario.name + "': no known classes remain");

    ctx.arch.blocks = cfg.arch_blocks;
    ctx.arch.base_width = cfg.arch_base_width;
    ctx.arch.num_classes = ctx.loco.num_known;
    ctx.arch.in_channels = static_cast<int>(bundle.scenes.front().channel_names.size());
    ctx.arch.validate();

    auto prepare = [&](const std::vector<int>& ids, std::vector<Sample<Real>>& out) {
        for (int idx : ids) {
            Scene<Real> scene = bundle.scenes[static_cast<std::size_t>(idx)];
            if (bundle.normalized) apply_normalization(scene.pixels, bundle.stats);
            scene.mask = apply_loco(scene.mask, ctx.loco);
            for (auto& patch : extract_patches(scene, cfg.dataset.patch_size, cfg.dataset.stride)) {
                out.push_back(std::move(patch));
            }
        }
    };
    prepare(bundle.split.train, ctx.train);
    prepare(bundle.split.val, ctx.val);
    prepare(bundle.split.test, ctx.test);
    return ctx;
}

// ---------------------------------------------------------------------------
// Backbone stage

inline nlohmann::json scenario_json(const ScenarioSpec& s) {
    return {{"name", s.name}, {"held_out", s.held_out}};
}

inline std::string backbone_stage_key(const ExperimentConfig& cfg, const ScenarioSpec& scenario,
                                      const std::string& dataset_key) {
    const nlohmann::json cj = config_to_json(cfg);
    return hash_json({{"dataset_key", dataset_key},
                      {"scenario", scenario_json(scenario)},
                      {"arch", cj.at("arch")},
                      {"closed", cj.at("closed")},
                      {"patch", {cfg.dataset.patch_size, cfg.dataset.stride}},
                      {"seed", cfg.seed}});
}

inline UNet<Real> stage_backbone(const ExperimentConfig& cfg, const ScenarioContext& ctx, const StagePaths& paths,
                                 const std::string& dataset_key, bool allow_cache = true) {
    const std::string key = backbone_stage_key(cfg, ctx.spec, dataset_key);
    const fs::path ckpt = paths.backbone_ckpt(ctx.spec.name);
    if (allow_cache && read_stage_meta(paths.backbone_meta(ctx.spec.name), "backbone", key) && fs::exists(ckpt)) {
        return load_backbone<Real>(ckpt.string());
    }

    ClosedTrainHyper hyper = cfg.closed;
    hyper.seed = derive_seed(cfg.seed, "closed/" + ctx.spec.name);
    auto result = train_closed_set<Real>(ctx.arch, ctx.train, ctx.val, hyper);

    fs::create_directories(paths.scenario_dir(ctx.spec.name));
    atomic_write_file(paths.closed_log(ctx.spec.name).string(), [&](std::ostream& out) {
        out << "epoch,train_loss,val_accuracy,wall_seconds\n";
        for (const auto& e : result.log) {
            out << e.epoch << "," << e.train_loss << "," << e.val_accuracy << "," << e.wall_seconds << "\n";
        }
    });
    save_backbone(ckpt.string(), result.model);
    write_stage_meta(paths.backbone_meta(ctx.spec.name), "backbone", key, config_hash(cfg),
                     {{"dataset_key", dataset_key},
                      {"encoder_fingerprint", fingerprint_encoder(result.model)},
                      {"best_epoch", result.best_epoch},
                      {"best_val_accuracy", result.best_val_accuracy}});
    return result.model;
}

// ---------------------------------------------------------------------------
// CAE stage

inline std::string cae_stage_key(const ExperimentConfig& cfg, const std::string& backbone_key,
                                 const std::string& backbone_fp) {
    const nlohmann::json cj = config_to_json(cfg);
    return hash_json({{"backbone_key", backbone_key}, {"backbone_fp", backbone_fp}, {"cae", cj.at("cae")}});
}

inline Cae<Real> stage_cae(const ExperimentConfig& cfg, const ScenarioContext& ctx, const StagePaths& paths,
                           const UNet<Real>& backbone, const std::string& backbone_key, bool allow_cache = true) {
    const std::string backbone_fp = fingerprint_encoder(backbone);
    const std::string key = cae_stage_key(cfg, backbone_key, backbone_fp);
    const fs::path ckpt = paths.cae_ckpt(ctx.spec.name);
    if (allow_cache && read_stage_meta(paths.cae_meta(ctx.spec.name), "cae", key) && fs::exists(ckpt)) {
        return load_cae<Real>(ckpt.string(), backbone_fp).model;
    }

    CaeTrainHyper hyper = cfg.cae;
    hyper.seed = derive_seed(cfg.seed, "cae/" + ctx.spec.name);
    auto result = train_cae<Real>(backbone, ctx.train, ctx.val, hyper);

    fs::create_directories(paths.scenario_dir(ctx.spec.name));
    atomic_write_file(paths.cae_log(ctx.spec.name).string(), [&](std::ostream& out) {
        out << "epoch,match_term,nonmatch_term,total,val_auroc\n";
        for (const auto& e : result.epochs) {
            out << e.epoch << "," << e.match << "," << e.nonmatch << "," << e.total << ",";
            if (e.val_auroc_defined) out << e.val_auroc;
            out << "\n";
        }
    });
    atomic_write_file(paths.cae_steps(ctx.spec.name).string(), [&](std::ostream& out) {
        out.precision(17);
        out << "step,match,nonmatch,alpha,total\n";
        for (const auto& s : result.steps) {
            out << s.step << "," << s.match << "," << s.nonmatch << "," << s.alpha << "," << s.total << "\n";
        }
    });
    save_cae(ckpt.string(), result.model, hyper, result.backbone_fingerprint);
    write_stage_meta(paths.cae_meta(ctx.spec.name), "cae", key, config_hash(cfg),
                     {{"backbone_key", backbone_key},
                      {"backbone_fingerprint", result.backbone_fingerprint},
                      {"cae_fingerprint", fingerprint_cae(result.model)},
                      {"best_epoch", result.best_epoch}});
    return result.model;
}

// ---------------------------------------------------------------------------
// Scores stage: error volumes, score maps and closed predictions per split

struct SplitScores {
    std::vector<ErrorVolume<Real>> volumes;
    std::vector<ScoreMap<Real>> scores;
    std::vector<LabelMask> truth;
    std::vector<LabelMask> closed;
};

struct ScoresArtifact {
    SplitScores val, test;
    std::string stage_key;
};

namespace expdetail {

inline void save_split_scores(const fs::path& dir, const std::string& split, const SplitScores& s, int num_classes) {
    const std::size_t n = s.volumes.size();
    if (n == 0) return;
    const std::size_t h = static_cast<std::size_t>(s.volumes.front().height);
    const std::size_t w = static_cast<std::size_t>(s.volumes.front().width);
    const std::size_t k = static_cast<std::size_t>(num_classes);

    std::vector<float> vols(n * k * h * w);
    std::vector<std::int16_t> truth(n * h * w), closed(n * h * w);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t kk = 0; kk < k; ++kk) {
            for (std::size_t p = 0; p < h * w; ++p) {
                vols[((i * k + kk) * h * w) + p] =
                    static_cast<float>(s.volumes[i].errors(static_cast<Eigen::Index>(kk), static_cast<Eigen::Index>(p)));
            }
        }
        for (std::size_t p = 0; p < h * w; ++p) {
            truth[i * h * w + p] = static_cast<std::int16_t>(s.truth[i].labels(static_cast<Eigen::Index>(p)));
            closed[i * h * w + p] = static_cast<std::int16_t>(s.closed[i].labels(static_cast<Eigen::Index>(p)));
        }
    }
    save_npy((dir / (split + "_volumes.npy")).string(), {n, k, h, w}, vols);
    save_npy((dir / (split + "_truth.npy")).string(), {n, h, w}, truth);
    save_npy((dir / (split + "_closed.npy")).string(), {n, h, w}, closed);
}

inline SplitScores load_split_scores(const fs::path& dir, const std::string& split, int num_known) {
    SplitScores s;
    const fs::path vol_path = dir / (split + "_volumes.npy");
    if (!fs::exists(vol_path)) return s;
    const auto vols = load_npy<float>(vol_path.string());
    const auto truth = load_npy<std::int16_t>((dir / (split + "_truth.npy")).string());
    const auto closed = load_npy<std::int16_t>((dir / (split + "_closed.npy")).string());
    if (vols.shape.size() != 4) throw IoError("scores artifact must be n x K x H x W");
    const std::size_t n = vols.shape[0], k = vols.shape[1], h = vols.shape[2], w = vols.shape[3];
    for (std::size_t i = 0; i < n; ++i) {
        ErrorVolume<Real> vol;
        vol.height = static_cast<int>(h);
        vol.width = static_cast<int>(w);
        vol.num_classes = static_cast<int>(k);
        vol.errors.resize(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(h * w));
        for (std::size_t kk = 0; kk < k; ++kk) {
            for (std::size_t p = 0; p < h * w; ++p) {
                vol.errors(static_cast<Eigen::Index>(kk), static_cast<Eigen::Index>(p)) =
                    vols.data[((i * k + kk) * h * w) + p];
            }
        }
        s.scores.push_back(min_reduce(vol));
        s.volumes.push_back(std::move(vol));
        LabelMask t(static_cast<int>(h), static_cast<int>(w), num_known);
        LabelMask c(static_cast<int>(h), static_cast<int>(w), num_known);
        for (std::size_t p = 0; p < h * w; ++p) {
            t.labels(static_cast<Eigen::Index>(p)) = truth.data[i * h * w + p];
            c.labels(static_cast<Eigen::Index>(p)) = closed.data[i * h * w + p];
        }
        s.truth.push_back(std::move(t));
        s.closed.push_back(std::move(c));
    }
    return s;
}

inline SplitScores compute_split_scores(const UNet<Real>& backbone, const Cae<Real>& cae,
                                        const std::vector<Sample<Real>>& samples) {
    SplitScores s;
    for (const auto& sample : samples) {
        const UNetTrace<Real> trace = unet_forward(backbone, sample.image.pixels);
        LabelMask closed(sample.mask.height, sample.mask.width, sample.mask.num_known);
        closed.labels = argmax_classes(trace.logits);
        ErrorVolume<Real> vol = sweep_error_volume(cae, trace.enc.act, sample.image.pixels, true);
        s.scores.push_back(min_reduce(vol));
        s.volumes.push_back(std::move(vol));
        s.truth.push_back(sample.mask);
        s.closed.push_back(std::move(closed));
    }
    return s;
}

}  // namespace expdetail

inline std::string scores_stage_key(const std::string& cae_key, const std::string& cae_fp) {
    return hash_json({{"cae_key", cae_key}, {"cae_fp", cae_fp}});
}

inline ScoresArtifact stage_scores(const ExperimentConfig& cfg, const ScenarioContext& ctx, const StagePaths& paths,
                                   const UNet<Real>& backbone, Cae<Real>& cae, const std::string& cae_key,
                                   bool allow_cache = true) {
    ScoresArtifact artifact;
    artifact.stage_key = scores_stage_key(cae_key, fingerprint_cae(cae));
    const fs::path dir = paths.scores_dir(ctx.spec.name);
    if (allow_cache && read_stage_meta(paths.scores_meta(ctx.spec.name), "scores", artifact.stage_key)) {
        artifact.val = expdetail::load_split_scores(dir, "val", ctx.loco.num_known);
        artifact.test = expdetail::load_split_scores(dir, "test", ctx.loco.num_known);
        if (!artifact.val.volumes.empty() || ctx.val.empty()) return artifact;
    }

    artifact.val = expdetail::compute_split_scores(backbone, cae, ctx.val);
    artifact.test = expdetail::compute_split_scores(backbone, cae, ctx.test);
    fs::create_directories(dir);
    expdetail::save_split_scores(dir, "val", artifact.val, ctx.loco.num_known);
    expdetail::save_split_scores(dir, "test", artifact.test, ctx.loco.num_known);

    nlohmann::json sidecar;
    sidecar["class_order"] = nlohmann::json::array();
    for (int kcls = 0; kcls < ctx.loco.num_known; ++kcls) {
        sidecar["class_order"].push_back(ctx.loco.all_classes[static_cast<std::size_t>(ctx.loco.original_of(kcls))]);
    }
    sidecar["patch_origins"] = nlohmann::json::array();
    for (const auto& sample : ctx.test) {
        sidecar["patch_origins"].push_back({{"scene", sample.image.origin.scene_id},
                                            {"row", sample.image.origin.row_offset},
                                            {"col", sample.image.origin.col_offset}});
    }
    atomic_write_file((dir / "scores.json").string(), [&](std::ostream& out) { out << sidecar.dump(2) << "\n"; });
    write_stage_meta(paths.scores_meta(ctx.spec.name), "scores", artifact.stage_key, config_hash(cfg),
                     {{"cae_key", cae_key}, {"cae_fingerprint", fingerprint_cae(cae)}});
    return artifact;
}

// ---------------------------------------------------------------------------
// Calibration stage: sweep the quantile grid on pooled validation min-errors,
// select the best known-vs-unknown balanced accuracy.

struct CalibrationResult {
    ThresholdSpec threshold;
    nlohmann::json grid;  // per-q table
    bool fallback = false;
    std::string stage_key;
};

inline CalibrationResult stage_calibrate(const ExperimentConfig& cfg, const ScenarioContext& ctx,
                                         const StagePaths& paths, const ScoresArtifact& scores,
                                         bool allow_cache = true) {
    CalibrationResult result;
    result.stage_key = hash_json({{"scores_key", scores.stage_key},
                                  {"calibration", config_to_json(cfg).at("calibration")}});
    const fs::path file = paths.calibration_file(ctx.spec.name);
    if (allow_cache && read_stage_meta(paths.calibration_meta(ctx.spec.name), "calibration", result.stage_key) &&
        fs::exists(file)) {
        const nlohmann::json j = nlohmann::json::parse(read_file_bytes(file.string()));
        result.threshold.quantile = j.at("quantile").get<double>();
        result.threshold.tau = j.at("tau").get<double>();
        result.threshold.calibration_source = j.at("source").get<std::string>();
        result.grid = j.at("grid");
        result.fallback = j.value("fallback", false);
        return result;
    }

    std::vector<double> pooled;
    std::vector<bool> truth_unknown;
    long n_unknown = 0;
    for (std::size_t i = 0; i < scores.val.scores.size(); ++i) {
        const auto& sm = scores.val.scores[i];
        const auto& truth = scores.val.truth[i];
        for (Eigen::Index p = 0; p < truth.labels.size(); ++p) {
            if (truth.labels(p) == LabelMask::kIgnore) continue;
            pooled.push_back(static_cast<double>(sm.min_error(p)));
            const bool unk = truth.labels(p) == ctx.loco.num_known;
            truth_unknown.push_back(unk);
            n_unknown += unk ? 1 : 0;
        }
    }
    if (pooled.empty()) throw TrainingError("calibration: no validation pixels available");

    result.grid = nlohmann::json::array();
    double best_ba = -1.0;
    const std::vector<double> grid = cfg.calibration.grid();
    for (double q : grid) {
        const ThresholdSpec spec = calibrate_threshold(pooled, q, "validation");
        long tp = 0, fn = 0, tn = 0, fp = 0;
        for (std::size_t i = 0; i < pooled.size(); ++i) {
            const bool predicted_unknown = pooled[i] >= spec.tau;
            if (truth_unknown[i]) {
                (predicted_unknown ? tp : fn) += 1;
            } else {
                (predicted_unknown ? fp : tn) += 1;
            }
        }
        double ba = std::numeric_limits<double>::quiet_NaN();
        if (n_unknown > 0) {
            ba = 0.5 * (static_cast<double>(tp) / (tp + fn) + static_cast<double>(tn) / (tn + fp));
            if (ba > best_ba) {
                best_ba = ba;
                result.threshold = spec;
            }
        }
        result.grid.push_back({{"q", q}, {"tau", spec.tau}, {"balanced_accuracy", ba}});
    }
    if (n_unknown == 0) {
        // no unknown pixels to calibrate against: fall back to the grid median
        result.fallback = true;
        result.threshold = calibrate_threshold(pooled, grid[grid.size() / 2], "validation");
    }

    nlohmann::json j;
    j["quantile"] = result.threshold.quantile;
    j["tau"] = result.threshold.tau;
    j["source"] = result.threshold.calibration_source;
    j["fallback"] = result.fallback;
    j["n_scores"] = pooled.size();
    j["grid"] = result.grid;
    atomic_write_file(file.string(), [&](std::ostream& out) { out << j.dump(2) << "\n"; });
    write_stage_meta(paths.calibration_meta(ctx.spec.name), "calibration", result.stage_key, config_hash(cfg),
                     {{"scores_key", scores.stage_key}});
    return result;
}

// ---------------------------------------------------------------------------
// Report stage: fuse, evaluate on the test split, render, persist

inline EvalReport stage_report(const ExperimentConfig& cfg, const ScenarioContext& ctx, const StagePaths& paths,
                               const ScoresArtifact& scores, const CalibrationResult& calibration) {
    EvalReport report;
    ScenarioPixels px;
    px.num_known = ctx.loco.num_known;
    std::vector<OpenSetPrediction> predictions;
    for (std::size_t i = 0; i < scores.test.scores.size(); ++i) {
        const auto& sm = scores.test.scores[i];
        const auto& truth = scores.test.truth[i];
        const auto& closed = scores.test.closed[i];
        predictions.push_back(fuse(closed, sm, calibration.threshold));
        for (Eigen::Index p = 0; p < truth.labels.size(); ++p) {
            px.scores.push_back(static_cast<double>(sm.min_error(p)));
            px.truth.push_back(truth.labels(p));
            px.closed_pred.push_back(closed.labels(p));
        }
    }
    report = evaluate_scenario_pixels(px);
    report.scenario = ctx.spec.name;
    if (ctx.spec.held_out.size() == 1) {
        report.uuc_name = ctx.spec.held_out.front();
        for (std::size_t i = 0; i < ctx.loco.all_classes.size(); ++i) {
            if (ctx.loco.all_classes[i] == report.uuc_name) report.uuc_original_id = static_cast<int>(i);
        }
    } else {
        std::string joined;
        for (const auto& h : ctx.spec.held_out) joined += (joined.empty() ? "" : "+") + h;
        report.uuc_name = joined;
    }
    report.quantile = calibration.threshold.quantile;
    report.tau = calibration.threshold.tau;

    // exports: indexed predictions + sidecar
    const fs::path sdir = paths.scores_dir(ctx.spec.name);
    if (!predictions.empty()) {
        const std::size_t n = predictions.size();
        const std::size_t h = static_cast<std::size_t>(predictions.front().labels.height);
        const std::size_t w = static_cast<std::size_t>(predictions.front().labels.width);
        std::vector<std::int16_t> labels(n * h * w);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t p = 0; p < h * w; ++p) {
                labels[i * h * w + p] =
                    static_cast<std::int16_t>(predictions[i].labels.labels(static_cast<Eigen::Index>(p)));
            }
        }
        save_npy((sdir / "test_predictions.npy").string(), {n, h, w}, labels);
    }

    // renders: per test patch plus the ROC curve
    const fs::path rdir = paths.renders_dir(ctx.spec.name);
    fs::create_directories(rdir);
    const Palette palette = default_palette(ctx.loco.num_known);
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        const std::string stem = "test" + std::to_string(i);
        write_bmp((rdir / (stem + "_open.bmp")).string(), render_prediction(predictions[i].labels, palette));
        write_bmp((rdir / (stem + "_closed.bmp")).string(),
                  render_prediction(scores.test.closed[i], palette));
        write_bmp((rdir / (stem + "_truth.bmp")).string(), render_prediction(scores.test.truth[i], palette));
        write_bmp((rdir / (stem + "_error.bmp")).string(), render_error_heatmap(scores.test.scores[i]));
    }
    if (report.auroc_defined) {
        std::vector<double> sc;
        std::vector<bool> unk;
        for (std::size_t i = 0; i < px.scores.size(); ++i) {
            if (px.truth[i] == LabelMask::kIgnore) continue;
            sc.push_back(px.scores[i]);
            unk.push_back(px.truth[i] == px.num_known);
        }
        const RocCurve curve = roc_curve(sc, unk);
        write_bmp((rdir / "roc.bmp").string(), render_roc(curve));
        atomic_write_file((paths.scenario_dir(ctx.spec.name) / "roc_points.csv").string(), [&](std::ostream& out) {
            out << "threshold,fpr,tpr\n";
            for (std::size_t i = 0; i < curve.thresholds.size(); ++i) {
                out << curve.thresholds[i] << "," << curve.fpr[i] << "," << curve.tpr[i] << "\n";
            }
        });
    }

    nlohmann::json j;
    j["scenario"] = report.scenario;
    j["uuc"] = {{"original_id", report.uuc_original_id}, {"name", report.uuc_name}};
    if (report.auroc_defined) {
        j["auroc_unknown"] = report.auroc_unknown;
    } else {
        j["auroc_unknown"] = nullptr;
    }
    j["closed_accuracy"] = report.closed_accuracy;
    j["threshold"] = {{"quantile", report.quantile}, {"tau", report.tau}, {"source", "validation"}};
    j["counts"] = {{"total", report.counts.total_pixels},
                   {"known", report.counts.known_pixels},
                   {"unknown", report.counts.unknown_pixels},
                   {"ignored", report.counts.ignored_pixels}};
    j["config_hash"] = config_hash(cfg);
    atomic_write_file(paths.report_file(ctx.spec.name).string(),
                      [&](std::ostream& out) { out << j.dump(2) << "\n"; });
    write_stage_meta(paths.report_meta(ctx.spec.name), "report",
                     hash_json({{"calibration_key", calibration.stage_key}}), config_hash(cfg),
                     {{"calibration_key", calibration.stage_key}, {"scores_key", scores.stage_key}});
    return report;
}

// ---------------------------------------------------------------------------
// Scenario and suite drivers

inline EvalReport run_scenario(const ExperimentConfig& cfg, const DatasetBundle& bundle, const ScenarioSpec& scenario,
                               const StagePaths& paths, bool allow_cache = true) {
    const ScenarioContext ctx = build_scenario_context(cfg, bundle, scenario);
    const std::string backbone_key = backbone_stage_key(cfg, scenario, bundle.stage_key);
    const UNet<Real> backbone = stage_backbone(cfg, ctx, paths, bundle.stage_key, allow_cache);
    Cae<Real> cae = stage_cae(cfg, ctx, paths, backbone, backbone_key, allow_cache);
    const std::string cae_key = cae_stage_key(cfg, backbone_key, fingerprint_encoder(backbone));
    const ScoresArtifact scores = stage_scores(cfg, ctx, paths, backbone, cae, cae_key, allow_cache);
    const CalibrationResult calibration = stage_calibrate(cfg, ctx, paths, scores, allow_cache);
    return stage_report(cfg, ctx, paths, scores, calibration);
}

inline EvalReport run_scenario(const ExperimentConfig& cfg, const std::string& scenario_name, bool allow_cache = true) {
    StagePaths paths{fs::path(cfg.output_dir)};
    const DatasetBundle bundle = stage_dataset(cfg, paths, allow_cache);
    const auto scenarios = resolve_scenarios(cfg, bundle.class_names);
    return run_scenario(cfg, bundle, find_scenario(scenarios, scenario_name), paths, allow_cache);
}

struct ScenarioOutcome {
    std::string name;
    bool ok = false;
    std::string error;
    EvalReport report;
};

struct SuiteReport {
    std::vector<ScenarioOutcome> outcomes;
    Aggregate auroc_aggregate;
    Aggregate accuracy_aggregate;
    std::string config_hash;
};

inline SuiteReport run_loco_suite(const ExperimentConfig& cfg, bool allow_cache = true) {
    StagePaths paths{fs::path(cfg.output_dir)};
    const DatasetBundle bundle = stage_dataset(cfg, paths, allow_cache);
    const auto scenarios = resolve_scenarios(cfg, bundle.class_names);

    SuiteReport suite;
    suite.config_hash = config_hash(cfg);
    std::vector<double> aurocs, accuracies;
    for (const auto& scenario : scenarios) {
        ScenarioOutcome outcome;
        outcome.name = scenario.name;
        try {
            outcome.report = run_scenario(cfg, bundle, scenario, paths, allow_cache);
            outcome.ok = true;
            if (outcome.report.auroc_defined) aurocs.push_back(outcome.report.auroc_unknown);
            if (!std::isnan(outcome.report.closed_accuracy)) accuracies.push_back(outcome.report.closed_accuracy);
        } catch (const std::exception& e) {
            outcome.ok = false;
            outcome.error = e.what();  // isolate failures; remaining scenarios still run
        }
        suite.outcomes.push_back(std::move(outcome));
    }
    suite.auroc_aggregate = aggregate_values(aurocs);
    suite.accuracy_aggregate = aggregate_values(accuracies);

    nlohmann::json rows = nlohmann::json::array();
    for (const auto& o : suite.outcomes) {
        nlohmann::json row;
        row["scenario"] = o.name;
        row["ok"] = o.ok;
        if (o.ok) {
            row["uuc"] = o.report.uuc_name;
            row["auroc_unknown"] = o.report.auroc_defined ? nlohmann::json(o.report.auroc_unknown) : nullptr;
            row["closed_accuracy"] = o.report.closed_accuracy;
            row["quantile"] = o.report.quantile;
            row["tau"] = o.report.tau;
        } else {
            row["error"] = o.error;
        }
        rows.push_back(row);
    }
    nlohmann::json j;
    j["config_hash"] = suite.config_hash;
    j["scenarios"] = rows;
    j["aggregate"] = {{"auroc_mean", suite.auroc_aggregate.mean},
                      {"auroc_std", suite.auroc_aggregate.stddev},
                      {"accuracy_mean", suite.accuracy_aggregate.mean},
                      {"accuracy_std", suite.accuracy_aggregate.stddev},
                      {"count", suite.auroc_aggregate.count}};
    atomic_write_file(paths.suite_report_json().string(), [&](std::ostream& out) { out << j.dump(2) << "\n"; });
    atomic_write_file(paths.suite_report_csv().string(), [&](std::ostream& out) {
        out << "scenario,uuc,auroc_unknown,closed_accuracy,quantile,tau\n";
        for (const auto& o : suite.outcomes) {
            if (!o.ok) {
                out << o.name << ",FAILED,,,,\n";
                continue;
            }
            out << o.name << "," << o.report.uuc_name << ",";
            if (o.report.auroc_defined) out << o.report.auroc_unknown;
            out << "," << o.report.closed_accuracy << "," << o.report.quantile << "," << o.report.tau << "\n";
        }
        out << "average,," << suite.auroc_aggregate.mean << "," << suite.accuracy_aggregate.mean << ",,\n";
    });

    // consolidated static summary
    SummaryInput summary;
    summary.title = "conditional-reconstruction open-set segmentation: run summary";
    summary.auroc_aggregate = suite.auroc_aggregate;
    summary.accuracy_aggregate = suite.accuracy_aggregate;
    for (const auto& o : suite.outcomes) {
        SummaryRow row;
        row.scenario = o.name;
        row.failed = !o.ok;
        row.error = o.error;
        if (o.ok) {
            row.uuc_name = o.report.uuc_name;
            row.auroc_defined = o.report.auroc_defined;
            row.auroc = o.report.auroc_unknown;
            row.closed_accuracy = o.report.closed_accuracy;
            row.quantile = o.report.quantile;
            row.tau = o.report.tau;
        }
        summary.rows.push_back(row);
        const fs::path rdir = paths.renders_dir(o.name);
        summary.images.push_back({o.name,
                                  {{"ground truth", (rdir / "test0_truth.bmp").string()},
                                   {"closed-set", (rdir / "test0_closed.bmp").string()},
                                   {"open-set", (rdir / "test0_open.bmp").string()},
                                   {"min error", (rdir / "test0_error.bmp").string()},
                                   {"ROC", (rdir / "roc.bmp").string()}}});
    }
    const std::string html = emit_summary_html(summary);
    atomic_write_file(paths.summary_html().string(), [&](std::ostream& out) { out << html; });
    return suite;
}

}  // namespace coreseg
