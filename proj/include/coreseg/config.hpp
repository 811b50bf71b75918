#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "coreseg/backbone.hpp"
#include "coreseg/data.hpp"
#include "coreseg/hash.hpp"
#include "coreseg/npy.hpp"
#include "coreseg/training.hpp"

namespace coreseg {

// Declarative experiment configuration, parsed from JSON with field-path
// error reporting. Unspecified fields take the documented defaults; the
// config hash is computed over the fully materialized form so that defaults
// participate in cache keys.

struct ScenarioSpec {
    std::string name;
    std::vector<std::string> held_out;  // class names treated as unknown
};

struct DatasetConfig {
    enum class Kind { synthetic, files };
    Kind kind = Kind::synthetic;

    // synthetic
    SyntheticSceneSpec synth;  // seed ignored; per-scene seeds derive from the master seed
    int num_scenes = 16;

    // files
    std::string scenes_dir;
    std::vector<std::string> scene_ids;

    SplitFractions split;
    bool explicit_split = false;
    std::vector<std::string> split_train, split_val, split_test;

    int patch_size = 64;
    int stride = 64;
    bool normalize = true;
};

struct CalibrationConfig {
    double q_start = 0.05;
    double q_stop = 0.95;
    double q_step = 0.05;

    std::vector<double> grid() const {
        std::vector<double> qs;
        for (int i = 0;; ++i) {
            const double q = q_start + i * q_step;
            if (q > q_stop + 1e-12) break;
            qs.push_back(q);
        }
        if (qs.empty()) throw ConfigError("/calibration: empty quantile grid");
        return qs;
    }
};

struct ExperimentConfig {
    std::uint64_t seed = 0;
    DatasetConfig dataset;
    std::vector<ScenarioSpec> scenarios;  // empty: one scenario per class
    int arch_blocks = 4;
    int arch_base_width = 32;
    ClosedTrainHyper closed;
    CaeTrainHyper cae;
    CalibrationConfig calibration;
    std::string output_dir = "out";
};

namespace cfgdetail {

inline const nlohmann::json* find(const nlohmann::json& j, const std::string& key) {
    const auto it = j.find(key);
    return it == j.end() ? nullptr : &*it;
}

inline double require_number(const nlohmann::json& j, const std::string& path, const std::string& key, double dflt,
                             bool required = false) {
    const auto* v = find(j, key);
    if (!v) {
        if (required) throw ConfigError(path + "/" + key + ": required field is missing");
        return dflt;
    }
    if (!v->is_number()) throw ConfigError(path + "/" + key + ": expected a number");
    return v->get<double>();
}

inline int require_int(const nlohmann::json& j, const std::string& path, const std::string& key, int dflt,
                       bool required = false) {
    const auto* v = find(j, key);
    if (!v) {
        if (required) throw ConfigError(path + "/" + key + ": required field is missing");
        return dflt;
    }
    if (!v->is_number_integer()) throw ConfigError(path + "/" + key + ": expected an integer");
    return v->get<int>();
}

inline std::string require_string(const nlohmann::json& j, const std::string& path, const std::string& key,
                                  const std::string& dflt, bool required = false) {
    const auto* v = find(j, key);
    if (!v) {
        if (required) throw ConfigError(path + "/" + key + ": required field is missing");
        return dflt;
    }
    if (!v->is_string()) throw ConfigError(path + "/" + key + ": expected a string");
    return v->get<std::string>();
}

inline bool require_bool(const nlohmann::json& j, const std::string& path, const std::string& key, bool dflt) {
    const auto* v = find(j, key);
    if (!v) return dflt;
    if (!v->is_boolean()) throw ConfigError(path + "/" + key + ": expected a boolean");
    return v->get<bool>();
}

}  // namespace cfgdetail

inline ExperimentConfig parse_config(const nlohmann::json& j) {
    using namespace cfgdetail;
    if (!j.is_object()) throw ConfigError("/: config must be a JSON object");
    ExperimentConfig cfg;
    cfg.seed = static_cast<std::uint64_t>(require_number(j, "", "seed", 0));
    cfg.output_dir = require_string(j, "", "output_dir", "out");

    const auto* ds = find(j, "dataset");
    if (!ds) throw ConfigError("/dataset: required section is missing");
    if (!ds->is_object()) throw ConfigError("/dataset: expected an object");
    const std::string kind = require_string(*ds, "/dataset", "kind", "synthetic");
    if (kind == "synthetic") {
        cfg.dataset.kind = DatasetConfig::Kind::synthetic;
        const auto* sy = find(*ds, "synthetic");
        if (!sy) throw ConfigError("/dataset/synthetic: required section is missing for kind 'synthetic'");
        cfg.dataset.synth.height = require_int(*sy, "/dataset/synthetic", "height", 64);
        cfg.dataset.synth.width = require_int(*sy, "/dataset/synthetic", "width", 64);
        cfg.dataset.synth.grid_rows = require_int(*sy, "/dataset/synthetic", "grid_rows", 2);
        cfg.dataset.synth.grid_cols = require_int(*sy, "/dataset/synthetic", "grid_cols", 2);
        cfg.dataset.num_scenes = require_int(*sy, "/dataset/synthetic", "num_scenes", 16);
        const auto* ch = find(*sy, "channel_names");
        if (!ch || !ch->is_array() || ch->empty()) {
            throw ConfigError("/dataset/synthetic/channel_names: expected a non-empty array of strings");
        }
        for (const auto& c : *ch) {
            if (!c.is_string()) throw ConfigError("/dataset/synthetic/channel_names: expected strings");
            cfg.dataset.synth.channel_names.push_back(c.get<std::string>());
        }
        const auto* cls = find(*sy, "classes");
        if (!cls || !cls->is_array() || cls->size() < 2) {
            throw ConfigError("/dataset/synthetic/classes: expected an array of at least 2 classes");
        }
        int ci = 0;
        for (const auto& c : *cls) {
            const std::string cpath = "/dataset/synthetic/classes/" + std::to_string(ci++);
            ClassTexture tex;
            tex.name = require_string(c, cpath, "name", "", true);
            const auto* base = find(c, "base");
            if (!base || !base->is_array() || base->size() != cfg.dataset.synth.channel_names.size()) {
                throw ConfigError(cpath + "/base: expected an array with one value per channel");
            }
            for (const auto& b : *base) tex.base.push_back(b.get<double>());
            tex.noise_amp = require_number(c, cpath, "noise", 0.0);
            tex.pattern = pattern_from_name(require_string(c, cpath, "pattern", "none"));
            tex.period = require_int(c, cpath, "period", 8);
            tex.pattern_amp = require_number(c, cpath, "pattern_amp", 0.0);
            cfg.dataset.synth.classes.push_back(std::move(tex));
        }
        cfg.dataset.synth.seed = 0;
        try {
            cfg.dataset.synth.validate();
        } catch (const Error& e) {
            throw ConfigError(std::string("/dataset/synthetic: ") + e.what());
        }
    } else if (kind == "files") {
        cfg.dataset.kind = DatasetConfig::Kind::files;
        cfg.dataset.scenes_dir = require_string(*ds, "/dataset", "scenes_dir", "", true);
        const auto* ids = find(*ds, "scene_ids");
        if (!ids || !ids->is_array() || ids->empty()) {
            throw ConfigError("/dataset/scene_ids: expected a non-empty array of scene ids");
        }
        for (const auto& id : *ids) cfg.dataset.scene_ids.push_back(id.get<std::string>());
    } else {
        throw ConfigError("/dataset/kind: expected 'synthetic' or 'files', got '" + kind + "'");
    }

    cfg.dataset.patch_size = require_int(*ds, "/dataset", "patch_size", 64);
    cfg.dataset.stride = require_int(*ds, "/dataset", "stride", cfg.dataset.patch_size);
    cfg.dataset.normalize = require_bool(*ds, "/dataset", "normalize", true);
    if (cfg.dataset.patch_size <= 0) throw ConfigError("/dataset/patch_size: must be positive");
    if (cfg.dataset.stride <= 0) throw ConfigError("/dataset/stride: must be positive");

    if (const auto* sp = find(*ds, "split")) {
        if (sp->is_object() && find(*sp, "train_scenes")) {
            cfg.dataset.explicit_split = true;
            for (const auto& s : sp->at("train_scenes")) cfg.dataset.split_train.push_back(s.get<std::string>());
            for (const auto& s : sp->at("val_scenes")) cfg.dataset.split_val.push_back(s.get<std::string>());
            for (const auto& s : sp->at("test_scenes")) cfg.dataset.split_test.push_back(s.get<std::string>());
        } else {
            cfg.dataset.split.train = require_number(*sp, "/dataset/split", "train", 0.6);
            cfg.dataset.split.val = require_number(*sp, "/dataset/split", "val", 0.2);
            cfg.dataset.split.test = require_number(*sp, "/dataset/split", "test", 0.2);
        }
    }

    if (const auto* sc = find(j, "scenarios")) {
        if (!sc->is_array()) throw ConfigError("/scenarios: expected an array");
        int si = 0;
        for (const auto& s : *sc) {
            const std::string spath = "/scenarios/" + std::to_string(si++);
            ScenarioSpec spec;
            spec.name = require_string(s, spath, "name", "", true);
            const auto* held = find(s, "held_out");
            if (!held || !held->is_array() || held->empty()) {
                throw ConfigError(spath + "/held_out: expected a non-empty array of class names");
            }
            for (const auto& h : *held) spec.held_out.push_back(h.get<std::string>());
            cfg.scenarios.push_back(std::move(spec));
        }
    }

    if (const auto* arch = find(j, "arch")) {
        cfg.arch_blocks = require_int(*arch, "/arch", "blocks", 4);
        cfg.arch_base_width = require_int(*arch, "/arch", "base_width", 32);
        if (cfg.arch_blocks < 2) throw ConfigError("/arch/blocks: need at least 2 blocks");
        if (cfg.arch_base_width < 1) throw ConfigError("/arch/base_width: must be positive");
    }

    if (const auto* cl = find(j, "closed")) {
        cfg.closed.lr = require_number(*cl, "/closed", "lr", 1e-3);
        cfg.closed.epochs = require_int(*cl, "/closed", "epochs", 30);
        cfg.closed.batch = require_int(*cl, "/closed", "batch", 4);
        if (cfg.closed.epochs < 1) throw ConfigError("/closed/epochs: must be positive");
        if (cfg.closed.batch < 1) throw ConfigError("/closed/batch: must be positive");
    }

    if (const auto* ca = find(j, "cae")) {
        cfg.cae.alpha = require_number(*ca, "/cae", "alpha", 0.5);
        cfg.cae.margin = require_number(*ca, "/cae", "margin", 0.5);
        try {
            cfg.cae.mode = nonmatch_mode_from_name(require_string(*ca, "/cae", "mode", "hinge"));
        } catch (const Error& e) {
            throw ConfigError(std::string("/cae/mode: ") + e.what());
        }
        cfg.cae.lr = require_number(*ca, "/cae", "lr", 1e-3);
        cfg.cae.epochs = require_int(*ca, "/cae", "epochs", 30);
        cfg.cae.batch = require_int(*ca, "/cae", "batch", 4);
        if (cfg.cae.epochs < 1) throw ConfigError("/cae/epochs: must be positive");
        if (cfg.cae.batch < 2) throw ConfigError("/cae/batch: non-match pairing needs batch >= 2");
    }

    if (const auto* cal = find(j, "calibration")) {
        cfg.calibration.q_start = require_number(*cal, "/calibration", "q_start", 0.05);
        cfg.calibration.q_stop = require_number(*cal, "/calibration", "q_stop", 0.95);
        cfg.calibration.q_step = require_number(*cal, "/calibration", "q_step", 0.05);
        if (cfg.calibration.q_step <= 0) throw ConfigError("/calibration/q_step: must be positive");
        if (cfg.calibration.q_start < 0 || cfg.calibration.q_stop > 1) {
            throw ConfigError("/calibration: quantile grid must lie within [0, 1]");
        }
    }
    return cfg;
}

inline ExperimentConfig load_config_file(const std::string& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file_bytes(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(path + ": " + e.what());
    } catch (const IoError& e) {
        throw ConfigError(e.what());
    }
    return parse_config(j);
}

// Fully materialized canonical form; nlohmann orders object keys, so the dump
// is deterministic and any effective field change alters the hash. The output
// directory is a storage location, not an experiment parameter, and is
// deliberately excluded.
inline nlohmann::json config_to_json(const ExperimentConfig& cfg) {
    nlohmann::json j;
    j["seed"] = cfg.seed;
    nlohmann::json ds;
    if (cfg.dataset.kind == DatasetConfig::Kind::synthetic) {
        ds["kind"] = "synthetic";
        nlohmann::json sy;
        sy["height"] = cfg.dataset.synth.height;
        sy["width"] = cfg.dataset.synth.width;
        sy["grid_rows"] = cfg.dataset.synth.grid_rows;
        sy["grid_cols"] = cfg.dataset.synth.grid_cols;
        sy["num_scenes"] = cfg.dataset.num_scenes;
        sy["channel_names"] = cfg.dataset.synth.channel_names;
        nlohmann::json cls = nlohmann::json::array();
        for (const auto& c : cfg.dataset.synth.classes) {
            cls.push_back({{"name", c.name},
                           {"base", c.base},
                           {"noise", c.noise_amp},
                           {"pattern", pattern_name(c.pattern)},
                           {"period", c.period},
                           {"pattern_amp", c.pattern_amp}});
        }
        sy["classes"] = cls;
        ds["synthetic"] = sy;
    } else {
        ds["kind"] = "files";
        ds["scenes_dir"] = cfg.dataset.scenes_dir;
        ds["scene_ids"] = cfg.dataset.scene_ids;
    }
    if (cfg.dataset.explicit_split) {
        ds["split"] = {{"train_scenes", cfg.dataset.split_train},
                       {"val_scenes", cfg.dataset.split_val},
                       {"test_scenes", cfg.dataset.split_test}};
    } else {
        ds["split"] = {{"train", cfg.dataset.split.train}, {"val", cfg.dataset.split.val},
                       {"test", cfg.dataset.split.test}};
    }
    ds["patch_size"] = cfg.dataset.patch_size;
    ds["stride"] = cfg.dataset.stride;
    ds["normalize"] = cfg.dataset.normalize;
    j["dataset"] = ds;

    nlohmann::json sc = nlohmann::json::array();
    for (const auto& s : cfg.scenarios) sc.push_back({{"name", s.name}, {"held_out", s.held_out}});
    j["scenarios"] = sc;
    j["arch"] = {{"blocks", cfg.arch_blocks}, {"base_width", cfg.arch_base_width}};
    j["closed"] = {{"lr", cfg.closed.lr}, {"epochs", cfg.closed.epochs}, {"batch", cfg.closed.batch}};
    j["cae"] = {{"alpha", cfg.cae.alpha},   {"margin", cfg.cae.margin}, {"mode", nonmatch_mode_name(cfg.cae.mode)},
                {"lr", cfg.cae.lr},         {"epochs", cfg.cae.epochs}, {"batch", cfg.cae.batch}};
    j["calibration"] = {{"q_start", cfg.calibration.q_start},
                        {"q_stop", cfg.calibration.q_stop},
                        {"q_step", cfg.calibration.q_step}};
    return j;
}

inline std::string config_hash(const ExperimentConfig& cfg) { return fnv1a_hex(config_to_json(cfg).dump()); }

}  // namespace coreseg
