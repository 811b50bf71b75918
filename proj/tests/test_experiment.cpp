#include <doctest.h>

#include <filesystem>

#include "coreseg/experiment.hpp"

using namespace coreseg;
namespace fs = std::filesystem;

namespace {

nlohmann::json micro_config_json(const std::string& out_dir) {
    return nlohmann::json::parse(R"({
      "seed": 5,
      "output_dir": ")" + out_dir + R"(",
      "dataset": {
        "kind": "synthetic",
        "synthetic": {
          "height": 16, "width": 16, "grid_rows": 2, "grid_cols": 2, "num_scenes": 6,
          "channel_names": ["a", "b"],
          "classes": [
            {"name": "dark",   "base": [0.2, 0.3],  "noise": 0.02, "pattern": "none",    "period": 4, "pattern_amp": 0.0},
            {"name": "bright", "base": [0.8, 0.7],  "noise": 0.02, "pattern": "checker", "period": 4, "pattern_amp": 0.1},
            {"name": "blue",   "base": [0.1, 0.75], "noise": 0.02, "pattern": "hstripes","period": 4, "pattern_amp": 0.1}
          ]
        },
        "split": {"train": 0.5, "val": 0.25, "test": 0.25},
        "patch_size": 16, "stride": 16
      },
      "arch": {"blocks": 2, "base_width": 4},
      "closed": {"lr": 0.002, "epochs": 2, "batch": 2},
      "cae": {"alpha": 0.5, "margin": 0.5, "mode": "hinge", "lr": 0.002, "epochs": 2, "batch": 2}
    })");
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("config parsing: defaults, validation paths") {
    const auto cfg = parse_config(micro_config_json("/tmp/x"));
    CHECK(cfg.seed == 5);
    CHECK(cfg.dataset.synth.classes.size() == 3);
    CHECK(cfg.calibration.q_start == 0.05);  // default materialized
    CHECK(cfg.cae.mode == NonmatchMode::hinge);
    CHECK(cfg.scenarios.empty());  // expands to one per class later

    nlohmann::json missing = micro_config_json("/tmp/x");
    missing.erase("dataset");
    CHECK_THROWS_WITH_AS(parse_config(missing), doctest::Contains("/dataset"), ConfigError);

    nlohmann::json bad_type = micro_config_json("/tmp/x");
    bad_type["closed"]["epochs"] = "ten";
    CHECK_THROWS_WITH_AS(parse_config(bad_type), doctest::Contains("/closed/epochs"), ConfigError);

    nlohmann::json bad_batch = micro_config_json("/tmp/x");
    bad_batch["cae"]["batch"] = 1;
    CHECK_THROWS_WITH_AS(parse_config(bad_batch), doctest::Contains("/cae/batch"), ConfigError);

    nlohmann::json dup_class = micro_config_json("/tmp/x");
    dup_class["dataset"]["synthetic"]["classes"][1] = dup_class["dataset"]["synthetic"]["classes"][0];
    dup_class["dataset"]["synthetic"]["classes"][1]["name"] = "copy";
    CHECK_THROWS_WITH_AS(parse_config(dup_class), doctest::Contains("/dataset/synthetic"), ConfigError);
}

TEST_CASE("config hash: deterministic, sensitive to any field") {
    const auto a = parse_config(micro_config_json("/tmp/x"));
    const auto b = parse_config(micro_config_json("/tmp/x"));
    CHECK(config_hash(a) == config_hash(b));

    auto j = micro_config_json("/tmp/x");
    j["cae"]["alpha"] = 0.75;
    CHECK(config_hash(parse_config(j)) != config_hash(a));

    j = micro_config_json("/tmp/x");
    j["seed"] = 6;
    CHECK(config_hash(parse_config(j)) != config_hash(a));
}

TEST_CASE("scenario resolution: auto expansion and unknown class rejection") {
    auto cfg = parse_config(micro_config_json("/tmp/x"));
    const auto expanded = resolve_scenarios(cfg, {"dark", "bright", "blue"});
    REQUIRE(expanded.size() == 3);
    CHECK(expanded[0].name == "uuc_dark");
    CHECK(expanded[2].held_out == std::vector<std::string>{"blue"});

    cfg.scenarios.push_back({"uuc_missing", {"nosuch"}});
    CHECK_THROWS_WITH_AS(resolve_scenarios(cfg, {"dark", "bright", "blue"}), doctest::Contains("nosuch"),
                         ConfigError);
}

TEST_CASE("dataset stage: cache round trip is bit-identical") {
    TempDir tmp("coreseg_exp_dataset");
    auto cfg = parse_config(micro_config_json(tmp.path.string()));
    StagePaths paths{tmp.path};

    const DatasetBundle first = stage_dataset(cfg, paths, true);
    CHECK(first.scenes.size() == 6);
    CHECK(fs::exists(paths.dataset_meta()));

    const DatasetBundle second = stage_dataset(cfg, paths, true);  // loads from disk
    REQUIRE(second.scenes.size() == first.scenes.size());
    for (std::size_t i = 0; i < first.scenes.size(); ++i) {
        CHECK(second.scenes[i].pixels.data == first.scenes[i].pixels.data);
        CHECK(second.scenes[i].mask.labels == first.scenes[i].mask.labels);
    }
    CHECK(second.split.train == first.split.train);
}

TEST_CASE("scenario pipeline: caching, invalidation, deterministic reports") {
    TempDir tmp("coreseg_exp_scenario");
    auto cfg = parse_config(micro_config_json(tmp.path.string()));
    StagePaths paths{tmp.path};

    const EvalReport r1 = run_scenario(cfg, "uuc_blue", true);
    const std::string report_bytes_1 = read_file_bytes(paths.report_file("uuc_blue").string());
    const std::string backbone_meta_1 = read_file_bytes(paths.backbone_meta("uuc_blue").string());
    const std::string cae_meta_1 = read_file_bytes(paths.cae_meta("uuc_blue").string());

    // rerun with unchanged config: stages cached, identical report
    const EvalReport r2 = run_scenario(cfg, "uuc_blue", true);
    CHECK(read_file_bytes(paths.report_file("uuc_blue").string()) == report_bytes_1);
    CHECK(read_file_bytes(paths.backbone_meta("uuc_blue").string()) == backbone_meta_1);
    CHECK(r2.closed_accuracy == r1.closed_accuracy);
    CHECK(r2.auroc_defined == r1.auroc_defined);

    // CAE hyper change: backbone stays cached, CAE stage key changes
    auto j = micro_config_json(tmp.path.string());
    j["cae"]["alpha"] = 0.9;
    const auto cfg2 = parse_config(j);
    run_scenario(cfg2, "uuc_blue", true);
    CHECK(read_file_bytes(paths.backbone_meta("uuc_blue").string()) == backbone_meta_1);
    CHECK(read_file_bytes(paths.cae_meta("uuc_blue").string()) != cae_meta_1);

    // fresh-run determinism: a brand new directory yields byte-identical reports
    TempDir tmp2("coreseg_exp_scenario2");
    auto cfg3 = cfg;
    cfg3.output_dir = tmp2.path.string();
    run_scenario(cfg3, "uuc_blue", true);
    StagePaths paths2{tmp2.path};
    CHECK(read_file_bytes(paths2.report_file("uuc_blue").string()) == report_bytes_1);
}

TEST_CASE("suite: per-class rows, aggregate arithmetic, failure isolation") {
    TempDir tmp("coreseg_exp_suite");
    auto cfg = parse_config(micro_config_json(tmp.path.string()));
    const SuiteReport suite = run_loco_suite(cfg, true);
    REQUIRE(suite.outcomes.size() == 3);
    std::vector<double> aurocs;
    for (const auto& o : suite.outcomes) {
        CHECK(o.ok);
        if (o.report.auroc_defined) aurocs.push_back(o.report.auroc_unknown);
    }
    const Aggregate agg = aggregate_values(aurocs);
    CHECK(std::abs(agg.mean - suite.auroc_aggregate.mean) <= 1e-9);
    CHECK(fs::exists(StagePaths{tmp.path}.suite_report_json()));
    CHECK(fs::exists(StagePaths{tmp.path}.suite_report_csv()));
    CHECK(fs::exists(StagePaths{tmp.path}.summary_html()));

    // a scenario whose held-out class empties the mask is isolated as a failure
    auto cfg_bad = cfg;
    cfg_bad.scenarios = {{"uuc_dark", {"dark"}}, {"uuc_all", {"dark", "bright", "blue"}}};
    const SuiteReport mixed = run_loco_suite(cfg_bad, true);
    REQUIRE(mixed.outcomes.size() == 2);
    CHECK(mixed.outcomes[0].ok);
    CHECK_FALSE(mixed.outcomes[1].ok);
    CHECK_FALSE(mixed.outcomes[1].error.empty());
}

TEST_CASE("artifact chain: cae checkpoint refuses a foreign backbone") {
    TempDir tmp("coreseg_exp_chain");
    auto cfg = parse_config(micro_config_json(tmp.path.string()));
    StagePaths paths{tmp.path};
    const DatasetBundle bundle = stage_dataset(cfg, paths, true);
    const auto scenarios = resolve_scenarios(cfg, bundle.class_names);
    const ScenarioContext ctx = build_scenario_context(cfg, bundle, scenarios[0]);
    const std::string backbone_key = backbone_stage_key(cfg, ctx.spec, bundle.stage_key);
    const UNet<Real> backbone = stage_backbone(cfg, ctx, paths, bundle.stage_key, true);
    stage_cae(cfg, ctx, paths, backbone, backbone_key, true);

    // a backbone trained with another seed has a different fingerprint
    auto cfg2 = cfg;
    cfg2.seed = 77;
    ClosedTrainHyper hyper = cfg2.closed;
    hyper.seed = 77;
    const auto other = train_closed_set<Real>(ctx.arch, ctx.train, ctx.val, hyper);
    const std::string foreign_fp = fingerprint_encoder(other.model);
    CHECK_THROWS_AS(load_cae<Real>(paths.cae_ckpt(ctx.spec.name).string(), foreign_fp), ChainError);
}
