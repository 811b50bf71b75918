// Command-line front end for the conditional-reconstruction open-set
// segmentation pipeline. Exit codes: 0 success, 2 configuration error,
// 3 stage failure, 4 artifact-chain mismatch.

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>

#include "coreseg/experiment.hpp"

namespace {

struct CommonOpts {
    std::string config_path;
    std::string scenario;
    std::string out_dir;
    long long seed = -1;
    bool resume = true;
};

void add_common(CLI::App* cmd, CommonOpts& opts, bool needs_scenario) {
    cmd->add_option("--config", opts.config_path, "experiment config (JSON)")->required();
    if (needs_scenario) {
        cmd->add_option("--scenario", opts.scenario, "scenario name (e.g. uuc_water)");
    }
    cmd->add_option("--out", opts.out_dir, "output directory (overrides config)");
    cmd->add_option("--seed", opts.seed, "master seed (overrides config)");
    cmd->add_flag("--resume,!--no-resume", opts.resume, "reuse valid cached stage artifacts (default on)");
}

coreseg::ExperimentConfig load_with_overrides(const CommonOpts& opts) {
    coreseg::ExperimentConfig cfg = coreseg::load_config_file(opts.config_path);
    if (!opts.out_dir.empty()) cfg.output_dir = opts.out_dir;
    if (opts.seed >= 0) cfg.seed = static_cast<std::uint64_t>(opts.seed);
    return cfg;
}

struct ScenarioSetup {
    coreseg::DatasetBundle bundle;
    coreseg::ScenarioContext ctx;
    coreseg::StagePaths paths;
    std::string backbone_key;
};

ScenarioSetup prepare_scenario(const coreseg::ExperimentConfig& cfg, const CommonOpts& opts) {
    if (opts.scenario.empty()) {
        throw coreseg::ConfigError("--scenario is required for this command");
    }
    ScenarioSetup setup;
    setup.paths = coreseg::StagePaths{std::filesystem::path(cfg.output_dir)};
    setup.bundle = coreseg::stage_dataset(cfg, setup.paths, opts.resume);
    const auto scenarios = coreseg::resolve_scenarios(cfg, setup.bundle.class_names);
    setup.ctx = coreseg::build_scenario_context(cfg, setup.bundle, coreseg::find_scenario(scenarios, opts.scenario));
    setup.backbone_key = coreseg::backbone_stage_key(cfg, setup.ctx.spec, setup.bundle.stage_key);
    return setup;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"conditional reconstruction for open-set semantic segmentation"};
    app.require_subcommand(1);

    CommonOpts synth_opts, closed_opts, cae_opts, infer_opts, cal_opts, eval_opts, suite_opts;

    auto* synth = app.add_subcommand("synth-data", "generate the synthetic scene dataset");
    add_common(synth, synth_opts, false);
    auto* closed = app.add_subcommand("train-closed", "train the closed-set segmentation backbone");
    add_common(closed, closed_opts, true);
    auto* cae = app.add_subcommand("train-cae", "train the conditional reconstruction autoencoder");
    add_common(cae, cae_opts, true);
    auto* infer = app.add_subcommand("infer", "sweep conditionings and write error volumes / score maps");
    add_common(infer, infer_opts, true);
    auto* calibrate = app.add_subcommand("calibrate", "calibrate the unknown threshold on validation scores");
    add_common(calibrate, cal_opts, true);
    auto* evaluate = app.add_subcommand("evaluate", "fuse, evaluate on the test split and render reports");
    add_common(evaluate, eval_opts, true);
    auto* suite = app.add_subcommand("run-suite", "run every leave-one-class-out scenario and aggregate");
    add_common(suite, suite_opts, false);

    CLI11_PARSE(app, argc, argv);

    try {
        if (synth->parsed()) {
            const auto cfg = load_with_overrides(synth_opts);
            if (cfg.dataset.kind != coreseg::DatasetConfig::Kind::synthetic) {
                throw coreseg::ConfigError("synth-data requires dataset kind 'synthetic'");
            }
            coreseg::StagePaths paths{std::filesystem::path(cfg.output_dir)};
            const auto bundle = coreseg::stage_dataset(cfg, paths, synth_opts.resume);
            std::cout << "wrote " << bundle.scenes.size() << " scenes to " << paths.scenes_dir().string() << "\n"
                      << "split: " << bundle.split.train.size() << " train / " << bundle.split.val.size()
                      << " val / " << bundle.split.test.size() << " test\n";
        } else if (closed->parsed()) {
            const auto cfg = load_with_overrides(closed_opts);
            auto setup = prepare_scenario(cfg, closed_opts);
            auto backbone = coreseg::stage_backbone(cfg, setup.ctx, setup.paths, setup.bundle.stage_key,
                                                    closed_opts.resume);
            std::cout << "backbone ready: " << setup.paths.backbone_ckpt(setup.ctx.spec.name).string()
                      << "\nencoder fingerprint: " << coreseg::fingerprint_encoder(backbone) << "\n";
        } else if (cae->parsed()) {
            const auto cfg = load_with_overrides(cae_opts);
            auto setup = prepare_scenario(cfg, cae_opts);
            auto backbone =
                coreseg::stage_backbone(cfg, setup.ctx, setup.paths, setup.bundle.stage_key, cae_opts.resume);
            auto model = coreseg::stage_cae(cfg, setup.ctx, setup.paths, backbone, setup.backbone_key,
                                            cae_opts.resume);
            std::cout << "cae ready: " << setup.paths.cae_ckpt(setup.ctx.spec.name).string()
                      << "\ncae fingerprint: " << coreseg::fingerprint_cae(model) << "\n";
        } else if (infer->parsed() || calibrate->parsed() || evaluate->parsed()) {
            const CommonOpts& opts = infer->parsed() ? infer_opts : (calibrate->parsed() ? cal_opts : eval_opts);
            const auto cfg = load_with_overrides(opts);
            auto setup = prepare_scenario(cfg, opts);
            auto backbone = coreseg::stage_backbone(cfg, setup.ctx, setup.paths, setup.bundle.stage_key, opts.resume);
            auto model = coreseg::stage_cae(cfg, setup.ctx, setup.paths, backbone, setup.backbone_key, opts.resume);
            const std::string cae_key =
                coreseg::cae_stage_key(cfg, setup.backbone_key, coreseg::fingerprint_encoder(backbone));
            const auto scores =
                coreseg::stage_scores(cfg, setup.ctx, setup.paths, backbone, model, cae_key, opts.resume);
            if (infer->parsed()) {
                std::cout << "scores written to " << setup.paths.scores_dir(setup.ctx.spec.name).string() << " ("
                          << scores.val.volumes.size() << " val / " << scores.test.volumes.size()
                          << " test patches, " << setup.ctx.loco.num_known << " classes)\n";
            } else {
                const auto calibration = coreseg::stage_calibrate(cfg, setup.ctx, setup.paths, scores, opts.resume);
                if (calibrate->parsed()) {
                    std::cout << "threshold: tau=" << calibration.threshold.tau
                              << " at q=" << calibration.threshold.quantile << " ("
                              << calibration.threshold.calibration_source << ")\n";
                } else {
                    const auto report = coreseg::stage_report(cfg, setup.ctx, setup.paths, scores, calibration);
                    std::cout << "scenario " << report.scenario << " (held out: " << report.uuc_name << ")\n"
                              << "  auroc_unknown: "
                              << (report.auroc_defined ? std::to_string(report.auroc_unknown)
                                                       : std::string("undefined"))
                              << "\n  closed_accuracy: " << report.closed_accuracy << "\n  report: "
                              << setup.paths.report_file(setup.ctx.spec.name).string() << "\n";
                }
            }
        } else if (suite->parsed()) {
            const auto cfg = load_with_overrides(suite_opts);
            const auto result = coreseg::run_loco_suite(cfg, suite_opts.resume);
            bool any_failed = false;
            for (const auto& o : result.outcomes) {
                if (o.ok) {
                    std::cout << o.name << ": auroc="
                              << (o.report.auroc_defined ? std::to_string(o.report.auroc_unknown)
                                                         : std::string("undefined"))
                              << " accuracy=" << o.report.closed_accuracy << "\n";
                } else {
                    any_failed = true;
                    std::cout << o.name << ": FAILED (" << o.error << ")\n";
                }
            }
            if (result.auroc_aggregate.count > 0) {
                std::printf("average auroc: %.3f +/- %.3f over %d scenarios\n", result.auroc_aggregate.mean,
                            result.auroc_aggregate.stddev, result.auroc_aggregate.count);
            }
            coreseg::StagePaths paths{std::filesystem::path(cfg.output_dir)};
            std::cout << "summary: " << paths.summary_html().string() << "\n";
            if (any_failed) return 3;
        }
    } catch (const coreseg::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const coreseg::ChainError& e) {
        std::cerr << "artifact chain error: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "stage failure: " << e.what() << "\n";
        return 3;
    }
    return 0;
}
