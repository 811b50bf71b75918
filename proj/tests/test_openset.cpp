#include <doctest.h>

#include "coreseg/checkpoint.hpp"
#include "coreseg/openset.hpp"
#include "coreseg/training.hpp"

#include "support.hpp"

using namespace coreseg;
using testsupport::quantile_sort_oracle;
using testsupport::random_tensor;

TEST_CASE("min_reduce: examples, degenerate K, brute-force oracle") {
    ErrorVolume<double> vol;
    vol.height = 1;
    vol.width = 1;
    vol.num_classes = 3;
    vol.errors.resize(3, 1);
    vol.errors << 0.3, 0.1, 0.4;
    const auto sm = min_reduce(vol);
    CHECK(sm.min_error(0) == 0.1);
    CHECK(sm.argmin_class(0) == 1);

    ErrorVolume<double> tie;
    tie.height = 1;
    tie.width = 1;
    tie.num_classes = 2;
    tie.errors.resize(2, 1);
    tie.errors << 0.2, 0.2;
    CHECK(min_reduce(tie).argmin_class(0) == 0);

    ErrorVolume<double> single;
    single.height = 2;
    single.width = 1;
    single.num_classes = 1;
    single.errors.resize(1, 2);
    single.errors << 0.7, 0.2;
    const auto one = min_reduce(single);
    CHECK(one.min_error(0) == 0.7);
    CHECK((one.argmin_class.array() == 0).all());

    ErrorVolume<double> empty;
    CHECK_THROWS_AS(min_reduce(empty), ValueError);

    // random volumes against an exhaustive per-pixel scan
    Rng rng(5);
    for (int rep = 0; rep < 20; ++rep) {
        ErrorVolume<double> v;
        v.height = 3;
        v.width = 4;
        v.num_classes = 2 + rng.uniform_int(4);
        v.errors = MatX<double>::NullaryExpr(v.num_classes, 12,
                                             [&](Eigen::Index, Eigen::Index) { return rng.uniform(0.0, 1.0); });
        const auto got = min_reduce(v);
        for (Eigen::Index p = 0; p < 12; ++p) {
            double best = v.errors(0, p);
            int arg = 0;
            for (int k = 1; k < v.num_classes; ++k) {
                if (v.errors(k, p) < best) {
                    best = v.errors(k, p);
                    arg = k;
                }
            }
            CHECK(got.min_error(p) == best);
            CHECK(got.argmin_class(p) == arg);
        }
    }
}

TEST_CASE("quantile: boundary semantics and oracle agreement") {
    std::vector<double> scores = {1.0, 2.0, 3.0, 4.0};
    CHECK(calibrate_threshold(scores, 0.5).tau == doctest::Approx(2.5).epsilon(1e-15));
    CHECK(calibrate_threshold(scores, 0.0).tau == 1.0);

    // q = 1: tau just above the max so nothing is rejected under ">= tau"
    const double tau1 = calibrate_threshold(scores, 1.0).tau;
    CHECK(tau1 > 4.0);
    CHECK(tau1 == std::nextafter(4.0, std::numeric_limits<double>::infinity()));

    Rng rng(11);
    for (int rep = 0; rep < 50; ++rep) {
        std::vector<double> vals;
        const int n = 1 + rng.uniform_int(200);
        for (int i = 0; i < n; ++i) vals.push_back(rng.uniform(-5.0, 5.0));
        for (double q : {0.05, 0.17, 0.25, 0.5, 0.73, 0.95}) {
            const double got = calibrate_threshold(vals, q).tau;
            const double expect = quantile_sort_oracle(vals, q);
            CHECK(std::abs(got - expect) <= 1e-12);
        }
    }

    CHECK_THROWS_AS(calibrate_threshold({}, 0.5), ValueError);
    CHECK_THROWS_AS(calibrate_threshold(scores, 1.5), ValueError);
    CHECK_THROWS_AS(calibrate_threshold(scores, -0.1), ValueError);
}

TEST_CASE("streaming calibrator matches one-shot calibration") {
    Rng rng(3);
    std::vector<double> all;
    StreamingCalibrator cal;
    for (int chunk = 0; chunk < 5; ++chunk) {
        ArrX<float> c(7);
        for (Eigen::Index i = 0; i < 7; ++i) {
            c(i) = static_cast<float>(rng.uniform(0.0, 1.0));
            all.push_back(static_cast<double>(c(i)));
        }
        cal.add_chunk(c);
    }
    CHECK(cal.count() == 35);
    CHECK(cal.calibrate(0.4).tau == calibrate_threshold(all, 0.4).tau);
}

TEST_CASE("fuse: decision rule, boundaries, idempotence") {
    LabelMask closed(2, 2, 3);
    closed.labels << 0, 1, 2, 1;
    ScoreMap<double> sm;
    sm.height = 2;
    sm.width = 2;
    sm.min_error.resize(4);
    sm.min_error << 0.1, 0.9, 0.4, 0.6;
    sm.argmin_class = Eigen::VectorXi::Zero(4);

    ThresholdSpec spec;
    spec.tau = 0.5;
    const OpenSetPrediction pred = fuse(closed, sm, spec);
    CHECK(pred.labels.labels(0) == 0);
    CHECK(pred.labels.labels(1) == 3);  // unknown
    CHECK(pred.labels.labels(2) == 2);
    CHECK(pred.labels.labels(3) == 3);  // equality -> threshold is strict "below"

    ThresholdSpec low;
    low.tau = 0.05;
    CHECK((fuse(closed, sm, low).labels.labels.array() == 3).all());
    ThresholdSpec high;
    high.tau = 2.0;
    CHECK(fuse(closed, sm, high).labels.labels == closed.labels);

    // pure function: same inputs, same outputs
    const OpenSetPrediction again = fuse(closed, sm, spec);
    CHECK(again.labels.labels == pred.labels.labels);

    LabelMask wrong(3, 2, 3);
    CHECK_THROWS_AS(fuse(wrong, sm, spec), ShapeError);
}

TEST_CASE("unknown count is weakly decreasing in q; rank thresholding is transform invariant") {
    Rng rng(21);
    std::vector<double> scores;
    for (int i = 0; i < 500; ++i) scores.push_back(rng.uniform(0.0, 3.0));

    long prev_unknown = std::numeric_limits<long>::max();
    for (int qi = 0; qi <= 20; ++qi) {
        const double q = qi * 0.05;
        const double tau = calibrate_threshold(scores, q).tau;
        long unknown = 0;
        for (double s : scores) unknown += s >= tau ? 1 : 0;
        if (qi == 0) CHECK(unknown == 500);
        if (qi == 20) CHECK(unknown == 0);
        CHECK(unknown <= prev_unknown);
        prev_unknown = unknown;
    }

    // strictly increasing transform leaves the rejected set unchanged
    for (double q : {0.05, 0.35, 0.6, 0.9}) {
        const double tau = calibrate_threshold(scores, q).tau;
        std::vector<double> transformed;
        for (double s : scores) transformed.push_back(std::exp(s) + 3.0 * s);
        const double tau_t = calibrate_threshold(transformed, q).tau;
        for (std::size_t i = 0; i < scores.size(); ++i) {
            CHECK((scores[i] >= tau) == (transformed[i] >= tau_t));
        }
    }
}

TEST_CASE("sweep: slice reproducibility and parallel/sequential bitwise equality") {
    Rng rng(7);
    const ArchDescriptor arch{2, 4, 3, 3};
    UNet<float> backbone = init_unet<float>(arch, rng);
    Cae<float> cae = init_cae<float>(arch, rng);
    const Tensor3<float> x = random_tensor<float>(8, 8, 3, rng, 0.0, 1.0);

    const ErrorVolume<float> vol = sweep_conditionings(backbone, cae, x, false);
    REQUIRE(vol.num_classes == 3);
    CHECK((vol.errors.array() >= 0.0f).all());
    CHECK(vol.errors.allFinite());

    // slice k reproducible by a single manual conditioned pass
    const EncoderTrace<float> enc = encoder_forward(backbone, x);
    for (int k = 0; k < 3; ++k) {
        const auto cond = class_constant_map<float>(k, 8, 8, 3);
        const auto trace = cae_forward(cae, enc.act, cond);
        const auto em = l1_error_map(x, trace.recon);
        CHECK(vol.errors.row(k).transpose() == em.values.matrix());
    }

    const ErrorVolume<float> par = sweep_conditionings(backbone, cae, x, true);
    CHECK(par.errors == vol.errors);  // bitwise

    // architecture mismatch is rejected
    Cae<float> other = init_cae<float>(ArchDescriptor{2, 4, 2, 3}, rng);
    CHECK_THROWS_AS(sweep_conditionings(backbone, other, x, false), ShapeError);
}

TEST_CASE("cae checkpoint round trip and backbone link verification") {
    namespace fs = std::filesystem;
    Rng rng(15);
    const ArchDescriptor arch{2, 4, 2, 3};
    Cae<float> cae = init_cae<float>(arch, rng);
    CaeTrainHyper hyper{0.5, 0.5, NonmatchMode::hinge, 1e-3, 5, 4, 9};

    const auto dir = fs::temp_directory_path() / "coreseg_cae_ckpt";
    fs::create_directories(dir);
    const std::string path = (dir / "cae.ckpt").string();
    save_cae(path, cae, hyper, "feedbeef00000000");

    const auto back = load_cae<float>(path, "feedbeef00000000");
    CHECK(fingerprint_cae(const_cast<Cae<float>&>(back.model)) == fingerprint_cae(cae));
    CHECK(back.hyper.alpha == hyper.alpha);
    CHECK(back.hyper.mode == NonmatchMode::hinge);
    CHECK(back.backbone_fingerprint == "feedbeef00000000");

    CHECK_THROWS_AS(load_cae<float>(path, "0000000000000000"), ChainError);
    fs::remove_all(dir);
}
