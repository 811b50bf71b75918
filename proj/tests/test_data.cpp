#include <doctest.h>

#include <filesystem>
#include <map>
#include <set>

#include "coreseg/data.hpp"

#include "support.hpp"

using namespace coreseg;

namespace {

SyntheticSceneSpec toy_spec(std::uint64_t seed, double noise = 0.02) {
    SyntheticSceneSpec spec;
    spec.height = 64;
    spec.width = 64;
    spec.channel_names = {"ir", "red", "green"};
    spec.grid_rows = 2;
    spec.grid_cols = 2;
    spec.seed = seed;
    spec.classes = {
        {"plains", {0.15, 0.25, 0.20}, noise, TexturePattern::none, 8, 0.0},
        {"urban", {0.70, 0.65, 0.60}, noise, TexturePattern::checker, 8, 0.15},
        {"water", {0.10, 0.20, 0.70}, noise, TexturePattern::hstripes, 8, 0.10},
        {"forest", {0.30, 0.80, 0.25}, noise, TexturePattern::vstripes, 8, 0.10},
    };
    return spec;
}

Scene<double> scene_from_sample(const Sample<double>& sample, const std::string& id,
                                const std::vector<std::string>& class_names) {
    Scene<double> scene;
    scene.id = id;
    scene.pixels = sample.image.pixels;
    scene.channel_names = sample.image.channel_names;
    scene.class_names = class_names;
    scene.mask = sample.mask;
    return scene;
}

}  // namespace

TEST_CASE("patch anchors: exact grid") {
    CHECK(patch_anchors(8, 4, 4) == std::vector<int>{0, 4});
    CHECK(patch_anchors(4, 4, 1) == std::vector<int>{0});
}

TEST_CASE("patch anchors: border clamp matches enumeration oracle") {
    // oracle: a_k = max(0, min(k*stride, size - patch)), deduplicated in order
    for (int size : {7, 10, 16, 33}) {
        for (int patch : {3, 4, 7}) {
            if (patch > size) continue;
            for (int stride : {1, 2, 3, 4, 5}) {
                std::vector<int> expect;
                for (int k = 0;; ++k) {
                    const int a = std::max(0, std::min(k * stride, size - patch));
                    if (!expect.empty() && a <= expect.back()) break;
                    expect.push_back(a);
                    if (a == size - patch) break;
                }
                CHECK(patch_anchors(size, patch, stride) == expect);
            }
        }
    }
    // the 10x10, patch 4, stride 4 case: anchors 0,4,6 per axis -> 9 patches
    CHECK(patch_anchors(10, 4, 4) == std::vector<int>{0, 4, 6});
}

TEST_CASE("extract_patches: counts, origins, coverage, errors") {
    Rng rng(3);
    auto spec = toy_spec(11);
    spec.height = 10;
    spec.width = 10;
    const auto sample = generate_synthetic<double>(spec);
    const Scene<double> scene = scene_from_sample(sample, "s0", {"plains", "urban", "water", "forest"});

    const auto patches = extract_patches(scene, 4, 4);
    CHECK(patches.size() == 9);
    CHECK(patches.front().image.origin.scene_id == "s0");
    CHECK(patches.back().image.origin.row_offset == 6);
    CHECK(patches.back().image.origin.col_offset == 6);

    // coverage: every pixel appears in at least one patch, and patch content
    // matches the scene at its origin
    Eigen::MatrixXi covered = Eigen::MatrixXi::Zero(10, 10);
    for (const auto& p : patches) {
        for (int y = 0; y < 4; ++y) {
            for (int x = 0; x < 4; ++x) {
                const int sy = p.image.origin.row_offset + y;
                const int sx = p.image.origin.col_offset + x;
                covered(sy, sx) = 1;
                CHECK(p.image.pixels.at(y, x, 0) == scene.pixels.at(sy, sx, 0));
                CHECK(p.mask.at(y, x) == scene.mask.at(sy, sx));
            }
        }
    }
    CHECK(covered.minCoeff() == 1);

    CHECK_THROWS_AS(extract_patches(scene, 11, 4), ValueError);
    CHECK_THROWS_AS(extract_patches(scene, 4, 0), ValueError);

    // whole-scene patch
    const auto one = extract_patches(scene, 10, 10);
    CHECK(one.size() == 1);
    CHECK(one.front().image.origin.row_offset == 0);
}

TEST_CASE("apply_loco: dense renumbering, sentinels, round trip") {
    const LocoSpec spec = LocoSpec::make({"a", "b", "c"}, {1});
    CHECK(spec.num_known == 2);
    CHECK(spec.remap == std::vector<int>{0, 2, 1});  // 1 -> unknown sentinel (=2)

    LabelMask mask(1, 3, 3);
    mask.labels << 0, 1, 2;
    const LabelMask out = apply_loco(mask, spec);
    CHECK(out.num_known == 2);
    CHECK(out.labels(0) == 0);
    CHECK(out.labels(1) == out.unknown_id());
    CHECK(out.labels(2) == 1);

    // round trip on non-held-out labels
    for (int dense = 0; dense < spec.num_known; ++dense) {
        const int orig = spec.original_of(dense);
        CHECK(spec.remap[static_cast<std::size_t>(orig)] == dense);
    }

    // all-ignore mask passes through
    LabelMask ig(2, 2, 3);
    ig.labels.setConstant(LabelMask::kIgnore);
    const LabelMask ig_out = apply_loco(ig, spec);
    CHECK((ig_out.labels.array() == LabelMask::kIgnore).all());

    // labels outside the vocabulary are rejected by name
    LabelMask bad(1, 1, 3);
    bad.labels << 7;
    CHECK_THROWS_WITH_AS(apply_loco(bad, spec), doctest::Contains("label 7"), ValueError);

    // unknown pixels never land in the dense range
    Rng rng(5);
    for (int rep = 0; rep < 20; ++rep) {
        LabelMask m(4, 4, 3);
        for (Eigen::Index i = 0; i < m.labels.size(); ++i) m.labels(i) = rng.uniform_int(4) - 1;  // -1..2
        const LabelMask r = apply_loco(m, spec);
        for (Eigen::Index i = 0; i < r.labels.size(); ++i) {
            if (m.labels(i) == 1) CHECK(r.labels(i) == r.unknown_id());
            if (m.labels(i) == LabelMask::kIgnore) CHECK(r.labels(i) == LabelMask::kIgnore);
        }
    }
}

TEST_CASE("generate_synthetic: determinism, labels, degenerate noise") {
    const auto spec = toy_spec(7);
    const auto a = generate_synthetic<double>(spec);
    const auto b = generate_synthetic<double>(spec);
    CHECK(a.image.pixels.data == b.image.pixels.data);  // bit identical
    CHECK(a.mask.labels == b.mask.labels);

    const auto c = generate_synthetic<double>(toy_spec(8));
    CHECK(a.image.pixels.data != c.image.pixels.data);

    // zero noise and zero pattern amplitude -> pixels exactly equal base color
    auto flat = toy_spec(3, 0.0);
    for (auto& cls : flat.classes) cls.pattern_amp = 0.0;
    // keep textures distinct via base colors only; spec validation must pass
    const auto d = generate_synthetic<double>(flat);
    for (int y = 0; y < d.mask.height; ++y) {
        for (int x = 0; x < d.mask.width; ++x) {
            const auto& cls = flat.classes[static_cast<std::size_t>(d.mask.at(y, x))];
            for (int ch = 0; ch < 3; ++ch) {
                CHECK(d.image.pixels.at(y, x, ch) == cls.base[static_cast<std::size_t>(ch)]);
            }
        }
    }
}

TEST_CASE("generate_synthetic: per-class pixel counts match region geometry") {
    const auto spec = toy_spec(21);
    const auto sample = generate_synthetic<double>(spec);

    // oracle: recompute expected counts from the region grid + assignment
    const auto cells = region_assignment(spec);
    std::map<int, long> expect;
    for (int r = 0; r < spec.grid_rows; ++r) {
        const int y0 = r * spec.height / spec.grid_rows;
        const int y1 = (r + 1) * spec.height / spec.grid_rows;
        for (int c = 0; c < spec.grid_cols; ++c) {
            const int x0 = c * spec.width / spec.grid_cols;
            const int x1 = (c + 1) * spec.width / spec.grid_cols;
            expect[cells[static_cast<std::size_t>(r * spec.grid_cols + c)]] +=
                static_cast<long>(y1 - y0) * (x1 - x0);
        }
    }
    std::map<int, long> got;
    for (Eigen::Index i = 0; i < sample.mask.labels.size(); ++i) got[sample.mask.labels(i)] += 1;
    CHECK(got == expect);

    // invalid specs are rejected
    auto bad = toy_spec(1);
    bad.classes.clear();
    CHECK_THROWS_AS(generate_synthetic<double>(bad), ValueError);
    auto dup = toy_spec(1);
    dup.classes[1] = dup.classes[0];
    dup.classes[1].name = "copy";
    CHECK_THROWS_AS(generate_synthetic<double>(dup), ValueError);
}

TEST_CASE("split_dataset: arithmetic, determinism, disjointness") {
    const SceneSplit s = split_dataset(10, {0.6, 0.2, 0.2}, 5);
    CHECK(s.train.size() == 6);
    CHECK(s.val.size() == 2);
    CHECK(s.test.size() == 2);

    // largest-remainder rounding: 3 scenes at (0.34, 0.33, 0.33) -> 1/1/1
    const SceneSplit t = split_dataset(3, {0.34, 0.33, 0.33}, 5);
    CHECK(t.train.size() == 1);
    CHECK(t.val.size() == 1);
    CHECK(t.test.size() == 1);

    const SceneSplit a = split_dataset(12, {0.5, 0.25, 0.25}, 9);
    const SceneSplit b = split_dataset(12, {0.5, 0.25, 0.25}, 9);
    CHECK(a.train == b.train);
    CHECK(a.val == b.val);
    CHECK(a.test == b.test);

    std::set<int> all;
    for (int id : a.train) all.insert(id);
    for (int id : a.val) all.insert(id);
    for (int id : a.test) all.insert(id);
    CHECK(all.size() == 12);

    CHECK_THROWS_AS(split_dataset(2, {0.4, 0.3, 0.3}, 1), ValueError);
    CHECK_THROWS_AS(split_dataset(10, {0.5, 0.2, 0.2}, 1), ValueError);   // does not sum to 1
    CHECK_THROWS_AS(split_dataset(10, {1.0, -0.1, 0.1}, 1), ValueError);  // negative
}

TEST_CASE("normalization: fitted on train only, clamps out-of-range") {
    Tensor3<double> train_img(1, 2, 1);
    train_img.data << 2.0, 6.0;
    const ChannelStats stats = fit_normalization<double>({&train_img});
    CHECK(stats.mins[0] == 2.0);
    CHECK(stats.maxs[0] == 6.0);

    Tensor3<double> test_img(1, 4, 1);
    test_img.data << 0.0, 2.0, 4.0, 8.0;
    apply_normalization(test_img, stats);
    CHECK(test_img.data(0, 0) == 0.0);  // clamped below
    CHECK(test_img.data(0, 1) == 0.0);
    CHECK(test_img.data(0, 2) == doctest::Approx(0.5));
    CHECK(test_img.data(0, 3) == 1.0);  // clamped above
}

TEST_CASE("scene save/load round trip") {
    namespace fs = std::filesystem;
    const auto dir = (fs::temp_directory_path() / "coreseg_scene_test").string();
    const auto spec = toy_spec(13);
    auto sample = generate_synthetic<float>(spec);
    sample.mask.labels(5) = LabelMask::kIgnore;
    Scene<float> scene;
    scene.id = "scene_000";
    scene.pixels = sample.image.pixels;
    scene.channel_names = spec.channel_names;
    scene.class_names = {"plains", "urban", "water", "forest"};
    scene.mask = sample.mask;

    save_scene(dir, scene);
    const Scene<float> back = load_scene<float>(dir, "scene_000");
    CHECK(back.pixels.data == scene.pixels.data);
    CHECK(back.mask.labels == scene.mask.labels);
    CHECK(back.channel_names == scene.channel_names);
    CHECK(back.class_names == scene.class_names);
    fs::remove_all(dir);
}
