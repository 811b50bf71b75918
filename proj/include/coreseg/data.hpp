#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "coreseg/npy.hpp"
#include "coreseg/rng.hpp"
#include "coreseg/tensor.hpp"

namespace coreseg {

// Integer class map. Known classes occupy [0, num_known); the unknown
// sentinel is num_known (kept one past the dense ids so one-hot encodings
// stay compact) and ignored pixels are -1.
struct LabelMask {
    static constexpr int kIgnore = -1;

    int height = 0;
    int width = 0;
    int num_known = 0;
    Eigen::VectorXi labels;  // length height * width, index y * width + x

    LabelMask() = default;
    LabelMask(int h, int w, int k)
        : height(h), width(w), num_known(k), labels(Eigen::VectorXi::Zero(static_cast<Eigen::Index>(h) * w)) {}

    int unknown_id() const { return num_known; }
    Eigen::Index pixels() const { return static_cast<Eigen::Index>(height) * width; }

    int& at(int y, int x) { return labels(static_cast<Eigen::Index>(y) * width + x); }
    int at(int y, int x) const { return labels(static_cast<Eigen::Index>(y) * width + x); }

    bool entries_valid() const {
        for (Eigen::Index i = 0; i < labels.size(); ++i) {
            const int v = labels(i);
            if (v != kIgnore && (v < 0 || v > num_known)) return false;
        }
        return true;
    }
};

struct PatchOrigin {
    std::string scene_id;
    int row_offset = 0;
    int col_offset = 0;
};

template <typename Scalar>
struct RasterPatch {
    Tensor3<Scalar> pixels;
    std::vector<std::string> channel_names;
    PatchOrigin origin;
};

template <typename Scalar>
struct Sample {
    RasterPatch<Scalar> image;
    LabelMask mask;
};

template <typename Scalar>
struct Scene {
    std::string id;
    Tensor3<Scalar> pixels;
    std::vector<std::string> channel_names;
    std::vector<std::string> class_names;  // original label vocabulary
    LabelMask mask;                        // original ids in [0, class_names.size()) or kIgnore
};

// ---------------------------------------------------------------------------
// Patch extraction

// Border-clamped anchor positions: a regular stride grid whose final anchor is
// pinned to size - patch so the whole axis is covered without padding.
inline std::vector<int> patch_anchors(int size, int patch, int stride) {
    std::vector<int> anchors;
    for (int k = 0;; ++k) {
        const int a = std::max(0, std::min(k * stride, size - patch));
        if (!anchors.empty() && a <= anchors.back()) break;
        anchors.push_back(a);
        if (a == size - patch) break;
    }
    return anchors;
}

template <typename Scalar>
std::vector<Sample<Scalar>> extract_patches(const Scene<Scalar>& scene, int patch_size, int stride) {
    const int h = scene.pixels.height, w = scene.pixels.width;
    if (patch_size <= 0 || patch_size > std::min(h, w)) {
        throw ValueError("extract_patches: patch_size " + std::to_string(patch_size) + " exceeds scene " +
                         std::to_string(h) + "x" + std::to_string(w));
    }
    if (stride < 1) throw ValueError("extract_patches: stride must be >= 1");
    if (scene.mask.height != h || scene.mask.width != w) throw ShapeError("extract_patches: mask/image size mismatch");

    std::vector<Sample<Scalar>> out;
    for (int ay : patch_anchors(h, patch_size, stride)) {
        for (int ax : patch_anchors(w, patch_size, stride)) {
            Sample<Scalar> s;
            s.image.pixels = Tensor3<Scalar>(patch_size, patch_size, scene.pixels.channels);
            s.image.channel_names = scene.channel_names;
            s.image.origin = {scene.id, ay, ax};
            s.mask = LabelMask(patch_size, patch_size, scene.mask.num_known);
            for (int y = 0; y < patch_size; ++y) {
                s.image.pixels.data.middleCols(static_cast<Eigen::Index>(y) * patch_size, patch_size) =
                    scene.pixels.data.middleCols(static_cast<Eigen::Index>(ay + y) * w + ax, patch_size);
                s.mask.labels.segment(static_cast<Eigen::Index>(y) * patch_size, patch_size) =
                    scene.mask.labels.segment(static_cast<Eigen::Index>(ay + y) * w + ax, patch_size);
            }
            out.push_back(std::move(s));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Leave-one-class-out remapping

struct LocoSpec {
    std::vector<std::string> all_classes;  // original vocabulary, ordered
    std::set<int> held_out;                // original ids treated as unknown
    std::vector<int> remap;                // original id -> dense id or num_known (unknown)
    std::vector<int> inverse;              // dense id -> original id
    int num_known = 0;

    static LocoSpec make(const std::vector<std::string>& all_classes, const std::set<int>& held_out) {
        LocoSpec spec;
        spec.all_classes = all_classes;
        spec.held_out = held_out;
        const int n = static_cast<int>(all_classes.size());
        for (int id : held_out) {
            if (id < 0 || id >= n) throw ValueError("LocoSpec: held-out id " + std::to_string(id) + " out of range");
        }
        spec.num_known = n - static_cast<int>(held_out.size());
        spec.remap.assign(static_cast<std::size_t>(n), 0);
        int next = 0;
        for (int id = 0; id < n; ++id) {
            if (held_out.count(id)) {
                spec.remap[static_cast<std::size_t>(id)] = spec.num_known;  // unknown sentinel
            } else {
                spec.remap[static_cast<std::size_t>(id)] = next++;
                spec.inverse.push_back(id);
            }
        }
        return spec;
    }

    int original_of(int dense_id) const {
        if (dense_id < 0 || dense_id >= num_known) throw ValueError("LocoSpec: dense id out of range");
        return inverse[static_cast<std::size_t>(dense_id)];
    }
};

inline LabelMask apply_loco(const LabelMask& original, const LocoSpec& spec) {
    LabelMask out(original.height, original.width, spec.num_known);
    const int n = static_cast<int>(spec.remap.size());
    for (Eigen::Index i = 0; i < original.labels.size(); ++i) {
        const int v = original.labels(i);
        if (v == LabelMask::kIgnore) {
            out.labels(i) = LabelMask::kIgnore;
        } else if (v < 0 || v >= n) {
            throw ValueError("apply_loco: label " + std::to_string(v) + " outside class vocabulary");
        } else {
            out.labels(i) = spec.remap[static_cast<std::size_t>(v)];
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic texture scenes

enum class TexturePattern { none, hstripes, vstripes, checker };

inline std::string pattern_name(TexturePattern p) {
    switch (p) {
        case TexturePattern::none: return "none";
        case TexturePattern::hstripes: return "hstripes";
        case TexturePattern::vstripes: return "vstripes";
        case TexturePattern::checker: return "checker";
    }
    return "none";
}

inline TexturePattern pattern_from_name(const std::string& s) {
    if (s == "none") return TexturePattern::none;
    if (s == "hstripes") return TexturePattern::hstripes;
    if (s == "vstripes") return TexturePattern::vstripes;
    if (s == "checker") return TexturePattern::checker;
    throw ValueError("unknown texture pattern: " + s);
}

struct ClassTexture {
    std::string name;
    std::vector<double> base;  // per-channel base intensity in [0,1]
    double noise_amp = 0.0;
    TexturePattern pattern = TexturePattern::none;
    int period = 8;
    double pattern_amp = 0.0;

    bool operator==(const ClassTexture& o) const {
        return base == o.base && noise_amp == o.noise_amp && pattern == o.pattern && period == o.period &&
               pattern_amp == o.pattern_amp;
    }
};

struct SyntheticSceneSpec {
    int height = 64;
    int width = 64;
    std::vector<std::string> channel_names;
    int grid_rows = 2;
    int grid_cols = 2;
    std::vector<ClassTexture> classes;
    std::uint64_t seed = 0;

    void validate() const {
        if (height <= 0 || width <= 0) throw ValueError("synthetic spec: image size must be positive");
        if (classes.empty()) throw ValueError("synthetic spec: need at least one class");
        if (grid_rows <= 0 || grid_cols <= 0) throw ValueError("synthetic spec: grid must be positive");
        if (channel_names.empty()) throw ValueError("synthetic spec: need at least one channel");
        for (const auto& c : classes) {
            if (c.base.size() != channel_names.size()) {
                throw ValueError("synthetic spec: class '" + c.name + "' base color has wrong channel count");
            }
        }
        for (std::size_t i = 0; i < classes.size(); ++i) {
            for (std::size_t j = i + 1; j < classes.size(); ++j) {
                if (classes[i] == classes[j]) {
                    throw ValueError("synthetic spec: classes '" + classes[i].name + "' and '" + classes[j].name +
                                     "' have identical texture parameters");
                }
            }
        }
    }
};

// Deterministic per-cell class assignment: a seeded shuffle of the class ids,
// tiled row-major over the region grid.
inline std::vector<int> region_assignment(const SyntheticSceneSpec& spec) {
    const int k = static_cast<int>(spec.classes.size());
    Rng rng(derive_seed(spec.seed, "regions"));
    std::vector<int> perm = rng.permutation(k);
    std::vector<int> cells(static_cast<std::size_t>(spec.grid_rows) * spec.grid_cols);
    for (std::size_t i = 0; i < cells.size(); ++i) cells[i] = perm[i % static_cast<std::size_t>(k)];
    return cells;
}

inline int region_row_of(const SyntheticSceneSpec& spec, int y) {
    return std::min(spec.grid_rows - 1, y * spec.grid_rows / spec.height);
}
inline int region_col_of(const SyntheticSceneSpec& spec, int x) {
    return std::min(spec.grid_cols - 1, x * spec.grid_cols / spec.width);
}

inline double texture_pattern_value(const ClassTexture& t, int y, int x) {
    const int period = std::max(1, t.period);
    switch (t.pattern) {
        case TexturePattern::none: return 0.0;
        case TexturePattern::hstripes: return ((y / period) % 2 == 0) ? 1.0 : -1.0;
        case TexturePattern::vstripes: return ((x / period) % 2 == 0) ? 1.0 : -1.0;
        case TexturePattern::checker: return (((y / period) + (x / period)) % 2 == 0) ? 1.0 : -1.0;
    }
    return 0.0;
}

template <typename Scalar>
Sample<Scalar> generate_synthetic(const SyntheticSceneSpec& spec) {
    spec.validate();
    const int h = spec.height, w = spec.width;
    const int c = static_cast<int>(spec.channel_names.size());
    const std::vector<int> cells = region_assignment(spec);

    Sample<Scalar> out;
    out.image.pixels = Tensor3<Scalar>(h, w, c);
    out.image.channel_names = spec.channel_names;
    out.mask = LabelMask(h, w, static_cast<int>(spec.classes.size()));

    Rng noise(derive_seed(spec.seed, "noise"));
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const int cell = region_row_of(spec, y) * spec.grid_cols + region_col_of(spec, x);
            const int cls = cells[static_cast<std::size_t>(cell)];
            const ClassTexture& tex = spec.classes[static_cast<std::size_t>(cls)];
            out.mask.at(y, x) = cls;
            const double pat = tex.pattern_amp * texture_pattern_value(tex, y, x);
            for (int ch = 0; ch < c; ++ch) {
                const double noise_v = tex.noise_amp > 0.0 ? tex.noise_amp * noise.uniform(-1.0, 1.0) : 0.0;
                const double v = tex.base[static_cast<std::size_t>(ch)] + pat + noise_v;
                out.image.pixels.at(y, x, ch) = static_cast<Scalar>(std::clamp(v, 0.0, 1.0));
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Scene-level splitting

struct SplitFractions {
    double train = 0.6;
    double val = 0.2;
    double test = 0.2;
};

struct SceneSplit {
    std::vector<int> train, val, test;
};

// Scene-level split with largest-remainder rounding (ties favor earlier
// splits, train first). Scenes are shuffled by seed before partitioning.
inline SceneSplit split_dataset(int num_scenes, const SplitFractions& fractions, std::uint64_t seed) {
    const double parts[3] = {fractions.train, fractions.val, fractions.test};
    double sum = 0.0;
    for (double p : parts) {
        if (p <= 0.0) throw ValueError("split_dataset: fractions must be positive");
        sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw ValueError("split_dataset: fractions must sum to 1");
    if (num_scenes < 3) {
        throw ValueError("split_dataset: need at least 3 scenes for 3 splits, got " + std::to_string(num_scenes));
    }

    int counts[3];
    double remainders[3];
    int assigned = 0;
    for (int i = 0; i < 3; ++i) {
        const double quota = num_scenes * parts[i];
        counts[i] = static_cast<int>(std::floor(quota));
        remainders[i] = quota - counts[i];
        assigned += counts[i];
    }
    int leftover = num_scenes - assigned;
    std::vector<int> order = {0, 1, 2};
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return remainders[a] > remainders[b]; });
    for (int i = 0; leftover > 0; ++i, --leftover) counts[order[static_cast<std::size_t>(i % 3)]] += 1;

    Rng rng(derive_seed(seed, "split"));
    std::vector<int> ids = rng.permutation(num_scenes);
    SceneSplit split;
    int pos = 0;
    split.train.assign(ids.begin() + pos, ids.begin() + pos + counts[0]);
    pos += counts[0];
    split.val.assign(ids.begin() + pos, ids.begin() + pos + counts[1]);
    pos += counts[1];
    split.test.assign(ids.begin() + pos, ids.begin() + pos + counts[2]);
    return split;
}

// ---------------------------------------------------------------------------
// Channel normalization (min-max fitted on the training split only)

struct ChannelStats {
    std::vector<double> mins, maxs;
};

template <typename Scalar>
ChannelStats fit_normalization(const std::vector<const Tensor3<Scalar>*>& train_images) {
    if (train_images.empty()) throw ValueError("fit_normalization: no training images");
    const int c = train_images.front()->channels;
    ChannelStats stats;
    stats.mins.assign(static_cast<std::size_t>(c), std::numeric_limits<double>::infinity());
    stats.maxs.assign(static_cast<std::size_t>(c), -std::numeric_limits<double>::infinity());
    for (const auto* img : train_images) {
        if (img->channels != c) throw ShapeError("fit_normalization: channel count mismatch");
        for (int ch = 0; ch < c; ++ch) {
            stats.mins[static_cast<std::size_t>(ch)] =
                std::min(stats.mins[static_cast<std::size_t>(ch)], static_cast<double>(img->data.row(ch).minCoeff()));
            stats.maxs[static_cast<std::size_t>(ch)] =
                std::max(stats.maxs[static_cast<std::size_t>(ch)], static_cast<double>(img->data.row(ch).maxCoeff()));
        }
    }
    return stats;
}

// Values outside the fitted range (possible on val/test) clamp to [0,1].
template <typename Scalar>
void apply_normalization(Tensor3<Scalar>& image, const ChannelStats& stats) {
    if (static_cast<std::size_t>(image.channels) != stats.mins.size()) {
        throw ShapeError("apply_normalization: channel count mismatch");
    }
    for (int ch = 0; ch < image.channels; ++ch) {
        const double lo = stats.mins[static_cast<std::size_t>(ch)];
        const double hi = stats.maxs[static_cast<std::size_t>(ch)];
        const double scale = hi > lo ? 1.0 / (hi - lo) : 0.0;
        auto row = image.data.row(ch).array();
        row = ((row - static_cast<Scalar>(lo)) * static_cast<Scalar>(scale)).cwiseMax(Scalar(0)).cwiseMin(Scalar(1));
    }
}

// ---------------------------------------------------------------------------
// Scene persistence: <id>.image.npy (f32 HxWxC) + <id>.mask.npy (i16 HxW)
// + <id>.json sidecar with channel and class vocabulary.

template <typename Scalar>
void save_scene(const std::string& dir, const Scene<Scalar>& scene) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    const int h = scene.pixels.height, w = scene.pixels.width, c = scene.pixels.channels;

    std::vector<float> image(static_cast<std::size_t>(h) * w * c);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            for (int ch = 0; ch < c; ++ch) {
                image[(static_cast<std::size_t>(y) * w + x) * c + ch] = static_cast<float>(scene.pixels.at(y, x, ch));
            }
        }
    }
    save_npy((fs::path(dir) / (scene.id + ".image.npy")).string(),
             {static_cast<std::size_t>(h), static_cast<std::size_t>(w), static_cast<std::size_t>(c)}, image);

    std::vector<std::int16_t> mask(static_cast<std::size_t>(h) * w);
    for (Eigen::Index i = 0; i < scene.mask.labels.size(); ++i) {
        mask[static_cast<std::size_t>(i)] = static_cast<std::int16_t>(scene.mask.labels(i));
    }
    save_npy((fs::path(dir) / (scene.id + ".mask.npy")).string(),
             {static_cast<std::size_t>(h), static_cast<std::size_t>(w)}, mask);

    nlohmann::json sidecar;
    sidecar["scene_id"] = scene.id;
    sidecar["height"] = h;
    sidecar["width"] = w;
    sidecar["channel_names"] = scene.channel_names;
    sidecar["class_names"] = scene.class_names;
    sidecar["ignore_value"] = LabelMask::kIgnore;
    atomic_write_file((fs::path(dir) / (scene.id + ".json")).string(),
                      [&](std::ostream& out) { out << sidecar.dump(2) << "\n"; });
}

template <typename Scalar>
Scene<Scalar> load_scene(const std::string& dir, const std::string& id) {
    namespace fs = std::filesystem;
    const std::string sidecar_path = (fs::path(dir) / (id + ".json")).string();
    nlohmann::json sidecar = nlohmann::json::parse(read_file_bytes(sidecar_path));

    Scene<Scalar> scene;
    scene.id = id;
    scene.channel_names = sidecar.at("channel_names").get<std::vector<std::string>>();
    scene.class_names = sidecar.at("class_names").get<std::vector<std::string>>();
    const int ignore_value = sidecar.value("ignore_value", LabelMask::kIgnore);

    const auto image = load_npy<float>((fs::path(dir) / (id + ".image.npy")).string());
    if (image.shape.size() != 3) throw IoError("scene image must be HxWxC: " + id);
    const int h = static_cast<int>(image.shape[0]);
    const int w = static_cast<int>(image.shape[1]);
    const int c = static_cast<int>(image.shape[2]);
    if (static_cast<std::size_t>(c) != scene.channel_names.size()) {
        throw IoError("scene " + id + ": channel count disagrees with sidecar");
    }
    scene.pixels = Tensor3<Scalar>(h, w, c);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            for (int ch = 0; ch < c; ++ch) {
                scene.pixels.at(y, x, ch) =
                    static_cast<Scalar>(image.data[(static_cast<std::size_t>(y) * w + x) * c + ch]);
            }
        }
    }
    if (!scene.pixels.all_finite()) throw IoError("scene " + id + ": non-finite pixel values");

    const auto mask = load_npy<std::int16_t>((fs::path(dir) / (id + ".mask.npy")).string());
    if (mask.shape.size() != 2 || static_cast<int>(mask.shape[0]) != h || static_cast<int>(mask.shape[1]) != w) {
        throw IoError("scene " + id + ": mask shape disagrees with image");
    }
    scene.mask = LabelMask(h, w, static_cast<int>(scene.class_names.size()));
    for (std::size_t i = 0; i < mask.data.size(); ++i) {
        int v = mask.data[i];
        if (v == ignore_value) v = LabelMask::kIgnore;
        scene.mask.labels(static_cast<Eigen::Index>(i)) = v;
    }
    return scene;
}

}  // namespace coreseg
