#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "coreseg/data.hpp"
#include "coreseg/evaluation.hpp"
#include "coreseg/npy.hpp"
#include "coreseg/openset.hpp"

namespace coreseg {

using Rgb = std::array<std::uint8_t, 3>;

struct RgbImage {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> pixels;  // row-major RGB

    RgbImage() = default;
    RgbImage(int h, int w) : height(h), width(w), pixels(static_cast<std::size_t>(h) * w * 3, 0) {}

    std::uint8_t* at(int y, int x) { return &pixels[(static_cast<std::size_t>(y) * width + x) * 3]; }
    const std::uint8_t* at(int y, int x) const { return &pixels[(static_cast<std::size_t>(y) * width + x) * 3]; }

    void set(int y, int x, const Rgb& c) {
        auto* p = at(y, x);
        p[0] = c[0];
        p[1] = c[1];
        p[2] = c[2];
    }
};

// Class colors plus mandatory unknown / ignore entries.
struct Palette {
    std::vector<Rgb> class_colors;
    Rgb unknown{255, 0, 0};
    Rgb ignore{0, 0, 0};

    void validate() const {
        std::vector<Rgb> all = class_colors;
        all.push_back(unknown);
        all.push_back(ignore);
        for (std::size_t i = 0; i < all.size(); ++i) {
            for (std::size_t j = i + 1; j < all.size(); ++j) {
                if (all[i] == all[j]) throw ValueError("palette: duplicate color entries");
            }
        }
    }

    const Rgb& color_of(int label, int num_known) const {
        if (label == LabelMask::kIgnore) return ignore;
        if (label == num_known) return unknown;
        if (label < 0 || label >= static_cast<int>(class_colors.size())) {
            throw ValueError("palette: no entry for class " + std::to_string(label));
        }
        return class_colors[static_cast<std::size_t>(label)];
    }

    // Inverse lookup; exact match only.
    int label_of(const Rgb& c, int num_known) const {
        if (c == ignore) return LabelMask::kIgnore;
        if (c == unknown) return num_known;
        for (std::size_t i = 0; i < class_colors.size(); ++i) {
            if (class_colors[i] == c) return static_cast<int>(i);
        }
        throw ValueError("palette: color not found");
    }
};

// Community-convention colors for aerial label maps, extended with extra
// hues for larger class counts. Unknown renders red, ignore black.
inline Palette default_palette(int num_known) {
    static const std::vector<Rgb> base = {
        {255, 255, 255},  // impervious: white
        {0, 0, 255},      // building: blue
        {0, 255, 255},    // low vegetation: cyan
        {0, 255, 0},      // tree: green
        {255, 255, 0},    // car: yellow
        {255, 0, 255},    // magenta
        {255, 128, 0},    // orange
        {128, 64, 192},   // violet
        {0, 128, 128},    // teal
        {128, 128, 0},    // olive
    };
    if (num_known > static_cast<int>(base.size())) {
        throw ValueError("default_palette: supports up to " + std::to_string(base.size()) + " classes");
    }
    Palette p;
    p.class_colors.assign(base.begin(), base.begin() + num_known);
    p.validate();
    return p;
}

// Pixel-exact pointwise rendering of a label map (open-set or closed).
inline RgbImage render_prediction(const LabelMask& labels, const Palette& palette) {
    palette.validate();
    RgbImage img(labels.height, labels.width);
    for (int y = 0; y < labels.height; ++y) {
        for (int x = 0; x < labels.width; ++x) {
            img.set(y, x, palette.color_of(labels.at(y, x), labels.num_known));
        }
    }
    return img;
}

enum class HeatmapRange { per_image, fixed };

// Cold-to-warm ramp; the red minus blue difference increases monotonically
// with the normalized score, so hotter never renders cooler.
inline Rgb heat_color(double t) {
    t = std::clamp(t, 0.0, 1.0);
    return {static_cast<std::uint8_t>(std::lround(255.0 * t)), 40,
            static_cast<std::uint8_t>(std::lround(255.0 * (1.0 - t)))};
}

template <typename Scalar>
RgbImage render_error_heatmap(const ScoreMap<Scalar>& score, HeatmapRange policy = HeatmapRange::per_image,
                              double fixed_lo = 0.0, double fixed_hi = 1.0) {
    if (score.min_error.size() == 0) throw ValueError("heatmap: empty score map");
    double lo = fixed_lo, hi = fixed_hi;
    if (policy == HeatmapRange::per_image) {
        lo = static_cast<double>(score.min_error.minCoeff());
        hi = static_cast<double>(score.min_error.maxCoeff());
    }
    const double scale = hi > lo ? 1.0 / (hi - lo) : 0.0;
    RgbImage img(score.height, score.width);
    for (int y = 0; y < score.height; ++y) {
        for (int x = 0; x < score.width; ++x) {
            const double v = static_cast<double>(score.min_error(static_cast<Eigen::Index>(y) * score.width + x));
            img.set(y, x, heat_color((v - lo) * scale));
        }
    }
    return img;
}

// Simple axes + reference diagonal + stepwise ROC polyline.
inline RgbImage render_roc(const RocCurve& curve, int size = 256) {
    RgbImage img(size, size);
    for (auto& b : img.pixels) b = 255;  // white background
    const int margin = 16;
    const int span = size - 2 * margin;
    auto px = [&](double fpr) { return margin + static_cast<int>(std::lround(fpr * span)); };
    auto py = [&](double tpr) { return size - margin - 1 - static_cast<int>(std::lround(tpr * span)); };

    const Rgb axis{0, 0, 0}, diag{200, 200, 200}, line{204, 0, 0};
    for (int i = 0; i <= span; ++i) {
        img.set(py(0.0), margin + i, axis);
        img.set(size - margin - 1 - i, px(0.0), axis);
        img.set(py(static_cast<double>(i) / span), px(static_cast<double>(i) / span), diag);
    }
    auto draw_line = [&](int y0, int x0, int y1, int x1) {
        const int steps = std::max({std::abs(x1 - x0), std::abs(y1 - y0), 1});
        for (int s = 0; s <= steps; ++s) {
            const int x = x0 + (x1 - x0) * s / steps;
            const int y = y0 + (y1 - y0) * s / steps;
            img.set(std::clamp(y, 0, size - 1), std::clamp(x, 0, size - 1), line);
        }
    };
    for (std::size_t i = 1; i < curve.fpr.size(); ++i) {
        draw_line(py(curve.tpr[i - 1]), px(curve.fpr[i - 1]), py(curve.tpr[i]), px(curve.fpr[i]));
    }
    return img;
}

// Uncompressed 24-bit BMP (bottom-up rows, 4-byte row padding).
inline void write_bmp(const std::string& path, const RgbImage& img) {
    const int row_bytes = img.width * 3;
    const int padding = (4 - row_bytes % 4) % 4;
    const std::uint32_t data_size = static_cast<std::uint32_t>((row_bytes + padding) * img.height);
    const std::uint32_t file_size = 54 + data_size;
    atomic_write_file(path, [&](std::ostream& out) {
        auto u16 = [&](std::uint16_t v) { out.put(static_cast<char>(v & 0xff)).put(static_cast<char>(v >> 8)); };
        auto u32 = [&](std::uint32_t v) {
            for (int i = 0; i < 4; ++i) out.put(static_cast<char>((v >> (8 * i)) & 0xff));
        };
        out.put('B').put('M');
        u32(file_size);
        u32(0);
        u32(54);
        u32(40);
        u32(static_cast<std::uint32_t>(img.width));
        u32(static_cast<std::uint32_t>(img.height));
        u16(1);
        u16(24);
        u32(0);
        u32(data_size);
        u32(2835);
        u32(2835);
        u32(0);
        u32(0);
        for (int y = img.height - 1; y >= 0; --y) {
            for (int x = 0; x < img.width; ++x) {
                const auto* p = img.at(y, x);
                out.put(static_cast<char>(p[2])).put(static_cast<char>(p[1])).put(static_cast<char>(p[0]));
            }
            for (int i = 0; i < padding; ++i) out.put(0);
        }
    });
}

inline std::string base64_encode(const std::string& bytes) {
    static const char* tbl = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    std::string out;
    out.reserve((bytes.size() + 2) / 3 * 4);
    std::size_t i = 0;
    while (i + 2 < bytes.size()) {
        const std::uint32_t v = (static_cast<std::uint8_t>(bytes[i]) << 16) |
                                (static_cast<std::uint8_t>(bytes[i + 1]) << 8) | static_cast<std::uint8_t>(bytes[i + 2]);
        out.push_back(tbl[(v >> 18) & 63]);
        out.push_back(tbl[(v >> 12) & 63]);
        out.push_back(tbl[(v >> 6) & 63]);
        out.push_back(tbl[v & 63]);
        i += 3;
    }
    if (i + 1 == bytes.size()) {
        const std::uint32_t v = static_cast<std::uint8_t>(bytes[i]) << 16;
        out.push_back(tbl[(v >> 18) & 63]);
        out.push_back(tbl[(v >> 12) & 63]);
        out += "==";
    } else if (i + 2 == bytes.size()) {
        const std::uint32_t v = (static_cast<std::uint8_t>(bytes[i]) << 16) |
                                (static_cast<std::uint8_t>(bytes[i + 1]) << 8);
        out.push_back(tbl[(v >> 18) & 63]);
        out.push_back(tbl[(v >> 12) & 63]);
        out.push_back(tbl[(v >> 6) & 63]);
        out.push_back('=');
    }
    return out;
}

// ---------------------------------------------------------------------------
// Consolidated run summary (single self-contained HTML document)

struct SummaryRow {
    std::string scenario;
    std::string uuc_name;
    bool auroc_defined = false;
    double auroc = 0.0;
    double closed_accuracy = 0.0;
    double quantile = 0.0;
    double tau = 0.0;
    bool failed = false;
    std::string error;
};

struct SummaryInput {
    std::string title = "open-set segmentation run";
    std::vector<SummaryRow> rows;
    Aggregate auroc_aggregate;
    Aggregate accuracy_aggregate;
    // scenario -> (caption -> bmp path); missing files are reported, not fatal
    std::vector<std::pair<std::string, std::vector<std::pair<std::string, std::string>>>> images;
};

inline std::string format_fixed(double v, int digits = 3) {
    std::ostringstream ss;
    ss.setf(std::ios::fixed);
    ss.precision(digits);
    ss << v;
    return ss.str();
}

inline std::string emit_summary_html(const SummaryInput& input) {
    std::ostringstream out;
    out << "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>" << input.title << "</title>\n"
        << "<style>body{font-family:sans-serif;margin:24px;}table{border-collapse:collapse;}"
        << "td,th{border:1px solid #888;padding:4px 10px;}img{image-rendering:pixelated;margin:4px;}"
        << "</style></head><body>\n";
    out << "<h1>" << input.title << "</h1>\n";
    out << "<table>\n<tr><th>scenario</th><th>held-out class</th><th>AUROC</th>"
        << "<th>closed accuracy</th><th>q</th><th>tau</th></tr>\n";
    for (const auto& r : input.rows) {
        out << "<tr><td>" << r.scenario << "</td><td>" << r.uuc_name << "</td>";
        if (r.failed) {
            out << "<td colspan=\"4\">failed: " << r.error << "</td>";
        } else {
            out << "<td>" << (r.auroc_defined ? format_fixed(r.auroc) : std::string("undefined")) << "</td>"
                << "<td>" << format_fixed(r.closed_accuracy) << "</td>"
                << "<td>" << format_fixed(r.quantile, 2) << "</td>"
                << "<td>" << format_fixed(r.tau, 5) << "</td>";
        }
        out << "</tr>\n";
    }
    if (input.auroc_aggregate.count > 0) {
        out << "<tr><th>average</th><th></th><th>" << format_fixed(input.auroc_aggregate.mean) << " &plusmn; "
            << format_fixed(input.auroc_aggregate.stddev) << "</th><th>"
            << format_fixed(input.accuracy_aggregate.mean) << " &plusmn; "
            << format_fixed(input.accuracy_aggregate.stddev) << "</th><th></th><th></th></tr>\n";
    }
    out << "</table>\n";

    std::vector<std::string> missing;
    for (const auto& [scenario, imgs] : input.images) {
        out << "<h2>" << scenario << "</h2>\n<div>\n";
        for (const auto& [caption, path] : imgs) {
            try {
                const std::string bytes = read_file_bytes(path);
                out << "<figure style=\"display:inline-block\"><img width=\"192\" src=\"data:image/bmp;base64,"
                    << base64_encode(bytes) << "\"><figcaption>" << caption << "</figcaption></figure>\n";
            } catch (const IoError&) {
                missing.push_back(path);
            }
        }
        out << "</div>\n";
    }
    if (!missing.empty()) {
        out << "<h2>missing artifacts</h2>\n<ul>\n";
        for (const auto& m : missing) out << "<li>" << m << "</li>\n";
        out << "</ul>\n";
    }
    out << "</body></html>\n";
    return out.str();
}

}  // namespace coreseg
