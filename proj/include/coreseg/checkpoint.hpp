#pragma once

#include <cstring>
#include <string>
#include <vector>

#include <json.hpp>

#include "coreseg/backbone.hpp"
#include "coreseg/npy.hpp"
#include "coreseg/reconstruction.hpp"
#include "coreseg/training.hpp"

namespace coreseg {

inline constexpr const char* kBackboneMagic = "CORESEG-CKPT-1";
inline constexpr const char* kCaeMagic = "CORESEG-CAE-1";

namespace detail {

inline void write_u64_le(std::ostream& out, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    out.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint64_t read_u64_le(const char* p) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
    return v;
}

}  // namespace detail

// Single-file parameter archive: magic line, JSON header (array directory +
// caller metadata), then float32 payloads in row-major order.
template <typename Scalar>
void save_archive(const std::string& path, const std::string& magic, nlohmann::json meta,
                  const std::vector<ParamRef<Scalar>>& arrays) {
    nlohmann::json dir = nlohmann::json::array();
    for (const auto& a : arrays) {
        dir.push_back({{"name", a.name}, {"rows", a.value->rows()}, {"cols", a.value->cols()}});
    }
    meta["arrays"] = dir;
    const std::string header = meta.dump();
    atomic_write_file(path, [&](std::ostream& out) {
        out << magic << "\n";
        detail::write_u64_le(out, header.size());
        out.write(header.data(), static_cast<std::streamsize>(header.size()));
        for (const auto& a : arrays) {
            for (Eigen::Index r = 0; r < a.value->rows(); ++r) {
                for (Eigen::Index c = 0; c < a.value->cols(); ++c) {
                    const float v = static_cast<float>((*a.value)(r, c));
                    out.write(reinterpret_cast<const char*>(&v), sizeof(float));
                }
            }
        }
    });
}

// Loads an archive into pre-shaped parameter slots; every slot must be
// present in the file and every file array must have a slot.
template <typename Scalar>
nlohmann::json load_archive(const std::string& path, const std::string& magic,
                            const std::vector<ParamRef<Scalar>>& slots) {
    const std::string bytes = read_file_bytes(path);
    const std::string magic_line = magic + "\n";
    if (bytes.size() < magic_line.size() || bytes.compare(0, magic_line.size(), magic_line) != 0) {
        throw IoError("bad magic in " + path + " (expected " + magic + ")");
    }
    std::size_t pos = magic_line.size();
    if (bytes.size() < pos + 8) throw IoError("truncated archive: " + path);
    const std::uint64_t header_len = detail::read_u64_le(bytes.data() + pos);
    pos += 8;
    if (bytes.size() < pos + header_len) throw IoError("truncated archive header: " + path);
    nlohmann::json meta = nlohmann::json::parse(bytes.substr(pos, header_len));
    pos += header_len;

    const auto& dir = meta.at("arrays");
    if (dir.size() != slots.size()) {
        throw IoError("archive " + path + ": expected " + std::to_string(slots.size()) + " arrays, found " +
                      std::to_string(dir.size()));
    }
    std::size_t offset = pos;
    for (const auto& entry : dir) {
        const std::string name = entry.at("name").get<std::string>();
        const Eigen::Index rows = entry.at("rows").get<Eigen::Index>();
        const Eigen::Index cols = entry.at("cols").get<Eigen::Index>();
        const ParamRef<Scalar>* slot = nullptr;
        for (const auto& s : slots) {
            if (s.name == name) {
                slot = &s;
                break;
            }
        }
        if (!slot) throw IoError("archive " + path + ": unexpected array '" + name + "'");
        if (slot->value->rows() != rows || slot->value->cols() != cols) {
            throw IoError("archive " + path + ": array '" + name + "' has shape " + std::to_string(rows) + "x" +
                          std::to_string(cols) + ", expected " + std::to_string(slot->value->rows()) + "x" +
                          std::to_string(slot->value->cols()));
        }
        const std::size_t count = static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols);
        if (bytes.size() < offset + count * sizeof(float)) throw IoError("truncated payload: " + path);
        for (Eigen::Index r = 0; r < rows; ++r) {
            for (Eigen::Index c = 0; c < cols; ++c) {
                float v;
                std::memcpy(&v, bytes.data() + offset, sizeof(float));
                offset += sizeof(float);
                (*slot->value)(r, c) = static_cast<Scalar>(v);
            }
        }
    }
    return meta;
}

inline nlohmann::json arch_to_json(const ArchDescriptor& arch) {
    return {{"blocks", arch.blocks},
            {"base_width", arch.base_width},
            {"num_classes", arch.num_classes},
            {"in_channels", arch.in_channels}};
}

inline ArchDescriptor arch_from_json(const nlohmann::json& j) {
    ArchDescriptor arch;
    arch.blocks = j.at("blocks").get<int>();
    arch.base_width = j.at("base_width").get<int>();
    arch.num_classes = j.at("num_classes").get<int>();
    arch.in_channels = j.at("in_channels").get<int>();
    arch.validate();
    return arch;
}

// ---------------------------------------------------------------------------
// Backbone checkpoints

template <typename Scalar>
void save_backbone(const std::string& path, UNet<Scalar>& net) {
    nlohmann::json meta;
    meta["format"] = kBackboneMagic;
    meta["arch"] = arch_to_json(net.arch);
    meta["encoder_fingerprint"] = fingerprint_encoder(net);
    save_archive(path, kBackboneMagic, meta, unet_params(net));
}

template <typename Scalar>
UNet<Scalar> load_backbone(const std::string& path) {
    // Shell of the right geometry; every parameter is overwritten by the load.
    const std::string bytes_probe = read_file_bytes(path);
    const std::string magic_line = std::string(kBackboneMagic) + "\n";
    if (bytes_probe.compare(0, magic_line.size(), magic_line) != 0) {
        throw IoError("not a backbone checkpoint: " + path);
    }
    const std::uint64_t header_len = detail::read_u64_le(bytes_probe.data() + magic_line.size());
    nlohmann::json meta = nlohmann::json::parse(bytes_probe.substr(magic_line.size() + 8, header_len));
    const ArchDescriptor arch = arch_from_json(meta.at("arch"));

    Rng shell_rng(0);
    UNet<Scalar> net = init_unet<Scalar>(arch, shell_rng);
    load_archive(path, kBackboneMagic, unet_params(net));

    const std::string stored = meta.at("encoder_fingerprint").get<std::string>();
    const std::string recomputed = fingerprint_encoder(net);
    if (stored != recomputed) {
        throw ChainError("backbone checkpoint " + path + ": stored fingerprint " + stored +
                         " does not match recomputed " + recomputed);
    }
    return net;
}

// ---------------------------------------------------------------------------
// CAE checkpoints (carry the frozen backbone fingerprint they were trained
// against; loading verifies the link)

template <typename Scalar>
struct CaeCheckpoint {
    Cae<Scalar> model;
    CaeTrainHyper hyper;
    std::string backbone_fingerprint;
};

template <typename Scalar>
void save_cae(const std::string& path, Cae<Scalar>& cae, const CaeTrainHyper& hyper,
              const std::string& backbone_fingerprint) {
    nlohmann::json meta;
    meta["format"] = kCaeMagic;
    meta["arch"] = arch_to_json(cae.arch);
    meta["hyper"] = {{"alpha", hyper.alpha},     {"margin", hyper.margin},
                     {"mode", nonmatch_mode_name(hyper.mode)}, {"lr", hyper.lr},
                     {"epochs", hyper.epochs},   {"batch", hyper.batch},
                     {"seed", hyper.seed}};
    meta["backbone_fingerprint"] = backbone_fingerprint;
    meta["cae_fingerprint"] = fingerprint_cae(cae);
    save_archive(path, kCaeMagic, meta, cae_params(cae));
}

// `expected_backbone_fingerprint` empty skips the link check (used by tools
// that only inspect the artifact).
template <typename Scalar>
CaeCheckpoint<Scalar> load_cae(const std::string& path, const std::string& expected_backbone_fingerprint) {
    const std::string bytes_probe = read_file_bytes(path);
    const std::string magic_line = std::string(kCaeMagic) + "\n";
    if (bytes_probe.compare(0, magic_line.size(), magic_line) != 0) {
        throw IoError("not a CAE checkpoint: " + path);
    }
    const std::uint64_t header_len = detail::read_u64_le(bytes_probe.data() + magic_line.size());
    nlohmann::json meta = nlohmann::json::parse(bytes_probe.substr(magic_line.size() + 8, header_len));
    const ArchDescriptor arch = arch_from_json(meta.at("arch"));

    CaeCheckpoint<Scalar> ckpt;
    Rng shell_rng(0);
    ckpt.model = init_cae<Scalar>(arch, shell_rng);
    load_archive(path, kCaeMagic, cae_params(ckpt.model));

    const auto& hj = meta.at("hyper");
    ckpt.hyper.alpha = hj.at("alpha").get<double>();
    ckpt.hyper.margin = hj.at("margin").get<double>();
    ckpt.hyper.mode = nonmatch_mode_from_name(hj.at("mode").get<std::string>());
    ckpt.hyper.lr = hj.at("lr").get<double>();
    ckpt.hyper.epochs = hj.at("epochs").get<int>();
    ckpt.hyper.batch = hj.at("batch").get<int>();
    ckpt.hyper.seed = hj.at("seed").get<std::uint64_t>();
    ckpt.backbone_fingerprint = meta.at("backbone_fingerprint").get<std::string>();

    const std::string stored = meta.at("cae_fingerprint").get<std::string>();
    const std::string recomputed = fingerprint_cae(ckpt.model);
    if (stored != recomputed) {
        throw ChainError("CAE checkpoint " + path + ": stored fingerprint does not match recomputed parameters");
    }
    if (!expected_backbone_fingerprint.empty() && ckpt.backbone_fingerprint != expected_backbone_fingerprint) {
        throw ChainError("CAE checkpoint " + path + " was trained against backbone " + ckpt.backbone_fingerprint +
                         " but the provided backbone has fingerprint " + expected_backbone_fingerprint);
    }
    return ckpt;
}

}  // namespace coreseg
