#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "coreseg/errors.hpp"

namespace coreseg {

// Writes via a temp file in the same directory followed by rename, so readers
// never observe a half-written artifact.
inline void atomic_write_file(const std::string& path, const std::function<void(std::ostream&)>& writer) {
    namespace fs = std::filesystem;
    const fs::path target(path);
    if (target.has_parent_path()) fs::create_directories(target.parent_path());
    const fs::path tmp = target.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open for write: " + tmp.string());
        writer(out);
        out.flush();
        if (!out) throw IoError("write failed: " + tmp.string());
    }
    fs::rename(tmp, target);
}

inline std::string read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

namespace detail {

template <typename T>
struct NpyDtype;
template <>
struct NpyDtype<float> {
    static constexpr const char* descr = "<f4";
};
template <>
struct NpyDtype<double> {
    static constexpr const char* descr = "<f8";
};
template <>
struct NpyDtype<std::int16_t> {
    static constexpr const char* descr = "<i2";
};
template <>
struct NpyDtype<std::int32_t> {
    static constexpr const char* descr = "<i4";
};
template <>
struct NpyDtype<std::int64_t> {
    static constexpr const char* descr = "<i8";
};

}  // namespace detail

template <typename T>
struct NpyArray {
    std::vector<std::size_t> shape;
    std::vector<T> data;  // C order

    std::size_t size() const {
        std::size_t n = 1;
        for (auto s : shape) n *= s;
        return n;
    }
};

// Minimal NPY v1.0 writer (C order, little-endian scalars).
template <typename T>
void save_npy(const std::string& path, const std::vector<std::size_t>& shape, const T* data) {
    std::string dict = "{'descr': '";
    dict += detail::NpyDtype<T>::descr;
    dict += "', 'fortran_order': False, 'shape': (";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        dict += std::to_string(shape[i]);
        if (shape.size() == 1 || i + 1 < shape.size()) dict += ",";
        if (i + 1 < shape.size()) dict += " ";
    }
    dict += "), }";
    // Pad so that data starts at a multiple of 64 bytes.
    std::size_t header_len = 10 + dict.size() + 1;  // magic+version+len field, dict, newline
    const std::size_t pad = (64 - header_len % 64) % 64;
    dict.append(pad, ' ');
    dict += '\n';

    std::size_t count = 1;
    for (auto s : shape) count *= s;

    atomic_write_file(path, [&](std::ostream& out) {
        const unsigned char magic[8] = {0x93, 'N', 'U', 'M', 'P', 'Y', 1, 0};
        out.write(reinterpret_cast<const char*>(magic), 8);
        const std::uint16_t hlen = static_cast<std::uint16_t>(dict.size());
        unsigned char lenb[2] = {static_cast<unsigned char>(hlen & 0xff), static_cast<unsigned char>(hlen >> 8)};
        out.write(reinterpret_cast<const char*>(lenb), 2);
        out.write(dict.data(), static_cast<std::streamsize>(dict.size()));
        out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(count * sizeof(T)));
    });
}

template <typename T>
void save_npy(const std::string& path, const std::vector<std::size_t>& shape, const std::vector<T>& data) {
    std::size_t count = 1;
    for (auto s : shape) count *= s;
    if (count != data.size()) throw ValueError("save_npy: shape does not match data size");
    save_npy(path, shape, data.data());
}

template <typename T>
NpyArray<T> load_npy(const std::string& path) {
    const std::string bytes = read_file_bytes(path);
    if (bytes.size() < 10 || std::memcmp(bytes.data(), "\x93NUMPY", 6) != 0) {
        throw IoError("not an NPY file: " + path);
    }
    const unsigned major = static_cast<unsigned char>(bytes[6]);
    std::size_t header_start = 0, header_len = 0;
    if (major == 1) {
        header_len = static_cast<unsigned char>(bytes[8]) | (static_cast<unsigned char>(bytes[9]) << 8);
        header_start = 10;
    } else {
        throw IoError("unsupported NPY version in " + path);
    }
    const std::string header = bytes.substr(header_start, header_len);

    auto find_value = [&](const std::string& key) -> std::string {
        const auto kpos = header.find("'" + key + "'");
        if (kpos == std::string::npos) throw IoError("NPY header missing key '" + key + "' in " + path);
        auto pos = header.find(':', kpos);
        if (pos == std::string::npos) throw IoError("malformed NPY header in " + path);
        ++pos;
        while (pos < header.size() && header[pos] == ' ') ++pos;
        return header.substr(pos);
    };

    const std::string descr_tail = find_value("descr");
    const std::string expected = std::string("'") + detail::NpyDtype<T>::descr + "'";
    if (descr_tail.compare(0, expected.size(), expected) != 0) {
        throw IoError("NPY dtype mismatch in " + path + ": expected " + detail::NpyDtype<T>::descr);
    }
    const std::string order_tail = find_value("fortran_order");
    if (order_tail.compare(0, 5, "False") != 0) {
        throw IoError("fortran-order NPY not supported: " + path);
    }

    NpyArray<T> arr;
    const std::string shape_tail = find_value("shape");
    if (shape_tail.empty() || shape_tail[0] != '(') throw IoError("malformed NPY shape in " + path);
    std::size_t i = 1;
    while (i < shape_tail.size() && shape_tail[i] != ')') {
        while (i < shape_tail.size() && (shape_tail[i] == ' ' || shape_tail[i] == ',')) ++i;
        if (i >= shape_tail.size() || shape_tail[i] == ')') break;
        std::size_t dim = 0;
        while (i < shape_tail.size() && shape_tail[i] >= '0' && shape_tail[i] <= '9') {
            dim = dim * 10 + static_cast<std::size_t>(shape_tail[i] - '0');
            ++i;
        }
        arr.shape.push_back(dim);
    }

    const std::size_t data_start = header_start + header_len;
    const std::size_t count = arr.size();
    if (bytes.size() < data_start + count * sizeof(T)) throw IoError("truncated NPY file: " + path);
    arr.data.resize(count);
    std::memcpy(arr.data.data(), bytes.data() + data_start, count * sizeof(T));
    return arr;
}

}  // namespace coreseg
