#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "msm/errors.hpp"
#include "msm/tensor.hpp"

namespace msm {

// Per-point concatenated hierarchical features plus labels. On-disk layout:
// magic "MSMF", u32 version=1, u64 N, u32 L, L x u32 channel widths, then
// N x sum(C) row-major float32, then N x int32 labels, all little-endian.
struct FeatureDump {
    std::vector<std::uint32_t> channels;  // per level, finest first
    Tensor features;                      // [N x sum(channels)]
    std::vector<std::int32_t> labels;     // per point

    std::int64_t width() const {
        std::int64_t w = 0;
        for (auto c : channels) w += c;
        return w;
    }

    void validate() const {
        if (features.ndim() != 2 || features.cols() != width()) throw ShapeError("feature dump width mismatch");
        if (static_cast<std::int64_t>(labels.size()) != features.rows()) throw ShapeError("feature dump label count mismatch");
    }
};

constexpr char kDumpMagic[4] = {'M', 'S', 'M', 'F'};
constexpr std::uint32_t kDumpVersion = 1;

inline void write_feature_dump(const FeatureDump& dump, const std::string& path) {
    dump.validate();
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IOError("cannot write " + path);
    f.write(kDumpMagic, 4);
    const std::uint32_t version = kDumpVersion;
    const std::uint64_t n = static_cast<std::uint64_t>(dump.features.rows());
    const std::uint32_t levels = static_cast<std::uint32_t>(dump.channels.size());
    f.write(reinterpret_cast<const char*>(&version), 4);
    f.write(reinterpret_cast<const char*>(&n), 8);
    f.write(reinterpret_cast<const char*>(&levels), 4);
    for (std::uint32_t c : dump.channels) f.write(reinterpret_cast<const char*>(&c), 4);
    for (std::int64_t i = 0, e = dump.features.numel(); i < e; ++i) {
        const float v = static_cast<float>(dump.features[i]);
        f.write(reinterpret_cast<const char*>(&v), 4);
    }
    for (std::int32_t l : dump.labels) f.write(reinterpret_cast<const char*>(&l), 4);
    if (!f) throw IOError("short write to " + path);
}

inline FeatureDump read_feature_dump(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IOError("cannot open " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, kDumpMagic, 4) != 0) throw FormatError(path + ": bad magic");
    std::uint32_t version = 0, levels = 0;
    std::uint64_t n = 0;
    f.read(reinterpret_cast<char*>(&version), 4);
    f.read(reinterpret_cast<char*>(&n), 8);
    f.read(reinterpret_cast<char*>(&levels), 4);
    if (!f) throw FormatError(path + ": truncated header");
    if (version != kDumpVersion) throw FormatError(path + ": unsupported version " + std::to_string(version));

    FeatureDump dump;
    dump.channels.resize(levels);
    for (std::uint32_t l = 0; l < levels; ++l) f.read(reinterpret_cast<char*>(&dump.channels[l]), 4);
    if (!f) throw FormatError(path + ": truncated channel table");

    const std::int64_t width = dump.width();
    dump.features = Tensor({static_cast<std::int64_t>(n), width});
    for (std::int64_t i = 0, e = dump.features.numel(); i < e; ++i) {
        float v;
        f.read(reinterpret_cast<char*>(&v), 4);
        if (!f) throw FormatError(path + ": truncated payload");
        dump.features[i] = static_cast<double>(v);
    }
    dump.labels.resize(n);
    for (std::uint64_t i = 0; i < n; ++i) {
        f.read(reinterpret_cast<char*>(&dump.labels[i]), 4);
        if (!f) throw FormatError(path + ": truncated labels");
    }
    return dump;
}

}  // namespace msm
