#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "msm/autodiff.hpp"
#include "msm/errors.hpp"
#include "msm/hunet.hpp"

namespace msm {

// Versioned binary checkpoint: the model config that produced the tensors,
// the trainer step, and named tensor sections (student, teacher, optimizer
// moments). Loading refuses config mismatches.
struct Checkpoint {
    HUNetConfig config;
    std::uint64_t step = 0;
    std::map<std::string, ParamSet> sections;
};

namespace detail {

inline std::string config_to_text(const HUNetConfig& c) {
    std::ostringstream os;
    auto list_i64 = [&](const std::vector<std::int64_t>& v) {
        std::string s;
        for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
        return s;
    };
    auto list_i32 = [&](const std::vector<std::int32_t>& v) {
        std::string s;
        for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
        return s;
    };
    os << "levels=" << c.levels << "\n";
    os << "enc_channels=" << list_i64(c.enc_channels) << "\n";
    os << "dec_channels=" << list_i64(c.dec_channels) << "\n";
    os << "resnet_blocks=" << list_i32(c.resnet_blocks) << "\n";
    os << "attention_blocks=" << list_i32(c.attention_blocks) << "\n";
    os << "window=" << c.window << "\n";
    os << "heads=" << c.heads << "\n";
    os << "ff_ratio=" << c.ff_ratio << "\n";
    os << "in_channels=" << c.in_channels << "\n";
    std::ostringstream vs;
    vs.precision(17);
    vs << c.voxel_size;
    os << "voxel_size=" << vs.str() << "\n";
    return os.str();
}

inline HUNetConfig config_from_text(const std::string& text) {
    HUNetConfig c;
    std::istringstream is(text);
    std::string line;
    auto parse_i64s = [](const std::string& s) {
        std::vector<std::int64_t> v;
        std::istringstream ss(s);
        std::string tok;
        while (std::getline(ss, tok, ',')) v.push_back(std::stoll(tok));
        return v;
    };
    while (std::getline(is, line)) {
        const auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        const std::string key = line.substr(0, eq), val = line.substr(eq + 1);
        if (key == "levels") c.levels = static_cast<std::int32_t>(std::stol(val));
        else if (key == "enc_channels") c.enc_channels = parse_i64s(val);
        else if (key == "dec_channels") c.dec_channels = parse_i64s(val);
        else if (key == "resnet_blocks") {
            c.resnet_blocks.clear();
            for (auto x : parse_i64s(val)) c.resnet_blocks.push_back(static_cast<std::int32_t>(x));
        } else if (key == "attention_blocks") {
            c.attention_blocks.clear();
            for (auto x : parse_i64s(val)) c.attention_blocks.push_back(static_cast<std::int32_t>(x));
        } else if (key == "window") c.window = std::stoll(val);
        else if (key == "heads") c.heads = static_cast<std::int32_t>(std::stol(val));
        else if (key == "ff_ratio") c.ff_ratio = std::stoll(val);
        else if (key == "in_channels") c.in_channels = std::stoll(val);
        else if (key == "voxel_size") c.voxel_size = std::stod(val);
        else throw CheckpointError("unknown config key in checkpoint: " + key);
    }
    return c;
}

inline void write_string(std::ofstream& f, const std::string& s) {
    const std::uint32_t n = static_cast<std::uint32_t>(s.size());
    f.write(reinterpret_cast<const char*>(&n), 4);
    f.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::ifstream& f) {
    std::uint32_t n = 0;
    f.read(reinterpret_cast<char*>(&n), 4);
    std::string s(n, '\0');
    f.read(s.data(), n);
    if (!f) throw CheckpointError("truncated checkpoint string");
    return s;
}

}  // namespace detail

constexpr char kCheckpointMagic[4] = {'M', 'S', 'M', 'C'};
constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IOError("cannot write " + path);
    f.write(kCheckpointMagic, 4);
    const std::uint32_t version = kCheckpointVersion;
    f.write(reinterpret_cast<const char*>(&version), 4);
    detail::write_string(f, detail::config_to_text(ckpt.config));
    f.write(reinterpret_cast<const char*>(&ckpt.step), 8);
    const std::uint32_t sections = static_cast<std::uint32_t>(ckpt.sections.size());
    f.write(reinterpret_cast<const char*>(&sections), 4);
    for (const auto& [name, params] : ckpt.sections) {
        detail::write_string(f, name);
        const std::uint32_t count = static_cast<std::uint32_t>(params.values.size());
        f.write(reinterpret_cast<const char*>(&count), 4);
        for (const auto& [pname, tensor] : params.values) {
            detail::write_string(f, pname);
            const std::uint32_t ndim = static_cast<std::uint32_t>(tensor.shape().size());
            f.write(reinterpret_cast<const char*>(&ndim), 4);
            for (auto d : tensor.shape()) {
                const std::uint64_t dim = static_cast<std::uint64_t>(d);
                f.write(reinterpret_cast<const char*>(&dim), 8);
            }
            f.write(reinterpret_cast<const char*>(tensor.data()), static_cast<std::streamsize>(tensor.numel() * 8));
        }
    }
    if (!f) throw IOError("short write to " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("cannot open checkpoint " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, kCheckpointMagic, 4) != 0) throw CheckpointError(path + ": bad checkpoint magic");
    std::uint32_t version = 0;
    f.read(reinterpret_cast<char*>(&version), 4);
    if (version != kCheckpointVersion) throw CheckpointError(path + ": unsupported checkpoint version");
    Checkpoint ckpt;
    ckpt.config = detail::config_from_text(detail::read_string(f));
    f.read(reinterpret_cast<char*>(&ckpt.step), 8);
    std::uint32_t sections = 0;
    f.read(reinterpret_cast<char*>(&sections), 4);
    if (!f) throw CheckpointError(path + ": truncated checkpoint header");
    for (std::uint32_t s = 0; s < sections; ++s) {
        const std::string name = detail::read_string(f);
        std::uint32_t count = 0;
        f.read(reinterpret_cast<char*>(&count), 4);
        ParamSet params;
        for (std::uint32_t t = 0; t < count; ++t) {
            const std::string pname = detail::read_string(f);
            std::uint32_t ndim = 0;
            f.read(reinterpret_cast<char*>(&ndim), 4);
            std::vector<std::int64_t> shape(ndim);
            for (std::uint32_t d = 0; d < ndim; ++d) {
                std::uint64_t dim = 0;
                f.read(reinterpret_cast<char*>(&dim), 8);
                shape[d] = static_cast<std::int64_t>(dim);
            }
            Tensor tensor(shape);
            f.read(reinterpret_cast<char*>(tensor.data()), static_cast<std::streamsize>(tensor.numel() * 8));
            if (!f) throw CheckpointError(path + ": truncated tensor data");
            params.add(pname, std::move(tensor));
        }
        ckpt.sections.emplace(name, std::move(params));
    }
    return ckpt;
}

// loads a checkpoint and refuses configs that differ from the expected one
inline Checkpoint load_checkpoint_expecting(const std::string& path, const HUNetConfig& expected) {
    Checkpoint ckpt = load_checkpoint(path);
    if (!(ckpt.config == expected)) throw CheckpointError(path + ": checkpoint config does not match the requested model");
    return ckpt;
}

}  // namespace msm
