#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "msm/errors.hpp"
#include "msm/point_cloud.hpp"

namespace msm {

// Binary little-endian PLY with properties x,y,z,red,green,blue (double) and
// label,instance (int). Positions and colors round-trip losslessly at 64-bit.

inline void write_ply(const PointCloud& cloud, const std::string& path) {
    cloud.validate();
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IOError("cannot write " + path);
    const std::int64_t n = cloud.size();
    f << "ply\n"
      << "format binary_little_endian 1.0\n"
      << "comment scene_id " << (cloud.scene_id.empty() ? "unnamed" : cloud.scene_id) << "\n"
      << "element vertex " << n << "\n"
      << "property double x\nproperty double y\nproperty double z\n"
      << "property double red\nproperty double green\nproperty double blue\n"
      << "property int label\nproperty int instance\n"
      << "end_header\n";
    for (std::int64_t i = 0; i < n; ++i) {
        double d[6] = {cloud.positions.at(i, 0), cloud.positions.at(i, 1), cloud.positions.at(i, 2),
                       cloud.colors.at(i, 0),    cloud.colors.at(i, 1),    cloud.colors.at(i, 2)};
        std::int32_t l[2] = {cloud.labels[static_cast<std::size_t>(i)], cloud.instance_ids[static_cast<std::size_t>(i)]};
        f.write(reinterpret_cast<const char*>(d), sizeof(d));
        f.write(reinterpret_cast<const char*>(l), sizeof(l));
    }
    if (!f) throw IOError("short write to " + path);
}

inline PointCloud read_ply(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IOError("cannot open " + path);

    std::string line;
    if (!std::getline(f, line) || line != "ply") throw FormatError(path + ": not a PLY file");
    bool fmt_ok = false;
    std::int64_t n = -1;
    std::vector<std::string> props;
    std::string scene_id;
    while (std::getline(f, line)) {
        if (line == "end_header") break;
        std::istringstream ss(line);
        std::string tok;
        ss >> tok;
        if (tok == "format") {
            std::string kind, ver;
            ss >> kind >> ver;
            if (kind != "binary_little_endian") throw FormatError(path + ": unsupported PLY format " + kind);
            fmt_ok = true;
        } else if (tok == "comment") {
            std::string key;
            ss >> key;
            if (key == "scene_id") ss >> scene_id;
        } else if (tok == "element") {
            std::string name;
            ss >> name >> n;
            if (name != "vertex") throw FormatError(path + ": unexpected element " + name);
        } else if (tok == "property") {
            std::string type, name;
            ss >> type >> name;
            props.push_back(type + " " + name);
        }
    }
    if (!fmt_ok || n < 0) throw FormatError(path + ": incomplete PLY header");
    const std::vector<std::string> expected = {"double x",     "double y",    "double z",  "double red",
                                               "double green", "double blue", "int label", "int instance"};
    for (const auto& want : expected) {
        bool found = false;
        for (const auto& have : props) found = found || have == want;
        if (!found) throw FormatError(path + ": missing required property '" + want + "'");
    }
    if (props != expected) throw FormatError(path + ": unsupported property layout");

    PointCloud cloud;
    cloud.scene_id = scene_id;
    cloud.positions = Tensor({n, 3});
    cloud.colors = Tensor({n, 3});
    cloud.labels.resize(static_cast<std::size_t>(n));
    cloud.instance_ids.resize(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        double d[6];
        std::int32_t l[2];
        f.read(reinterpret_cast<char*>(d), sizeof(d));
        f.read(reinterpret_cast<char*>(l), sizeof(l));
        if (!f) throw FormatError(path + ": truncated vertex data");
        for (int a = 0; a < 3; ++a) {
            cloud.positions.at(i, a) = d[a];
            cloud.colors.at(i, a) = d[3 + a];
        }
        cloud.labels[static_cast<std::size_t>(i)] = l[0];
        cloud.instance_ids[static_cast<std::size_t>(i)] = l[1];
    }
    return cloud;
}

}  // namespace msm
