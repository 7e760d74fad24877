#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "msm/errors.hpp"
#include "msm/tensor.hpp"

namespace msm {

// A labeled 3D scene. Labels use -1 as ignore, instance id -1 means none.
struct PointCloud {
    Tensor positions;  // [N x 3] meters
    Tensor colors;     // [N x 3] in [0, 1]
    std::vector<std::int32_t> labels;
    std::vector<std::int32_t> instance_ids;
    std::string scene_id;

    std::int64_t size() const { return positions.numel() == 0 ? 0 : positions.rows(); }

    void validate() const {
        if (size() < 1) throw EmptySceneError("point cloud is empty");
        if (colors.rows() != size() || colors.cols() != 3) throw ShapeError("colors must be Nx3");
        if (static_cast<std::int64_t>(labels.size()) != size()) throw ShapeError("labels size mismatch");
        if (static_cast<std::int64_t>(instance_ids.size()) != size()) throw ShapeError("instance ids size mismatch");
    }
};

}  // namespace msm
