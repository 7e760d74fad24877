#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "msm/errors.hpp"
#include "msm/point_cloud.hpp"
#include "msm/rng.hpp"
#include "msm/voxel.hpp"

namespace msm {

struct AugmentationParams {
    double rotation = 0.0;  // radians about the gravity (z) axis, around the origin
    double scale = 1.0;
    bool flip_x = false, flip_y = false, flip_z = false;
    double jitter_sigma = 0.0;  // meters
    double color_sigma = 0.0;
    bool elastic = false;

    void validate() const {
        if (scale < 0.8 || scale > 1.2) throw SpecError("augmentation scale outside [0.8, 1.2]");
        if (jitter_sigma < 0 || color_sigma < 0) throw SpecError("negative jitter sigma");
    }
};

// Applies rotation -> scale -> flips -> (elastic) -> jitter to positions and
// Gaussian jitter to colors. Point order, labels and instances are preserved.
inline PointCloud augment(const PointCloud& cloud, const AugmentationParams& params, std::uint64_t seed) {
    cloud.validate();
    params.validate();
    Rng rng(split_seed(seed, 0xa06ull));
    PointCloud out = cloud;
    const double cr = std::cos(params.rotation), sr = std::sin(params.rotation);
    // fixed random phases for the elastic warp
    const double ph[3] = {rng.uniform(0, 2 * M_PI), rng.uniform(0, 2 * M_PI), rng.uniform(0, 2 * M_PI)};
    for (std::int64_t i = 0; i < cloud.size(); ++i) {
        double x = cloud.positions.at(i, 0), y = cloud.positions.at(i, 1), z = cloud.positions.at(i, 2);
        const double rx = cr * x - sr * y, ry = sr * x + cr * y;
        x = rx * params.scale;
        y = ry * params.scale;
        z = z * params.scale;
        if (params.flip_x) x = -x;
        if (params.flip_y) y = -y;
        if (params.flip_z) z = -z;
        if (params.elastic) {
            // smooth low-frequency warp, amplitude 2 cm
            const double k = 2.0 * M_PI / 0.8;
            x += 0.02 * std::sin(k * y + ph[0]);
            y += 0.02 * std::sin(k * z + ph[1]);
            z += 0.02 * std::sin(k * x + ph[2]);
        }
        out.positions.at(i, 0) = x + rng.normal(0.0, params.jitter_sigma);
        out.positions.at(i, 1) = y + rng.normal(0.0, params.jitter_sigma);
        out.positions.at(i, 2) = z + rng.normal(0.0, params.jitter_sigma);
        for (int a = 0; a < 3; ++a)
            out.colors.at(i, a) = std::clamp(cloud.colors.at(i, a) + rng.normal(0.0, params.color_sigma), 0.0, 1.0);
    }
    return out;
}

// Nearest-voxel ball growth from a random seed voxel until the contributing
// source-point count first reaches max_points. Rows of the result are in
// nearest-first order; the seed voxel is row 0.
inline VoxelGrid crop(const VoxelGrid& grid, std::int64_t max_points, std::uint64_t seed) {
    if (max_points < 1) throw SpecError("crop: max_points must be >= 1");
    if (grid.num_voxels() == 0) throw EmptySceneError("crop: empty grid");
    Rng rng(split_seed(seed, 0xc109ull));
    const std::int32_t seed_row = static_cast<std::int32_t>(rng.below(static_cast<std::uint64_t>(grid.num_voxels())));
    const auto seed_center = grid.center(seed_row);

    std::vector<std::pair<double, std::int32_t>> by_distance(static_cast<std::size_t>(grid.num_voxels()));
    for (std::int32_t r = 0; r < grid.num_voxels(); ++r) {
        const auto c = grid.center(r);
        const double dx = c[0] - seed_center[0], dy = c[1] - seed_center[1], dz = c[2] - seed_center[2];
        by_distance[static_cast<std::size_t>(r)] = {dx * dx + dy * dy + dz * dz, r};
    }
    std::sort(by_distance.begin(), by_distance.end());

    VoxelGrid out;
    out.level = grid.level;
    out.voxel_size = grid.voxel_size;
    out.point_map.assign(grid.point_map.size(), -1);
    const std::int64_t c = grid.features.cols();
    std::vector<std::int32_t> selected;
    std::int64_t points = 0;
    for (const auto& [dist, row] : by_distance) {
        selected.push_back(row);
        points += static_cast<std::int64_t>(grid.source_points[static_cast<std::size_t>(row)].size());
        if (points >= max_points) break;
    }
    out.features = Tensor({static_cast<std::int64_t>(selected.size()), c});
    for (std::int32_t nr = 0; nr < static_cast<std::int32_t>(selected.size()); ++nr) {
        const std::int32_t r = selected[static_cast<std::size_t>(nr)];
        const VoxelKey key = grid.keys[static_cast<std::size_t>(r)];
        out.keys.push_back(key);
        out.key_index.emplace(key, nr);
        for (std::int64_t f = 0; f < c; ++f) out.features.at(nr, f) = grid.features.at(r, f);
        out.labels.push_back(grid.labels[static_cast<std::size_t>(r)]);
        out.source_points.push_back(grid.source_points[static_cast<std::size_t>(r)]);
        for (std::int32_t p : out.source_points.back()) out.point_map[static_cast<std::size_t>(p)] = nr;
    }
    return out;
}

// Per-level masked/unmasked partition, derived from coarsest-level patches and
// propagated down the hierarchy so masking is consistent between levels.
struct MaskSpec {
    std::int32_t num_levels = 0;
    std::vector<std::vector<char>> flags;               // per level, per row
    std::vector<std::vector<std::int32_t>> masked;      // per level, ascending rows
    std::vector<std::vector<std::int32_t>> unmasked;    // per level, ascending rows
    std::vector<std::int32_t> patch_rows;               // chosen coarsest-level rows

    bool is_masked(std::int32_t level, std::int32_t row) const {
        return flags[static_cast<std::size_t>(level)][static_cast<std::size_t>(row)] != 0;
    }

    static MaskSpec empty_for(const std::vector<std::int64_t>& level_sizes) {
        MaskSpec m;
        m.num_levels = static_cast<std::int32_t>(level_sizes.size());
        for (std::int64_t n : level_sizes) {
            m.flags.emplace_back(static_cast<std::size_t>(n), 0);
            m.masked.emplace_back();
            std::vector<std::int32_t> all(static_cast<std::size_t>(n));
            for (std::int64_t i = 0; i < n; ++i) all[static_cast<std::size_t>(i)] = static_cast<std::int32_t>(i);
            m.unmasked.push_back(std::move(all));
        }
        return m;
    }
};

// round up, with an epsilon so exact products like 0.4 * 10 do not spill over
inline std::int64_t mask_patch_count(double ratio, std::int64_t total) {
    if (ratio <= 0.0) return 0;
    if (ratio >= 1.0) return total;
    const auto m = static_cast<std::int64_t>(std::ceil(ratio * static_cast<double>(total) - 1e-9));
    return std::clamp<std::int64_t>(m, 0, total);
}

inline MaskSpec make_mask(const GridHierarchy& hier, double ratio, std::uint64_t seed) {
    if (ratio < 0.0 || ratio > 1.0) throw SpecError("mask ratio outside [0, 1]");
    const std::int32_t levels = hier.num_levels();
    MaskSpec mask;
    mask.num_levels = levels;
    mask.flags.resize(static_cast<std::size_t>(levels));
    mask.masked.resize(static_cast<std::size_t>(levels));
    mask.unmasked.resize(static_cast<std::size_t>(levels));

    const std::int32_t coarse = levels - 1;
    const std::int64_t k = hier.levels[static_cast<std::size_t>(coarse)].num_voxels();
    const std::int64_t m = mask_patch_count(ratio, k);
    std::vector<std::int32_t> rows(static_cast<std::size_t>(k));
    for (std::int64_t i = 0; i < k; ++i) rows[static_cast<std::size_t>(i)] = static_cast<std::int32_t>(i);
    Rng rng(split_seed(seed, 0x3a5cull));
    rng.shuffle(rows);
    mask.patch_rows.assign(rows.begin(), rows.begin() + m);
    std::sort(mask.patch_rows.begin(), mask.patch_rows.end());

    auto& top = mask.flags[static_cast<std::size_t>(coarse)];
    top.assign(static_cast<std::size_t>(k), 0);
    for (std::int32_t r : mask.patch_rows) top[static_cast<std::size_t>(r)] = 1;
    for (std::int32_t l = coarse - 1; l >= 0; --l) {
        const auto& parent = hier.parent_of[static_cast<std::size_t>(l)];
        auto& f = mask.flags[static_cast<std::size_t>(l)];
        f.assign(parent.size(), 0);
        const auto& up = mask.flags[static_cast<std::size_t>(l) + 1];
        for (std::size_t r = 0; r < parent.size(); ++r) f[r] = up[static_cast<std::size_t>(parent[r])];
    }
    for (std::int32_t l = 0; l < levels; ++l) {
        const auto& f = mask.flags[static_cast<std::size_t>(l)];
        for (std::size_t r = 0; r < f.size(); ++r)
            (f[r] ? mask.masked : mask.unmasked)[static_cast<std::size_t>(l)].push_back(static_cast<std::int32_t>(r));
    }
    return mask;
}

// Mutual-plurality source-point matching between two hierarchies built from
// the same cloud: a pairs with b iff b holds the plurality of a's points and
// vice versa. Ties break to the smaller row; unmatched voxels carry no loss.
inline std::vector<std::vector<std::pair<std::int32_t, std::int32_t>>> correspondence(const GridHierarchy& h1,
                                                                                      const GridHierarchy& h2) {
    if (h1.num_levels() != h2.num_levels()) throw ContractError("correspondence: level count mismatch");
    const std::size_t n_points = h1.levels[0].point_map.size();
    if (h2.levels[0].point_map.size() != n_points) throw ContractError("correspondence: point id spaces differ");

    std::vector<std::vector<std::pair<std::int32_t, std::int32_t>>> out(static_cast<std::size_t>(h1.num_levels()));
    for (std::int32_t l = 0; l < h1.num_levels(); ++l) {
        // point -> row at this level, per side
        auto rows_at = [l](const GridHierarchy& h) {
            std::vector<std::int32_t> pr(h.levels[0].point_map.size(), -1);
            const auto& grid = h.levels[static_cast<std::size_t>(l)];
            for (std::int32_t r = 0; r < grid.num_voxels(); ++r)
                for (std::int32_t p : grid.source_points[static_cast<std::size_t>(r)]) pr[static_cast<std::size_t>(p)] = r;
            return pr;
        };
        const auto pr1 = rows_at(h1);
        const auto pr2 = rows_at(h2);

        auto plurality = [](const VoxelGrid& grid, const std::vector<std::int32_t>& other_rows) {
            std::vector<std::int32_t> best(static_cast<std::size_t>(grid.num_voxels()), -1);
            for (std::int32_t r = 0; r < grid.num_voxels(); ++r) {
                std::map<std::int32_t, std::int32_t> counts;  // ordered: ties to smallest row
                for (std::int32_t p : grid.source_points[static_cast<std::size_t>(r)]) {
                    const std::int32_t o = other_rows[static_cast<std::size_t>(p)];
                    if (o >= 0) counts[o]++;
                }
                std::int32_t arg = -1, cnt = 0;
                for (auto [row, c] : counts)
                    if (c > cnt) {
                        arg = row;
                        cnt = c;
                    }
                best[static_cast<std::size_t>(r)] = arg;
            }
            return best;
        };
        const auto best12 = plurality(h1.levels[static_cast<std::size_t>(l)], pr2);
        const auto best21 = plurality(h2.levels[static_cast<std::size_t>(l)], pr1);
        for (std::int32_t a = 0; a < static_cast<std::int32_t>(best12.size()); ++a) {
            const std::int32_t b = best12[static_cast<std::size_t>(a)];
            if (b >= 0 && best21[static_cast<std::size_t>(b)] == a) out[static_cast<std::size_t>(l)].emplace_back(a, b);
        }
    }
    return out;
}

struct ViewConfig {
    double rotation_max = 2.0 * M_PI;
    double scale_min = 0.9, scale_max = 1.1;
    double flip_p = 0.5;
    double jitter_sigma = 0.005;
    double color_sigma = 0.05;
    bool elastic = false;
    double voxel_size = 0.1;
    std::int32_t levels = 4;
    std::int64_t crop_max_points = 1500;
    double mask_ratio = 0.4;
};

// Two augmented full views for the teacher, two cropped+masked student views,
// and the per-level cross-view voxel correspondence.
struct ViewPair {
    std::array<GridHierarchy, 2> student;
    std::array<MaskSpec, 2> masks;
    std::array<GridHierarchy, 2> teacher;
    std::vector<std::vector<std::pair<std::int32_t, std::int32_t>>> corr;  // per level
    std::string source_id;
};

inline AugmentationParams draw_augmentation(const ViewConfig& cfg, Rng& rng) {
    AugmentationParams p;
    p.rotation = rng.uniform(0.0, cfg.rotation_max);
    p.scale = rng.uniform(cfg.scale_min, cfg.scale_max);
    p.flip_x = rng.bernoulli(cfg.flip_p);
    p.flip_y = rng.bernoulli(cfg.flip_p);
    p.jitter_sigma = cfg.jitter_sigma;
    p.color_sigma = cfg.color_sigma;
    p.elastic = cfg.elastic;
    return p;
}

inline ViewPair build_view_pair(const PointCloud& cloud, const ViewConfig& cfg, std::uint64_t seed) {
    ViewPair pair;
    pair.source_id = cloud.scene_id;
    for (int v = 0; v < 2; ++v) {
        Rng draw(split_seed(seed, 0xd4a3ull, static_cast<std::uint64_t>(v)));
        const AugmentationParams params = draw_augmentation(cfg, draw);
        PointCloud view = augment(cloud, params, split_seed(seed, 0xa16ull, static_cast<std::uint64_t>(v)));
        VoxelGrid full = voxelize(view, cfg.voxel_size);
        pair.teacher[static_cast<std::size_t>(v)] = build_hierarchy(full, cfg.levels);
        VoxelGrid cropped = crop(full, cfg.crop_max_points, split_seed(seed, 0xc209ull, static_cast<std::uint64_t>(v)));
        GridHierarchy student = build_hierarchy(std::move(cropped), cfg.levels);
        if (student.levels.back().num_voxels() < 2)
            throw DegenerateViewError("crop produced fewer than 2 coarse voxels");
        pair.masks[static_cast<std::size_t>(v)] =
            make_mask(student, cfg.mask_ratio, split_seed(seed, 0x3a55ull, static_cast<std::uint64_t>(v)));
        pair.student[static_cast<std::size_t>(v)] = std::move(student);
    }
    pair.corr = correspondence(pair.teacher[0], pair.teacher[1]);
    return pair;
}

}  // namespace msm
