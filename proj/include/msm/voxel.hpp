#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <unordered_map>
#include <vector>

#include "msm/errors.hpp"
#include "msm/point_cloud.hpp"
#include "msm/tensor.hpp"

namespace msm {

struct VoxelKey {
    std::int32_t i = 0, j = 0, k = 0;

    bool operator==(const VoxelKey& o) const { return i == o.i && j == o.j && k == o.k; }

    VoxelKey parent() const {
        // arithmetic shift == floor division by 2, also for negatives
        return {i >> 1, j >> 1, k >> 1};
    }

    // child position within the parent 2x2x2 block, 0..7
    std::int32_t octant() const { return (i & 1) | ((j & 1) << 1) | ((k & 1) << 2); }
};

struct VoxelKeyHash {
    std::size_t operator()(const VoxelKey& k) const {
        std::uint64_t h = 0xcbf29ce484222325ull;
        for (std::uint64_t v : {static_cast<std::uint64_t>(static_cast<std::uint32_t>(k.i)),
                                static_cast<std::uint64_t>(static_cast<std::uint32_t>(k.j)),
                                static_cast<std::uint64_t>(static_cast<std::uint32_t>(k.k))}) {
            h ^= v;
            h *= 0x100000001b3ull;
        }
        return static_cast<std::size_t>(h);
    }
};

// One resolution level of a sparse scene; only occupied voxels are stored.
struct VoxelGrid {
    std::int32_t level = 0;
    double voxel_size = 0.0;  // edge length at this level
    std::vector<VoxelKey> keys;
    std::unordered_map<VoxelKey, std::int32_t, VoxelKeyHash> key_index;
    Tensor features;                                      // [num_voxels x C]
    std::vector<std::int32_t> labels;                     // majority vote, ties to smallest id
    std::vector<std::int32_t> point_map;                  // source point -> row, -1 if absent
    std::vector<std::vector<std::int32_t>> source_points; // row -> contributing point ids

    std::int32_t num_voxels() const { return static_cast<std::int32_t>(keys.size()); }

    std::array<double, 3> center(std::int32_t row) const {
        const VoxelKey& k = keys[static_cast<std::size_t>(row)];
        return {(k.i + 0.5) * voxel_size, (k.j + 0.5) * voxel_size, (k.k + 0.5) * voxel_size};
    }

    std::int32_t find(const VoxelKey& k) const {
        auto it = key_index.find(k);
        return it == key_index.end() ? -1 : it->second;
    }
};

// key = floor(position / voxel_size); per-voxel attribute = mean of the
// contributing points, label = majority vote with ties to the smallest id.
inline VoxelGrid voxelize(const PointCloud& cloud, double voxel_size) {
    cloud.validate();
    if (voxel_size <= 0.0) throw SpecError("voxel size must be positive");
    const std::int64_t n = cloud.size();

    VoxelGrid grid;
    grid.level = 0;
    grid.voxel_size = voxel_size;
    grid.point_map.assign(static_cast<std::size_t>(n), -1);

    for (std::int64_t p = 0; p < n; ++p) {
        VoxelKey key{static_cast<std::int32_t>(std::floor(cloud.positions.at(p, 0) / voxel_size)),
                     static_cast<std::int32_t>(std::floor(cloud.positions.at(p, 1) / voxel_size)),
                     static_cast<std::int32_t>(std::floor(cloud.positions.at(p, 2) / voxel_size))};
        auto [it, inserted] = grid.key_index.try_emplace(key, grid.num_voxels());
        if (inserted) {
            grid.keys.push_back(key);
            grid.source_points.emplace_back();
        }
        grid.point_map[static_cast<std::size_t>(p)] = it->second;
        grid.source_points[static_cast<std::size_t>(it->second)].push_back(static_cast<std::int32_t>(p));
    }

    const std::int32_t v = grid.num_voxels();
    grid.features = Tensor({v, 3});
    grid.labels.assign(static_cast<std::size_t>(v), -1);
    for (std::int32_t r = 0; r < v; ++r) {
        const auto& pts = grid.source_points[static_cast<std::size_t>(r)];
        double c[3] = {0, 0, 0};
        std::map<std::int32_t, std::int32_t> votes;  // ordered: ties resolve to smallest id
        for (std::int32_t p : pts) {
            for (int a = 0; a < 3; ++a) c[a] += cloud.colors.at(p, a);
            votes[cloud.labels[static_cast<std::size_t>(p)]]++;
        }
        for (int a = 0; a < 3; ++a) grid.features.at(r, a) = c[a] / static_cast<double>(pts.size());
        std::int32_t best = -1, best_count = 0;
        for (auto [cls, count] : votes)
            if (count > best_count) {
                best = cls;
                best_count = count;
            }
        grid.labels[static_cast<std::size_t>(r)] = best;
    }
    return grid;
}

// L nested grids, finest first, with mutually inverse parent/child row maps.
struct GridHierarchy {
    std::vector<VoxelGrid> levels;
    // parent_of[l][fine row at level l] = coarse row at level l+1, l in [0, L-2]
    std::vector<std::vector<std::int32_t>> parent_of;
    // child_of[l][coarse row at level l+1] = fine rows at level l
    std::vector<std::vector<std::vector<std::int32_t>>> child_of;

    std::int32_t num_levels() const { return static_cast<std::int32_t>(levels.size()); }

    // row of the level `to_level` ancestor of a row at `from_level`
    std::int32_t ancestor(std::int32_t from_level, std::int32_t row, std::int32_t to_level) const {
        std::int32_t r = row;
        for (std::int32_t l = from_level; l < to_level; ++l)
            r = parent_of[static_cast<std::size_t>(l)][static_cast<std::size_t>(r)];
        return r;
    }
};

inline GridHierarchy build_hierarchy(VoxelGrid base, std::int32_t level_count) {
    if (level_count < 2) throw SpecError("hierarchy needs at least 2 levels");
    GridHierarchy h;
    h.levels.push_back(std::move(base));
    for (std::int32_t l = 1; l < level_count; ++l) {
        const VoxelGrid& fine = h.levels.back();
        VoxelGrid coarse;
        coarse.level = l;
        coarse.voxel_size = fine.voxel_size * 2.0;
        std::vector<std::int32_t> parent_rows(static_cast<std::size_t>(fine.num_voxels()));
        for (std::int32_t r = 0; r < fine.num_voxels(); ++r) {
            VoxelKey pk = fine.keys[static_cast<std::size_t>(r)].parent();
            auto [it, inserted] = coarse.key_index.try_emplace(pk, coarse.num_voxels());
            if (inserted) {
                coarse.keys.push_back(pk);
                coarse.source_points.emplace_back();
            }
            parent_rows[static_cast<std::size_t>(r)] = it->second;
        }
        coarse.features = Tensor({coarse.num_voxels(), 0});
        coarse.labels.assign(static_cast<std::size_t>(coarse.num_voxels()), -1);
        std::vector<std::vector<std::int32_t>> children(static_cast<std::size_t>(coarse.num_voxels()));
        for (std::int32_t r = 0; r < fine.num_voxels(); ++r) {
            const std::int32_t pr = parent_rows[static_cast<std::size_t>(r)];
            children[static_cast<std::size_t>(pr)].push_back(r);
            auto& sp = coarse.source_points[static_cast<std::size_t>(pr)];
            const auto& fine_sp = fine.source_points[static_cast<std::size_t>(r)];
            sp.insert(sp.end(), fine_sp.begin(), fine_sp.end());
        }
        h.parent_of.push_back(std::move(parent_rows));
        h.child_of.push_back(std::move(children));
        h.levels.push_back(std::move(coarse));
    }
    return h;
}

// 3x3x3 stencil offsets enumerated as (di+1)*9 + (dj+1)*3 + (dk+1); the
// self offset (0,0,0) is id 13.
constexpr std::int32_t kStencilSize = 27;
constexpr std::int32_t kStencilCenter = 13;

inline std::array<std::int32_t, 3> stencil_offset(std::int32_t id) {
    return {id / 9 - 1, (id / 3) % 3 - 1, id % 3 - 1};
}

// Per-voxel list of occupied stencil neighbors as (offset id, neighbor row).
inline std::vector<std::vector<std::pair<std::int32_t, std::int32_t>>> kernel_neighbors(const VoxelGrid& grid) {
    std::vector<std::vector<std::pair<std::int32_t, std::int32_t>>> out(static_cast<std::size_t>(grid.num_voxels()));
    for (std::int32_t r = 0; r < grid.num_voxels(); ++r) {
        const VoxelKey& key = grid.keys[static_cast<std::size_t>(r)];
        for (std::int32_t o = 0; o < kStencilSize; ++o) {
            auto d = stencil_offset(o);
            std::int32_t nr = grid.find({key.i + d[0], key.j + d[1], key.k + d[2]});
            if (nr >= 0) out[static_cast<std::size_t>(r)].emplace_back(o, nr);
        }
    }
    return out;
}

// Gather/scatter layout for submanifold convolution: per offset, aligned
// source and destination row lists.
struct StencilPairs {
    std::array<std::vector<std::int32_t>, kStencilSize> src, dst;
};

inline StencilPairs stencil_pairs(const VoxelGrid& grid) {
    StencilPairs pairs;
    for (std::int32_t r = 0; r < grid.num_voxels(); ++r) {
        const VoxelKey& key = grid.keys[static_cast<std::size_t>(r)];
        for (std::int32_t o = 0; o < kStencilSize; ++o) {
            auto d = stencil_offset(o);
            std::int32_t nr = grid.find({key.i + d[0], key.j + d[1], key.k + d[2]});
            if (nr >= 0) {
                pairs.src[static_cast<std::size_t>(o)].push_back(nr);
                pairs.dst[static_cast<std::size_t>(o)].push_back(r);
            }
        }
    }
    return pairs;
}

// Interpolates each query among the 8 surrounding voxel centers. Unoccupied
// corners are dropped and the remaining weights renormalized, which keeps
// constant fields exact; a query with no occupied corner (or zero total
// weight) falls back to the nearest occupied voxel.
inline Tensor trilinear_sample(const VoxelGrid& grid, const Tensor& per_voxel_features, const Tensor& queries) {
    if (per_voxel_features.rows() != grid.num_voxels()) throw ShapeError("trilinear_sample: feature rows != voxel count");
    if (queries.cols() != 3) throw ShapeError("trilinear_sample: queries must be Mx3");
    const std::int64_t m = queries.rows();
    const std::int64_t c = per_voxel_features.cols();
    Tensor out({m, c});

    auto nearest_row = [&](double x, double y, double z) {
        std::int32_t best = 0;
        double best_d = std::numeric_limits<double>::infinity();
        for (std::int32_t r = 0; r < grid.num_voxels(); ++r) {
            auto ctr = grid.center(r);
            const double dx = ctr[0] - x, dy = ctr[1] - y, dz = ctr[2] - z;
            const double d = dx * dx + dy * dy + dz * dz;
            if (d < best_d) {
                best_d = d;
                best = r;
            }
        }
        return best;
    };

    for (std::int64_t q = 0; q < m; ++q) {
        const double gx = queries.at(q, 0) / grid.voxel_size - 0.5;
        const double gy = queries.at(q, 1) / grid.voxel_size - 0.5;
        const double gz = queries.at(q, 2) / grid.voxel_size - 0.5;
        const double bx = std::floor(gx), by = std::floor(gy), bz = std::floor(gz);
        // snap near-integer fractions so queries at voxel centers stay exact
        // despite the position/size round trip
        auto snap = [](double f) { return f < 1e-9 ? 0.0 : (f > 1.0 - 1e-9 ? 1.0 : f); };
        const double fx = snap(gx - bx), fy = snap(gy - by), fz = snap(gz - bz);

        double wsum = 0.0;
        std::int32_t rows[8];
        double weights[8];
        int found = 0;
        for (int a = 0; a < 2; ++a)
            for (int b = 0; b < 2; ++b)
                for (int d = 0; d < 2; ++d) {
                    VoxelKey key{static_cast<std::int32_t>(bx) + a, static_cast<std::int32_t>(by) + b,
                                 static_cast<std::int32_t>(bz) + d};
                    const std::int32_t r = grid.find(key);
                    if (r < 0) continue;
                    const double w = (a ? fx : 1.0 - fx) * (b ? fy : 1.0 - fy) * (d ? fz : 1.0 - fz);
                    rows[found] = r;
                    weights[found] = w;
                    ++found;
                    wsum += w;
                }
        if (found == 0 || wsum <= 1e-12) {
            const std::int32_t r = nearest_row(queries.at(q, 0), queries.at(q, 1), queries.at(q, 2));
            for (std::int64_t f = 0; f < c; ++f) out.at(q, f) = per_voxel_features.at(r, f);
            continue;
        }
        for (int i = 0; i < found; ++i) {
            const double w = weights[i] / wsum;
            const double* src = per_voxel_features.data() + static_cast<std::int64_t>(rows[i]) * c;
            double* dst = out.data() + q * c;
            for (std::int64_t f = 0; f < c; ++f) dst[f] += w * src[f];
        }
    }
    return out;
}

}  // namespace msm
