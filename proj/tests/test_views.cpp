#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "msm/rng.hpp"
#include "msm/scene.hpp"
#include "msm/views.hpp"

using namespace msm;

namespace {

PointCloud small_scene(std::uint64_t seed, double density = 90.0) {
    SceneSpec spec;
    spec.seed = seed;
    spec.density = density;
    return generate_scene(spec);
}

bool same_key_sets(const VoxelGrid& a, const VoxelGrid& b) {
    if (a.num_voxels() != b.num_voxels()) return false;
    for (const auto& k : a.keys)
        if (b.find(k) < 0) return false;
    return true;
}

}  // namespace

TEST_CASE("augment with identity params returns the identical cloud") {
    PointCloud c = small_scene(1);
    AugmentationParams p;  // rotation 0, scale 1, no flips, zero sigmas
    PointCloud a = augment(c, p, 99);
    for (std::int64_t i = 0; i < c.positions.numel(); ++i) REQUIRE(a.positions[i] == c.positions[i]);
    for (std::int64_t i = 0; i < c.colors.numel(); ++i) REQUIRE(a.colors[i] == c.colors[i]);
    REQUIRE(a.labels == c.labels);
}

TEST_CASE("augment rotation pi maps (1,0,0) to (-1,0,0)") {
    PointCloud c;
    c.positions = Tensor({1, 3}, {1.0, 0.0, 0.0});
    c.colors = Tensor({1, 3});
    c.labels = {0};
    c.instance_ids = {0};
    AugmentationParams p;
    p.rotation = M_PI;
    PointCloud a = augment(c, p, 0);
    REQUIRE(a.positions.at(0, 0) == Catch::Approx(-1.0).margin(1e-12));
    REQUIRE(a.positions.at(0, 1) == Catch::Approx(0.0).margin(1e-12));
    REQUIRE(a.positions.at(0, 2) == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("augment scale multiplies pairwise distances") {
    PointCloud c = small_scene(2, 40.0);
    AugmentationParams p;
    p.scale = 1.1;
    PointCloud a = augment(c, p, 5);
    Rng rng(8);
    for (int t = 0; t < 200; ++t) {
        const auto i = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(c.size())));
        const auto j = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(c.size())));
        double d0 = 0, d1 = 0;
        for (int ax = 0; ax < 3; ++ax) {
            d0 += std::pow(c.positions.at(i, ax) - c.positions.at(j, ax), 2);
            d1 += std::pow(a.positions.at(i, ax) - a.positions.at(j, ax), 2);
        }
        REQUIRE(std::sqrt(d1) == Catch::Approx(1.1 * std::sqrt(d0)).margin(1e-9));
    }
}

TEST_CASE("augment preserves point count and label multiset") {
    PointCloud c = small_scene(3, 50.0);
    Rng rng(77);
    AugmentationParams p;
    p.rotation = rng.uniform(0, 2 * M_PI);
    p.scale = 1.05;
    p.flip_x = true;
    p.jitter_sigma = 0.01;
    p.color_sigma = 0.05;
    PointCloud a = augment(c, p, 123);
    REQUIRE(a.size() == c.size());
    auto ml = c.labels, al = a.labels;
    std::sort(ml.begin(), ml.end());
    std::sort(al.begin(), al.end());
    REQUIRE(ml == al);
}

TEST_CASE("crop keeps the whole grid when max_points covers it") {
    PointCloud c = small_scene(4, 60.0);
    VoxelGrid g = voxelize(c, 0.1);
    VoxelGrid sub = crop(g, c.size(), 17);
    REQUIRE(same_key_sets(g, sub));
}

TEST_CASE("crop with max_points 1 keeps only the seed voxel") {
    PointCloud c = small_scene(5, 60.0);
    VoxelGrid g = voxelize(c, 0.1);
    VoxelGrid sub = crop(g, 1, 3);
    REQUIRE(sub.num_voxels() == 1);
    REQUIRE(g.find(sub.keys[0]) >= 0);
}

TEST_CASE("crop selection matches the nearest-by-distance sort oracle") {
    PointCloud c = small_scene(6, 60.0);
    VoxelGrid g = voxelize(c, 0.1);
    const std::int64_t target = c.size() / 2;
    VoxelGrid sub = crop(g, target, 11);
    // row 0 of the crop is the seed voxel (distance zero)
    const VoxelKey seed_key = sub.keys[0];
    const std::int32_t seed_row = g.find(seed_key);
    REQUIRE(seed_row >= 0);
    auto sc = g.center(seed_row);
    std::vector<std::pair<double, std::int32_t>> order;
    for (std::int32_t r = 0; r < g.num_voxels(); ++r) {
        auto ctr = g.center(r);
        double d = 0;
        for (int a = 0; a < 3; ++a) d += (ctr[a] - sc[a]) * (ctr[a] - sc[a]);
        order.emplace_back(d, r);
    }
    std::sort(order.begin(), order.end());
    std::set<std::int32_t> expected;
    std::int64_t points = 0;
    for (auto [d, r] : order) {
        expected.insert(r);
        points += static_cast<std::int64_t>(g.source_points[static_cast<std::size_t>(r)].size());
        if (points >= target) break;
    }
    REQUIRE(sub.num_voxels() == static_cast<std::int32_t>(expected.size()));
    for (const auto& k : sub.keys) REQUIRE(expected.count(g.find(k)) == 1);
    // crop point count first reaches/exceeds the target
    std::int64_t got = 0;
    for (const auto& sp : sub.source_points) got += static_cast<std::int64_t>(sp.size());
    REQUIRE(got >= target);
}

TEST_CASE("mask ratio 0 and 1 are empty and full") {
    PointCloud c = small_scene(7, 60.0);
    GridHierarchy h = build_hierarchy(voxelize(c, 0.1), 3);
    MaskSpec none = make_mask(h, 0.0, 5);
    MaskSpec all = make_mask(h, 1.0, 5);
    for (std::int32_t l = 0; l < 3; ++l) {
        REQUIRE(none.masked[static_cast<std::size_t>(l)].empty());
        REQUIRE(static_cast<std::int32_t>(none.unmasked[static_cast<std::size_t>(l)].size()) ==
                h.levels[static_cast<std::size_t>(l)].num_voxels());
        REQUIRE(all.unmasked[static_cast<std::size_t>(l)].empty());
        REQUIRE(static_cast<std::int32_t>(all.masked[static_cast<std::size_t>(l)].size()) ==
                h.levels[static_cast<std::size_t>(l)].num_voxels());
    }
}

TEST_CASE("mask patch count is the rounded-up ratio share") {
    REQUIRE(mask_patch_count(0.4, 10) == 4);
    REQUIRE(mask_patch_count(0.35, 10) == 4);
    REQUIRE(mask_patch_count(0.5, 8) == 4);
    REQUIRE(mask_patch_count(0.01, 10) == 1);
    REQUIRE(mask_patch_count(0.0, 10) == 0);
    REQUIRE(mask_patch_count(1.0, 10) == 10);
}

TEST_CASE("mask propagates to descendants and matches the ancestor-walk oracle") {
    Rng rng(15);
    for (int trial = 0; trial < 20; ++trial) {
        PointCloud c = small_scene(100 + static_cast<std::uint64_t>(trial), 50.0);
        GridHierarchy h = build_hierarchy(voxelize(c, 0.12), 4);
        MaskSpec m = make_mask(h, 0.4, rng.next_u64());
        const std::int32_t top = h.num_levels() - 1;
        REQUIRE(static_cast<std::int64_t>(m.masked[static_cast<std::size_t>(top)].size()) ==
                mask_patch_count(0.4, h.levels[static_cast<std::size_t>(top)].num_voxels()));
        for (std::int32_t l = 0; l < top; ++l) {
            const auto& grid = h.levels[static_cast<std::size_t>(l)];
            for (std::int32_t r = 0; r < grid.num_voxels(); ++r) {
                bool ancestor_masked = m.is_masked(top, h.ancestor(l, r, top));
                REQUIRE(m.is_masked(l, r) == ancestor_masked);
            }
            // partition
            REQUIRE(m.masked[static_cast<std::size_t>(l)].size() + m.unmasked[static_cast<std::size_t>(l)].size() ==
                    static_cast<std::size_t>(grid.num_voxels()));
        }
    }
}

TEST_CASE("correspondence of identical views is the identity pairing") {
    PointCloud c = small_scene(8, 50.0);
    GridHierarchy h1 = build_hierarchy(voxelize(c, 0.1), 3);
    GridHierarchy h2 = build_hierarchy(voxelize(c, 0.1), 3);
    auto corr = correspondence(h1, h2);
    for (std::int32_t l = 0; l < 3; ++l) {
        REQUIRE(corr[static_cast<std::size_t>(l)].size() == static_cast<std::size_t>(h1.levels[static_cast<std::size_t>(l)].num_voxels()));
        for (auto [a, b] : corr[static_cast<std::size_t>(l)]) REQUIRE(a == b);
    }
}

TEST_CASE("correspondence drops a voxel whose points were deleted") {
    PointCloud c = small_scene(9, 50.0);
    VoxelGrid g = voxelize(c, 0.1);
    // remove all points of one voxel from the second view
    const std::int32_t victim = 5;
    std::set<std::int32_t> gone(g.source_points[victim].begin(), g.source_points[victim].end());
    PointCloud c2;
    const std::int64_t keep = c.size() - static_cast<std::int64_t>(gone.size());
    c2.positions = Tensor({keep, 3});
    c2.colors = Tensor({keep, 3});
    // keep original point ids for the shared id space by mapping retained points
    // onto their old index via a lookup the oracle also uses
    std::vector<std::int32_t> old_of_new;
    for (std::int64_t p = 0, q = 0; p < c.size(); ++p) {
        if (gone.count(static_cast<std::int32_t>(p))) continue;
        for (int a = 0; a < 3; ++a) {
            c2.positions.at(q, a) = c.positions.at(p, a);
            c2.colors.at(q, a) = c.colors.at(p, a);
        }
        c2.labels.push_back(c.labels[static_cast<std::size_t>(p)]);
        c2.instance_ids.push_back(c.instance_ids[static_cast<std::size_t>(p)]);
        old_of_new.push_back(static_cast<std::int32_t>(p));
        ++q;
    }
    // voxelize the reduced cloud, then rewrite its point ids into the original
    // id space so both hierarchies share ids
    GridHierarchy h2 = build_hierarchy(voxelize(c2, 0.1), 2);
    for (auto& level : h2.levels) {
        std::vector<std::int32_t> pm(c.size(), -1);
        for (auto& sp : level.source_points)
            for (auto& p : sp) p = old_of_new[static_cast<std::size_t>(p)];
        for (std::int32_t r = 0; r < level.num_voxels(); ++r)
            for (std::int32_t p : level.source_points[static_cast<std::size_t>(r)]) pm[static_cast<std::size_t>(p)] = r;
        level.point_map = std::move(pm);
    }
    GridHierarchy h1 = build_hierarchy(std::move(g), 2);
    auto corr = correspondence(h1, h2);
    std::set<std::int32_t> matched1;
    for (auto [a, b] : corr[0]) matched1.insert(a);
    REQUIRE(matched1.count(victim) == 0);
    REQUIRE(matched1.size() == static_cast<std::size_t>(h1.levels[0].num_voxels() - 1));
}

TEST_CASE("correspondence matches the exhaustive mutual-plurality oracle") {
    PointCloud c = small_scene(10, 45.0);
    AugmentationParams p1, p2;
    p2.rotation = 0.7;
    p2.scale = 1.05;
    GridHierarchy h1 = build_hierarchy(voxelize(augment(c, p1, 1), 0.1), 3);
    GridHierarchy h2 = build_hierarchy(voxelize(augment(c, p2, 2), 0.1), 3);
    auto corr = correspondence(h1, h2);
    for (std::int32_t l = 0; l < 3; ++l) {
        const auto& g1 = h1.levels[static_cast<std::size_t>(l)];
        const auto& g2 = h2.levels[static_cast<std::size_t>(l)];
        // overlap counts by exhaustive pairwise intersection
        std::map<std::pair<std::int32_t, std::int32_t>, std::int32_t> overlap;
        for (std::int32_t a = 0; a < g1.num_voxels(); ++a) {
            std::set<std::int32_t> pa(g1.source_points[static_cast<std::size_t>(a)].begin(),
                                      g1.source_points[static_cast<std::size_t>(a)].end());
            for (std::int32_t b = 0; b < g2.num_voxels(); ++b) {
                std::int32_t n = 0;
                for (std::int32_t p : g2.source_points[static_cast<std::size_t>(b)]) n += pa.count(p) ? 1 : 0;
                if (n > 0) overlap[{a, b}] = n;
            }
        }
        auto argmax1 = [&](std::int32_t a) {
            std::int32_t best = -1, cnt = 0;
            for (std::int32_t b = 0; b < g2.num_voxels(); ++b) {
                auto it = overlap.find({a, b});
                if (it != overlap.end() && it->second > cnt) {
                    best = b;
                    cnt = it->second;
                }
            }
            return best;
        };
        auto argmax2 = [&](std::int32_t b) {
            std::int32_t best = -1, cnt = 0;
            for (std::int32_t a = 0; a < g1.num_voxels(); ++a) {
                auto it = overlap.find({a, b});
                if (it != overlap.end() && it->second > cnt) {
                    best = a;
                    cnt = it->second;
                }
            }
            return best;
        };
        std::vector<std::pair<std::int32_t, std::int32_t>> expected;
        for (std::int32_t a = 0; a < g1.num_voxels(); ++a) {
            const std::int32_t b = argmax1(a);
            if (b >= 0 && argmax2(b) == a) expected.emplace_back(a, b);
        }
        REQUIRE(corr[static_cast<std::size_t>(l)] == expected);
    }
}

TEST_CASE("correspondence is symmetric and injective per side") {
    PointCloud c = small_scene(11, 45.0);
    ViewConfig cfg;
    cfg.crop_max_points = c.size();
    ViewPair pair = build_view_pair(c, cfg, 31);
    for (const auto& level : pair.corr) {
        std::set<std::int32_t> left, right;
        for (auto [a, b] : level) {
            REQUIRE(left.insert(a).second);
            REQUIRE(right.insert(b).second);
        }
    }
}

TEST_CASE("build_view_pair with identity augmentations and no crop aligns level-0 keys") {
    PointCloud c = small_scene(12, 45.0);
    ViewConfig cfg;
    cfg.rotation_max = 0.0;
    cfg.scale_min = cfg.scale_max = 1.0;
    cfg.flip_p = 0.0;
    cfg.jitter_sigma = 0.0;
    cfg.color_sigma = 0.0;
    cfg.crop_max_points = c.size();
    cfg.mask_ratio = 0.0;
    ViewPair pair = build_view_pair(c, cfg, 77);
    REQUIRE(same_key_sets(pair.student[0].levels[0], pair.student[1].levels[0]));
    REQUIRE(same_key_sets(pair.teacher[0].levels[0], pair.teacher[1].levels[0]));
}

TEST_CASE("build_view_pair is deterministic in the seed") {
    PointCloud c = small_scene(13, 45.0);
    ViewConfig cfg;
    ViewPair a = build_view_pair(c, cfg, 5);
    ViewPair b = build_view_pair(c, cfg, 5);
    REQUIRE(a.corr == b.corr);
    for (int v = 0; v < 2; ++v) {
        REQUIRE(a.student[v].levels[0].keys.size() == b.student[v].levels[0].keys.size());
        for (std::size_t i = 0; i < a.student[v].levels[0].keys.size(); ++i)
            REQUIRE(a.student[v].levels[0].keys[i] == b.student[v].levels[0].keys[i]);
        for (std::int32_t l = 0; l < a.masks[v].num_levels; ++l)
            REQUIRE(a.masks[v].masked[static_cast<std::size_t>(l)] == b.masks[v].masked[static_cast<std::size_t>(l)]);
        for (std::int64_t i = 0; i < a.teacher[v].levels[0].features.numel(); ++i)
            REQUIRE(a.teacher[v].levels[0].features[i] == b.teacher[v].levels[0].features[i]);
    }
}

TEST_CASE("every correspondence pair shares at least one source point") {
    PointCloud c = small_scene(14, 45.0);
    ViewConfig cfg;
    ViewPair pair = build_view_pair(c, cfg, 9);
    for (std::int32_t l = 0; l < static_cast<std::int32_t>(pair.corr.size()); ++l) {
        const auto& g1 = pair.teacher[0].levels[static_cast<std::size_t>(l)];
        const auto& g2 = pair.teacher[1].levels[static_cast<std::size_t>(l)];
        for (auto [a, b] : pair.corr[static_cast<std::size_t>(l)]) {
            std::set<std::int32_t> pa(g1.source_points[static_cast<std::size_t>(a)].begin(),
                                      g1.source_points[static_cast<std::size_t>(a)].end());
            bool shared = false;
            for (std::int32_t p : g2.source_points[static_cast<std::size_t>(b)]) shared = shared || pa.count(p) > 0;
            REQUIRE(shared);
        }
    }
}
