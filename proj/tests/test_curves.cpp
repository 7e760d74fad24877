#include <catch2/catch_amalgamated.hpp>

#include <array>
#include <cstdint>
#include <map>
#include <set>
#include <vector>

#include "msm/curves.hpp"
#include "msm/rng.hpp"
#include "msm/voxel.hpp"

using namespace msm;

namespace {

VoxelGrid grid_from_keys(const std::vector<VoxelKey>& keys) {
    VoxelGrid g;
    g.voxel_size = 1.0;
    for (const auto& k : keys) {
        g.key_index.emplace(k, g.num_voxels());
        g.keys.push_back(k);
        g.source_points.emplace_back();
    }
    g.features = Tensor({g.num_voxels(), 0});
    g.labels.assign(g.keys.size(), -1);
    return g;
}

// Independent recursive Hilbert enumerator: generates the visit order of all
// cells of a 2^m cube by descending into octants in Gray-code order, carrying
// the (entry, direction) frame of each subcube.
struct HilbertEnum {
    static std::uint32_t gray(std::uint32_t i) { return i ^ (i >> 1); }
    static std::uint32_t rol3(std::uint32_t v, int r) {
        r %= 3;
        return r == 0 ? (v & 7u) : (((v << r) | (v >> (3 - r))) & 7u);
    }
    static int ones_tail(std::uint32_t i) {
        int n = 0;
        while (i & 1u) {
            ++n;
            i >>= 1;
        }
        return n;
    }
    static std::uint32_t entry(std::uint32_t w) { return w == 0 ? 0u : gray(2u * ((w - 1u) / 2u)); }
    static int direction(std::uint32_t w) {
        if (w == 0) return 0;
        return (w & 1u) ? ones_tail(w) % 3 : ones_tail(w - 1u) % 3;
    }

    std::vector<std::array<std::uint32_t, 3>> cells;

    void run(int order) {
        cells.clear();
        descend(order, 0, 0, 0, 0, 0);
    }

    void descend(int m, std::uint32_t e, int d, std::uint32_t x, std::uint32_t y, std::uint32_t z) {
        if (m == 0) {
            cells.push_back({x, y, z});
            return;
        }
        for (std::uint32_t w = 0; w < 8; ++w) {
            const std::uint32_t l = rol3(gray(w), d + 1) ^ e;  // octant in the parent frame
            const std::uint32_t ce = e ^ rol3(entry(w), d + 1);
            const int cd = (d + direction(w) + 1) % 3;
            descend(m - 1, ce, cd, (x << 1) | (l & 1u), (y << 1) | ((l >> 1) & 1u), (z << 1) | ((l >> 2) & 1u));
        }
    }
};

}  // namespace

TEST_CASE("morton interleaves x then y then z") {
    REQUIRE(curves::morton3(1, 0, 0) == 1);
    REQUIRE(curves::morton3(0, 1, 0) == 2);
    REQUIRE(curves::morton3(0, 0, 1) == 4);
    REQUIRE(curves::morton3(1, 1, 1) == 7);
    REQUIRE(curves::morton3(2, 0, 0) == 8);
}

TEST_CASE("serialize Z orders the unit square by morton code") {
    VoxelGrid g = grid_from_keys({{0, 1, 0}, {1, 1, 0}, {1, 0, 0}, {0, 0, 0}});
    auto order = serialize(g, Curve::Z);
    // codes: (0,0,0)=0 (1,0,0)=1 (0,1,0)=2 (1,1,0)=3
    REQUIRE(g.keys[order.permutation[0]] == VoxelKey{0, 0, 0});
    REQUIRE(g.keys[order.permutation[1]] == VoxelKey{1, 0, 0});
    REQUIRE(g.keys[order.permutation[2]] == VoxelKey{0, 1, 0});
    REQUIRE(g.keys[order.permutation[3]] == VoxelKey{1, 1, 0});
}

TEST_CASE("TZ rotates the axes fed to the codec") {
    // key (1,0,0) under (y,z,x) becomes codec coords (0,0,1) -> code 4
    VoxelGrid g = grid_from_keys({{1, 0, 0}, {0, 0, 1}});
    auto order = serialize(g, Curve::TZ);
    // (0,0,1) -> codec (0,1,0) = 2; (1,0,0) -> codec (0,0,1) = 4
    REQUIRE(g.keys[order.permutation[0]] == VoxelKey{0, 0, 1});
    REQUIRE(g.keys[order.permutation[1]] == VoxelKey{1, 0, 0});
}

TEST_CASE("hilbert order-1 visits the 8 corners in a Gray sequence") {
    // frozen from a hand-checked walk: consecutive corners differ in one axis
    const std::array<std::array<std::uint32_t, 3>, 8> expected = {
        {{0, 0, 0}, {0, 1, 0}, {0, 1, 1}, {0, 0, 1}, {1, 0, 1}, {1, 1, 1}, {1, 1, 0}, {1, 0, 0}}};
    for (std::uint32_t h = 0; h < 8; ++h) {
        bool found = false;
        for (std::uint32_t x = 0; x < 2 && !found; ++x)
            for (std::uint32_t y = 0; y < 2 && !found; ++y)
                for (std::uint32_t z = 0; z < 2 && !found; ++z)
                    if (curves::hilbert3(x, y, z, 1) == h) {
                        REQUIRE(std::array<std::uint32_t, 3>{x, y, z} == expected[h]);
                        found = true;
                    }
        REQUIRE(found);
    }
}

TEST_CASE("hilbert matches the recursive enumerator oracle") {
    for (int order = 1; order <= 3; ++order) {
        HilbertEnum oracle;
        oracle.run(order);
        REQUIRE(oracle.cells.size() == (1u << (3 * order)));
        for (std::size_t pos = 0; pos < oracle.cells.size(); ++pos) {
            const auto& c = oracle.cells[pos];
            REQUIRE(curves::hilbert3(c[0], c[1], c[2], order) == pos);
        }
    }
}

TEST_CASE("hilbert codes form a unit-step hamiltonian path") {
    const int order = 3, n = 1 << order;
    std::map<std::uint64_t, std::array<int, 3>> bycode;
    for (int x = 0; x < n; ++x)
        for (int y = 0; y < n; ++y)
            for (int z = 0; z < n; ++z) REQUIRE(bycode.emplace(curves::hilbert3(x, y, z, order), std::array<int, 3>{x, y, z}).second);
    for (std::uint64_t c = 1; c < (1ull << (3 * order)); ++c) {
        const auto& a = bycode.at(c - 1);
        const auto& b = bycode.at(c);
        const int dist = std::abs(a[0] - b[0]) + std::abs(a[1] - b[1]) + std::abs(a[2] - b[2]);
        REQUIRE(dist == 1);
    }
}

TEST_CASE("serialize permutations are bijections for all curves") {
    Rng rng(123);
    for (int trial = 0; trial < 1000; ++trial) {
        const int n = 1 + static_cast<int>(rng.below(60));
        std::set<std::tuple<int, int, int>> used;
        std::vector<VoxelKey> keys;
        while (static_cast<int>(keys.size()) < n) {
            VoxelKey k{static_cast<std::int32_t>(rng.below(40)) - 20, static_cast<std::int32_t>(rng.below(40)) - 20,
                       static_cast<std::int32_t>(rng.below(40)) - 20};
            if (used.emplace(k.i, k.j, k.k).second) keys.push_back(k);
        }
        VoxelGrid g = grid_from_keys(keys);
        for (Curve c : {Curve::Z, Curve::TZ, Curve::H, Curve::TH}) {
            auto order = serialize(g, c);
            REQUIRE(order.permutation.size() == static_cast<std::size_t>(n));
            std::set<std::int32_t> seen(order.permutation.begin(), order.permutation.end());
            REQUIRE(seen.size() == static_cast<std::size_t>(n));
            REQUIRE(*seen.begin() == 0);
            REQUIRE(*seen.rbegin() == n - 1);
            auto inv = order.inverse();
            for (std::size_t p = 0; p < order.permutation.size(); ++p)
                REQUIRE(inv[static_cast<std::size_t>(order.permutation[p])] == static_cast<std::int32_t>(p));
        }
    }
}

TEST_CASE("serialize rejects coordinates beyond the bit budget") {
    VoxelGrid g = grid_from_keys({{0, 0, 0}, {70000, 0, 0}});
    REQUIRE_THROWS_AS(serialize(g, Curve::Z), RangeError);
}
