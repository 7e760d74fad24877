#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "msm/errors.hpp"
#include "msm/voxel.hpp"

namespace msm {

enum class Curve { Z, TZ, H, TH };

inline const char* curve_name(Curve c) {
    switch (c) {
        case Curve::Z: return "Z";
        case Curve::TZ: return "TZ";
        case Curve::H: return "H";
        case Curve::TH: return "TH";
    }
    return "?";
}

inline Curve curve_from_name(const std::string& s) {
    if (s == "Z") return Curve::Z;
    if (s == "TZ") return Curve::TZ;
    if (s == "H") return Curve::H;
    if (s == "TH") return Curve::TH;
    throw ConfigError("unknown serialization curve: " + s);
}

constexpr int kCurveBits = 16;  // per axis, after offsetting to the grid min corner

namespace curves {

// spread the low 16 bits of x so there are two zero bits between each
inline std::uint64_t spread3(std::uint64_t x) {
    x &= 0xffffull;
    x = (x | (x << 16)) & 0x0000ff0000ffull;
    x = (x | (x << 8)) & 0x00f00f00f00full;
    x = (x | (x << 4)) & 0x0c30c30c30c3ull;
    x = (x | (x << 2)) & 0x249249249249ull;
    return x;
}

// Z-order code, x in bit 0, y in bit 1, z in bit 2
inline std::uint64_t morton3(std::uint32_t x, std::uint32_t y, std::uint32_t z) {
    return spread3(x) | (spread3(y) << 1) | (spread3(z) << 2);
}

// Gray-code based Hilbert index for 3 dimensions (cf. C. Hamilton, "Compact
// Hilbert indices", Dalhousie TR CS-2006-07). Coordinate bit 0 is x.
inline std::uint32_t gray(std::uint32_t i) { return i ^ (i >> 1); }

inline std::uint32_t gray_inverse3(std::uint32_t g) {
    std::uint32_t i = g;
    i ^= i >> 1;
    i ^= i >> 2;
    return i & 7u;
}

inline std::uint32_t rot_right3(std::uint32_t v, int r) {
    r %= 3;
    if (r == 0) return v & 7u;
    return ((v >> r) | (v << (3 - r))) & 7u;
}

inline std::uint32_t rot_left3(std::uint32_t v, int r) {
    r %= 3;
    if (r == 0) return v & 7u;
    return ((v << r) | (v >> (3 - r))) & 7u;
}

inline int trailing_ones(std::uint32_t i) {
    int n = 0;
    while (i & 1u) {
        ++n;
        i >>= 1;
    }
    return n;
}

// entry point of the w-th subcube along the curve
inline std::uint32_t hilbert_entry(std::uint32_t w) { return w == 0 ? 0u : gray(2u * ((w - 1u) / 2u)); }

// intra subcube direction of the w-th subcube
inline int hilbert_direction(std::uint32_t w) {
    if (w == 0) return 0;
    if (w & 1u) return trailing_ones(w) % 3;
    return trailing_ones(w - 1u) % 3;
}

inline std::uint64_t hilbert3(std::uint32_t x, std::uint32_t y, std::uint32_t z, int bits = kCurveBits) {
    std::uint32_t e = 0;
    int d = 0;
    std::uint64_t h = 0;
    for (int b = bits - 1; b >= 0; --b) {
        const std::uint32_t l = (((z >> b) & 1u) << 2) | (((y >> b) & 1u) << 1) | ((x >> b) & 1u);
        const std::uint32_t t = rot_right3(l ^ e, d + 1);
        const std::uint32_t w = gray_inverse3(t);
        h = (h << 3) | w;
        e = e ^ rot_left3(hilbert_entry(w), d + 1);
        d = (d + hilbert_direction(w) + 1) % 3;
    }
    return h;
}

}  // namespace curves

// Row ordering of one grid along a space-filling curve.
struct SerializationOrder {
    Curve curve = Curve::Z;
    std::vector<std::int32_t> permutation;  // permutation[p] = row at sorted position p

    std::vector<std::int32_t> inverse() const {
        std::vector<std::int32_t> inv(permutation.size());
        for (std::size_t p = 0; p < permutation.size(); ++p) inv[static_cast<std::size_t>(permutation[p])] = static_cast<std::int32_t>(p);
        return inv;
    }
};

// Sorts rows by curve code. Z feeds (x,y,z) into the Morton codec, TZ the
// rotation (y,z,x); H and TH likewise for the Hilbert codec. Coordinates are
// offset per axis by the grid minimum; 16 bits per axis must suffice.
inline SerializationOrder serialize(const VoxelGrid& grid, Curve curve) {
    SerializationOrder order;
    order.curve = curve;
    const std::int32_t n = grid.num_voxels();
    if (n == 0) return order;

    std::int32_t mn[3] = {grid.keys[0].i, grid.keys[0].j, grid.keys[0].k};
    std::int32_t mx[3] = {mn[0], mn[1], mn[2]};
    for (const auto& k : grid.keys) {
        mn[0] = std::min(mn[0], k.i);
        mn[1] = std::min(mn[1], k.j);
        mn[2] = std::min(mn[2], k.k);
        mx[0] = std::max(mx[0], k.i);
        mx[1] = std::max(mx[1], k.j);
        mx[2] = std::max(mx[2], k.k);
    }
    for (int a = 0; a < 3; ++a)
        if (static_cast<std::int64_t>(mx[a]) - mn[a] >= (1 << kCurveBits))
            throw RangeError("serialize: coordinate range exceeds 16 bits per axis");

    std::vector<std::pair<std::uint64_t, std::int32_t>> coded(static_cast<std::size_t>(n));
    for (std::int32_t r = 0; r < n; ++r) {
        const auto& k = grid.keys[static_cast<std::size_t>(r)];
        const std::uint32_t x = static_cast<std::uint32_t>(k.i - mn[0]);
        const std::uint32_t y = static_cast<std::uint32_t>(k.j - mn[1]);
        const std::uint32_t z = static_cast<std::uint32_t>(k.k - mn[2]);
        std::uint64_t code = 0;
        switch (curve) {
            case Curve::Z: code = curves::morton3(x, y, z); break;
            case Curve::TZ: code = curves::morton3(y, z, x); break;
            case Curve::H: code = curves::hilbert3(x, y, z); break;
            case Curve::TH: code = curves::hilbert3(y, z, x); break;
        }
        coded[static_cast<std::size_t>(r)] = {code, r};
    }
    std::sort(coded.begin(), coded.end());
    order.permutation.resize(static_cast<std::size_t>(n));
    for (std::int32_t p = 0; p < n; ++p) order.permutation[static_cast<std::size_t>(p)] = coded[static_cast<std::size_t>(p)].second;
    return order;
}

}  // namespace msm
