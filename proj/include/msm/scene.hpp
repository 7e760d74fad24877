#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "msm/errors.hpp"
#include "msm/point_cloud.hpp"
#include "msm/rng.hpp"

namespace msm {

// Semantic classes of the synthetic indoor scenes.
enum SceneClass : std::int32_t {
    kClassFloor = 0,
    kClassWall = 1,
    kClassFurniture = 2,  // boxes
    kClassColumn = 3,     // cylinders
    kClassClutter = 4,    // spheres
    kClassTable = 5,      // thin slabs
    kClassDoor = 6,       // tall thin boxes on walls
};
constexpr std::int32_t kNumClasses = 7;

struct SceneSpec {
    std::uint64_t seed = 0;
    double extent_x = 1.6, extent_y = 1.6, extent_z = 1.4;  // room size, meters
    std::int32_t furniture_min = 2, furniture_max = 4;
    std::int32_t column_min = 1, column_max = 2;
    std::int32_t clutter_min = 2, clutter_max = 4;
    std::int32_t table_min = 1, table_max = 2;
    std::int32_t door_min = 1, door_max = 2;
    double density = 140.0;      // points per square meter of surface
    double noise_sigma = 0.004;  // positional noise, meters
    double color_jitter = 0.08;

    void validate() const {
        if (extent_x <= 0 || extent_y <= 0 || extent_z <= 0) throw SpecError("scene extents must be positive");
        if (density <= 0) throw SpecError("density must be positive");
        if (noise_sigma < 0 || color_jitter < 0) throw SpecError("negative sigma");
    }
};

namespace detail {

// Base colors deliberately overlap between several classes (column vs wall,
// table/door vs furniture) so color alone cannot separate them.
inline std::array<double, 3> class_base_color(std::int32_t cls) {
    switch (cls) {
        case kClassFloor: return {0.45, 0.42, 0.38};
        case kClassWall: return {0.72, 0.71, 0.68};
        case kClassFurniture: return {0.42, 0.30, 0.20};
        case kClassColumn: return {0.70, 0.69, 0.66};
        case kClassTable: return {0.44, 0.31, 0.21};
        case kClassDoor: return {0.43, 0.32, 0.22};
        default: return {0.5, 0.5, 0.5};
    }
}

struct SceneBuilder {
    const SceneSpec& spec;
    Rng& rng;
    std::vector<std::array<double, 3>> positions;
    std::vector<std::array<double, 3>> colors;
    std::vector<std::int32_t> labels;
    std::vector<std::int32_t> instances;
    std::int32_t next_instance = 0;

    std::int64_t count_for_area(double area) const {
        auto n = static_cast<std::int64_t>(std::llround(area * spec.density));
        return n < 3 ? 3 : n;
    }

    void emit(const std::array<double, 3>& p, const std::array<double, 3>& base, std::int32_t cls, std::int32_t inst) {
        std::array<double, 3> q;
        for (int a = 0; a < 3; ++a) q[a] = p[a] + rng.normal(0.0, spec.noise_sigma);
        std::array<double, 3> c;
        for (int a = 0; a < 3; ++a) c[a] = std::clamp(base[a] + rng.normal(0.0, spec.color_jitter), 0.0, 1.0);
        positions.push_back(q);
        colors.push_back(c);
        labels.push_back(cls);
        instances.push_back(inst);
    }

    // axis-aligned rectangle: origin + s*u + t*v, s,t in [0,1]
    void rect(const std::array<double, 3>& origin, const std::array<double, 3>& u, const std::array<double, 3>& v,
              const std::array<double, 3>& base, std::int32_t cls, std::int32_t inst) {
        const double lu = std::sqrt(u[0] * u[0] + u[1] * u[1] + u[2] * u[2]);
        const double lv = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
        const std::int64_t n = count_for_area(lu * lv);
        for (std::int64_t i = 0; i < n; ++i) {
            const double s = rng.uniform(), t = rng.uniform();
            emit({origin[0] + s * u[0] + t * v[0], origin[1] + s * u[1] + t * v[1], origin[2] + s * u[2] + t * v[2]}, base,
                 cls, inst);
        }
    }

    // box surface given min/max corners; faces selected by mask bit (0:-x 1:+x 2:-y 3:+y 4:-z 5:+z)
    void box(const std::array<double, 3>& lo, const std::array<double, 3>& hi, unsigned face_mask,
             const std::array<double, 3>& base, std::int32_t cls, std::int32_t inst) {
        const double dx = hi[0] - lo[0], dy = hi[1] - lo[1], dz = hi[2] - lo[2];
        if (face_mask & 1u) rect({lo[0], lo[1], lo[2]}, {0, dy, 0}, {0, 0, dz}, base, cls, inst);
        if (face_mask & 2u) rect({hi[0], lo[1], lo[2]}, {0, dy, 0}, {0, 0, dz}, base, cls, inst);
        if (face_mask & 4u) rect({lo[0], lo[1], lo[2]}, {dx, 0, 0}, {0, 0, dz}, base, cls, inst);
        if (face_mask & 8u) rect({lo[0], hi[1], lo[2]}, {dx, 0, 0}, {0, 0, dz}, base, cls, inst);
        if (face_mask & 16u) rect({lo[0], lo[1], lo[2]}, {dx, 0, 0}, {0, dy, 0}, base, cls, inst);
        if (face_mask & 32u) rect({lo[0], lo[1], hi[2]}, {dx, 0, 0}, {0, dy, 0}, base, cls, inst);
    }

    void cylinder(double cx, double cy, double r, double z0, double z1, const std::array<double, 3>& base, std::int32_t cls,
                  std::int32_t inst) {
        const double area = 2.0 * M_PI * r * (z1 - z0);
        const std::int64_t n = count_for_area(area);
        for (std::int64_t i = 0; i < n; ++i) {
            const double th = rng.uniform(0.0, 2.0 * M_PI);
            const double z = rng.uniform(z0, z1);
            emit({cx + r * std::cos(th), cy + r * std::sin(th), z}, base, cls, inst);
        }
    }

    void sphere(double cx, double cy, double cz, double r, const std::array<double, 3>& base, std::int32_t cls,
                std::int32_t inst) {
        const std::int64_t n = count_for_area(4.0 * M_PI * r * r);
        for (std::int64_t i = 0; i < n; ++i) {
            // uniform direction via normalized gaussian triple
            double v[3] = {rng.normal(), rng.normal(), rng.normal()};
            double len = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
            if (len < 1e-12) {
                v[0] = 1;
                len = 1;
            }
            emit({cx + r * v[0] / len, cy + r * v[1] / len, cz + r * v[2] / len}, base, cls, inst);
        }
    }

    std::array<double, 3> instance_color(std::int32_t cls) {
        auto base = class_base_color(cls);
        for (int a = 0; a < 3; ++a) base[a] = std::clamp(base[a] + rng.uniform(-0.05, 0.05), 0.0, 1.0);
        return base;
    }
};

}  // namespace detail

// Deterministic synthetic labeled scene: floor + 4 walls + sampled primitive
// objects, surface-sampled with Gaussian noise and per-instance colors.
inline PointCloud generate_scene(const SceneSpec& spec) {
    spec.validate();
    Rng rng(split_seed(spec.seed, 0x5ce9eull));
    detail::SceneBuilder b{spec, rng, {}, {}, {}, {}, 0};

    const double ex = spec.extent_x, ey = spec.extent_y, ez = spec.extent_z;

    // floor
    b.rect({0, 0, 0}, {ex, 0, 0}, {0, ey, 0}, b.instance_color(kClassFloor), kClassFloor, b.next_instance++);
    // walls
    b.rect({0, 0, 0}, {0, ey, 0}, {0, 0, ez}, b.instance_color(kClassWall), kClassWall, b.next_instance++);
    b.rect({ex, 0, 0}, {0, ey, 0}, {0, 0, ez}, b.instance_color(kClassWall), kClassWall, b.next_instance++);
    b.rect({0, 0, 0}, {ex, 0, 0}, {0, 0, ez}, b.instance_color(kClassWall), kClassWall, b.next_instance++);
    b.rect({0, ey, 0}, {ex, 0, 0}, {0, 0, ez}, b.instance_color(kClassWall), kClassWall, b.next_instance++);

    auto draw_count = [&](std::int32_t lo, std::int32_t hi) {
        if (hi < lo) hi = lo;
        return lo + static_cast<std::int32_t>(rng.below(static_cast<std::uint64_t>(hi - lo + 1)));
    };

    const std::int32_t n_furniture = draw_count(spec.furniture_min, spec.furniture_max);
    for (std::int32_t i = 0; i < n_furniture; ++i) {
        const double hx = rng.uniform(0.15, 0.35), hy = rng.uniform(0.15, 0.35), h = rng.uniform(0.3, 0.7);
        const double cx = rng.uniform(hx, ex - hx), cy = rng.uniform(hy, ey - hy);
        b.box({cx - hx, cy - hy, 0}, {cx + hx, cy + hy, h}, 0b101111u, b.instance_color(kClassFurniture), kClassFurniture,
              b.next_instance++);
    }
    const std::int32_t n_column = draw_count(spec.column_min, spec.column_max);
    for (std::int32_t i = 0; i < n_column; ++i) {
        const double r = rng.uniform(0.08, 0.15);
        const double cx = rng.uniform(r, ex - r), cy = rng.uniform(r, ey - r);
        b.cylinder(cx, cy, r, 0.0, ez, b.instance_color(kClassColumn), kClassColumn, b.next_instance++);
    }
    const std::int32_t n_clutter = draw_count(spec.clutter_min, spec.clutter_max);
    for (std::int32_t i = 0; i < n_clutter; ++i) {
        const double r = rng.uniform(0.06, 0.15);
        const double cx = rng.uniform(r, ex - r), cy = rng.uniform(r, ey - r);
        // clutter color is per-instance random, so color is useless for it
        std::array<double, 3> col{rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9)};
        b.sphere(cx, cy, r, r, col, kClassClutter, b.next_instance++);
    }
    const std::int32_t n_table = draw_count(spec.table_min, spec.table_max);
    for (std::int32_t i = 0; i < n_table; ++i) {
        const double hx = rng.uniform(0.25, 0.45), hy = rng.uniform(0.2, 0.35), top = rng.uniform(0.4, 0.7);
        const double cx = rng.uniform(hx, ex - hx), cy = rng.uniform(hy, ey - hy);
        b.box({cx - hx, cy - hy, top - 0.03}, {cx + hx, cy + hy, top}, 0b111111u, b.instance_color(kClassTable), kClassTable,
              b.next_instance++);
    }
    const std::int32_t n_door = draw_count(spec.door_min, spec.door_max);
    for (std::int32_t i = 0; i < n_door; ++i) {
        const double w = 0.4, h = 0.9 * ez, t = 0.04;
        const int wall = static_cast<int>(rng.below(4));
        const double along = rng.uniform(w, (wall < 2 ? ey : ex) - w);
        std::array<double, 3> lo, hi;
        if (wall == 0) lo = {0, along - w / 2, 0}, hi = {t, along + w / 2, h};
        else if (wall == 1) lo = {ex - t, along - w / 2, 0}, hi = {ex, along + w / 2, h};
        else if (wall == 2) lo = {along - w / 2, 0, 0}, hi = {along + w / 2, t, h};
        else lo = {along - w / 2, ey - t, 0}, hi = {along + w / 2, ey, h};
        b.box(lo, hi, 0b111111u, b.instance_color(kClassDoor), kClassDoor, b.next_instance++);
    }

    const std::int64_t n = static_cast<std::int64_t>(b.positions.size());
    PointCloud cloud;
    cloud.positions = Tensor({n, 3});
    cloud.colors = Tensor({n, 3});
    cloud.labels = std::move(b.labels);
    cloud.instance_ids = std::move(b.instances);
    for (std::int64_t i = 0; i < n; ++i)
        for (int a = 0; a < 3; ++a) {
            cloud.positions.at(i, a) = b.positions[static_cast<std::size_t>(i)][static_cast<std::size_t>(a)];
            cloud.colors.at(i, a) = b.colors[static_cast<std::size_t>(i)][static_cast<std::size_t>(a)];
        }
    cloud.scene_id = "scene_" + std::to_string(spec.seed);
    return cloud;
}

}  // namespace msm
