#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "msm/autodiff.hpp"
#include "msm/curves.hpp"
#include "msm/errors.hpp"
#include "msm/rng.hpp"
#include "msm/views.hpp"
#include "msm/voxel.hpp"

namespace msm {

// Hybrid UNet over sparse voxel hierarchies: submanifold ResNet blocks at
// every level, strided/transposed sparse convolutions between levels, and
// serialized window attention at the coarsest levels.
struct HUNetConfig {
    std::int32_t levels = 4;
    std::vector<std::int64_t> enc_channels = {16, 32, 64, 96};
    std::vector<std::int64_t> dec_channels = {24, 32, 64, 96};
    std::vector<std::int32_t> resnet_blocks = {2, 2, 2, 2};
    std::vector<std::int32_t> attention_blocks = {0, 0, 2, 2};
    std::int64_t window = 64;
    std::int32_t heads = 4;
    std::int64_t ff_ratio = 4;
    std::int64_t in_channels = 3;
    double voxel_size = 0.1;

    void validate() const {
        const auto l = static_cast<std::size_t>(levels);
        if (levels < 2) throw ConfigError("model.levels must be >= 2");
        if (enc_channels.size() != l || dec_channels.size() != l || resnet_blocks.size() != l || attention_blocks.size() != l)
            throw ConfigError("per-level model lists must have model.levels entries");
        for (std::size_t i = 1; i < l; ++i)
            if (enc_channels[i] <= enc_channels[i - 1]) throw ConfigError("encoder channels must strictly increase with depth");
        for (std::size_t i = 0; i < l; ++i) {
            if (enc_channels[i] < 1 || dec_channels[i] < 1) throw ConfigError("channel widths must be positive");
            if (attention_blocks[i] > 0) {
                if (enc_channels[i] % heads != 0 || dec_channels[i] % heads != 0)
                    throw ConfigError("attention widths must be divisible by the head count");
            }
        }
        if (window < 1) throw ConfigError("attention window must be >= 1");
        if (voxel_size <= 0) throw ConfigError("voxel size must be positive");
    }

    bool operator==(const HUNetConfig&) const = default;
};

// attention blocks cycle the serialization curves in this order
constexpr std::array<Curve, 4> kCurveCycle = {Curve::Z, Curve::TZ, Curve::H, Curve::TH};

// Precomputed per-hierarchy gather/scatter topology shared by every block of
// one forward pass.
struct HUNetTopology {
    struct Level {
        StencilPairs stencil;
        std::array<SerializationOrder, 4> orders;  // filled only where attention runs
        bool has_orders = false;
    };
    struct Transition {
        // per octant: aligned fine and coarse row lists
        std::array<std::vector<std::int32_t>, 8> fine_rows, coarse_rows;
    };
    std::vector<Level> levels;
    std::vector<Transition> transitions;  // [l] connects level l and l+1
};

inline HUNetTopology build_topology(const HUNetConfig& cfg, const GridHierarchy& hier) {
    if (hier.num_levels() != cfg.levels) throw ContractError("hierarchy level count does not match model config");
    HUNetTopology topo;
    topo.levels.resize(static_cast<std::size_t>(cfg.levels));
    for (std::int32_t l = 0; l < cfg.levels; ++l) {
        auto& lvl = topo.levels[static_cast<std::size_t>(l)];
        lvl.stencil = stencil_pairs(hier.levels[static_cast<std::size_t>(l)]);
        if (cfg.attention_blocks[static_cast<std::size_t>(l)] > 0) {
            for (std::size_t c = 0; c < kCurveCycle.size(); ++c)
                lvl.orders[c] = serialize(hier.levels[static_cast<std::size_t>(l)], kCurveCycle[c]);
            lvl.has_orders = true;
        }
    }
    topo.transitions.resize(static_cast<std::size_t>(cfg.levels) - 1);
    for (std::int32_t l = 0; l + 1 < cfg.levels; ++l) {
        auto& tr = topo.transitions[static_cast<std::size_t>(l)];
        const auto& grid = hier.levels[static_cast<std::size_t>(l)];
        const auto& parent = hier.parent_of[static_cast<std::size_t>(l)];
        for (std::int32_t r = 0; r < grid.num_voxels(); ++r) {
            const std::int32_t o = grid.keys[static_cast<std::size_t>(r)].octant();
            tr.fine_rows[static_cast<std::size_t>(o)].push_back(r);
            tr.coarse_rows[static_cast<std::size_t>(o)].push_back(parent[static_cast<std::size_t>(r)]);
        }
    }
    return topo;
}

// out[v] = sum over occupied stencil neighbors u of W[offset] . in[u] + bias.
// Offsets accumulate in fixed id order, so row permutations of the grid
// permute outputs bitwise.
inline NodePtr sparse_conv(NodePtr x, NodePtr weight, NodePtr bias, const StencilPairs& pairs, std::int64_t rows_out) {
    const std::int64_t cin = x->value.cols();
    if (weight->value.rows() != kStencilSize * cin) throw ShapeError("sparse_conv: weight rows must be 27 * cin");
    std::vector<std::vector<std::int32_t>> lists;
    lists.reserve(2 * kStencilSize);
    for (std::int32_t o = 0; o < kStencilSize; ++o) {
        lists.push_back(pairs.src[static_cast<std::size_t>(o)]);
        lists.push_back(pairs.dst[static_cast<std::size_t>(o)]);
    }
    return ops::group_conv(std::move(x), std::move(weight), std::move(bias), std::move(lists), rows_out);
}

// strided sparse conv: each parent aggregates its children through the
// child-octant weight
inline NodePtr downsample(NodePtr x, NodePtr weight, NodePtr bias, const HUNetTopology::Transition& tr,
                          std::int64_t coarse_rows_out) {
    const std::int64_t cin = x->value.cols();
    if (weight->value.rows() != 8 * cin) throw ShapeError("downsample: weight rows must be 8 * cin");
    std::vector<std::vector<std::int32_t>> lists;
    lists.reserve(16);
    for (std::int32_t o = 0; o < 8; ++o) {
        lists.push_back(tr.fine_rows[static_cast<std::size_t>(o)]);
        lists.push_back(tr.coarse_rows[static_cast<std::size_t>(o)]);
    }
    return ops::group_conv(std::move(x), std::move(weight), std::move(bias), std::move(lists), coarse_rows_out);
}

// transposed sparse conv: each child receives its octant's projection of its
// parent's feature
inline NodePtr upsample(NodePtr x, NodePtr weight, NodePtr bias, const HUNetTopology::Transition& tr,
                        std::int64_t fine_rows_out) {
    const std::int64_t cin = x->value.cols();
    if (weight->value.rows() != 8 * cin) throw ShapeError("upsample: weight rows must be 8 * cin");
    std::vector<std::vector<std::int32_t>> lists;
    lists.reserve(16);
    for (std::int32_t o = 0; o < 8; ++o) {
        lists.push_back(tr.coarse_rows[static_cast<std::size_t>(o)]);
        lists.push_back(tr.fine_rows[static_cast<std::size_t>(o)]);
    }
    return ops::group_conv(std::move(x), std::move(weight), std::move(bias), std::move(lists), fine_rows_out);
}

// Sliding-window attention over the serialized order: token t attends to
// serialized positions within +-floor(window/2), clipped at the ends. The
// band is realized as an additive mask, so a window covering the sequence
// equals dense attention exactly.
inline NodePtr windowed_attention(NodePtr x, const SerializationOrder& order, std::int64_t window, std::int32_t heads,
                                  NodePtr wq, NodePtr wk, NodePtr wv, NodePtr wo) {
    const std::int64_t n = x->value.rows();
    const std::int64_t width = x->value.cols();
    if (width % heads != 0) throw ShapeError("windowed_attention: width not divisible by heads");
    const std::int64_t dh = width / heads;
    const std::int64_t half = window / 2;

    NodePtr xs = ops::row_gather(x, order.permutation);
    NodePtr q = ops::matmul(xs, std::move(wq));
    NodePtr k = ops::matmul(xs, std::move(wk));
    NodePtr v = ops::matmul(xs, std::move(wv));

    NodePtr band;  // additive mask, shared across heads
    if (n - 1 > half) {
        Tensor mask({n, n});
        for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t j = 0; j < n; ++j)
                if (std::llabs(i - j) > half) mask.at(i, j) = -1e30;
        band = constant(std::move(mask));
    }

    std::vector<NodePtr> head_outputs;
    head_outputs.reserve(static_cast<std::size_t>(heads));
    for (std::int32_t h = 0; h < heads; ++h) {
        NodePtr qh = ops::slice_cols(q, h * dh, (h + 1) * dh);
        NodePtr kh = ops::slice_cols(k, h * dh, (h + 1) * dh);
        NodePtr vh = ops::slice_cols(v, h * dh, (h + 1) * dh);
        NodePtr scores = ops::scale(ops::matmul(std::move(qh), ops::transpose(std::move(kh))), 1.0 / std::sqrt(static_cast<double>(dh)));
        if (band) scores = ops::add(std::move(scores), band);
        head_outputs.push_back(ops::matmul(ops::softmax_rows(std::move(scores)), std::move(vh)));
    }
    NodePtr merged = heads == 1 ? head_outputs[0] : ops::concat_cols(std::move(head_outputs));
    NodePtr projected = ops::matmul(std::move(merged), std::move(wo));
    return ops::row_gather(std::move(projected), order.inverse());
}

namespace detail {

inline std::string lvl_name(const char* stage, std::int32_t level) { return std::string(stage) + std::to_string(level); }

// [conv -> RMSNorm -> GELU -> conv -> RMSNorm] + skip, GELU after the sum
inline NodePtr resnet_block(ParamNodes& p, const std::string& prefix, NodePtr x, const StencilPairs& pairs,
                            std::int64_t rows) {
    NodePtr y = sparse_conv(x, p(prefix + ".conv1.w"), p(prefix + ".conv1.b"), pairs, rows);
    y = ops::gelu(ops::rmsnorm(std::move(y), p(prefix + ".norm1.g")));
    y = sparse_conv(std::move(y), p(prefix + ".conv2.w"), p(prefix + ".conv2.b"), pairs, rows);
    y = ops::rmsnorm(std::move(y), p(prefix + ".norm2.g"));
    return ops::gelu(ops::add(std::move(x), std::move(y)));
}

// pre-norm MHA + residual, then pre-norm GEGLU feed-forward + residual; the
// block linears carry no bias
inline NodePtr attention_block(ParamNodes& p, const std::string& prefix, NodePtr x, const SerializationOrder& order,
                               std::int64_t window, std::int32_t heads, std::int64_t ff_ratio) {
    NodePtr a = ops::rmsnorm(x, p(prefix + ".norm1.g"));
    a = windowed_attention(std::move(a), order, window, heads, p(prefix + ".wq"), p(prefix + ".wk"), p(prefix + ".wv"),
                           p(prefix + ".wo"));
    x = ops::add(std::move(x), std::move(a));
    NodePtr f = ops::rmsnorm(x, p(prefix + ".norm2.g"));
    f = ops::matmul(std::move(f), p(prefix + ".ff.w1"));
    const std::int64_t hidden = x->value.cols() * ff_ratio;
    NodePtr gate = ops::gelu(ops::slice_cols(f, 0, hidden));
    NodePtr value = ops::slice_cols(std::move(f), hidden, 2 * hidden);
    f = ops::matmul(ops::mul(std::move(gate), std::move(value)), p(prefix + ".ff.w2"));
    return ops::add(std::move(x), std::move(f));
}

inline NodePtr run_level_blocks(ParamNodes& p, const HUNetConfig& cfg, const char* stage, std::int32_t level, NodePtr x,
                                const HUNetTopology::Level& topo, std::int64_t rows) {
    const std::string base = lvl_name(stage, level);
    for (std::int32_t b = 0; b < cfg.resnet_blocks[static_cast<std::size_t>(level)]; ++b)
        x = resnet_block(p, base + ".res" + std::to_string(b), std::move(x), topo.stencil, rows);
    for (std::int32_t b = 0; b < cfg.attention_blocks[static_cast<std::size_t>(level)]; ++b) {
        const auto& order = topo.orders[static_cast<std::size_t>(b) % kCurveCycle.size()];
        x = attention_block(p, base + ".att" + std::to_string(b), std::move(x), order, cfg.window, cfg.heads, cfg.ff_ratio);
    }
    return x;
}

}  // namespace detail

// Encoder over a hierarchy (full or restricted to unmasked rows): stem conv,
// per-level blocks, strided downsampling. Returns features for every level.
inline std::vector<NodePtr> hunet_encode(ParamNodes& p, const HUNetConfig& cfg, const GridHierarchy& hier,
                                         const HUNetTopology& topo, NodePtr input) {
    if (input->value.cols() != cfg.in_channels) throw ShapeError("hunet_encode: input width mismatch");
    std::vector<NodePtr> out;
    out.reserve(static_cast<std::size_t>(cfg.levels));
    NodePtr x = sparse_conv(std::move(input), p("stem.w"), p("stem.b"), topo.levels[0].stencil, hier.levels[0].num_voxels());
    for (std::int32_t l = 0; l < cfg.levels; ++l) {
        x = detail::run_level_blocks(p, cfg, "enc", l, std::move(x), topo.levels[static_cast<std::size_t>(l)],
                                     hier.levels[static_cast<std::size_t>(l)].num_voxels());
        out.push_back(x);
        if (l + 1 < cfg.levels)
            x = downsample(std::move(x), p(detail::lvl_name("down", l) + ".w"), p(detail::lvl_name("down", l) + ".b"),
                           topo.transitions[static_cast<std::size_t>(l)],
                           hier.levels[static_cast<std::size_t>(l) + 1].num_voxels());
    }
    return out;
}

// A hierarchy restricted to unmasked rows, with row maps back into the full
// hierarchy. Mask consistency guarantees the restriction is closed under
// parent/child.
struct SubHierarchy {
    GridHierarchy hier;
    std::vector<std::vector<std::int32_t>> to_full;  // per level: sub row -> full row
};

inline SubHierarchy restrict_to_unmasked(const GridHierarchy& full, const MaskSpec& mask) {
    SubHierarchy sub;
    sub.to_full.resize(static_cast<std::size_t>(full.num_levels()));
    std::vector<std::vector<std::int32_t>> full_to_sub(static_cast<std::size_t>(full.num_levels()));
    for (std::int32_t l = 0; l < full.num_levels(); ++l) {
        const auto& keep = mask.unmasked[static_cast<std::size_t>(l)];
        const auto& grid = full.levels[static_cast<std::size_t>(l)];
        VoxelGrid g;
        g.level = grid.level;
        g.voxel_size = grid.voxel_size;
        g.features = Tensor({static_cast<std::int64_t>(keep.size()), grid.features.cols()});
        full_to_sub[static_cast<std::size_t>(l)].assign(static_cast<std::size_t>(grid.num_voxels()), -1);
        for (std::int32_t nr = 0; nr < static_cast<std::int32_t>(keep.size()); ++nr) {
            const std::int32_t r = keep[static_cast<std::size_t>(nr)];
            g.keys.push_back(grid.keys[static_cast<std::size_t>(r)]);
            g.key_index.emplace(g.keys.back(), nr);
            for (std::int64_t f = 0; f < grid.features.cols(); ++f) g.features.at(nr, f) = grid.features.at(r, f);
            g.labels.push_back(grid.labels[static_cast<std::size_t>(r)]);
            g.source_points.push_back(grid.source_points[static_cast<std::size_t>(r)]);
            full_to_sub[static_cast<std::size_t>(l)][static_cast<std::size_t>(r)] = nr;
        }
        sub.to_full[static_cast<std::size_t>(l)] = keep;
        sub.hier.levels.push_back(std::move(g));
    }
    for (std::int32_t l = 0; l + 1 < full.num_levels(); ++l) {
        const auto& keep = mask.unmasked[static_cast<std::size_t>(l)];
        std::vector<std::int32_t> parent_rows(keep.size());
        std::vector<std::vector<std::int32_t>> children(sub.hier.levels[static_cast<std::size_t>(l) + 1].keys.size());
        for (std::size_t nr = 0; nr < keep.size(); ++nr) {
            const std::int32_t full_parent =
                full.parent_of[static_cast<std::size_t>(l)][static_cast<std::size_t>(keep[nr])];
            const std::int32_t sub_parent = full_to_sub[static_cast<std::size_t>(l) + 1][static_cast<std::size_t>(full_parent)];
            if (sub_parent < 0) throw ContractError("mask is not consistent between levels");
            parent_rows[nr] = sub_parent;
            children[static_cast<std::size_t>(sub_parent)].push_back(static_cast<std::int32_t>(nr));
        }
        sub.hier.parent_of.push_back(std::move(parent_rows));
        sub.hier.child_of.push_back(std::move(children));
    }
    return sub;
}

struct EncodeOutput {
    SubHierarchy sub;                 // topology the encoder actually ran on
    std::vector<NodePtr> features;    // per level, over sub rows
};

// Bottom-up masked encoding: masked voxels are removed from every encoder
// computation, so encoder outputs cannot depend on them at all.
inline EncodeOutput encode_masked(ParamNodes& p, const HUNetConfig& cfg, const GridHierarchy& full, const MaskSpec& mask) {
    if (mask.unmasked[static_cast<std::size_t>(full.num_levels() - 1)].empty())
        throw DegenerateInputError("encode: every voxel is masked, nothing to encode");
    EncodeOutput out;
    out.sub = restrict_to_unmasked(full, mask);
    HUNetTopology topo = build_topology(cfg, out.sub.hier);
    NodePtr input = constant(out.sub.hier.levels[0].features);
    out.features = hunet_encode(p, cfg, out.sub.hier, topo, std::move(input));
    return out;
}

// Decoder over the full hierarchy: at each level the encoder features of
// unmasked rows are combined with the level's learnable token on masked rows,
// processed coarsest-first with upsampling and concat-projection skips.
inline std::vector<NodePtr> hunet_decode(ParamNodes& p, const HUNetConfig& cfg, const GridHierarchy& full,
                                         const HUNetTopology& topo, const MaskSpec& mask,
                                         const std::vector<NodePtr>& enc_features,
                                         const std::vector<std::vector<std::int32_t>>& enc_to_full) {
    const std::int32_t levels = cfg.levels;
    std::vector<NodePtr> combined(static_cast<std::size_t>(levels));
    for (std::int32_t l = 0; l < levels; ++l) {
        const auto& masked_rows = mask.masked[static_cast<std::size_t>(l)];
        const std::int64_t rows = full.levels[static_cast<std::size_t>(l)].num_voxels();
        if (masked_rows.empty()) {
            combined[static_cast<std::size_t>(l)] =
                ops::row_scatter_add(enc_features[static_cast<std::size_t>(l)], enc_to_full[static_cast<std::size_t>(l)], rows);
        } else {
            std::vector<std::int32_t> zeros(masked_rows.size(), 0);
            NodePtr token_rows = ops::row_gather(p(detail::lvl_name("token", l)), std::move(zeros));
            combined[static_cast<std::size_t>(l)] = ops::multi_scatter_add(
                {enc_features[static_cast<std::size_t>(l)], std::move(token_rows)},
                {enc_to_full[static_cast<std::size_t>(l)], masked_rows}, rows);
        }
    }

    std::vector<NodePtr> out(static_cast<std::size_t>(levels));
    const std::int32_t top = levels - 1;
    NodePtr x = ops::bias_add(ops::matmul(combined[static_cast<std::size_t>(top)], p("bott.w")), p("bott.b"));
    x = detail::run_level_blocks(p, cfg, "dec", top, std::move(x), topo.levels[static_cast<std::size_t>(top)],
                                 full.levels[static_cast<std::size_t>(top)].num_voxels());
    out[static_cast<std::size_t>(top)] = x;
    for (std::int32_t l = top - 1; l >= 0; --l) {
        const std::int64_t rows = full.levels[static_cast<std::size_t>(l)].num_voxels();
        x = upsample(std::move(x), p(detail::lvl_name("up", l) + ".w"), p(detail::lvl_name("up", l) + ".b"),
                     topo.transitions[static_cast<std::size_t>(l)], rows);
        NodePtr joined = ops::concat_cols({std::move(x), combined[static_cast<std::size_t>(l)]});
        x = ops::bias_add(ops::matmul(std::move(joined), p(detail::lvl_name("skip", l) + ".w")),
                          p(detail::lvl_name("skip", l) + ".b"));
        x = detail::run_level_blocks(p, cfg, "dec", l, std::move(x), topo.levels[static_cast<std::size_t>(l)], rows);
        out[static_cast<std::size_t>(l)] = x;
    }
    return out;
}

// encode + decode with an empty mask: the teacher/inference path
inline std::vector<NodePtr> hunet_forward_full(ParamNodes& p, const HUNetConfig& cfg, const GridHierarchy& hier,
                                               const HUNetTopology& topo) {
    std::vector<std::int64_t> sizes;
    for (const auto& level : hier.levels) sizes.push_back(level.num_voxels());
    MaskSpec empty = MaskSpec::empty_for(sizes);
    NodePtr input = constant(hier.levels[0].features);
    std::vector<NodePtr> enc = hunet_encode(p, cfg, hier, topo, std::move(input));
    return hunet_decode(p, cfg, hier, topo, empty, enc, empty.unmasked);
}

// Top-down masking variant used by the ablation: masked voxels stay in the
// encoder; their input rows are zeroed before the stem and their post-stem
// features replaced by the level-0 token.
inline std::vector<NodePtr> hunet_forward_topdown(ParamNodes& p, const HUNetConfig& cfg, const GridHierarchy& full,
                                                  const HUNetTopology& topo, const MaskSpec& mask) {
    Tensor input = full.levels[0].features;
    for (std::int32_t r : mask.masked[0])
        for (std::int64_t f = 0; f < input.cols(); ++f) input.at(r, f) = 0.0;
    NodePtr x = sparse_conv(constant(std::move(input)), p("stem.w"), p("stem.b"), topo.levels[0].stencil,
                            full.levels[0].num_voxels());
    if (!mask.masked[0].empty()) {
        std::vector<std::int32_t> zeros(mask.masked[0].size(), 0);
        NodePtr token_rows = ops::row_gather(p("token0"), std::move(zeros));
        x = ops::multi_scatter_add({ops::row_gather(x, mask.unmasked[0]), std::move(token_rows)},
                                   {mask.unmasked[0], mask.masked[0]}, full.levels[0].num_voxels());
    }
    std::vector<NodePtr> enc;
    enc.reserve(static_cast<std::size_t>(cfg.levels));
    for (std::int32_t l = 0; l < cfg.levels; ++l) {
        x = detail::run_level_blocks(p, cfg, "enc", l, std::move(x), topo.levels[static_cast<std::size_t>(l)],
                                     full.levels[static_cast<std::size_t>(l)].num_voxels());
        enc.push_back(x);
        if (l + 1 < cfg.levels)
            x = downsample(std::move(x), p(detail::lvl_name("down", l) + ".w"), p(detail::lvl_name("down", l) + ".b"),
                           topo.transitions[static_cast<std::size_t>(l)],
                           full.levels[static_cast<std::size_t>(l) + 1].num_voxels());
    }
    std::vector<std::int64_t> sizes;
    for (const auto& level : full.levels) sizes.push_back(level.num_voxels());
    MaskSpec empty = MaskSpec::empty_for(sizes);
    return hunet_decode(p, cfg, full, topo, empty, enc, empty.unmasked);
}

// He-uniform for convolutions and projections, unit RMSNorm gains, zero
// biases, N(0, 0.02) mask tokens.
inline void init_hunet_params(ParamSet& ps, const HUNetConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(split_seed(seed, 0x1417ull));
    auto he = [&](std::int64_t fan_in, std::int64_t fan_out, std::vector<std::int64_t> shape) {
        Tensor t(std::move(shape));
        const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
        for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-limit, limit);
        (void)fan_out;
        return t;
    };
    auto add_conv = [&](const std::string& name, std::int64_t cin, std::int64_t cout) {
        ps.add(name + ".w", he(kStencilSize * cin, cout, {kStencilSize * cin, cout}));
        ps.add(name + ".b", Tensor({cout}));
    };
    auto add_linear = [&](const std::string& name, std::int64_t cin, std::int64_t cout, bool bias) {
        ps.add(name + ".w", he(cin, cout, {cin, cout}));
        if (bias) ps.add(name + ".b", Tensor({cout}));
    };
    auto add_norm = [&](const std::string& name, std::int64_t c) { ps.add(name + ".g", Tensor::full({c}, 1.0)); };
    auto add_blocks = [&](const char* stage, std::int32_t level, std::int64_t width) {
        const std::string base = detail::lvl_name(stage, level);
        for (std::int32_t b = 0; b < cfg.resnet_blocks[static_cast<std::size_t>(level)]; ++b) {
            const std::string pre = base + ".res" + std::to_string(b);
            add_conv(pre + ".conv1", width, width);
            add_norm(pre + ".norm1", width);
            add_conv(pre + ".conv2", width, width);
            add_norm(pre + ".norm2", width);
        }
        for (std::int32_t b = 0; b < cfg.attention_blocks[static_cast<std::size_t>(level)]; ++b) {
            const std::string pre = base + ".att" + std::to_string(b);
            add_norm(pre + ".norm1", width);
            for (const char* w : {".wq", ".wk", ".wv", ".wo"}) ps.add(pre + w, he(width, width, {width, width}));
            add_norm(pre + ".norm2", width);
            ps.add(pre + ".ff.w1", he(width, 2 * cfg.ff_ratio * width, {width, 2 * cfg.ff_ratio * width}));
            ps.add(pre + ".ff.w2", he(cfg.ff_ratio * width, width, {cfg.ff_ratio * width, width}));
        }
    };

    add_conv("stem", cfg.in_channels, cfg.enc_channels[0]);
    for (std::int32_t l = 0; l < cfg.levels; ++l) {
        add_blocks("enc", l, cfg.enc_channels[static_cast<std::size_t>(l)]);
        if (l + 1 < cfg.levels) {
            ps.add(detail::lvl_name("down", l) + ".w",
                   he(8 * cfg.enc_channels[static_cast<std::size_t>(l)], cfg.enc_channels[static_cast<std::size_t>(l) + 1],
                      {8 * cfg.enc_channels[static_cast<std::size_t>(l)], cfg.enc_channels[static_cast<std::size_t>(l) + 1]}));
            ps.add(detail::lvl_name("down", l) + ".b", Tensor({cfg.enc_channels[static_cast<std::size_t>(l) + 1]}));
        }
    }
    const std::int32_t top = cfg.levels - 1;
    add_linear("bott", cfg.enc_channels[static_cast<std::size_t>(top)], cfg.dec_channels[static_cast<std::size_t>(top)], true);
    for (std::int32_t l = top; l >= 0; --l) {
        add_blocks("dec", l, cfg.dec_channels[static_cast<std::size_t>(l)]);
        if (l < top) {
            ps.add(detail::lvl_name("up", l) + ".w",
                   he(8 * cfg.dec_channels[static_cast<std::size_t>(l) + 1], cfg.dec_channels[static_cast<std::size_t>(l)],
                      {8 * cfg.dec_channels[static_cast<std::size_t>(l) + 1], cfg.dec_channels[static_cast<std::size_t>(l)]}));
            ps.add(detail::lvl_name("up", l) + ".b", Tensor({cfg.dec_channels[static_cast<std::size_t>(l)]}));
            add_linear(detail::lvl_name("skip", l),
                       cfg.dec_channels[static_cast<std::size_t>(l)] + cfg.enc_channels[static_cast<std::size_t>(l)],
                       cfg.dec_channels[static_cast<std::size_t>(l)], true);
        }
    }
    for (std::int32_t l = 0; l < cfg.levels; ++l) {
        Tensor token({1, cfg.enc_channels[static_cast<std::size_t>(l)]});
        for (std::int64_t i = 0; i < token.numel(); ++i) token[i] = rng.normal(0.0, 0.02);
        ps.add(detail::lvl_name("token", l), std::move(token));
    }
}

}  // namespace msm
