#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "msm/autodiff.hpp"
#include "msm/checkpoint.hpp"
#include "msm/errors.hpp"
#include "msm/hunet.hpp"
#include "msm/point_cloud.hpp"
#include "msm/scene.hpp"
#include "msm/rng.hpp"
#include "msm/train.hpp"
#include "msm/voxel.hpp"

namespace msm {

// Per-point concatenation of trilinearly sampled decoder levels.
struct HierFeatures {
    Tensor features;                          // [N x sum of selected widths]
    std::vector<std::int32_t> levels;         // selected levels, finest first
    std::vector<std::int64_t> level_offsets;  // column offset of each selected level
};

// forward_full on the voxelized scene, then per selected decoder level a
// trilinear sample at every point, concatenated finest to coarsest.
inline HierFeatures extract_hier_features(const Checkpoint& ckpt, const PointCloud& scene,
                                          std::vector<std::int32_t> levels, bool use_student = false) {
    if (levels.empty()) throw ContractError("extract_hier_features: no levels selected");
    std::sort(levels.begin(), levels.end());
    const HUNetConfig& cfg = ckpt.config;
    for (std::int32_t l : levels)
        if (l < 0 || l >= cfg.levels) throw ContractError("extract_hier_features: level out of range");
    const std::string section = use_student ? "student" : "teacher";
    auto it = ckpt.sections.find(section);
    if (it == ckpt.sections.end()) throw CheckpointError("checkpoint lacks section " + section);
    ParamSet params = it->second;

    GridHierarchy hier = build_hierarchy(voxelize(scene, cfg.voxel_size), cfg.levels);
    HUNetTopology topo = build_topology(cfg, hier);
    ParamNodes p(params, false);
    std::vector<NodePtr> dec = hunet_forward_full(p, cfg, hier, topo);

    HierFeatures out;
    out.levels = levels;
    std::int64_t width = 0;
    for (std::int32_t l : levels) {
        out.level_offsets.push_back(width);
        width += dec[static_cast<std::size_t>(l)]->value.cols();
    }
    out.features = Tensor({scene.size(), width});
    std::int64_t off = 0;
    for (std::int32_t l : levels) {
        Tensor sampled = trilinear_sample(hier.levels[static_cast<std::size_t>(l)], dec[static_cast<std::size_t>(l)]->value,
                                          scene.positions);
        for (std::int64_t i = 0; i < scene.size(); ++i)
            for (std::int64_t j = 0; j < sampled.cols(); ++j) out.features.at(i, off + j) = sampled.at(i, j);
        off += sampled.cols();
    }
    return out;
}

// Mean intersection-over-union; gt labels of `ignore` are skipped and classes
// absent from both prediction and ground truth are excluded from the mean.
struct MiouResult {
    std::vector<double> per_class;  // IoU for classes present somewhere, else 0
    std::vector<bool> present;
    double mean = 0.0;
};

inline MiouResult miou(const std::vector<std::int32_t>& pred, const std::vector<std::int32_t>& gt, std::int32_t num_classes,
                       std::int32_t ignore = -1) {
    if (pred.size() != gt.size()) throw ContractError("miou: size mismatch");
    std::vector<std::int64_t> tp(static_cast<std::size_t>(num_classes), 0), fp(static_cast<std::size_t>(num_classes), 0),
        fn(static_cast<std::size_t>(num_classes), 0);
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (gt[i] == ignore) continue;
        if (gt[i] < 0 || gt[i] >= num_classes || pred[i] < 0 || pred[i] >= num_classes)
            throw ContractError("miou: label out of range");
        if (pred[i] == gt[i]) tp[static_cast<std::size_t>(gt[i])]++;
        else {
            fp[static_cast<std::size_t>(pred[i])]++;
            fn[static_cast<std::size_t>(gt[i])]++;
        }
    }
    MiouResult r;
    r.per_class.assign(static_cast<std::size_t>(num_classes), 0.0);
    r.present.assign(static_cast<std::size_t>(num_classes), false);
    double sum = 0.0;
    std::int32_t counted = 0;
    for (std::int32_t c = 0; c < num_classes; ++c) {
        const std::int64_t denom = tp[static_cast<std::size_t>(c)] + fp[static_cast<std::size_t>(c)] + fn[static_cast<std::size_t>(c)];
        if (denom == 0) continue;
        r.present[static_cast<std::size_t>(c)] = true;
        r.per_class[static_cast<std::size_t>(c)] = static_cast<double>(tp[static_cast<std::size_t>(c)]) / static_cast<double>(denom);
        sum += r.per_class[static_cast<std::size_t>(c)];
        ++counted;
    }
    r.mean = counted == 0 ? 0.0 : sum / counted;
    return r;
}

struct ProbeConfig {
    std::int64_t epochs = 40;
    std::int64_t warmup_epochs = 2;
    double lr = 0.01;
    double weight_decay = 0.01;
    double beta1 = 0.9, beta2 = 0.95;
    std::int64_t batch_rows = 4096;
    std::uint64_t seed = 0;
};

struct LinearProbeResult {
    Tensor weight;  // [D x K]
    Tensor bias;    // [K]
    double best_miou = 0.0;
    std::vector<double> per_epoch_miou;
};

namespace detail {

inline std::vector<std::int32_t> argmax_rows(const Tensor& logits) {
    std::vector<std::int32_t> out(static_cast<std::size_t>(logits.rows()));
    for (std::int64_t i = 0; i < logits.rows(); ++i) {
        std::int32_t best = 0;
        for (std::int64_t j = 1; j < logits.cols(); ++j)
            if (logits.at(i, j) > logits.at(i, best)) best = static_cast<std::int32_t>(j);
        out[static_cast<std::size_t>(i)] = best;
    }
    return out;
}

inline Tensor affine_forward(const Tensor& x, const Tensor& w, const Tensor& b) {
    Tensor out({x.rows(), w.cols()});
    for (std::int64_t i = 0; i < x.rows(); ++i)
        for (std::int64_t k = 0; k < x.cols(); ++k) {
            const double a = x.at(i, k);
            for (std::int64_t j = 0; j < w.cols(); ++j) out.at(i, j) += a * w.at(k, j);
        }
    for (std::int64_t i = 0; i < out.rows(); ++i)
        for (std::int64_t j = 0; j < out.cols(); ++j) out.at(i, j) += b[j];
    return out;
}

}  // namespace detail

// Single affine layer + softmax cross-entropy on frozen features, AdamW with
// cosine schedule; returns the best-epoch validation mIoU.
inline LinearProbeResult linear_probe(const Tensor& train_features, const std::vector<std::int32_t>& train_labels,
                                      const Tensor& val_features, const std::vector<std::int32_t>& val_labels,
                                      std::int32_t num_classes, const ProbeConfig& cfg = {}) {
    if (train_features.rows() != static_cast<std::int64_t>(train_labels.size()))
        throw ContractError("linear_probe: train size mismatch");
    if (val_features.rows() != static_cast<std::int64_t>(val_labels.size()))
        throw ContractError("linear_probe: val size mismatch");
    if (train_features.cols() != val_features.cols()) throw ContractError("linear_probe: feature width mismatch");
    const std::int64_t width = train_features.cols();

    std::vector<std::int64_t> usable;
    for (std::size_t i = 0; i < train_labels.size(); ++i)
        if (train_labels[i] >= 0) usable.push_back(static_cast<std::int64_t>(i));
    if (usable.empty()) throw ContractError("linear_probe: no labeled training rows");

    // zero init: the objective is convex, so this is the canonical start
    ParamSet ps;
    ps.add("w", Tensor({width, num_classes}));
    ps.add("b", Tensor({num_classes}));
    ParamSet m1, m2;
    for (const auto& [name, value] : ps.values) {
        m1.add(name, Tensor(value.shape()));
        m2.add(name, Tensor(value.shape()));
    }

    const std::int64_t steps_per_epoch =
        (static_cast<std::int64_t>(usable.size()) + cfg.batch_rows - 1) / cfg.batch_rows;
    const std::int64_t total_steps = cfg.epochs * steps_per_epoch;
    const std::int64_t warmup_steps = cfg.warmup_epochs * steps_per_epoch;

    LinearProbeResult result;
    Tensor best_w = ps.value("w"), best_b = ps.value("b");
    std::int64_t step = 0;
    for (std::int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng shuffle_rng(split_seed(cfg.seed, 0x5481ull, static_cast<std::uint64_t>(epoch)));
        std::vector<std::int64_t> order = usable;
        shuffle_rng.shuffle(order);
        for (std::int64_t b = 0; b < steps_per_epoch; ++b) {
            const std::int64_t lo = b * cfg.batch_rows;
            const std::int64_t hi = std::min<std::int64_t>(lo + cfg.batch_rows, static_cast<std::int64_t>(order.size()));
            const std::int64_t rows = hi - lo;
            Tensor xb({rows, width});
            Tensor onehot({rows, num_classes});
            for (std::int64_t i = 0; i < rows; ++i) {
                const std::int64_t src = order[static_cast<std::size_t>(lo + i)];
                for (std::int64_t j = 0; j < width; ++j) xb.at(i, j) = train_features.at(src, j);
                onehot.at(i, train_labels[static_cast<std::size_t>(src)]) = 1.0;
            }
            ps.zero_grads();
            ParamNodes p(ps, true);
            NodePtr logits = ops::bias_add(ops::matmul(constant(std::move(xb)), p("w")), p("b"));
            NodePtr ce = ops::scale(ops::sum_all(ops::mul(constant(std::move(onehot)), ops::log_softmax_rows(std::move(logits)))),
                                    -1.0 / static_cast<double>(rows));
            backward(ce, ps);
            const double lr = lr_schedule(step, warmup_steps, total_steps, cfg.lr);
            adamw_step(ps, ps, m1, m2, lr, cfg.beta1, cfg.beta2, cfg.weight_decay, step + 1);
            ++step;
        }
        Tensor val_logits = detail::affine_forward(val_features, ps.value("w"), ps.value("b"));
        const double epoch_miou = miou(detail::argmax_rows(val_logits), val_labels, num_classes).mean;
        result.per_epoch_miou.push_back(epoch_miou);
        if (epoch_miou > result.best_miou) {
            result.best_miou = epoch_miou;
            best_w = ps.value("w");
            best_b = ps.value("b");
        }
    }
    result.weight = std::move(best_w);
    result.bias = std::move(best_b);
    return result;
}

// Superpoints for synthetic scenes: one id per (coarse voxel cell, instance)
// pair, compacted in first-seen point order.
inline std::vector<std::int32_t> build_superpoints(const PointCloud& cloud, double cell) {
    if (cell <= 0) throw SpecError("superpoint cell must be positive");
    cloud.validate();
    std::map<std::tuple<std::int32_t, std::int32_t, std::int32_t, std::int32_t>, std::int32_t> ids;
    std::vector<std::int32_t> out(static_cast<std::size_t>(cloud.size()));
    for (std::int64_t i = 0; i < cloud.size(); ++i) {
        const std::tuple<std::int32_t, std::int32_t, std::int32_t, std::int32_t> key{
            static_cast<std::int32_t>(std::floor(cloud.positions.at(i, 0) / cell)),
            static_cast<std::int32_t>(std::floor(cloud.positions.at(i, 1) / cell)),
            static_cast<std::int32_t>(std::floor(cloud.positions.at(i, 2) / cell)),
            cloud.instance_ids[static_cast<std::size_t>(i)]};
        auto [it, inserted] = ids.emplace(key, static_cast<std::int32_t>(ids.size()));
        out[static_cast<std::size_t>(i)] = it->second;
    }
    return out;
}

enum class NnMetric { L1, L2, Cosine };

inline NnMetric nn_metric_from_name(const std::string& s) {
    if (s == "L1" || s == "l1") return NnMetric::L1;
    if (s == "L2" || s == "l2") return NnMetric::L2;
    if (s == "cosine" || s == "cos") return NnMetric::Cosine;
    throw ConfigError("unknown NN metric: " + s);
}

namespace detail {

struct SuperpointTable {
    Tensor mean_features;             // [S x D]
    std::vector<std::int32_t> label;  // majority, -1 when unlabeled
    std::vector<std::vector<std::int64_t>> members;
};

inline SuperpointTable superpoint_means(const Tensor& features, const std::vector<std::int32_t>& superpoints,
                                        const std::vector<std::int32_t>* labels) {
    std::int32_t count = 0;
    for (std::int32_t s : superpoints) count = std::max(count, s + 1);
    SuperpointTable t;
    t.mean_features = Tensor({count, features.cols()});
    t.label.assign(static_cast<std::size_t>(count), -1);
    t.members.resize(static_cast<std::size_t>(count));
    for (std::size_t i = 0; i < superpoints.size(); ++i)
        t.members[static_cast<std::size_t>(superpoints[i])].push_back(static_cast<std::int64_t>(i));
    for (std::int32_t s = 0; s < count; ++s) {
        const auto& rows = t.members[static_cast<std::size_t>(s)];
        if (rows.empty()) continue;
        for (std::int64_t r : rows)
            for (std::int64_t j = 0; j < features.cols(); ++j) t.mean_features.at(s, j) += features.at(r, j);
        for (std::int64_t j = 0; j < features.cols(); ++j) t.mean_features.at(s, j) /= static_cast<double>(rows.size());
        if (labels) {
            std::map<std::int32_t, std::int32_t> votes;
            for (std::int64_t r : rows)
                if ((*labels)[static_cast<std::size_t>(r)] >= 0) votes[(*labels)[static_cast<std::size_t>(r)]]++;
            std::int32_t best = -1, best_count = 0;
            for (auto [cls, c] : votes)
                if (c > best_count) {
                    best = cls;
                    best_count = c;
                }
            t.label[static_cast<std::size_t>(s)] = best;
        }
    }
    return t;
}

inline double feature_distance(const Tensor& a, std::int64_t ra, const Tensor& b, std::int64_t rb, NnMetric metric) {
    const std::int64_t d = a.cols();
    switch (metric) {
        case NnMetric::L1: {
            double s = 0;
            for (std::int64_t j = 0; j < d; ++j) s += std::fabs(a.at(ra, j) - b.at(rb, j));
            return s;
        }
        case NnMetric::L2: {
            double s = 0;
            for (std::int64_t j = 0; j < d; ++j) {
                const double diff = a.at(ra, j) - b.at(rb, j);
                s += diff * diff;
            }
            return s;
        }
        case NnMetric::Cosine: {
            double dot = 0, na = 0, nb = 0;
            for (std::int64_t j = 0; j < d; ++j) {
                dot += a.at(ra, j) * b.at(rb, j);
                na += a.at(ra, j) * a.at(ra, j);
                nb += b.at(rb, j) * b.at(rb, j);
            }
            if (na < 1e-24 || nb < 1e-24) return 2.0;
            return 1.0 - dot / (std::sqrt(na) * std::sqrt(nb));
        }
    }
    return 0.0;
}

}  // namespace detail

// Label transfer by 1-NN search over superpoint mean features: each val
// superpoint takes the majority label of its closest train superpoint.
inline std::vector<std::int32_t> nn_probe(const Tensor& train_features, const std::vector<std::int32_t>& train_labels,
                                          const std::vector<std::int32_t>& train_superpoints, const Tensor& val_features,
                                          const std::vector<std::int32_t>& val_superpoints, NnMetric metric = NnMetric::L2) {
    if (train_features.rows() == 0) throw ContractError("nn_probe: empty training set");
    detail::SuperpointTable train = detail::superpoint_means(train_features, train_superpoints, &train_labels);
    detail::SuperpointTable val = detail::superpoint_means(val_features, val_superpoints, nullptr);

    std::vector<std::int32_t> labeled_sps;
    for (std::int32_t s = 0; s < static_cast<std::int32_t>(train.label.size()); ++s)
        if (train.label[static_cast<std::size_t>(s)] >= 0) labeled_sps.push_back(s);
    if (labeled_sps.empty()) throw ContractError("nn_probe: no labeled train superpoints");

    const std::int32_t vs = static_cast<std::int32_t>(val.members.size());
    std::vector<std::int32_t> sp_label(static_cast<std::size_t>(vs), -1);
    parallel_for(vs, 8, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t s = lo; s < hi; ++s) {
            if (val.members[static_cast<std::size_t>(s)].empty()) continue;
            double best = std::numeric_limits<double>::infinity();
            std::int32_t arg = labeled_sps[0];
            for (std::int32_t t : labeled_sps) {
                const double d = detail::feature_distance(val.mean_features, s, train.mean_features, t, metric);
                if (d < best) {
                    best = d;
                    arg = t;
                }
            }
            sp_label[static_cast<std::size_t>(s)] = train.label[static_cast<std::size_t>(arg)];
        }
    });
    std::vector<std::int32_t> out(val_superpoints.size());
    for (std::size_t i = 0; i < val_superpoints.size(); ++i) out[i] = sp_label[static_cast<std::size_t>(val_superpoints[i])];
    return out;
}

enum class LimitedMode { SceneFraction, PointsPerScene };

// Deterministic label reduction: either whole scenes keep labels or a fixed
// number of labeled points per scene survives; everything else becomes -1.
inline std::vector<std::vector<std::int32_t>> limited_annotation_split(const std::vector<std::vector<std::int32_t>>& labels,
                                                                       LimitedMode mode, double amount, std::uint64_t seed) {
    std::vector<std::vector<std::int32_t>> out = labels;
    if (mode == LimitedMode::SceneFraction) {
        if (amount < 0 || amount > 1) throw ConfigError("scene fraction must lie in [0, 1]");
        const std::int64_t total = static_cast<std::int64_t>(labels.size());
        const std::int64_t keep = std::min<std::int64_t>(
            total, static_cast<std::int64_t>(std::ceil(amount * static_cast<double>(total) - 1e-9)));
        std::vector<std::int64_t> order(labels.size());
        for (std::size_t i = 0; i < labels.size(); ++i) order[i] = static_cast<std::int64_t>(i);
        Rng rng(split_seed(seed, 0x11317edull));
        rng.shuffle(order);
        std::set<std::int64_t> kept(order.begin(), order.begin() + keep);
        for (std::size_t s = 0; s < out.size(); ++s)
            if (!kept.count(static_cast<std::int64_t>(s)))
                for (auto& l : out[s]) l = -1;
    } else {
        const auto per_scene = static_cast<std::int64_t>(amount);
        if (per_scene < 0) throw ConfigError("points per scene must be >= 0");
        for (std::size_t s = 0; s < out.size(); ++s) {
            std::vector<std::int64_t> candidates;
            for (std::size_t i = 0; i < out[s].size(); ++i)
                if (out[s][i] >= 0) candidates.push_back(static_cast<std::int64_t>(i));
            Rng rng(split_seed(seed, 0x901423ull, s));
            rng.shuffle(candidates);
            const std::size_t keep = std::min<std::size_t>(candidates.size(), static_cast<std::size_t>(per_scene));
            std::set<std::int64_t> kept(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(keep));
            for (std::size_t i = 0; i < out[s].size(); ++i)
                if (!kept.count(static_cast<std::int64_t>(i))) out[s][i] = -1;
        }
    }
    return out;
}

// --- principal component projection -----------------------------------------

struct PcaResult {
    Tensor projection;   // [N x k]
    Tensor components;   // [D x k]
    std::vector<double> eigenvalues;
};

// top-k principal directions via orthogonalized power iteration on the
// covariance matrix
inline PcaResult pca_project(const Tensor& features, std::int32_t k) {
    const std::int64_t n = features.rows(), d = features.cols();
    if (n < k) throw DegenerateInputError("pca: need at least k rows");
    std::vector<double> mean(static_cast<std::size_t>(d), 0.0);
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < d; ++j) mean[static_cast<std::size_t>(j)] += features.at(i, j);
    for (auto& m : mean) m /= static_cast<double>(n);
    Tensor cov({d, d});
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t a = 0; a < d; ++a) {
            const double xa = features.at(i, a) - mean[static_cast<std::size_t>(a)];
            for (std::int64_t b = 0; b < d; ++b)
                cov.at(a, b) += xa * (features.at(i, b) - mean[static_cast<std::size_t>(b)]);
        }
    for (std::int64_t i = 0; i < cov.numel(); ++i) cov[i] /= static_cast<double>(n);

    PcaResult r;
    r.components = Tensor({d, k});
    Rng rng(0x9ca0ull);
    std::vector<std::vector<double>> basis;
    for (std::int32_t c = 0; c < k; ++c) {
        std::vector<double> v(static_cast<std::size_t>(d));
        for (auto& x : v) x = rng.uniform(-1, 1);
        for (int iter = 0; iter < 256; ++iter) {
            // orthogonalize against previous components, then power step
            for (const auto& prev : basis) {
                double dot = 0;
                for (std::int64_t j = 0; j < d; ++j) dot += v[static_cast<std::size_t>(j)] * prev[static_cast<std::size_t>(j)];
                for (std::int64_t j = 0; j < d; ++j) v[static_cast<std::size_t>(j)] -= dot * prev[static_cast<std::size_t>(j)];
            }
            std::vector<double> next(static_cast<std::size_t>(d), 0.0);
            for (std::int64_t a = 0; a < d; ++a)
                for (std::int64_t b = 0; b < d; ++b) next[static_cast<std::size_t>(a)] += cov.at(a, b) * v[static_cast<std::size_t>(b)];
            double norm = 0;
            for (double x : next) norm += x * x;
            norm = std::sqrt(norm);
            if (norm < 1e-14) {
                // no variance left in the orthogonal complement
                next.assign(static_cast<std::size_t>(d), 0.0);
                v = next;
                break;
            }
            for (auto& x : next) x /= norm;
            v = std::move(next);
        }
        double lambda = 0;
        std::vector<double> cv(static_cast<std::size_t>(d), 0.0);
        for (std::int64_t a = 0; a < d; ++a)
            for (std::int64_t b = 0; b < d; ++b) cv[static_cast<std::size_t>(a)] += cov.at(a, b) * v[static_cast<std::size_t>(b)];
        for (std::int64_t a = 0; a < d; ++a) lambda += v[static_cast<std::size_t>(a)] * cv[static_cast<std::size_t>(a)];
        r.eigenvalues.push_back(lambda);
        for (std::int64_t a = 0; a < d; ++a) r.components.at(a, c) = v[static_cast<std::size_t>(a)];
        basis.push_back(v);
    }
    r.projection = Tensor({n, k});
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int32_t c = 0; c < k; ++c) {
            double acc = 0;
            for (std::int64_t j = 0; j < d; ++j)
                acc += (features.at(i, j) - mean[static_cast<std::size_t>(j)]) * r.components.at(j, c);
            r.projection.at(i, c) = acc;
        }
    return r;
}

// PCA to three dimensions, min-max normalized per channel into [0, 1];
// degenerate channels become 0.5.
inline Tensor pca_colors(const Tensor& features) {
    if (features.rows() < 3) throw DegenerateInputError("pca_colors: need at least 3 points");
    PcaResult pca = pca_project(features, 3);
    Tensor colors({features.rows(), 3});
    for (std::int32_t c = 0; c < 3; ++c) {
        double lo = pca.projection.at(0, c), hi = lo;
        for (std::int64_t i = 1; i < features.rows(); ++i) {
            lo = std::min(lo, pca.projection.at(i, c));
            hi = std::max(hi, pca.projection.at(i, c));
        }
        if (hi - lo < 1e-12) {
            for (std::int64_t i = 0; i < features.rows(); ++i) colors.at(i, c) = 0.5;
        } else {
            for (std::int64_t i = 0; i < features.rows(); ++i) colors.at(i, c) = (pca.projection.at(i, c) - lo) / (hi - lo);
        }
    }
    return colors;
}

// --- instance probe ----------------------------------------------------------

struct ScenePoints {
    Tensor positions;   // [N x 3]
    Tensor features;    // [N x D]
    std::vector<std::int32_t> labels;
    std::vector<std::int32_t> instance_ids;
};

struct InstanceProbeConfig {
    ProbeConfig head;                 // shared optimizer settings for both heads
    std::int64_t offset_hidden = 64;  // hidden width of the offset MLP
    double cluster_radius = 0.15;
    std::int64_t min_cluster_points = 10;
    std::int32_t num_classes = kNumClasses;

    InstanceProbeConfig() = default;
};

namespace detail {

struct UnionFind {
    std::vector<std::int32_t> parent;
    explicit UnionFind(std::int32_t n) : parent(static_cast<std::size_t>(n)) {
        for (std::int32_t i = 0; i < n; ++i) parent[static_cast<std::size_t>(i)] = i;
    }
    std::int32_t find(std::int32_t x) {
        while (parent[static_cast<std::size_t>(x)] != x) {
            parent[static_cast<std::size_t>(x)] = parent[static_cast<std::size_t>(parent[static_cast<std::size_t>(x)])];
            x = parent[static_cast<std::size_t>(x)];
        }
        return x;
    }
    void merge(std::int32_t a, std::int32_t b) {
        a = find(a);
        b = find(b);
        if (a != b) parent[static_cast<std::size_t>(std::max(a, b))] = std::min(a, b);
    }
};

// single-linkage clustering of shifted points within the same predicted class
// via a spatial hash over cells of the cluster radius
inline std::vector<std::int32_t> radius_clusters(const std::vector<std::array<double, 3>>& pts,
                                                 const std::vector<std::int32_t>& cls, double radius) {
    const std::int32_t n = static_cast<std::int32_t>(pts.size());
    UnionFind uf(n);
    std::unordered_map<std::uint64_t, std::vector<std::int32_t>> cells;
    auto cell_key = [&](double x, double y, double z) {
        const auto cx = static_cast<std::int64_t>(std::floor(x / radius));
        const auto cy = static_cast<std::int64_t>(std::floor(y / radius));
        const auto cz = static_cast<std::int64_t>(std::floor(z / radius));
        std::uint64_t h = 0xcbf29ce484222325ull;
        for (std::int64_t v : {cx, cy, cz}) {
            h ^= static_cast<std::uint64_t>(v);
            h *= 0x100000001b3ull;
        }
        return h;
    };
    for (std::int32_t i = 0; i < n; ++i) cells[cell_key(pts[static_cast<std::size_t>(i)][0], pts[static_cast<std::size_t>(i)][1], pts[static_cast<std::size_t>(i)][2])].push_back(i);
    const double r2 = radius * radius;
    for (std::int32_t i = 0; i < n; ++i) {
        const auto& p = pts[static_cast<std::size_t>(i)];
        for (int dx = -1; dx <= 1; ++dx)
            for (int dy = -1; dy <= 1; ++dy)
                for (int dz = -1; dz <= 1; ++dz) {
                    const auto it = cells.find(cell_key(p[0] + dx * radius, p[1] + dy * radius, p[2] + dz * radius));
                    if (it == cells.end()) continue;
                    for (std::int32_t j : it->second) {
                        if (j <= i || cls[static_cast<std::size_t>(j)] != cls[static_cast<std::size_t>(i)]) continue;
                        const auto& q = pts[static_cast<std::size_t>(j)];
                        const double d2 = (p[0] - q[0]) * (p[0] - q[0]) + (p[1] - q[1]) * (p[1] - q[1]) + (p[2] - q[2]) * (p[2] - q[2]);
                        if (d2 <= r2) uf.merge(i, j);
                    }
                }
    }
    std::vector<std::int32_t> root(static_cast<std::size_t>(n));
    for (std::int32_t i = 0; i < n; ++i) root[static_cast<std::size_t>(i)] = uf.find(i);
    return root;
}

}  // namespace detail

struct InstancePrediction {
    std::vector<std::int64_t> points;  // indices within the scene
    std::int32_t class_id = -1;
    double confidence = 0.0;
    std::int32_t scene = 0;
};

// Average precision at IoU >= 0.5 between predicted and ground-truth point
// sets, averaged over classes present in the ground truth.
inline double map_at_50(const std::vector<InstancePrediction>& predictions,
                        const std::vector<ScenePoints>& scenes, std::int32_t num_classes) {
    // collect gt instances per scene
    struct GtInstance {
        std::set<std::int64_t> points;
        std::int32_t class_id;
        bool matched = false;
    };
    std::vector<std::vector<GtInstance>> gt(scenes.size());
    std::vector<std::int64_t> gt_per_class(static_cast<std::size_t>(num_classes), 0);
    for (std::size_t s = 0; s < scenes.size(); ++s) {
        std::map<std::int32_t, GtInstance> by_id;
        for (std::int64_t i = 0; i < scenes[s].positions.rows(); ++i) {
            const std::int32_t inst = scenes[s].instance_ids[static_cast<std::size_t>(i)];
            if (inst < 0) continue;
            auto& g = by_id[inst];
            g.points.insert(i);
            g.class_id = scenes[s].labels[static_cast<std::size_t>(i)];
        }
        for (auto& [id, g] : by_id) {
            gt_per_class[static_cast<std::size_t>(g.class_id)]++;
            gt[s].push_back(std::move(g));
        }
    }

    double ap_sum = 0.0;
    std::int32_t classes_counted = 0;
    for (std::int32_t c = 0; c < num_classes; ++c) {
        if (gt_per_class[static_cast<std::size_t>(c)] == 0) continue;
        ++classes_counted;
        std::vector<const InstancePrediction*> preds;
        for (const auto& p : predictions)
            if (p.class_id == c) preds.push_back(&p);
        std::sort(preds.begin(), preds.end(), [](const InstancePrediction* a, const InstancePrediction* b) {
            if (a->confidence != b->confidence) return a->confidence > b->confidence;
            if (a->scene != b->scene) return a->scene < b->scene;
            return a->points < b->points;
        });
        for (auto& per_scene : gt)
            for (auto& g : per_scene) g.matched = false;
        double ap = 0.0;
        std::int64_t tp = 0, considered = 0;
        for (const auto* p : preds) {
            ++considered;
            double best_iou = 0.0;
            GtInstance* best = nullptr;
            for (auto& g : gt[static_cast<std::size_t>(p->scene)]) {
                if (g.class_id != c || g.matched) continue;
                std::int64_t inter = 0;
                for (std::int64_t pt : p->points) inter += g.points.count(pt) ? 1 : 0;
                const double uni = static_cast<double>(g.points.size() + p->points.size() - static_cast<std::size_t>(inter));
                const double iou = uni == 0 ? 0.0 : static_cast<double>(inter) / uni;
                if (iou > best_iou) {
                    best_iou = iou;
                    best = &g;
                }
            }
            if (best_iou >= 0.5 && best) {
                best->matched = true;
                ++tp;
                ap += static_cast<double>(tp) / static_cast<double>(considered);
            }
        }
        ap /= static_cast<double>(gt_per_class[static_cast<std::size_t>(c)]);
        ap_sum += ap;
    }
    return classes_counted == 0 ? 0.0 : ap_sum / classes_counted;
}

struct InstanceProbeResult {
    double map50 = 0.0;
    std::vector<InstancePrediction> predictions;
};

// Linear class head plus a one-hidden-layer MLP regressing the displacement
// to the instance centroid (L1 loss); inference shifts points by the
// predicted offsets and groups them per predicted class by radius.
inline InstanceProbeResult instance_probe(const std::vector<ScenePoints>& train, const std::vector<ScenePoints>& val,
                                          const InstanceProbeConfig& cfg = {}) {
    if (train.empty() || val.empty()) throw ContractError("instance_probe: empty scene set");
    const std::int64_t width = train[0].features.cols();
    const std::int32_t num_classes = cfg.num_classes;

    // flatten training rows
    std::int64_t total = 0;
    for (const auto& s : train) total += s.features.rows();
    Tensor tf({total, width});
    std::vector<std::int32_t> tl(static_cast<std::size_t>(total));
    Tensor offsets({total, 3});
    std::vector<char> has_instance(static_cast<std::size_t>(total), 0);
    std::int64_t row = 0;
    for (const auto& s : train) {
        // instance centroids within the scene
        std::map<std::int32_t, std::array<double, 4>> centroid;  // sum x,y,z + count
        for (std::int64_t i = 0; i < s.positions.rows(); ++i) {
            const std::int32_t inst = s.instance_ids[static_cast<std::size_t>(i)];
            if (inst < 0) continue;
            auto& c = centroid[inst];
            for (int a = 0; a < 3; ++a) c[static_cast<std::size_t>(a)] += s.positions.at(i, a);
            c[3] += 1.0;
        }
        for (std::int64_t i = 0; i < s.features.rows(); ++i, ++row) {
            for (std::int64_t j = 0; j < width; ++j) tf.at(row, j) = s.features.at(i, j);
            tl[static_cast<std::size_t>(row)] = s.labels[static_cast<std::size_t>(i)];
            const std::int32_t inst = s.instance_ids[static_cast<std::size_t>(i)];
            if (inst >= 0) {
                const auto& c = centroid.at(inst);
                for (int a = 0; a < 3; ++a) offsets.at(row, a) = c[static_cast<std::size_t>(a)] / c[3] - s.positions.at(i, a);
                has_instance[static_cast<std::size_t>(row)] = 1;
            }
        }
    }

    // class head: reuse the linear probe machinery with val = train slice
    LinearProbeResult cls = linear_probe(tf, tl, tf, tl, num_classes, cfg.head);

    // offset head trained with L1 on instance rows
    ParamSet ps;
    {
        Rng rng(split_seed(cfg.head.seed, 0x0ff5e7ull));
        auto he = [&](std::int64_t fan_in, std::vector<std::int64_t> shape) {
            Tensor t(std::move(shape));
            const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
            for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-limit, limit);
            return t;
        };
        ps.add("w1", he(width, {width, cfg.offset_hidden}));
        ps.add("b1", Tensor({cfg.offset_hidden}));
        ps.add("w2", he(cfg.offset_hidden, {cfg.offset_hidden, 3}));
        ps.add("b2", Tensor({3}));
    }
    ParamSet m1, m2;
    for (const auto& [name, value] : ps.values) {
        m1.add(name, Tensor(value.shape()));
        m2.add(name, Tensor(value.shape()));
    }
    std::vector<std::int64_t> rows_with_instance;
    for (std::int64_t i = 0; i < total; ++i)
        if (has_instance[static_cast<std::size_t>(i)]) rows_with_instance.push_back(i);
    if (rows_with_instance.empty()) throw ContractError("instance_probe: no instance-labeled points");
    const std::int64_t spe = (static_cast<std::int64_t>(rows_with_instance.size()) + cfg.head.batch_rows - 1) / cfg.head.batch_rows;
    std::int64_t step = 0;
    for (std::int64_t epoch = 0; epoch < cfg.head.epochs; ++epoch) {
        Rng shuffle_rng(split_seed(cfg.head.seed, 0x0ff5ull, static_cast<std::uint64_t>(epoch)));
        std::vector<std::int64_t> order = rows_with_instance;
        shuffle_rng.shuffle(order);
        for (std::int64_t b = 0; b < spe; ++b) {
            const std::int64_t lo = b * cfg.head.batch_rows;
            const std::int64_t hi = std::min<std::int64_t>(lo + cfg.head.batch_rows, static_cast<std::int64_t>(order.size()));
            Tensor xb({hi - lo, width}), yb({hi - lo, 3});
            for (std::int64_t i = lo; i < hi; ++i) {
                const std::int64_t src = order[static_cast<std::size_t>(i)];
                for (std::int64_t j = 0; j < width; ++j) xb.at(i - lo, j) = tf.at(src, j);
                for (int a = 0; a < 3; ++a) yb.at(i - lo, a) = offsets.at(src, a);
            }
            ps.zero_grads();
            ParamNodes p(ps, true);
            NodePtr h = ops::gelu(ops::bias_add(ops::matmul(constant(std::move(xb)), p("w1")), p("b1")));
            NodePtr pred = ops::bias_add(ops::matmul(std::move(h), p("w2")), p("b2"));
            NodePtr loss = ops::mean_all(ops::abs(ops::sub(std::move(pred), constant(std::move(yb)))));
            backward(loss, ps);
            const double lr = lr_schedule(step, cfg.head.warmup_epochs * spe, cfg.head.epochs * spe, cfg.head.lr);
            adamw_step(ps, ps, m1, m2, lr, cfg.head.beta1, cfg.head.beta2, cfg.head.weight_decay, step + 1);
            ++step;
        }
    }

    // inference on validation scenes
    InstanceProbeResult result;
    for (std::size_t s = 0; s < val.size(); ++s) {
        const auto& scene = val[s];
        const std::int64_t n = scene.features.rows();
        Tensor logits = detail::affine_forward(scene.features, cls.weight, cls.bias);
        std::vector<std::int32_t> pred_class = detail::argmax_rows(logits);
        // class probabilities for scoring
        Tensor probs(logits.shape());
        for (std::int64_t i = 0; i < n; ++i) {
            double mx = logits.at(i, 0);
            for (std::int64_t j = 1; j < logits.cols(); ++j) mx = std::max(mx, logits.at(i, j));
            double z = 0;
            for (std::int64_t j = 0; j < logits.cols(); ++j) z += std::exp(logits.at(i, j) - mx);
            for (std::int64_t j = 0; j < logits.cols(); ++j) probs.at(i, j) = std::exp(logits.at(i, j) - mx) / z;
        }
        Tensor h = detail::affine_forward(scene.features, ps.value("w1"), ps.value("b1"));
        for (std::int64_t i = 0; i < h.numel(); ++i) h[i] = h[i] * 0.5 * std::erfc(-h[i] * M_SQRT1_2);
        Tensor off = detail::affine_forward(h, ps.value("w2"), ps.value("b2"));
        std::vector<std::array<double, 3>> shifted(static_cast<std::size_t>(n));
        for (std::int64_t i = 0; i < n; ++i)
            for (int a = 0; a < 3; ++a) shifted[static_cast<std::size_t>(i)][static_cast<std::size_t>(a)] = scene.positions.at(i, a) + off.at(i, a);
        std::vector<std::int32_t> roots = detail::radius_clusters(shifted, pred_class, cfg.cluster_radius);
        std::map<std::int32_t, InstancePrediction> clusters;
        for (std::int64_t i = 0; i < n; ++i) {
            auto& cl = clusters[roots[static_cast<std::size_t>(i)]];
            cl.points.push_back(i);
            cl.class_id = pred_class[static_cast<std::size_t>(i)];
            cl.confidence += probs.at(i, pred_class[static_cast<std::size_t>(i)]);
            cl.scene = static_cast<std::int32_t>(s);
        }
        for (auto& [root, cl] : clusters) {
            if (static_cast<std::int64_t>(cl.points.size()) < cfg.min_cluster_points) continue;
            cl.confidence /= static_cast<double>(cl.points.size());
            result.predictions.push_back(std::move(cl));
        }
    }
    result.map50 = map_at_50(result.predictions, val, num_classes);
    return result;
}

}  // namespace msm
