#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <thread>
#include <vector>

#include "msm/autodiff.hpp"
#include "msm/checkpoint.hpp"
#include "msm/errors.hpp"
#include "msm/hunet.hpp"
#include "msm/rng.hpp"
#include "msm/views.hpp"

namespace msm {

struct TrainConfig {
    std::int64_t epochs = 30;
    std::int64_t warmup_epochs = 2;
    double base_lr = 0.0015;
    double weight_decay = 0.05;
    double beta1 = 0.9, beta2 = 0.95;
    std::int64_t batch_size = 4;
    double mask_ratio = 0.4;
    double momentum_start = 0.996, momentum_end = 1.0;
    std::uint64_t seed = 1;
    std::vector<double> level_weights;  // empty = uniform
    bool topdown_mask = false;          // tokens enter before the encoder
    bool supervise_last_only = false;   // loss only at the finest level
    bool no_mask = false;               // plain cross-view distillation
    std::int32_t jobs = 2;              // concurrent graphs per scene

    void validate() const {
        if (epochs < 1 || warmup_epochs < 0 || warmup_epochs >= epochs) throw ConfigError("warmup must be < epochs");
        if (momentum_start < 0 || momentum_start > 1 || momentum_end < 0 || momentum_end > 1)
            throw ConfigError("teacher momentum must lie in [0, 1]");
        if (batch_size < 1) throw ConfigError("batch size must be >= 1");
        if (mask_ratio < 0 || mask_ratio > 1) throw ConfigError("mask ratio must lie in [0, 1]");
    }
};

// teacher <- m * teacher + (1 - m) * student, elementwise, for every teacher
// parameter
inline void ema_update(ParamSet& teacher, const ParamSet& student, double momentum) {
    if (momentum < 0.0 || momentum > 1.0) throw ContractError("ema momentum outside [0, 1]");
    for (auto& [name, t] : teacher.values) {
        const Tensor& s = student.value(name);
        if (!t.same_shape(s)) throw ShapeError("ema_update: shape mismatch for " + name);
        for (std::int64_t i = 0, e = t.numel(); i < e; ++i) t[i] = momentum * t[i] + (1.0 - momentum) * s[i];
    }
}

// cosine ramp from m0 at step 0 to m1 at total_steps
inline double momentum_schedule(std::int64_t step, std::int64_t total_steps, double m0, double m1) {
    const double t = total_steps <= 0 ? 1.0 : static_cast<double>(step) / static_cast<double>(total_steps);
    return m1 - (m1 - m0) * (std::cos(M_PI * std::min(1.0, t)) + 1.0) / 2.0;
}

// linear warmup to base_lr, then cosine decay to zero
inline double lr_schedule(std::int64_t step, std::int64_t warmup_steps, std::int64_t total_steps, double base_lr) {
    if (warmup_steps > 0 && step < warmup_steps) return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
    const std::int64_t span = total_steps - warmup_steps;
    if (span <= 0) return 0.0;
    const double t = static_cast<double>(step - warmup_steps) / static_cast<double>(span);
    return base_lr * (std::cos(M_PI * std::min(1.0, t)) + 1.0) / 2.0;
}

// decoupled weight decay Adam with bias correction; step_count is 1-based
inline void adamw_step(ParamSet& params, const ParamSet& grads, ParamSet& moment1, ParamSet& moment2, double lr,
                       double beta1, double beta2, double weight_decay, std::int64_t step_count) {
    constexpr double eps = 1e-8;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
    for (auto& [name, p] : params.values) {
        const Tensor& g = grads.grads.at(name);
        if (!g.same_shape(p)) throw ShapeError("adamw_step: grad shape mismatch for " + name);
        Tensor& m = moment1.value(name);
        Tensor& v = moment2.value(name);
        for (std::int64_t i = 0, e = p.numel(); i < e; ++i) {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            p[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * p[i]);
        }
    }
}

// per-level mean channel std across rows (population convention)
inline std::vector<double> collapse_metric(const std::vector<Tensor>& level_features) {
    std::vector<double> out;
    out.reserve(level_features.size());
    for (const auto& f : level_features) {
        const std::int64_t r = f.rows(), c = f.cols();
        if (r == 0 || c == 0) {
            out.push_back(0.0);
            continue;
        }
        double acc = 0.0;
        for (std::int64_t j = 0; j < c; ++j) {
            double mean = 0.0;
            for (std::int64_t i = 0; i < r; ++i) mean += f.at(i, j);
            mean /= static_cast<double>(r);
            double var = 0.0;
            for (std::int64_t i = 0; i < r; ++i) var += (f.at(i, j) - mean) * (f.at(i, j) - mean);
            acc += std::sqrt(var / static_cast<double>(r));
        }
        out.push_back(acc / static_cast<double>(c));
    }
    return out;
}

// One cross-view direction of the reconstruction loss at one level:
// predictions over matched masked rows vs detached teacher rows.
struct LevelLossTerm {
    NodePtr pred;   // [m x C], may be null when the level has no matched rows
    Tensor target;  // same shape as pred's value
};

// L = sum over levels of (mean |pred1 - target2| + mean |pred2 - target1|),
// with optional per-level weights. Levels without matched rows contribute 0;
// if nothing matched anywhere the batch is degenerate.
inline NodePtr msm_loss(const std::vector<LevelLossTerm>& dir1, const std::vector<LevelLossTerm>& dir2,
                        const std::vector<double>& level_weights = {}) {
    std::vector<NodePtr> terms;
    auto add_terms = [&](const std::vector<LevelLossTerm>& dir) {
        for (std::size_t l = 0; l < dir.size(); ++l) {
            if (!dir[l].pred) continue;
            if (!dir[l].pred->value.same_shape(dir[l].target)) throw ShapeError("msm_loss: prediction/target shape mismatch");
            NodePtr term = ops::mean_all(ops::abs(ops::sub(dir[l].pred, constant(dir[l].target))));
            const double w = level_weights.empty() ? 1.0 : level_weights.at(l);
            if (w != 1.0) term = ops::scale(std::move(term), w);
            terms.push_back(std::move(term));
        }
    };
    add_terms(dir1);
    add_terms(dir2);
    if (terms.empty()) throw DegenerateBatchError("no matched masked voxels at any level");
    return terms.size() == 1 ? terms[0] : ops::add_n(std::move(terms));
}

namespace detail {

// runs tasks on up to `parallelism` plain threads; kernel-level parallelism is
// expected to be off while training so graphs do not contend
inline void run_tasks(std::vector<std::function<void()>>& tasks, std::int32_t parallelism) {
    if (tasks.empty()) return;
    if (parallelism <= 1 || tasks.size() == 1) {
        for (auto& t : tasks) t();
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(tasks.size());
    auto worker = [&] {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= tasks.size()) return;
            try {
                tasks[i]();
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    std::vector<std::thread> threads;
    const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(parallelism), tasks.size());
    for (std::size_t i = 1; i < n; ++i) threads.emplace_back(worker);
    worker();
    for (auto& t : threads) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

inline NodePtr predictor_forward(ParamNodes& p, std::int32_t level, NodePtr x) {
    const std::string base = "pred" + std::to_string(level);
    NodePtr h = ops::gelu(ops::bias_add(ops::matmul(std::move(x), p(base + ".w1")), p(base + ".b1")));
    return ops::bias_add(ops::matmul(std::move(h), p(base + ".w2")), p(base + ".b2"));
}

}  // namespace detail

inline void init_predictor_params(ParamSet& ps, const HUNetConfig& cfg, std::uint64_t seed) {
    Rng rng(split_seed(seed, 0x93edull));
    for (std::int32_t l = 0; l < cfg.levels; ++l) {
        const std::int64_t c = cfg.dec_channels[static_cast<std::size_t>(l)];
        const std::int64_t hidden = 2 * c;
        auto he = [&](std::int64_t fan_in, std::vector<std::int64_t> shape) {
            Tensor t(std::move(shape));
            const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
            for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-limit, limit);
            return t;
        };
        const std::string base = "pred" + std::to_string(l);
        ps.add(base + ".w1", he(c, {c, hidden}));
        ps.add(base + ".b1", Tensor({hidden}));
        ps.add(base + ".w2", he(hidden, {hidden, c}));
        ps.add(base + ".b2", Tensor({c}));
    }
}

struct TrainState {
    HUNetConfig model;
    TrainConfig config;
    ViewConfig view;
    ParamSet student;  // model + predictor parameters
    ParamSet teacher;  // model parameters only
    ParamSet moment1, moment2;
    std::uint64_t step = 0;
    std::int64_t steps_per_epoch = 0;
    std::int64_t total_steps = 0;
    std::int64_t warmup_steps = 0;
};

inline TrainState init_train_state(const HUNetConfig& model, const TrainConfig& cfg, const ViewConfig& view,
                                   std::int64_t steps_per_epoch) {
    model.validate();
    cfg.validate();
    TrainState st;
    st.model = model;
    st.config = cfg;
    st.view = view;
    init_hunet_params(st.student, model, cfg.seed);
    // the teacher starts as an exact copy of the student's model parameters
    for (const auto& [name, value] : st.student.values) st.teacher.add(name, value);
    init_predictor_params(st.student, model, cfg.seed);
    for (const auto& [name, value] : st.student.values) {
        st.moment1.add(name, Tensor(value.shape()));
        st.moment2.add(name, Tensor(value.shape()));
    }
    st.steps_per_epoch = steps_per_epoch;
    st.total_steps = cfg.epochs * steps_per_epoch;
    st.warmup_steps = cfg.warmup_epochs * steps_per_epoch;
    return st;
}

struct StepMetrics {
    double loss = 0.0;
    std::vector<double> level_losses;  // per level, batch mean
    double lr = 0.0;
    double momentum = 0.0;
    std::vector<double> collapse_std;  // per level, teacher features
    std::int64_t matched_voxels = 0;
};

// One optimization step over a batch of view pairs: student forward on the
// masked crops, teacher forward on the full views (no gradient), cross-view
// L1 on matched masked rows, AdamW, then the EMA teacher update.
inline StepMetrics train_step(TrainState& st, const std::vector<ViewPair>& batch, bool collect_collapse = true) {
    if (batch.empty()) throw ContractError("train_step: empty batch");
    const HUNetConfig& cfg = st.model;
    const TrainConfig& tc = st.config;
    const std::int32_t levels = cfg.levels;

    StepMetrics metrics;
    metrics.lr = lr_schedule(static_cast<std::int64_t>(st.step), st.warmup_steps, st.total_steps, tc.base_lr);
    metrics.momentum = momentum_schedule(static_cast<std::int64_t>(st.step), st.total_steps, tc.momentum_start, tc.momentum_end);
    metrics.level_losses.assign(static_cast<std::size_t>(levels), 0.0);
    metrics.collapse_std.assign(static_cast<std::size_t>(levels), 0.0);

    struct DirectionResult {
        ParamSet grads;  // gradient buffer (grads only)
        double loss = 0.0;
        std::vector<double> level_losses;
        std::int64_t matched = 0;
        bool degenerate = false;
    };

    const double scene_weight = 1.0 / static_cast<double>(batch.size());
    std::vector<DirectionResult> results(batch.size() * 2);
    std::vector<std::vector<std::vector<Tensor>>> teacher_feats(batch.size());  // [scene][view][level]
    std::vector<double> collapse_acc(static_cast<std::size_t>(levels), 0.0);

    for (std::size_t scene = 0; scene < batch.size(); ++scene) {
        const ViewPair& pair = batch[scene];
        teacher_feats[scene].resize(2);

        // teacher forwards, no gradients, both views concurrently
        {
            std::vector<std::function<void()>> tasks;
            for (int v = 0; v < 2; ++v) {
                tasks.emplace_back([&, v] {
                    ParamNodes p(st.teacher, false);
                    HUNetTopology topo = build_topology(cfg, pair.teacher[static_cast<std::size_t>(v)]);
                    auto dec = hunet_forward_full(p, cfg, pair.teacher[static_cast<std::size_t>(v)], topo);
                    auto& store = teacher_feats[scene][static_cast<std::size_t>(v)];
                    store.reserve(static_cast<std::size_t>(levels));
                    for (auto& node : dec) store.push_back(node->value);
                });
            }
            detail::run_tasks(tasks, tc.jobs);
        }
        if (collect_collapse) {
            auto stds = collapse_metric(teacher_feats[scene][0]);
            for (std::int32_t l = 0; l < levels; ++l) collapse_acc[static_cast<std::size_t>(l)] += stds[static_cast<std::size_t>(l)];
        }

        // student forward/backward per view, each into its own grad buffer
        std::vector<std::function<void()>> tasks;
        for (int v = 0; v < 2; ++v) {
            tasks.emplace_back([&, v, scene] {
                DirectionResult& res = results[scene * 2 + static_cast<std::size_t>(v)];
                res.level_losses.assign(static_cast<std::size_t>(levels), 0.0);
                const GridHierarchy& student_hier = pair.student[static_cast<std::size_t>(v)];
                const GridHierarchy& own_full = pair.teacher[static_cast<std::size_t>(v)];
                const int other = 1 - v;

                std::vector<std::int64_t> sizes;
                for (const auto& level : student_hier.levels) sizes.push_back(level.num_voxels());
                MaskSpec mask = tc.no_mask ? MaskSpec::empty_for(sizes) : pair.masks[static_cast<std::size_t>(v)];

                // correspondence lookup for this direction, per level
                std::vector<std::map<std::int32_t, std::int32_t>> to_other(static_cast<std::size_t>(levels));
                for (std::int32_t l = 0; l < levels; ++l)
                    for (auto [a, b] : pair.corr[static_cast<std::size_t>(l)]) {
                        if (v == 0) to_other[static_cast<std::size_t>(l)].emplace(a, b);
                        else to_other[static_cast<std::size_t>(l)].emplace(b, a);
                    }

                // per-task gradient sink; parameter values are read from the
                // shared student set, which no task mutates during the step
                ParamSet grads;
                for (const auto& [name, value] : st.student.values) grads.grads.emplace(name, Tensor(value.shape()));
                ParamNodes p(st.student, true);

                std::vector<NodePtr> dec;
                HUNetTopology topo = build_topology(cfg, student_hier);
                if (tc.topdown_mask && !tc.no_mask) {
                    dec = hunet_forward_topdown(p, cfg, student_hier, topo, mask);
                } else {
                    auto enc = encode_masked(p, cfg, student_hier, mask);
                    dec = hunet_decode(p, cfg, student_hier, topo, mask, enc.features, enc.sub.to_full);
                }

                std::vector<LevelLossTerm> terms(static_cast<std::size_t>(levels));
                for (std::int32_t l = 0; l < levels; ++l) {
                    if (tc.supervise_last_only && l != 0) continue;
                    const auto& rows = tc.no_mask ? mask.unmasked[static_cast<std::size_t>(l)]
                                                  : pair.masks[static_cast<std::size_t>(v)].masked[static_cast<std::size_t>(l)];
                    const auto& student_grid = student_hier.levels[static_cast<std::size_t>(l)];
                    const auto& full_grid = own_full.levels[static_cast<std::size_t>(l)];
                    std::vector<std::int32_t> gather_rows;
                    std::vector<std::int32_t> target_rows;
                    for (std::int32_t r : rows) {
                        const std::int32_t fr = full_grid.find(student_grid.keys[static_cast<std::size_t>(r)]);
                        if (fr < 0) continue;
                        auto it = to_other[static_cast<std::size_t>(l)].find(fr);
                        if (it == to_other[static_cast<std::size_t>(l)].end()) continue;
                        gather_rows.push_back(r);
                        target_rows.push_back(it->second);
                    }
                    if (gather_rows.empty()) continue;
                    const Tensor& teacher_level = teacher_feats[scene][static_cast<std::size_t>(other)][static_cast<std::size_t>(l)];
                    Tensor target({static_cast<std::int64_t>(target_rows.size()), teacher_level.cols()});
                    for (std::size_t i = 0; i < target_rows.size(); ++i)
                        for (std::int64_t f = 0; f < teacher_level.cols(); ++f)
                            target.at(static_cast<std::int64_t>(i), f) = teacher_level.at(target_rows[i], f);
                    NodePtr pred = detail::predictor_forward(
                        p, l, ops::row_gather(dec[static_cast<std::size_t>(l)], gather_rows));
                    res.matched += static_cast<std::int64_t>(gather_rows.size());
                    terms[static_cast<std::size_t>(l)] = {std::move(pred), std::move(target)};
                }

                bool any = false;
                for (const auto& t : terms) any = any || t.pred != nullptr;
                if (!any) {
                    res.degenerate = true;
                    return;
                }
                // per-level values for metrics
                std::vector<NodePtr> weighted;
                for (std::int32_t l = 0; l < levels; ++l) {
                    if (!terms[static_cast<std::size_t>(l)].pred) continue;
                    NodePtr term = ops::mean_all(
                        ops::abs(ops::sub(terms[static_cast<std::size_t>(l)].pred, constant(terms[static_cast<std::size_t>(l)].target))));
                    res.level_losses[static_cast<std::size_t>(l)] = term->value[0];
                    const double w = tc.level_weights.empty() ? 1.0 : tc.level_weights.at(static_cast<std::size_t>(l));
                    if (w != 1.0) term = ops::scale(std::move(term), w);
                    weighted.push_back(std::move(term));
                }
                NodePtr loss = weighted.size() == 1 ? weighted[0] : ops::add_n(std::move(weighted));
                res.loss = loss->value[0];
                backward(ops::scale(std::move(loss), scene_weight), grads);
                res.grads = std::move(grads);
            });
        }
        detail::run_tasks(tasks, tc.jobs);
    }

    // merge: fixed scene/view order keeps results independent of scheduling
    st.student.zero_grads();
    std::int64_t matched_total = 0;
    for (auto& res : results) matched_total += res.matched;
    if (matched_total == 0) throw DegenerateBatchError("no matched voxels in the whole batch");
    for (const auto& res : results) {
        if (res.degenerate) continue;
        // per-scene loss is the sum of both directions; the batch takes the mean
        metrics.loss += res.loss * scene_weight;
        for (std::int32_t l = 0; l < levels; ++l)
            metrics.level_losses[static_cast<std::size_t>(l)] += res.level_losses[static_cast<std::size_t>(l)] * scene_weight;
        for (const auto& [name, g] : res.grads.grads) {
            Tensor& dst = st.student.grad(name);
            for (std::int64_t i = 0, e = dst.numel(); i < e; ++i) dst[i] += g[i];
        }
    }
    metrics.matched_voxels = matched_total;
    if (!std::isfinite(metrics.loss)) throw NumericError("non-finite training loss");

    adamw_step(st.student, st.student, st.moment1, st.moment2, metrics.lr, tc.beta1, tc.beta2, tc.weight_decay,
               static_cast<std::int64_t>(st.step) + 1);
    ema_update(st.teacher, st.student, metrics.momentum);
    st.step += 1;

    if (collect_collapse)
        for (std::int32_t l = 0; l < levels; ++l)
            metrics.collapse_std[static_cast<std::size_t>(l)] = collapse_acc[static_cast<std::size_t>(l)] / static_cast<double>(batch.size());
    return metrics;
}

inline ViewPair build_view_pair_with_retries(const PointCloud& cloud, const ViewConfig& view, std::uint64_t seed) {
    for (int attempt = 0;; ++attempt) {
        try {
            return build_view_pair(cloud, view, split_seed(seed, 0xf17eull, static_cast<std::uint64_t>(attempt)));
        } catch (const DegenerateViewError&) {
            if (attempt >= 7) throw;
        }
    }
}

inline std::string format_metric_line(std::int64_t epoch, double loss, const std::vector<double>& level_losses, double lr,
                                      double momentum, const std::vector<double>& collapse_std) {
    std::ostringstream os;
    os.precision(10);
    os << epoch << '\t' << loss;
    for (double v : level_losses) os << '\t' << v;
    os << '\t' << lr << '\t' << momentum;
    for (double v : collapse_std) os << '\t' << v;
    return os.str();
}

inline std::string metrics_header(const HUNetConfig& model, const TrainConfig& cfg) {
    std::ostringstream os;
    os << "# msm pretraining metrics\n";
    os << "# mask_ratio=" << cfg.mask_ratio << " no_mask=" << cfg.no_mask << " supervise_last_only=" << cfg.supervise_last_only
       << " topdown_mask=" << cfg.topdown_mask << " seed=" << cfg.seed << " epochs=" << cfg.epochs
       << " batch=" << cfg.batch_size << " lr=" << cfg.base_lr << "\n";
    os << "# epoch\tloss";
    for (std::int32_t l = 0; l < model.levels; ++l) os << "\tloss_l" << l;
    os << "\tlr\tmomentum";
    for (std::int32_t l = 0; l < model.levels; ++l) os << "\tstd_l" << l;
    return os.str();
}

// Full self-supervised run: epochs x scenes of build_view_pair + train_step,
// per-epoch metric lines, final checkpoint with both parameter sets and the
// optimizer moments. Resuming from a checkpoint reproduces the uninterrupted
// trajectory because all randomness derives from (seed, epoch, scene).
inline Checkpoint pretrain(const std::vector<PointCloud>& scenes, const HUNetConfig& model, const TrainConfig& cfg,
                           const ViewConfig& view, const std::string& metrics_path = {},
                           const Checkpoint* resume = nullptr,
                           const std::function<void(std::int64_t, const std::string&)>& on_epoch = nullptr,
                           std::int64_t stop_after_epoch = -1) {
    if (scenes.empty()) throw EmptySceneError("pretrain: no scenes");
    const std::int64_t steps_per_epoch =
        (static_cast<std::int64_t>(scenes.size()) + cfg.batch_size - 1) / cfg.batch_size;
    TrainState st = init_train_state(model, cfg, view, steps_per_epoch);
    std::int64_t start_epoch = 0;
    if (resume) {
        if (!(resume->config == model)) throw CheckpointError("resume checkpoint was trained with a different model config");
        st.student = resume->sections.at("student");
        st.teacher = resume->sections.at("teacher");
        st.moment1 = resume->sections.at("adam_m");
        st.moment2 = resume->sections.at("adam_v");
        st.step = resume->step;
        start_epoch = static_cast<std::int64_t>(resume->step) / steps_per_epoch;
    }

    // graphs run concurrently per scene; keep kernels single-threaded meanwhile
    const int pool_threads = ThreadPool::instance().threads();
    set_worker_threads(1);

    std::ofstream metrics_file;
    if (!metrics_path.empty()) {
        metrics_file.open(metrics_path, start_epoch == 0 ? std::ios::trunc : std::ios::app);
        if (!metrics_file) {
            set_worker_threads(pool_threads);
            throw IOError("cannot write metrics to " + metrics_path);
        }
        if (start_epoch == 0) metrics_file << metrics_header(model, cfg) << "\n";
    }

    const std::int64_t end_epoch = stop_after_epoch < 0 ? cfg.epochs : std::min(stop_after_epoch, cfg.epochs);
    try {
        for (std::int64_t epoch = start_epoch; epoch < end_epoch; ++epoch) {
            Rng order_rng(split_seed(cfg.seed, 0xe90cull, static_cast<std::uint64_t>(epoch)));
            std::vector<std::int64_t> order(scenes.size());
            for (std::size_t i = 0; i < scenes.size(); ++i) order[i] = static_cast<std::int64_t>(i);
            order_rng.shuffle(order);

            double epoch_loss = 0.0;
            std::vector<double> epoch_level(static_cast<std::size_t>(model.levels), 0.0);
            std::vector<double> epoch_std(static_cast<std::size_t>(model.levels), 0.0);
            double last_lr = 0.0, last_momentum = 0.0;
            std::int64_t steps = 0;
            for (std::int64_t b = 0; b < steps_per_epoch; ++b) {
                std::vector<ViewPair> batch;
                for (std::int64_t i = b * cfg.batch_size; i < std::min<std::int64_t>((b + 1) * cfg.batch_size,
                                                                                     static_cast<std::int64_t>(scenes.size()));
                     ++i) {
                    const std::int64_t scene_id = order[static_cast<std::size_t>(i)];
                    ViewConfig vc = view;
                    vc.mask_ratio = cfg.mask_ratio;
                    batch.push_back(build_view_pair_with_retries(
                        scenes[static_cast<std::size_t>(scene_id)], vc,
                        split_seed(cfg.seed, static_cast<std::uint64_t>(epoch) + 1, static_cast<std::uint64_t>(scene_id) + 1)));
                }
                StepMetrics m = train_step(st, batch);
                epoch_loss += m.loss;
                for (std::int32_t l = 0; l < model.levels; ++l) {
                    epoch_level[static_cast<std::size_t>(l)] += m.level_losses[static_cast<std::size_t>(l)];
                    epoch_std[static_cast<std::size_t>(l)] += m.collapse_std[static_cast<std::size_t>(l)];
                }
                last_lr = m.lr;
                last_momentum = m.momentum;
                ++steps;
            }
            epoch_loss /= static_cast<double>(steps);
            for (auto& v : epoch_level) v /= static_cast<double>(steps);
            for (auto& v : epoch_std) v /= static_cast<double>(steps);
            const std::string line = format_metric_line(epoch, epoch_loss, epoch_level, last_lr, last_momentum, epoch_std);
            if (metrics_file.is_open()) metrics_file << line << "\n" << std::flush;
            if (on_epoch) on_epoch(epoch, line);
        }
    } catch (...) {
        set_worker_threads(pool_threads);
        throw;
    }
    set_worker_threads(pool_threads);

    Checkpoint ckpt;
    ckpt.config = model;
    ckpt.step = st.step;
    ckpt.sections.emplace("student", st.student);
    ckpt.sections.emplace("teacher", st.teacher);
    ckpt.sections.emplace("adam_m", st.moment1);
    ckpt.sections.emplace("adam_v", st.moment2);
    return ckpt;
}

}  // namespace msm
