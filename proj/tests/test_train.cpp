#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "msm/scene.hpp"
#include "msm/train.hpp"

using namespace msm;

namespace {

HUNetConfig tiny_model() {
    HUNetConfig cfg;
    cfg.levels = 3;
    cfg.enc_channels = {4, 6, 8};
    cfg.dec_channels = {5, 6, 8};
    cfg.resnet_blocks = {1, 1, 1};
    cfg.attention_blocks = {0, 0, 1};
    cfg.window = 4;
    cfg.heads = 2;
    cfg.ff_ratio = 2;
    cfg.in_channels = 3;
    cfg.voxel_size = 0.12;
    return cfg;
}

ViewConfig tiny_view(const HUNetConfig& model) {
    ViewConfig vc;
    vc.voxel_size = model.voxel_size;
    vc.levels = model.levels;
    vc.crop_max_points = 400;
    return vc;
}

std::vector<PointCloud> tiny_scenes(std::size_t count, std::uint64_t seed0) {
    std::vector<PointCloud> scenes;
    for (std::size_t i = 0; i < count; ++i) {
        SceneSpec spec;
        spec.seed = seed0 + i;
        spec.extent_x = spec.extent_y = 1.2;
        spec.extent_z = 1.0;
        spec.density = 40.0;
        scenes.push_back(generate_scene(spec));
    }
    return scenes;
}

bool same_params(const ParamSet& a, const ParamSet& b) {
    if (a.values.size() != b.values.size()) return false;
    for (const auto& [name, t] : a.values) {
        const Tensor& o = b.value(name);
        if (!t.same_shape(o)) return false;
        for (std::int64_t i = 0; i < t.numel(); ++i)
            if (t[i] != o[i]) return false;
    }
    return true;
}

bool near_params(const ParamSet& a, const ParamSet& b, double tol) {
    for (const auto& [name, t] : a.values) {
        const Tensor& o = b.value(name);
        for (std::int64_t i = 0; i < t.numel(); ++i)
            if (std::fabs(t[i] - o[i]) > tol * std::max(1.0, std::fabs(t[i]))) return false;
    }
    return true;
}

}  // namespace

TEST_CASE("msm_loss is zero when predictions equal targets") {
    Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
    std::vector<LevelLossTerm> d1(1), d2(1);
    d1[0] = {make_leaf(t), t};
    d2[0] = {make_leaf(t), t};
    REQUIRE(msm_loss(d1, d2)->value[0] == 0.0);
}

TEST_CASE("msm_loss hand-computed single-voxel case") {
    std::vector<LevelLossTerm> d1(1), d2(1);
    d1[0] = {make_leaf(Tensor({1, 2}, {1.0, 2.0})), Tensor({1, 2})};
    d2[0] = {make_leaf(Tensor({1, 2})), Tensor({1, 2})};
    REQUIRE(msm_loss(d1, d2)->value[0] == Catch::Approx(1.5).margin(1e-15));
}

TEST_CASE("msm_loss matches the explicit double-loop oracle") {
    Rng rng(5);
    for (int trial = 0; trial < 50; ++trial) {
        const std::int32_t levels = 3;
        std::vector<LevelLossTerm> d1(levels), d2(levels);
        double expected = 0.0;
        for (std::int32_t l = 0; l < levels; ++l) {
            for (auto* dir : {&d1, &d2}) {
                const std::int64_t m = static_cast<std::int64_t>(rng.below(4));  // may be empty
                if (m == 0) continue;
                const std::int64_t c = 2 + static_cast<std::int64_t>(rng.below(3));
                Tensor pred({m, c}), target({m, c});
                for (std::int64_t i = 0; i < pred.numel(); ++i) {
                    pred[i] = rng.uniform(-2, 2);
                    target[i] = rng.uniform(-2, 2);
                }
                double acc = 0.0;
                for (std::int64_t i = 0; i < m; ++i)
                    for (std::int64_t j = 0; j < c; ++j) acc += std::fabs(pred.at(i, j) - target.at(i, j));
                expected += acc / static_cast<double>(m * c);
                (*dir)[static_cast<std::size_t>(l)] = {make_leaf(pred), target};
            }
        }
        bool any = false;
        for (auto* dir : {&d1, &d2})
            for (auto& t : *dir) any = any || t.pred != nullptr;
        if (!any) continue;
        REQUIRE(msm_loss(d1, d2)->value[0] == Catch::Approx(expected).margin(1e-12));
    }
}

TEST_CASE("msm_loss is symmetric under swapping the views") {
    Rng rng(6);
    std::vector<LevelLossTerm> d1(2), d2(2);
    for (std::int32_t l = 0; l < 2; ++l) {
        Tensor p1({2, 3}), t1({2, 3}), p2({3, 3}), t2({3, 3});
        for (std::int64_t i = 0; i < p1.numel(); ++i) p1[i] = rng.uniform(-1, 1), t1[i] = rng.uniform(-1, 1);
        for (std::int64_t i = 0; i < p2.numel(); ++i) p2[i] = rng.uniform(-1, 1), t2[i] = rng.uniform(-1, 1);
        d1[static_cast<std::size_t>(l)] = {make_leaf(p1), t1};
        d2[static_cast<std::size_t>(l)] = {make_leaf(p2), t2};
    }
    REQUIRE(msm_loss(d1, d2)->value[0] == Catch::Approx(msm_loss(d2, d1)->value[0]).margin(1e-15));
}

TEST_CASE("msm_loss with nothing matched is degenerate") {
    std::vector<LevelLossTerm> d1(2), d2(2);
    REQUIRE_THROWS_AS(msm_loss(d1, d2), DegenerateBatchError);
}

TEST_CASE("ema_update endpoints") {
    ParamSet teacher, student;
    teacher.add("w", Tensor({1}, {1.0}));
    student.add("w", Tensor({1}, {0.0}));
    ParamSet t1 = teacher;
    ema_update(t1, student, 1.0);
    REQUIRE(t1.value("w")[0] == 1.0);
    ParamSet t0 = teacher;
    ema_update(t0, student, 0.0);
    REQUIRE(t0.value("w")[0] == 0.0);
    ParamSet tm = teacher;
    ema_update(tm, student, 0.996);
    REQUIRE(tm.value("w")[0] == Catch::Approx(0.996).margin(1e-15));
}

TEST_CASE("ema_update applying m then 1 equals applying m once") {
    Rng rng(7);
    ParamSet teacher, student;
    Tensor t({4}), s({4});
    for (int i = 0; i < 4; ++i) t[i] = rng.uniform(-1, 1), s[i] = rng.uniform(-1, 1);
    teacher.add("w", t);
    student.add("w", s);
    ParamSet once = teacher;
    ema_update(once, student, 0.9);
    ParamSet twice = teacher;
    ema_update(twice, student, 0.9);
    ema_update(twice, student, 1.0);
    REQUIRE(same_params(once, twice));
}

TEST_CASE("momentum schedule endpoints and midpoint") {
    REQUIRE(momentum_schedule(0, 100, 0.996, 1.0) == Catch::Approx(0.996).margin(1e-15));
    REQUIRE(momentum_schedule(100, 100, 0.996, 1.0) == Catch::Approx(1.0).margin(1e-15));
    REQUIRE(momentum_schedule(50, 100, 0.996, 1.0) == Catch::Approx(0.998).margin(1e-12));
}

TEST_CASE("lr schedule warmup and cosine endpoints") {
    REQUIRE(lr_schedule(0, 10, 100, 0.0015) == 0.0);
    REQUIRE(lr_schedule(10, 10, 100, 0.0015) == Catch::Approx(0.0015).margin(1e-18));
    REQUIRE(lr_schedule(100, 10, 100, 0.0015) == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("adamw leaves params unchanged under zero gradient and zero decay") {
    ParamSet p, g, m, v;
    p.add("w", Tensor({2}, {1.0, -2.0}));
    g.add("w", Tensor({2}));
    m.add("w", Tensor({2}));
    v.add("w", Tensor({2}));
    adamw_step(p, g, m, v, 0.1, 0.9, 0.95, 0.0, 1);
    REQUIRE(p.value("w")[0] == 1.0);
    REQUIRE(p.value("w")[1] == -2.0);
}

TEST_CASE("adamw first step moves by about lr") {
    ParamSet p, g, m, v;
    p.add("w", Tensor({1}, {0.0}));
    g.add("w", Tensor({1}));
    g.grads.at("w")[0] = 1.0;
    m.add("w", Tensor({1}));
    v.add("w", Tensor({1}));
    adamw_step(p, g, m, v, 0.1, 0.9, 0.95, 0.0, 1);
    REQUIRE(p.value("w")[0] == Catch::Approx(-0.1).margin(1e-8));
}

TEST_CASE("adamw matches an independent reference trace on f(x)=x^2") {
    // reference implementation kept deliberately separate
    double x_ref = 1.0, m_ref = 0.0, v_ref = 0.0;
    const double lr = 0.1, b1 = 0.9, b2 = 0.95, wd = 0.01, eps = 1e-8;

    ParamSet p, g, m, v;
    p.add("x", Tensor({1}, {1.0}));
    g.add("x", Tensor({1}));
    m.add("x", Tensor({1}));
    v.add("x", Tensor({1}));

    for (int t = 1; t <= 10; ++t) {
        const double grad_ref = 2.0 * x_ref;
        m_ref = b1 * m_ref + (1 - b1) * grad_ref;
        v_ref = b2 * v_ref + (1 - b2) * grad_ref * grad_ref;
        const double mhat = m_ref / (1 - std::pow(b1, t));
        const double vhat = v_ref / (1 - std::pow(b2, t));
        x_ref -= lr * (mhat / (std::sqrt(vhat) + eps) + wd * x_ref);

        g.grads.at("x")[0] = 2.0 * p.value("x")[0];
        adamw_step(p, g, m, v, lr, b1, b2, wd, t);
        REQUIRE(p.value("x")[0] == Catch::Approx(x_ref).margin(1e-10));
    }
}

TEST_CASE("collapse metric on identical rows is zero") {
    REQUIRE(collapse_metric({Tensor::full({5, 3}, 2.5)})[0] == 0.0);
}

TEST_CASE("collapse metric on alternating unit rows is one") {
    Tensor t({4, 1}, {1.0, -1.0, 1.0, -1.0});
    REQUIRE(collapse_metric({t})[0] == Catch::Approx(1.0).margin(1e-15));
}

TEST_CASE("collapse metric matches the explicit formula oracle") {
    Rng rng(8);
    Tensor t({7, 4});
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-3, 3);
    double expected = 0.0;
    for (std::int64_t j = 0; j < 4; ++j) {
        double mean = 0;
        for (std::int64_t i = 0; i < 7; ++i) mean += t.at(i, j);
        mean /= 7;
        double var = 0;
        for (std::int64_t i = 0; i < 7; ++i) var += (t.at(i, j) - mean) * (t.at(i, j) - mean);
        expected += std::sqrt(var / 7);
    }
    expected /= 4;
    REQUIRE(collapse_metric({t})[0] == Catch::Approx(expected).margin(1e-12));
}

TEST_CASE("train_step is deterministic and keeps the teacher out of the gradient map") {
    HUNetConfig model = tiny_model();
    TrainConfig tc;
    tc.epochs = 2;
    tc.warmup_epochs = 1;
    tc.batch_size = 2;
    tc.seed = 3;
    ViewConfig vc = tiny_view(model);
    auto scenes = tiny_scenes(2, 50);

    auto run = [&]() {
        TrainState st = init_train_state(model, tc, vc, 1);
        std::vector<ViewPair> batch;
        for (std::size_t i = 0; i < scenes.size(); ++i) {
            ViewConfig v2 = vc;
            v2.mask_ratio = tc.mask_ratio;
            batch.push_back(build_view_pair_with_retries(scenes[i], v2, split_seed(tc.seed, 1, i + 1)));
        }
        StepMetrics m = train_step(st, batch);
        return std::make_pair(std::move(st), m);
    };
    auto [st1, m1] = run();
    auto [st2, m2] = run();
    REQUIRE(m1.loss == m2.loss);
    REQUIRE(m1.level_losses == m2.level_losses);
    REQUIRE(same_params(st1.student, st2.student));
    REQUIRE(same_params(st1.teacher, st2.teacher));

    // the teacher set of the run carries no gradient state at all
    for (const auto& [name, g] : st1.teacher.grads)
        for (std::int64_t i = 0; i < g.numel(); ++i) REQUIRE(g[i] == 0.0);
}

TEST_CASE("train_step with zero lr changes nothing but still updates the step") {
    HUNetConfig model = tiny_model();
    TrainConfig tc;
    tc.epochs = 2;
    tc.warmup_epochs = 1;
    tc.base_lr = 0.0;
    tc.batch_size = 1;
    ViewConfig vc = tiny_view(model);
    auto scenes = tiny_scenes(1, 60);
    TrainState st = init_train_state(model, tc, vc, 1);
    ParamSet before = st.student;
    ParamSet teacher_before = st.teacher;
    ViewConfig v2 = vc;
    v2.mask_ratio = tc.mask_ratio;
    std::vector<ViewPair> batch = {build_view_pair_with_retries(scenes[0], v2, 9)};
    StepMetrics m = train_step(st, batch);
    REQUIRE(m.lr == 0.0);
    REQUIRE(same_params(st.student, before));
    // teacher EMA of an unchanged student stays the initial copy
    REQUIRE(near_params(st.teacher, teacher_before, 1e-14));  // EMA of equal values only rounds
    REQUIRE(st.step == 1);
}

TEST_CASE("gradient reaches every mask token at ratio 0.4") {
    HUNetConfig model = tiny_model();
    TrainConfig tc;
    tc.epochs = 2;
    tc.warmup_epochs = 1;
    tc.batch_size = 1;
    tc.mask_ratio = 0.4;
    ViewConfig vc = tiny_view(model);
    auto scenes = tiny_scenes(1, 70);
    TrainState st = init_train_state(model, tc, vc, 1);
    ViewConfig v2 = vc;
    v2.mask_ratio = tc.mask_ratio;
    std::vector<ViewPair> batch = {build_view_pair_with_retries(scenes[0], v2, 4)};
    // make sure every level of both masks has at least one masked row
    for (int v = 0; v < 2; ++v)
        for (std::int32_t l = 0; l < model.levels; ++l) REQUIRE(!batch[0].masks[v].masked[static_cast<std::size_t>(l)].empty());
    train_step(st, batch);
    for (std::int32_t l = 0; l < model.levels; ++l) {
        const Tensor& g = st.student.grad("token" + std::to_string(l));
        double mag = 0.0;
        for (std::int64_t i = 0; i < g.numel(); ++i) mag += std::fabs(g[i]);
        REQUIRE(mag > 0.0);
    }
}

TEST_CASE("train_step without masked rows and without no_mask is degenerate") {
    HUNetConfig model = tiny_model();
    TrainConfig tc;
    tc.epochs = 2;
    tc.warmup_epochs = 1;
    tc.batch_size = 1;
    tc.mask_ratio = 0.0;
    ViewConfig vc = tiny_view(model);
    auto scenes = tiny_scenes(1, 80);
    TrainState st = init_train_state(model, tc, vc, 1);
    ViewConfig v2 = vc;
    v2.mask_ratio = 0.0;
    std::vector<ViewPair> batch = {build_view_pair_with_retries(scenes[0], v2, 4)};
    REQUIRE_THROWS_AS(train_step(st, batch), DegenerateBatchError);
}

TEST_CASE("no_mask training uses all matched voxels") {
    HUNetConfig model = tiny_model();
    TrainConfig tc;
    tc.epochs = 2;
    tc.warmup_epochs = 1;
    tc.batch_size = 1;
    tc.mask_ratio = 0.0;
    tc.no_mask = true;
    ViewConfig vc = tiny_view(model);
    auto scenes = tiny_scenes(1, 81);
    TrainState st = init_train_state(model, tc, vc, 1);
    ViewConfig v2 = vc;
    v2.mask_ratio = 0.0;
    std::vector<ViewPair> batch = {build_view_pair_with_retries(scenes[0], v2, 4)};
    StepMetrics m = train_step(st, batch);
    REQUIRE(m.matched_voxels > 0);
    REQUIRE(std::isfinite(m.loss));
}

TEST_CASE("pretrain is deterministic in the seed") {
    HUNetConfig model = tiny_model();
    TrainConfig tc;
    tc.epochs = 2;
    tc.warmup_epochs = 1;
    tc.batch_size = 2;
    tc.seed = 17;
    ViewConfig vc = tiny_view(model);
    auto scenes = tiny_scenes(3, 90);
    Checkpoint a = pretrain(scenes, model, tc, vc);
    Checkpoint b = pretrain(scenes, model, tc, vc);
    REQUIRE(same_params(a.sections.at("student"), b.sections.at("student")));
    REQUIRE(same_params(a.sections.at("teacher"), b.sections.at("teacher")));
    REQUIRE(a.step == b.step);
}

TEST_CASE("pretrain resume reproduces the uninterrupted run") {
    HUNetConfig model = tiny_model();
    TrainConfig tc;
    tc.epochs = 3;
    tc.warmup_epochs = 1;
    tc.batch_size = 2;
    tc.seed = 23;
    ViewConfig vc = tiny_view(model);
    auto scenes = tiny_scenes(3, 95);

    std::vector<std::string> full_lines;
    Checkpoint full = pretrain(scenes, model, tc, vc, {}, nullptr,
                               [&](std::int64_t, const std::string& line) { full_lines.push_back(line); });

    // interrupted run: full schedule, stopped after epoch 2
    Checkpoint half = pretrain(scenes, model, tc, vc, {}, nullptr, nullptr, 2);
    std::vector<std::string> resumed_lines;
    Checkpoint resumed = pretrain(scenes, model, tc, vc, {}, &half,
                                  [&](std::int64_t, const std::string& line) { resumed_lines.push_back(line); });

    REQUIRE(same_params(full.sections.at("student"), resumed.sections.at("student")));
    REQUIRE(same_params(full.sections.at("teacher"), resumed.sections.at("teacher")));
    REQUIRE(same_params(full.sections.at("adam_m"), resumed.sections.at("adam_m")));
    REQUIRE(full.step == resumed.step);
    REQUIRE(resumed_lines.size() == 1);
    REQUIRE(resumed_lines[0] == full_lines[2]);
}

TEST_CASE("checkpoint round-trips through disk and refuses mismatched configs") {
    HUNetConfig model = tiny_model();
    TrainConfig tc;
    tc.epochs = 2;
    tc.warmup_epochs = 1;
    tc.batch_size = 2;
    ViewConfig vc = tiny_view(model);
    auto scenes = tiny_scenes(2, 99);
    Checkpoint ckpt = pretrain(scenes, model, tc, vc);
    auto dir = std::filesystem::temp_directory_path() / "msm_train_tests";
    std::filesystem::create_directories(dir);
    const std::string path = (dir / "ck.msmc").string();
    save_checkpoint(ckpt, path);
    Checkpoint loaded = load_checkpoint(path);
    REQUIRE(loaded.config == model);
    REQUIRE(loaded.step == ckpt.step);
    REQUIRE(same_params(loaded.sections.at("student"), ckpt.sections.at("student")));

    HUNetConfig other = model;
    other.window = 8;
    REQUIRE_THROWS_AS(load_checkpoint_expecting(path, other), CheckpointError);
}
