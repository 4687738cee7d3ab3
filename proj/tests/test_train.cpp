#include <gtest/gtest.h>

#include <cstdlib>
#include <sstream>

#include "oracles.hpp"

using namespace sipe;

namespace {

LocMaps stack(Tape& t, Tensor v, MapKind kind) { return {t.constant(std::move(v)), kind}; }

}  // namespace

TEST(ClsLoss, WorkedExamples) {
    Tape t;
    EXPECT_NEAR(cls_loss(t.constant(Tensor({3})), Tensor({3}, 1.0)).value().item(), std::log(2.0), 1e-15);
    EXPECT_NEAR(cls_loss(t.constant(Tensor::vector({1, -1})), Tensor::vector({1, 0})).value().item(), 0.31326, 1e-5);
    // independent evaluation of the same value
    const double expect = -std::log(1 / (1 + std::exp(-1.0)));
    EXPECT_NEAR(cls_loss(t.constant(Tensor::vector({1, -1})), Tensor::vector({1, 0})).value().item(), expect, 1e-15);
    EXPECT_LT(cls_loss(t.constant(Tensor::vector({800})), Tensor::vector({1})).value().item(), 1e-300);
    EXPECT_NEAR(cls_loss(t.constant(Tensor::vector({-800})), Tensor::vector({1})).value().item(), 800, 1e-9);
    EXPECT_THROW(cls_loss(t.constant(Tensor({2})), Tensor({3})), std::invalid_argument);
}

TEST(ClsLoss, GradientIsSigmoidMinusLabelOverK) {
    Tape t;
    Var x = t.leaf(Tensor::vector({0.3, -2.0}));
    auto g = t.grad(cls_loss(x, Tensor::vector({1, 0})), std::vector<Var>{x});
    EXPECT_NEAR(g[0][0], (1 / (1 + std::exp(-0.3)) - 1) / 2, 1e-15);
    EXPECT_NEAR(g[0][1], (1 / (1 + std::exp(2.0))) / 2, 1e-15);
}

TEST(GscLoss, WorkedExamples) {
    Tape t;
    Tensor y = Tensor::vector({1});
    SplitMix64 rng(1);
    Tensor m = oracle::random_tensor(rng, {2, 3, 3}, 0, 1);
    EXPECT_EQ(gsc_loss(stack(t, m, MapKind::GeneralCam), stack(t, m, MapKind::ImageSpecific), y).value().item(), 0.0);
    EXPECT_EQ(gsc_loss(stack(t, Tensor({2, 2, 2}, 1.0), MapKind::GeneralCam),
                       stack(t, Tensor({2, 2, 2}), MapKind::ImageSpecific), y)
                  .value()
                  .item(),
              1.0);
    Tensor a({2, 2, 2}, {0.1, 0.2, 0.3, 0.4, 1.0, 0.0, 0.5, 0.25});
    Tensor b({2, 2, 2}, {0.0, 0.4, 0.3, 0.1, 0.5, 0.5, 0.5, 1.0});
    const double hand = (0.1 + 0.2 + 0.0 + 0.3 + 0.5 + 0.5 + 0.0 + 0.75) / 8;
    EXPECT_NEAR(gsc_loss(stack(t, a, MapKind::GeneralCam), stack(t, b, MapKind::ImageSpecific), y).value().item(), hand,
                1e-15);
}

TEST(GscLoss, IgnoresAbsentClassChannels) {
    Tape t;
    Tensor a({3, 1, 2}, {0.2, 0.2, 0.9, 0.9, 0.5, 0.5});
    Tensor b({3, 1, 2}, {0.2, 0.2, 0.0, 0.0, 0.25, 0.75});
    double v = gsc_loss(stack(t, a, MapKind::GeneralCam), stack(t, b, MapKind::ImageSpecific), Tensor::vector({0, 1}))
                   .value()
                   .item();
    EXPECT_EQ(v, 0.125);
}

TEST(GscLoss, SymmetricAndZeroOnlyWhenEqual) {
    SplitMix64 rng(2);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t K = 1 + rng.below(3);
        Tensor y = oracle::random_labels(rng, K);
        Tensor a = oracle::random_tensor(rng, {K + 1, 3, 2}, 0, 1);
        Tensor b = oracle::random_tensor(rng, {K + 1, 3, 2}, 0, 1);
        Tape t;
        double ab = gsc_loss(stack(t, a, MapKind::GeneralCam), stack(t, b, MapKind::ImageSpecific), y).value().item();
        double ba = gsc_loss(stack(t, b, MapKind::ImageSpecific), stack(t, a, MapKind::GeneralCam), y).value().item();
        ASSERT_EQ(ab, ba);
        ASSERT_GT(ab, 0.0);
        Tensor c = a;
        c[rng.below(6)] += 0.01;  // background channel, always compared
        ASSERT_GT(gsc_loss(stack(t, a, MapKind::GeneralCam), stack(t, c, MapKind::ImageSpecific), y).value().item(), 0.0);
    }
}

TEST(GscLoss, GradientReachesBothStacks) {
    Tape t;
    Var a = t.leaf(Tensor({2, 1, 2}, {0.5, 0.2, 0.9, 0.1}));
    Var b = t.leaf(Tensor({2, 1, 2}, {0.25, 0.4, 0.3, 0.6}));
    Var l = gsc_loss({a, MapKind::GeneralCam}, {b, MapKind::ImageSpecific}, Tensor::vector({1}));
    auto g = t.grad(l, std::vector<Var>{a, b});
    for (std::size_t i = 0; i < 4; ++i) {
        EXPECT_EQ(std::abs(g[0][i]), 0.25);
        EXPECT_EQ(g[0][i], -g[1][i]);
    }
}

TEST(GscLoss, RejectsSameKind) {
    Tape t;
    EXPECT_THROW(gsc_loss(stack(t, Tensor({2, 1, 1}), MapKind::GeneralCam), stack(t, Tensor({2, 1, 1}), MapKind::GeneralCam),
                          Tensor::vector({1})),
                 std::invalid_argument);
}

TEST(TotalLoss, ZeroImageIsFiniteAndClsOnlyIsExact) {
    BackboneParams p = init_backbone(0, BackboneConfig{});
    Tensor image({3, 16, 16});
    Tensor y = Tensor::vector({1, 0, 1, 0, 0});
    LossBreakdown full = total_loss(p, image, y, ModelOptions{});
    EXPECT_TRUE(std::isfinite(full.total));
    EXPECT_TRUE(std::isfinite(full.gsc));
    ModelOptions no_gsc;
    no_gsc.use_gsc = false;
    SplitMix64 rng(3);
    Tensor img = oracle::random_tensor(rng, {3, 16, 16});
    LossBreakdown a = total_loss(p, img, y, no_gsc);
    Tape t;
    BackboneVars vars = place(t, p, false);
    double cls = cls_loss(general_cam(forward(t.constant(img), vars).semantic, vars.classifier(), y).logits, y)
                     .value()
                     .item();
    EXPECT_EQ(a.total, cls);
    EXPECT_EQ(a.gsc, 0.0);
    LossBreakdown b = total_loss(p, img, y, ModelOptions{});
    EXPECT_EQ(b.cls, a.cls);
    EXPECT_EQ(b.total, b.cls + b.gsc);
}

TEST(Optimizer, StepExamples) {
    Tensor p = Tensor::vector({1.0}), v = Tensor::vector({0.0});
    sgd_update(p, Tensor::vector({1.0}), v, 0.1, 0.0, 0.0);
    EXPECT_NEAR(p[0], 0.9, 1e-15);

    Tensor q = Tensor::vector({2.0, -4.0}), w({2});
    sgd_update(q, Tensor({2}), w, 0.1, 0.0, 1e-4);
    EXPECT_EQ(q[0], 2.0 - 0.1 * (1e-4 * 2.0));
    EXPECT_EQ(q[1], -4.0 - 0.1 * (1e-4 * -4.0));

    Tensor r = Tensor::vector({0.0}), u = Tensor::vector({0.0});
    sgd_update(r, Tensor::vector({1.0}), u, 1.0, 0.9, 0.0);
    sgd_update(r, Tensor::vector({1.0}), u, 1.0, 0.9, 0.0);
    EXPECT_NEAR(u[0], 1.9, 1e-15);
    EXPECT_NEAR(r[0], -2.9, 1e-15);
}

TEST(Optimizer, PolySchedule) {
    EXPECT_EQ(poly_lr(0.1, 0, 100, 0.9), 0.1);
    EXPECT_EQ(poly_lr(0.1, 100, 100, 0.9), 0.0);
    EXPECT_NEAR(poly_lr(0.1, 50, 100, 0.9), 0.1 * std::pow(0.5, 0.9), 1e-15);
    for (std::size_t t = 1; t <= 100; ++t) ASSERT_LE(poly_lr(1, t, 100, 0.9), poly_lr(1, t - 1, 100, 0.9));
}

TEST(Optimizer, NewLayersUseTheLargerRate) {
    BackboneParams p = init_backbone(0, toy_backbone_config());
    BackboneParams before = p;
    std::vector<Tensor> grads;
    for (const Tensor* t : p.tensors()) grads.emplace_back(t->shape(), 1.0);
    TrainConfig cfg;
    cfg.momentum = 0;
    cfg.weight_decay = 0;
    OptimState state;
    sgd_step(p, grads, state, cfg, 10);
    EXPECT_EQ(state.step, 1u);
    EXPECT_EQ(p.stage_weight[0][0], before.stage_weight[0][0] - cfg.lr_backbone);
    EXPECT_EQ(p.lateral_weight[0][0], before.lateral_weight[0][0] - cfg.lr_new);
    EXPECT_EQ(p.classifier[0], before.classifier[0] - cfg.lr_new);
}

TEST(TrainConfig, Validation) {
    TrainConfig c;
    EXPECT_NO_THROW(c.validate());
    c.epochs = 0;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = TrainConfig{};
    c.lr_new = 0;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = TrainConfig{};
    c.poly_power = 0;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = TrainConfig{};
    c.warmup_epochs = c.epochs + 1;
    EXPECT_THROW(c.validate(), std::invalid_argument);
}

// Sign sanity: the objective falls on a fixed batch.
TEST(Training, LossDecreasesOverFiftySteps) {
    std::vector<Sample> batch = generate_dataset(4, 21);
    double first = 0, last = 0;
    for (std::uint64_t seed : {0, 1, 2}) {
        TrainConfig cfg;
        cfg.epochs = 50;
        cfg.batch_size = 4;
        cfg.warmup_epochs = 0;
        cfg.flip = false;
        cfg.seed = seed;
        std::vector<double> totals;
        TrainHooks hooks;
        hooks.on_step = [&](const StepRecord& r) { totals.push_back(r.total); };
        train(batch, BackboneConfig{}, cfg, ModelOptions{}, hooks);
        ASSERT_EQ(totals.size(), 50u);
        for (int i = 0; i < 5; ++i) {
            first += totals[i];
            last += totals[45 + i];
        }
    }
    EXPECT_LT(last, 0.8 * first);
}

TEST(Training, DeterministicAndThreadIndependent) {
    std::vector<Sample> data = generate_dataset(6, 5);
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.warmup_epochs = 1;
    cfg.batch_size = 3;
    cfg.seed = 7;
    auto bytes = [&](const char* threads) {
        setenv("SIPE_THREADS", threads, 1);
        std::ostringstream log;
        TrainHooks hooks;
        hooks.on_step = [&](const StepRecord& r) { log << format_step(r) << "\n"; };
        BackboneParams p = train(data, BackboneConfig{}, cfg, ModelOptions{}, hooks);
        std::ostringstream os;
        write_checkpoint(os, {p, {}});
        return os.str() + log.str();
    };
    const std::string a = bytes("1"), b = bytes("1"), c = bytes("3");
    unsetenv("SIPE_THREADS");
    EXPECT_TRUE(a == b);
    EXPECT_TRUE(a == c);
    cfg.seed = 8;
    EXPECT_FALSE(a == bytes("1"));
}

TEST(GradientCheck, FullObjectiveOnToyModel) {
    for (std::uint64_t seed : {0, 1, 2}) {
        ToyProblem toy = make_toy_problem(seed);
        GradCheckReport r = gradient_check(toy.params, toy.image, toy.labels, ModelOptions{});
        EXPECT_LT(r.max_rel_error(), 1e-4) << "seed " << seed;
        EXPECT_EQ(r.groups.size(), 13u);
    }
}

TEST(GradientCheck, DetectsAFlippedSign) {
    ToyProblem toy = make_toy_problem(0);
    GradCheckReport r = gradient_check(toy.params, toy.image, toy.labels, ModelOptions{}, 1e-5,
                                       [](std::vector<Tensor>& g) {
                                           for (auto& v : g[8].mutable_data()) v = -v;
                                       });
    EXPECT_GT(r.max_rel_error(), 0.5);
}
