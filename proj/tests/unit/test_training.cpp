#include <gtest/gtest.h>

#include <cmath>

#include "hybrid/train.hpp"

using namespace hyb;

namespace {

// 32 px images keep the loops fast; everything else is the default recipe.
struct Tiny {
  Dataset ds;
  Split split;
  ModelConfig mc;
  TrainConfig tc;

  explicit Tiny(std::size_t count = 48) {
    SynthSpec s;
    s.count = count;
    s.image_size = 32;
    ds = synth_dataset(s);
    mc.backbone.input_size = 32;
    mc.backbone.feature_dim = 8;
    mc.window_auto = false;
    mc.attention.window_size = 3;
    tc.epochs = 2;
    tc.lr0 = 2e-3;
    tc.momentum = 0.9;
    split = split_dataset(ds, 0.2, 0.2, tc.seed);
  }
};

}  // namespace

TEST(Cosine, Endpoints) {
  EXPECT_DOUBLE_EQ(cosine_lr(0, 100, 1e-4), 1e-4);
  EXPECT_EQ(cosine_lr(100, 100, 1e-4), 0.0);
  EXPECT_NEAR(cosine_lr(50, 100, 1e-4), 5e-5, 1e-18);
  EXPECT_THROW(cosine_lr(101, 100, 1e-4), ConfigError);
  EXPECT_THROW(cosine_lr(-1, 100, 1e-4), ConfigError);
  EXPECT_THROW(cosine_lr(0, 0, 1e-4), ConfigError);
}

TEST(Cosine, MonotoneAndSymmetric) {
  for (long T : {1L, 7L, 200L}) {
    double prev = cosine_lr(0, T, 0.3);
    for (long t = 0; t <= T; ++t) {
      const double v = cosine_lr(t, T, 0.3);
      EXPECT_LE(v, prev);
      EXPECT_GE(v, 0.0);
      EXPECT_NEAR(v + cosine_lr(T - t, T, 0.3), 0.3, 1e-12);
      prev = v;
    }
  }
}

TEST(Sgd, ClosedFormDecay) {
  ParamStore<double> store;
  auto p = store.constant("p", {1, 1, 1, 1}, 1.0);
  store.zero_grad();
  Sgd<double> opt(5e-4);
  opt.step(store, 1e-4);
  EXPECT_DOUBLE_EQ(p.data()[0], 1.0 - 5e-8);
}

TEST(Sgd, ZeroLrLeavesParameters) {
  ParamStore<float> store;
  Rng rng(3);
  auto p = store.he_uniform("w", {1, 2, 3, 3}, 18, rng);
  const std::vector<float> before(p.data().begin(), p.data().end());
  sum(mul(p, p)).backward();
  Sgd<float> opt(5e-4, 0.9);
  opt.step(store, 0.0);
  EXPECT_EQ(std::vector<float>(p.data().begin(), p.data().end()), before);
}

TEST(Sgd, MissingGradientRejected) {
  ParamStore<double> store;
  store.constant("p", {1, 1, 1, 2}, 1.0);
  Sgd<double> opt(0.0);
  EXPECT_THROW(opt.step(store, 0.1), NumericError);
  EXPECT_THROW(Sgd<double>(-1.0), ConfigError);
  EXPECT_THROW(Sgd<double>(0.0, 1.0), ConfigError);
}

// 0.5 * sum a_i (p_i - c_i)^2 with coupled decay wd has its minimum at
// a_i c_i / (a_i + wd).
TEST(Sgd, QuadraticBowlConverges) {
  const std::vector<double> a{1.0, 3.0, 0.5, 2.0}, c{2.0, -1.0, 0.25, 4.0};
  const double wd = 5e-4;
  ParamStore<double> store;
  auto p = store.zeros("p", {1, 1, 1, 4});
  auto A = Tensor<double>::from_data({1, 1, 1, 4}, a);
  auto Cn = Tensor<double>::from_data({1, 1, 1, 4}, {-2.0, 1.0, -0.25, -4.0});
  Sgd<double> opt(wd);
  std::size_t steps = 0;
  auto err = [&] {
    double e = 0;
    for (std::size_t i = 0; i < 4; ++i) e = std::max(e, std::fabs(p.data()[i] - a[i] * c[i] / (a[i] + wd)));
    return e;
  };
  while (err() > 1e-6 && steps < 10000) {
    store.zero_grad();
    auto d = add(p, Cn);
    scale(sum(mul(A, mul(d, d))), 0.5).backward();
    opt.step(store, 0.1);
    ++steps;
  }
  EXPECT_LE(err(), 1e-6);
  EXPECT_LT(steps, 10000u);
}

TEST(Sgd, MomentumMatchesHeavyBall) {
  ParamStore<double> store;
  auto p = store.constant("p", {1, 1, 1, 1}, 1.0);
  Sgd<double> opt(0.0, 0.5);
  double x = 1.0, v = 0.0;
  for (int i = 0; i < 5; ++i) {
    store.zero_grad();
    scale(mul(p, p), 0.5).backward();  // g = p
    opt.step(store, 0.1);
    v = 0.5 * v + x;
    x -= 0.1 * v;
    EXPECT_DOUBLE_EQ(p.data()[0], x);
  }
}

TEST(Sgd, ClipScalesJointNorm) {
  ParamStore<double> store;
  auto a = store.constant("a", {1, 1, 1, 2}, 1.0);
  auto b = store.constant("b", {1, 1, 1, 1}, 2.0);
  // gradients 6a and 4b: (6, 6, 8), norm sqrt(136)
  add(sum(scale(mul(a, a), 3.0)), sum(scale(mul(b, b), 2.0))).backward();
  EXPECT_NEAR(clip_grad_norm(store, 0.0), std::sqrt(136.0), 1e-12);
  EXPECT_EQ(a.grad()[0], 6.0);  // 0 leaves gradients alone
  EXPECT_NEAR(clip_grad_norm(store, 2.0), std::sqrt(136.0), 1e-12);
  const double f = 2.0 / std::sqrt(136.0);
  EXPECT_NEAR(a.grad()[1], 6.0 * f, 1e-12);
  EXPECT_NEAR(b.grad()[0], 8.0 * f, 1e-12);
  EXPECT_NEAR(clip_grad_norm(store, 5.0), 2.0, 1e-12);
  EXPECT_NEAR(b.grad()[0], 8.0 * f, 1e-12);  // already under the cap
}

TEST(TrainConfig, Validation) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  c.val_fraction = 0.6;
  c.test_fraction = 0.5;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.lambda = -1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.epochs = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.clip_norm = -1;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Fit, ZeroLearningRateKeepsInitialization) {
  Tiny t;
  t.tc.lr0 = 0.0;
  t.tc.epochs = 1;
  HybridModel<float> model(t.mc);
  const Checkpoint init = capture(model);
  const double init_acc = evaluate(model, t.ds, t.split.val).accuracy();
  const auto r = fit(model, t.ds, t.split, t.tc);
  ASSERT_EQ(r.history.size(), 1u);
  EXPECT_DOUBLE_EQ(r.history[0].val_accuracy, init_acc);
  for (std::size_t i = 0; i < init.params.size(); ++i) EXPECT_EQ(r.best.params[i].data, init.params[i].data) << init.params[i].name;
}

TEST(Fit, EmptySplitsAndClassMismatchRejected) {
  Tiny t;
  HybridModel<float> model(t.mc);
  Split s = t.split;
  s.val.clear();
  EXPECT_THROW(fit(model, t.ds, s, t.tc), ConfigError);
  ModelConfig four = t.mc;
  four.classes = 4;
  HybridModel<float> m4(four);
  EXPECT_THROW(fit(m4, t.ds, t.split, t.tc), ConfigError);
}

TEST(Fit, OneStepDescendsOnFixedBatch) {
  Tiny t(24);
  std::vector<const Image*> imgs;
  std::vector<std::size_t> labels;
  for (std::size_t i = 0; i < 8; ++i) {
    imgs.push_back(&t.ds.samples[i].image);
    labels.push_back(t.ds.samples[i].label);
  }
  const auto x = to_batch<float>(imgs);
  int decreased = 0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    ModelConfig mc = t.mc;
    mc.backbone.seed = seed;
    HybridModel<float> model(mc);
    model.params().zero_grad();
    const auto l0 = total_loss(model.forward(x), labels, 1e-3);
    l0.total.backward();
    Sgd<float> opt(5e-4);
    opt.step(model.params(), 1e-3);
    NoGradGuard ng;
    const auto l1 = total_loss(model.forward(x), labels, 1e-3);
    decreased += l1.total.item() < l0.total.item();
  }
  EXPECT_GE(decreased, 19);
}

TEST(Fit, HistoryBookkeepingAndDeterminism) {
  Tiny t;
  t.tc.lambda = 1e-3;
  HybridModel<float> m1(t.mc), m2(t.mc);
  const auto r1 = fit(m1, t.ds, t.split, t.tc);
  const auto r2 = fit(m2, t.ds, t.split, t.tc);
  ASSERT_EQ(r1.history.size(), 2u);
  for (const auto& e : r1.history) {
    EXPECT_EQ(e.total, e.ce + t.tc.lambda * e.l1);
    EXPECT_GE(e.l1, 0.0);
    EXPECT_EQ(e.lr, cosine_lr(static_cast<long>(e.epoch - 1), 2, t.tc.lr0));
  }
  EXPECT_EQ(format_history_csv(r1.history), format_history_csv(r2.history));
  for (std::size_t i = 0; i < r1.best.params.size(); ++i) EXPECT_EQ(r1.best.params[i].data, r2.best.params[i].data);
  EXPECT_EQ(r1.best.rng_digest, r2.best.rng_digest);
}

TEST(Fit, BestCheckpointHasBestValidationAccuracy) {
  Tiny t;
  t.tc.epochs = 3;
  HybridModel<float> model(t.mc);
  const auto r = fit(model, t.ds, t.split, t.tc);
  double best = -1;
  std::size_t at = 0;
  for (const auto& e : r.history)
    if (e.val_accuracy > best) best = e.val_accuracy, at = e.epoch;
  EXPECT_EQ(r.best.epoch, at);
  EXPECT_DOUBLE_EQ(r.best.val_accuracy, best);
  HybridModel<float> fresh(t.mc);
  restore(fresh, r.best);
  EXPECT_DOUBLE_EQ(evaluate(fresh, t.ds, t.split.val).accuracy(), best);
  EXPECT_EQ(r.best.train_mean, channel_means(t.ds, t.split.train));
}

TEST(Fit, SparsityShrinksEvidence) {
  Tiny t;
  t.tc.epochs = 3;
  HybridModel<float> dense(t.mc), sparse(t.mc);
  const auto rd = fit(dense, t.ds, t.split, t.tc);
  t.tc.lambda = 1e-3;
  const auto rs = fit(sparse, t.ds, t.split, t.tc);
  EXPECT_LT(rs.history.back().val_mean_abs_evidence, rd.history.back().val_mean_abs_evidence);
}

TEST(Fit, HistoryCsvLayout) {
  EpochRecord e;
  e.epoch = 1;
  e.lr = 0.5;
  e.ce = 1.25;
  const auto s = format_history_csv({e});
  EXPECT_EQ(s.substr(0, s.find('\n')), "epoch,lr,ce,l1,total,val_accuracy,val_mean_abs_evidence");
  EXPECT_EQ(std::count(s.begin(), s.end(), '\n'), 2);
}

TEST(Augment, RngKeyIgnoresVisitOrder) {
  Rng a = augment_rng(1, "img00001.ppm", 3), b = augment_rng(1, "img00001.ppm", 3);
  EXPECT_EQ(a.uniform(), b.uniform());
  Rng c = augment_rng(1, "img00001.ppm", 4);
  Rng d = augment_rng(1, "img00001.ppm", 3);
  EXPECT_NE(c.uniform(), d.uniform());
}
