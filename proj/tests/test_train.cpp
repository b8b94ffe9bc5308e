#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>
#include <set>

#include "gaitformer/train.hpp"

using namespace gaitformer;
using Tensor = ad::Tensor<double>;

namespace {

// Direct evaluation of the supervised contrastive objective with no fused
// shortcuts: explicit normalization, dot products and log-probabilities.
double naive_supcon(const std::vector<std::vector<double>>& z, const std::vector<std::size_t>& y, double tau) {
  const std::size_t M = z.size();
  std::vector<std::vector<double>> u = z;
  for (auto& r : u) {
    double n = 0.0;
    for (double v : r) n += v * v;
    for (auto& v : r) v /= std::sqrt(n);
  }
  auto dot = [&](std::size_t a, std::size_t b) {
    double s = 0.0;
    for (std::size_t k = 0; k < u[a].size(); ++k) s += u[a][k] * u[b][k];
    return s;
  };
  double total = 0.0;
  for (std::size_t i = 0; i < M; ++i) {
    double denom = 0.0;
    for (std::size_t a = 0; a < M; ++a)
      if (a != i) denom += std::exp(dot(i, a) / tau);
    double acc = 0.0;
    int np = 0;
    for (std::size_t p = 0; p < M; ++p) {
      if (p == i || y[p] != y[i]) continue;
      acc += std::log(std::exp(dot(i, p) / tau) / denom);
      ++np;
    }
    total += -acc / np;
  }
  return total / static_cast<double>(M);
}

Tensor random_matrix(std::size_t r, std::size_t c, std::uint64_t seed, bool grad = true) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> v(r * c);
  for (auto& x : v) x = n(rng);
  return Tensor::from({r, c}, std::move(v), grad);
}

TrainingSet random_set(std::size_t n, std::size_t L, std::uint64_t seed, bool with_attrs = true) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  TrainingSet set;
  for (std::size_t i = 0; i < n; ++i) {
    SkeletonSequence s;
    s.frames.resize(L);
    const double phase = g(rng);
    for (std::size_t t = 0; t < L; ++t)
      for (std::size_t j = 0; j < kNumJoints; ++j)
        s.frames[t].joints[j] = {std::sin(0.3 * t + phase + j), std::cos(0.2 * t * (1 + i % 3) + j), 1.0};
    set.sequences.push_back(std::move(s));
    set.labels.push_back(i);
    if (with_attrs) {
      std::vector<double> a(42);
      for (auto& v : a) v = u(rng);
      set.attributes.push_back(std::move(a));
    }
    set.gender.push_back(static_cast<int>(i % 2));
  }
  return set;
}

ModelConfig tiny_config() {
  ModelConfig c;
  c.num_layers = 2;
  c.d_model = 16;
  c.num_heads = 2;
  c.d_ff = 16;
  c.d_proj = 8;
  c.max_T = 8;
  return c;
}

AugmentationParams tiny_aug() {
  AugmentationParams a;
  a.crop_length = 8;
  a.pace_min = a.pace_max = 1.0;
  return a;
}

}  // namespace

TEST(SupCon, OrthogonalHandExample) {
  // Views e1, e2, e1, e2 with labels 0, 1, 0, 1 at tau = 1: every anchor sees
  // similarities {0, 1, 0} with the 1 being its positive.
  auto z = Tensor::from({4, 2}, {1, 0, 0, 1, 1, 0, 0, 1});
  std::vector<std::size_t> y{0, 1, 0, 1};
  EXPECT_NEAR(supcon_loss(z, y, 1.0).item(), std::log(2.0 + std::exp(1.0)) - 1.0, 1e-12);
}

TEST(SupCon, MatchesNaiveEvaluation) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 2 + trial % 5;
    auto z = random_matrix(2 * n, 6, 100 + trial);
    std::vector<std::size_t> y(2 * n);
    for (std::size_t i = 0; i < n; ++i) y[i] = y[i + n] = rng() % n;
    std::vector<std::vector<double>> rows(2 * n, std::vector<double>(6));
    for (std::size_t i = 0; i < 2 * n; ++i)
      for (std::size_t k = 0; k < 6; ++k) rows[i][k] = z.data()[i * 6 + k];
    const double tau = trial % 2 ? 0.5 : 0.1;
    EXPECT_NEAR(supcon_loss(z, y, tau).item(), naive_supcon(rows, y, tau), 1e-10);
  }
}

TEST(SupCon, StableAtSmallTemperature) {
  auto z = random_matrix(8, 4, 1);
  std::vector<std::size_t> y{0, 1, 2, 3, 0, 1, 2, 3};
  const double l = supcon_loss(z, y, 0.001).item();
  EXPECT_TRUE(std::isfinite(l));
  EXPECT_GE(l, 0.0);
}

TEST(SupCon, GradCheck) {
  auto z = random_matrix(8, 5, 7);
  std::vector<std::size_t> y{0, 1, 2, 1, 0, 1, 2, 1};
  for (double tau : {1.0, 0.1}) {
    auto res = ad::grad_check([&] { return supcon_loss(z, y, tau); }, {{"z", z}});
    EXPECT_LT(res.max_relative_error, 1e-6) << "tau " << tau;
  }
}

TEST(SupCon, AnchorWithoutPositiveThrows) {
  auto z = random_matrix(3, 4, 1);
  std::vector<std::size_t> y{0, 0, 1};
  EXPECT_THROW(supcon_loss(z, y, 0.1), ShapeError);
}

TEST(Bce, ValueAndGradientAtZeroLogits) {
  auto l = Tensor::zeros({2, 3}, true);
  auto y = Tensor::from({2, 3}, {0, 1, 0.25, 0.5, 0.75, 1});
  auto loss = bce_soft(l, y);
  EXPECT_NEAR(loss.item(), std::log(2.0), 1e-12);
  loss.backward();
  for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(l.grad()[i], (0.5 - y.data()[i]) / 6.0, 1e-15);
}

TEST(Bce, StableForLargeLogits) {
  auto l = Tensor::from({2}, {800.0, -800.0}, true);
  auto y = Tensor::from({2}, {0.0, 1.0});
  EXPECT_NEAR(bce_soft(l, y).item(), 800.0, 1e-9);
}

TEST(Bce, GradCheck) {
  auto l = random_matrix(4, 6, 9);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<double> t(24);
  for (auto& v : t) v = u(rng);
  auto y = Tensor::from({4, 6}, t);
  auto res = ad::grad_check([&] { return bce_soft(l, y); }, {{"logits", l}});
  EXPECT_LT(res.max_relative_error, 1e-6);
}

TEST(Bce, RejectsTargetsOutsideUnitInterval) {
  EXPECT_THROW(bce_soft(Tensor::zeros({2}), Tensor::from({2}, {0.5, 1.5})), ShapeError);
}

TEST(CombinedLoss, WeightsAppearanceTerm) {
  EXPECT_DOUBLE_EQ(combined_loss(2.0, 3.0, 0.5), 3.5);
  auto a = Tensor::scalar(2.0), b = Tensor::scalar(3.0);
  EXPECT_DOUBLE_EQ(combined_loss(a, b, 0.5).item(), 3.5);
}

TEST(Schedule, TriangularCycle) {
  TrainConfig c;
  c.lr_min = 1e-4;
  c.lr_max = 1e-3;
  c.cycle_epochs = 20;
  EXPECT_DOUBLE_EQ(cyclical_lr(0, 10, c), 1e-4);
  EXPECT_NEAR(cyclical_lr(100, 10, c), 1e-3, 1e-15);
  EXPECT_NEAR(cyclical_lr(50, 10, c), 5.5e-4, 1e-15);
  EXPECT_NEAR(cyclical_lr(200, 10, c), 1e-4, 1e-15);
  EXPECT_NEAR(cyclical_lr(300, 10, c), 1e-3, 1e-15);
}

TEST(Schedule, CycleStaysInRange) {
  TrainConfig c;
  for (std::size_t s = 0; s < 5000; s += 7) {
    const double lr = cyclical_lr(s, 13, c);
    EXPECT_GE(lr, c.lr_min - 1e-18);
    EXPECT_LE(lr, c.lr_max + 1e-18);
  }
}

TEST(Schedule, LinearDecay) {
  EXPECT_DOUBLE_EQ(linear_decay_lr(0, 200, 1e-4), 1e-4);
  EXPECT_DOUBLE_EQ(linear_decay_lr(100, 200, 1e-4), 5e-5);
  EXPECT_DOUBLE_EQ(linear_decay_lr(200, 200, 1e-4), 0.0);
}

TEST(Schedule, LayerwiseDecay) {
  auto r = llrd_rates(1.0, 0.5, 4);
  ASSERT_EQ(r.size(), 4u);
  EXPECT_DOUBLE_EQ(r[0], 1.0);
  EXPECT_DOUBLE_EQ(r[1], 0.5);
  EXPECT_DOUBLE_EQ(r[3], 0.125);
  EXPECT_DOUBLE_EQ(llrd_multiplier(5, 4, 0.5), 1.0);
  EXPECT_DOUBLE_EQ(llrd_multiplier(4, 4, 0.5), 1.0);
  EXPECT_DOUBLE_EQ(llrd_multiplier(1, 4, 0.5), 0.125);
  EXPECT_DOUBLE_EQ(llrd_multiplier(0, 4, 0.5), 0.0625);
  EXPECT_THROW(llrd_rates(1.0, 1.5, 2), ConfigError);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  auto w = Tensor::from({3}, {1.0, -2.0, 0.5}, true);
  Adam<double> opt({w});
  ad::sum(ad::mul(w, Tensor::from({3}, {3.0, -0.1, 50.0}))).backward();
  opt.step(0.01);
  EXPECT_NEAR(w.data()[0], 0.99, 1e-9);
  EXPECT_NEAR(w.data()[1], -1.99, 1e-9);
  EXPECT_NEAR(w.data()[2], 0.49, 1e-9);
}

TEST(Adam, MinimizesQuadratic) {
  auto w = Tensor::from({2}, {3.0, -4.0}, true);
  Adam<double> opt({w});
  for (int i = 0; i < 2000; ++i) {
    opt.zero_grad();
    ad::sum(ad::mul(w, w)).backward();
    opt.step(0.05);
  }
  EXPECT_NEAR(w.data()[0], 0.0, 1e-3);
  EXPECT_NEAR(w.data()[1], 0.0, 1e-3);
}

TEST(TwoView, PairsShareLabels) {
  auto set = random_set(10, 12, 1);
  Rng rng(4);
  auto batch = two_view_batch<double>(set, 4, tiny_aug(), rng);
  EXPECT_EQ(batch.views.shape(), (ad::Shape{8, 8, kFlatDim}));
  ASSERT_EQ(batch.labels.size(), 8u);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(batch.labels[i], batch.labels[i + 4]);
  std::set<std::size_t> distinct(batch.labels.begin(), batch.labels.begin() + 4);
  EXPECT_EQ(distinct.size(), 4u);
  EXPECT_EQ(batch.attributes.shape(), (ad::Shape{8, 42}));
}

TEST(TwoView, SmallDatasetThrows) {
  auto set = random_set(3, 12, 1);
  Rng rng(4);
  EXPECT_THROW(two_view_batch<double>(set, 4, tiny_aug(), rng), DataError);
}

TEST(Pretrain, ContrastiveLossDecreases) {
  auto set = random_set(8, 8, 2, false);
  GaitFormer<double> model(tiny_config(), 1);
  TrainConfig c;
  c.batch_size = 8;
  c.tau = 0.1;
  c.total_epochs = 60;
  c.cycle_epochs = 20;
  c.lr_max = 3e-3;
  auto aug = tiny_aug();
  aug.flip_probability = 0.0;
  auto logs = pretrain(model, set, Regime::kContrastive, c, aug);
  ASSERT_EQ(logs.size(), 60u);
  double first = 0.0, last = 0.0;
  for (std::size_t e = 0; e < 10; ++e) {
    first += logs[e].loss_total;
    last += logs[50 + e].loss_total;
  }
  EXPECT_LT(last, 0.5 * first);
  EXPECT_EQ(logs.back().loss_appearance, 0.0);
}

TEST(Pretrain, MultitaskLogsBothTerms) {
  auto set = random_set(8, 16, 2);
  GaitFormer<double> model(tiny_config(), 1);
  TrainConfig c;
  c.batch_size = 4;
  c.tau = 0.1;
  c.total_epochs = 2;
  auto logs = pretrain(model, set, Regime::kMultitask, c, tiny_aug());
  ASSERT_EQ(logs.size(), 2u);
  for (const auto& l : logs) {
    EXPECT_GT(l.loss_supcon, 0.0);
    EXPECT_GT(l.loss_appearance, 0.0);
    EXPECT_NEAR(l.loss_total, l.loss_supcon + 0.5 * l.loss_appearance, 1e-9);
  }
}

TEST(Pretrain, AttributeRegimeNeedsAttributes) {
  auto set = random_set(8, 16, 2, false);
  GaitFormer<double> model(tiny_config(), 1);
  TrainConfig c;
  c.batch_size = 4;
  EXPECT_THROW(pretrain(model, set, Regime::kAttributes, c, tiny_aug()), DataError);
}

TEST(Pretrain, NonFiniteLossAborts) {
  auto set = random_set(4, 16, 2);
  set.sequences[1].frames[3].joints[2].x = std::numeric_limits<double>::quiet_NaN();
  auto aug = tiny_aug();
  aug.crop_length = 16;
  auto cfg = tiny_config();
  cfg.max_T = 16;
  GaitFormer<double> model(cfg, 1);
  TrainConfig c;
  c.batch_size = 4;
  c.total_epochs = 1;
  EXPECT_THROW(pretrain(model, set, Regime::kMultitask, c, aug), NumericError);
}

TEST(Finetune, GenderAddsHeadAndTrains) {
  auto set = random_set(8, 16, 3, false);
  GaitFormer<double> model(tiny_config(), 1);
  TrainConfig c;
  c.batch_size = 8;
  c.finetune_epochs = 3;
  auto logs = finetune(model, set, FinetuneTask::kGender, c, tiny_aug());
  EXPECT_TRUE(model.has_gender_head());
  ASSERT_EQ(logs.size(), 3u);
  EXPECT_DOUBLE_EQ(logs[0].lr, 1e-4);
  EXPECT_TRUE(std::isfinite(logs.back().loss_total));
}

TEST(Finetune, LlrdScalesFollowDepth) {
  GaitFormer<double> model(tiny_config(), 1);
  auto scales = llrd_scales(model, 0.5);
  auto named = model.named_parameters();
  ASSERT_EQ(scales.size(), named.size());
  for (std::size_t k = 0; k < named.size(); ++k) {
    const auto& name = named[k].first.name;
    double expected = 1.0;
    if (name.rfind("input", 0) == 0 || name == "pos_embedding") expected = 0.25;
    if (name.rfind("layers.0.", 0) == 0) expected = 0.5;
    EXPECT_DOUBLE_EQ(scales[k], expected) << name;
  }
}

TEST(SupCon, IdenticalProjectionsGiveLogThree) {
  auto z = Tensor::from({4, 3}, {0.3, -1, 2, 0.3, -1, 2, 0.3, -1, 2, 0.3, -1, 2});
  std::vector<std::size_t> y{0, 1, 0, 1};
  for (double tau : {1.0, 0.1, 0.001}) EXPECT_NEAR(supcon_loss(z, y, tau).item(), std::log(3.0), 1e-12);
}

TEST(SupCon, InvariantToCommonRotation) {
  auto z = random_matrix(6, 3, 11, false);
  std::vector<std::size_t> y{0, 1, 2, 0, 1, 2};
  // Rotation by 0.7 rad about the z axis followed by 1.1 rad about x.
  const double a = 0.7, b = 1.1;
  const double R[9] = {std::cos(a), -std::sin(a), 0, std::sin(a) * std::cos(b), std::cos(a) * std::cos(b),
                       -std::sin(b), std::sin(a) * std::sin(b), std::cos(a) * std::sin(b), std::cos(b)};
  std::vector<double> rotated(18);
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t r = 0; r < 3; ++r)
      for (std::size_t c = 0; c < 3; ++c) rotated[i * 3 + r] += R[r * 3 + c] * z.data()[i * 3 + c];
  for (double tau : {1.0, 0.1})
    EXPECT_NEAR(supcon_loss(z, y, tau).item(), supcon_loss(Tensor::from({6, 3}, rotated), y, tau).item(), 1e-9);
}

TEST(SupCon, InvariantToViewPermutation) {
  auto z = random_matrix(8, 4, 12, false);
  std::vector<std::size_t> y{0, 1, 2, 3, 0, 1, 2, 3};
  std::vector<std::size_t> perm{5, 2, 7, 0, 3, 6, 1, 4};
  std::vector<double> pz(32);
  std::vector<std::size_t> py(8);
  for (std::size_t i = 0; i < 8; ++i) {
    py[i] = y[perm[i]];
    for (std::size_t k = 0; k < 4; ++k) pz[i * 4 + k] = z.data()[perm[i] * 4 + k];
  }
  EXPECT_NEAR(supcon_loss(z, y, 0.1).item(), supcon_loss(Tensor::from({8, 4}, pz), py, 0.1).item(), 1e-12);
}

TEST(SupCon, DecreasesAsPositivesAlign) {
  // Negatives fixed at right angles; the positive pair closes its angle.
  std::vector<std::size_t> y{0, 1, 0, 1};
  double previous = std::numeric_limits<double>::infinity();
  for (double angle = 1.4; angle >= 0.0; angle -= 0.2) {
    auto z = Tensor::from({4, 2}, {1, 0, 0, 1, std::cos(angle), std::sin(angle), -std::sin(angle), std::cos(angle)});
    const double l = supcon_loss(z, y, 0.5).item();
    EXPECT_LT(l, previous) << "angle " << angle;
    previous = l;
  }
}

TEST(Bce, HandComputedSoftTarget) {
  auto l = Tensor::from({1}, {std::log(0.6 / 0.4)});
  auto y = Tensor::from({1}, {0.8});
  EXPECT_NEAR(bce_soft(l, y).item(), -(0.8 * std::log(0.6) + 0.2 * std::log(0.4)), 1e-12);
  EXPECT_NEAR(bce_soft(l, y).item(), 0.5920, 1e-4);
  EXPECT_NEAR(bce_soft(Tensor::from({1}, {60.0}), Tensor::from({1}, {1.0})).item(), 0.0, 1e-25);
}

TEST(Bce, StationaryAtMatchingTargets) {
  auto l = random_matrix(3, 7, 4);
  std::vector<double> t(21);
  for (std::size_t i = 0; i < 21; ++i) t[i] = ad::sigmoid_value(l.data()[i]);
  bce_soft(l, Tensor::from({3, 7}, t)).backward();
  for (double g : l.grad()) EXPECT_NEAR(g, 0.0, 1e-9);
}

TEST(CombinedLoss, HandExamples) {
  EXPECT_DOUBLE_EQ(combined_loss(1.0, 0.4, 0.5), 1.2);
  EXPECT_DOUBLE_EQ(combined_loss(1.7, 0.9, 0.0), 1.7);
  EXPECT_DOUBLE_EQ(combined_loss(1.7, 0.0, 0.5), 1.7);
}

TEST(Schedule, LlrdGeometricExample) {
  auto r = llrd_rates(1e-4, 0.9, 4);
  const double expected[] = {1e-4, 9e-5, 8.1e-5, 7.29e-5};
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(r[i], expected[i], 1e-18);
  for (double v : llrd_rates(3e-4, 1.0, 5)) EXPECT_DOUBLE_EQ(v, 3e-4);
}

TEST(TwoView, DisabledAugmentationGivesIdenticalViews) {
  auto set = random_set(6, 8, 9);
  AugmentationParams aug;
  aug.crop_length = 8;
  aug.pace_min = aug.pace_max = 1.0;
  aug.flip_probability = 0.0;
  aug.noise_sigma = 0.0;
  Rng rng(1);
  auto b = two_view_batch<double>(set, 3, aug, rng);
  const std::size_t per = 8 * kFlatDim;
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t k = 0; k < per; ++k) EXPECT_EQ(b.views.data()[i * per + k], b.views.data()[(i + 3) * per + k]);
}

TEST(Pretrain, SameSeedSameCurve) {
  auto set = random_set(8, 12, 5, true);
  TrainConfig c;
  c.batch_size = 4;
  c.tau = 0.1;
  c.total_epochs = 3;
  std::vector<EpochLog> a, b;
  {
    GaitFormer<double> m(tiny_config(), 2);
    a = pretrain(m, set, Regime::kMultitask, c, tiny_aug());
  }
  {
    GaitFormer<double> m(tiny_config(), 2);
    b = pretrain(m, set, Regime::kMultitask, c, tiny_aug());
  }
  for (std::size_t e = 0; e < a.size(); ++e) EXPECT_EQ(a[e].loss_total, b[e].loss_total);
}
