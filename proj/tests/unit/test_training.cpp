#include <gtest/gtest.h>

#include <cmath>

#include "gradleak/model.hpp"
#include "gradleak/training.hpp"

namespace gradleak {
namespace {

Dataset small_synthetic(std::size_t classes, std::size_t per_class, std::uint64_t seed = 0) {
  SyntheticSpec s;
  s.classes = classes;
  s.per_class = per_class;
  s.seed = seed;
  return generate_synthetic(s);
}

Model mlp(std::size_t classes, std::uint64_t seed = 0) {
  ModelSpec s;
  s.arch = Architecture::kMlpSmall;
  s.classes = classes;
  return build_model(s, seed);
}

double norm_of(const Tensor& a, const Tensor& b, std::size_t i, Norm n) {
  const std::size_t per = a.numel() / a.dim(0);
  double acc = 0.0;
  for (std::size_t t = i * per; t < (i + 1) * per; ++t) {
    const double d = double(a.data[t]) - b.data[t];
    acc = n == Norm::kL2 ? acc + d * d : std::max(acc, std::abs(d));
  }
  return n == Norm::kL2 ? std::sqrt(acc) : acc;
}

TEST(Pgd, ZeroEpsilonReturnsInput) {
  const Dataset d = small_synthetic(4, 2);
  const Model m = mlp(4);
  ATConfig cfg;
  cfg.epsilon = 0.0;
  Rng rng(1);
  EXPECT_EQ(pgd_attack(m, d.images, d.labels, cfg, rng).data, d.images.data);
}

TEST(Pgd, SingleLinfStepIsSignOfGradient) {
  // Loss w.x has input gradient w everywhere.
  const Tensor w({1, 1, 2, 2}, {0.3f, -2.0f, 0.0001f, -0.5f});
  InputGradientFn grad = [&](const Tensor& x, std::span<const int>) {
    Tensor g(x.shape);
    for (std::size_t i = 0; i < g.numel(); ++i) g.data[i] = w.data[i % 4];
    return g;
  };
  ATConfig cfg;
  cfg.norm = Norm::kLinf;
  cfg.epsilon = 0.05;
  cfg.steps = 1;
  cfg.step_size = 0.05;
  cfg.random_start = false;
  const Tensor x({1, 1, 2, 2}, 0.5f);
  const std::vector<int> y{0};
  Rng rng(0);
  const Tensor adv = pgd_attack(grad, x, y, cfg, rng);
  const std::vector<float> expected{0.55f, 0.45f, 0.55f, 0.45f};
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(adv.data[i], expected[i], 1e-6f);
}

class PgdNorms : public ::testing::TestWithParam<Norm> {};

TEST_P(PgdNorms, OutputsStayInBallAndBox) {
  const Dataset d = small_synthetic(8, 4);
  const Model m = mlp(8, 3);
  ATConfig cfg;
  cfg.norm = GetParam();
  cfg.epsilon = GetParam() == Norm::kL2 ? 1.0 : 0.1;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    const Tensor adv = pgd_attack(m, d.images, d.labels, cfg, rng);
    for (std::size_t i = 0; i < d.size(); ++i) {
      EXPECT_LE(norm_of(adv, d.images, i, cfg.norm), cfg.epsilon + 1e-5);
    }
    for (float v : adv.data) {
      EXPECT_GE(v, 0.0f);
      EXPECT_LE(v, 1.0f);
    }
  }
}

TEST_P(PgdNorms, AscendsTheLoss) {
  const Dataset d = small_synthetic(8, 4);
  Model m = mlp(8, 5);
  TrainConfig tc;
  tc.epochs = 3;
  train(m, d, nullptr, tc);
  ATConfig cfg;
  cfg.norm = GetParam();
  cfg.epsilon = GetParam() == Norm::kL2 ? 1.0 : 0.1;
  Rng rng(2);
  const Tensor adv = pgd_attack(m, d.images, d.labels, cfg, rng);
  std::size_t up = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    const std::vector<int> y{d.labels[i]};
    const float before = forward_trace(m, d.image(i), y).loss;
    const float after = forward_trace(m, slice_rows(adv, i), y).loss;
    up += after >= before;
  }
  EXPECT_GE(double(up) / double(d.size()), 0.95);
}

INSTANTIATE_TEST_SUITE_P(Norms, PgdNorms, ::testing::Values(Norm::kL2, Norm::kLinf),
                         [](const auto& info) { return to_string(info.param); });

TEST(Pgd, NonFiniteGradientIsAnError) {
  InputGradientFn grad = [](const Tensor& x, std::span<const int>) {
    return Tensor(x.shape, std::nanf(""));
  };
  ATConfig cfg;
  const Tensor x({1, 1, 2, 2}, 0.5f);
  const std::vector<int> y{0};
  Rng rng(0);
  EXPECT_THROW(pgd_attack(grad, x, y, cfg, rng), std::runtime_error);
}

TEST(AtConfig, DefaultsAndValidation) {
  ATConfig cfg;
  EXPECT_EQ(cfg.steps, 10u);
  EXPECT_DOUBLE_EQ(cfg.effective_step_size(), 2.5 * cfg.epsilon / 10.0);
  cfg.epsilon = -1.0;
  EXPECT_THROW(validate(cfg), std::invalid_argument);
  const ATConfig back = at_config_from_json(to_json(ATConfig{}));
  EXPECT_EQ(to_json(back), to_json(ATConfig{}));
  EXPECT_THROW(norm_from_string("l1"), std::invalid_argument);
}

TEST(Train, ZeroEpochsLeavesModelUnchanged) {
  const Dataset d = small_synthetic(4, 4);
  Model m = mlp(4, 1);
  const auto before = encode_checkpoint(m);
  TrainConfig tc;
  tc.epochs = 0;
  const auto h = train(m, d, nullptr, tc);
  EXPECT_TRUE(h.epochs.empty());
  EXPECT_EQ(encode_checkpoint(m), before);
}

TEST(Train, MemorizesTwoSamples) {
  const Dataset full = small_synthetic(2, 1);
  Model m = mlp(2, 4);
  TrainConfig tc;
  tc.epochs = 30;
  tc.batch_size = 2;
  train(m, full, nullptr, tc);
  EXPECT_DOUBLE_EQ(evaluate(m, full), 1.0);
}

TEST(Train, IsReproducible) {
  const Dataset d = small_synthetic(4, 6);
  TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 8;
  tc.seed = 9;
  tc.at = ATConfig{};
  Model a = mlp(4, 2), b = mlp(4, 2);
  const auto ha = train(a, d, &d, tc);
  const auto hb = train(b, d, &d, tc);
  EXPECT_EQ(encode_checkpoint(a), encode_checkpoint(b));
  EXPECT_EQ(ha.to_csv(), hb.to_csv());
  ASSERT_EQ(ha.epochs.size(), 2u);
  EXPECT_TRUE(ha.epochs[0].test_acc.has_value());
  EXPECT_EQ(ha.to_csv().substr(0, ha.to_csv().find('\n')),
            "epoch,train_loss,train_acc,test_acc,robust_acc");
}

TEST(Train, DivergenceAborts) {
  const Dataset d = small_synthetic(4, 4);
  Model m = mlp(4, 1);
  TrainConfig tc;
  tc.epochs = 5;
  tc.optimizer.kind = OptimizerKind::kSgdMomentum;
  tc.optimizer.learning_rate = 1e30;
  EXPECT_THROW(train(m, d, nullptr, tc), TrainingDiverged);
}

TEST(Evaluate, UntrainedModelIsNearChance) {
  const Dataset d = small_synthetic(10, 60);
  double mean = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) mean += evaluate(mlp(10, seed), d) / 5.0;
  EXPECT_NEAR(mean, 0.1, 0.05);
}

TEST(Evaluate, RobustNotAboveCleanAndAdversarialLowersTrueClassProbability) {
  const Dataset d = small_synthetic(8, 6);
  Model m = mlp(8, 6);
  TrainConfig tc;
  tc.epochs = 5;
  train(m, d, nullptr, tc);
  ATConfig at;
  at.epsilon = 1.0;
  EXPECT_LE(evaluate(m, d, at, 1), evaluate(m, d));

  Rng rng(3);
  const Tensor adv = pgd_attack(m, d.images, d.labels, at, rng);
  const auto clean = forward_trace(m, d.images, d.labels);
  const auto attacked = forward_trace(m, adv, d.labels);
  double pc = 0.0, pa = 0.0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    pc += clean.probabilities.data[i * 8 + static_cast<std::size_t>(d.labels[i])];
    pa += attacked.probabilities.data[i * 8 + static_cast<std::size_t>(d.labels[i])];
  }
  EXPECT_LT(pa, pc);
}

TEST(TrainConfig, JsonRoundTrip) {
  TrainConfig tc;
  tc.epochs = 3;
  tc.at = ATConfig{Norm::kLinf, 0.1};
  const auto back = train_config_from_json(to_json(tc));
  EXPECT_EQ(to_json(back), to_json(tc));
}

}  // namespace
}  // namespace gradleak
