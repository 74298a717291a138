// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "fgmoe/optim.hpp"

using namespace fgmoe;

namespace {

ParamList<double> one_param(double value, double grad, bool decay) {
  auto t = Tensor<double>::from({1}, {value}, true);
  t.mutable_grad()[0] = grad;
  return {{"w", t, decay}};
}

double rel(double a, double b) { return std::abs(a - b) / std::abs(b); }

}  // namespace

TEST(AdamW, FirstStepMovesByLearningRate) {
  for (double g : {0.5, 3.0, -2.0}) {
    auto params = one_param(1.0, g, false);
    AdamW<double> opt(params, 0.0);
    opt.step(0.1);
    // Bias-corrected m/sqrt(v) = sign(g) on the first step, up to eps.
    EXPECT_NEAR(params[0].tensor.data()[0], 1.0 - 0.1 * (g > 0 ? 1 : -1), 1e-7) << g;
    EXPECT_EQ(opt.steps(), 1u);
  }
}

TEST(AdamW, ZeroGradientLeavesParameterWithoutDecay) {
  auto params = one_param(1.5, 0.0, true);
  AdamW<double> opt(params, 0.0);
  opt.step(0.1);
  EXPECT_EQ(params[0].tensor.data()[0], 1.5);
}

TEST(AdamW, DecoupledDecayScalesByLrTimesWd) {
  auto decayed = one_param(2.0, 0.0, true);
  auto exempt = one_param(2.0, 0.0, false);
  AdamW<double> a(decayed, 0.05), b(exempt, 0.05);
  a.step(0.1);
  b.step(0.1);
  EXPECT_DOUBLE_EQ(decayed[0].tensor.data()[0], 2.0 * (1.0 - 0.1 * 0.05));
  EXPECT_EQ(exempt[0].tensor.data()[0], 2.0);
}

TEST(AdamW, SecondStepMatchesClosedForm) {
  auto params = one_param(0.0, 1.0, false);
  AdamW<double> opt(params, 0.0);
  opt.step(0.01);
  params[0].tensor.mutable_grad()[0] = -1.0;
  opt.step(0.01);
  const double m = 0.9 * 0.1 - 0.1, v = 0.999 * 0.001 + 0.001;
  const double first = -0.01 / (1.0 + 1e-8);
  const double expect = first - 0.01 * (m / (1 - 0.81)) / (std::sqrt(v / (1 - 0.999 * 0.999)) + 1e-8);
  EXPECT_NEAR(params[0].tensor.data()[0], expect, 1e-15);
}

TEST(AdamW, NonFiniteGradientNamesParameterAndChangesNothing) {
  auto t1 = Tensor<double>::from({1}, {1.0}, true);
  auto t2 = Tensor<double>::from({1}, {1.0}, true);
  t1.mutable_grad()[0] = 1.0;
  t2.mutable_grad()[0] = std::numeric_limits<double>::quiet_NaN();
  ParamList<double> params{{"good", t1, true}, {"bad", t2, true}};
  AdamW<double> opt(params, 0.05);
  try {
    opt.step(0.1);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("bad"), std::string::npos);
  }
  EXPECT_EQ(t1.data()[0], 1.0);
  EXPECT_EQ(opt.steps(), 0u);
}

TEST(Schedule, ReferenceEndpoints) {
  const auto cfg = reference_train_config();
  const std::uint64_t spe = 1251;
  EXPECT_LE(rel(lr_at(0, spe, cfg), 5e-7), 1e-9);
  EXPECT_LE(rel(lr_at(30 * spe, spe, cfg), 5e-4), 1e-9);
  EXPECT_LE(rel(lr_at(100 * spe - 1, spe, cfg), 5e-6), 1e-9);
}

TEST(Schedule, MonotoneAndContinuous) {
  TrainConfig cfg;
  cfg.epochs = 10;
  cfg.warmup_epochs = 3;
  const std::uint64_t spe = 7, warm = 21, total = 70;
  for (std::uint64_t s = 1; s < warm; ++s) EXPECT_GT(lr_at(s, spe, cfg), lr_at(s - 1, spe, cfg));
  for (std::uint64_t s = warm + 1; s < total; ++s) EXPECT_LT(lr_at(s, spe, cfg), lr_at(s - 1, spe, cfg));
  // Neighbouring steps never jump by more than one warmup increment.
  const double inc = (cfg.base_lr - cfg.warmup_lr) / static_cast<double>(warm);
  for (std::uint64_t s = 1; s < total; ++s) {
    EXPECT_LE(std::abs(lr_at(s, spe, cfg) - lr_at(s - 1, spe, cfg)), inc * (1 + 1e-12)) << s;
  }
  EXPECT_DOUBLE_EQ(lr_at(total - 1, spe, cfg), cfg.min_lr);
  EXPECT_DOUBLE_EQ(lr_at(total + 5, spe, cfg), cfg.min_lr);
}

TEST(Schedule, NoWarmupStartsAtBase) {
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.warmup_epochs = 0;
  EXPECT_DOUBLE_EQ(lr_at(0, 5, cfg), cfg.base_lr);
}
