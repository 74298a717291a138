// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <numeric>

#include "fgmoe/trainer.hpp"
#include "test_util.hpp"

using namespace fgmoe;

namespace {

RunConfig tiny_run(int precision = 64) {
  RunConfig c;
  c.model = tiny_model_config();
  c.train.epochs = 4;
  c.train.warmup_epochs = 1;
  c.train.batch_size = 4;
  c.train.precision = precision;
  c.train.guidance.targets = {{2, MaskPolarity::foreground}};
  return c;
}

std::vector<Sample> tiny_data(std::size_t n, std::uint64_t seed) {
  std::vector<Sample> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(to_sample(synth_sample(seed, i, 2, 8)));
  return out;
}

template <typename T>
bool same_parameters(const VisionTransformer<T>& a, const VisionTransformer<T>& b) {
  const auto pa = a.parameters(), pb = b.parameters();
  if (pa.size() != pb.size()) return false;
  for (std::size_t k = 0; k < pa.size(); ++k) {
    const auto x = pa[k].tensor.data(), y = pb[k].tensor.data();
    if (x.size() != y.size() || std::memcmp(x.data(), y.data(), x.size_bytes()) != 0) return false;
  }
  return true;
}

// One-sample trace with a hand-written [1, 4, 2] dispatch tensor.
ForwardTrace<double> trace_with_w(std::vector<double> w) {
  std::vector<double> d;
  for (double x : w) d.insert(d.end(), {x, x});
  ForwardTrace<double> t;
  t.dispatch.emplace(2, Tensor<double>::from({1, 4, 2}, d));
  return t;
}

BinaryMask grid_mask(std::vector<std::uint8_t> bits) { return BinaryMask{2, 2, std::move(bits)}; }

}  // namespace

TEST(DispatchIou, HandValues) {
  const auto t = trace_with_w({0.4, 0.3, 0.2, 0.1});  // B = [1,1,0,0]
  const BinaryMask partial[] = {grid_mask({1, 0, 1, 0})};
  const BinaryMask exact[] = {grid_mask({1, 1, 0, 0})};
  const BinaryMask disjoint[] = {grid_mask({0, 0, 1, 1})};
  const BinaryMask empty[] = {grid_mask({0, 0, 0, 0})};
  EXPECT_DOUBLE_EQ(dispatch_iou(t, partial, 2).mean(), 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(dispatch_iou(t, exact, 2).mean(), 1.0);
  EXPECT_DOUBLE_EQ(dispatch_iou(t, disjoint, 2).mean(), 0.0);
  const auto e = dispatch_iou(t, empty, 2);
  EXPECT_EQ(e.count, 0u);
  EXPECT_EQ(e.mean(), 0.0);
  EXPECT_THROW(dispatch_iou(t, partial, 1), std::out_of_range);
}

TEST(Metrics, CsvRoundTrip) {
  RunConfig c = tiny_run();
  std::vector<EpochMetrics> rows{{1, "train", 0.5, 0.1 + 0.2, 1.0 / 3.0, {{2, 0.125}}},
                                 {1, "val", 0.75, 2.0, 0.0, {{2, 1e-9}}}};
  const std::string csv = metrics_csv(c.model, rows);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "epoch,split,top1,loss_cls,loss_aux,iou_layer_2");
  const auto back = parse_metrics_csv(csv);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_NEAR(back[0].loss_cls, rows[0].loss_cls, 1e-9);
  EXPECT_NEAR(back[0].loss_aux, rows[0].loss_aux, 1e-9);
  EXPECT_EQ(back[1].iou[0].iou, 1e-9);
  EXPECT_EQ(back[1].split, "val");
  EXPECT_EQ(metrics_csv(c.model, back), csv);
}

TEST(Trainer, PrecisionMustMatch) {
  EXPECT_THROW(Trainer<float>(tiny_run(64)), ConfigError);
  EXPECT_NO_THROW(Trainer<float>(tiny_run(32)));
}

TEST(Trainer, LossDecreasesOnTinyTask) {
  RunConfig c = tiny_run();
  c.train.epochs = 25;
  c.train.warmup_epochs = 2;
  c.train.base_lr = 3e-3;
  Trainer<double> t(c);
  t.fit(tiny_data(32, 3), {});
  const auto& s = t.step_losses();
  const std::size_t k = s.size() / 10;
  ASSERT_GE(k, 1u);
  double first = 0, last = 0;
  for (std::size_t i = 0; i < k; ++i) {
    first += s[i].total;
    last += s[s.size() - 1 - i].total;
  }
  EXPECT_LT(last / k, first / k);
}

TEST(Trainer, StepComposesLosses) {
  RunConfig c = tiny_run();
  Trainer<double> t(c);
  auto data = tiny_data(1, 5);
  const std::size_t batch[] = {0};
  // Hand composition from the module entry points, before the update.
  const auto trace = t.model().forward(stack_images<double>(data, batch));
  const int labels[] = {data[0].label};
  const double ce = cross_entropy<double>(trace.logits, labels).item();
  const double aux =
      aux_loss<double>({{2, MaskPolarity::foreground, trace.dispatch.at(2)}}, std::span(&data[0].mask, 1), 1e-6)
          .loss.item();
  const auto l = t.step(data, batch, 1e-3);
  EXPECT_GT(aux, 0.0);
  EXPECT_EQ(l.cls, ce);
  EXPECT_EQ(l.aux, aux);
  EXPECT_NEAR(l.total, ce + 0.01 * aux, 1e-15);
  EXPECT_EQ(t.optimizer().steps(), 1u);
}

TEST(Trainer, LambdaZeroMatchesDisabledGuidance) {
  RunConfig zero = tiny_run(), off = tiny_run();
  zero.train.guidance.lambda = 0.0;
  off.train.guidance.enabled = false;
  Trainer<double> a(zero), b(off);
  const auto data = tiny_data(8, 2);
  a.fit(data, data);
  b.fit(data, data);
  EXPECT_TRUE(same_parameters(a.model(), b.model()));
}

TEST(Trainer, AllEmptyMasksStepEqualsLambdaZero) {
  auto data = tiny_data(4, 9);
  for (auto& s : data) s.mask = BinaryMask::zeros(8, 8);
  RunConfig guided = tiny_run(), zero = tiny_run();
  zero.train.guidance.lambda = 0.0;
  Trainer<double> a(guided), b(zero);
  const std::size_t batch[] = {0, 1, 2, 3};
  const auto la = a.step(data, batch, 1e-3);
  b.step(data, batch, 1e-3);
  EXPECT_EQ(la.aux, 0.0);
  EXPECT_TRUE(std::isfinite(la.total));
  EXPECT_TRUE(same_parameters(a.model(), b.model()));
}

TEST(Trainer, DeterministicMetrics) {
  const auto train = tiny_data(10, 4), val = tiny_data(6, 40);
  Trainer<float> a(tiny_run(32)), b(tiny_run(32));
  a.fit(train, val);
  b.fit(train, val);
  const auto& cfg = a.config().model;
  EXPECT_EQ(metrics_csv(cfg, a.history()), metrics_csv(cfg, b.history()));
  EXPECT_EQ(a.history().size(), 8u);
  EXPECT_TRUE(same_parameters(a.model(), b.model()));

  RunConfig other = tiny_run(32);
  other.train.seed = 1;
  Trainer<float> c(other);
  c.fit(train, val);
  EXPECT_NE(metrics_csv(cfg, a.history()), metrics_csv(cfg, c.history()));
}

TEST(Trainer, ResumeReproducesUninterruptedRun) {
  testutil::TempDir dir;
  const auto train = tiny_data(10, 4), val = tiny_data(6, 40);
  Trainer<float> full(tiny_run(32));
  full.fit(train, val);

  Trainer<float> first(tiny_run(32));
  first.fit(train, val, [&](const Trainer<float>& t, std::size_t epoch) {
    if (epoch == 2) save_checkpoint(dir / "mid.bin", t.checkpoint());
  });
  Trainer<float> resumed(tiny_run(32));
  resumed.restore(load_checkpoint(dir / "mid.bin"));
  EXPECT_EQ(resumed.epochs_done(), 2u);
  resumed.fit(train, val);

  const auto& cfg = full.config().model;
  EXPECT_EQ(metrics_csv(cfg, resumed.history()), metrics_csv(cfg, full.history()));
  EXPECT_TRUE(same_parameters(resumed.model(), full.model()));
}

TEST(Trainer, EvaluateIsSideEffectFree) {
  Trainer<double> t(tiny_run());
  const auto data = tiny_data(6, 8);
  const auto a = t.evaluate(data, "val", 0), b = t.evaluate(data, "val", 0);
  EXPECT_EQ(metrics_row(a), metrics_row(b));
  EXPECT_EQ(t.optimizer().steps(), 0u);
  ASSERT_EQ(a.iou.size(), 1u);
  EXPECT_EQ(a.iou[0].layer, 2);
}
