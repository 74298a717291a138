// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "fgmoe/checkpoint.hpp"
#include "fgmoe/config.hpp"
#include "fgmoe/data.hpp"
#include "fgmoe/optim.hpp"
#include "fgmoe/rng.hpp"
#include "fgmoe/vit.hpp"

namespace fgmoe {

struct LayerIou {
  int layer = 0;
  double iou = 0.0;
};

/// One row of metrics.csv.
struct EpochMetrics {
  std::size_t epoch = 0;  // 1-based
  std::string split;
  double top1 = 0.0;
  double loss_cls = 0.0;
  double loss_aux = 0.0;
  std::vector<LayerIou> iou;  // one entry per MoE block, foreground polarity
};

std::string metrics_header(const ModelConfig& model);
std::string metrics_row(const EpochMetrics& m);
std::string metrics_csv(const ModelConfig& model, const std::vector<EpochMetrics>& rows);

struct IouSum {
  double sum = 0.0;
  std::size_t count = 0;  // samples whose grid mask is non-empty
  double mean() const { return count ? sum / static_cast<double>(count) : 0.0; }
};

/// IoU between the thresholded average dispatch of `layer` and the
/// foreground grid mask, summed over samples with a non-empty grid mask.
/// Throws std::out_of_range if the trace holds no dispatch for `layer`.
template <typename T>
IouSum dispatch_iou(const ForwardTrace<T>& trace, std::span<const BinaryMask> masks, int layer);

/// Stacks images of the selected samples into [B, C, H, W].
template <typename T>
Tensor<T> stack_images(const std::vector<Sample>& samples, std::span<const std::size_t> indices);

struct StepLosses {
  double total = 0.0;
  double cls = 0.0;
  double aux = 0.0;
};

template <typename T>
class Trainer {
 public:
  using EpochCallback = std::function<void(const Trainer&, std::size_t epoch)>;

  explicit Trainer(RunConfig config);

  /// Restores weights, optimizer moments, counters, RNG state and metrics
  /// history. Throws CheckpointError if the checkpoint was written for a
  /// different model or precision.
  void restore(const Checkpoint& checkpoint);
  Checkpoint checkpoint() const;

  /// Runs the remaining epochs. `on_epoch` fires after each epoch's metrics
  /// are appended to history().
  void fit(const std::vector<Sample>& train, const std::vector<Sample>& val, const EpochCallback& on_epoch = {});

  /// One optimizer step on the given samples at learning rate `lr`.
  StepLosses step(const std::vector<Sample>& data, std::span<const std::size_t> batch, double lr);

  EpochMetrics evaluate(const std::vector<Sample>& data, const std::string& split, std::size_t epoch) const;

  const RunConfig& config() const { return config_; }
  VisionTransformer<T>& model() { return model_; }
  const VisionTransformer<T>& model() const { return model_; }
  const AdamW<T>& optimizer() const { return optimizer_; }
  std::size_t epochs_done() const { return epoch_; }
  const std::vector<EpochMetrics>& history() const { return history_; }
  const std::vector<StepLosses>& step_losses() const { return step_losses_; }

 private:
  struct Pass;
  struct Accumulator;
  Pass forward_pass(const std::vector<Sample>& data, std::span<const std::size_t> batch) const;
  void accumulate(const Pass& pass, Accumulator& acc) const;
  EpochMetrics summarize(const Accumulator& acc, const std::string& split, std::size_t epoch) const;

  RunConfig config_;
  VisionTransformer<T> model_;
  AdamW<T> optimizer_;
  Rng rng_;
  std::size_t epoch_ = 0;
  std::vector<EpochMetrics> history_;
  std::vector<StepLosses> step_losses_;
};

/// Parses a metrics.csv produced by metrics_csv().
std::vector<EpochMetrics> parse_metrics_csv(const std::string& text);

}  // namespace fgmoe
