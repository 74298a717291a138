// SPDX-License-Identifier: Apache-2.0
//
// Flat text configuration:
//
//   # comment
//   model.dim = 64
//   train.base_lr = 5e-4
//   guidance.layers = 4:fg
//
// Every field of ModelConfig, TrainConfig and GuidanceConfig has a key.
// Unknown keys and malformed values are rejected with ConfigError.

#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "fgmoe/guidance.hpp"
#include "fgmoe/vit.hpp"

namespace fgmoe {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t warmup_epochs = 2;
  double base_lr = 3e-3;
  double warmup_lr = 1e-6;
  double min_lr = 1e-5;
  double weight_decay = 0.05;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
  int precision = 32;
  /// Write a checkpoint every k epochs (0: only the final one).
  std::size_t checkpoint_every = 0;
  GuidanceConfig guidance{true, 0.01, 1e-6, {{4, MaskPolarity::foreground}}};

  void validate() const;
  bool operator==(const TrainConfig&) const;
};

/// Optimizer and schedule constants of the ImageNet pretraining recipe.
TrainConfig reference_train_config();

struct RunConfig {
  ModelConfig model;
  TrainConfig train;

  /// Cross-checks model and guidance (guided layers must be MoE blocks).
  void validate() const;
};

/// Applies one `key=value` (or `key = value`) assignment.
void apply_override(RunConfig& config, const std::string& assignment);
void apply_text(RunConfig& config, const std::string& text);
RunConfig load_config(const std::filesystem::path& path);

/// Serializes every key in a fixed order; parsing the result reproduces the
/// configuration exactly.
std::string format_config(const RunConfig& config);

std::vector<std::string> config_keys();

}  // namespace fgmoe
