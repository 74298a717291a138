// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint file layout (all header lines are '\n' terminated ASCII):
//
//   FGMOE-CKPT
//   version 1
//   dtype f32|f64
//   epoch <completed epochs>
//   steps <optimizer steps>
//   rng <n>        followed by n bytes of engine state and '\n'
//   config <n>     followed by n bytes of format_config() text
//   metrics <n>    followed by n bytes of metrics CSV text
//   tensors <k>
//   <name> <dtype> <d0,d1,...> <byte offset> <byte count>     (k lines)
//   data
//   <little-endian payload; offsets are relative to its first byte>

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "fgmoe/config.hpp"
#include "fgmoe/tensor.hpp"

namespace fgmoe {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CheckpointTensor {
  std::string name;
  std::string dtype;  // f32 | f64
  Shape shape;
  std::vector<std::uint8_t> bytes;  // little endian

  template <typename T>
  static CheckpointTensor pack(std::string name, const Shape& shape, std::span<const T> values);
  template <typename T>
  std::vector<T> unpack() const;
};

struct Checkpoint {
  static constexpr int kVersion = 1;

  std::string dtype;
  std::size_t epoch = 0;
  std::uint64_t steps = 0;
  std::string rng_state;
  std::string config_text;
  std::string metrics_csv;
  std::vector<CheckpointTensor> tensors;

  const CheckpointTensor& find(const std::string& name) const;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace fgmoe
