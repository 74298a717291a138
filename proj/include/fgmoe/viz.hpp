// SPDX-License-Identifier: Apache-2.0
//
// Heat maps of dispatch weights on the token grid. For sample s and layer L
// the files written under the output directory are
//
//   s<s>_L<L>_dispatch.{pgm,csv}     average dispatch W
//   s<s>_L<L>_expert<e>.{pgm,csv}    W restricted to expert e's slots
//   s<s>_L<L>_attention.pgm          thresholded attention B
//   s<s>_L<L>_mask.pgm               foreground grid mask M'
//
// PGM gray levels are round(255 * v / max v); CSVs hold the exact values.

#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include "fgmoe/data.hpp"
#include "fgmoe/vit.hpp"

namespace fgmoe {

struct HeatMap {
  std::size_t side = 0;
  std::vector<double> values;  // row-major side x side
};

Netpbm heatmap_pgm(const HeatMap& map);
std::string heatmap_csv(const HeatMap& map);

/// Writes the files above for each requested sample index. Throws
/// std::invalid_argument if `layer` is not an MoE block and std::out_of_range
/// for a sample index past the end of `data`. Returns the written paths.
template <typename T>
std::vector<std::filesystem::path> write_heatmaps(const VisionTransformer<T>& model, const std::vector<Sample>& data,
                                                  std::span<const std::size_t> samples, int layer,
                                                  const std::filesystem::path& out);

}  // namespace fgmoe
