// SPDX-License-Identifier: Apache-2.0
//
// On-disk dataset layout:
//
//   <dir>/train.tsv, <dir>/val.tsv   manifests, one sample per line:
//                                    image_path<TAB>mask_path or -<TAB>label
//   images: binary PPM (P6) or PGM (P5), maxval 255
//   masks:  binary PGM (P5), any nonzero pixel is foreground
//
// Paths inside a manifest are relative to the manifest's directory unless
// absolute. A "-" mask means no prior; the sample is treated as having an
// all-zero mask.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "fgmoe/guidance.hpp"

namespace fgmoe {

/// Raised on malformed or unreadable dataset files.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Netpbm {
  std::size_t channels = 0;  // 1 for P5, 3 for P6
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> pixels;  // interleaved, row-major
};

Netpbm read_netpbm(const std::filesystem::path& path);
void write_netpbm(const std::filesystem::path& path, const Netpbm& image);

/// Channel-planar image with values in [0, 1].
struct Image {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> pixels;  // [C, H, W]
};

Image load_image(const std::filesystem::path& path);
/// Any nonzero gray value maps to 1.
BinaryMask load_mask(const std::filesystem::path& path);

struct Sample {
  Image image;
  BinaryMask mask;
  int label = 0;
};

struct ManifestEntry {
  std::string image_path;
  std::optional<std::string> mask_path;
  int label = 0;
};

struct Manifest {
  std::string split;
  std::vector<ManifestEntry> entries;
};

Manifest read_manifest(const std::filesystem::path& path, std::string split);
void write_manifest(const std::filesystem::path& path, const Manifest& manifest);

/// Loads `<dir>/<split>.tsv`, checking every image against the expected
/// geometry and every label against `classes`.
std::vector<Sample> load_split(const std::filesystem::path& dir, const std::string& split,
                               std::size_t image_side, std::size_t channels, std::size_t classes);

// --- synthetic shapes ---------------------------------------------------------

inline constexpr std::size_t kShapeFamilies = 8;

enum class ShapeFamily { square, circle, triangle, cross, ring, diamond, bar_h, bar_v };
std::string_view family_name(ShapeFamily f);

/// Raw 8-bit sample as written to disk.
struct SyntheticSample {
  Netpbm image;      // P6
  BinaryMask mask;   // exact shape support
  int label = 0;
  // Square family only: support is rows [top, top+size) x cols [left, left+size).
  std::size_t top = 0, left = 0, size = 0;
};

/// Deterministic in (seed, index): the per-sample seed is mix_seed(seed, index).
/// Label = index % classes. Mask coverage is within [0.10, 0.40].
SyntheticSample synth_sample(std::uint64_t seed, std::size_t index, std::size_t classes,
                             std::size_t side);

Sample to_sample(const SyntheticSample& s);

struct GenerateOptions {
  std::filesystem::path out;
  std::size_t train = 0;
  std::size_t val = 0;
  std::size_t classes = 4;
  std::uint64_t seed = 0;
  std::size_t side = 32;
};

/// Writes images/, masks/, train.tsv and val.tsv under `out`. Validation
/// samples continue the index sequence after the training samples. Returns
/// per-class counts over both splits.
std::vector<std::size_t> generate_synthetic(const GenerateOptions& options);

/// Pure function of (n, epoch, seed).
std::vector<std::size_t> shuffled_order(std::size_t n, std::uint64_t epoch, std::uint64_t seed);

}  // namespace fgmoe
