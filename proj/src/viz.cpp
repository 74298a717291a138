// SPDX-License-Identifier: Apache-2.0

#include "fgmoe/viz.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "fgmoe/trainer.hpp"

namespace fgmoe {

namespace {

Netpbm bits_pgm(std::size_t side, std::span<const std::uint8_t> bits) {
  Netpbm img{1, side, side, std::vector<std::uint8_t>(side * side)};
  for (std::size_t i = 0; i < bits.size(); ++i) img.pixels[i] = bits[i] ? 255 : 0;
  return img;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

}  // namespace

Netpbm heatmap_pgm(const HeatMap& map) {
  Netpbm img{1, map.side, map.side, std::vector<std::uint8_t>(map.values.size())};
  const double peak = map.values.empty() ? 0.0 : *std::max_element(map.values.begin(), map.values.end());
  for (std::size_t i = 0; i < map.values.size(); ++i) {
    const double v = peak > 0.0 ? std::round(255.0 * map.values[i] / peak) : 0.0;
    img.pixels[i] = static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
  }
  return img;
}

std::string heatmap_csv(const HeatMap& map) {
  std::string out;
  char buf[40];
  for (std::size_t r = 0; r < map.side; ++r) {
    for (std::size_t c = 0; c < map.side; ++c) {
      std::snprintf(buf, sizeof(buf), "%.17g", map.values[r * map.side + c]);
      out += (c ? "," : "") + std::string(buf);
    }
    out += "\n";
  }
  return out;
}

template <typename T>
std::vector<std::filesystem::path> write_heatmaps(const VisionTransformer<T>& model, const std::vector<Sample>& data,
                                                  std::span<const std::size_t> samples, int layer,
                                                  const std::filesystem::path& out) {
  const ModelConfig& cfg = model.config();
  if (!cfg.is_moe(layer)) {
    std::string valid;
    for (int b : cfg.moe_blocks) valid += (valid.empty() ? "" : ", ") + std::to_string(b);
    throw std::invalid_argument("layer " + std::to_string(layer) + " is not an MoE block; valid layers: " + valid);
  }
  for (std::size_t s : samples) {
    if (s >= data.size()) {
      throw std::out_of_range("sample " + std::to_string(s) + " out of range (split has " +
                              std::to_string(data.size()) + " samples)");
    }
  }
  std::filesystem::create_directories(out);

  NoGradGuard no_grad;
  std::vector<std::filesystem::path> written;
  const std::size_t side = cfg.grid(), m = cfg.tokens(), experts = cfg.experts, per = cfg.slots;
  const std::size_t slots = experts * per;
  for (std::size_t s : samples) {
    const std::size_t one[] = {s};
    const ForwardTrace<T> trace = model.forward(stack_images<T>(data, one));
    const auto d = trace.dispatch.at(layer).data();  // [1, m, slots]

    const std::string stem = "s" + std::to_string(s) + "_L" + std::to_string(layer) + "_";
    auto emit = [&](const std::string& name, const Netpbm& img) {
      const auto path = out / (stem + name + ".pgm");
      write_netpbm(path, img);
      written.push_back(path);
    };
    auto emit_map = [&](const std::string& name, const HeatMap& map) {
      emit(name, heatmap_pgm(map));
      const auto path = out / (stem + name + ".csv");
      write_text(path, heatmap_csv(map));
      written.push_back(path);
    };

    HeatMap avg{side, std::vector<double>(m)};
    for (std::size_t i = 0; i < m; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < slots; ++j) acc += static_cast<double>(d[i * slots + j]);
      avg.values[i] = acc / static_cast<double>(slots);
    }
    emit_map("dispatch", avg);
    for (std::size_t e = 0; e < experts; ++e) {
      HeatMap map{side, std::vector<double>(m)};
      for (std::size_t i = 0; i < m; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < per; ++j) acc += static_cast<double>(d[i * slots + e * per + j]);
        map.values[i] = acc / static_cast<double>(per);
      }
      emit_map("expert" + std::to_string(e), map);
    }
    emit("attention", bits_pgm(side, binarize_by_mean<double>(avg.values)));
    emit("mask", bits_pgm(side, resample_mask(data[s].mask, side).bits));
  }
  return written;
}

template std::vector<std::filesystem::path> write_heatmaps(const VisionTransformer<float>&, const std::vector<Sample>&,
                                                           std::span<const std::size_t>, int,
                                                           const std::filesystem::path&);
template std::vector<std::filesystem::path> write_heatmaps(const VisionTransformer<double>&,
                                                           const std::vector<Sample>&, std::span<const std::size_t>,
                                                           int, const std::filesystem::path&);

}  // namespace fgmoe
