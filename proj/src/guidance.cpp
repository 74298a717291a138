// SPDX-License-Identifier: Apache-2.0

#include "fgmoe/guidance.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace fgmoe {

void GuidanceConfig::validate() const {
  if (!(lambda >= 0.0)) throw std::invalid_argument("guidance.lambda must be >= 0");
  if (!(epsilon > 0.0)) throw std::invalid_argument("guidance.epsilon must be > 0");
}

std::vector<GuidanceTarget> parse_targets(const std::string& text) {
  std::vector<GuidanceTarget> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item.erase(std::remove_if(item.begin(), item.end(), ::isspace), item.end());
    if (item.empty()) continue;
    GuidanceTarget t;
    const auto colon = item.find(':');
    const std::string layer = item.substr(0, colon);
    try {
      std::size_t used = 0;
      t.layer = std::stoi(layer, &used);
      if (used != layer.size()) throw std::invalid_argument(layer);
    } catch (const std::exception&) {
      throw std::invalid_argument("guidance target '" + item + "': bad layer index");
    }
    if (colon != std::string::npos) {
      const std::string pol = item.substr(colon + 1);
      if (pol == "fg" || pol == "foreground") {
        t.polarity = MaskPolarity::foreground;
      } else if (pol == "bg" || pol == "background") {
        t.polarity = MaskPolarity::background;
      } else {
        throw std::invalid_argument("guidance target '" + item + "': polarity must be fg or bg");
      }
    }
    out.push_back(t);
  }
  return out;
}

std::string format_targets(const std::vector<GuidanceTarget>& targets) {
  std::string out;
  for (const auto& t : targets) {
    if (!out.empty()) out += ',';
    out += std::to_string(t.layer) + (t.polarity == MaskPolarity::foreground ? ":fg" : ":bg");
  }
  return out;
}

BinaryMask BinaryMask::zeros(std::size_t height, std::size_t width) {
  return BinaryMask{height, width, std::vector<std::uint8_t>(height * width, 0)};
}

std::size_t BinaryMask::count() const {
  return static_cast<std::size_t>(std::count_if(bits.begin(), bits.end(), [](auto b) { return b != 0; }));
}

BinaryMask BinaryMask::complement() const {
  BinaryMask out{height, width, bits};
  for (auto& b : out.bits) b = b ? 0 : 1;
  return out;
}

std::size_t grid_side(std::size_t tokens) {
  auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(tokens))));
  if (side * side != tokens) {
    throw std::invalid_argument("token count m = " + std::to_string(tokens) +
                                " is not a perfect square");
  }
  return side;
}

template <typename T>
Tensor<T> average_dispatch(const Tensor<T>& dispatch) {
  if (dispatch.rank() != 2 && dispatch.rank() != 3) {
    throw ShapeError("average_dispatch: expected [m,S] or [B,m,S], got " + shape_str(dispatch.shape()));
  }
  grid_side(dispatch.dim(-2));
  return mean(dispatch, -1);
}

template <typename T>
std::vector<std::uint8_t> binarize_by_mean(std::span<const T> w) {
  T total = T(0);
  for (T v : w) total += v;
  const T threshold = total / static_cast<T>(w.size());
  std::vector<std::uint8_t> out(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) out[i] = w[i] >= threshold ? 1 : 0;
  return out;
}

BinaryMask resample_mask(const BinaryMask& mask, std::size_t side) {
  if (side == 0) throw std::invalid_argument("resample_mask: grid side must be >= 1");
  if (mask.height < side || mask.width < side) {
    throw std::invalid_argument("resample_mask: mask " + std::to_string(mask.height) + "x" +
                                std::to_string(mask.width) + " is smaller than the " +
                                std::to_string(side) + "x" + std::to_string(side) + " grid");
  }
  BinaryMask out = BinaryMask::zeros(side, side);
  const std::size_t h = mask.height, w = mask.width;
  // Pixel row y spans [y, y+1); cell row r spans [r*h/side, (r+1)*h/side).
  // They overlap with positive area iff y*side < (r+1)*h and (y+1)*side > r*h.
  auto first_cell = [side](std::size_t px, std::size_t extent) { return px * side / extent; };
  auto last_cell = [side](std::size_t px, std::size_t extent) {
    return ((px + 1) * side + extent - 1) / extent - 1;
  };
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      if (!mask.bits[y * w + x]) continue;
      for (std::size_t r = first_cell(y, h); r <= last_cell(y, h); ++r) {
        for (std::size_t c = first_cell(x, w); c <= last_cell(x, w); ++c) out.bits[r * side + c] = 1;
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> alignment_score(const Tensor<T>& w, std::span<const std::uint8_t> attention,
                          std::span<const std::uint8_t> grid_mask, T eps) {
  const std::size_t m = w.size();
  if (w.rank() != 1 || attention.size() != m || grid_mask.size() != m) {
    throw ShapeError("alignment_score: W " + shape_str(w.shape()) + " with masks of length " +
                     std::to_string(attention.size()) + "/" + std::to_string(grid_mask.size()));
  }
  if (std::none_of(grid_mask.begin(), grid_mask.end(), [](auto b) { return b != 0; })) {
    throw std::logic_error("alignment_score: empty foreground mask must be filtered before scoring");
  }
  std::vector<T> inter(m), uni(m);
  for (std::size_t i = 0; i < m; ++i) {
    const bool b = attention[i] != 0, g = grid_mask[i] != 0;
    inter[i] = (b && g) ? T(1) : T(0);
    uni[i] = (b || g) ? T(1) : T(0);
  }
  auto num = sum_all(mul(w, Tensor<T>::from(Shape{m}, std::move(inter))));
  auto den = sum_all(mul(w, Tensor<T>::from(Shape{m}, std::move(uni))));
  return div(num, add_scalar(den, eps));
}

template <typename T>
AuxLoss<T> aux_loss(const std::vector<LayerDispatch<T>>& layers, std::span<const BinaryMask> masks,
                    double eps, const AttentionMasks* frozen) {
  AuxLoss<T> result;
  const T e = static_cast<T>(eps);
  std::vector<Tensor<T>> layer_losses;
  for (const auto& layer : layers) {
    const Tensor<T>& d = layer.dispatch;
    if (d.rank() != 3) throw ShapeError("aux_loss: dispatch must be [B,m,S], got " + shape_str(d.shape()));
    const std::size_t batch = d.dim(0), m = d.dim(1);
    if (masks.size() != batch) {
      throw ShapeError("aux_loss: " + std::to_string(masks.size()) + " masks for a batch of " +
                       std::to_string(batch) + " at layer " + std::to_string(layer.layer));
    }
    const std::size_t side = grid_side(m);
    Tensor<T> w = average_dispatch(d);  // [B, m]

    auto& attention = result.attention[layer.layer];
    attention.resize(batch);
    std::vector<T> inter(batch * m, T(0)), uni(batch * m, T(0)), valid(batch, T(0));
    std::size_t n_valid = 0;
    const auto wv = w.data();
    for (std::size_t b = 0; b < batch; ++b) {
      if (frozen) {
        attention[b] = frozen->at(layer.layer).at(b);
      } else {
        attention[b] = binarize_by_mean<T>(wv.subspan(b * m, m));
      }
      BinaryMask grid = resample_mask(masks[b], side);
      if (layer.polarity == MaskPolarity::background) grid = grid.complement();
      if (grid.empty()) continue;
      valid[b] = T(1);
      ++n_valid;
      for (std::size_t i = 0; i < m; ++i) {
        const bool a = attention[b][i] != 0, g = grid.bits[i] != 0;
        inter[b * m + i] = (a && g) ? T(1) : T(0);
        uni[b * m + i] = (a || g) ? T(1) : T(0);
      }
    }
    result.valid_pairs += n_valid;
    if (n_valid == 0) continue;

    auto num = sum(mul(w, Tensor<T>::from(Shape{batch, m}, std::move(inter))), 1);
    auto den = sum(mul(w, Tensor<T>::from(Shape{batch, m}, std::move(uni))), 1);
    auto p = div(num, add_scalar(den, e));
    auto h = scale(log(add_scalar(p, e)), T(-1));
    auto kept = sum_all(mul(h, Tensor<T>::from(Shape{batch}, std::move(valid))));
    layer_losses.push_back(scale(kept, T(1) / static_cast<T>(n_valid)));
  }
  if (layer_losses.empty()) {
    result.loss = Tensor<T>::scalar(T(0));
    return result;
  }
  Tensor<T> total = layer_losses[0];
  for (std::size_t i = 1; i < layer_losses.size(); ++i) total = add(total, layer_losses[i]);
  result.loss = layers.size() == 1 ? total : scale(total, T(1) / static_cast<T>(layers.size()));
  return result;
}

template <typename T>
Tensor<T> total_loss(const Tensor<T>& loss_cls, const Tensor<T>& loss_aux, double lambda) {
  if (!std::isfinite(static_cast<double>(loss_cls.item()))) {
    throw NumericError("total_loss: non-finite loss_cls = " + std::to_string(loss_cls.item()));
  }
  if (!std::isfinite(static_cast<double>(loss_aux.item()))) {
    throw NumericError("total_loss: non-finite loss_aux = " + std::to_string(loss_aux.item()));
  }
  if (lambda == 0.0) return loss_cls;
  return add(loss_cls, scale(loss_aux, static_cast<T>(lambda)));
}

double mask_iou(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b) {
  if (a.size() != b.size()) throw ShapeError("mask_iou: mask lengths differ");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    inter += (a[i] && b[i]) ? 1 : 0;
    uni += (a[i] || b[i]) ? 1 : 0;
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

#define FGMOE_INSTANTIATE(T)                                                                     \
  template Tensor<T> average_dispatch(const Tensor<T>&);                                         \
  template std::vector<std::uint8_t> binarize_by_mean(std::span<const T>);                       \
  template Tensor<T> alignment_score(const Tensor<T>&, std::span<const std::uint8_t>,            \
                                     std::span<const std::uint8_t>, T);                          \
  template AuxLoss<T> aux_loss(const std::vector<LayerDispatch<T>>&, std::span<const BinaryMask>, \
                               double, const AttentionMasks*);                                   \
  template Tensor<T> total_loss(const Tensor<T>&, const Tensor<T>&, double);

FGMOE_INSTANTIATE(float)
FGMOE_INSTANTIATE(double)
#undef FGMOE_INSTANTIATE

}  // namespace fgmoe
