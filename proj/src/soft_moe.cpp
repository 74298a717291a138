// SPDX-License-Identifier: Apache-2.0

#include "fgmoe/soft_moe.hpp"

#include <cmath>
#include <stdexcept>

namespace fgmoe {

namespace {

template <typename T>
Tensor<T> trunc_normal(Shape shape, Rng& rng, double stddev = 0.02) {
  std::vector<T> v(numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.trunc_normal(stddev));
  return Tensor<T>::from(std::move(shape), std::move(v), true);
}

template <typename T>
Tensor<T> as_batched(const Tensor<T>& x, const char* op) {
  if (x.rank() == 3) return x;
  if (x.rank() == 2) return reshape(x, Shape{1, x.dim(0), x.dim(1)});
  throw ShapeError(std::string(op) + ": expected [m,d] or [B,m,d] tokens, got " + shape_str(x.shape()));
}

template <typename T>
Tensor<T> slot_logits(const Tensor<T>& x, const SlotParams<T>& slots, const char* op) {
  if (x.rank() < 2 || x.dim(-2) == 0) {
    throw ShapeError(std::string(op) + ": empty token axis in " + shape_str(x.shape()));
  }
  if (slots.total() == 0) throw ShapeError(std::string(op) + ": no slots (N*p = 0)");
  if (x.dim(-1) != slots.phi.dim(0)) {
    throw ShapeError(std::string(op) + ": tokens " + shape_str(x.shape()) + " vs phi " +
                     shape_str(slots.phi.shape()));
  }
  return matmul(x, slots.phi);
}

}  // namespace

std::string_view to_string(LayerScaleVariant v) {
  switch (v) {
    case LayerScaleVariant::identity: return "identity";
    case LayerScaleVariant::scalar: return "scalar";
    case LayerScaleVariant::vector: return "vector";
    case LayerScaleVariant::scalar_linear: return "scalar_linear";
    case LayerScaleVariant::no_skip: return "no_skip";
  }
  return "identity";
}

LayerScaleVariant parse_layerscale(std::string_view text) {
  for (auto v : {LayerScaleVariant::identity, LayerScaleVariant::scalar, LayerScaleVariant::vector,
                 LayerScaleVariant::scalar_linear, LayerScaleVariant::no_skip}) {
    if (to_string(v) == text) return v;
  }
  throw std::invalid_argument("unknown LayerScale variant '" + std::string(text) +
                              "' (expected identity|scalar|vector|scalar_linear|no_skip)");
}

template <typename T>
SlotParams<T> SlotParams<T>::init(std::size_t dim, std::size_t experts, std::size_t slots, Rng& rng) {
  if (experts == 0 || slots == 0) throw std::invalid_argument("SlotParams: experts and slots must be >= 1");
  return SlotParams{trunc_normal<T>(Shape{dim, experts * slots}, rng), experts, slots};
}

template <typename T>
Tensor<T> compute_dispatch_weights(const Tensor<T>& x, const SlotParams<T>& slots) {
  return softmax(slot_logits(x, slots, "dispatch"), -2);
}

template <typename T>
Tensor<T> compute_combine_weights(const Tensor<T>& x, const SlotParams<T>& slots) {
  return softmax(slot_logits(x, slots, "combine"), -1);
}

template <typename T>
ExpertMlp<T> ExpertMlp<T>::init(std::size_t experts, std::size_t dim, std::size_t hidden, Rng& rng) {
  ExpertMlp e;
  e.experts = experts;
  e.dim = dim;
  e.hidden = hidden;
  e.w1 = trunc_normal<T>(Shape{experts, dim, hidden}, rng);
  e.b1 = Tensor<T>::zeros(Shape{experts, 1, hidden}, true);
  e.w2 = trunc_normal<T>(Shape{experts, hidden, dim}, rng);
  e.b2 = Tensor<T>::zeros(Shape{experts, 1, dim}, true);
  return e;
}

template <typename T>
Tensor<T> ExpertMlp<T>::forward(std::size_t index, const Tensor<T>& rows) const {
  if (index >= experts) throw std::out_of_range("ExpertMlp: expert index out of range");
  if (rows.rank() != 2 || rows.dim(1) != dim) {
    throw ShapeError("expert_mlp: rows " + shape_str(rows.shape()) + " for width " + std::to_string(dim));
  }
  auto pick = [index](const Tensor<T>& t) {
    auto s = slice(t, 0, index, index + 1);
    return reshape(s, Shape{t.dim(1), t.dim(2)});
  };
  auto h = gelu(add(matmul(rows, pick(w1)), reshape(pick(b1), Shape{hidden})));
  return add(matmul(h, pick(w2)), reshape(pick(b2), Shape{dim}));
}

template <typename T>
Tensor<T> ExpertMlp<T>::forward_all(const Tensor<T>& slots) const {
  if (slots.rank() != 3 || slots.dim(0) != experts || slots.dim(2) != dim) {
    throw ShapeError("expert_mlp: slots " + shape_str(slots.shape()) + " for " +
                     std::to_string(experts) + " experts of width " + std::to_string(dim));
  }
  auto h = gelu(add(bmm(slots, w1), b1));
  return add(bmm(h, w2), b2);
}

template <typename T>
LayerScale<T> LayerScale<T>::init(LayerScaleVariant variant, std::size_t dim, Rng& rng) {
  LayerScale ls;
  ls.variant = variant;
  switch (variant) {
    case LayerScaleVariant::scalar:
      ls.gamma = Tensor<T>::zeros(Shape{1}, true);
      break;
    case LayerScaleVariant::vector:
      ls.gamma = Tensor<T>::zeros(Shape{dim}, true);
      break;
    case LayerScaleVariant::scalar_linear: {
      ls.gamma = Tensor<T>::zeros(Shape{1}, true);
      const double bound = 1.0 / std::sqrt(static_cast<double>(dim));
      std::vector<T> w(dim * dim);
      for (auto& v : w) v = static_cast<T>(rng.uniform(-bound, bound));
      ls.linear_weight = Tensor<T>::from(Shape{dim, dim}, std::move(w), true);
      ls.linear_bias = Tensor<T>::zeros(Shape{dim}, true);
      break;
    }
    case LayerScaleVariant::identity:
    case LayerScaleVariant::no_skip:
      break;
  }
  return ls;
}

template <typename T>
Tensor<T> LayerScale<T>::apply(const Tensor<T>& r, const Tensor<T>& x) const {
  if (r.shape() != x.shape()) {
    throw ShapeError("layerscale: combine output " + shape_str(r.shape()) + " vs skip " +
                     shape_str(x.shape()));
  }
  switch (variant) {
    case LayerScaleVariant::identity: return add(r, x);
    case LayerScaleVariant::scalar:
    case LayerScaleVariant::vector: return add(r, mul(x, gamma));
    case LayerScaleVariant::scalar_linear:
      return add(r, mul(add(matmul(x, linear_weight), linear_bias), gamma));
    case LayerScaleVariant::no_skip: return r;
  }
  return r;
}

template <typename T>
SoftMoe<T>::SoftMoe(std::size_t dim, std::size_t n_experts, std::size_t n_slots, std::size_t hidden,
                    LayerScaleVariant variant, Rng& rng)
    : slots(SlotParams<T>::init(dim, n_experts, n_slots, rng)),
      experts(ExpertMlp<T>::init(n_experts, dim, hidden, rng)),
      layerscale(LayerScale<T>::init(variant, dim, rng)) {}

template <typename T>
SoftMoeOutput<T> SoftMoe<T>::forward(const Tensor<T>& route, const Tensor<T>& skip) const {
  const bool single = route.rank() == 2;
  const Tensor<T> x = as_batched(route, "soft_moe");
  const std::size_t batch = x.dim(0), m = x.dim(1), d = x.dim(2);
  const std::size_t n = slots.experts, p = slots.slots, s = slots.total();

  // Logits are shared by dispatch and combine.
  const Tensor<T> logits = slot_logits(x, slots, "soft_moe");
  Tensor<T> dispatch = softmax(logits, 1);
  Tensor<T> combine = softmax(logits, 2);

  auto slot_in = bmm(transpose(dispatch), x);  // [B, S, d]
  auto grouped = reshape(permute(reshape(slot_in, Shape{batch, n, p, d}), {1, 0, 2, 3}),
                         Shape{n, batch * p, d});
  auto expert_out = experts.forward_all(grouped);
  auto slot_out = reshape(permute(reshape(expert_out, Shape{n, batch, p, d}), {1, 0, 2, 3}),
                          Shape{batch, s, d});
  Tensor<T> r = bmm(combine, slot_out);  // [B, m, d]

  if (single) {
    r = reshape(r, Shape{m, d});
    dispatch = reshape(dispatch, Shape{m, s});
    combine = reshape(combine, Shape{m, s});
  }
  SoftMoeOutput<T> out;
  out.y = layerscale.apply(r, skip);
  out.combined = r;
  out.dispatch = dispatch;
  out.combine = combine;
  return out;
}

template <typename T>
void SoftMoe<T>::collect(const std::string& prefix, ParamList<T>& out) const {
  out.push_back({prefix + ".phi", slots.phi, true});
  out.push_back({prefix + ".experts.w1", experts.w1, true});
  out.push_back({prefix + ".experts.b1", experts.b1, false});
  out.push_back({prefix + ".experts.w2", experts.w2, true});
  out.push_back({prefix + ".experts.b2", experts.b2, false});
  if (layerscale.gamma.defined()) out.push_back({prefix + ".layerscale.gamma", layerscale.gamma, false});
  if (layerscale.linear_weight.defined()) {
    out.push_back({prefix + ".layerscale.linear_weight", layerscale.linear_weight, true});
    out.push_back({prefix + ".layerscale.linear_bias", layerscale.linear_bias, false});
  }
}

#define FGMOE_INSTANTIATE(T)                                                               \
  template struct SlotParams<T>;                                                           \
  template struct ExpertMlp<T>;                                                            \
  template struct LayerScale<T>;                                                           \
  template class SoftMoe<T>;                                                               \
  template Tensor<T> compute_dispatch_weights(const Tensor<T>&, const SlotParams<T>&);     \
  template Tensor<T> compute_combine_weights(const Tensor<T>&, const SlotParams<T>&);

FGMOE_INSTANTIATE(float)
FGMOE_INSTANTIATE(double)
#undef FGMOE_INSTANTIATE

}  // namespace fgmoe
