// SPDX-License-Identifier: Apache-2.0

#include "fgmoe/model_check.hpp"

#include "fgmoe/data.hpp"
#include "fgmoe/guidance.hpp"
#include "fgmoe/rng.hpp"

namespace fgmoe {

std::size_t grad_check_cost(const ModelConfig& model) { return model.tokens() * model.dim * model.depth; }

GradCheckReport model_grad_check(const ModelGradCheckOptions& o) {
  ModelConfig cfg = o.model;
  if (cfg.moe_blocks.empty()) throw std::invalid_argument("grad check needs at least one MoE block");
  const int guided = cfg.moe_blocks.back();
  cfg.layerscale[guided] = o.variant;
  cfg.validate();
  if (grad_check_cost(cfg) > kGradCheckBudget) {
    throw std::invalid_argument("grad check refused: tokens*dim*depth = " + std::to_string(grad_check_cost(cfg)) +
                                " exceeds " + std::to_string(kGradCheckBudget));
  }

  VisionTransformer<double> model(cfg, o.seed);
  Rng rng(mix_seed(o.seed, 0x6772616463));
  // Move off the zero-initialized gains so the skip path carries gradient.
  for (int b : cfg.moe_blocks) {
    auto& ls = model.block(b).moe->layerscale;
    if (ls.gamma.defined()) {
      for (auto& g : ls.gamma.mutable_data()) g = rng.uniform(-0.5, 0.5);
    }
  }

  const std::size_t side = cfg.image_side;
  std::vector<double> pixels(o.batch * cfg.channels * side * side);
  for (auto& v : pixels) v = rng.uniform();
  const auto images = Tensor<double>::from({o.batch, cfg.channels, side, side}, std::move(pixels));
  std::vector<BinaryMask> masks;
  std::vector<int> labels;
  for (std::size_t b = 0; b < o.batch; ++b) {
    masks.push_back(synth_sample(o.seed, b, std::min(cfg.classes, kShapeFamilies), side).mask);
    labels.push_back(static_cast<int>(b % cfg.classes));
  }

  auto loss = [&](const AttentionMasks* frozen, AttentionMasks* attention) {
    const auto trace = model.forward(images);
    const auto cls = cross_entropy<double>(trace.logits, labels);
    std::vector<LayerDispatch<double>> layers{{guided, MaskPolarity::foreground, trace.dispatch.at(guided)}};
    auto aux = aux_loss<double>(layers, masks, 1e-6, frozen);
    if (attention) *attention = std::move(aux.attention);
    return total_loss<double>(cls, aux.loss, o.lambda);
  };

  AttentionMasks frozen;
  {
    NoGradGuard no_grad;
    loss(nullptr, &frozen);
  }
  std::vector<NamedTensor<double>> inputs;
  for (const auto& p : model.parameters()) inputs.push_back({p.name, p.tensor});
  return grad_check([&] { return loss(&frozen, nullptr); }, std::move(inputs), o.rel_tol);
}

}  // namespace fgmoe
