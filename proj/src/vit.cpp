// SPDX-License-Identifier: Apache-2.0

#include "fgmoe/vit.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "fgmoe/rng.hpp"

namespace fgmoe {

bool ModelConfig::is_moe(int block) const {
  return std::find(moe_blocks.begin(), moe_blocks.end(), block) != moe_blocks.end();
}

LayerScaleVariant ModelConfig::layerscale_for(int block) const {
  auto it = layerscale.find(block);
  return it == layerscale.end() ? LayerScaleVariant::identity : it->second;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("model config: " + what); };
  if (patch_side == 0 || image_side == 0) fail("image_side and patch_side must be >= 1");
  if (image_side % patch_side != 0) {
    fail("image_side " + std::to_string(image_side) + " is not divisible by patch_side " +
         std::to_string(patch_side));
  }
  if (channels == 0) fail("channels must be >= 1");
  if (dim == 0 || heads == 0) fail("dim and heads must be >= 1");
  if (dim % heads != 0) {
    fail("dim " + std::to_string(dim) + " is not divisible by heads " + std::to_string(heads));
  }
  if (depth == 0) fail("depth must be >= 1");
  if (classes == 0) fail("classes must be >= 1");
  if (mlp_expansion == 0) fail("mlp_expansion must be >= 1");
  for (int b : moe_blocks) {
    if (b < 1 || static_cast<std::size_t>(b) > depth) {
      fail("moe block " + std::to_string(b) + " outside [1, " + std::to_string(depth) + "]");
    }
  }
  if (!moe_blocks.empty() && (experts == 0 || slots == 0)) fail("experts and slots must be >= 1");
  for (const auto& [b, v] : layerscale) {
    if (!is_moe(b)) fail("layerscale set on block " + std::to_string(b) + ", which is not an MoE block");
  }
}

ModelConfig reference_model_config() {
  ModelConfig c;
  c.image_side = 224;
  c.patch_side = 16;
  c.dim = 384;
  c.depth = 8;
  c.heads = 6;
  c.moe_blocks = {7, 8};
  c.experts = 32;
  c.slots = 1;
  c.layerscale = {{8, LayerScaleVariant::vector}};
  c.classes = 1000;
  return c;
}

ModelConfig tiny_model_config() {
  ModelConfig c;
  c.image_side = 8;
  c.patch_side = 4;
  c.channels = 3;
  c.dim = 8;
  c.depth = 2;
  c.heads = 2;
  c.moe_blocks = {2};
  c.experts = 2;
  c.slots = 1;
  c.mlp_expansion = 4;
  c.layerscale = {{2, LayerScaleVariant::vector}};
  c.classes = 2;
  return c;
}

std::string format_layerscale(const std::map<int, LayerScaleVariant>& map) {
  std::string out;
  for (const auto& [b, v] : map) {
    if (!out.empty()) out += ',';
    out += std::to_string(b) + ":" + std::string(to_string(v));
  }
  return out;
}

std::map<int, LayerScaleVariant> parse_layerscale_map(const std::string& text) {
  std::map<int, LayerScaleVariant> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item.erase(std::remove_if(item.begin(), item.end(), ::isspace), item.end());
    if (item.empty()) continue;
    const auto colon = item.find(':');
    if (colon == std::string::npos) {
      throw std::invalid_argument("layerscale entry '" + item + "' must be block:variant");
    }
    int block = 0;
    try {
      block = std::stoi(item.substr(0, colon));
    } catch (const std::exception&) {
      throw std::invalid_argument("layerscale entry '" + item + "': bad block index");
    }
    out[block] = parse_layerscale(item.substr(colon + 1));
  }
  return out;
}

namespace {

template <typename T>
Tensor<T> trunc_normal(Shape shape, Rng& rng) {
  std::vector<T> v(numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.trunc_normal(0.02));
  return Tensor<T>::from(std::move(shape), std::move(v), true);
}

template <typename T>
Tensor<T> zeros(Shape shape) {
  return Tensor<T>::zeros(std::move(shape), true);
}

template <typename T>
Tensor<T> ones(Shape shape) {
  return Tensor<T>::full(std::move(shape), T(1), true);
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  return add(matmul(x, w), b);
}

}  // namespace

template <typename T>
VisionTransformer<T>::VisionTransformer(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed);
  const std::size_t d = config_.dim;
  const std::size_t patch_in = config_.channels * config_.patch_side * config_.patch_side;
  const std::size_t hidden = config_.mlp_expansion * d;
  patch_weight = trunc_normal<T>(Shape{patch_in, d}, rng);
  patch_bias = zeros<T>(Shape{d});
  pos_embed = trunc_normal<T>(Shape{config_.tokens(), d}, rng);
  for (std::size_t i = 1; i <= config_.depth; ++i) {
    const int index = static_cast<int>(i);
    Block<T> b;
    b.ln1_gain = ones<T>(Shape{d});
    b.ln1_bias = zeros<T>(Shape{d});
    b.qkv_weight = trunc_normal<T>(Shape{d, 3 * d}, rng);
    b.qkv_bias = zeros<T>(Shape{3 * d});
    b.proj_weight = trunc_normal<T>(Shape{d, d}, rng);
    b.proj_bias = zeros<T>(Shape{d});
    b.ln2_gain = ones<T>(Shape{d});
    b.ln2_bias = zeros<T>(Shape{d});
    if (config_.is_moe(index)) {
      b.moe.emplace(d, config_.experts, config_.slots, hidden, config_.layerscale_for(index), rng);
    } else {
      b.fc1_weight = trunc_normal<T>(Shape{d, hidden}, rng);
      b.fc1_bias = zeros<T>(Shape{hidden});
      b.fc2_weight = trunc_normal<T>(Shape{hidden, d}, rng);
      b.fc2_bias = zeros<T>(Shape{d});
    }
    blocks_.push_back(std::move(b));
  }
  norm_gain = ones<T>(Shape{d});
  norm_bias = zeros<T>(Shape{d});
  head_weight = trunc_normal<T>(Shape{d, config_.classes}, rng);
  head_bias = zeros<T>(Shape{config_.classes});
}

template <typename T>
Tensor<T> VisionTransformer<T>::patch_embed(const Tensor<T>& images) const {
  const std::size_t c = config_.channels, side = config_.image_side, ps = config_.patch_side;
  if (images.rank() != 4 || images.dim(1) != c || images.dim(2) != side || images.dim(3) != side) {
    throw ShapeError("patch_embed: expected [B," + std::to_string(c) + "," + std::to_string(side) + "," +
                     std::to_string(side) + "] images, got " + shape_str(images.shape()));
  }
  const std::size_t batch = images.dim(0), grid = config_.grid(), m = config_.tokens();
  const std::size_t patch_in = c * ps * ps;
  std::vector<T> patches(batch * m * patch_in);
  const auto px = images.data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t gy = 0; gy < grid; ++gy) {
      for (std::size_t gx = 0; gx < grid; ++gx) {
        T* dst = patches.data() + ((b * m) + gy * grid + gx) * patch_in;
        for (std::size_t ch = 0; ch < c; ++ch) {
          for (std::size_t y = 0; y < ps; ++y) {
            for (std::size_t x = 0; x < ps; ++x) {
              *dst++ = px[((b * c + ch) * side + gy * ps + y) * side + gx * ps + x];
            }
          }
        }
      }
    }
  }
  auto flat = Tensor<T>::from(Shape{batch * m, patch_in}, std::move(patches));
  auto tokens = reshape(linear(flat, patch_weight, patch_bias), Shape{batch, m, config_.dim});
  return add(tokens, pos_embed);
}

template <typename T>
Tensor<T> VisionTransformer<T>::attention(const Tensor<T>& x, int index) const {
  const Block<T>& blk = block(index);
  const std::size_t batch = x.dim(0), m = x.dim(1), d = config_.dim, heads = config_.heads;
  const std::size_t dh = d / heads;
  auto h = layer_norm(x, blk.ln1_gain, blk.ln1_bias);
  auto qkv = reshape(linear(h, blk.qkv_weight, blk.qkv_bias), Shape{batch, m, 3, heads, dh});
  auto split = permute(qkv, {2, 0, 3, 1, 4});  // [3, B, H, m, dh]
  auto part = [&](std::size_t i) { return reshape(slice(split, 0, i, i + 1), Shape{batch * heads, m, dh}); };
  auto q = part(0), k = part(1), v = part(2);
  auto scores = scale(bmm(q, transpose(k)), T(1) / std::sqrt(static_cast<T>(dh)));
  auto context = bmm(softmax(scores, -1), v);  // [B*H, m, dh]
  auto merged = reshape(permute(reshape(context, Shape{batch, heads, m, dh}), {0, 2, 1, 3}),
                        Shape{batch, m, d});
  return add(x, linear(merged, blk.proj_weight, blk.proj_bias));
}

template <typename T>
BlockOutput<T> VisionTransformer<T>::block_forward(const Tensor<T>& x, int index) const {
  if (index < 1 || static_cast<std::size_t>(index) > config_.depth) {
    throw std::out_of_range("block index " + std::to_string(index) + " outside [1, " +
                            std::to_string(config_.depth) + "]");
  }
  const Block<T>& blk = block(index);
  auto x1 = attention(x, index);
  auto h = layer_norm(x1, blk.ln2_gain, blk.ln2_bias);
  BlockOutput<T> out;
  if (blk.moe) {
    auto moe = blk.moe->forward(h, x1);
    out.x = moe.y;
    out.dispatch = moe.dispatch;
  } else {
    auto mlp = linear(gelu(linear(h, blk.fc1_weight, blk.fc1_bias)), blk.fc2_weight, blk.fc2_bias);
    out.x = add(x1, mlp);
  }
  return out;
}

template <typename T>
ForwardTrace<T> VisionTransformer<T>::forward(const Tensor<T>& images) const {
  ForwardTrace<T> trace;
  auto x = patch_embed(images);
  for (std::size_t i = 1; i <= config_.depth; ++i) {
    auto out = block_forward(x, static_cast<int>(i));
    x = out.x;
    if (out.dispatch) trace.dispatch.emplace(static_cast<int>(i), *out.dispatch);
  }
  auto pooled = mean(layer_norm(x, norm_gain, norm_bias), 1);  // [B, d]
  trace.logits = linear(pooled, head_weight, head_bias);
  return trace;
}

template <typename T>
ParamList<T> VisionTransformer<T>::parameters() const {
  ParamList<T> out;
  out.push_back({"patch.weight", patch_weight, true});
  out.push_back({"patch.bias", patch_bias, false});
  out.push_back({"pos_embed", pos_embed, false});
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const Block<T>& b = blocks_[i];
    const std::string p = "block" + std::to_string(i + 1);
    out.push_back({p + ".ln1.gain", b.ln1_gain, false});
    out.push_back({p + ".ln1.bias", b.ln1_bias, false});
    out.push_back({p + ".attn.qkv_weight", b.qkv_weight, true});
    out.push_back({p + ".attn.qkv_bias", b.qkv_bias, false});
    out.push_back({p + ".attn.proj_weight", b.proj_weight, true});
    out.push_back({p + ".attn.proj_bias", b.proj_bias, false});
    out.push_back({p + ".ln2.gain", b.ln2_gain, false});
    out.push_back({p + ".ln2.bias", b.ln2_bias, false});
    if (b.moe) {
      b.moe->collect(p + ".moe", out);
    } else {
      out.push_back({p + ".mlp.fc1_weight", b.fc1_weight, true});
      out.push_back({p + ".mlp.fc1_bias", b.fc1_bias, false});
      out.push_back({p + ".mlp.fc2_weight", b.fc2_weight, true});
      out.push_back({p + ".mlp.fc2_bias", b.fc2_bias, false});
    }
  }
  out.push_back({"norm.gain", norm_gain, false});
  out.push_back({"norm.bias", norm_bias, false});
  out.push_back({"head.weight", head_weight, true});
  out.push_back({"head.bias", head_bias, false});
  return out;
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw ShapeError("cross_entropy: logits " + shape_str(logits.shape()) + " for " +
                     std::to_string(labels.size()) + " labels");
  }
  const std::size_t batch = logits.dim(0), classes = logits.dim(1);
  std::vector<T> onehot(batch * classes, T(0));
  for (std::size_t b = 0; b < batch; ++b) {
    if (labels[b] < 0 || static_cast<std::size_t>(labels[b]) >= classes) {
      throw std::out_of_range("cross_entropy: label " + std::to_string(labels[b]) + " outside [0, " +
                              std::to_string(classes) + ")");
    }
    onehot[b * classes + static_cast<std::size_t>(labels[b])] = T(1);
  }
  auto picked = sum_all(mul(log_softmax(logits, -1), Tensor<T>::from(Shape{batch, classes}, std::move(onehot))));
  return scale(picked, T(-1) / static_cast<T>(batch));
}

template <typename To, typename From>
void copy_parameters(const VisionTransformer<From>& from, VisionTransformer<To>& to) {
  const auto src = from.parameters();
  auto dst = to.parameters();
  if (src.size() != dst.size()) throw std::invalid_argument("copy_parameters: models differ in layout");
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i].name != dst[i].name || src[i].tensor.shape() != dst[i].tensor.shape()) {
      throw std::invalid_argument("copy_parameters: mismatch at " + src[i].name);
    }
    auto out = dst[i].tensor.mutable_data();
    const auto in = src[i].tensor.data();
    for (std::size_t j = 0; j < out.size(); ++j) out[j] = static_cast<To>(in[j]);
  }
}

template class VisionTransformer<float>;
template class VisionTransformer<double>;
template Tensor<float> cross_entropy(const Tensor<float>&, std::span<const int>);
template Tensor<double> cross_entropy(const Tensor<double>&, std::span<const int>);
template void copy_parameters(const VisionTransformer<float>&, VisionTransformer<float>&);
template void copy_parameters(const VisionTransformer<float>&, VisionTransformer<double>&);
template void copy_parameters(const VisionTransformer<double>&, VisionTransformer<float>&);
template void copy_parameters(const VisionTransformer<double>&, VisionTransformer<double>&);

}  // namespace fgmoe
