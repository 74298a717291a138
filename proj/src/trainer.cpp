// SPDX-License-Identifier: Apache-2.0

#include "fgmoe/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

namespace fgmoe {

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

template <typename T>
constexpr int precision_bits() {
  return sizeof(T) == 4 ? 32 : 64;
}

template <typename T>
constexpr const char* dtype_tag() {
  return sizeof(T) == 4 ? "f32" : "f64";
}

}  // namespace

std::string metrics_header(const ModelConfig& model) {
  std::string out = "epoch,split,top1,loss_cls,loss_aux";
  for (int layer : model.moe_blocks) out += ",iou_layer_" + std::to_string(layer);
  return out;
}

std::string metrics_row(const EpochMetrics& m) {
  std::string out = std::to_string(m.epoch) + "," + m.split + "," + fmt(m.top1) + "," + fmt(m.loss_cls) + "," +
                    fmt(m.loss_aux);
  for (const auto& l : m.iou) out += "," + fmt(l.iou);
  return out;
}

std::string metrics_csv(const ModelConfig& model, const std::vector<EpochMetrics>& rows) {
  std::string out = metrics_header(model) + "\n";
  for (const auto& r : rows) out += metrics_row(r) + "\n";
  return out;
}

std::vector<EpochMetrics> parse_metrics_csv(const std::string& text) {
  std::stringstream in(text);
  std::string line;
  std::vector<int> layers;
  if (!std::getline(in, line)) return {};
  {
    std::stringstream hs(line);
    std::string col;
    for (int i = 0; std::getline(hs, col, ','); ++i) {
      if (i >= 5) {
        const std::string prefix = "iou_layer_";
        if (col.rfind(prefix, 0) != 0) throw std::invalid_argument("metrics csv: unexpected column " + col);
        layers.push_back(std::stoi(col.substr(prefix.size())));
      }
    }
  }
  std::vector<EpochMetrics> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ls(line);
    std::vector<std::string> cols;
    std::string col;
    while (std::getline(ls, col, ',')) cols.push_back(col);
    if (cols.size() != 5 + layers.size()) throw std::invalid_argument("metrics csv: bad row '" + line + "'");
    EpochMetrics m;
    m.epoch = std::stoull(cols[0]);
    m.split = cols[1];
    m.top1 = std::stod(cols[2]);
    m.loss_cls = std::stod(cols[3]);
    m.loss_aux = std::stod(cols[4]);
    for (std::size_t i = 0; i < layers.size(); ++i) m.iou.push_back({layers[i], std::stod(cols[5 + i])});
    rows.push_back(std::move(m));
  }
  return rows;
}

template <typename T>
IouSum dispatch_iou(const ForwardTrace<T>& trace, std::span<const BinaryMask> masks, int layer) {
  auto it = trace.dispatch.find(layer);
  if (it == trace.dispatch.end()) {
    throw std::out_of_range("dispatch_iou: no dispatch weights recorded for layer " + std::to_string(layer));
  }
  const Tensor<T>& d = it->second;
  const std::size_t batch = d.dim(0), m = d.dim(1), slots = d.dim(2);
  if (masks.size() != batch) throw ShapeError("dispatch_iou: mask count does not match batch");
  const std::size_t side = grid_side(m);
  IouSum out;
  std::vector<T> w(m);
  for (std::size_t b = 0; b < batch; ++b) {
    const BinaryMask grid = resample_mask(masks[b], side);
    if (grid.empty()) continue;
    const T* row = d.data().data() + b * m * slots;
    for (std::size_t i = 0; i < m; ++i) {
      T acc = T(0);
      for (std::size_t j = 0; j < slots; ++j) acc += row[i * slots + j];
      w[i] = acc / static_cast<T>(slots);
    }
    const auto attention = binarize_by_mean<T>(w);
    out.sum += mask_iou(attention, grid.bits);
    ++out.count;
  }
  return out;
}

template <typename T>
Tensor<T> stack_images(const std::vector<Sample>& samples, std::span<const std::size_t> indices) {
  if (indices.empty()) throw std::invalid_argument("stack_images: empty batch");
  const Image& first = samples.at(indices[0]).image;
  const std::size_t per = first.pixels.size();
  std::vector<T> values(indices.size() * per);
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const Image& img = samples.at(indices[b]).image;
    if (img.pixels.size() != per) throw ShapeError("stack_images: images differ in size");
    std::transform(img.pixels.begin(), img.pixels.end(), values.begin() + static_cast<std::ptrdiff_t>(b * per),
                   [](float v) { return static_cast<T>(v); });
  }
  return Tensor<T>::from({indices.size(), first.channels, first.height, first.width}, std::move(values));
}

template <typename T>
struct Trainer<T>::Pass {
  ForwardTrace<T> trace;
  Tensor<T> cls, aux, total;
  std::vector<BinaryMask> masks;
  std::vector<int> labels;
};

template <typename T>
struct Trainer<T>::Accumulator {
  std::size_t samples = 0;
  std::size_t correct = 0;
  double cls = 0.0;
  double aux = 0.0;
  std::map<int, IouSum> iou;
};

template <typename T>
Trainer<T>::Trainer(RunConfig config)
    : config_((config.validate(), std::move(config))),
      model_(config_.model, config_.train.seed),
      optimizer_(model_.parameters(), config_.train.weight_decay),
      rng_(mix_seed(config_.train.seed, 0x5348554646)) {
  if (config_.train.precision != precision_bits<T>()) {
    throw ConfigError("trainer precision " + std::to_string(precision_bits<T>()) + " does not match train.precision " +
                      std::to_string(config_.train.precision));
  }
}

template <typename T>
typename Trainer<T>::Pass Trainer<T>::forward_pass(const std::vector<Sample>& data,
                                                   std::span<const std::size_t> batch) const {
  Pass p;
  for (std::size_t i : batch) {
    p.masks.push_back(data.at(i).mask);
    p.labels.push_back(data.at(i).label);
  }
  p.trace = model_.forward(stack_images<T>(data, batch));
  p.cls = cross_entropy<T>(p.trace.logits, p.labels);

  const GuidanceConfig& g = config_.train.guidance;
  if (g.targets.empty()) {
    p.aux = Tensor<T>::scalar(T(0));
  } else if (g.enabled) {
    std::vector<LayerDispatch<T>> layers;
    for (const auto& t : g.targets) layers.push_back({t.layer, t.polarity, p.trace.dispatch.at(t.layer)});
    p.aux = aux_loss<T>(layers, p.masks, g.epsilon).loss;
  } else {
    // Logged only; kept off the graph.
    NoGradGuard no_grad;
    std::vector<LayerDispatch<T>> layers;
    for (const auto& t : g.targets) layers.push_back({t.layer, t.polarity, detach(p.trace.dispatch.at(t.layer))});
    p.aux = aux_loss<T>(layers, p.masks, g.epsilon).loss;
  }
  p.total = total_loss<T>(p.cls, p.aux, g.enabled ? g.lambda : 0.0);
  return p;
}

template <typename T>
void Trainer<T>::accumulate(const Pass& p, Accumulator& acc) const {
  const std::size_t batch = p.labels.size();
  const std::size_t classes = p.trace.logits.dim(1);
  const auto logits = p.trace.logits.data();
  for (std::size_t b = 0; b < batch; ++b) {
    const T* row = logits.data() + b * classes;
    const auto best = static_cast<int>(std::max_element(row, row + classes) - row);
    acc.correct += best == p.labels[b] ? 1 : 0;
  }
  acc.samples += batch;
  acc.cls += static_cast<double>(p.cls.item()) * static_cast<double>(batch);
  acc.aux += static_cast<double>(p.aux.item()) * static_cast<double>(batch);
  for (int layer : config_.model.moe_blocks) {
    const IouSum s = dispatch_iou(p.trace, std::span<const BinaryMask>(p.masks), layer);
    acc.iou[layer].sum += s.sum;
    acc.iou[layer].count += s.count;
  }
}

template <typename T>
EpochMetrics Trainer<T>::summarize(const Accumulator& acc, const std::string& split, std::size_t epoch) const {
  EpochMetrics m;
  m.epoch = epoch;
  m.split = split;
  const double n = static_cast<double>(std::max<std::size_t>(acc.samples, 1));
  m.top1 = static_cast<double>(acc.correct) / n;
  m.loss_cls = acc.cls / n;
  m.loss_aux = acc.aux / n;
  for (int layer : config_.model.moe_blocks) {
    auto it = acc.iou.find(layer);
    m.iou.push_back({layer, it == acc.iou.end() ? 0.0 : it->second.mean()});
  }
  return m;
}

template <typename T>
StepLosses Trainer<T>::step(const std::vector<Sample>& data, std::span<const std::size_t> batch, double lr) {
  Pass p = forward_pass(data, batch);
  optimizer_.zero_grad();
  p.total.backward();
  optimizer_.step(lr);
  StepLosses s{static_cast<double>(p.total.item()), static_cast<double>(p.cls.item()),
               static_cast<double>(p.aux.item())};
  step_losses_.push_back(s);
  return s;
}

template <typename T>
EpochMetrics Trainer<T>::evaluate(const std::vector<Sample>& data, const std::string& split,
                                  std::size_t epoch) const {
  NoGradGuard no_grad;
  Accumulator acc;
  const std::size_t bs = config_.train.batch_size;
  std::vector<std::size_t> batch;
  for (std::size_t start = 0; start < data.size(); start += bs) {
    batch.clear();
    for (std::size_t i = start; i < std::min(data.size(), start + bs); ++i) batch.push_back(i);
    accumulate(forward_pass(data, batch), acc);
  }
  return summarize(acc, split, epoch);
}

template <typename T>
void Trainer<T>::fit(const std::vector<Sample>& train, const std::vector<Sample>& val, const EpochCallback& on_epoch) {
  if (train.empty()) throw std::invalid_argument("fit: empty training split");
  const std::size_t bs = config_.train.batch_size;
  const std::uint64_t steps_per_epoch = (train.size() + bs - 1) / bs;
  std::vector<std::size_t> batch;
  while (epoch_ < config_.train.epochs) {
    const auto order = shuffled_order(train.size(), epoch_, rng_.next());
    Accumulator acc;
    for (std::size_t start = 0; start < order.size(); start += bs) {
      batch.assign(order.begin() + static_cast<std::ptrdiff_t>(start),
                   order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), start + bs)));
      Pass p = forward_pass(train, batch);
      optimizer_.zero_grad();
      p.total.backward();
      optimizer_.step(lr_at(optimizer_.steps(), steps_per_epoch, config_.train));
      step_losses_.push_back({static_cast<double>(p.total.item()), static_cast<double>(p.cls.item()),
                              static_cast<double>(p.aux.item())});
      accumulate(p, acc);
    }
    ++epoch_;
    history_.push_back(summarize(acc, "train", epoch_));
    if (!val.empty()) history_.push_back(evaluate(val, "val", epoch_));
    if (on_epoch) on_epoch(*this, epoch_);
  }
}

template <typename T>
Checkpoint Trainer<T>::checkpoint() const {
  Checkpoint c;
  c.dtype = dtype_tag<T>();
  c.epoch = epoch_;
  c.steps = optimizer_.steps();
  c.rng_state = rng_.state();
  c.config_text = format_config(config_);
  c.metrics_csv = metrics_csv(config_.model, history_);
  const auto& params = optimizer_.params();
  for (const auto& p : params) c.tensors.push_back(CheckpointTensor::pack<T>(p.name, p.tensor.shape(), p.tensor.data()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    c.tensors.push_back(CheckpointTensor::pack<T>("adam.m/" + params[i].name, params[i].tensor.shape(),
                                                  optimizer_.first_moments()[i]));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    c.tensors.push_back(CheckpointTensor::pack<T>("adam.v/" + params[i].name, params[i].tensor.shape(),
                                                  optimizer_.second_moments()[i]));
  }
  return c;
}

template <typename T>
void Trainer<T>::restore(const Checkpoint& c) {
  if (c.dtype != dtype_tag<T>()) {
    throw CheckpointError("checkpoint dtype " + c.dtype + " does not match trainer dtype " + dtype_tag<T>());
  }
  RunConfig saved;
  apply_text(saved, c.config_text);
  if (!(saved.model == config_.model)) {
    throw CheckpointError("checkpoint model configuration differs from the requested one");
  }
  auto load_into = [&](const std::string& name, const Shape& shape, std::span<T> dst) {
    const CheckpointTensor& t = c.find(name);
    if (t.shape != shape) {
      throw CheckpointError("tensor " + name + ": shape " + shape_str(t.shape) + " expected " + shape_str(shape));
    }
    const auto values = t.template unpack<T>();
    std::copy(values.begin(), values.end(), dst.begin());
  };
  auto params = optimizer_.params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    load_into(p.name, p.tensor.shape(), p.tensor.mutable_data());
    load_into("adam.m/" + p.name, p.tensor.shape(), optimizer_.first_moments()[i]);
    load_into("adam.v/" + p.name, p.tensor.shape(), optimizer_.second_moments()[i]);
  }
  optimizer_.set_steps(c.steps);
  rng_.set_state(c.rng_state);
  epoch_ = c.epoch;
  history_ = parse_metrics_csv(c.metrics_csv);
}

#define FGMOE_INSTANTIATE(T)                                                                             \
  template IouSum dispatch_iou(const ForwardTrace<T>&, std::span<const BinaryMask>, int);                \
  template Tensor<T> stack_images(const std::vector<Sample>&, std::span<const std::size_t>);            \
  template class Trainer<T>;

FGMOE_INSTANTIATE(float)
FGMOE_INSTANTIATE(double)
#undef FGMOE_INSTANTIATE

}  // namespace fgmoe
