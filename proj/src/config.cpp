// SPDX-License-Identifier: Apache-2.0

#include "fgmoe/config.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

namespace fgmoe {

void TrainConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("train config: " + what); };
  if (epochs == 0) fail("epochs must be >= 1");
  if (warmup_epochs > epochs) fail("warmup_epochs exceeds epochs");
  if (!(base_lr > 0.0) || !(warmup_lr > 0.0) || !(min_lr > 0.0)) fail("learning rates must be > 0");
  if (!(weight_decay >= 0.0)) fail("weight_decay must be >= 0");
  if (batch_size == 0) fail("batch_size must be >= 1");
  if (precision != 32 && precision != 64) fail("precision must be 32 or 64");
  try {
    guidance.validate();
  } catch (const std::invalid_argument& e) {
    fail(e.what());
  }
}

bool TrainConfig::operator==(const TrainConfig& o) const {
  auto same_targets = [](const auto& a, const auto& b) {
    return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin(), [](const auto& x, const auto& y) {
             return x.layer == y.layer && x.polarity == y.polarity;
           });
  };
  return epochs == o.epochs && warmup_epochs == o.warmup_epochs && base_lr == o.base_lr &&
         warmup_lr == o.warmup_lr && min_lr == o.min_lr && weight_decay == o.weight_decay &&
         batch_size == o.batch_size && seed == o.seed && precision == o.precision &&
         checkpoint_every == o.checkpoint_every && guidance.enabled == o.guidance.enabled &&
         guidance.lambda == o.guidance.lambda && guidance.epsilon == o.guidance.epsilon &&
         same_targets(guidance.targets, o.guidance.targets);
}

TrainConfig reference_train_config() {
  TrainConfig c;
  c.epochs = 100;
  c.warmup_epochs = 30;
  c.base_lr = 5e-4;
  c.warmup_lr = 5e-7;
  c.min_lr = 5e-6;
  c.weight_decay = 0.05;
  c.batch_size = 1024;
  c.guidance = GuidanceConfig{true, 0.01, 1e-6, {{8, MaskPolarity::foreground}}};
  return c;
}

void RunConfig::validate() const {
  try {
    model.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  train.validate();
  for (const auto& t : train.guidance.targets) {
    if (!model.is_moe(t.layer)) {
      throw ConfigError("guidance layer " + std::to_string(t.layer) + " is not an MoE block");
    }
  }
  if (train.guidance.enabled && train.guidance.targets.empty()) {
    throw ConfigError("guidance enabled without target layers");
  }
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

template <typename U>
U parse_number(const std::string& key, const std::string& value) {
  U out{};
  const char* first = value.data();
  const char* last = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(first, last, out);
  if (ec != std::errc() || ptr != last) {
    throw ConfigError("config key '" + key + "': cannot parse '" + value + "'");
  }
  return out;
}

double parse_real(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const double v = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': cannot parse '" + value + "' as a number");
  }
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "on") return true;
  if (value == "false" || value == "0" || value == "off") return false;
  throw ConfigError("config key '" + key + "': expected true|false, got '" + value + "'");
}

std::vector<int> parse_int_list(const std::string& key, const std::string& value) {
  std::vector<int> out;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(parse_number<int>(key, item));
  }
  return out;
}

std::string format_int_list(const std::vector<int>& v) {
  std::string out;
  for (int x : v) {
    if (!out.empty()) out += ',';
    out += std::to_string(x);
  }
  return out;
}

struct Field {
  std::string key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename U>
Field size_field(std::string key, U RunConfig::*section, std::size_t U::*member) {
  return Field{key,
               [key, section, member](RunConfig& c, const std::string& v) {
                 c.*section.*member = parse_number<std::size_t>(key, v);
               },
               [section, member](const RunConfig& c) { return std::to_string(c.*section.*member); }};
}

Field train_real(std::string key, double TrainConfig::*member) {
  return Field{key, [key, member](RunConfig& c, const std::string& v) { c.train.*member = parse_real(key, v); },
               [member](const RunConfig& c) { return fmt_double(c.train.*member); }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    f.push_back(size_field("model.image_side", &RunConfig::model, &ModelConfig::image_side));
    f.push_back(size_field("model.patch_side", &RunConfig::model, &ModelConfig::patch_side));
    f.push_back(size_field("model.channels", &RunConfig::model, &ModelConfig::channels));
    f.push_back(size_field("model.dim", &RunConfig::model, &ModelConfig::dim));
    f.push_back(size_field("model.depth", &RunConfig::model, &ModelConfig::depth));
    f.push_back(size_field("model.heads", &RunConfig::model, &ModelConfig::heads));
    f.push_back(Field{"model.moe_blocks",
                      [](RunConfig& c, const std::string& v) { c.model.moe_blocks = parse_int_list("model.moe_blocks", v); },
                      [](const RunConfig& c) { return format_int_list(c.model.moe_blocks); }});
    f.push_back(size_field("model.experts", &RunConfig::model, &ModelConfig::experts));
    f.push_back(size_field("model.slots", &RunConfig::model, &ModelConfig::slots));
    f.push_back(size_field("model.mlp_expansion", &RunConfig::model, &ModelConfig::mlp_expansion));
    f.push_back(Field{"model.layerscale",
                      [](RunConfig& c, const std::string& v) {
                        try {
                          c.model.layerscale = parse_layerscale_map(v);
                        } catch (const std::invalid_argument& e) {
                          throw ConfigError(std::string("config key 'model.layerscale': ") + e.what());
                        }
                      },
                      [](const RunConfig& c) { return format_layerscale(c.model.layerscale); }});
    f.push_back(size_field("model.classes", &RunConfig::model, &ModelConfig::classes));
    f.push_back(size_field("train.epochs", &RunConfig::train, &TrainConfig::epochs));
    f.push_back(size_field("train.warmup_epochs", &RunConfig::train, &TrainConfig::warmup_epochs));
    f.push_back(train_real("train.base_lr", &TrainConfig::base_lr));
    f.push_back(train_real("train.warmup_lr", &TrainConfig::warmup_lr));
    f.push_back(train_real("train.min_lr", &TrainConfig::min_lr));
    f.push_back(train_real("train.weight_decay", &TrainConfig::weight_decay));
    f.push_back(size_field("train.batch_size", &RunConfig::train, &TrainConfig::batch_size));
    f.push_back(Field{"train.seed",
                      [](RunConfig& c, const std::string& v) { c.train.seed = parse_number<std::uint64_t>("train.seed", v); },
                      [](const RunConfig& c) { return std::to_string(c.train.seed); }});
    f.push_back(Field{"train.precision",
                      [](RunConfig& c, const std::string& v) { c.train.precision = parse_number<int>("train.precision", v); },
                      [](const RunConfig& c) { return std::to_string(c.train.precision); }});
    f.push_back(size_field("train.checkpoint_every", &RunConfig::train, &TrainConfig::checkpoint_every));
    f.push_back(Field{"guidance.enabled",
                      [](RunConfig& c, const std::string& v) { c.train.guidance.enabled = parse_bool("guidance.enabled", v); },
                      [](const RunConfig& c) { return std::string(c.train.guidance.enabled ? "true" : "false"); }});
    f.push_back(Field{"guidance.lambda",
                      [](RunConfig& c, const std::string& v) { c.train.guidance.lambda = parse_real("guidance.lambda", v); },
                      [](const RunConfig& c) { return fmt_double(c.train.guidance.lambda); }});
    f.push_back(Field{"guidance.epsilon",
                      [](RunConfig& c, const std::string& v) { c.train.guidance.epsilon = parse_real("guidance.epsilon", v); },
                      [](const RunConfig& c) { return fmt_double(c.train.guidance.epsilon); }});
    f.push_back(Field{"guidance.layers",
                      [](RunConfig& c, const std::string& v) {
                        try {
                          c.train.guidance.targets = parse_targets(v);
                        } catch (const std::invalid_argument& e) {
                          throw ConfigError(std::string("config key 'guidance.layers': ") + e.what());
                        }
                      },
                      [](const RunConfig& c) { return format_targets(c.train.guidance.targets); }});
    return f;
  }();
  return table;
}

}  // namespace

std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& f : fields()) out.push_back(f.key);
  return out;
}

void apply_override(RunConfig& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("expected key=value, got '" + assignment + "'");
  const std::string key = trim(assignment.substr(0, eq));
  const std::string value = trim(assignment.substr(eq + 1));
  const auto& table = fields();
  auto it = std::find_if(table.begin(), table.end(), [&](const Field& f) { return f.key == key; });
  if (it == table.end()) throw ConfigError("unknown config key '" + key + "'");
  it->set(config, value);
}

void apply_text(RunConfig& config, const std::string& text) {
  std::stringstream ss(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(ss, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    try {
      apply_override(config, line);
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  RunConfig config;
  try {
    apply_text(config, buf.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return config;
}

std::string format_config(const RunConfig& config) {
  std::string out;
  for (const auto& f : fields()) out += f.key + " = " + f.get(config) + "\n";
  return out;
}

}  // namespace fgmoe
