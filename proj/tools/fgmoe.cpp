// SPDX-License-Identifier: Apache-2.0
//
// fgmoe gen-data | train | eval | visualize | grad-check
//
// Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fgmoe/checkpoint.hpp"
#include "fgmoe/config.hpp"
#include "fgmoe/data.hpp"
#include "fgmoe/model_check.hpp"
#include "fgmoe/runtime.hpp"
#include "fgmoe/trainer.hpp"
#include "fgmoe/viz.hpp"

namespace fs = std::filesystem;
using namespace fgmoe;

namespace {

constexpr int kOk = 0;
constexpr int kRuntime = 1;
constexpr int kUsage = 2;

struct UsageError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

std::string summary_line(const EpochMetrics& m) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "top1=%.6f", m.top1);
  std::string out = buf;
  for (const auto& l : m.iou) {
    std::snprintf(buf, sizeof(buf), " iou@%d=%.6f", l.layer, l.iou);
    out += buf;
  }
  return out;
}

RunConfig build_config(const std::string& config_path, const std::vector<std::string>& overrides, RunConfig base) {
  RunConfig config = config_path.empty() ? std::move(base) : load_config(config_path);
  for (const auto& o : overrides) apply_override(config, o);
  config.validate();
  return config;
}

// --- gen-data -----------------------------------------------------------------

struct GenArgs {
  std::string out;
  std::size_t n = 0, val = 0, classes = 4, side = 32;
  std::uint64_t seed = 0;
};

int cmd_gen_data(const GenArgs& a) {
  if (a.classes < 1 || a.classes > kShapeFamilies) {
    throw UsageError("--classes must be in [1, " + std::to_string(kShapeFamilies) + "]");
  }
  if (a.side < 8) throw UsageError("--side must be >= 8");
  const auto counts = generate_synthetic(GenerateOptions{a.out, a.n, a.val, a.classes, a.seed, a.side});
  for (std::size_t k = 0; k < counts.size(); ++k) {
    std::cout << "class " << k << " (" << family_name(static_cast<ShapeFamily>(k)) << "): " << counts[k] << "\n";
  }
  return kOk;
}

// --- train / eval ---------------------------------------------------------------

struct TrainArgs {
  std::string config, data, out, resume;
  std::vector<std::string> overrides;
};

template <typename T>
int run_train(const RunConfig& config, const TrainArgs& a) {
  const auto& m = config.model;
  // Data problems surface here, before any training step.
  const auto train = load_split(a.data, "train", m.image_side, m.channels, m.classes);
  std::vector<Sample> val;
  if (fs::exists(fs::path(a.data) / "val.tsv")) val = load_split(a.data, "val", m.image_side, m.channels, m.classes);

  Trainer<T> trainer(config);
  if (!a.resume.empty()) trainer.restore(load_checkpoint(a.resume));

  const fs::path out(a.out);
  const std::size_t every = config.train.checkpoint_every;
  trainer.fit(train, val, [&](const Trainer<T>& t, std::size_t epoch) {
    write_file(out / "metrics.csv", metrics_csv(m, t.history()));
    if (every > 0 && epoch % every == 0) {
      save_checkpoint(out / ("checkpoint_epoch" + std::to_string(epoch) + ".bin"), t.checkpoint());
    }
  });
  write_file(out / "metrics.csv", metrics_csv(m, trainer.history()));
  save_checkpoint(out / "checkpoint.bin", trainer.checkpoint());
  if (!trainer.history().empty()) std::cout << summary_line(trainer.history().back()) << "\n";
  return kOk;
}

int cmd_train(const TrainArgs& a) {
  const RunConfig config = build_config(a.config, a.overrides, RunConfig{});
  fs::create_directories(a.out);
  write_file(fs::path(a.out) / "config.txt", format_config(config));
  return config.train.precision == 64 ? run_train<double>(config, a) : run_train<float>(config, a);
}

RunConfig checkpoint_config(const Checkpoint& c) {
  RunConfig config;
  apply_text(config, c.config_text);
  return config;
}

struct EvalArgs {
  std::string checkpoint, data, split = "val", out;
};

template <typename T>
int run_eval(const Checkpoint& c, const EvalArgs& a) {
  const RunConfig config = checkpoint_config(c);
  const auto& m = config.model;
  const auto samples = load_split(a.data, a.split, m.image_side, m.channels, m.classes);
  Trainer<T> trainer(config);
  trainer.restore(c);
  const EpochMetrics metrics = trainer.evaluate(samples, a.split, trainer.epochs_done());
  if (!a.out.empty()) {
    fs::create_directories(a.out);
    write_file(fs::path(a.out) / "eval.csv", metrics_csv(m, {metrics}));
  }
  std::cout << summary_line(metrics) << "\n";
  return kOk;
}

int cmd_eval(const EvalArgs& a) {
  const Checkpoint c = load_checkpoint(a.checkpoint);
  return c.dtype == "f64" ? run_eval<double>(c, a) : run_eval<float>(c, a);
}

// --- visualize ------------------------------------------------------------------

struct VizArgs {
  std::string checkpoint, data, split = "val", out;
  std::vector<std::size_t> samples{0};
  int layer = 0;
};

template <typename T>
int run_visualize(const Checkpoint& c, const VizArgs& a) {
  const RunConfig config = checkpoint_config(c);
  const auto& m = config.model;
  if (!m.is_moe(a.layer)) {
    std::string valid;
    for (int b : m.moe_blocks) valid += (valid.empty() ? "" : ", ") + std::to_string(b);
    throw UsageError("--layer " + std::to_string(a.layer) + " is not an MoE block; valid layers: " + valid);
  }
  const auto samples = load_split(a.data, a.split, m.image_side, m.channels, m.classes);
  Trainer<T> trainer(config);
  trainer.restore(c);
  const auto files = write_heatmaps(trainer.model(), samples, a.samples, a.layer, a.out);
  std::cout << "wrote " << files.size() << " files to " << a.out << "\n";
  return kOk;
}

int cmd_visualize(const VizArgs& a) {
  const Checkpoint c = load_checkpoint(a.checkpoint);
  return c.dtype == "f64" ? run_visualize<double>(c, a) : run_visualize<float>(c, a);
}

// --- grad-check -----------------------------------------------------------------

struct GradArgs {
  std::string config;
  std::vector<std::string> overrides;
  std::string variant = "all";
  int precision = 64;
  double tol = 1e-4;
  std::uint64_t seed = 0;
};

int cmd_grad_check(const GradArgs& a) {
  RunConfig base;
  base.model = tiny_model_config();
  base.train.guidance.targets = {{base.model.moe_blocks.back(), MaskPolarity::foreground}};
  const RunConfig config = build_config(a.config, a.overrides, base);
  if (grad_check_cost(config.model) > kGradCheckBudget) {
    throw UsageError("grad-check refused: tokens*dim*depth = " + std::to_string(grad_check_cost(config.model)) +
                     " exceeds the bound of " + std::to_string(kGradCheckBudget));
  }
  if (a.precision == 32) {
    std::cerr << "warning: tolerances are calibrated for 64-bit; the check runs in 64-bit regardless\n";
  }
  std::vector<LayerScaleVariant> variants;
  if (a.variant == "all") {
    variants = {LayerScaleVariant::identity, LayerScaleVariant::scalar, LayerScaleVariant::vector,
                LayerScaleVariant::scalar_linear, LayerScaleVariant::no_skip};
  } else {
    variants = {parse_layerscale(a.variant)};
  }
  bool ok = true;
  for (const auto v : variants) {
    ModelGradCheckOptions o;
    o.model = config.model;
    o.variant = v;
    o.lambda = config.train.guidance.lambda;
    o.seed = a.seed;
    o.rel_tol = a.tol;
    const GradCheckReport report = model_grad_check(o);
    std::printf("variant %s: %s (worst %.3e, tol %.1e)\n", std::string(to_string(v)).c_str(),
                report.passed() ? "ok" : "FAILED", report.worst(), a.tol);
    for (const auto& e : report.entries) {
      std::printf("  %-40s n=%-5zu max_rel=%.3e\n", e.name.c_str(), e.count, e.max_rel_error);
    }
    ok = ok && report.passed();
  }
  return ok ? kOk : kRuntime;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Foreground-guided soft MoE on a desk-scale ViT"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen-data", "Generate the synthetic shapes dataset");
  g->add_option("--out", gen.out, "Output directory")->required();
  g->add_option("--n", gen.n, "Training samples")->required();
  g->add_option("--val", gen.val, "Validation samples");
  g->add_option("--classes", gen.classes, "Shape families (1-8)");
  g->add_option("--seed", gen.seed, "Generator seed");
  g->add_option("--side", gen.side, "Image side in pixels");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train a model");
  t->add_option("--config", tr.config, "Config file");
  t->add_option("--data", tr.data, "Dataset directory")->required();
  t->add_option("--out", tr.out, "Output directory")->required();
  t->add_option("--override", tr.overrides, "key=value (repeatable)");
  t->add_option("--resume", tr.resume, "Checkpoint to resume from");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint");
  e->add_option("--checkpoint", ev.checkpoint)->required();
  e->add_option("--data", ev.data)->required();
  e->add_option("--split", ev.split, "train | val");
  e->add_option("--out", ev.out, "Directory for eval.csv");

  VizArgs vz;
  auto* v = app.add_subcommand("visualize", "Write dispatch heat maps");
  v->add_option("--checkpoint", vz.checkpoint)->required();
  v->add_option("--data", vz.data)->required();
  v->add_option("--split", vz.split, "train | val");
  v->add_option("--samples", vz.samples, "Sample indices")->delimiter(',');
  v->add_option("--layer", vz.layer, "MoE block (1-based)")->required();
  v->add_option("--out", vz.out)->required();

  GradArgs gc;
  auto* c = app.add_subcommand("grad-check", "Finite-difference check of the full loss");
  c->add_option("--config", gc.config, "Config file (model section used)");
  c->add_option("--override", gc.overrides, "key=value (repeatable)");
  c->add_option("--variant", gc.variant, "LayerScale variant or 'all'");
  c->add_option("--precision", gc.precision)->check(CLI::IsMember({32, 64}));
  c->add_option("--tol", gc.tol, "Relative tolerance");
  c->add_option("--seed", gc.seed);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*g) return cmd_gen_data(gen);
    if (*t) return cmd_train(tr);
    if (*e) return cmd_eval(ev);
    if (*v) return cmd_visualize(vz);
    if (*c) return cmd_grad_check(gc);
  } catch (const UsageError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kUsage;
  } catch (const ConfigError& err) {
    std::cerr << "config error: " << err.what() << "\n";
    return kUsage;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kRuntime;
  }
  return kUsage;
}
