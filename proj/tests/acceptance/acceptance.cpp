// SPDX-License-Identifier: Apache-2.0
//
// Acceptance checks 1-11. Prints one PASS/FAIL line per criterion and exits
// nonzero if any criterion fails.

#include <sys/wait.h>

#include <CLI11.hpp>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "fgmoe/checkpoint.hpp"
#include "fgmoe/guidance.hpp"
#include "fgmoe/model_check.hpp"
#include "fgmoe/optim.hpp"
#include "fgmoe/runtime.hpp"
#include "fgmoe/soft_moe.hpp"
#include "fgmoe/trainer.hpp"
#include "fixtures.hpp"
#include "oracle.hpp"

namespace fs = std::filesystem;
using namespace fgmoe;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), f, args...);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

template <typename T>
bool same_parameters(const VisionTransformer<T>& a, const VisionTransformer<T>& b) {
  const auto pa = a.parameters(), pb = b.parameters();
  if (pa.size() != pb.size()) return false;
  for (std::size_t k = 0; k < pa.size(); ++k) {
    const auto x = pa[k].tensor.data(), y = pb[k].tensor.data();
    if (x.size() != y.size() || std::memcmp(x.data(), y.data(), x.size_bytes()) != 0) return false;
  }
  return true;
}

// --- 1 -----------------------------------------------------------------------

Outcome aux_oracle() {
  const auto t0 = Clock::now();
  Rng rng(20240601);
  double worst = 0.0;
  std::size_t empty_masks = 0, all_empty = 0;
  const std::size_t side = 32;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t batch = 1 + rng.below(8);
    const std::size_t m = rng.uniform() < 0.5 ? 16 : 64;
    const std::size_t s = rng.uniform() < 0.5 ? 2 : 8;
    const std::size_t n_layers = 1 + rng.below(2);
    const bool force_empty = trial == 0 || rng.uniform() < 0.1;
    std::vector<BinaryMask> masks;
    std::vector<oracle::PixelMask> pixel;
    for (std::size_t b = 0; b < batch; ++b) {
      masks.push_back(force_empty ? BinaryMask::zeros(side, side) : fixtures::random_mask(side, rng));
      if (trial == 1 && b == 0) masks.back() = BinaryMask::zeros(side, side);
      empty_masks += masks.back().empty() ? 1 : 0;
      pixel.push_back({side, side, masks.back().bits});
    }
    all_empty += std::all_of(masks.begin(), masks.end(), [](const auto& mk) { return mk.empty(); }) ? 1 : 0;
    std::vector<LayerDispatch<double>> layers;
    std::vector<oracle::Layer> ref;
    for (std::size_t l = 0; l < n_layers; ++l) {
      const bool bg = rng.uniform() < 0.3;
      const auto d = fixtures::random_dispatch(batch, m, s, rng, rng.uniform(0.1, 4.0));
      layers.push_back({static_cast<int>(l + 1), bg ? MaskPolarity::background : MaskPolarity::foreground, d});
      oracle::Layer o{{}, m, s, bg};
      for (std::size_t b = 0; b < batch; ++b) {
        o.dispatch.emplace_back(d.data().begin() + b * m * s, d.data().begin() + (b + 1) * m * s);
      }
      ref.push_back(std::move(o));
    }
    const double got = aux_loss<double>(layers, masks, 1e-6).loss.item();
    const double want = oracle::aux_loss(ref, pixel, 1e-6);
    worst = std::max(worst, std::abs(got - want));
    if (!(std::abs(got - want) <= 1e-12)) worst = std::max(worst, 1.0);  // NaN guard
  }
  const double secs = seconds_since(t0);
  return {worst <= 1e-12 && secs < 60.0 && all_empty > 0 && empty_masks > 0,
          fmt("1000 batches, max |diff| %.3g (tol 1e-12), %zu empty masks, %zu all-empty batches, %.1fs", worst,
              empty_masks, all_empty, secs)};
}

// --- 2 -----------------------------------------------------------------------

Outcome hand_value() {
  const std::vector<double> w{0.4, 0.3, 0.2, 0.1};
  // Two identical slot columns give the same slot-mean W.
  std::vector<double> d;
  for (double x : w) d.insert(d.end(), {x, x});
  const auto dispatch = Tensor<double>::from({1, 4, 2}, d);
  const BinaryMask mask{2, 2, {1, 0, 1, 0}};
  const auto out = aux_loss<double>({{1, MaskPolarity::foreground, dispatch}}, std::span(&mask, 1), 1e-6);
  const auto b = binarize_by_mean<double>(w);
  const double loss = out.loss.item();
  const double p = std::exp(-loss) - 1e-6;
  const bool b_ok = b == std::vector<std::uint8_t>{1, 1, 0, 0};
  return {b_ok && std::abs(loss - 0.81093) <= 1e-4 && std::abs(p - 4.0 / 9.0) <= 1e-5,
          fmt("B=[%d,%d,%d,%d] p=%.6f loss=%.6f (want 0.81093 +-1e-4)", b[0], b[1], b[2], b[3], p, loss)};
}

// --- 3 -----------------------------------------------------------------------

Outcome stochasticity() {
  Rng rng(33);
  double worst_d = 0, worst_c = 0, worst_w = 0, worst_t = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t side = 2 + rng.below(7), m = side * side;
    const std::size_t dim = 2 + rng.below(15), experts = 1 + rng.below(8), per = 1 + rng.below(3);
    const std::size_t batch = 1 + rng.below(4);
    auto sp = SlotParams<double>::init(dim, experts, per, rng);
    const double scale = rng.uniform(0.01, 3.0);
    for (auto& v : sp.phi.mutable_data()) v = scale * rng.normal();
    std::vector<double> xv(batch * m * dim);
    for (auto& v : xv) v = rng.uniform(-2.0, 2.0);
    const auto x = Tensor<double>::from({batch, m, dim}, xv);
    const auto dsp = compute_dispatch_weights(x, sp);
    const auto cmb = compute_combine_weights(x, sp);
    const auto dv = dsp.data(), cv = cmb.data();
    const std::size_t S = sp.total();
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t j = 0; j < S; ++j) {
        double col = 0;
        for (std::size_t i = 0; i < m; ++i) col += dv[(b * m + i) * S + j];
        worst_d = std::max(worst_d, std::abs(col - 1.0));
      }
      for (std::size_t i = 0; i < m; ++i) {
        double row = 0;
        for (std::size_t j = 0; j < S; ++j) row += cv[(b * m + i) * S + j];
        worst_c = std::max(worst_c, std::abs(row - 1.0));
      }
    }
    const auto w = average_dispatch(dsp);
    const auto wv = w.data();
    for (std::size_t b = 0; b < batch; ++b) {
      double total = 0;
      for (std::size_t i = 0; i < m; ++i) total += wv[b * m + i];
      worst_w = std::max(worst_w, std::abs(total - 1.0));
      worst_t = std::max(worst_t, std::abs(total / static_cast<double>(m) - 1.0 / static_cast<double>(m)));
    }
  }
  const double worst = std::max({worst_d, worst_c, worst_w, worst_t});
  return {worst <= 1e-6, fmt("100 models: max |D col-1| %.2g, |C row-1| %.2g, |sum W-1| %.2g, |mean W-1/m| %.2g",
                             worst_d, worst_c, worst_w, worst_t)};
}

// --- 4 -----------------------------------------------------------------------

Outcome gradient_fidelity() {
  const auto t0 = Clock::now();
  bool ok = true;
  std::string detail;
  bool saw_phi = false;
  for (auto v : {LayerScaleVariant::scalar, LayerScaleVariant::vector, LayerScaleVariant::scalar_linear,
                 LayerScaleVariant::no_skip, LayerScaleVariant::identity}) {
    ModelGradCheckOptions o;
    o.variant = v;
    o.lambda = 0.01;
    o.rel_tol = 1e-4;
    const auto report = model_grad_check(o);
    ok = ok && report.passed();
    for (const auto& e : report.entries) saw_phi = saw_phi || e.name.find("moe.phi") != std::string::npos;
    detail += fmt("%s %.2g; ", std::string(to_string(v)).c_str(), report.worst());
  }
  const double secs = seconds_since(t0);
  return {ok && saw_phi && secs < 120.0, detail + fmt("tol 1e-4, %.1fs", secs)};
}

// --- 5 -----------------------------------------------------------------------

template <typename T>
bool guided_block_is_combine(LayerScaleVariant v) {
  ModelConfig c;  // desk default: guided block 4
  const int guided = c.moe_blocks.back();
  c.layerscale[guided] = v;
  VisionTransformer<T> model(c, 5);
  Rng rng(5);
  std::vector<T> px(2 * c.channels * c.image_side * c.image_side);
  for (auto& p : px) p = static_cast<T>(rng.uniform());
  const auto images = Tensor<T>::from({2, c.channels, c.image_side, c.image_side}, px);
  // Feed the guided block the real activations of the blocks before it.
  auto x = model.patch_embed(images);
  for (int b = 1; b < guided; ++b) x = model.block_forward(x, b).x;
  const auto x1 = model.attention(x, guided);
  const auto& blk = model.block(guided);
  const auto h = layer_norm(x1, blk.ln2_gain, blk.ln2_bias);
  const auto r = blk.moe->forward(h, x1).combined;
  const auto out = model.block_forward(x, guided).x;
  return out.size() == r.size() && std::memcmp(out.data().data(), r.data().data(), r.size() * sizeof(T)) == 0;
}

Outcome zero_init_identity() {
  const bool s32 = guided_block_is_combine<float>(LayerScaleVariant::scalar);
  const bool v32 = guided_block_is_combine<float>(LayerScaleVariant::vector);
  const bool s64 = guided_block_is_combine<double>(LayerScaleVariant::scalar);
  const bool v64 = guided_block_is_combine<double>(LayerScaleVariant::vector);
  auto yn = [](bool b) { return b ? "equal" : "DIFFER"; };
  return {s32 && v32 && s64 && v64, fmt("bitwise y'==r at block 4: scalar f32 %s, vector f32 %s, scalar f64 %s, "
                                        "vector f64 %s",
                                        yn(s32), yn(v32), yn(s64), yn(v64))};
}

// --- 6 -----------------------------------------------------------------------

Outcome schedule_endpoints() {
  const TrainConfig cfg = reference_train_config();
  const std::uint64_t spe = (1281167 + cfg.batch_size - 1) / cfg.batch_size;
  const double a = lr_at(0, spe, cfg), b = lr_at(cfg.warmup_epochs * spe, spe, cfg),
               c = lr_at(cfg.epochs * spe - 1, spe, cfg);
  auto rel = [](double x, double y) { return std::abs(x - y) / std::abs(y); };
  const bool ok = cfg.epochs == 100 && cfg.warmup_epochs == 30 && rel(a, 5e-7) <= 1e-9 && rel(b, 5e-4) <= 1e-9 &&
                  rel(c, 5e-6) <= 1e-9;
  return {ok, fmt("lr(0)=%.6g lr(end warmup)=%.6g lr(final)=%.6g", a, b, c)};
}

// --- 7, 8 --------------------------------------------------------------------

struct DeskRun {
  std::string arm;
  std::uint64_t seed = 0;
  double top1 = 0, iou = 0, seconds = 0;
};

struct DeskOptions {
  fs::path work;
  std::size_t epochs = 30;
  std::size_t seeds = 3;
  std::uint64_t data_seed = 2024;
};

RunConfig desk_arm(const std::string& arm, std::uint64_t seed, std::size_t epochs) {
  RunConfig c;  // desk defaults: full method
  c.train.seed = seed;
  c.train.epochs = epochs;
  c.train.warmup_epochs = std::min(c.train.warmup_epochs, epochs);
  const int last = c.model.moe_blocks.back();
  if (arm == "baseline") {
    c.train.guidance.enabled = false;
    c.model.layerscale.clear();  // identity skip everywhere
  } else if (arm == "background") {
    c.train.guidance.targets = {{last, MaskPolarity::background}};
  }
  c.validate();
  return c;
}

std::vector<DeskRun> desk_runs(const DeskOptions& o) {
  const fs::path data_dir = o.work / "desk_data";
  fs::remove_all(data_dir);
  generate_synthetic({data_dir, 2000, 500, 8, o.data_seed, 32});
  const ModelConfig model;
  const auto train = load_split(data_dir, "train", model.image_side, model.channels, model.classes);
  const auto val = load_split(data_dir, "val", model.image_side, model.channels, model.classes);
  const int last = model.moe_blocks.back();

  std::vector<DeskRun> runs;
  for (const std::string arm : {"baseline", "full", "background"}) {
    for (std::uint64_t seed = 0; seed < o.seeds; ++seed) {
      const auto t0 = Clock::now();
      Trainer<float> trainer(desk_arm(arm, seed, o.epochs));
      trainer.fit(train, val);
      const EpochMetrics& final_val = trainer.history().back();
      DeskRun r{arm, seed, final_val.top1, 0.0, seconds_since(t0)};
      for (const auto& li : final_val.iou) {
        if (li.layer == last) r.iou = li.iou;
      }
      const fs::path out = o.work / ("desk_" + arm + "_seed" + std::to_string(seed) + ".csv");
      std::ofstream(out) << metrics_csv(trainer.config().model, trainer.history());
      std::printf("  desk %-10s seed %llu: val top1 %.4f, IoU@L%d %.4f, %.0fs\n", arm.c_str(),
                  static_cast<unsigned long long>(seed), r.top1, last, r.iou, r.seconds);
      std::fflush(stdout);
      runs.push_back(r);
    }
  }
  return runs;
}

std::pair<double, double> arm_medians(const std::vector<DeskRun>& runs, const std::string& arm) {
  std::vector<double> top1, iou;
  for (const auto& r : runs) {
    if (r.arm == arm) {
      top1.push_back(r.top1);
      iou.push_back(r.iou);
    }
  }
  return {median(top1), median(iou)};
}

Outcome directional_effect(const std::vector<DeskRun>& runs, std::size_t epochs) {
  const auto [base_top1, base_iou] = arm_medians(runs, "baseline");
  const auto [full_top1, full_iou] = arm_medians(runs, "full");
  double slowest = 0;
  for (const auto& r : runs) slowest = std::max(slowest, r.seconds);
  const bool ok = epochs == 30 && full_iou - base_iou >= 0.05 && full_top1 >= base_top1 - 0.01 && slowest < 1800;
  return {ok, fmt("median IoU full %.4f vs baseline %.4f (need +0.05); median top1 full %.4f vs baseline %.4f "
                  "(need >= -0.01); slowest run %.0fs",
                  full_iou, base_iou, full_top1, base_top1, slowest)};
}

Outcome polarity_direction(const std::vector<DeskRun>& runs) {
  const double fg = arm_medians(runs, "full").second, bg = arm_medians(runs, "background").second;
  return {bg < fg, fmt("median IoU background %.4f vs foreground %.4f", bg, fg)};
}

// --- 9 -----------------------------------------------------------------------

Outcome filtering_totality() {
  std::vector<Sample> data;
  for (std::size_t i = 0; i < 8; ++i) {
    Sample s = to_sample(synth_sample(9, i, 8, 32));
    s.mask = BinaryMask::zeros(32, 32);
    data.push_back(std::move(s));
  }
  RunConfig guided, zero;
  zero.train.guidance.lambda = 0.0;
  Trainer<float> a(guided), b(zero);
  std::vector<std::size_t> batch(8);
  for (std::size_t i = 0; i < 8; ++i) batch[i] = i;
  const auto la = a.step(data, batch, 1e-3);
  b.step(data, batch, 1e-3);
  bool finite = true;
  for (const auto& p : a.model().parameters()) {
    for (float g : p.tensor.grad()) finite = finite && std::isfinite(g);
  }
  const bool same = same_parameters(a.model(), b.model());
  return {la.aux == 0.0 && finite && same,
          fmt("L_aux=%g, gradients %s, step %s the lambda=0 step", la.aux, finite ? "finite" : "NON-FINITE",
              same ? "bitwise equals" : "DIFFERS from")};
}

// --- 10 ----------------------------------------------------------------------

Outcome determinism(const fs::path& work) {
  const fs::path dir = work / "determinism";
  fs::remove_all(dir);
  generate_synthetic({dir, 200, 50, 8, 7, 32});
  RunConfig cfg;
  cfg.train.epochs = 4;
  cfg.train.warmup_epochs = 1;
  cfg.train.seed = 11;
  const auto train = load_split(dir, "train", 32, 3, 8), val = load_split(dir, "val", 32, 3, 8);

  Trainer<float> a(cfg), b(cfg);
  a.fit(train, val);
  b.fit(train, val);
  const std::string csv_a = metrics_csv(cfg.model, a.history()), csv_b = metrics_csv(cfg.model, b.history());

  Trainer<float> first(cfg);
  first.fit(train, val, [&](const Trainer<float>& t, std::size_t epoch) {
    if (epoch == 2) save_checkpoint(dir / "mid.bin", t.checkpoint());
  });
  Trainer<float> resumed(cfg);
  resumed.restore(load_checkpoint(dir / "mid.bin"));
  resumed.fit(train, val);
  save_checkpoint(dir / "a.bin", a.checkpoint());
  save_checkpoint(dir / "resumed.bin", resumed.checkpoint());

  const bool same_csv = csv_a == csv_b;
  const bool resume_csv = metrics_csv(cfg.model, resumed.history()) == csv_a;
  const bool resume_ckpt = slurp(dir / "a.bin") == slurp(dir / "resumed.bin");
  auto yn = [](bool v) { return v ? "identical" : "DIFFER"; };
  return {same_csv && resume_csv && resume_ckpt,
          fmt("repeat metrics %s; resumed-at-epoch-2 metrics %s, final checkpoint %s", yn(same_csv), yn(resume_csv),
              yn(resume_ckpt))};
}

// --- 11 ----------------------------------------------------------------------

int run_cli(const std::string& args) {
  const std::string cmd = std::string("\"") + FGMOE_CLI_PATH + "\" " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::vector<double> read_csv(const fs::path& p) {
  std::vector<double> out;
  std::stringstream ss(slurp(p));
  std::string line, cell;
  while (std::getline(ss, line)) {
    std::stringstream row(line);
    while (std::getline(row, cell, ',')) out.push_back(std::strtod(cell.c_str(), nullptr));
  }
  return out;
}

Outcome visualization(const fs::path& work) {
  const fs::path dir = work / "viz";
  fs::remove_all(dir);
  const std::string q = "\"" + dir.string();
  if (run_cli("gen-data --out " + q + "/data\" --n 64 --val 16 --classes 8 --seed 3") != 0 ||
      run_cli("train --data " + q + "/data\" --out " + q + "/run\" --override train.epochs=2 "
              "--override train.warmup_epochs=1") != 0 ||
      run_cli("visualize --checkpoint " + q + "/run/checkpoint.bin\" --data " + q +
              "/data\" --samples 0,5,11 --layer 4 --out " + q + "/maps\"") != 0) {
    return {false, "CLI invocation failed"};
  }
  const Checkpoint ckpt = load_checkpoint(dir / "run" / "checkpoint.bin");
  RunConfig cfg;
  apply_text(cfg, ckpt.config_text);
  Trainer<float> trainer(cfg);
  trainer.restore(ckpt);
  const auto val = load_split(dir / "data", "val", 32, 3, 8);
  const std::size_t m = cfg.model.tokens(), slots = cfg.model.experts * cfg.model.slots;
  std::size_t mismatched_w = 0, mismatched_b = 0, compared = 0;
  for (std::size_t s : {0, 5, 11}) {
    const std::size_t one[] = {s};
    NoGradGuard no_grad;
    const auto trace = trainer.model().forward(stack_images<float>(val, one));
    const auto d = trace.dispatch.at(4).data();
    const std::string stem = "s" + std::to_string(s) + "_L4_";
    const auto csv = read_csv(dir / "maps" / (stem + "dispatch.csv"));
    const auto b = read_netpbm(dir / "maps" / (stem + "attention.pgm"));
    if (csv.size() != m || b.pixels.size() != m) return {false, "unexpected map size for sample " + std::to_string(s)};
    for (std::size_t i = 0; i < m; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < slots; ++j) acc += static_cast<double>(d[i * slots + j]);
      const double w = acc / static_cast<double>(slots);
      mismatched_w += csv[i] == w ? 0 : 1;
      mismatched_b += (b.pixels[i] != 0) == (csv[i] >= 1.0 / static_cast<double>(m)) ? 0 : 1;
      ++compared;
    }
  }
  return {mismatched_w == 0 && mismatched_b == 0,
          fmt("%zu tokens over 3 samples: %zu W mismatches, %zu B mismatches vs CSV >= 1/m", compared, mismatched_w,
              mismatched_b)};
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Acceptance checks"};
  std::vector<int> only;
  DeskOptions desk;
  desk.work = fs::temp_directory_path() / "fgmoe_acceptance";
  app.add_option("--only", only, "Criteria to run (default: all)")->delimiter(',');
  app.add_option("--work", desk.work, "Scratch directory");
  app.add_option("--desk-epochs", desk.epochs, "Epochs per desk run (criteria 7-8 require 30)");
  app.add_option("--desk-seeds", desk.seeds, "Seeds per arm");
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(desk.work);

  const std::set<int> wanted(only.begin(), only.end());
  auto want = [&](int k) { return wanted.empty() || wanted.count(k); };
  int failures = 0;
  auto report = [&](int k, const std::string& what, const std::function<Outcome()>& f) {
    if (!want(k)) return;
    Outcome o;
    try {
      o = f();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += o.pass ? 0 : 1;
    std::printf("criterion %d: %s  %s: %s\n", k, o.pass ? "PASS" : "FAIL", what.c_str(), o.detail.c_str());
    std::fflush(stdout);
  };

  report(1, "aux-loss oracle equivalence", aux_oracle);
  report(2, "hand-value check", hand_value);
  report(3, "routing stochasticity", stochasticity);
  report(4, "gradient fidelity", gradient_fidelity);
  report(5, "zero-init LayerScale identity", zero_init_identity);
  report(6, "schedule endpoints", schedule_endpoints);
  if (want(7) || want(8)) {
    std::vector<DeskRun> runs;
    std::string error;
    try {
      runs = desk_runs(desk);
    } catch (const std::exception& e) {
      error = e.what();
    }
    auto guarded = [&](auto f) {
      return [&, f]() { return error.empty() ? f() : Outcome{false, "desk runs failed: " + error}; };
    };
    report(7, "desk-scale directional effect", guarded([&] { return directional_effect(runs, desk.epochs); }));
    report(8, "polarity ablation direction", guarded([&] { return polarity_direction(runs); }));
  }
  report(9, "filtering totality", filtering_totality);
  report(10, "determinism and resume", [&] { return determinism(desk.work); });
  report(11, "visualization exactness", [&] { return visualization(desk.work); });
  std::printf("%s\n", failures ? "acceptance: FAIL" : "acceptance: PASS");
  return failures ? 1 : 0;
}
