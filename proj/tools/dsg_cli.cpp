// dsg: dataset generation, training, evaluation, inference and gradient checks.
// Exit codes: 0 success, 1 usage error, 2 runtime failure.

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <stdexcept>
#include <string>

#include "CLI11.hpp"
#include "dsg/checkpoint.hpp"
#include "dsg/data.hpp"
#include "dsg/evaluate.hpp"
#include "dsg/gradcheck_suite.hpp"
#include "dsg/netpbm.hpp"
#include "dsg/train.hpp"

namespace fs = std::filesystem;
using namespace dsg;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct GenArgs {
  std::string out;
  std::uint64_t seed = 0;
  int domains = 4;
  int per_domain = 40;
  int size = 64;
};

struct TrainArgs {
  std::string data, out, config;
  std::optional<std::string> norm, scales, heldout;
  std::optional<int> epochs, batch_size, crop_size;
  std::optional<std::uint64_t> seed;
  std::optional<double> base_lr;
};

struct EvalArgs {
  std::string data, ckpt, scales = "0.5,1.0", stats = "running", split = "val", report = "report.csv";
};

struct InferArgs {
  std::string ckpt, image, out, scales = "0.5,1.0";
  int domain = 0;
};

struct GradArgs {
  int seeds = 20;
  double tolerance = 1e-4;
};

int run_gen(const GenArgs& a) {
  GenerateOptions o;
  o.seed = a.seed;
  o.domains = a.domains;
  o.per_domain = a.per_domain;
  o.size = a.size;
  const DatasetManifest m = generate_domain_dataset(a.out, o);
  int total = 0;
  for (const auto& s : m.split_counts)
    for (int c : s) total += c;
  std::cout << "wrote " << total << " samples (" << m.num_domains() << " domains, " << m.image_size << "x"
            << m.image_size << ") to " << a.out << "\n";
  return 0;
}

int run_train(const TrainArgs& a) {
  KeyValues kv;
  if (!a.config.empty()) kv = KeyValues::load(a.config);
  if (a.norm) kv.set("norm", *a.norm);
  if (a.scales) kv.set("scales_train", *a.scales);
  if (a.heldout) kv.set("heldout", *a.heldout);
  if (a.epochs) kv.set("epochs", std::to_string(*a.epochs));
  if (a.batch_size) kv.set("batch_size", std::to_string(*a.batch_size));
  if (a.crop_size) kv.set("crop_size", std::to_string(*a.crop_size));
  if (a.seed) kv.set("seed", std::to_string(*a.seed));
  if (a.base_lr) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", *a.base_lr);
    kv.set("base_lr", buf);
  }
  TrainConfig cfg;
  try {
    cfg = TrainConfig::from_key_values(kv);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const TrainResult r = train(cfg, a.data, a.out, &std::cout);
  std::cout << "best epoch " << r.best_epoch << ", val mIoU " << r.best_val_miou << "\n";
  return 0;
}

int run_eval(const EvalArgs& a) {
  std::vector<double> scales;
  StatsMode stats;
  try {
    scales = parse_scales(a.scales);
    stats = parse_stats_mode(a.stats);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  LoadedCheckpoint ck = load_checkpoint(a.ckpt);
  const DatasetManifest manifest = DatasetManifest::load(a.data);
  if (manifest.num_classes != ck.model.config().num_classes) {
    throw std::runtime_error("dataset has " + std::to_string(manifest.num_classes) + " classes, checkpoint " +
                             std::to_string(ck.model.config().num_classes));
  }
  const std::vector<SegSample> samples = load_split(a.data, manifest, a.split);

  // Both scale settings and, for batch statistics, the running-statistics
  // baseline are always reported.
  std::vector<std::pair<std::vector<double>, StatsMode>> runs{{scales, stats}};
  if (scales != std::vector<double>{1.0}) runs.push_back({{1.0}, stats});
  if (stats == StatsMode::Batch) {
    const auto n = runs.size();
    for (std::size_t i = 0; i < n; ++i) runs.push_back({runs[i].first, StatsMode::Running});
  }

  std::string csv;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    EvalOptions o;
    o.scales = runs[i].first;
    o.stats = runs[i].second;
    const EvalReport rep = evaluate(ck.model, samples, o, manifest.domain_names);
    std::cout << format_report(rep, manifest.class_names);
    csv += report_csv(rep, i == 0);
  }
  std::ofstream f(a.report, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + a.report);
  f << csv;
  std::cout << "wrote " << a.report << "\n";
  return 0;
}

constexpr std::uint8_t kPalette[][3] = {{0, 0, 0}, {230, 25, 75}, {60, 180, 75}, {0, 130, 200}};
constexpr int kPaletteSize = sizeof(kPalette) / sizeof(kPalette[0]);

int run_infer(const InferArgs& a) {
  std::vector<double> scales;
  try {
    scales = parse_scales(a.scales);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  LoadedCheckpoint ck = load_checkpoint(a.ckpt);
  const Raster in = read_netpbm(a.image);
  const Tensor img = raster_to_image(in);
  const int H = in.height, W = in.width;

  Tape<float> tape;
  Forward<float> f(ck.model, tape, Mode::Eval, a.domain, StatsMode::Running, nullptr);
  Var x = tape.constant(img.reshaped({1, 3, H, W}));
  // the network wants even sizes; predict at the next even size and resize back
  const int eh = H + H % 2, ew = W + W % 2;
  if (eh != H || ew != W) x = ops::bilinear_resize(tape, x, eh, ew);
  Var logits = hierarchical_fuse(f, x, scales).logits;
  if (eh != H || ew != W) logits = ops::bilinear_resize(tape, logits, H, W);
  const LabelMap pred = argmax_channels(tape.value(logits));

  Raster mask{W, H, 3, std::vector<std::uint8_t>(static_cast<std::size_t>(W) * H * 3)};
  Raster overlay{2 * W, H, 3, std::vector<std::uint8_t>(static_cast<std::size_t>(2 * W) * H * 3)};
  for (int y = 0; y < H; ++y)
    for (int xx = 0; xx < W; ++xx) {
      const std::size_t p = static_cast<std::size_t>(y) * W + xx;
      const auto& col = kPalette[pred.data[p] % kPaletteSize];
      for (int c = 0; c < 3; ++c) {
        const std::uint8_t src = in.pixels[p * 3 + c];
        mask.pixels[p * 3 + c] = col[c];
        overlay.pixels[(static_cast<std::size_t>(y) * 2 * W + xx) * 3 + c] = src;
        overlay.pixels[(static_cast<std::size_t>(y) * 2 * W + W + xx) * 3 + c] =
            static_cast<std::uint8_t>((src + col[c] + 1) / 2);
      }
    }
  const fs::path out(a.out);
  write_netpbm(out, mask);
  const fs::path ov = out.parent_path() / (out.stem().string() + "_overlay.ppm");
  write_netpbm(ov, overlay);
  std::cout << "wrote " << out.string() << " and " << ov.string() << "\n";
  return 0;
}

int run_gradcheck(const GradArgs& a) {
  const SuiteResult r = run_gradcheck_suite(a.seeds, a.tolerance);
  std::cout << format_suite(r);
  return r.passed() ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dsg: domain-shift segmentation toolkit"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen-data", "generate the synthetic multi-domain dataset");
  g->add_option("--out", gen.out, "output directory")->required();
  g->add_option("--seed", gen.seed, "generator seed");
  g->add_option("--domains", gen.domains, "number of photometric domains (1-7)");
  g->add_option("--per-domain", gen.per_domain, "samples per domain");
  g->add_option("--size", gen.size, "image side in pixels (even)");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "train a model");
  t->add_option("--data", tr.data, "dataset directory")->required();
  t->add_option("--out", tr.out, "run directory")->required();
  t->add_option("--config", tr.config, "key = value config file");
  t->add_option("--norm", tr.norm, "bn or dbn");
  t->add_option("--epochs", tr.epochs);
  t->add_option("--batch-size", tr.batch_size);
  t->add_option("--seed", tr.seed);
  t->add_option("--base-lr", tr.base_lr);
  t->add_option("--crop-size", tr.crop_size);
  t->add_option("--scales", tr.scales, "training scales, e.g. 0.5,1.0");
  t->add_option("--heldout", tr.heldout, "held-out domain: last, none or an index");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "evaluate a checkpoint");
  e->add_option("--data", ev.data, "dataset directory")->required();
  e->add_option("--ckpt", ev.ckpt, "checkpoint file")->required();
  e->add_option("--scales", ev.scales, "inference scales, ascending, containing 1.0");
  e->add_option("--stats", ev.stats, "running or batch");
  e->add_option("--split", ev.split, "dataset split");
  e->add_option("--report", ev.report, "CSV report path");

  InferArgs inf;
  auto* i = app.add_subcommand("infer", "segment one image");
  i->add_option("--ckpt", inf.ckpt, "checkpoint file")->required();
  i->add_option("--image", inf.image, "input PPM")->required();
  i->add_option("--domain", inf.domain, "domain id for normalization statistics");
  i->add_option("--out", inf.out, "output PPM (colorized mask)")->required();
  i->add_option("--scales", inf.scales, "inference scales");

  GradArgs ga;
  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every differentiable op");
  gc->add_option("--seeds", ga.seeds, "random instances per op");
  gc->add_option("--tolerance", ga.tolerance, "max relative error");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& err) {
    return app.exit(err);
  } catch (const CLI::CallForAllHelp& err) {
    return app.exit(err);
  } catch (const CLI::ParseError& err) {
    std::cerr << err.what() << "\n\n" << app.help();
    return 1;
  }

  try {
    if (*g) return run_gen(gen);
    if (*t) return run_train(tr);
    if (*e) return run_eval(ev);
    if (*i) return run_infer(inf);
    if (*gc) return run_gradcheck(ga);
  } catch (const UsageError& err) {
    std::cerr << "usage error: " << err.what() << "\n";
    return 1;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 2;
  }
  return 1;
}
