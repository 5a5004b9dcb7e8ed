// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
// usage: acceptance <work dir>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "dsg/checkpoint.hpp"
#include "dsg/data.hpp"
#include "dsg/evaluate.hpp"
#include "dsg/gradcheck_suite.hpp"
#include "dsg/normalization.hpp"
#include "dsg/train.hpp"

using namespace dsg;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass;
  std::string detail;
};

double since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::string fmt(const char* f, double v) {
  char b[64];
  std::snprintf(b, sizeof b, f, v);
  return b;
}

Tensor uniform(std::mt19937_64& rng, Shape s, float lo, float hi) {
  std::uniform_real_distribution<float> u(lo, hi);
  Tensor t(std::move(s));
  for (auto& v : t.data()) v = u(rng);
  return t;
}

Outcome gradient_suite() {
  const SuiteResult r = run_gradcheck_suite(20, 1e-4);
  double worst = 0;
  std::string worst_op;
  for (const auto& row : r.rows)
    if (row.max_rel_error >= worst) {
      worst = row.max_rel_error;
      worst_op = row.op;
    }
  std::cout << format_suite(r);
  const bool ok = r.passed() && r.seconds < 120;
  return {ok, std::to_string(r.rows.size()) + " ops x 20 seeds, worst " + fmt("%.3g", worst) + " (" + worst_op +
                  "), " + fmt("%.1f", r.seconds) + " s"};
}

Outcome dbn_degeneracy() {
  std::mt19937_64 rng(2024);
  int mismatches = 0;
  for (int trial = 0; trial < 100; ++trial) {
    int N, C, H, W;
    do {  // batch statistics need two values per channel
      N = 1 + rng() % 4, C = 1 + rng() % 6, H = 1 + rng() % 5, W = 1 + rng() % 5;
    } while (N * H * W < 2);
    const Tensor x = uniform(rng, {N, C, H, W}, -4, 4), x2 = uniform(rng, {N, C, H, W}, -4, 4);
    DbnLayer<float> layer(C, 1);
    layer.gamma = uniform(rng, {C}, 0.2f, 3);
    layer.beta = uniform(rng, {C}, -2, 2);

    Tape<float> t;
    const Tensor bn = t.value(bn_forward_train(t, t.constant(x), t.constant(layer.gamma), t.constant(layer.beta), 1e-5f));
    if (!(layer.train(x, 0) == bn)) ++mismatches;

    const std::span<const float> mean = layer.running_mean.vec(), var = layer.running_var.vec();
    const Tensor bn_eval = t.value(bn_forward_eval(t, t.constant(x2), t.constant(layer.gamma), t.constant(layer.beta),
                                                   1e-5f, mean, var));
    if (!(layer.eval(x2, 0) == bn_eval)) ++mismatches;
  }
  return {mismatches == 0, "100 inputs, train + eval, " + std::to_string(mismatches) + " bitwise mismatches"};
}

Outcome normalization_exactness() {
  // worked example against the per-element formula in double
  const Tensor x({1, 1, 2, 2}, std::vector<float>{1, 2, 3, 4});
  DbnLayer<float> layer(1, 1);
  const Tensor y = layer.train(x, 0);
  double max_err = 0;
  for (int i = 0; i < 4; ++i) {
    const double oracle = (x[i] - 2.5) / std::sqrt(1.25 + 1e-5);
    max_err = std::max(max_err, std::abs(y[i] - oracle));
  }
  // shift invariance on dyadic inputs, where mean and differences are exact
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<int> q(-32, 32);
  int shift_fail = 0;
  for (int trial = 0; trial < 100; ++trial) {
    Tensor a({2, 3, 4, 2});
    for (auto& v : a.data()) v = q(rng) / 16.0f;
    Tensor b = a;
    const float c = static_cast<float>(q(rng));
    for (auto& v : b.data()) v += c;
    DbnLayer<float> la(3, 2), lb(3, 2);
    if (!(la.train(a, trial % 2) == lb.train(b, trial % 2))) ++shift_fail;
  }
  // constant input gives beta
  DbnLayer<float> lc(3, 2);
  lc.beta = Tensor({3}, std::vector<float>{0.5f, -1.25f, 3.0f});
  lc.gamma = Tensor({3}, std::vector<float>{2.0f, 0.1f, 7.0f});
  const Tensor yc = lc.train(Tensor({2, 3, 3, 3}, 4.2f), 1);
  bool beta_exact = true;
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < 2 * 9; ++i) beta_exact = beta_exact && yc[(i / 9 * 3 + c) * 9 + i % 9] == lc.beta[c];
  const bool ok = max_err <= 1e-4 && shift_fail == 0 && beta_exact;
  return {ok, "[1,2,3,4] max error " + fmt("%.2g", max_err) + ", shift failures " + std::to_string(shift_fail) +
                  "/100, constant->beta " + (beta_exact ? "exact" : "inexact")};
}

Outcome cost_constants() {
  const double three = training_cost({0.5, 1.0, 2.0}), two = training_cost({0.5, 1.0});
  const double ratio = three / two;
  const bool ok = three == 5.25 && two == 1.25 && ratio == 4.2 && ratio > 4;
  return {ok, "cost(0.5,1,2) = " + fmt("%.17g", three) + ", cost(0.5,1) = " + fmt("%.17g", two) + ", ratio " +
                  fmt("%.17g", ratio)};
}

Outcome miou_oracle() {
  ConfusionMatrix worked(2);
  LabelMap gt({4}), pred({4});
  gt.data = {0, 0, 1, 1};
  pred.data = {0, 1, 1, 1};
  worked.add(gt, pred);
  const bool seven_twelfths = *miou(worked).mean == 7.0 / 12;

  std::mt19937_64 rng(99);
  int mismatches = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const int C = 2 + rng() % 4, H = 1 + rng() % 8, W = 1 + rng() % 8;
    LabelMap g({H, W}), p({H, W});
    for (auto& v : g.data) v = rng() % C;
    for (std::size_t i = 0; i < p.data.size(); ++i) p.data[i] = rng() % 2 ? g.data[i] : int(rng() % C);
    ConfusionMatrix conf(C);
    conf.add(g, p);
    const MiouResult r = miou(conf);
    // independent counting: per class, one pass over pixels
    std::int64_t lcm = 1, num = 0;
    std::vector<std::pair<std::int64_t, std::int64_t>> present;
    bool same = true;
    for (int c = 0; c < C; ++c) {
      std::int64_t inter = 0, uni = 0;
      for (std::size_t i = 0; i < g.data.size(); ++i) {
        inter += g.data[i] == c && p.data[i] == c;
        uni += g.data[i] == c || p.data[i] == c;
      }
      if (uni == 0) {
        same = same && !r.per_class[c];
        continue;
      }
      same = same && r.per_class[c] && *r.per_class[c] == double(inter) / double(uni);
      present.emplace_back(inter, uni);
      lcm = std::lcm(lcm, uni);
    }
    for (auto [i, u] : present) num += i * (lcm / u);
    same = same && r.mean && *r.mean == double(num) / double(lcm * std::int64_t(present.size()));
    mismatches += !same;
  }
  return {seven_twelfths && mismatches == 0, std::string("7/12 ") + (seven_twelfths ? "exact" : "inexact") +
                                                 ", 1000 random instances, " + std::to_string(mismatches) +
                                                 " mismatches"};
}

Outcome poly_schedule() {
  const long long max_iter = 360;
  const double a = poly_lr(0.01, 0, max_iter, 2), b = poly_lr(0.01, max_iter / 2, max_iter, 2),
               c = poly_lr(0.01, max_iter, max_iter, 2);
  bool monotone = true;
  for (long long i = 1; i <= max_iter; ++i)
    monotone = monotone && poly_lr(0.01, i, max_iter, 2) <= poly_lr(0.01, i - 1, max_iter, 2);
  const bool ok = std::abs(a - 0.01) <= 1e-12 && std::abs(b - 0.0025) <= 1e-12 && std::abs(c) <= 1e-12 && monotone;
  return {ok, "lr(0) = " + fmt("%.17g", a) + ", lr(mid) = " + fmt("%.17g", b) + ", lr(end) = " + fmt("%.3g", c) +
                  (monotone ? ", monotone" : ", NOT monotone")};
}

Outcome scheduler_contract(const fs::path& data) {
  const DatasetManifest m = DatasetManifest::load(data);
  const auto samples = load_split(data, m, "train");
  std::vector<std::pair<int, std::vector<int>>> by_domain;
  for (int d = 0; d < m.num_domains(); ++d) {
    by_domain.push_back({d, {}});
    for (std::size_t i = 0; i < samples.size(); ++i)
      if (samples[i].domain == d) by_domain.back().second.push_back(int(i));
  }
  const DomainBatchScheduler sched(by_domain, 8, 0);
  bool single = true;
  std::multiset<int> seen;
  std::set<int> domains;
  const auto batches = sched.epoch(0);
  for (const auto& b : batches) {
    domains.insert(b.domain);
    for (int id : b.samples) {
      seen.insert(id);
      single = single && samples[id].domain == b.domain;
    }
  }
  bool exact = seen.size() == samples.size();
  for (std::size_t i = 0; i < samples.size(); ++i) exact = exact && seen.count(int(i)) == 1;
  return {single && exact && domains.size() == 4u && m.num_domains() == 4,
          std::to_string(batches.size()) + " batches over " + std::to_string(domains.size()) + " domains, " +
              (single ? "all single-domain" : "MIXED batch") + ", coverage " + (exact ? "exact" : "WRONG") + " (" +
              std::to_string(samples.size()) + " samples)"};
}

struct TrainedRuns {
  TrainResult dbn, bn;
  double dbn_seconds = 0;
  fs::path dbn_dir;
};

Outcome smoke_training(const fs::path& data, const fs::path& work, TrainedRuns& runs) {
  TrainConfig c;  // defaults: 30 epochs, DBN, scales (0.5, 1.0), last domain held out
  runs.dbn_dir = work / "run_dbn";
  auto t0 = Clock::now();
  runs.dbn = train(c, data, runs.dbn_dir, &std::cout);
  runs.dbn_seconds = since(t0);

  c.norm_kind = NormKind::BN;
  runs.bn = train(c, data, work / "run_bn", &std::cout);

  const EpochMetrics& d = runs.dbn.history.back();
  const EpochMetrics& b = runs.bn.history.back();
  const double held_dbn = d.val_miou_shifted.value_or(NAN), held_bn = b.val_miou_shifted.value_or(NAN);
  std::cout << "held-out shifted domain mIoU: DBN " << fmt("%.6f", held_dbn) << ", BN " << fmt("%.6f", held_bn)
            << " (" << (held_dbn > held_bn ? "DBN higher" : held_dbn < held_bn ? "BN higher" : "equal")
            << "; logged, not asserted)\n";
  const double final_val = d.val_miou.value_or(0);
  const bool ok = final_val >= 0.90 && runs.dbn_seconds <= 15 * 60 && d.epoch <= 30;
  return {ok, "DBN final in-domain val mIoU " + fmt("%.4f", final_val) + " after " + std::to_string(d.epoch) +
                  " epochs in " + fmt("%.0f", runs.dbn_seconds) + " s; held-out DBN " + fmt("%.4f", held_dbn) +
                  " vs BN " + fmt("%.4f", held_bn)};
}

Outcome hierarchical_extension(const fs::path& data, const TrainedRuns& runs) {
  LoadedCheckpoint ck = load_checkpoint(runs.dbn_dir / "last.ckpt");
  const std::size_t params = ck.model.params_count();
  std::set<std::string> names;
  for (auto& [n, t] : ck.model.trainable()) names.insert(n);
  const std::vector<double> trained = [&] {
    std::vector<double> s;
    const Tensor& t = ck.tensors.at("train.scales");
    for (float v : t.data()) s.push_back(v);
    return s;
  }();

  const DatasetManifest m = DatasetManifest::load(data);
  const auto val = load_split(data, m, "val", {0, 1, 2});
  EvalOptions o;
  o.scales = {0.25, 0.5, 1.0};
  const EvalReport rep = evaluate(ck.model, val, o, m.domain_names);
  std::set<std::string> names_after;
  for (auto& [n, t] : ck.model.trainable()) names_after.insert(n);
  const bool valid = rep.overall_result.mean && *rep.overall_result.mean >= 0 && *rep.overall_result.mean <= 1 &&
                     rep.domains.size() == 3;
  const bool ok = valid && names_after == names && ck.model.params_count() == params &&
                  trained == std::vector<double>{0.5, 1.0};
  return {ok, "two-scale checkpoint, " + std::to_string(params) + " params before and after, scales 0.25;0.5;1 mIoU " +
                  fmt("%.4f", rep.overall_result.mean.value_or(NAN))};
}

Outcome persistence(const fs::path& data, const fs::path& work, const TrainedRuns& runs) {
  const fs::path first = runs.dbn_dir / "last.ckpt", second = work / "resaved.ckpt";
  LoadedCheckpoint ck = load_checkpoint(first);
  NamedTensors extra;
  for (const auto& [name, t] : ck.tensors)
    if (name.rfind("train.", 0) == 0) extra[name] = t;
  save_checkpoint(second, ck.model, extra);
  const bool bytes_equal = slurp(first) == slurp(second);
  int domains_with_stats = 0;
  for (int d = 0; d < ck.model.config().num_domains; ++d) domains_with_stats += ck.model.norm("stem.norm").updates[d] > 0;

  TrainConfig c;
  c.epochs = 3;
  c.seed = 5;
  train(c, data, work / "det_a");
  train(c, data, work / "det_b");
  const std::string ma = slurp(work / "det_a" / "metrics.csv"), mb = slurp(work / "det_b" / "metrics.csv");
  const bool logs_equal = !ma.empty() && ma == mb;
  return {bytes_equal && logs_equal && domains_with_stats == 3,
          std::string("save->load->save ") + (bytes_equal ? "byte-identical" : "DIFFERS") + " (" +
              std::to_string(domains_with_stats) + " domains with running stats); rerun metrics.csv " +
              (logs_equal ? "byte-identical" : "DIFFERS")};
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path work = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "dsg_acceptance";
  fs::remove_all(work);
  fs::create_directories(work);
  const fs::path data = work / "data";
  generate_domain_dataset(data, GenerateOptions{});  // 4 domains x 40, 64x64, seed 0

  std::vector<std::pair<int, Outcome>> results;
  auto record = [&](int id, const std::function<Outcome()>& f) {
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = f();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    o.detail += " [" + fmt("%.1f", since(t0)) + " s]";
    std::cout << "criterion " << id << ": " << (o.pass ? "PASS" : "FAIL") << "  " << o.detail << std::endl;
    results.emplace_back(id, o);
  };

  TrainedRuns runs;
  record(1, gradient_suite);
  record(2, dbn_degeneracy);
  record(3, normalization_exactness);
  record(4, cost_constants);
  record(5, miou_oracle);
  record(6, poly_schedule);
  record(7, [&] { return scheduler_contract(data); });
  record(8, [&] { return smoke_training(data, work, runs); });
  record(9, [&] { return hierarchical_extension(data, runs); });
  record(10, [&] { return persistence(data, work, runs); });

  std::cout << "\nsummary\n";
  int failed = 0;
  for (const auto& [id, o] : results) {
    std::cout << "criterion " << id << ": " << (o.pass ? "PASS" : "FAIL") << "\n";
    failed += !o.pass;
  }
  return failed ? 1 : 0;
}
