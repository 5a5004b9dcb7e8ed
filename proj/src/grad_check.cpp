#include "dsg/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>
#include <sstream>

#include "dsg/ops.hpp"

namespace dsg {

double GradCheckReport::max_error() const {
  double m = 0;
  for (const auto& e : entries) m = std::max(m, e.max_rel_error);
  return m;
}

std::string GradCheckReport::summary() const {
  std::ostringstream os;
  for (const auto& e : entries) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%s: checked=%zu max_rel=%.3e worst=%zu (analytic=%.9g numeric=%.9g)\n",
                  e.input.c_str(), e.checked, e.max_rel_error, e.worst_index, e.analytic, e.numeric);
    os << buf;
  }
  return os.str();
}

double relative_error(double a, double b) {
  return std::abs(a - b) / std::max(1e-8, std::abs(a) + std::abs(b));
}

namespace {

double evaluate(const GradFn& fn, const std::vector<TensorD>& inputs, const TensorD& weights) {
  Tape<double> tape;
  std::vector<Var> vars;
  for (const auto& t : inputs) vars.push_back(tape.leaf(t, false));
  const Var out = fn(tape, vars);
  const auto& y = tape.value(out);
  double s = 0;
  for (std::size_t i = 0; i < y.numel(); ++i) s += weights[i] * y[i];
  return s;
}

}  // namespace

GradCheckReport grad_check(const GradFn& fn, const std::vector<TensorD>& inputs,
                           const std::vector<std::string>& names, const GradCheckOptions& opts) {
  std::mt19937_64 rng(opts.seed);
  std::uniform_real_distribution<double> uni(-1.0, 1.0);

  // Analytic pass.
  Tape<double> tape;
  std::vector<Var> vars;
  for (const auto& t : inputs) vars.push_back(tape.leaf(t, true));
  const Var out = fn(tape, vars);
  TensorD weights(tape.value(out).shape());
  for (auto& w : weights.data()) w = uni(rng);
  const Var loss = ops::dot_const(tape, out, weights);
  tape.backward(loss);

  std::vector<std::vector<std::size_t>> coords(inputs.size());
  if (!opts.selected.empty()) {
    for (auto [i, c] : opts.selected) coords.at(static_cast<std::size_t>(i)).push_back(c);
  } else {
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      std::vector<std::size_t> all(inputs[i].numel());
      std::iota(all.begin(), all.end(), std::size_t{0});
      if (opts.max_coords_per_input && all.size() > opts.max_coords_per_input) {
        std::shuffle(all.begin(), all.end(), rng);
        all.resize(opts.max_coords_per_input);
        std::sort(all.begin(), all.end());
      }
      coords[i] = std::move(all);
    }
  }

  GradCheckReport report;
  std::vector<TensorD> work = inputs;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (coords[i].empty()) continue;
    GradCheckEntry e;
    e.input = i < names.size() ? names[i] : "input" + std::to_string(i);
    const TensorD analytic = tape.grad(vars[i]);
    for (std::size_t c : coords[i]) {
      const double orig = work[i][c];
      work[i][c] = orig + opts.step;
      const double up = evaluate(fn, work, weights);
      work[i][c] = orig - opts.step;
      const double down = evaluate(fn, work, weights);
      work[i][c] = orig;
      const double numeric = (up - down) / (2 * opts.step);
      const double err = relative_error(analytic[c], numeric);
      if (err > e.max_rel_error || e.checked == 0) {
        e.max_rel_error = err;
        e.worst_index = c;
        e.analytic = analytic[c];
        e.numeric = numeric;
      }
      ++e.checked;
    }
    report.entries.push_back(e);
  }
  return report;
}

}  // namespace dsg
