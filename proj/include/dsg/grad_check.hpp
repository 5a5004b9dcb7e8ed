#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "dsg/tape.hpp"

namespace dsg {

/// Function under test: records ops on the tape from the given input leaves and
/// returns the output variable.
using GradFn = std::function<Var(Tape<double>&, const std::vector<Var>&)>;

struct GradCheckOptions {
  double step = 1e-4;
  std::uint64_t seed = 0;  // projection weights and coordinate sampling
  /// Coordinates checked per input; 0 checks every coordinate.
  std::size_t max_coords_per_input = 0;
  /// When non-empty, only these (input index, flat coordinate) pairs are checked.
  std::vector<std::pair<int, std::size_t>> selected;
};

struct GradCheckEntry {
  std::string input;
  std::size_t checked = 0;
  double max_rel_error = 0;
  std::size_t worst_index = 0;
  double analytic = 0;
  double numeric = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;

  double max_error() const;
  bool passed(double tolerance) const { return max_error() <= tolerance; }
  std::string summary() const;
};

/// |a - b| / max(1e-8, |a| + |b|)
double relative_error(double a, double b);

/// Compares the tape's vector-Jacobian products against central differences.
/// The output is reduced to a scalar with fixed random weights r, so the check
/// covers r^T J for every input. Exceedances are reported, never thrown.
GradCheckReport grad_check(const GradFn& fn, const std::vector<TensorD>& inputs,
                           const std::vector<std::string>& names, const GradCheckOptions& opts = {});

}  // namespace dsg
