#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace dsg {

struct SuiteRow {
  std::string op;
  int seeds = 0;
  double max_rel_error = 0;
  bool passed = false;
  double seconds = 0;
  std::string worst;  // grad_check summary of the worst seed
};

struct SuiteResult {
  std::vector<SuiteRow> rows;
  double tolerance = 0;
  double seconds = 0;
  bool passed() const;
};

/// Names of the ops covered by the finite-difference suite, in run order.
std::vector<std::string> gradcheck_suite_ops();

/// Central-difference check of every differentiable op over `seeds` random
/// instances each, in double precision.
SuiteResult run_gradcheck_suite(int seeds = 20, double tolerance = 1e-4, std::ostream* progress = nullptr);

std::string format_suite(const SuiteResult& result);

}  // namespace dsg
