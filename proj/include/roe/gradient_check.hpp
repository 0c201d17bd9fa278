#pragma once

#include <functional>
#include <span>
#include <string>

#include "roe/autograd.hpp"

namespace roe {

struct GradientCheckOptions {
  double h = 1e-5;
  double tolerance = 1e-5;
  /// Denominator guard for relative error: |a - n| / max(|a|, |n|, floor).
  double floor = 1e-8;
  /// Optional coordinate filter (e.g. to exclude ReLU kink neighbourhoods).
  std::function<bool(const Parameter&, std::size_t)> include;
};

struct GradientCheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t coordinates = 0;
  std::size_t skipped = 0;
  /// Coordinates whose +-h probes flipped some ReLU; the difference quotient
  /// is meaningless there.
  std::size_t kink_skipped = 0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
  bool passed = false;
};

/// Scalar objective built on a fresh tape from current parameter values.
using ScalarObjective = std::function<Var(Tape&)>;

/// Compares the analytic gradient of `f` with central differences
/// (f(θ+h) − f(θ−h)) / 2h for every coordinate of every parameter in `params`.
/// Parameter gradients are zeroed first and left holding the analytic result.
GradientCheckReport gradient_check(const ScalarObjective& f, std::span<Parameter* const> params,
                                   const GradientCheckOptions& options = {});

}  // namespace roe
