#include "roe/gradient_check.hpp"

#include <cmath>

#include "roe/errors.hpp"

namespace roe {

namespace {

struct Evaluation {
  double value;
  std::uint64_t kinks;
};

Evaluation evaluate(const ScalarObjective& f) {
  Tape tape(false);
  const Var out = f(tape);
  if (out.value().size() != 1) {
    throw DimensionError("gradient_check: objective must be scalar, got " +
                         shape_string(out.value().shape()));
  }
  const double v = out.value()[0];
  if (!std::isfinite(v)) throw NumericError("gradient_check: objective evaluated to non-finite");
  return {v, tape.kink_signature()};
}

}  // namespace

GradientCheckReport gradient_check(const ScalarObjective& f, std::span<Parameter* const> params,
                                   const GradientCheckOptions& options) {
  if (!(options.h >= 1e-6 && options.h <= 1e-4)) {
    throw ParameterError("gradient_check: step h must lie in [1e-6, 1e-4]");
  }
  for (Parameter* p : params) p->zero_grad();
  std::uint64_t base_kinks = 0;
  {
    Tape tape(true);
    const Var out = f(tape);
    if (!std::isfinite(out.value()[0])) {
      throw NumericError("gradient_check: objective evaluated to non-finite");
    }
    base_kinks = tape.kink_signature();
    tape.backward(out);
  }

  GradientCheckReport report;
  for (Parameter* p : params) {
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      if (options.include && !options.include(*p, i)) {
        ++report.skipped;
        continue;
      }
      const double saved = p->value[i];
      p->value[i] = saved + options.h;
      const Evaluation up = evaluate(f);
      p->value[i] = saved - options.h;
      const Evaluation down = evaluate(f);
      p->value[i] = saved;
      if (up.kinks != base_kinks || down.kinks != base_kinks) {
        ++report.kink_skipped;
        continue;
      }

      const double numeric = (up.value - down.value) / (2.0 * options.h);
      const double analytic = p->grad[i];
      const double abs_err = std::abs(numeric - analytic);
      const double denom = std::max({std::abs(numeric), std::abs(analytic), options.floor});
      const double rel = abs_err / denom;
      ++report.coordinates;
      report.max_abs_error = std::max(report.max_abs_error, abs_err);
      if (rel > report.max_rel_error || report.worst_parameter.empty()) {
        if (rel >= report.max_rel_error) {
          report.max_rel_error = rel;
          report.worst_parameter = p->name;
          report.worst_index = i;
          report.analytic_at_worst = analytic;
          report.numeric_at_worst = numeric;
        }
      }
    }
  }
  report.passed = report.max_rel_error < options.tolerance;
  return report;
}

}  // namespace roe
