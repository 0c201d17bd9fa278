#include "roe/objectives.hpp"

#include <cmath>

#include "roe/errors.hpp"

namespace roe {

nlohmann::ordered_json LossBreakdown::to_json() const {
  nlohmann::ordered_json j;
  j["L_t"] = task_loss;
  j["L_s"] = sparsity_loss;
  j["weight"] = weight;
  j["total"] = total;
  j["mean_skip_prob"] = mean_skip_prob;
  return j;
}

namespace {

void check_target(double t) {
  if (!(t >= 0.0 && t <= 1.0)) {
    throw ParameterError("sparsity target " + std::to_string(t) + " outside [0, 1]");
  }
}

}  // namespace

Var sparsity_loss(std::span<const Var> skip_probs, double target) {
  check_target(target);
  if (skip_probs.empty()) throw DegenerateBatchError("sparsity loss over an empty probability set");
  return hinge_below(mean(stack(skip_probs)), target);
}

double sparsity_loss(std::span<const double> skip_probs, double target) {
  check_target(target);
  if (skip_probs.empty()) throw DegenerateBatchError("sparsity loss over an empty probability set");
  double s = 0.0;
  for (double p : skip_probs) {
    if (!(p >= 0.0 && p <= 1.0)) throw ParameterError("skip probability outside [0, 1]");
    s += p;
  }
  return std::max(target - s / static_cast<double>(skip_probs.size()), 0.0);
}

double difficulty_weight(double task_loss) { return std::exp(-std::abs(task_loss)); }

SampleLoss combined_loss(Tape& tape, Var task_loss, Var sparsity, double alpha,
                         double mean_skip_prob) {
  if (!(alpha >= 0.0)) throw ParameterError("alpha must be non-negative");
  const double lt = task_loss.value()[0];
  if (!std::isfinite(lt)) throw DivergenceError("task loss is not finite");
  SampleLoss out;
  out.parts.task_loss = lt;
  out.parts.sparsity_loss = sparsity.value()[0];
  out.parts.weight = difficulty_weight(lt);
  out.parts.mean_skip_prob = mean_skip_prob;
  const Var w = tape.constant(Tensor::scalar(alpha * out.parts.weight));
  out.total = add(task_loss, mul_scalar(sparsity, w));
  out.parts.total = out.total.value()[0];
  return out;
}

double combined_loss(double task_loss, double sparsity, double alpha) {
  if (!(alpha >= 0.0)) throw ParameterError("alpha must be non-negative");
  if (!std::isfinite(task_loss)) throw DivergenceError("task loss is not finite");
  return task_loss + alpha * difficulty_weight(task_loss) * sparsity;
}

SampleLoss segmented_loss(Tape& tape, Var task_loss, std::span<const std::vector<Var>> segment_probs,
                          std::span<const double> segment_task_losses, double target, double alpha) {
  if (!(alpha >= 0.0)) throw ParameterError("alpha must be non-negative");
  check_target(target);
  if (segment_probs.empty()) throw DegenerateBatchError("sparsity loss over no segments");
  if (segment_task_losses.size() != segment_probs.size()) {
    throw DimensionError("segmented_loss: " + std::to_string(segment_probs.size()) +
                         " segments but " + std::to_string(segment_task_losses.size()) +
                         " task losses");
  }
  const double lt = task_loss.value()[0];
  if (!std::isfinite(lt)) throw DivergenceError("task loss is not finite");
  SampleLoss out;
  out.parts.task_loss = lt;
  std::vector<Var> terms;
  double hinge_sum = 0.0, weighted_sum = 0.0, p_sum = 0.0;
  std::size_t p_count = 0;
  for (std::size_t s = 0; s < segment_probs.size(); ++s) {
    const Var h = sparsity_loss(segment_probs[s], target);
    const double w = difficulty_weight(segment_task_losses[s]);
    if (!std::isfinite(w)) throw DivergenceError("segment task loss is not finite");
    terms.push_back(mul_scalar(h, tape.constant(Tensor::scalar(alpha * w))));
    hinge_sum += h.value()[0];
    weighted_sum += w * h.value()[0];
    for (const Var& p : segment_probs[s]) p_sum += p.value()[0];
    p_count += segment_probs[s].size();
  }
  const double n = static_cast<double>(segment_probs.size());
  out.parts.sparsity_loss = hinge_sum / n;
  out.parts.weight = hinge_sum > 0.0 ? weighted_sum / hinge_sum : difficulty_weight(lt);
  out.parts.mean_skip_prob = p_sum / static_cast<double>(p_count);
  out.total = add(task_loss, mean(stack(terms)));
  out.parts.total = out.total.value()[0];
  return out;
}

SampleLoss batch_loss(std::span<const SampleLoss> samples) {
  if (samples.empty()) throw DegenerateBatchError("empty batch");
  std::vector<Var> totals;
  LossBreakdown b;
  double weighted_ls = 0.0;
  for (const auto& s : samples) {
    totals.push_back(s.total);
    b.task_loss += s.parts.task_loss;
    b.sparsity_loss += s.parts.sparsity_loss;
    b.mean_skip_prob += s.parts.mean_skip_prob;
    weighted_ls += s.parts.weight * s.parts.sparsity_loss;
  }
  const double n = static_cast<double>(samples.size());
  b.task_loss /= n;
  b.sparsity_loss /= n;
  b.mean_skip_prob /= n;
  weighted_ls /= n;
  b.weight = b.sparsity_loss > 0.0 ? weighted_ls / b.sparsity_loss : 1.0;
  SampleLoss out;
  out.total = mean(stack(totals));
  b.total = out.total.value()[0];
  out.parts = b;
  return out;
}

}  // namespace roe
