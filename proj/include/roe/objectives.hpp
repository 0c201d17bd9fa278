#pragma once

#include <span>
#include <vector>

#include <json.hpp>

#include "roe/autograd.hpp"

namespace roe {

struct LossBreakdown {
  double task_loss = 0.0;       // L_t
  double sparsity_loss = 0.0;   // L_s
  double weight = 1.0;          // exp(-|L_t|), detached
  double total = 0.0;           // L_t + alpha * weight * L_s
  double mean_skip_prob = 0.0;

  nlohmann::ordered_json to_json() const;
};

/// max(t - mean(p), 0) over the given skip probabilities.
Var sparsity_loss(std::span<const Var> skip_probs, double target);
double sparsity_loss(std::span<const double> skip_probs, double target);

double difficulty_weight(double task_loss);

struct SampleLoss {
  Var total;
  LossBreakdown parts;
};

/// L_t + alpha * exp(-|L_t|) * L_s. The weight enters as a constant, so no
/// gradient reaches L_t through it. Throws DivergenceError on non-finite L_t.
SampleLoss combined_loss(Tape& tape, Var task_loss, Var sparsity, double alpha,
                         double mean_skip_prob = 0.0);
double combined_loss(double task_loss, double sparsity, double alpha);

/// Routed form with one hinge per segment:
///   L_t + alpha * mean_s( exp(-|L_t^(s)|) * max(t - mean_layers p_skip(s), 0) )
/// `segment_probs[s]` holds that segment's p_skip for every layer and
/// `segment_task_losses[s]` the task loss its weight is taken from (the
/// sample's own L_t when weighting per sample). Reported L_s is the plain
/// mean of the hinges and `weight` the effective one.
SampleLoss segmented_loss(Tape& tape, Var task_loss, std::span<const std::vector<Var>> segment_probs,
                          std::span<const double> segment_task_losses, double target, double alpha);

/// Batch mean of per-sample totals. The reported `weight` is the effective
/// one, mean(w * L_s) / mean(L_s), so total == L_t + alpha * weight * L_s
/// holds for the averaged parts too.
SampleLoss batch_loss(std::span<const SampleLoss> samples);

}  // namespace roe
