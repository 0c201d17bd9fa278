#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "roe/autograd.hpp"
#include "roe/checkpoint.hpp"

namespace roe {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// Decoupled weight decay Adam. Parameters with `trainable == false` are
/// skipped entirely: their values and moments never change.
class AdamW {
 public:
  AdamW(std::vector<Parameter*> params, AdamWConfig cfg = {});

  using LearningRate = std::function<double(const Parameter&)>;
  void step(const LearningRate& lr);
  void zero_grad();

  std::size_t steps() const { return t_; }
  /// Moments as optim.m.<name> / optim.v.<name> plus the step count.
  void save_state(Checkpoint& ck) const;
  void load_state(const Checkpoint& ck);

 private:
  std::vector<Parameter*> params_;
  AdamWConfig cfg_;
  std::vector<Tensor> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace roe
