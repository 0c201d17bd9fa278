#pragma once

#include <cstddef>
#include <random>
#include <vector>

#include "roe/autograd.hpp"
#include "roe/model.hpp"

namespace roe {

/// Residual low-rank bottleneck x + ReLU(x W_d) W_u, the cheap path that
/// replaces a skipped layer. W_u starts at zero, so a fresh adapter is an
/// exact identity on the residual stream.
struct Adapter {
  Parameter w_down;  // [d x c]
  Parameter w_up;    // [c x d]

  Adapter() = default;
  /// Throws ConfigError unless 2*d*c is below one decoder layer's parameter count.
  Adapter(const ModelConfig& cfg, std::size_t index, std::mt19937_64& rng);

  std::size_t parameter_count() const { return w_down.value.size() + w_up.value.size(); }
  std::vector<Parameter*> parameters() { return {&w_down, &w_up}; }
};

Var apply_adapter(Tape& tape, Adapter& adapter, Var x);
Tensor apply_adapter(const Adapter& adapter, const Tensor& x);

/// Multiply-add work counted as 2 FLOPs each.
double adapter_flops(std::size_t m, std::size_t d, std::size_t c);
/// One decoder layer over m tokens attending to m keys: QKVO projections,
/// score and value products, and the two FFN matmuls.
double layer_flops(std::size_t m, std::size_t d, std::size_t d_ff);
/// Same layer when m new tokens attend to `context` cached keys.
double layer_flops_cached(std::size_t m, std::size_t context, std::size_t d, std::size_t d_ff);

}  // namespace roe
