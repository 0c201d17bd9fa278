#include "roe/adapters.hpp"

#include "roe/errors.hpp"

namespace roe {

Adapter::Adapter(const ModelConfig& cfg, std::size_t index, std::mt19937_64& rng) {
  const std::size_t d = cfg.d_model;
  const std::size_t c = cfg.adapter_dim;
  const std::string p = "adapters." + std::to_string(index) + ".";
  w_down = Parameter(p + "w_down", Tensor::gaussian({d, c}, 0.02, rng), ParamGroup::Adapter);
  w_up = Parameter(p + "w_up", Tensor({c, d}, 0.0), ParamGroup::Adapter);
  const std::size_t layer_params = 4 * d * d + 2 * d * cfg.d_ff + 4 * d;
  if (parameter_count() >= layer_params) {
    throw ConfigError("adapter with " + std::to_string(parameter_count()) +
                      " parameters is not cheaper than a layer with " + std::to_string(layer_params));
  }
}

namespace {

void check_width(const Tensor& x, const Adapter& a) {
  const std::size_t d = a.w_down.value.shape()[0];
  if (x.rank() != 2 || x.cols() != d) {
    throw DimensionError("adapter input " + shape_string(x.shape()) + " does not have width " +
                         std::to_string(d));
  }
}

}  // namespace

Var apply_adapter(Tape& tape, Adapter& adapter, Var x) {
  check_width(x.value(), adapter);
  const Var h = relu(matmul(x, tape.param(adapter.w_down)));
  return add(x, matmul(h, tape.param(adapter.w_up)));
}

Tensor apply_adapter(const Adapter& adapter, const Tensor& x) {
  check_width(x, adapter);
  Tensor h = matmul(x, adapter.w_down.value);
  for (double& v : h.data()) v = v > 0.0 ? v : 0.0;
  Tensor out = x;
  out.add_inplace(matmul(h, adapter.w_up.value));
  return out;
}

double adapter_flops(std::size_t m, std::size_t d, std::size_t c) {
  return 2.0 * 2.0 * static_cast<double>(m) * static_cast<double>(d) * static_cast<double>(c);
}

double layer_flops_cached(std::size_t m, std::size_t context, std::size_t d, std::size_t d_ff) {
  const double md = static_cast<double>(m), cd = static_cast<double>(context);
  const double dd = static_cast<double>(d), ff = static_cast<double>(d_ff);
  const double proj = 4.0 * md * dd * dd;
  const double attn = 2.0 * md * cd * dd;
  const double ffn = 2.0 * md * dd * ff;
  return 2.0 * (proj + attn + ffn);
}

double layer_flops(std::size_t m, std::size_t d, std::size_t d_ff) {
  return layer_flops_cached(m, m, d, d_ff);
}

}  // namespace roe
