#include "roe/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "kernel_attrs.hpp"
#include "roe/errors.hpp"

namespace roe {

const char* to_string(ParamGroup group) {
  switch (group) {
    case ParamGroup::Backbone: return "backbone";
    case ParamGroup::Adapter: return "adapter";
    case ParamGroup::Router: return "router";
  }
  return "?";
}

Parameter::Parameter(std::string name, Tensor value, ParamGroup group, bool weight_decay)
    : name(std::move(name)),
      value(std::move(value)),
      grad(this->value.shape()),
      group(group),
      weight_decay(weight_decay) {}

void Parameter::zero_grad() {
  if (grad.size() != value.size()) {
    grad = Tensor(value.shape());
  } else {
    grad.fill(0.0);
  }
}

const Tensor& Var::value() const { return tape_->value(*this); }

AttentionMask AttentionMask::causal(std::size_t n) {
  AttentionMask m(n);
  for (std::size_t q = 0; q < n; ++q)
    for (std::size_t k = 0; k <= q; ++k) m.set(q, k, true);
  return m;
}

// ---------------------------------------------------------------------------
// Tape

Var Tape::constant(Tensor value) {
  value.check_finite("constant");
  nodes_.push_back(Node{std::move(value), Tensor(), false, nullptr, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::param(Parameter& p) {
  if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var(this, it->second);
  p.value.check_finite(p.name.c_str());
  const bool rg = grad_enabled_ && p.trainable;
  nodes_.push_back(Node{Tensor(), Tensor(), rg, rg ? &p : nullptr, {}, &p.value});
  param_nodes_.emplace(&p, nodes_.size() - 1);
  return Var(this, nodes_.size() - 1);
}

Tensor Tape::grad(Var v) const {
  const Node& n = nodes_[v.id()];
  if (n.grad.size() == n.val().size() && !n.grad.empty()) return n.grad;
  return Tensor(n.val().shape());
}

Tensor* Tape::grad_sink(Var v) {
  Node& n = nodes_[v.id()];
  if (!n.requires_grad) return nullptr;
  if (n.grad.size() != n.val().size() || n.grad.empty()) n.grad = Tensor(n.val().shape());
  return &n.grad;
}

Var Tape::record(Tensor value, std::initializer_list<Var> parents, BackwardFn fn,
                 const char* op_name) {
  return record(std::move(value), std::span<const Var>(parents.begin(), parents.size()),
                std::move(fn), op_name);
}

Var Tape::record(Tensor value, std::span<const Var> parents, BackwardFn fn,
                 const char* op_name) {
  value.check_finite(op_name);
  bool rg = false;
  if (grad_enabled_) {
    for (const Var& p : parents) rg = rg || nodes_[p.id()].requires_grad;
  }
  nodes_.push_back(Node{std::move(value), Tensor(), rg, nullptr, rg ? std::move(fn) : BackwardFn{}});
  return Var(this, nodes_.size() - 1);
}

void Tape::backward(Var loss, double seed) {
  for (auto& n : nodes_) n.grad = Tensor();
  Node& root = nodes_[loss.id()];
  if (!root.requires_grad) return;
  root.grad = Tensor(root.val().shape(), seed);
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.empty()) continue;
    if (n.param) {
      if (n.param->grad.size() != n.grad.size()) n.param->grad = Tensor(n.param->value.shape());
      n.param->grad.add_inplace(n.grad);
    } else if (n.backward) {
      n.backward(*this, n.grad);
    }
  }
}

// ---------------------------------------------------------------------------
// Kernels

namespace {

void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got shape " +
                         shape_string(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
  }
}

// out[m x n] += a[m x k] * b[k x n]. Every output element accumulates its
// products in increasing p, so a row's result does not depend on which other
// rows are in the product.
ROE_HOT void gemm_acc(const double* a, const double* b, double* out, std::size_t m, std::size_t k,
              std::size_t n) {
  constexpr std::size_t kBlock = 16;
  std::size_t j0 = 0;
  for (; j0 + kBlock <= n; j0 += kBlock) {
    for (std::size_t i = 0; i < m; ++i) {
      double acc[kBlock];
      double* orow = out + i * n + j0;
      for (std::size_t t = 0; t < kBlock; ++t) acc[t] = orow[t];
      const double* arow = a + i * k;
      for (std::size_t p = 0; p < k; ++p) {
        const double av = arow[p];
        const double* brow = b + p * n + j0;
        for (std::size_t t = 0; t < kBlock; ++t) acc[t] += av * brow[t];
      }
      for (std::size_t t = 0; t < kBlock; ++t) orow[t] = acc[t];
    }
  }
  if (j0 == n) return;
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = out + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + p * n;
      for (std::size_t j = j0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
}

// out[m x k] += g[m x n] * b[k x n]^T
ROE_HOT void gemm_nt_acc(const double* g, const double* b, double* out, std::size_t m,
                         std::size_t n, std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* grow = g + i * n;
    double* orow = out + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = b + p * n;
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
      orow[p] += s;
    }
  }
}

// out[k x n] += a[m x k]^T * g[m x n]
ROE_HOT void gemm_tn_acc(const double* a, const double* g, double* out, std::size_t m,
                         std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* grow = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      double* orow = out + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * grow[j];
    }
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  if (a.shape()[1] != b.shape()[0]) {
    throw DimensionError("matmul: inner extents differ, " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  Tensor out({m, n});
  gemm_acc(a.data().data(), b.data().data(), out.data().data(), m, k, n);
  return out;
}

Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  const std::size_t r = a.shape()[0], c = a.shape()[1];
  Tensor out({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out.at(j, i) = a.at(i, j);
  return out;
}

// ---------------------------------------------------------------------------
// Ops

Var matmul(Var a, Var b) {
  Tape& t = a.tape();
  Tensor out = matmul(a.value(), b.value());
  return t.record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    const std::size_t m = av.shape()[0], k = av.shape()[1], n = bv.shape()[1];
    if (Tensor* ga = t.grad_sink(a)) gemm_nt_acc(g.data().data(), bv.data().data(), ga->data().data(), m, n, k);
    if (Tensor* gb = t.grad_sink(b)) gemm_tn_acc(av.data().data(), g.data().data(), gb->data().data(), m, k, n);
  }, "matmul");
}

Var add(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  out.add_inplace(b.value());
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (Tensor* ga = t.grad_sink(a)) ga->add_inplace(g);
    if (Tensor* gb = t.grad_sink(b)) gb->add_inplace(g);
  }, "add");
}

Var sub(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "sub");
  Tensor out = a.value();
  out.add_inplace(b.value(), -1.0);
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (Tensor* ga = t.grad_sink(a)) ga->add_inplace(g);
    if (Tensor* gb = t.grad_sink(b)) gb->add_inplace(g, -1.0);
  }, "sub");
}

Var scale(Var a, double s) {
  Tensor out = a.value();
  for (auto& v : out.data()) v *= s;
  return a.tape().record(std::move(out), {a}, [a, s](Tape& t, const Tensor& g) {
    if (Tensor* ga = t.grad_sink(a)) ga->add_inplace(g, s);
  }, "scale");
}

Var mul_scalar(Var a, Var s) {
  if (s.value().size() != 1) {
    throw DimensionError("mul_scalar: scale must have one element, got " +
                         shape_string(s.value().shape()));
  }
  const double sv = s.value()[0];
  Tensor out = a.value();
  for (auto& v : out.data()) v *= sv;
  return a.tape().record(std::move(out), {a, s}, [a, s](Tape& t, const Tensor& g) {
    const double sv = t.value(s)[0];
    if (Tensor* ga = t.grad_sink(a)) ga->add_inplace(g, sv);
    if (Tensor* gs = t.grad_sink(s)) {
      const Tensor& av = t.value(a);
      double acc = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * av[i];
      (*gs)[0] += acc;
    }
  }, "mul_scalar");
}

Var relu(Var x) {
  Tensor out = x.value();
  std::uint64_t sig = x.tape().kink_signature();
  for (auto& v : out.data()) {
    sig = (sig ^ (v > 0.0 ? 1u : 2u)) * 0x100000001b3ULL;
    v = v > 0.0 ? v : 0.0;
  }
  x.tape().set_kink_signature(sig);
  return x.tape().record(std::move(out), {x}, [x](Tape& t, const Tensor& g) {
    if (Tensor* gx = t.grad_sink(x)) {
      const Tensor& xv = t.value(x);
      for (std::size_t i = 0; i < g.size(); ++i)
        if (xv[i] > 0.0) (*gx)[i] += g[i];
    }
  }, "relu");
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

// 0.5 * (1 + tanh(u)) written as a logistic, which needs one exp.
double gelu_gate(double v) {
  const double u = kGeluC * (v + kGeluA * v * v * v);
  return 1.0 / (1.0 + std::exp(-2.0 * u));
}
}  // namespace

Var gelu(Var x) {
  Tensor out = x.value();
  for (auto& v : out.data()) v *= gelu_gate(v);
  return x.tape().record(std::move(out), {x}, [x](Tape& t, const Tensor& g) {
    if (Tensor* gx = t.grad_sink(x)) {
      const Tensor& xv = t.value(x);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double v = xv[i];
        const double s = gelu_gate(v);
        const double d = s + 2.0 * v * s * (1.0 - s) * kGeluC * (1.0 + 3.0 * kGeluA * v * v);
        (*gx)[i] += g[i] * d;
      }
    }
  }, "gelu");
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  const Tensor& xv = x.value();
  const std::size_t d = xv.cols();
  if (d == 0) throw DimensionError("layer_norm: zero-width input");
  if (!(eps > 0.0)) throw ParameterError("layer_norm: eps must be positive");
  if (gain.value().size() != d || bias.value().size() != d) {
    throw DimensionError("layer_norm: gain/bias " + shape_string(gain.value().shape()) + "/" +
                         shape_string(bias.value().shape()) + " vs input " +
                         shape_string(xv.shape()));
  }
  const std::size_t rows = xv.size() / d;
  auto xhat = std::make_shared<Tensor>(xv.shape());
  auto rstd = std::make_shared<std::vector<double>>(rows);
  Tensor out(xv.shape());
  const Tensor& gv = gain.value();
  const Tensor& bv = bias.value();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.data().data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(d);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t j = 0; j < d; ++j) {
      const double xh = (xr[j] - mu) * rs;
      (*xhat)[r * d + j] = xh;
      out[r * d + j] = gv[j] * xh + bv[j];
    }
  }
  return x.tape().record(std::move(out), {x, gain, bias},
      [x, gain, bias, xhat, rstd, d, rows](Tape& t, const Tensor& g) {
        const Tensor& gv = t.value(gain);
        Tensor* gx = t.grad_sink(x);
        Tensor* gg = t.grad_sink(gain);
        Tensor* gb = t.grad_sink(bias);
        std::vector<double> dxh(d);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* gr = g.data().data() + r * d;
          const double* xh = xhat->data().data() + r * d;
          if (gg)
            for (std::size_t j = 0; j < d; ++j) (*gg)[j] += gr[j] * xh[j];
          if (gb)
            for (std::size_t j = 0; j < d; ++j) (*gb)[j] += gr[j];
          if (gx) {
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              dxh[j] = gr[j] * gv[j];
              m1 += dxh[j];
              m2 += dxh[j] * xh[j];
            }
            m1 /= static_cast<double>(d);
            m2 /= static_cast<double>(d);
            const double rs = (*rstd)[r];
            for (std::size_t j = 0; j < d; ++j)
              (*gx)[r * d + j] += rs * (dxh[j] - m1 - xh[j] * m2);
          }
        }
      }, "layer_norm");
}

Var softmax(Var x, std::size_t axis, double temperature) {
  if (!(temperature > 0.0)) {
    throw ParameterError("softmax: temperature must be positive, got " +
                         std::to_string(temperature));
  }
  const Tensor& xv = x.value();
  const Shape& shape = xv.shape();
  if (axis >= shape.size()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " out of range for " +
                         shape_string(shape));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  const std::size_t len = shape[axis];
  Tensor out(shape);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = xv[base];
      for (std::size_t j = 1; j < len; ++j) mx = std::max(mx, xv[base + j * inner]);
      double s = 0.0;
      for (std::size_t j = 0; j < len; ++j) {
        const double e = std::exp((xv[base + j * inner] - mx) / temperature);
        out[base + j * inner] = e;
        s += e;
      }
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= s;
    }
  }
  auto saved = std::make_shared<Tensor>(out);
  return x.tape().record(std::move(out), {x},
      [x, saved, outer, inner, len, temperature](Tape& t, const Tensor& g) {
        Tensor* gx = t.grad_sink(x);
        if (!gx) return;
        const Tensor& yv = *saved;
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            double dot = 0.0;
            for (std::size_t j = 0; j < len; ++j) dot += yv[base + j * inner] * g[base + j * inner];
            for (std::size_t j = 0; j < len; ++j) {
              const std::size_t idx = base + j * inner;
              (*gx)[idx] += yv[idx] * (g[idx] - dot) / temperature;
            }
          }
        }
      }, "softmax");
}

Var cross_entropy(Var logits, std::span<const int> targets, std::span<const std::uint8_t> mask) {
  const Tensor& lv = logits.value();
  if (lv.rank() != 2) {
    throw DimensionError("cross_entropy: logits must be [n x V], got " + shape_string(lv.shape()));
  }
  const std::size_t n = lv.shape()[0], V = lv.shape()[1];
  if (targets.size() != n || mask.size() != n) {
    throw DimensionError("cross_entropy: " + std::to_string(n) + " logit rows but " +
                         std::to_string(targets.size()) + " targets / " +
                         std::to_string(mask.size()) + " mask entries");
  }
  std::size_t count = 0;
  for (std::size_t r = 0; r < n; ++r) {
    if (!mask[r]) continue;
    ++count;
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= V) {
      throw ParameterError("cross_entropy: target id " + std::to_string(targets[r]) +
                           " out of range for vocabulary " + std::to_string(V));
    }
  }
  if (count == 0) throw DegenerateBatchError("cross_entropy: every position is masked");
  auto probs = std::make_shared<Tensor>(Shape{n, V});
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    if (!mask[r]) continue;
    const double* row = lv.data().data() + r * V;
    double mx = row[0];
    for (std::size_t j = 1; j < V; ++j) mx = std::max(mx, row[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < V; ++j) {
      const double e = std::exp(row[j] - mx);
      (*probs)[r * V + j] = e;
      s += e;
    }
    for (std::size_t j = 0; j < V; ++j) (*probs)[r * V + j] /= s;
    total += (std::log(s) + mx) - row[targets[r]];
  }
  const double inv = 1.0 / static_cast<double>(count);
  std::vector<int> tg(targets.begin(), targets.end());
  std::vector<std::uint8_t> mk(mask.begin(), mask.end());
  return logits.tape().record(Tensor::scalar(total * inv), {logits},
      [logits, probs, tg = std::move(tg), mk = std::move(mk), n, V, inv](Tape& t,
                                                                          const Tensor& g) {
        Tensor* gl = t.grad_sink(logits);
        if (!gl) return;
        const double s = g[0] * inv;
        for (std::size_t r = 0; r < n; ++r) {
          if (!mk[r]) continue;
          for (std::size_t j = 0; j < V; ++j) (*gl)[r * V + j] += s * (*probs)[r * V + j];
          (*gl)[r * V + tg[r]] -= s;
        }
      }, "cross_entropy");
}

Var gather_rows(Var x, std::span<const std::size_t> rows) {
  const Tensor& xv = x.value();
  require_matrix(xv, "gather_rows");
  const std::size_t n = xv.shape()[0], c = xv.shape()[1];
  Tensor out({rows.size(), c});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= n) {
      throw DimensionError("gather_rows: row " + std::to_string(rows[i]) + " out of range for " +
                           shape_string(xv.shape()));
    }
    std::copy_n(xv.data().data() + rows[i] * c, c, out.data().data() + i * c);
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return x.tape().record(std::move(out), {x}, [x, idx = std::move(idx), c](Tape& t,
                                                                          const Tensor& g) {
    if (Tensor* gx = t.grad_sink(x)) {
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < c; ++j) (*gx)[idx[i] * c + j] += g[i * c + j];
    }
  }, "gather_rows");
}

Var merge_rows(std::size_t n_rows, std::span<const RowBlock> blocks) {
  if (blocks.empty()) throw DimensionError("merge_rows: no blocks");
  Tape& tape = blocks[0].src.tape();
  const std::size_t c = blocks[0].src.value().cols();
  Tensor out({n_rows, c});
  std::vector<std::uint8_t> seen(n_rows, 0);
  std::vector<Var> parents;
  for (const auto& b : blocks) {
    const Tensor& sv = b.src.value();
    if (sv.rank() != 2 || sv.cols() != c || sv.shape()[0] != b.rows.size()) {
      throw DimensionError("merge_rows: block " + shape_string(sv.shape()) + " for " +
                           std::to_string(b.rows.size()) + " rows of width " + std::to_string(c));
    }
    for (std::size_t i = 0; i < b.rows.size(); ++i) {
      const std::size_t r = b.rows[i];
      if (r >= n_rows || seen[r]) {
        throw DimensionError("merge_rows: row " + std::to_string(r) + " out of range or repeated");
      }
      seen[r] = 1;
      std::copy_n(sv.data().data() + i * c, c, out.data().data() + r * c);
    }
    parents.push_back(b.src);
  }
  std::vector<RowBlock> saved(blocks.begin(), blocks.end());
  return tape.record(std::move(out), parents, [saved = std::move(saved), c](Tape& t,
                                                                           const Tensor& g) {
    for (const auto& b : saved) {
      Tensor* gs = t.grad_sink(b.src);
      if (!gs) continue;
      for (std::size_t i = 0; i < b.rows.size(); ++i)
        for (std::size_t j = 0; j < c; ++j) (*gs)[i * c + j] += g[b.rows[i] * c + j];
    }
  }, "merge_rows");
}

Var concat_cols(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_matrix(av, "concat_cols");
  require_matrix(bv, "concat_cols");
  if (av.shape()[0] != bv.shape()[0]) {
    throw DimensionError("concat_cols: row counts differ, " + shape_string(av.shape()) + " vs " +
                         shape_string(bv.shape()));
  }
  const std::size_t r = av.shape()[0], ca = av.shape()[1], cb = bv.shape()[1];
  Tensor out({r, ca + cb});
  for (std::size_t i = 0; i < r; ++i) {
    std::copy_n(av.data().data() + i * ca, ca, out.data().data() + i * (ca + cb));
    std::copy_n(bv.data().data() + i * cb, cb, out.data().data() + i * (ca + cb) + ca);
  }
  return a.tape().record(std::move(out), {a, b}, [a, b, r, ca, cb](Tape& t, const Tensor& g) {
    const std::size_t w = ca + cb;
    if (Tensor* ga = t.grad_sink(a))
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < ca; ++j) (*ga)[i * ca + j] += g[i * w + j];
    if (Tensor* gb = t.grad_sink(b))
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < cb; ++j) (*gb)[i * cb + j] += g[i * w + ca + j];
  }, "concat_cols");
}

Var element(Var x, std::size_t flat_index) {
  if (flat_index >= x.value().size()) {
    throw DimensionError("element: index " + std::to_string(flat_index) + " out of range for " +
                         shape_string(x.value().shape()));
  }
  return x.tape().record(Tensor::scalar(x.value()[flat_index]), {x},
                         [x, flat_index](Tape& t, const Tensor& g) {
                           if (Tensor* gx = t.grad_sink(x)) (*gx)[flat_index] += g[0];
                         }, "element");
}

Var stack(std::span<const Var> scalars) {
  if (scalars.empty()) throw DimensionError("stack: no inputs");
  Tensor out({scalars.size()});
  for (std::size_t i = 0; i < scalars.size(); ++i) {
    if (scalars[i].value().size() != 1) throw DimensionError("stack: inputs must be scalars");
    out[i] = scalars[i].value()[0];
  }
  std::vector<Var> parts(scalars.begin(), scalars.end());
  return scalars[0].tape().record(std::move(out), scalars, [parts](Tape& t, const Tensor& g) {
    for (std::size_t i = 0; i < parts.size(); ++i)
      if (Tensor* gp = t.grad_sink(parts[i])) (*gp)[0] += g[i];
  }, "stack");
}

Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return x.tape().record(Tensor::scalar(s), {x}, [x](Tape& t, const Tensor& g) {
    if (Tensor* gx = t.grad_sink(x))
      for (auto& v : gx->data()) v += g[0];
  }, "sum");
}

Var mean(Var x) {
  const std::size_t n = x.value().size();
  if (n == 0) throw DegenerateBatchError("mean of an empty tensor");
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  const double inv = 1.0 / static_cast<double>(n);
  return x.tape().record(Tensor::scalar(s * inv), {x}, [x, inv](Tape& t, const Tensor& g) {
    if (Tensor* gx = t.grad_sink(x))
      for (auto& v : gx->data()) v += g[0] * inv;
  }, "mean");
}

Var hinge_below(Var x, double threshold) {
  Tensor out = x.value();
  for (auto& v : out.data()) v = std::max(threshold - v, 0.0);
  return x.tape().record(std::move(out), {x}, [x, threshold](Tape& t, const Tensor& g) {
    if (Tensor* gx = t.grad_sink(x)) {
      const Tensor& xv = t.value(x);
      for (std::size_t i = 0; i < g.size(); ++i)
        if (threshold - xv[i] > 0.0) (*gx)[i] -= g[i];
    }
  }, "hinge_below");
}

Var straight_through(Var p, const Tensor& hard) {
  require_same_shape(p.value(), hard, "straight_through");
  return p.tape().record(hard, {p}, [p](Tape& t, const Tensor& g) {
    if (Tensor* gp = t.grad_sink(p)) gp->add_inplace(g);
  }, "straight_through");
}

ROE_HOT Var attention(Var q, Var k, Var v, std::size_t heads, std::shared_ptr<const AttentionMask> mask,
              std::vector<std::size_t> query_rows) {
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  require_matrix(qv, "attention");
  require_matrix(kv, "attention");
  require_matrix(vv, "attention");
  const std::size_t m = qv.shape()[0], d = qv.shape()[1], n = kv.shape()[0];
  if (kv.shape()[1] != d || vv.shape() != kv.shape() || query_rows.size() != m ||
      heads == 0 || d % heads != 0 || mask->n != n) {
    throw DimensionError("attention: q " + shape_string(qv.shape()) + ", k " +
                         shape_string(kv.shape()) + ", v " + shape_string(vv.shape()) +
                         ", mask " + std::to_string(mask->n) + ", heads " +
                         std::to_string(heads));
  }
  const std::size_t dh = d / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  // Attention weights, [head][query][key], zero where masked.
  auto weights = std::make_shared<std::vector<double>>(heads * m * n, 0.0);
  Tensor out({m, d});
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t row = query_rows[i];
    if (row >= n) throw DimensionError("attention: query row out of range");
    for (std::size_t h = 0; h < heads; ++h) {
      const double* qi = qv.data().data() + i * d + h * dh;
      double* w = weights->data() + (h * m + i) * n;
      double mx = -std::numeric_limits<double>::infinity();
      bool any = false;
      for (std::size_t j = 0; j < n; ++j) {
        if (!mask->allowed(row, j)) continue;
        const double* kj = kv.data().data() + j * d + h * dh;
        double s = 0.0;
        for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
        s *= sc;
        w[j] = s;
        mx = any ? std::max(mx, s) : s;
        any = true;
      }
      if (!any) throw DimensionError("attention: query row " + std::to_string(row) + " sees no keys");
      double total = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        if (!mask->allowed(row, j)) continue;
        w[j] = std::exp(w[j] - mx);
        total += w[j];
      }
      double* oi = out.data().data() + i * d + h * dh;
      for (std::size_t j = 0; j < n; ++j) {
        if (!mask->allowed(row, j)) continue;
        w[j] /= total;
        const double* vj = vv.data().data() + j * d + h * dh;
        for (std::size_t c = 0; c < dh; ++c) oi[c] += w[j] * vj[c];
      }
    }
  }
  return q.tape().record(std::move(out), {q, k, v},
      [q, k, v, heads, mask, query_rows = std::move(query_rows), weights, m, n, d, dh, sc](
          Tape& t, const Tensor& g) {
        const Tensor& qv = t.value(q);
        const Tensor& kv = t.value(k);
        const Tensor& vv = t.value(v);
        Tensor* gq = t.grad_sink(q);
        Tensor* gk = t.grad_sink(k);
        Tensor* gv = t.grad_sink(v);
        std::vector<double> dp(n);
        for (std::size_t i = 0; i < m; ++i) {
          const std::size_t row = query_rows[i];
          for (std::size_t h = 0; h < heads; ++h) {
            const double* w = weights->data() + (h * m + i) * n;
            const double* gi = g.data().data() + i * d + h * dh;
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              if (!mask->allowed(row, j)) continue;
              const double* vj = vv.data().data() + j * d + h * dh;
              double s = 0.0;
              for (std::size_t c = 0; c < dh; ++c) s += gi[c] * vj[c];
              dp[j] = s;
              dot += w[j] * s;
              if (gv) {
                double* gvj = gv->data().data() + j * d + h * dh;
                for (std::size_t c = 0; c < dh; ++c) gvj[c] += w[j] * gi[c];
              }
            }
            const double* qi = qv.data().data() + i * d + h * dh;
            for (std::size_t j = 0; j < n; ++j) {
              if (!mask->allowed(row, j)) continue;
              const double ds = w[j] * (dp[j] - dot) * sc;
              if (gq) {
                const double* kj = kv.data().data() + j * d + h * dh;
                double* gqi = gq->data().data() + i * d + h * dh;
                for (std::size_t c = 0; c < dh; ++c) gqi[c] += ds * kj[c];
              }
              if (gk) {
                double* gkj = gk->data().data() + j * d + h * dh;
                for (std::size_t c = 0; c < dh; ++c) gkj[c] += ds * qi[c];
              }
            }
          }
        }
      }, "attention");
}

}  // namespace roe
