#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "roe/tensor.hpp"

namespace roe {

/// Optimizer parameter groups. Backbone parameters belong to the pretrained
/// decoder; adapters and routers make up the routing-experts additions.
enum class ParamGroup { Backbone, Adapter, Router };

const char* to_string(ParamGroup group);

struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  ParamGroup group = ParamGroup::Backbone;
  bool trainable = true;
  bool weight_decay = true;

  Parameter() = default;
  Parameter(std::string name, Tensor value, ParamGroup group, bool weight_decay = true);

  void zero_grad();
};

class Tape;

/// Handle to a node on a Tape. Cheap to copy; only valid while its tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode tape. Nodes are appended in creation order, which is a
/// topological order, so backward simply walks the node list in reverse.
///
/// With `grad_enabled == false` the tape still stores values (one forward code
/// path for training and inference) but records no backward closures.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor& out_grad)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }
  std::size_t size() const { return nodes_.size(); }

  Var constant(Tensor value);
  /// Leaf bound to a parameter, read in place rather than copied. Requires
  /// grad only when the tape records gradients and the parameter is
  /// trainable. Repeated calls for the same parameter return the same node.
  Var param(Parameter& p);

  const Tensor& value(Var v) const { return nodes_[v.id()].val(); }
  bool requires_grad(Var v) const { return nodes_[v.id()].requires_grad; }
  /// Gradient of the last backward() w.r.t. `v` (zeros if it received none).
  Tensor grad(Var v) const;

  /// Backpropagates d(loss)/d(node) scaled by `seed`. Node gradients are reset
  /// first; parameter gradients accumulate across calls.
  void backward(Var loss, double seed = 1.0);

  /// Appends an op output. `fn` is dropped if no parent requires grad.
  Var record(Tensor value, std::initializer_list<Var> parents, BackwardFn fn,
             const char* op_name);
  Var record(Tensor value, std::span<const Var> parents, BackwardFn fn, const char* op_name);

  /// Running hash of the active/inactive pattern of every ReLU evaluated on
  /// this tape. Two evaluations with equal signatures took the same branch
  /// at every kink, which finite-difference checks rely on.
  std::uint64_t kink_signature() const { return kink_signature_; }
  void set_kink_signature(std::uint64_t s) { kink_signature_ = s; }

  /// Gradient accumulator for `v` during backward, or nullptr when `v` does
  /// not require grad.
  Tensor* grad_sink(Var v);

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    Parameter* param = nullptr;
    BackwardFn backward;
    // Parameter leaves read the parameter in place; it must not change while
    // the tape is alive.
    const Tensor* borrowed = nullptr;

    const Tensor& val() const { return borrowed ? *borrowed : value; }
  };

  bool grad_enabled_;
  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, std::size_t> param_nodes_;
  std::uint64_t kink_signature_ = 0xcbf29ce484222325ULL;
};

/// n x n boolean attention mask; `allowed(q, k)` says query row q may read key row k.
struct AttentionMask {
  std::size_t n = 0;
  std::vector<std::uint8_t> bits;

  AttentionMask() = default;
  explicit AttentionMask(std::size_t n) : n(n), bits(n * n, 0) {}
  static AttentionMask causal(std::size_t n);

  bool allowed(std::size_t q, std::size_t k) const { return bits[q * n + k] != 0; }
  void set(std::size_t q, std::size_t k, bool v) { bits[q * n + k] = v ? 1 : 0; }
  bool operator==(const AttentionMask&) const = default;
};

/// Rows of `src` written to positions `rows` of a merged output.
struct RowBlock {
  Var src;
  std::vector<std::size_t> rows;
};

// Differentiable primitives. Shapes follow row-major [rows x cols] unless noted.

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var scale(Var a, double s);
/// a * s where s holds exactly one element.
Var mul_scalar(Var a, Var s);
/// Subgradient at 0 is 0.
Var relu(Var x);
/// tanh approximation.
Var gelu(Var x);
/// Normalizes over the last axis, then gain * xhat + bias.
Var layer_norm(Var x, Var gain, Var bias, double eps);
/// softmax(x / temperature) along `axis`, stabilized by max subtraction.
Var softmax(Var x, std::size_t axis, double temperature);
/// Mean NLL over rows with mask[r] != 0; logits are [n x V], targets per row.
Var cross_entropy(Var logits, std::span<const int> targets, std::span<const std::uint8_t> mask);
Var gather_rows(Var x, std::span<const std::size_t> rows);
Var merge_rows(std::size_t n_rows, std::span<const RowBlock> blocks);
Var concat_cols(Var a, Var b);
Var element(Var x, std::size_t flat_index);
Var stack(std::span<const Var> scalars);
Var sum(Var x);
Var mean(Var x);
/// max(t - x, 0) elementwise; gradient -1 where t - x > 0, else 0.
Var hinge_below(Var x, double t);
/// Forward value is `hard`; gradient flows to `p` unchanged.
Var straight_through(Var p, const Tensor& hard);

/// Multi-head scaled dot-product attention.
///  q: [m x d] queries for sequence rows `query_rows`
///  k, v: [n x d] for the full sequence
/// Each head attends over columns allowed by `mask` for its query row;
/// masked entries receive exactly zero weight.
Var attention(Var q, Var k, Var v, std::size_t heads,
              std::shared_ptr<const AttentionMask> mask,
              std::vector<std::size_t> query_rows);

// Plain-tensor kernels shared by ops and tests.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

}  // namespace roe
