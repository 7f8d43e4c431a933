#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "autodiff/tensor.hpp"

namespace nlimb::ad {

class Tape;

// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t size() const { return value().size(); }
  double item() const { return value().item(); }
  Tape* tape() const noexcept { return tape_; }
  int id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

// Leaves created for every entry of a ParamSet, in the set's order.
class BoundParams {
 public:
  BoundParams() = default;
  Var operator[](const std::string& name) const { return vars_.at(params_->index_of(name)); }
  Var operator[](std::size_t i) const { return vars_.at(i); }
  const ParamSet& params() const { return *params_; }
  std::size_t size() const { return vars_.size(); }
  Tape* tape() const { return tape_; }

 private:
  friend class Tape;
  const ParamSet* params_ = nullptr;
  Tape* tape_ = nullptr;
  std::vector<Var> vars_;
};

// Records primitive ops in execution order (which is a topological order)
// and replays them backward. With recording off, ops only compute values.
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor& out_grad)>;

  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return record_; }

  // Non-differentiable input.
  Var constant(Tensor value);
  // Differentiable input.
  Var leaf(Tensor value);
  // One leaf per parameter. `params` must outlive the binding.
  BoundParams bind(const ParamSet& params);

  const Tensor& value(int id) const { return nodes_[id].value; }
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }
  std::size_t num_nodes() const noexcept { return nodes_.size(); }

  // Seeds d(loss)/d(loss) = 1 and accumulates gradients into every node.
  void backward(Var loss);
  bool has_run_backward() const noexcept { return backward_done_; }
  // Gradient of the last backward pass; zeros when the node was unreached.
  Tensor gradient(int id) const;

  // Used by primitives.
  Var record(Tensor value, std::initializer_list<Var> inputs, Backward fn);
  Var record(Tensor value, const std::vector<Var>& inputs, Backward fn);
  void accumulate(int id, const Tensor& g);
  // Accumulation buffer for `id`, allocated (zeroed) on first use.
  Tensor& grad_buffer(int id);

  // When set, attention primitives append their weights here.
  void set_attention_log(std::vector<Tensor>* log) noexcept { attention_log_ = log; }
  std::vector<Tensor>* attention_log() const noexcept { return attention_log_; }

 private:
  struct Node {
    Tensor value;
    std::optional<Tensor> grad;
    Backward backward;
    bool requires_grad = false;
  };

  bool record_;
  bool backward_done_ = false;
  std::vector<Node> nodes_;
  std::vector<Tensor>* attention_log_ = nullptr;
};

// Gradient of a scalar loss w.r.t. each bound parameter (zeros for params
// the loss does not depend on). Runs backward if needed.
ParamSet grad(Var loss, const BoundParams& params);

// ---------------------------------------------------------------------------
// Primitives. Elementwise binary ops broadcast numpy-style.

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var neg(Var a);
Var scale(Var a, double s);
Var shift(Var a, double c);
Var matmul(Var a, Var b);  // [m,k] x [k,n]
Var transpose(Var a);      // 2-D
Var reshape(Var a, Shape shape);
Var concat(const std::vector<Var>& parts, std::size_t axis);
Var slice(Var a, std::size_t axis, std::size_t begin, std::size_t end);
// Rows of a 2-D table selected by index (embedding lookup / gather).
Var take_rows(Var table, const std::vector<std::size_t>& rows);
// x has N elements; out[s] reduces the elements i with segment[i] == s, in
// ascending i. Every segment must be non-empty for segment_mean, which uses a
// running mean so that identical inputs average to themselves exactly.
Var segment_sum(Var x, const std::vector<std::size_t>& segment, std::size_t segments);
Var segment_mean(Var x, const std::vector<std::size_t>& segment, std::size_t segments);
Var relu(Var a);
Var tanh(Var a);
Var exp(Var a);
Var log(Var a);
Var softplus(Var a);
Var square(Var a);
Var clamp(Var a, double lo, double hi);
Var minimum(Var a, Var b);
Var sum(Var a);
Var sum(Var a, std::size_t axis);
Var mean(Var a);
Var mean(Var a, std::size_t axis);
Var dot(Var a, Var b);
Var logsumexp(Var a);
Var softmax(Var a, std::size_t axis);
// Normalizes over the last axis, then applies gain and bias of that width.
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);

// Scaled dot-product attention. q, k, v are [batch*seq, d] with d divisible
// by `heads`. `key_mask`, when given, is an additive [batch, seq] tensor: 0
// for visible keys, -inf for hidden ones. Every query row must see at least
// one key.
Var attention(Var q, Var k, Var v, std::size_t batch, std::size_t seq, std::size_t heads,
              const Tensor* key_mask = nullptr);

// Operator sugar.
inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator/(Var a, Var b) { return div(a, b); }
inline Var operator-(Var a) { return neg(a); }

}  // namespace nlimb::ad
