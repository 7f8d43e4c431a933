#include "autodiff/tape.hpp"

#include "common/error.hpp"

namespace nlimb::ad {

const Tensor& Var::value() const {
  if (!tape_) throw InvalidArgument("var: use of an unbound variable");
  return tape_->value(id_);
}

Var Tape::constant(Tensor value) {
  if (!value.all_finite()) throw NumericError("constant: non-finite input of shape " + to_string(value.shape()));
  nodes_.push_back(Node{std::move(value), std::nullopt, nullptr, false});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::leaf(Tensor value) {
  if (!value.all_finite()) throw NumericError("leaf: non-finite input of shape " + to_string(value.shape()));
  nodes_.push_back(Node{std::move(value), std::nullopt, nullptr, record_});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

BoundParams Tape::bind(const ParamSet& params) {
  BoundParams b;
  b.params_ = &params;
  b.tape_ = this;
  b.vars_.reserve(params.size());
  for (const auto& [name, t] : params) {
    if (!t.all_finite()) throw NumericError("bind: parameter '" + name + "' is non-finite");
    nodes_.push_back(Node{t, std::nullopt, nullptr, record_});
    b.vars_.push_back(Var(this, static_cast<int>(nodes_.size()) - 1));
  }
  return b;
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, Backward fn) {
  bool needs = false;
  if (record_) {
    for (const Var& v : inputs) needs = needs || nodes_[v.id()].requires_grad;
  }
  nodes_.push_back(Node{std::move(value), std::nullopt, needs ? std::move(fn) : nullptr, needs});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::record(Tensor value, const std::vector<Var>& inputs, Backward fn) {
  bool needs = false;
  if (record_) {
    for (const Var& v : inputs) needs = needs || nodes_[v.id()].requires_grad;
  }
  nodes_.push_back(Node{std::move(value), std::nullopt, needs ? std::move(fn) : nullptr, needs});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Tensor& Tape::grad_buffer(int id) {
  Node& n = nodes_[id];
  if (!n.grad) n.grad.emplace(n.value.shape(), 0.0);
  return *n.grad;
}

void Tape::accumulate(int id, const Tensor& g) {
  if (!nodes_[id].requires_grad) return;
  Tensor& buf = grad_buffer(id);
  double* dst = buf.data();
  const double* src = g.data();
  const std::size_t n = buf.size();
  for (std::size_t i = 0; i < n; ++i) dst[i] += src[i];
}

void Tape::backward(Var loss) {
  if (loss.tape() != this) throw InvalidArgument("backward: loss belongs to a different tape");
  if (!record_) throw InvalidArgument("backward: tape is not recording (grad mode off)");
  if (nodes_[loss.id()].value.size() != 1) {
    throw ShapeError("backward: loss must be a scalar, got shape " +
                     to_string(nodes_[loss.id()].value.shape()));
  }
  for (auto& n : nodes_) n.grad.reset();
  grad_buffer(loss.id())[0] = 1.0;
  for (int id = loss.id(); id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.grad || !n.backward) continue;
    n.backward(*this, *n.grad);
  }
  backward_done_ = true;
}

Tensor Tape::gradient(int id) const {
  const Node& n = nodes_[id];
  if (n.grad) return *n.grad;
  return Tensor(n.value.shape(), 0.0);
}

ParamSet grad(Var loss, const BoundParams& params) {
  Tape* tape = loss.tape();
  if (!tape) throw InvalidArgument("grad: loss has no tape");
  if (!tape->recording()) throw InvalidArgument("grad: tape is not recording (grad mode off)");
  if (loss.size() != 1) throw ShapeError("grad: loss must be a scalar, got shape " + to_string(loss.shape()));
  if (params.tape() != tape) throw InvalidArgument("grad: parameters are bound to a different tape");
  tape->backward(loss);
  ParamSet out;
  for (std::size_t i = 0; i < params.size(); ++i) {
    out.add(params.params().name(i), tape->gradient(params[i].id()));
  }
  return out;
}

}  // namespace nlimb::ad
