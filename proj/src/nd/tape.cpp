#include "vlae/nd/tape.hpp"

#include <algorithm>
#include <utility>

namespace vlae::nd {

void Parameter::zero_grad() { std::fill(grad.data().begin(), grad.data().end(), 0.0); }

Parameter& ParameterStore::create(std::string name, Tensor value) {
  if (find(name) != nullptr) throw std::invalid_argument("duplicate parameter name: " + name);
  return params_.emplace_back(std::move(name), std::move(value));
}

Parameter* ParameterStore::find(const std::string& name) {
  for (auto& p : params_) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

const Parameter* ParameterStore::find(const std::string& name) const {
  for (const auto& p : params_) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

std::vector<Parameter*> ParameterStore::all() {
  std::vector<Parameter*> out;
  out.reserve(params_.size());
  for (auto& p : params_) out.push_back(&p);
  return out;
}

std::vector<const Parameter*> ParameterStore::all() const {
  std::vector<const Parameter*> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(&p);
  return out;
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

void ParameterStore::swap_shadow() {
  for (auto& p : params_) std::swap(p.value, p.shadow);
}

const Tensor& Var::value() const { return tape_->value(id_); }

const Tensor& Tape::value(std::uint32_t id) const {
  const Node& n = nodes_.at(id);
  return n.borrowed ? *n.borrowed : n.value;
}

Var Tape::constant(Tensor value) {
  Node& n = nodes_.emplace_back();
  n.value = std::move(value);
  return {this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::input(Tensor value) {
  Node& n = nodes_.emplace_back();
  n.value = std::move(value);
  n.requires_grad = true;
  return {this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::param(Parameter& p) {
  Node& n = nodes_.emplace_back();
  n.borrowed = &p.value;
  n.param = &p;
  n.requires_grad = true;
  return {this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::record(Tensor value, std::vector<Var> inputs, BackwardFn backward, const char* op) {
  if (!value.all_finite()) throw NumericError(std::string("non-finite result in ") + op);
  Node n;
  n.value = std::move(value);
  n.inputs.reserve(inputs.size());
  for (const Var& v : inputs) {
    if (&v.tape() != this) throw std::invalid_argument(std::string(op) + ": operand recorded on another tape");
    n.inputs.push_back(v.id());
    n.requires_grad = n.requires_grad || nodes_[v.id()].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return {this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

void Tape::backward(Var loss) {
  if (!loss.valid() || &loss.tape() != this || loss.id() >= nodes_.size()) {
    throw std::invalid_argument("backward: loss is not on this tape");
  }
  if (value(loss.id()).size() != 1) {
    throw ShapeError("backward: loss must be scalar, got " + shape_str(value(loss.id()).shape()));
  }
  sweep(loss.id(), Tensor(value(loss.id()).shape(), 1.0));
}

void Tape::backward(Var root, const Tensor& seed) {
  if (!root.valid() || &root.tape() != this || root.id() >= nodes_.size()) {
    throw std::invalid_argument("backward: root is not on this tape");
  }
  if (seed.shape() != value(root.id()).shape()) {
    throw ShapeError("backward: seed " + shape_str(seed.shape()) + " does not match root " +
                     shape_str(value(root.id()).shape()));
  }
  sweep(root.id(), seed);
}

void Tape::sweep(std::uint32_t root, Tensor seed) {
  for (auto& n : nodes_) n.grad = Tensor();
  nodes_[root].grad = std::move(seed);

  std::vector<Tensor*> slots;
  for (std::size_t i = root + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.grad.empty() || !n.requires_grad) continue;
    if (n.param != nullptr) {
      auto dst = n.param->grad.data();
      auto src = n.grad.data();
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
    }
    if (!n.backward) continue;
    slots.assign(n.inputs.size(), nullptr);
    for (std::size_t k = 0; k < n.inputs.size(); ++k) {
      Node& in = nodes_[n.inputs[k]];
      if (!in.requires_grad) continue;
      if (in.grad.empty()) in.grad = Tensor(value(n.inputs[k]).shape(), 0.0);
      slots[k] = &in.grad;
    }
    n.backward(n.grad, slots);
  }
}

Tensor Tape::grad(Var v) const {
  const Node& n = nodes_.at(v.id());
  if (n.grad.empty()) return Tensor(value(v.id()).shape(), 0.0);
  return n.grad;
}

}  // namespace vlae::nd
