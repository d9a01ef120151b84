#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "vlae/nd/tensor.hpp"

namespace vlae::nd {

/// Trainable tensor with its accumulated gradient and Polyak-averaged shadow.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  Tensor shadow;

  Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(value.shape()), shadow(value) {}

  void zero_grad();
};

/// Owns parameters at stable addresses; iteration order is creation order.
class ParameterStore {
 public:
  Parameter& create(std::string name, Tensor value);
  Parameter* find(const std::string& name);
  const Parameter* find(const std::string& name) const;

  std::vector<Parameter*> all();
  std::vector<const Parameter*> all() const;
  std::size_t size() const { return params_.size(); }
  std::size_t scalar_count() const;

  void zero_grad();
  /// Swaps value and shadow in every parameter (evaluate with Polyak weights).
  void swap_shadow();

 private:
  std::deque<Parameter> params_;
};

class Tape;

/// Handle to a node recorded on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::uint32_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::uint32_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t dim(std::size_t axis) const { return value().dim(axis); }
  std::size_t size() const { return value().size(); }

 private:
  Tape* tape_ = nullptr;
  std::uint32_t id_ = 0;
};

/// Gradient slots of an op's inputs during backward; null where no gradient is needed.
using GradSlots = std::span<Tensor* const>;
using BackwardFn = std::function<void(const Tensor& grad_out, GradSlots grad_in)>;

/// Define-by-run reverse-mode tape. Nodes are recorded in topological order,
/// so a backward sweep is a single reverse pass over the node list.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  /// Leaf whose gradient is tracked (read it back with grad()).
  Var input(Tensor value);
  /// Leaf bound to a Parameter; backward accumulates into Parameter::grad.
  Var param(Parameter& p);

  Var record(Tensor value, std::vector<Var> inputs, BackwardFn backward, const char* op);

  /// Reverse sweep from a scalar loss. Node gradients are recomputed on each
  /// call; Parameter gradients accumulate across calls.
  void backward(Var loss);
  /// Reverse sweep seeded with an explicit output cotangent (any shape); one
  /// Jacobian row per call when seed is one-hot.
  void backward(Var root, const Tensor& seed);

  /// Gradient of the most recent backward() with respect to v (zeros if unreached).
  Tensor grad(Var v) const;

  const Tensor& value(std::uint32_t id) const;
  bool requires_grad(Var v) const { return nodes_.at(v.id()).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    const Tensor* borrowed = nullptr;
    std::vector<std::uint32_t> inputs;
    BackwardFn backward;
    Parameter* param = nullptr;
    bool requires_grad = false;
    Tensor grad;
  };

  void sweep(std::uint32_t root, Tensor seed);

  std::deque<Node> nodes_;
};

}  // namespace vlae::nd
