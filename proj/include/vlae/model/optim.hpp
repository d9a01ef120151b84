#pragma once

#include <vector>

#include "vlae/model/config.hpp"
#include "vlae/nd/tape.hpp"

namespace vlae::model {

/// Adamax (or Adam) over every parameter of a store, followed by a Polyak
/// update of the shadow copies: shadow <- a * shadow + (1 - a) * value.
class Optimizer {
 public:
  Optimizer(nd::ParameterStore& store, const OptimizerConfig& cfg);

  void step();
  /// Global L2 norm of the accumulated gradients.
  double grad_norm() const;

  std::size_t steps_taken() const { return t_; }
  void set_steps_taken(std::size_t t) { t_ = t; }
  const OptimizerConfig& config() const { return cfg_; }

  /// First and second moment tensors, aligned with store.all().
  std::vector<nd::Tensor>& first_moments() { return m_; }
  std::vector<nd::Tensor>& second_moments() { return v_; }
  const std::vector<nd::Tensor>& first_moments() const { return m_; }
  const std::vector<nd::Tensor>& second_moments() const { return v_; }

 private:
  nd::ParameterStore& store_;
  OptimizerConfig cfg_;
  std::vector<nd::Tensor> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace vlae::model
