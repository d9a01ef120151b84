#pragma once

#include <stdexcept>

#include "vlae/model/optim.hpp"
#include "vlae/model/vlae.hpp"

namespace vlae::model {

/// A runtime self-check (e.g. the AF/IAF identity) did not hold.
class CheckFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct StepMetrics {
  std::size_t step = 0;
  double loss = 0.0;
  double recon = 0.0;
  double kl = 0.0;
  double elbo = 0.0;
  double gamma = 1.0;
  double grad_norm = 0.0;
  std::size_t clamp_events = 0;
  /// Largest AF/IAF discrepancy when the debug check is on.
  double equivalence_gap = 0.0;
};

inline constexpr double kEquivalenceTolerance = 1e-8;

class Trainer {
 public:
  Trainer(VlaeModel& model, const ObjectiveConfig& objective, const OptimizerConfig& optimizer);

  /// One optimizer step on the surrogate for batch [N x C x H x W]. Throws
  /// nd::NumericError (parameters untouched) on a non-finite loss or gradient.
  StepMetrics step(const nd::Tensor& batch, nd::Rng& rng);

  VlaeModel& model() { return model_; }
  const VlaeModel& model() const { return model_; }
  Optimizer& optimizer() { return optimizer_; }
  const Optimizer& optimizer() const { return optimizer_; }
  FreeBitsState& state() { return state_; }
  const FreeBitsState& state() const { return state_; }
  const ObjectiveConfig& objective() const { return objective_; }
  std::size_t steps_taken() const { return optimizer_.steps_taken(); }
  double lambda_total() const;

 private:
  VlaeModel& model_;
  ObjectiveConfig objective_;
  Optimizer optimizer_;
  FreeBitsState state_;
};

}  // namespace vlae::model
