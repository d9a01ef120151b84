#include "vlae/model/trainer.hpp"

#include <cmath>
#include <sstream>

namespace vlae::model {

Trainer::Trainer(VlaeModel& model, const ObjectiveConfig& objective, const OptimizerConfig& optimizer)
    : model_(model), objective_(objective), optimizer_(model.params(), optimizer) {
  validate(objective_);
}

double Trainer::lambda_total() const { return model::lambda_total(objective_, model_.config()); }

StepMetrics Trainer::step(const nd::Tensor& batch, nd::Rng& rng) {
  const std::size_t step_no = optimizer_.steps_taken() + 1;
  model_.params().zero_grad();
  nd::Tape tape;
  ElboBreakdown b = model_.elbo(tape, batch, rng);
  nd::Var loss = surrogate_objective(b, objective_, model_.config(), state_.gamma);

  StepMetrics m;
  m.step = step_no;
  m.loss = loss.value().item();
  m.recon = b.mean_recon();
  m.kl = b.mean_kl();
  m.elbo = b.mean_elbo();
  m.clamp_events = b.clamp_events;
  if (!std::isfinite(m.loss)) {
    throw nd::NumericError("non-finite loss at step " + std::to_string(step_no));
  }

  if (objective_.check_equivalence && model_.prior_flow() != nullptr) {
    // Recorded after the loss, so the backward sweep never visits these nodes.
    auto terms = model_.equivalence(tape, batch, b);
    m.equivalence_gap = terms.max_abs_difference();
    if (!(m.equivalence_gap < kEquivalenceTolerance)) {
      std::ostringstream os;
      os << "AF/IAF equivalence gap " << m.equivalence_gap << " at step " << step_no;
      throw CheckFailure(os.str());
    }
  }

  tape.backward(loss);
  m.grad_norm = optimizer_.grad_norm();
  if (!std::isfinite(m.grad_norm)) {
    model_.params().zero_grad();
    throw nd::NumericError("non-finite gradient at step " + std::to_string(step_no));
  }
  optimizer_.step();

  if (objective_.mode == FreeBitsMode::soft && model_.has_latent()) {
    const double d = objective_.kl_ema_decay;
    state_.kl_ema = state_.kl_ema_ready ? d * state_.kl_ema + (1.0 - d) * m.kl : m.kl;
    state_.kl_ema_ready = true;
    state_.gamma = update_gamma(state_.gamma, state_.kl_ema, lambda_total(), objective_);
  }
  m.gamma = state_.gamma;
  return m;
}

}  // namespace vlae::model
