#pragma once

#include <functional>
#include <string>
#include <vector>

#include "vlae/masked/made.hpp"
#include "vlae/nd/ops.hpp"
#include "vlae/nd/rng.hpp"

namespace vlae::flows {

enum class FlowMode { mean_only, affine };

const char* to_string(FlowMode mode);
FlowMode parse_flow_mode(const std::string& s);

struct FlowConfig {
  std::size_t dim = 32;
  std::size_t steps = 4;
  std::size_t hidden = 64;
  /// Hidden layers per MADE conditioner.
  std::size_t hidden_layers = 2;
  FlowMode mode = FlowMode::mean_only;
  /// Reverse the unit ordering on every other step.
  bool alternate = true;
};

/// Lower bound on sigma in affine mode: sigma = softplus(s + c) + kSigmaFloor,
/// with c chosen so a zero conditioner output gives sigma = 1.
inline constexpr double kSigmaFloor = 1e-4;

/// One autoregressive step y_i = e_i * sigma_i(y_<i) + mu_i(y_<i); the
/// conditioner reads only preceding units of its own output.
class FlowStep {
 public:
  FlowStep(nd::ParameterStore& store, const std::string& prefix, const FlowConfig& cfg, bool reversed,
           nd::Rng& init_rng);

  struct Conditioner {
    nd::Var mu;
    nd::Var log_sigma;  // invalid in mean-only mode
    nd::Var sigma;      // invalid in mean-only mode
  };
  Conditioner condition(nd::Tape& tape, nd::Var y) const;

  /// Parallel whitening: e = (y - mu(y)) / sigma(y); log|de/dy| per unit.
  std::pair<nd::Var, nd::Var> inverse(nd::Tape& tape, nd::Var y) const;
  /// Sequential generation by dim() fixed-point sweeps; log|dy/de| per unit.
  std::pair<nd::Var, nd::Var> forward(nd::Tape& tape, nd::Var e) const;

  bool reversed() const { return reversed_; }
  const masked::MadeMaskSet& masks() const { return masks_; }
  FlowMode mode() const { return mode_; }

 private:
  masked::MadeMaskSet masks_;
  std::vector<nd::Parameter*> weights_, biases_;
  nd::Parameter* mu_w_ = nullptr;
  nd::Parameter* mu_b_ = nullptr;
  nd::Parameter* s_w_ = nullptr;
  nd::Parameter* s_b_ = nullptr;
  FlowMode mode_;
  bool reversed_;
  std::size_t dim_;
};

/// Autoregressive-flow prior z = f(e), e ~ N(0, I). Inputs are [N x D].
class FlowStack {
 public:
  FlowStack(nd::ParameterStore& store, const std::string& prefix, const FlowConfig& cfg, nd::Rng& init_rng);

  struct Pass {
    nd::Var out;
    /// Per-unit log-determinant [N x D], summed over steps.
    nd::Var log_det;
  };
  /// e -> z, sequential. log_det is log|dz/de|.
  Pass af_forward(nd::Tape& tape, nd::Var eps) const;
  /// z -> e, one conditioner pass per step. log_det is log|de/dz|.
  Pass af_inverse(nd::Tape& tape, nd::Var z) const;

  /// log p(z) = log u(e) + log|de/dz| per unit [N x D]; per-unit terms sum to the joint density.
  nd::Var log_prior_per_dim(nd::Tape& tape, nd::Var z) const;
  /// Per-row log p(z), [N].
  nd::Var log_prior(nd::Tape& tape, nd::Var z) const;

  const FlowConfig& config() const { return cfg_; }
  const std::vector<FlowStep>& steps() const { return steps_; }

 private:
  FlowConfig cfg_;
  std::vector<FlowStep> steps_;
};

/// Per-unit standard-normal log-density [N x D].
nd::Var log_standard_normal(nd::Tape& tape, nd::Var e);

/// Both sides of the AF-prior / IAF-posterior rearrangement for a batch of
/// posterior samples z with their log q(z|x). Values are per row.
struct EquivalenceTerms {
  nd::Tensor af_prior;       // log p(x|z) + log p(z) - log q(z|x)
  nd::Tensor iaf_posterior;  // log p(x|f(e)) + log u(e) - log q_e(e|x), e = f^-1(z)
  double max_abs_difference() const;
};

using LogLikelihoodFn = std::function<nd::Var(nd::Tape&, nd::Var z)>;

EquivalenceTerms elbo_equivalence(const FlowStack& stack, nd::Tape& tape, nd::Var z, nd::Var log_q,
                                  const LogLikelihoodFn& log_px_given_z);

}  // namespace vlae::flows
