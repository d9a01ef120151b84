#pragma once

#include <memory>
#include <optional>

#include "vlae/flows/flow.hpp"
#include "vlae/model/config.hpp"
#include "vlae/model/networks.hpp"

namespace vlae::model {

struct PosteriorParams {
  nd::Var mean;     // [N x D]
  nd::Var log_std;  // [N x D]
};

struct PosteriorSample {
  nd::Var z;             // [N x D]
  nd::Var log_q_per_dim; // [N x D]
  nd::Var log_q;         // [N]
};

struct DecodeResult {
  nd::Var log_px;  // [N]
  std::size_t clamp_events = 0;
};

/// Single-sample ELBO terms per image, plus the per-dimension KL split used by
/// hard free bits. Vars live on the tape passed to VlaeModel::elbo.
struct ElboBreakdown {
  nd::Var recon;       // [N] log p(x|z)
  nd::Var kl;          // [N] log q(z|x) - log p(z)
  nd::Var kl_per_dim;  // [N x D]; rows sum to kl
  nd::Var elbo;        // [N] recon - kl
  nd::Var z;
  nd::Var log_q;
  std::size_t clamp_events = 0;

  double mean_recon() const;
  double mean_kl() const;
  double mean_elbo() const;
};

class VlaeModel {
 public:
  VlaeModel(const ModelConfig& cfg, std::uint64_t init_seed);
  VlaeModel(const VlaeModel&) = delete;
  VlaeModel& operator=(const VlaeModel&) = delete;

  const ModelConfig& config() const { return cfg_; }
  nd::ParameterStore& params() { return store_; }
  const nd::ParameterStore& params() const { return store_; }
  const Decoder& decoder() const { return *decoder_; }
  bool has_latent() const { return cfg_.latent_dim > 0; }
  /// Null for the Gaussian prior and for unconditional models.
  const flows::FlowStack* prior_flow() const { return prior_.get(); }

  /// x is [N x C x H x W].
  PosteriorParams encode(nd::Tape& tape, const nd::Tensor& x) const;
  PosteriorSample sample_posterior(nd::Tape& tape, const PosteriorParams& q, nd::Rng& rng) const;
  /// Per-dimension log p(z) terms [N x D]; rows sum to the joint log density.
  nd::Var log_prior_per_dim(nd::Tape& tape, nd::Var z) const;
  /// Draw z from the prior: e ~ N(0, I), z = f(e). [n x D]
  nd::Tensor sample_prior(std::size_t n, nd::Rng& rng) const;
  /// z is ignored (may be invalid) for unconditional models.
  DecodeResult decode_logprob(nd::Tape& tape, const nd::Tensor& x, nd::Var z) const;
  ElboBreakdown elbo(nd::Tape& tape, const nd::Tensor& x, nd::Rng& rng) const;

  /// Both sides of the AF-prior / IAF-posterior identity for a posterior draw.
  flows::EquivalenceTerms equivalence(nd::Tape& tape, const nd::Tensor& x, const ElboBreakdown& b) const;

 private:
  ModelConfig cfg_;
  nd::ParameterStore store_;
  std::unique_ptr<Encoder> encoder_;
  std::unique_ptr<Decoder> decoder_;
  std::unique_ptr<flows::FlowStack> prior_;
};

/// Free-bits controller state carried across training steps.
struct FreeBitsState {
  double gamma = 1.0;
  double kl_ema = 0.0;
  bool kl_ema_ready = false;
};

/// Loss to minimize (a negated surrogate lower bound), mean over the batch.
/// hard: -(recon - sum_g max(lambda_g, KL_g)); soft: -(recon - gamma KL); none: -elbo.
nd::Var surrogate_objective(const ElboBreakdown& b, const ObjectiveConfig& obj, const ModelConfig& model,
                            double gamma);

/// Multiplicative gamma controller with a dead band [lambda_total, lambda_total (1 + threshold)].
double update_gamma(double gamma, double observed_kl, double lambda_total, const ObjectiveConfig& obj);

inline constexpr double kGammaFloor = 1e-4;

}  // namespace vlae::model
