#include "vlae/model/vlae.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace vlae::model {
namespace {

double mean_of(const nd::Var& v) {
  double s = 0;
  for (double x : v.value().data()) s += x;
  return s / static_cast<double>(v.size());
}

const double kHalfLog2Pi = 0.5 * std::log(2.0 * std::numbers::pi);

}  // namespace

double ElboBreakdown::mean_recon() const { return mean_of(recon); }
double ElboBreakdown::mean_kl() const { return mean_of(kl); }
double ElboBreakdown::mean_elbo() const { return mean_of(elbo); }

VlaeModel::VlaeModel(const ModelConfig& cfg, std::uint64_t init_seed) : cfg_(cfg) {
  validate(cfg_);
  const nd::Rng root(init_seed);
  nd::Rng enc_rng = root.split(1), dec_rng = root.split(2), prior_rng = root.split(3);
  if (has_latent()) encoder_ = std::make_unique<Encoder>(store_, cfg_, enc_rng);
  decoder_ = std::make_unique<Decoder>(store_, cfg_, dec_rng);
  if (has_latent() && cfg_.prior.kind == PriorKind::af) {
    flows::FlowConfig fc;
    fc.dim = cfg_.latent_dim;
    fc.steps = cfg_.prior.steps;
    fc.hidden = cfg_.prior.hidden;
    fc.mode = cfg_.prior.mode;
    prior_ = std::make_unique<flows::FlowStack>(store_, "prior", fc, prior_rng);
  }
}

PosteriorParams VlaeModel::encode(nd::Tape& tape, const nd::Tensor& x) const {
  if (!has_latent()) throw std::logic_error("encode: model has no latent code");
  const auto& im = cfg_.image;
  if (x.rank() != 4 || x.dim(1) != im.channels || x.dim(2) != im.height || x.dim(3) != im.width) {
    throw nd::ShapeError("encode: expected N x " + std::to_string(im.channels) + " x " + std::to_string(im.height) +
                         " x " + std::to_string(im.width) + " images, got " + nd::shape_str(x.shape()));
  }
  auto out = (*encoder_)(tape, tape.constant(x));
  return {out.mean, out.log_std};
}

PosteriorSample VlaeModel::sample_posterior(nd::Tape& tape, const PosteriorParams& q, nd::Rng& rng) const {
  nd::Tensor eta(q.mean.shape());
  for (auto& v : eta.data()) v = rng.normal();
  nd::Var e = tape.constant(eta);
  PosteriorSample s;
  s.z = q.mean + nd::exp(q.log_std) * e;
  s.log_q_per_dim = -q.log_std - (nd::square(e) * 0.5 + kHalfLog2Pi);
  s.log_q = nd::sum_per_row(s.log_q_per_dim);
  return s;
}

nd::Var VlaeModel::log_prior_per_dim(nd::Tape& tape, nd::Var z) const {
  if (prior_) return prior_->log_prior_per_dim(tape, z);
  return flows::log_standard_normal(tape, z);
}

nd::Tensor VlaeModel::sample_prior(std::size_t n, nd::Rng& rng) const {
  nd::Tensor e({n, cfg_.latent_dim});
  for (auto& v : e.data()) v = rng.normal();
  if (!prior_) return e;
  nd::Tape tape;
  return prior_->af_forward(tape, tape.constant(e)).out.value();
}

DecodeResult VlaeModel::decode_logprob(nd::Tape& tape, const nd::Tensor& x, nd::Var z) const {
  const std::size_t n = x.dim(0);
  nd::Var ctx = decoder_->context(tape, z, n);
  nd::Var logits = decoder_->logits(tape, tape.constant(x), ctx);
  auto lm = nd::bernoulli_log_mass(logits, x);
  return {nd::sum_per_row(lm.log_mass), lm.clamp_events};
}

ElboBreakdown VlaeModel::elbo(nd::Tape& tape, const nd::Tensor& x, nd::Rng& rng) const {
  ElboBreakdown b;
  if (!has_latent()) {
    auto d = decode_logprob(tape, x, nd::Var{});
    b.recon = d.log_px;
    b.clamp_events = d.clamp_events;
    b.kl = tape.constant(nd::Tensor({x.dim(0)}, 0.0));
    b.elbo = b.recon - b.kl;
    return b;
  }
  auto q = encode(tape, x);
  auto s = sample_posterior(tape, q, rng);
  auto d = decode_logprob(tape, x, s.z);
  b.z = s.z;
  b.log_q = s.log_q;
  b.recon = d.log_px;
  b.clamp_events = d.clamp_events;
  nd::Var log_p = log_prior_per_dim(tape, s.z);
  b.kl_per_dim = s.log_q_per_dim - log_p;
  b.kl = s.log_q - nd::sum_per_row(log_p);
  b.elbo = b.recon - b.kl;
  return b;
}

flows::EquivalenceTerms VlaeModel::equivalence(nd::Tape& tape, const nd::Tensor& x, const ElboBreakdown& b) const {
  if (!prior_) throw std::logic_error("equivalence check needs an autoregressive-flow prior");
  return flows::elbo_equivalence(*prior_, tape, b.z, b.log_q,
                                 [&](nd::Tape& t, nd::Var z) { return decode_logprob(t, x, z).log_px; });
}

nd::Var surrogate_objective(const ElboBreakdown& b, const ObjectiveConfig& obj, const ModelConfig& model,
                            double gamma) {
  if (!(obj.lambda >= 0.0)) throw std::invalid_argument("objective.lambda: must be >= 0");
  nd::Var recon = nd::mean(b.recon);
  if (model.latent_dim == 0) return -recon;
  switch (obj.mode) {
    case FreeBitsMode::none: return -(recon - nd::mean(b.kl));
    case FreeBitsMode::soft: return -(recon - nd::mean(b.kl) * gamma);
    case FreeBitsMode::hard: break;
  }
  const std::size_t d = model.latent_dim, k = group_count(obj, d);
  const double total = lambda_total(obj, model), per_group = total / static_cast<double>(k);
  // Contiguous groups of latent dimensions.
  nd::Tensor assign({d, k}, 0.0);
  for (std::size_t j = 0; j < d; ++j) assign[j * k + j * k / d] = 1.0;
  nd::Tape& tape = b.kl_per_dim.tape();
  nd::Var kl_dims = nd::reshape(nd::reduce(nd::Reduce::mean, b.kl_per_dim, {0}), {1, d});
  nd::Var kl_groups = nd::matmul(kl_dims, tape.constant(assign));
  nd::Var floored = nd::sum(nd::relu(kl_groups - per_group)) + total;
  return -(recon - floored);
}

double update_gamma(double gamma, double observed_kl, double lambda_total, const ObjectiveConfig& obj) {
  if (observed_kl > lambda_total * (1.0 + obj.threshold)) {
    gamma = std::min(1.0, gamma * obj.step_factor);
  } else if (observed_kl < lambda_total) {
    gamma = gamma / obj.step_factor;
  }
  return std::clamp(gamma, kGammaFloor, 1.0);
}

}  // namespace vlae::model
