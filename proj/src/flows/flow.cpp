#include "vlae/flows/flow.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace vlae::flows {
namespace {

nd::Tensor gaussian_init(nd::Shape shape, std::size_t fan_in, nd::Rng& rng) {
  nd::Tensor t(std::move(shape));
  const double scale = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (auto& v : t.data()) v = scale * rng.normal();
  return t;
}

// softplus(kSigmaShift) + kSigmaFloor == 1.
const double kSigmaShift = std::log(std::expm1(1.0 - kSigmaFloor));

nd::Var masked_dense(nd::Tape& tape, nd::Var x, nd::Parameter& w, const nd::Tensor& mask, nd::Parameter& b) {
  return nd::add_bias(nd::matmul(x, nd::mul(tape.param(w), mask)), tape.param(b));
}

}  // namespace

const char* to_string(FlowMode mode) { return mode == FlowMode::mean_only ? "mean-only" : "affine"; }

FlowMode parse_flow_mode(const std::string& s) {
  if (s == "mean-only" || s == "mean_only") return FlowMode::mean_only;
  if (s == "affine") return FlowMode::affine;
  throw std::invalid_argument("unknown flow mode '" + s + "' (expected mean-only or affine)");
}

FlowStep::FlowStep(nd::ParameterStore& store, const std::string& prefix, const FlowConfig& cfg, bool reversed,
                   nd::Rng& init_rng)
    : mode_(cfg.mode), reversed_(reversed), dim_(cfg.dim) {
  if (cfg.dim == 0) throw std::invalid_argument("flow dimension must be positive");
  std::vector<std::size_t> sizes{cfg.dim};
  for (std::size_t l = 0; l < cfg.hidden_layers; ++l) sizes.push_back(cfg.hidden);
  sizes.push_back(cfg.dim);
  auto order = reversed ? masked::reversed_ordering(cfg.dim) : masked::natural_ordering(cfg.dim);
  masks_ = masked::build_made_masks(sizes, order);

  for (std::size_t l = 0; l + 1 < masks_.masks.size(); ++l) {
    const auto& m = masks_.masks[l];
    const std::string tag = prefix + ".h" + std::to_string(l);
    weights_.push_back(&store.create(tag + ".w", gaussian_init(m.shape(), m.dim(0), init_rng)));
    biases_.push_back(&store.create(tag + ".b", nd::Tensor(nd::Shape{m.dim(1)}, 0.0)));
  }
  const auto& out_mask = masks_.masks.back();
  mu_w_ = &store.create(prefix + ".mu.w", nd::Tensor(out_mask.shape(), 0.0));
  mu_b_ = &store.create(prefix + ".mu.b", nd::Tensor(nd::Shape{cfg.dim}, 0.0));
  if (mode_ == FlowMode::affine) {
    s_w_ = &store.create(prefix + ".s.w", nd::Tensor(out_mask.shape(), 0.0));
    s_b_ = &store.create(prefix + ".s.b", nd::Tensor(nd::Shape{cfg.dim}, 0.0));
  }
}

FlowStep::Conditioner FlowStep::condition(nd::Tape& tape, nd::Var y) const {
  if (y.value().rank() != 2 || y.dim(1) != dim_) {
    throw nd::ShapeError("flow input must be N x " + std::to_string(dim_) + ", got " + nd::shape_str(y.shape()));
  }
  nd::Var h = y;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    h = nd::relu(masked_dense(tape, h, *weights_[l], masks_.masks[l], *biases_[l]));
  }
  Conditioner c;
  c.mu = masked_dense(tape, h, *mu_w_, masks_.masks.back(), *mu_b_);
  if (mode_ == FlowMode::affine) {
    nd::Var s = masked_dense(tape, h, *s_w_, masks_.masks.back(), *s_b_);
    nd::Var sp = nd::softplus(s + kSigmaShift);
    for (double v : sp.value().data()) {
      if (v == 0.0) throw nd::NumericError("flow scale underflow: softplus output is zero, sigma sits on its floor");
    }
    c.sigma = sp + kSigmaFloor;
    c.log_sigma = nd::log(c.sigma);
  }
  return c;
}

std::pair<nd::Var, nd::Var> FlowStep::inverse(nd::Tape& tape, nd::Var y) const {
  Conditioner c = condition(tape, y);
  nd::Var centered = y - c.mu;
  if (mode_ == FlowMode::mean_only) return {centered, tape.constant(nd::Tensor(y.shape(), 0.0))};
  return {centered / c.sigma, -c.log_sigma};
}

std::pair<nd::Var, nd::Var> FlowStep::forward(nd::Tape& tape, nd::Var e) const {
  // Sweep t fills in the unit at position t of the ordering; later units stay
  // zero so the conditioner never sees unfinished values.
  const std::size_t n = e.dim(0);
  nd::Var y = tape.constant(nd::Tensor(e.shape(), 0.0));
  nd::Var log_det = y;
  for (std::size_t t = 1; t <= dim_; ++t) {
    const std::size_t unit = static_cast<std::size_t>(
        std::find(masks_.ordering.begin(), masks_.ordering.end(), t) - masks_.ordering.begin());
    nd::Tensor pick(e.shape(), 0.0), keep(e.shape(), 1.0);
    for (std::size_t r = 0; r < n; ++r) {
      pick[r * dim_ + unit] = 1.0;
      keep[r * dim_ + unit] = 0.0;
    }
    Conditioner c = condition(tape, y);
    nd::Var value = mode_ == FlowMode::mean_only ? e + c.mu : e * c.sigma + c.mu;
    y = nd::mul(y, keep) + nd::mul(value, pick);
    if (t == dim_ && mode_ == FlowMode::affine) log_det = c.log_sigma;
  }
  return {y, log_det};
}

FlowStack::FlowStack(nd::ParameterStore& store, const std::string& prefix, const FlowConfig& cfg,
                     nd::Rng& init_rng)
    : cfg_(cfg) {
  for (std::size_t k = 0; k < cfg.steps; ++k) {
    steps_.emplace_back(store, prefix + ".step" + std::to_string(k), cfg, cfg.alternate && k % 2 == 1, init_rng);
  }
}

FlowStack::Pass FlowStack::af_forward(nd::Tape& tape, nd::Var eps) const {
  nd::Var y = eps;
  nd::Var log_det = tape.constant(nd::Tensor(eps.shape(), 0.0));
  for (const auto& step : steps_) {
    auto [next, ld] = step.forward(tape, y);
    y = next;
    log_det = log_det + ld;
  }
  return {y, log_det};
}

FlowStack::Pass FlowStack::af_inverse(nd::Tape& tape, nd::Var z) const {
  nd::Var y = z;
  nd::Var log_det = tape.constant(nd::Tensor(z.shape(), 0.0));
  for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) {
    auto [prev, ld] = it->inverse(tape, y);
    y = prev;
    log_det = log_det + ld;
  }
  return {y, log_det};
}

nd::Var log_standard_normal(nd::Tape&, nd::Var e) {
  const double c = -0.5 * std::log(2.0 * std::numbers::pi);
  return nd::square(e) * -0.5 + c;
}

nd::Var FlowStack::log_prior_per_dim(nd::Tape& tape, nd::Var z) const {
  Pass inv = af_inverse(tape, z);
  return log_standard_normal(tape, inv.out) + inv.log_det;
}

nd::Var FlowStack::log_prior(nd::Tape& tape, nd::Var z) const { return nd::sum_per_row(log_prior_per_dim(tape, z)); }

double EquivalenceTerms::max_abs_difference() const {
  double worst = 0.0;
  for (std::size_t i = 0; i < af_prior.size(); ++i) worst = std::max(worst, std::abs(af_prior[i] - iaf_posterior[i]));
  return worst;
}

EquivalenceTerms elbo_equivalence(const FlowStack& stack, nd::Tape& tape, nd::Var z, nd::Var log_q,
                                  const LogLikelihoodFn& log_px_given_z) {
  EquivalenceTerms terms;
  nd::Var recon = log_px_given_z(tape, z);
  terms.af_prior = (recon + stack.log_prior(tape, z) - log_q).value();

  // Same draw seen as an IAF posterior over e: e = f^-1(z) with density
  // q(z|x) |dz/de|, decoded through the generative direction z' = f(e).
  auto inv = stack.af_inverse(tape, z);
  nd::Var eps = inv.out;
  nd::Var log_q_eps = log_q - nd::sum_per_row(inv.log_det);
  nd::Var z_again = stack.af_forward(tape, eps).out;
  nd::Var recon_iaf = log_px_given_z(tape, z_again);
  nd::Var log_u = nd::sum_per_row(log_standard_normal(tape, eps));
  terms.iaf_posterior = (recon_iaf + log_u - log_q_eps).value();
  return terms;
}

}  // namespace vlae::flows
