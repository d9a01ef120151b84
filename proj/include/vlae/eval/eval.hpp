#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "vlae/model/vlae.hpp"

namespace vlae::eval {

inline constexpr std::size_t kDefaultK = 128;
inline constexpr std::size_t kFullK = 4096;

// ---- units ---------------------------------------------------------------

double nats_to_bits(double nats);
double bits_to_nats(double bits);
/// nats / (n_dims ln 2); n_dims must be positive.
double bits_per_dim(double nll_nats, std::size_t n_dims);

// ---- workers -------------------------------------------------------------

/// VLAE_NUM_THREADS if set and positive, else the hardware concurrency.
std::size_t worker_count();
/// Runs fn(i) for i in [0, n) on up to `workers` threads. The first exception
/// (lowest index) is rethrown after all workers stop.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn, std::size_t workers = worker_count());

// ---- importance sampling -------------------------------------------------

struct NllEstimate {
  /// Mean over images of -log p(x), nats.
  double value = 0;
  std::size_t k = 0;
  /// Delta-method standard error of `value` from the importance weights.
  double std_error = 0;
  std::vector<double> per_image;
  std::vector<double> per_image_std_error;
};

/// log p(x, z_i) - log q(z_i | x) for k posterior draws of one image x
/// [1 x C x H x W]. Draws come from rng in the order a single ELBO call on k
/// stacked copies would use; chunk bounds the rows per forward pass.
std::vector<double> log_weights(const model::VlaeModel& m, const nd::Tensor& x, std::size_t k, nd::Rng& rng,
                                std::size_t chunk = 256);

/// -(logsumexp(w) - log k) and its delta-method standard error.
struct ImageNll {
  double value = 0;
  double std_error = 0;
};
ImageNll nll_from_log_weights(const std::vector<double>& w);

/// One image with the caller's stream. k = 1 equals -elbo on the same stream.
ImageNll is_nll_image(const model::VlaeModel& m, const nd::Tensor& x, std::size_t k, nd::Rng& rng);

/// Images [N x C x H x W]; image i uses Rng(seed).split(i), so the result
/// does not depend on the worker count. A model without a latent is scored
/// exactly with a single draw.
NllEstimate is_nll(const model::VlaeModel& m, const nd::Tensor& images, std::size_t k, std::uint64_t seed,
                   std::size_t workers = worker_count());

// ---- code-length accounting ---------------------------------------------

/// Per-image code lengths in nats for one posterior draw z ~ q(z|x).
struct BitsBackReport {
  std::vector<double> naive;     // -log p(z) - log p(x|z)
  std::vector<double> bitsback;  // log q(z|x) - log p(z) - log p(x|z)
  std::vector<double> kl_usage;  // log q(z|x) - log p(z)
  std::vector<double> elbo;
  double mean_naive = 0;
  double mean_bitsback = 0;
  /// mean_naive - mean_bitsback: the posterior entropy term refunded by bits-back.
  double mean_savings = 0;
  double mean_kl_usage = 0;
  double mean_elbo = 0;
};

BitsBackReport bitsback_accounting(const model::VlaeModel& m, const nd::Tensor& images, std::uint64_t seed,
                                   std::size_t batch = 100);

struct KlUsage {
  double nats = 0;
  double bits = 0;
  std::string decoder;
};

/// Monte-Carlo mean of log q(z|x) - log p(z) over images and n_mc draws each.
KlUsage kl_usage_meter(const model::VlaeModel& m, const nd::Tensor& images, std::size_t n_mc, std::uint64_t seed,
                       std::size_t batch = 100);

// ---- enumeration ---------------------------------------------------------

inline constexpr std::size_t kMaxEnumerationBits = 12;

/// All 2^d binary images of shape [C x H x W] in counting order, d <= 12.
nd::Tensor all_binary_images(const model::ImageShape& shape);

/// Sum over all binary images of p(x | z). z is [1 x D], ignored (may be empty)
/// for an unconditional model.
double enumerate_model_mass(const model::VlaeModel& m, const nd::Tensor& z);

// ---- statistics ----------------------------------------------------------

/// One-sided exact sign test: P(Binomial(n, 1/2) >= wins).
double sign_test_pvalue(std::size_t wins, std::size_t n);

}  // namespace vlae::eval
