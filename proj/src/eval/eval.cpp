#include "vlae/eval/eval.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <numbers>
#include <stdexcept>
#include <thread>

namespace vlae::eval {

double nats_to_bits(double nats) { return nats / std::numbers::ln2; }
double bits_to_nats(double bits) { return bits * std::numbers::ln2; }

double bits_per_dim(double nll_nats, std::size_t n_dims) {
  if (n_dims == 0) throw std::invalid_argument("bits_per_dim: n_dims must be >= 1");
  return nll_nats / (static_cast<double>(n_dims) * std::numbers::ln2);
}

std::size_t worker_count() {
  if (const char* env = std::getenv("VLAE_NUM_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v > 0) return static_cast<std::size_t>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn, std::size_t workers) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::atomic<bool> stop{false};
  std::vector<std::exception_ptr> errors(n);
  auto run = [&] {
    for (std::size_t i; !stop && (i = next++) < n;) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
        stop = true;
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(run);
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

namespace {

nd::Tensor tile(const nd::Tensor& x, std::size_t rows) {
  nd::Shape s = x.shape();
  s[0] = rows;
  nd::Tensor out(s);
  const std::size_t d = x.size();
  for (std::size_t r = 0; r < rows; ++r) std::copy(x.data().begin(), x.data().end(), out.data().begin() + static_cast<long>(r * d));
  return out;
}

nd::Tensor image_row(const nd::Tensor& images, std::size_t i) {
  nd::Shape s = images.shape();
  s[0] = 1;
  const std::size_t d = images.size() / images.dim(0);
  return nd::Tensor(s, std::vector<double>(images.data().begin() + static_cast<long>(i * d),
                                           images.data().begin() + static_cast<long>((i + 1) * d)));
}

nd::Tensor batch_rows(const nd::Tensor& images, std::size_t begin, std::size_t count) {
  nd::Shape s = images.shape();
  s[0] = count;
  const std::size_t d = images.size() / images.dim(0);
  return nd::Tensor(s, std::vector<double>(images.data().begin() + static_cast<long>(begin * d),
                                           images.data().begin() + static_cast<long>((begin + count) * d)));
}

}  // namespace

std::vector<double> log_weights(const model::VlaeModel& m, const nd::Tensor& x, std::size_t k, nd::Rng& rng,
                                std::size_t chunk) {
  if (k == 0) throw std::invalid_argument("importance sampling: k must be >= 1");
  if (x.rank() != 4 || x.dim(0) != 1) throw nd::ShapeError("importance sampling: expected one image [1 x C x H x W]");
  chunk = std::max<std::size_t>(1, chunk);
  std::vector<double> w;
  w.reserve(k);
  while (w.size() < k) {
    const std::size_t rows = std::min(chunk, k - w.size());
    nd::Tape tape;
    try {
      const auto b = m.elbo(tape, tile(x, rows), rng);
      for (double v : b.elbo.value().data()) w.push_back(v);
    } catch (const nd::NumericError& e) {
      throw nd::NumericError("non-finite importance weight among samples " + std::to_string(w.size()) + ".." +
                             std::to_string(w.size() + rows - 1) + ": " + e.what());
    }
  }
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (!std::isfinite(w[i])) throw nd::NumericError("non-finite importance weight at sample " + std::to_string(i));
  }
  return w;
}

ImageNll nll_from_log_weights(const std::vector<double>& w) {
  if (w.empty()) throw std::invalid_argument("importance sampling: no weights");
  const double top = *std::max_element(w.begin(), w.end());
  const double k = static_cast<double>(w.size());
  double s = 0, s2 = 0;
  for (double v : w) {
    const double r = std::exp(v - top);
    s += r;
    s2 += r * r;
  }
  const double mean = s / k;
  const double var = std::max(0.0, s2 / k - mean * mean);
  // Delta method: Var[log mean(w)] ~ Var[w] / (k E[w]^2).
  return {-(top + std::log(mean)), std::sqrt(var / k) / mean};
}

ImageNll is_nll_image(const model::VlaeModel& m, const nd::Tensor& x, std::size_t k, nd::Rng& rng) {
  return nll_from_log_weights(log_weights(m, x, k, rng));
}

NllEstimate is_nll(const model::VlaeModel& m, const nd::Tensor& images, std::size_t k, std::uint64_t seed,
                   std::size_t workers) {
  if (images.rank() != 4 || images.dim(0) == 0) throw std::invalid_argument("is_nll: expected a nonempty image batch");
  const std::size_t n = images.dim(0);
  NllEstimate est;
  est.k = k;
  est.per_image.resize(n);
  est.per_image_std_error.resize(n);
  const nd::Rng root(seed);
  // Without a latent every weight is the exact log-likelihood.
  const std::size_t draws = m.has_latent() ? k : 1;
  parallel_for(
      n,
      [&](std::size_t i) {
        nd::Rng rng = root.split(i);
        try {
          const auto r = is_nll_image(m, image_row(images, i), draws, rng);
          est.per_image[i] = r.value;
          est.per_image_std_error[i] = r.std_error;
        } catch (const nd::NumericError& e) {
          throw nd::NumericError("image " + std::to_string(i) + ": " + e.what());
        }
      },
      workers);
  double sum = 0, var = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sum += est.per_image[i];
    var += est.per_image_std_error[i] * est.per_image_std_error[i];
  }
  est.value = sum / static_cast<double>(n);
  est.std_error = std::sqrt(var) / static_cast<double>(n);
  return est;
}

BitsBackReport bitsback_accounting(const model::VlaeModel& m, const nd::Tensor& images, std::uint64_t seed,
                                   std::size_t batch) {
  if (images.rank() != 4 || images.dim(0) == 0) throw std::invalid_argument("bitsback: dataset must be nonempty");
  const std::size_t n = images.dim(0);
  batch = std::max<std::size_t>(1, batch);
  BitsBackReport r;
  nd::Rng rng(seed);
  for (std::size_t b0 = 0; b0 < n; b0 += batch) {
    const std::size_t rows = std::min(batch, n - b0);
    nd::Tape tape;
    const auto b = m.elbo(tape, batch_rows(images, b0, rows), rng);
    for (std::size_t i = 0; i < rows; ++i) {
      const double recon = b.recon.value()[i];
      const double elbo = b.elbo.value()[i];
      double log_q = 0, log_p = 0;
      if (m.has_latent()) {
        log_q = b.log_q.value()[i];
        log_p = log_q - b.kl.value()[i];
      }
      r.naive.push_back(-log_p - recon);
      r.bitsback.push_back(log_q - log_p - recon);
      r.kl_usage.push_back(log_q - log_p);
      r.elbo.push_back(elbo);
    }
  }
  auto mean = [&](const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  };
  r.mean_naive = mean(r.naive);
  r.mean_bitsback = mean(r.bitsback);
  r.mean_savings = r.mean_naive - r.mean_bitsback;
  r.mean_kl_usage = mean(r.kl_usage);
  r.mean_elbo = mean(r.elbo);
  return r;
}

KlUsage kl_usage_meter(const model::VlaeModel& m, const nd::Tensor& images, std::size_t n_mc, std::uint64_t seed,
                       std::size_t batch) {
  if (n_mc == 0) throw std::invalid_argument("kl_usage_meter: n_mc must be >= 1");
  if (images.rank() != 4 || images.dim(0) == 0) throw std::invalid_argument("kl_usage_meter: dataset must be nonempty");
  KlUsage u;
  u.decoder = model::to_string(m.config().decoder.kind);
  if (!m.has_latent()) {
    u.decoder = "unconditional " + u.decoder;
    return u;
  }
  const std::size_t n = images.dim(0);
  batch = std::max<std::size_t>(1, batch);
  nd::Rng rng(seed);
  double total = 0;
  for (std::size_t rep = 0; rep < n_mc; ++rep) {
    for (std::size_t b0 = 0; b0 < n; b0 += batch) {
      const std::size_t rows = std::min(batch, n - b0);
      nd::Tape tape;
      const auto b = m.elbo(tape, batch_rows(images, b0, rows), rng);
      for (double v : b.kl.value().data()) total += v;
    }
  }
  u.nats = total / static_cast<double>(n * n_mc);
  u.bits = nats_to_bits(u.nats);
  return u;
}

nd::Tensor all_binary_images(const model::ImageShape& shape) {
  const std::size_t d = shape.dims();
  if (d > kMaxEnumerationBits) {
    throw std::invalid_argument("enumeration: " + std::to_string(d) + " binary dims exceed the limit of " +
                                std::to_string(kMaxEnumerationBits));
  }
  const std::size_t n = std::size_t{1} << d;
  nd::Tensor x({n, shape.channels, shape.height, shape.width});
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t j = 0; j < d; ++j) x[s * d + j] = static_cast<double>((s >> j) & 1u);
  }
  return x;
}

double enumerate_model_mass(const model::VlaeModel& m, const nd::Tensor& z) {
  const nd::Tensor x = all_binary_images(m.config().image);
  const std::size_t n = x.dim(0);
  nd::Tape tape;
  nd::Var zv;
  if (m.has_latent()) {
    const std::size_t d = m.config().latent_dim;
    if (z.size() != d) throw nd::ShapeError("enumeration: z must hold latent_dim values");
    zv = tape.constant(tile(z.reshaped({1, d}), n));
  }
  const auto lp = m.decode_logprob(tape, x, zv).log_px.value();
  double mass = 0;
  for (double v : lp.data()) mass += std::exp(v);
  return mass;
}

double sign_test_pvalue(std::size_t wins, std::size_t n) {
  if (wins > n) throw std::invalid_argument("sign test: wins exceed trials");
  // Sum of C(n, j) 2^-n for j >= wins, in log space.
  double p = 0;
  for (std::size_t j = wins; j <= n; ++j) {
    const double lc = std::lgamma(static_cast<double>(n) + 1) - std::lgamma(static_cast<double>(j) + 1) -
                      std::lgamma(static_cast<double>(n - j) + 1);
    p += std::exp(lc - static_cast<double>(n) * std::numbers::ln2);
  }
  return std::min(1.0, p);
}

}  // namespace vlae::eval
