#include "vlae/model/sampling.hpp"

#include <algorithm>
#include <cmath>

namespace vlae::model {
namespace {

double sigmoid(double a) { return a >= 0 ? 1.0 / (1.0 + std::exp(-a)) : std::exp(a) / (1.0 + std::exp(a)); }

}  // namespace

nd::Tensor sample_decoder(const VlaeModel& model, const nd::Tensor& z, std::size_t n, nd::Rng& rng,
                          const SampleOptions& opts) {
  const auto& im = model.config().image;
  const std::size_t c_n = im.channels, h = im.height, w = im.width;
  const Decoder& dec = model.decoder();
  nd::Tensor ctx;
  {
    nd::Tape tape;
    nd::Var zv = model.has_latent() ? tape.constant(z) : nd::Var{};
    ctx = dec.context(tape, zv, n).value();
  }

  nd::Tensor x({n, c_n, h, w}, opts.fill);
  auto at = [&](std::size_t i, std::size_t c, std::size_t y, std::size_t col) {
    return ((i * c_n + c) * h + y) * w + col;
  };

  if (!dec.autoregressive()) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t col = 0; col < w; ++col) {
        for (std::size_t c = 0; c < c_n; ++c) {
          for (std::size_t i = 0; i < n; ++i) x[at(i, c, y, col)] = rng.uniform() < sigmoid(ctx[at(i, c, y, col)]);
        }
      }
    }
    return x;
  }

  const std::size_t reach = dec.window().height;
  const std::size_t ctx_c = ctx.dim(1);
  for (std::size_t y = 0; y < h; ++y) {
    const std::size_t y0 = opts.full_recompute ? 0 : y - std::min(y, reach);
    const std::size_t rows = opts.full_recompute ? h : y - y0 + 1;
    for (std::size_t col = 0; col < w; ++col) {
      for (std::size_t c = 0; c < c_n; ++c) {
        nd::Tensor xb({n, c_n, rows, w}), cb({n, ctx_c, rows, w});
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t k = 0; k < c_n; ++k) {
            std::copy_n(&x[at(i, k, y0, 0)], rows * w, &xb[((i * c_n + k) * rows) * w]);
          }
          for (std::size_t k = 0; k < ctx_c; ++k) {
            std::copy_n(&ctx[((i * ctx_c + k) * h + y0) * w], rows * w, &cb[((i * ctx_c + k) * rows) * w]);
          }
        }
        nd::Tape tape;
        const nd::Tensor& logits = dec.logits(tape, tape.constant(std::move(xb)), tape.constant(std::move(cb))).value();
        const std::size_t ry = y - y0;
        for (std::size_t i = 0; i < n; ++i) {
          const double p = sigmoid(logits[((i * c_n + c) * rows + ry) * w + col]);
          x[at(i, c, y, col)] = rng.uniform() < p ? 1.0 : 0.0;
        }
      }
    }
  }
  return x;
}

nd::Tensor generate(const VlaeModel& model, std::size_t n, nd::Rng& rng, const SampleOptions& opts) {
  nd::Tensor z = model.has_latent() ? model.sample_prior(n, rng) : nd::Tensor();
  return sample_decoder(model, z, n, rng, opts);
}

Reconstruction reconstruct_lossy(const VlaeModel& model, const nd::Tensor& x, nd::Rng& rng,
                                 const SampleOptions& opts) {
  Reconstruction r;
  if (model.has_latent()) {
    nd::Tape tape;
    auto q = model.encode(tape, x);
    r.z = model.sample_posterior(tape, q, rng).z.value();
  }
  r.images = sample_decoder(model, r.z, x.dim(0), rng, opts);
  return r;
}

}  // namespace vlae::model
