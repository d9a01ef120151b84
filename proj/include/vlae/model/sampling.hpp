#pragma once

#include "vlae/model/vlae.hpp"

namespace vlae::model {

struct SampleOptions {
  /// Value held by pixels that have not been sampled yet. Any value must give
  /// the same result; tests use this as an access check.
  double fill = 0.0;
  /// Recompute the decoder over the whole image for every pixel instead of
  /// the band of rows the window can reach.
  bool full_recompute = false;
};

/// Ancestral sampling of p(x|z) in raster order (channels in order within a
/// pixel). z is [n x D], or empty for an unconditional model. One uniform draw
/// per pixel and channel.
nd::Tensor sample_decoder(const VlaeModel& model, const nd::Tensor& z, std::size_t n, nd::Rng& rng,
                          const SampleOptions& opts = {});

/// e ~ N(0, I), z = f(e), x ~ p(x|z).
nd::Tensor generate(const VlaeModel& model, std::size_t n, nd::Rng& rng, const SampleOptions& opts = {});

/// z ~ q(z|x), x' ~ p(x|z). Returns x' and the z used.
struct Reconstruction {
  nd::Tensor images;
  nd::Tensor z;
};
Reconstruction reconstruct_lossy(const VlaeModel& model, const nd::Tensor& x, nd::Rng& rng,
                                 const SampleOptions& opts = {});

}  // namespace vlae::model
