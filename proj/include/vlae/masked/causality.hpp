#pragma once

#include <functional>
#include <string>
#include <vector>

#include "vlae/masked/conv_mask.hpp"
#include "vlae/nd/ops.hpp"

namespace vlae::masked {

/// Maps an image [1 x C x H x W] to per-pixel distribution parameters [1 x C x H x W].
using ImageFn = std::function<nd::Var(nd::Tape&, nd::Var image)>;

struct CausalityOptions {
  /// Input channel c' of pixel i may feed output channel c of the same pixel when c' < c.
  bool intra_pixel = false;
  /// Check that off-pixel influence of a 3-channel input is proportional to the grayscale weights.
  bool grayscale_window = false;
  /// Stop listing violations after this many (the count keeps going).
  std::size_t max_listed = 32;
};

struct Violation {
  std::size_t out_pixel = 0;  // raster index i
  std::size_t out_channel = 0;
  std::size_t in_pixel = 0;   // raster index j
  std::size_t in_channel = 0;
  double derivative = 0.0;
};

struct CausalityReport {
  bool pass = true;
  /// Allowed window (predicted offsets intersected with the strict raster past).
  OffsetSet window;
  std::vector<Violation> violations;
  std::size_t violation_count = 0;
  /// For outputs whose window lies fully inside the probe, the union of
  /// nonzero offsets equals the window.
  bool support_exact = true;
  OffsetSet observed_support;
  /// Grayscale check: worst relative deviation of a color-gradient triple from 0.299:0.587:0.114.
  double grayscale_deviation = 0.0;
  bool grayscale_ok = true;

  std::string to_text(std::size_t width) const;
};

/// Full Jacobian of the decoder at a random binary probe, one backward pass per output.
CausalityReport assert_causality(const ImageFn& decoder, const nd::Shape& probe_chw, const OffsetSet& predicted,
                                 const CausalityOptions& opts = {}, std::uint64_t probe_seed = 1);

inline constexpr double kGrayR = 0.299, kGrayG = 0.587, kGrayB = 0.114;

/// 0.299 R + 0.587 G + 0.114 B over the channel axis of [3 x H x W] or [N x 3 x H x W].
nd::Tensor grayscale(const nd::Tensor& rgb);
nd::Var grayscale(nd::Var rgb);

}  // namespace vlae::masked
