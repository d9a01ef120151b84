#pragma once

#include <compare>
#include <cstddef>
#include <set>
#include <string>
#include <vector>

#include "vlae/nd/tensor.hpp"

namespace vlae::masked {

/// A excludes the center tap, B includes it. Both drop every tap after the
/// center in raster order.
enum class MaskKind { A, B };

const char* to_string(MaskKind kind);

/// Spatial offset (dy, dx) from an output pixel to an input pixel it reads.
struct Offset {
  int dy = 0;
  int dx = 0;
  auto operator<=>(const Offset&) const = default;
};
using OffsetSet = std::set<Offset>;

/// True for offsets strictly before the current pixel in raster order.
inline bool in_strict_past(Offset o) { return o.dy < 0 || (o.dy == 0 && o.dx < 0); }

/// Mask [c_out x c_in x kh x kw] applying the same spatial pattern to every channel pair.
nd::Tensor build_conv_mask(MaskKind kind, std::size_t kh, std::size_t kw, std::size_t c_in, std::size_t c_out);

/// First-layer mask for an input made of c_image image channels followed by
/// c_context conditioning channels. Image channels get `kind`, context channels
/// get kind B (they carry no information about the image being decoded).
nd::Tensor build_conv_mask_with_context(MaskKind kind, std::size_t kh, std::size_t kw, std::size_t c_image,
                                        std::size_t c_context, std::size_t c_out);

/// Mask whose allowed taps are exactly `taps` (offsets relative to the kernel center).
nd::Tensor build_offset_mask(const OffsetSet& taps, std::size_t kh, std::size_t kw, std::size_t c_in,
                             std::size_t c_out);

OffsetSet mask_taps(MaskKind kind, std::size_t kh, std::size_t kw);

/// Spatial taps of a mask restricted to input channels [c_begin, c_end).
OffsetSet taps_of(const nd::Tensor& mask, std::size_t c_begin, std::size_t c_end);

/// Dependency window of a decoder conditional.
struct ReceptiveField {
  /// Width of the block of rows above the pixel.
  std::size_t width = 0;
  /// Number of rows above the pixel.
  std::size_t height = 0;
  /// Pixels read to the left on the current row.
  std::size_t left = 0;
  /// Exact set of offsets with end-to-end influence.
  OffsetSet offsets;
  /// True when offsets is exactly the canonical AxB block plus ceil((A-1)/2) left pixels.
  bool rectangular = false;

  std::string label() const { return std::to_string(width) + "x" + std::to_string(height); }
};

ReceptiveField summarize(const OffsetSet& offsets);
/// Canonical AxB window: rows -B..-1 spanning columns -ceil((A-1)/2) .. A-1-ceil((A-1)/2), plus the left pixels.
OffsetSet canonical_window(std::size_t width, std::size_t height);

/// One masked convolution layer of a plain sequential stack.
struct ConvLayerSpec {
  MaskKind kind = MaskKind::B;
  std::size_t kh = 3;
  std::size_t kw = 3;
};

/// Dependency DAG of a decoder. Each node reads from earlier nodes (or the
/// image, source -1) through a tap set; the window is the output node's offset set.
struct LayerGraph {
  struct Edge {
    int source = -1;
    OffsetSet taps;
  };
  std::vector<std::vector<Edge>> nodes;
  int output = -1;

  int add(std::vector<Edge> edges);
  OffsetSet offsets() const;
};

/// Window of a plain stack. Throws std::invalid_argument unless the first layer
/// is kind A and the rest kind B.
ReceptiveField receptive_field_of(const std::vector<ConvLayerSpec>& stack);
ReceptiveField receptive_field_of(const LayerGraph& graph);

/// Graph of the two-stream (vertical / horizontal) decoder with v vertical and
/// h horizontal layers: the vertical stream sees only rows above, the
/// horizontal stream adds pixels to the left and reads the vertical stream.
LayerGraph two_stream_graph(std::size_t v_layers, std::size_t h_layers);

/// Per-layer taps of the two-stream construction, shared with the decoder builder.
OffsetSet vertical_first_taps();   // rows -2..-1, columns -1..1
OffsetSet vertical_taps();         // rows -1..0, columns -1..1
OffsetSet horizontal_first_taps(); // kind-A 3x3
OffsetSet horizontal_taps();       // rows -1..0, columns -1..0

}  // namespace vlae::masked
