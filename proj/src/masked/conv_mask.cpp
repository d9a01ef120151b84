#include "vlae/masked/conv_mask.hpp"

#include <algorithm>
#include <stdexcept>

namespace vlae::masked {
namespace {

void require_odd(std::size_t kh, std::size_t kw) {
  if (kh % 2 == 0 || kw % 2 == 0) {
    throw std::invalid_argument("masked convolution needs odd filter extents, got " + std::to_string(kh) + "x" +
                                std::to_string(kw));
  }
}

bool allowed(MaskKind kind, int dy, int dx) {
  if (dy != 0) return dy < 0;
  return kind == MaskKind::A ? dx < 0 : dx <= 0;
}

OffsetSet shifted(const OffsetSet& base, const OffsetSet& taps) {
  OffsetSet out;
  for (const auto& a : base) {
    for (const auto& t : taps) out.insert({a.dy + t.dy, a.dx + t.dx});
  }
  return out;
}

OffsetSet rect(int y0, int y1, int x0, int x1) {
  OffsetSet s;
  for (int y = y0; y <= y1; ++y) {
    for (int x = x0; x <= x1; ++x) s.insert({y, x});
  }
  return s;
}

}  // namespace

const char* to_string(MaskKind kind) { return kind == MaskKind::A ? "A" : "B"; }

OffsetSet mask_taps(MaskKind kind, std::size_t kh, std::size_t kw) {
  require_odd(kh, kw);
  const int ry = static_cast<int>(kh / 2), rx = static_cast<int>(kw / 2);
  OffsetSet s;
  for (int dy = -ry; dy <= ry; ++dy) {
    for (int dx = -rx; dx <= rx; ++dx) {
      if (allowed(kind, dy, dx)) s.insert({dy, dx});
    }
  }
  return s;
}

nd::Tensor build_offset_mask(const OffsetSet& taps, std::size_t kh, std::size_t kw, std::size_t c_in,
                             std::size_t c_out) {
  require_odd(kh, kw);
  if (c_in == 0 || c_out == 0) throw std::invalid_argument("mask channel counts must be positive");
  const int ry = static_cast<int>(kh / 2), rx = static_cast<int>(kw / 2);
  nd::Tensor plane(nd::Shape{kh, kw}, 0.0);
  for (const auto& t : taps) {
    if (std::abs(t.dy) > ry || std::abs(t.dx) > rx) throw std::invalid_argument("tap outside the kernel");
    plane[static_cast<std::size_t>((t.dy + ry) * static_cast<int>(kw) + t.dx + rx)] = 1.0;
  }
  nd::Tensor m(nd::Shape{c_out, c_in, kh, kw});
  for (std::size_t p = 0; p < c_out * c_in; ++p) {
    std::copy(plane.data().begin(), plane.data().end(), m.data().begin() + static_cast<long>(p * kh * kw));
  }
  return m;
}

nd::Tensor build_conv_mask(MaskKind kind, std::size_t kh, std::size_t kw, std::size_t c_in, std::size_t c_out) {
  return build_offset_mask(mask_taps(kind, kh, kw), kh, kw, c_in, c_out);
}

nd::Tensor build_conv_mask_with_context(MaskKind kind, std::size_t kh, std::size_t kw, std::size_t c_image,
                                        std::size_t c_context, std::size_t c_out) {
  nd::Tensor image = build_conv_mask(kind, kh, kw, 1, 1);
  nd::Tensor context = build_conv_mask(MaskKind::B, kh, kw, 1, 1);
  const std::size_t c_in = c_image + c_context, plane = kh * kw;
  nd::Tensor m(nd::Shape{c_out, c_in, kh, kw});
  for (std::size_t o = 0; o < c_out; ++o) {
    for (std::size_t c = 0; c < c_in; ++c) {
      const nd::Tensor& src = c < c_image ? image : context;
      std::copy(src.data().begin(), src.data().end(), m.data().begin() + static_cast<long>((o * c_in + c) * plane));
    }
  }
  return m;
}

OffsetSet taps_of(const nd::Tensor& mask, std::size_t c_begin, std::size_t c_end) {
  if (mask.rank() != 4 || c_end > mask.dim(1) || c_begin > c_end) throw std::invalid_argument("taps_of: bad mask");
  const std::size_t c_out = mask.dim(0), c_in = mask.dim(1), kh = mask.dim(2), kw = mask.dim(3);
  const int ry = static_cast<int>(kh / 2), rx = static_cast<int>(kw / 2);
  OffsetSet s;
  for (std::size_t o = 0; o < c_out; ++o) {
    for (std::size_t c = c_begin; c < c_end; ++c) {
      for (std::size_t y = 0; y < kh; ++y) {
        for (std::size_t x = 0; x < kw; ++x) {
          if (mask[((o * c_in + c) * kh + y) * kw + x] != 0.0) {
            s.insert({static_cast<int>(y) - ry, static_cast<int>(x) - rx});
          }
        }
      }
    }
  }
  return s;
}

OffsetSet canonical_window(std::size_t width, std::size_t height) {
  const int left = static_cast<int>((width + 0) / 2);  // ceil((A - 1) / 2)
  OffsetSet s;
  if (width == 0) return s;
  s = rect(-static_cast<int>(height), -1, -left, static_cast<int>(width) - 1 - left);
  for (int dx = -left; dx < 0; ++dx) s.insert({0, dx});
  return s;
}

ReceptiveField summarize(const OffsetSet& offsets) {
  ReceptiveField rf;
  rf.offsets = offsets;
  int min_dx = 0, max_dx = 0, min_dy = 0, min_row0 = 0;
  bool any_above = false;
  for (const auto& o : offsets) {
    if (o.dy < 0) {
      if (!any_above) {
        min_dx = max_dx = o.dx;
        any_above = true;
      }
      min_dx = std::min(min_dx, o.dx);
      max_dx = std::max(max_dx, o.dx);
      min_dy = std::min(min_dy, o.dy);
    } else if (o.dy == 0 && o.dx < 0) {
      min_row0 = std::min(min_row0, o.dx);
    }
  }
  rf.width = any_above ? static_cast<std::size_t>(max_dx - min_dx + 1) : 0;
  rf.height = static_cast<std::size_t>(-min_dy);
  rf.left = static_cast<std::size_t>(-min_row0);
  rf.rectangular = offsets == canonical_window(rf.width, rf.height);
  return rf;
}

int LayerGraph::add(std::vector<Edge> edges) {
  for (const auto& e : edges) {
    if (e.source >= static_cast<int>(nodes.size())) throw std::invalid_argument("layer graph edge from a later node");
  }
  nodes.push_back(std::move(edges));
  output = static_cast<int>(nodes.size()) - 1;
  return output;
}

OffsetSet LayerGraph::offsets() const {
  if (nodes.empty() || output < 0) throw std::invalid_argument("empty layer graph");
  std::vector<OffsetSet> reach(nodes.size());
  const OffsetSet image{{0, 0}};
  for (std::size_t n = 0; n < nodes.size(); ++n) {
    for (const auto& e : nodes[n]) {
      const OffsetSet& src = e.source < 0 ? image : reach[static_cast<std::size_t>(e.source)];
      auto s = shifted(src, e.taps);
      reach[n].insert(s.begin(), s.end());
    }
  }
  return reach[static_cast<std::size_t>(output)];
}

ReceptiveField receptive_field_of(const LayerGraph& graph) { return summarize(graph.offsets()); }

ReceptiveField receptive_field_of(const std::vector<ConvLayerSpec>& stack) {
  if (stack.empty()) throw std::invalid_argument("receptive field of an empty stack");
  if (stack.front().kind != MaskKind::A) {
    throw std::invalid_argument("first masked layer must be kind A, otherwise pixel i reads itself");
  }
  for (std::size_t l = 1; l < stack.size(); ++l) {
    if (stack[l].kind != MaskKind::B) throw std::invalid_argument("layers after the first must be kind B");
  }
  LayerGraph g;
  int prev = -1;
  for (const auto& layer : stack) prev = g.add({{prev, mask_taps(layer.kind, layer.kh, layer.kw)}});
  return receptive_field_of(g);
}

OffsetSet vertical_first_taps() { return rect(-2, -1, -1, 1); }
OffsetSet vertical_taps() { return rect(-1, 0, -1, 1); }
OffsetSet horizontal_first_taps() { return mask_taps(MaskKind::A, 3, 3); }
OffsetSet horizontal_taps() { return rect(-1, 0, -1, 0); }

LayerGraph two_stream_graph(std::size_t v_layers, std::size_t h_layers) {
  if (v_layers == 0 || h_layers == 0) throw std::invalid_argument("two-stream stack needs at least one layer per stream");
  LayerGraph g;
  std::vector<int> u;
  u.push_back(g.add({{-1, vertical_first_taps()}}));
  for (std::size_t k = 1; k < v_layers; ++k) u.push_back(g.add({{u.back(), vertical_taps()}}));
  int ul = g.add({{-1, horizontal_first_taps()}});
  for (std::size_t k = 1; k < h_layers; ++k) {
    const int uk = u[std::min(k, v_layers - 1)];
    ul = g.add({{ul, horizontal_taps()}, {uk, {{0, 0}}}});
  }
  g.output = ul;
  return g;
}

}  // namespace vlae::masked
