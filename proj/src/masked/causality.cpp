#include "vlae/masked/causality.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "vlae/nd/rng.hpp"

namespace vlae::masked {

nd::Tensor grayscale(const nd::Tensor& rgb) {
  const bool batched = rgb.rank() == 4;
  if ((rgb.rank() != 3 && !batched) || rgb.dim(batched ? 1 : 0) != 3) {
    throw std::invalid_argument("grayscale expects 3 channels, got shape " + nd::shape_str(rgb.shape()));
  }
  for (double v : rgb.data()) {
    if (v < 0.0 || v > 1.0) throw std::invalid_argument("grayscale expects values in [0, 1]");
  }
  const std::size_t n = batched ? rgb.dim(0) : 1, plane = rgb.size() / (n * 3);
  nd::Shape shape = rgb.shape();
  shape[batched ? 1 : 0] = 1;
  nd::Tensor out(shape);
  for (std::size_t b = 0; b < n; ++b) {
    const double* src = rgb.data().data() + b * 3 * plane;
    for (std::size_t p = 0; p < plane; ++p) {
      out[b * plane + p] = std::min(1.0, kGrayR * src[p] + kGrayG * src[plane + p] + kGrayB * src[2 * plane + p]);
    }
  }
  return out;
}

nd::Var grayscale(nd::Var rgb) {
  const auto& v = rgb.value();
  const bool batched = v.rank() == 4;
  if ((v.rank() != 3 && !batched) || v.dim(batched ? 1 : 0) != 3) {
    throw std::invalid_argument("grayscale expects 3 channels, got shape " + nd::shape_str(v.shape()));
  }
  nd::Var k = rgb.tape().constant(nd::Tensor(nd::Shape{1, 3, 1, 1}, {kGrayR, kGrayG, kGrayB}));
  return nd::conv2d(rgb, k, nullptr, nd::Padding{});
}

CausalityReport assert_causality(const ImageFn& decoder, const nd::Shape& probe_chw, const OffsetSet& predicted,
                                 const CausalityOptions& opts, std::uint64_t probe_seed) {
  if (probe_chw.size() != 3) throw std::invalid_argument("probe shape must be C x H x W");
  const std::size_t c_in = probe_chw[0], h = probe_chw[1], w = probe_chw[2], plane = h * w;

  CausalityReport report;
  for (const auto& o : predicted) {
    if (in_strict_past(o)) report.window.insert(o);
  }

  nd::Rng rng(probe_seed);
  nd::Tensor probe(nd::Shape{1, c_in, h, w});
  for (auto& v : probe.data()) v = rng.bernoulli(0.5) ? 1.0 : 0.0;

  nd::Tape tape;
  nd::Var x = tape.input(probe);
  nd::Var out = decoder(tape, x);
  const auto& os = out.value().shape();
  if (os.size() != 4 || os[2] != h || os[3] != w) {
    throw std::invalid_argument("decoder output " + nd::shape_str(os) + " does not match the probe");
  }
  const std::size_t c_out = os[1];

  auto window_inside = [&](std::size_t iy, std::size_t ix) {
    for (const auto& o : report.window) {
      const long y = static_cast<long>(iy) + o.dy, xx = static_cast<long>(ix) + o.dx;
      if (y < 0 || y >= static_cast<long>(h) || xx < 0 || xx >= static_cast<long>(w)) return false;
    }
    return true;
  };

  bool any_full = false;
  nd::Tensor seed(os, 0.0);
  for (std::size_t c = 0; c < c_out; ++c) {
    for (std::size_t i = 0; i < plane; ++i) {
      seed[c * plane + i] = 1.0;
      tape.backward(out, seed);
      seed[c * plane + i] = 0.0;
      const nd::Tensor g = tape.grad(x);
      const std::size_t iy = i / w, ix = i % w;
      const bool full = window_inside(iy, ix);
      any_full = any_full || full;
      for (std::size_t j = 0; j < plane; ++j) {
        const Offset off{static_cast<int>(j / w) - static_cast<int>(iy), static_cast<int>(j % w) - static_cast<int>(ix)};
        const bool in_window = report.window.count(off) > 0;
        double peak = 0.0;
        for (std::size_t cc = 0; cc < c_in; ++cc) {
          const double d = g[cc * plane + j];
          peak = std::max(peak, std::abs(d));
          const bool ok = in_window || (j == i && opts.intra_pixel && cc < c);
          if (d != 0.0 && !ok) {
            ++report.violation_count;
            if (report.violations.size() < opts.max_listed) report.violations.push_back({i, c, j, cc, d});
          }
        }
        if (full && j != i && peak != 0.0) report.observed_support.insert(off);
        if (opts.grayscale_window && c_in == 3 && j != i && peak != 0.0) {
          const double s = g[j] + g[plane + j] + g[2 * plane + j];
          const double dev = std::max({std::abs(g[j] - s * kGrayR), std::abs(g[plane + j] - s * kGrayG),
                                       std::abs(g[2 * plane + j] - s * kGrayB)}) /
                             peak;
          report.grayscale_deviation = std::max(report.grayscale_deviation, dev);
        }
      }
    }
  }
  report.support_exact = report.window.empty() ? report.observed_support.empty()
                                               : any_full && report.observed_support == report.window;
  report.grayscale_ok = !opts.grayscale_window || report.grayscale_deviation < 1e-9;
  report.pass = report.violation_count == 0;
  return report;
}

std::string CausalityReport::to_text(std::size_t width) const {
  std::ostringstream os;
  const auto rf = summarize(window);
  os << "window: " << rf.label() << " left=" << rf.left << (rf.rectangular ? " rectangular" : " non-rectangular")
     << " taps=" << window.size() << '\n';
  os << "window offsets (dy,dx):";
  for (const auto& o : window) os << " (" << o.dy << ',' << o.dx << ')';
  os << '\n';
  os << "support matches window: " << (support_exact ? "yes" : "no") << '\n';
  if (grayscale_deviation > 0.0 || !grayscale_ok) {
    os << "grayscale projection deviation: " << grayscale_deviation << (grayscale_ok ? " (ok)" : " (FAIL)") << '\n';
  }
  os << "violations: " << violation_count << '\n';
  for (const auto& v : violations) {
    os << "  out (" << v.out_pixel / width << ',' << v.out_pixel % width << ") c" << v.out_channel << " <- in ("
       << v.in_pixel / width << ',' << v.in_pixel % width << ") c" << v.in_channel << " d=" << v.derivative << '\n';
  }
  os << "result: " << (pass ? "PASS" : "FAIL") << '\n';
  return os.str();
}

}  // namespace vlae::masked
