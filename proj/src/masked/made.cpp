#include "vlae/masked/made.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>
#include <string>

namespace vlae::masked {

std::vector<std::size_t> natural_ordering(std::size_t d) {
  std::vector<std::size_t> o(d);
  std::iota(o.begin(), o.end(), std::size_t{1});
  return o;
}

std::vector<std::size_t> reversed_ordering(std::size_t d) {
  auto o = natural_ordering(d);
  std::reverse(o.begin(), o.end());
  return o;
}

MadeMaskSet build_made_masks(const std::vector<std::size_t>& layer_sizes, const std::vector<std::size_t>& ordering,
                             nd::Rng* rng) {
  if (layer_sizes.size() < 2) throw std::invalid_argument("MADE needs at least an input and an output layer");
  const std::size_t d = layer_sizes.front();
  if (d < 1) throw std::invalid_argument("MADE dimension must be at least 1");
  if (layer_sizes.back() != d) throw std::invalid_argument("MADE output width must equal input width");
  for (std::size_t l = 1; l + 1 < layer_sizes.size(); ++l) {
    if (layer_sizes[l] == 0) throw std::invalid_argument("MADE hidden layer " + std::to_string(l) + " has width 0");
  }
  if (ordering.size() != d) throw std::invalid_argument("MADE ordering has wrong length");
  {
    auto sorted = ordering;
    std::sort(sorted.begin(), sorted.end());
    if (sorted != natural_ordering(d)) throw std::invalid_argument("MADE ordering is not a permutation of 1..D");
  }

  MadeMaskSet set;
  set.ordering = ordering;
  set.degrees.push_back(ordering);
  const std::size_t max_hidden = std::max<std::size_t>(1, d - 1);
  for (std::size_t l = 1; l + 1 < layer_sizes.size(); ++l) {
    std::vector<std::size_t> deg(layer_sizes[l]);
    if (rng) {
      const auto& prev = set.degrees.back();
      const std::size_t lo = std::min(*std::min_element(prev.begin(), prev.end()), max_hidden);
      for (auto& g : deg) g = lo + rng->below(max_hidden - lo + 1);
    } else {
      for (std::size_t k = 0; k < deg.size(); ++k) deg[k] = k % max_hidden + 1;
    }
    set.degrees.push_back(std::move(deg));
  }
  set.degrees.push_back(ordering);

  const std::size_t n_layers = set.degrees.size() - 1;
  for (std::size_t l = 0; l < n_layers; ++l) {
    const auto& in = set.degrees[l];
    const auto& out = set.degrees[l + 1];
    const bool last = l + 1 == n_layers;
    nd::Tensor m(nd::Shape{in.size(), out.size()}, 0.0);
    for (std::size_t i = 0; i < in.size(); ++i) {
      for (std::size_t k = 0; k < out.size(); ++k) {
        const bool on = last ? out[k] > in[i] : out[k] >= in[i];
        m[i * out.size() + k] = on ? 1.0 : 0.0;
      }
    }
    set.masks.push_back(std::move(m));
  }
  return set;
}

std::vector<std::vector<bool>> made_connectivity(const MadeMaskSet& set) {
  const std::size_t d = set.dim();
  // reach[j][k]: input j reaches unit k of the current layer.
  std::vector<std::vector<bool>> reach(d, std::vector<bool>(d, false));
  for (std::size_t j = 0; j < d; ++j) reach[j][j] = true;
  for (const auto& m : set.masks) {
    const std::size_t in = m.dim(0), out = m.dim(1);
    std::vector<std::vector<bool>> next(d, std::vector<bool>(out, false));
    for (std::size_t j = 0; j < d; ++j) {
      for (std::size_t a = 0; a < in; ++a) {
        if (!reach[j][a]) continue;
        for (std::size_t b = 0; b < out; ++b) {
          if (m[a * out + b] != 0.0) next[j][b] = true;
        }
      }
    }
    reach = std::move(next);
  }
  std::vector<std::vector<bool>> conn(d, std::vector<bool>(d, false));
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < d; ++j) conn[i][j] = reach[j][i];
  }
  return conn;
}

}  // namespace vlae::masked
