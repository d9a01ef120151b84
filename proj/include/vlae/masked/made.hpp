#pragma once

#include <cstddef>
#include <vector>

#include "vlae/nd/rng.hpp"
#include "vlae/nd/tensor.hpp"

namespace vlae::masked {

/// Connectivity of a MADE network over D autoregressive units.
struct MadeMaskSet {
  /// masks[l] has shape [in_l x out_l], matching x[N x in] * W[in x out].
  std::vector<nd::Tensor> masks;
  /// ordering[i] is the 1-based position of unit i in the autoregressive order.
  std::vector<std::size_t> ordering;
  /// degrees[l][k] for every layer including input (l = 0) and output.
  std::vector<std::vector<std::size_t>> degrees;

  std::size_t dim() const { return ordering.size(); }
};

std::vector<std::size_t> natural_ordering(std::size_t d);
std::vector<std::size_t> reversed_ordering(std::size_t d);

/// layer_sizes = {D, h_1, ..., h_L, D}. Hidden degrees are assigned round-robin
/// over [1, max(1, D-1)]; when rng is given they are drawn uniformly from
/// [min degree of the previous layer, max(1, D-1)] instead.
MadeMaskSet build_made_masks(const std::vector<std::size_t>& layer_sizes, const std::vector<std::size_t>& ordering,
                             nd::Rng* rng = nullptr);

/// Boolean D x D connectivity: entry (i, j) is true when output i can see input j.
std::vector<std::vector<bool>> made_connectivity(const MadeMaskSet& set);

}  // namespace vlae::masked
