#pragma once

#include <cstddef>
#include <functional>

#include "vlae/nd/tape.hpp"

namespace vlae::nd {

/// Max over coordinates of |analytic - numeric| / (|analytic| + |numeric| + 1e-8),
/// with the numeric gradient taken by central differences of step eps.
double grad_check(const std::function<Var(Tape&, Var)>& f, const Tensor& x, double eps = 1e-5);

struct ParamCheckOptions {
  double eps = 1e-5;
  /// Cap on checked coordinates per parameter (evenly strided); 0 checks all.
  std::size_t max_coords_per_param = 0;
};

/// Same error measure, perturbing every parameter in the store. f must rebuild
/// its graph from the current parameter values on each call.
double grad_check_params(const std::function<Var(Tape&)>& f, ParameterStore& store,
                         ParamCheckOptions opts = {});

double relative_error(double analytic, double numeric);

}  // namespace vlae::nd
