#include "vlae/nd/grad_check.hpp"

#include <algorithm>
#include <cmath>

namespace vlae::nd {

double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / (std::abs(analytic) + std::abs(numeric) + 1e-8);
}

namespace {

double evaluate(const std::function<Var(Tape&, Var)>& f, const Tensor& x) {
  Tape tape;
  Var out = f(tape, tape.constant(x));
  const double v = out.value().item();
  if (!std::isfinite(v)) throw NumericError("grad_check: non-finite evaluation");
  return v;
}

double evaluate(const std::function<Var(Tape&)>& f) {
  Tape tape;
  const double v = f(tape).value().item();
  if (!std::isfinite(v)) throw NumericError("grad_check: non-finite evaluation");
  return v;
}

}  // namespace

double grad_check(const std::function<Var(Tape&, Var)>& f, const Tensor& x, double eps) {
  Tensor analytic;
  {
    Tape tape;
    Var in = tape.input(x);
    Var out = f(tape, in);
    tape.backward(out);
    analytic = tape.grad(in);
  }
  double worst = 0.0;
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + eps;
    const double up = evaluate(f, probe);
    probe[i] = x[i] - eps;
    const double down = evaluate(f, probe);
    probe[i] = x[i];
    worst = std::max(worst, relative_error(analytic[i], (up - down) / (2.0 * eps)));
  }
  return worst;
}

double grad_check_params(const std::function<Var(Tape&)>& f, ParameterStore& store, ParamCheckOptions opts) {
  store.zero_grad();
  {
    Tape tape;
    tape.backward(f(tape));
  }
  double worst = 0.0;
  for (Parameter* p : store.all()) {
    const Tensor analytic = p->grad;
    const std::size_t n = p->value.size();
    const std::size_t stride =
        opts.max_coords_per_param == 0 || n <= opts.max_coords_per_param ? 1 : n / opts.max_coords_per_param;
    for (std::size_t i = 0; i < n; i += stride) {
      const double orig = p->value[i];
      p->value[i] = orig + opts.eps;
      const double up = evaluate(f);
      p->value[i] = orig - opts.eps;
      const double down = evaluate(f);
      p->value[i] = orig;
      worst = std::max(worst, relative_error(analytic[i], (up - down) / (2.0 * opts.eps)));
    }
  }
  store.zero_grad();
  return worst;
}

}  // namespace vlae::nd
