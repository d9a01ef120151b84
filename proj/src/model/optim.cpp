#include "vlae/model/optim.hpp"

#include <algorithm>
#include <cmath>

namespace vlae::model {

Optimizer::Optimizer(nd::ParameterStore& store, const OptimizerConfig& cfg) : store_(store), cfg_(cfg) {
  validate(cfg_);
  for (const auto* p : store_.all()) {
    m_.emplace_back(p->value.shape(), 0.0);
    v_.emplace_back(p->value.shape(), 0.0);
  }
}

double Optimizer::grad_norm() const {
  double s = 0;
  for (const auto* p : store_.all()) {
    for (double g : p->grad.data()) s += g * g;
  }
  return std::sqrt(s);
}

void Optimizer::step() {
  ++t_;
  const double b1 = cfg_.beta1, b2 = cfg_.beta2;
  const double lr_t = cfg_.lr / (1.0 - std::pow(b1, static_cast<double>(t_)));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  const double a = cfg_.polyak;
  auto params = store_.all();
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = *params[k];
    auto val = p.value.data();
    auto grad = p.grad.data();
    auto shadow = p.shadow.data();
    auto m = m_[k].data();
    auto v = v_[k].data();
    for (std::size_t i = 0; i < val.size(); ++i) {
      const double g = grad[i];
      m[i] = b1 * m[i] + (1.0 - b1) * g;
      if (cfg_.kind == OptimizerKind::adamax) {
        v[i] = std::max(b2 * v[i], std::abs(g));
        val[i] -= lr_t * m[i] / (v[i] + cfg_.eps);
      } else {
        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
        val[i] -= lr_t * m[i] / (std::sqrt(v[i] / bc2) + cfg_.eps);
      }
      shadow[i] = a * shadow[i] + (1.0 - a) * val[i];
    }
  }
}

}  // namespace vlae::model
