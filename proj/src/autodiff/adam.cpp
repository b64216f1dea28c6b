#include "dcrn/autodiff/adam.hpp"

#include <cmath>
#include <stdexcept>

namespace dcrn::ad {

Adam::Adam(const ParameterStore& params, AdamOptions options,
           const std::vector<std::string>& prefixes)
    : options_(options) {
  if (!(options_.learning_rate > 0.0)) throw std::invalid_argument("adam: learning rate must be > 0");
  for (std::size_t i = 0; i < params.size(); ++i) {
    bool take = prefixes.empty();
    for (const auto& p : prefixes)
      if (params.name(i).compare(0, p.size(), p) == 0) take = true;
    if (!take) continue;
    managed_.push_back(i);
    m_.emplace_back(params.value(i).shape(), 0.0);
    v_.emplace_back(params.value(i).shape(), 0.0);
  }
}

void Adam::step(ParameterStore& params) {
  for (std::size_t k = 0; k < managed_.size(); ++k) {
    if (!params.grad(managed_[k]).all_finite()) {
      throw std::runtime_error("adam: non-finite gradient for parameter '" +
                               params.name(managed_[k]) + "'");
    }
  }
  ++step_;
  const double b1 = options_.beta1, b2 = options_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
  for (std::size_t k = 0; k < managed_.size(); ++k) {
    auto w = params.value(managed_[k]).values();
    auto g = params.grad(managed_[k]).values();
    auto m = m_[k].values();
    auto v = v_[k].values();
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = b1 * m[i] + (1.0 - b1) * g[i];
      v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      w[i] -= options_.learning_rate * mhat / (std::sqrt(vhat) + options_.epsilon);
    }
  }
}

double clip_grad_norm(ParameterStore& params, const std::vector<std::size_t>& indices,
                      double max_norm) {
  double sq = 0.0;
  for (std::size_t i : indices)
    for (double g : params.grad(i).values()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (std::size_t i : indices)
      for (double& g : params.grad(i).values()) g *= s;
  }
  return norm;
}

}  // namespace dcrn::ad
