#include "dcrn/autodiff/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

namespace dcrn::ad {
namespace {

double evaluate(const LossBuilder& loss, ParameterStore& params) {
  Graph g(&params, /*grad_enabled=*/false);
  const double v = loss(g).value().item();
  if (!std::isfinite(v)) throw std::runtime_error("gradient_check: non-finite loss");
  return v;
}

}  // namespace

GradCheckResult gradient_check(const LossBuilder& loss, ParameterStore& params,
                               const GradCheckOptions& options) {
  if (options.epsilon < 1e-7 || options.epsilon > 1e-3) {
    throw std::invalid_argument("gradient_check: epsilon must lie in [1e-7, 1e-3]");
  }
  {
    Graph g(&params);
    Var l = loss(g);
    if (!std::isfinite(l.value().item())) throw std::runtime_error("gradient_check: non-finite loss");
    g.backward(l);
  }
  std::vector<Tensor> analytic;
  analytic.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params.grad(i).all_finite()) {
      throw std::runtime_error("gradient_check: non-finite gradient for '" + params.name(i) + "'");
    }
    analytic.push_back(params.grad(i));
  }

  std::mt19937_64 rng(options.seed);
  GradCheckResult result;
  for (std::size_t p = 0; p < params.size(); ++p) {
    const std::string& name = params.name(p);
    if (!options.prefixes.empty() &&
        std::none_of(options.prefixes.begin(), options.prefixes.end(),
                     [&](const std::string& pre) { return name.compare(0, pre.size(), pre) == 0; })) {
      continue;
    }
    Tensor& w = params.value(p);
    std::vector<std::size_t> coords(w.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (options.coords_per_param > 0 && coords.size() > options.coords_per_param) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(options.coords_per_param);
    }
    for (std::size_t idx : coords) {
      const double orig = w[idx];
      w[idx] = orig + options.epsilon;
      const double up = evaluate(loss, params);
      w[idx] = orig - options.epsilon;
      const double down = evaluate(loss, params);
      w[idx] = orig;
      const double numeric = (up - down) / (2.0 * options.epsilon);
      const double a = analytic[p][idx];
      const double denom = std::max({std::fabs(a), std::fabs(numeric), options.scale_floor});
      const double rel = std::fabs(a - numeric) / denom;
      ++result.checked;
      if (rel > result.max_rel_error || result.worst_param.empty()) {
        result.max_rel_error = rel;
        result.worst_param = name;
        result.worst_index = idx;
        result.worst_analytic = a;
        result.worst_numeric = numeric;
      }
    }
  }
  return result;
}

}  // namespace dcrn::ad
