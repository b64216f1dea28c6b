#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dcrn/autodiff/graph.hpp"

namespace dcrn::ad {

struct GradCheckOptions {
  double epsilon = 1e-5;
  /// Coordinates sampled per parameter; 0 checks every coordinate.
  std::size_t coords_per_param = 0;
  std::uint64_t seed = 0;
  /// Restrict to parameters whose name starts with one of these prefixes.
  std::vector<std::string> prefixes;
  /// Smallest denominator of the relative error. Central differences carry
  /// about machine_eps * |loss| / epsilon of rounding noise, so coordinates
  /// whose true gradient is zero need a floor above that level.
  double scale_floor = 1e-12;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
};

/// Builds a scalar loss on a graph bound to the store it receives.
using LossBuilder = std::function<Var(Graph&)>;

/// Compares reverse-mode gradients against central differences. The relative
/// error per coordinate is |analytic - numeric| / max(|analytic|, |numeric|, scale_floor).
/// Throws std::runtime_error on a non-finite loss or gradient.
GradCheckResult gradient_check(const LossBuilder& loss, ParameterStore& params,
                               const GradCheckOptions& options = {});

}  // namespace dcrn::ad
