#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dcrn/autodiff/graph.hpp"

namespace dcrn::ad {

struct AdamOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Adam with bias correction over a subset of a ParameterStore.
class Adam {
 public:
  /// Manages every parameter whose name starts with one of `prefixes`
  /// (all parameters when `prefixes` is empty).
  Adam(const ParameterStore& params, AdamOptions options,
       const std::vector<std::string>& prefixes = {});

  /// Applies one update from the gradients currently held in `params`.
  /// Throws std::runtime_error naming the parameter on a non-finite gradient.
  void step(ParameterStore& params);

  std::uint64_t steps() const { return step_; }
  const AdamOptions& options() const { return options_; }
  const std::vector<std::size_t>& managed() const { return managed_; }
  const Tensor& first_moment(std::size_t k) const { return m_[k]; }
  const Tensor& second_moment(std::size_t k) const { return v_[k]; }

 private:
  AdamOptions options_;
  std::vector<std::size_t> managed_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  std::uint64_t step_ = 0;
};

/// Rescales gradients of the given parameters so their joint L2 norm is at
/// most `max_norm`. Returns the norm before clipping.
double clip_grad_norm(ParameterStore& params, const std::vector<std::size_t>& indices,
                      double max_norm);

}  // namespace dcrn::ad
