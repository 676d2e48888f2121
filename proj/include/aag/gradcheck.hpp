#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "aag/tensor.hpp"

namespace aag {

enum class GradCheckMode {
  // Compare the directional derivative along random directions whose signs
  // follow the analytic gradient.
  Directional,
  // Perturb every input element separately (small inputs only).
  Elementwise,
};

struct GradCheckOptions {
  double eps = 0.0;  // 0 selects 1e-3 for float, 1e-6 for double
  GradCheckMode mode = GradCheckMode::Directional;
  int directions = 3;
  std::uint64_t seed = 0;
  // When positive, each sample is also differenced with step eps/10; if the
  // two estimates differ by more than this relative amount the sample sits
  // next to a non-differentiable point (ReLU/max-pool kink) and is excluded.
  double smoothness_tol = 0.0;
  // Directional mode: scale each direction to unit length so the whole
  // perturbation has length eps instead of eps per coordinate. Keeps large
  // parameter sets from stepping across kinks.
  bool unit_direction = false;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t comparisons = 0;
  std::size_t excluded = 0;
};

// Compares tape gradients of the scalar `loss_fn()` with respect to `inputs`
// against central differences. `loss_fn` must read the inputs' current
// values on every call; the inputs are restored bit-exactly afterwards.
// ReLU/max-pool kinks are not differentiable: callers either keep sample
// points away from them or enable `smoothness_tol`.
template <typename T>
GradCheckResult finite_diff_check(const std::function<Tensor<T>()>& loss_fn,
                                  std::vector<Tensor<T>> inputs, GradCheckOptions opts = {});

// sum(weights * y) with fixed weights: turns a tensor-valued function into a
// scalar with a dense, generic cotangent.
template <typename T>
Tensor<T> weighted_sum(const Tensor<T>& y, const Tensor<T>& weights);

}  // namespace aag
