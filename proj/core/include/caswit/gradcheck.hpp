#pragma once

#include <functional>

#include "caswit/tensor.hpp"

namespace caswit {

// Central-difference gradient estimate (f(x+h*e_i) - f(x-h*e_i)) / (2h) per
// element. The oracle never touches the autograd path of f's implementation.
template <typename T>
Tensor<T> finite_diff_grad(const std::function<T(const Tensor<T>&)>& f,
                           const Tensor<T>& x, T h);

struct GradCheckResult {
  bool ok = false;
  double max_abs_diff = 0.0;
  double max_magnitude = 0.0;
};

// |analytic - numeric| <= atol + rtol * max(|analytic|, |numeric|), per
// element; `analytic` comes from backward(), `numeric` from finite
// differences.
template <typename T>
GradCheckResult compare_grads(const std::vector<T>& analytic,
                              const std::vector<T>& numeric, double rtol,
                              double atol);

}  // namespace caswit
