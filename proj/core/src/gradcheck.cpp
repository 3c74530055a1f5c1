#include "caswit/gradcheck.hpp"

#include <cmath>

namespace caswit {

template <typename T>
Tensor<T> finite_diff_grad(const std::function<T(const Tensor<T>&)>& f,
                           const Tensor<T>& x, T h) {
  if (h <= T(0)) {
    throw Error(ErrorKind::Parameter, "finite_diff_grad: h must be positive");
  }
  NoGradGuard ng;
  std::vector<T> g(x.numel());
  std::vector<T> probe = x.data();
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const T saved = probe[i];
    probe[i] = saved + h;
    const T up = f(Tensor<T>::from_data(x.shape(), probe));
    probe[i] = saved - h;
    const T down = f(Tensor<T>::from_data(x.shape(), probe));
    probe[i] = saved;
    g[i] = (up - down) / (T(2) * h);
  }
  return Tensor<T>::from_data(x.shape(), std::move(g));
}

template <typename T>
GradCheckResult compare_grads(const std::vector<T>& analytic,
                              const std::vector<T>& numeric, double rtol,
                              double atol) {
  GradCheckResult r;
  if (analytic.size() != numeric.size()) return r;
  r.ok = true;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double a = static_cast<double>(analytic[i]);
    const double n = static_cast<double>(numeric[i]);
    if (!std::isfinite(a) || !std::isfinite(n)) {
      r.ok = false;
      continue;
    }
    const double diff = std::abs(a - n);
    const double mag = std::max(std::abs(a), std::abs(n));
    r.max_abs_diff = std::max(r.max_abs_diff, diff);
    r.max_magnitude = std::max(r.max_magnitude, mag);
    if (diff > atol + rtol * mag) r.ok = false;
  }
  return r;
}

template Tensor<float> finite_diff_grad<float>(
    const std::function<float(const Tensor<float>&)>&, const Tensor<float>&,
    float);
template Tensor<double> finite_diff_grad<double>(
    const std::function<double(const Tensor<double>&)>&, const Tensor<double>&,
    double);
template GradCheckResult compare_grads<float>(const std::vector<float>&,
                                              const std::vector<float>&,
                                              double, double);
template GradCheckResult compare_grads<double>(const std::vector<double>&,
                                               const std::vector<double>&,
                                               double, double);

}  // namespace caswit
