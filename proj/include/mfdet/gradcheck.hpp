#pragma once

#include <cmath>

#include "mfdet/ops.hpp"

namespace mfdet {

// Central-difference gradient oracle. Runs f once under a fresh tape to get
// analytic gradients, then perturbs each element of each checked tensor in
// place and re-evaluates f without a tape. Returns the worst relative error
// seen, where rel(a, n) = |a - n| / max(|a|, |n|, 1e-8). Only meaningful for
// Tensor<double>.
template <typename F>
double finite_diff_check_multi(F&& f, const std::vector<Tensor<double>*>& checked,
                               double eps = 1e-5) {
  for (Tensor<double>* t : checked) {
    t->set_requires_grad(true);
    t->zero_grad();
  }
  std::vector<std::vector<double>> analytic;
  {
    GradTape<double> tape;
    TapeScope<double> scope(&tape);
    Tensor<double> loss = f();
    backward(loss);
    for (Tensor<double>* t : checked) analytic.push_back(t->grad());
  }
  double worst = 0.0;
  for (std::size_t ti = 0; ti < checked.size(); ++ti) {
    Tensor<double>& t = *checked[ti];
    for (int i = 0; i < t.numel(); ++i) {
      const double saved = t.data()[i];
      t.data()[i] = saved + eps;
      const double up = f().item();
      t.data()[i] = saved - eps;
      const double down = f().item();
      t.data()[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic[ti][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

template <typename F>
double finite_diff_check(F&& f, Tensor<double>& x, double eps = 1e-5) {
  return finite_diff_check_multi(f, {&x}, eps);
}

}  // namespace mfdet
