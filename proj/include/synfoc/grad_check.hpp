#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "synfoc/autodiff.hpp"

namespace synfoc {

/// Builds a scalar loss from one differentiable input on the supplied tape.
template <typename T>
using ScalarFn = std::function<Var<T>(Tape<T>&, Var<T>)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Compares the tape gradient of f at x with central differences
/// (f(x + eps e_i) - f(x - eps e_i)) / 2 eps for every coordinate.
/// Relative error is |a - n| / max(|a|, |n|, floor).
template <typename T>
GradCheckResult grad_check_detailed(const ScalarFn<T>& f, const Tensor<T>& x, T eps = T(1e-4),
                                    T floor = T(1e-2)) {
  Tensor<T> analytic;
  {
    Tape<T> tape;
    auto v = tape.variable(x);
    auto loss = f(tape, v);
    tape.backward(loss);
    analytic = tape.grad(v);
  }
  auto eval = [&](const Tensor<T>& at) {
    Tape<T> tape;
    return f(tape, tape.constant(at)).value().item();
  };
  GradCheckResult res;
  Tensor<T> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T orig = probe[i];
    probe[i] = orig + eps;
    const T fp = eval(probe);
    probe[i] = orig - eps;
    const T fm = eval(probe);
    probe[i] = orig;
    const double numeric = (static_cast<double>(fp) - static_cast<double>(fm)) / (2.0 * static_cast<double>(eps));
    const double a = static_cast<double>(analytic[i]);
    const double denom = std::max({std::abs(a), std::abs(numeric), static_cast<double>(floor)});
    const double rel = std::abs(a - numeric) / denom;
    if (i == 0 || rel > res.max_rel_error) {
      res.max_rel_error = rel;
      res.worst_index = i;
      res.analytic = a;
      res.numeric = numeric;
    }
  }
  return res;
}

template <typename T>
double grad_check(const ScalarFn<T>& f, const Tensor<T>& x, T eps = T(1e-4), T floor = T(1e-2)) {
  return grad_check_detailed(f, x, eps, floor).max_rel_error;
}

}  // namespace synfoc
