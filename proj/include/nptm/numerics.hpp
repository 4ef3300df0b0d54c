#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "nptm/tensor.hpp"

namespace nptm {

using ScalarFn = std::function<double(const Tensor&)>;
using LinearOperator = std::function<Tensor(const Tensor&)>;

// Central-difference estimate of the gradient of f at x.
Tensor finite_diff_grad(const ScalarFn& f, const Tensor& x, double step);

// max_i |a_i - b_i| / max(1, |a_i|, |b_i|)
double max_relative_error(const Tensor& a, const Tensor& b);

inline constexpr double kCgBreakdown = 1e-12;

struct CgResult {
  Tensor solution;
  std::size_t iterations = 0;       // completed CG updates
  std::size_t operator_calls = 0;   // applications of the operator, including r0
  bool breakdown = false;           // curvature p^T A p fell below kCgBreakdown
  std::vector<double> residual_norms;  // ||r_k|| for k = 0..iterations
};

// K iterations of conjugate gradients on A x = b starting from x0 = 0, for a
// symmetric positive semidefinite A given only through its action. The
// initial residual is formed as b - A x0, so the operator is applied K + 1
// times when no breakdown occurs.
CgResult conjugate_gradient(const LinearOperator& apply, const Tensor& b, std::size_t iterations);

inline Tensor conjugate_gradient_solve(const LinearOperator& apply, const Tensor& b, std::size_t iterations) {
  return conjugate_gradient(apply, b, iterations).solution;
}

}  // namespace nptm
