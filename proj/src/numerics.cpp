#include "nptm/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace nptm {

Tensor finite_diff_grad(const ScalarFn& f, const Tensor& x, double step) {
  if (!(step > 0.0)) throw std::invalid_argument("finite_diff_grad: step must be positive");
  Tensor g(x.shape());
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double xi = x[i];
    probe[i] = xi + step;
    const double up = f(probe);
    probe[i] = xi - step;
    const double down = f(probe);
    probe[i] = xi;
    g[i] = (up - down) / (2.0 * step);
  }
  return g;
}

double max_relative_error(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "max_relative_error");
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double scale = std::max({1.0, std::abs(a[i]), std::abs(b[i])});
    worst = std::max(worst, std::abs(a[i] - b[i]) / scale);
  }
  return worst;
}

CgResult conjugate_gradient(const LinearOperator& apply, const Tensor& b, std::size_t iterations) {
  if (iterations == 0) throw std::invalid_argument("conjugate_gradient: need at least one iteration");
  CgResult res;
  res.solution = Tensor(b.shape());

  Tensor r = b - apply(res.solution);
  ++res.operator_calls;
  Tensor p = r;
  double rr = dot(r, r);
  res.residual_norms.push_back(std::sqrt(rr));

  for (std::size_t k = 0; k < iterations; ++k) {
    if (rr == 0.0) break;
    const Tensor ap = apply(p);
    ++res.operator_calls;
    require_same_shape(ap, p, "conjugate_gradient operator");
    const double curvature = dot(p, ap);
    if (curvature <= kCgBreakdown) {
      res.breakdown = true;
      break;
    }
    const double alpha = rr / curvature;
    axpy(alpha, p, res.solution);
    axpy(-alpha, ap, r);
    const double rr_next = dot(r, r);
    res.residual_norms.push_back(std::sqrt(rr_next));
    ++res.iterations;
    const double beta = rr_next / rr;
    rr = rr_next;
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = r[i] + beta * p[i];
  }
  return res;
}

}  // namespace nptm
