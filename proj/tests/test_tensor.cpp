#include <cmath>
#include <limits>

#include "doctest.h"
#include "nptm/numerics.hpp"
#include "nptm/ops.hpp"
#include "nptm/tensor.hpp"
#include "test_support.hpp"

using namespace nptm;

TEST_CASE("tensor construction checks size and finiteness") {
  CHECK_THROWS_AS(Tensor(Shape{2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  const double nan = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(Tensor::from_external(Shape{2}, {1.0, nan}), NumericError);
  CHECK_THROWS_AS(Tensor::from_external(Shape{1}, {std::numeric_limits<double>::infinity()}), NumericError);
  const Tensor t(Shape{2, 3}, 1.5);
  CHECK(t.size() == 6);
  CHECK(t.rank() == 2);
  CHECK(shape_size(t.shape()) == t.size());
  CHECK(Tensor::scalar(4.0).item() == 4.0);
  CHECK_THROWS_AS(t.item(), ShapeError);
  CHECK_THROWS_AS(t.reshaped(Shape{4}), ShapeError);
  CHECK(t.reshaped(Shape{6}).shape() == Shape{6});
}

TEST_CASE("value arithmetic") {
  const Tensor a = Tensor::vector({1, 2, 3});
  const Tensor b = Tensor::vector({4, -5, 6});
  CHECK((a + b) == Tensor::vector({5, -3, 9}));
  CHECK((a - b) == Tensor::vector({-3, 7, -3}));
  CHECK((2.0 * a) == Tensor::vector({2, 4, 6}));
  CHECK(hadamard(a, b) == Tensor::vector({4, -10, 18}));
  CHECK(dot(a, b) == 12.0);
  CHECK(norm2(Tensor::vector({3, 4})) == 5.0);
  CHECK(norm_inf(b) == 6.0);
  CHECK(sum(a) == 6.0);
  Tensor y = a;
  axpy(-1.0, a, y);
  CHECK(norm2(y) == 0.0);
  CHECK_THROWS_AS(a + Tensor::vector({1, 2}), ShapeError);
}

TEST_CASE("relu, matmul and conv2d kernels") {
  CHECK(ops::relu(Tensor::vector({-1, 0, 2})) == Tensor::vector({0, 0, 2}));

  Rng rng(1);
  const Tensor a = test::random_tensor(Shape{3, 3}, rng);
  Tensor eye(Shape{3, 3});
  for (std::size_t i = 0; i < 3; ++i) eye[i * 3 + i] = 1.0;
  CHECK(ops::matmul(eye, a) == a);
  CHECK_THROWS_AS(ops::matmul(a, Tensor(Shape{2, 3})), ShapeError);

  const Tensor img(Shape{1, 5, 5}, 1.0);
  const Tensor kernel(Shape{1, 1, 3, 3}, 1.0);
  const Tensor out = ops::conv2d(img, kernel, Tensor(Shape{1}), {1, 0});
  CHECK(out.shape() == Shape{1, 3, 3});
  for (double v : out.data()) CHECK(v == 9.0);

  // With zero padding the corner sees a 2x2 window.
  const Tensor padded = ops::conv2d(img, kernel, Tensor(Shape{1}), {1, 1});
  CHECK(padded.shape() == Shape{1, 5, 5});
  CHECK(padded[0] == 4.0);
  CHECK(padded[6] == 9.0);

  const Tensor strided = ops::conv2d(img, kernel, Tensor(Shape{1}, 0.5), {2, 0});
  CHECK(strided.shape() == Shape{1, 2, 2});
  CHECK(strided[3] == 9.5);
}

TEST_CASE("conv2d matches a direct loop with channels, stride and padding") {
  Rng rng(7);
  const Tensor x = test::random_tensor(Shape{2, 6, 5}, rng);
  const Tensor w = test::random_tensor(Shape{3, 2, 3, 2}, rng);
  const Tensor b = test::random_tensor(Shape{3}, rng);
  const ops::Conv2dGeometry g{2, 1};
  const Tensor y = ops::conv2d(x, w, b, g);
  const std::size_t oh = (6 + 2 - 3) / 2 + 1, ow = (5 + 2 - 2) / 2 + 1;
  REQUIRE(y.shape() == Shape{3, oh, ow});
  for (std::size_t o = 0; o < 3; ++o) {
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j) {
        double acc = b[o];
        for (std::size_t c = 0; c < 2; ++c) {
          for (std::size_t ki = 0; ki < 3; ++ki) {
            for (std::size_t kj = 0; kj < 2; ++kj) {
              const long r = static_cast<long>(i * 2 + ki) - 1, s = static_cast<long>(j * 2 + kj) - 1;
              if (r < 0 || s < 0 || r >= 6 || s >= 5) continue;
              acc += w[((o * 2 + c) * 3 + ki) * 2 + kj] * x[(c * 6 + static_cast<std::size_t>(r)) * 5 +
                                                             static_cast<std::size_t>(s)];
            }
          }
        }
        CHECK(y[(o * oh + i) * ow + j] == doctest::Approx(acc).epsilon(1e-14));
      }
    }
  }
}

TEST_CASE("max pool picks window maxima, first on ties") {
  const Tensor x(Shape{1, 2, 4}, std::vector<double>{1, 5, 2, 2, 3, 0, 2, 2});
  std::vector<std::size_t> arg;
  const Tensor y = ops::max_pool2d(x, 2, &arg);
  CHECK(y == Tensor(Shape{1, 1, 2}, std::vector<double>{5, 2}));
  CHECK(arg == std::vector<std::size_t>{1, 2});
}

TEST_CASE("log_softmax is stable") {
  const Tensor y = ops::log_softmax(Tensor::vector({1000, 0}));
  CHECK(y[0] == doctest::Approx(0.0));
  CHECK(y[1] == doctest::Approx(-1000.0));
}

TEST_CASE("channel normalization") {
  CHECK(ops::channel_normalize(Tensor(Shape{1, 1, 1}, 3.0))[0] == 1.0);
  const Tensor pair = ops::channel_normalize(Tensor(Shape{2, 1, 1}, std::vector<double>{3, 4}));
  CHECK(pair[0] == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(pair[1] == doctest::Approx(0.8).epsilon(1e-15));
  const Tensor zero = ops::channel_normalize(Tensor(Shape{3, 2, 2}));
  for (double v : zero.data()) CHECK(v == 0.0);
  CHECK_THROWS_AS(ops::channel_normalize(Tensor(Shape{4})), ShapeError);
}

TEST_CASE("finite differences") {
  Rng rng(3);
  const Tensor x = test::random_tensor(Shape{5}, rng);
  const Tensor g = finite_diff_grad([](const Tensor& p) { return sum(p); }, x, 1e-5);
  for (double v : g.data()) CHECK(v == doctest::Approx(1.0).epsilon(1e-9));
  const Tensor sq = finite_diff_grad([](const Tensor& p) { return p[0] * p[0]; }, Tensor::vector({3.0}), 1e-5);
  CHECK(std::abs(sq[0] - 6.0) < 1e-8);
  CHECK_THROWS(finite_diff_grad([](const Tensor&) { return 0.0; }, x, 0.0));
}

namespace {

LinearOperator dense_operator(const Tensor& a) {
  return [a](const Tensor& v) { return ops::matmul(a, v.reshaped(Shape{v.size(), 1})).reshaped(v.shape()); };
}

// M^T M + n I with M uniform in [-1, 1].
Tensor random_spd(std::size_t n, Rng& rng) {
  const Tensor m = test::random_tensor(Shape{n, n}, rng);
  Tensor a(Shape{n, n});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = i == j ? static_cast<double>(n) : 0.0;
      for (std::size_t k = 0; k < n; ++k) acc += m[k * n + i] * m[k * n + j];
      a[i * n + j] = acc;
    }
  }
  return a;
}

}  // namespace

TEST_CASE("conjugate gradients on small systems") {
  const Tensor b = Tensor::vector({1, 2, 3});
  CHECK(conjugate_gradient_solve([](const Tensor& v) { return v; }, b, 1) == b);

  Tensor diag(Shape{3, 3});
  diag[0] = 1;
  diag[4] = 2;
  diag[8] = 4;
  const CgResult r = conjugate_gradient(dense_operator(diag), Tensor::vector({1, 2, 4}), 3);
  CHECK(max_abs_diff(r.solution, Tensor::vector({1, 1, 1})) < 1e-14);
  CHECK(r.iterations == 3);
  CHECK(r.operator_calls == 4);

  // Rank-one operator with b in its range: exact after one step.
  const Tensor u = Tensor::vector({1, 0, 0});
  const CgResult rank1 = conjugate_gradient([&](const Tensor& v) { return dot(u, v) * u; }, u, 5);
  CHECK(rank1.iterations == 1);
  CHECK_FALSE(rank1.breakdown);
  CHECK(max_abs_diff(rank1.solution, u) < 1e-15);

  // Zero curvature: breakdown returns the current iterate.
  const CgResult flat = conjugate_gradient([](const Tensor& v) { return Tensor(v.shape()); }, b, 5);
  CHECK(flat.breakdown);
  CHECK(flat.iterations == 0);
  CHECK(norm2(flat.solution) == 0.0);

  CHECK(norm2(conjugate_gradient_solve(dense_operator(diag), Tensor(Shape{3}), 3)) == 0.0);
  CHECK_THROWS(conjugate_gradient(dense_operator(diag), b, 0));
}

TEST_CASE("conjugate gradients match a dense solve on SPD systems") {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 20;
    const Tensor a = random_spd(n, rng);
    const Tensor x = test::random_tensor(Shape{n}, rng);
    const Tensor b = dense_operator(a)(x);
    const CgResult r = conjugate_gradient(dense_operator(a), b, n);
    CHECK(max_abs_diff(r.solution, x) < 1e-8);
  }
}

// The error in the A-norm is non-increasing for CG on SPD systems. The
// residual 2-norm is not monotone in general.
TEST_CASE("conjugate gradients decrease the A-norm error") {
  // A small SPD example whose residual norm goes up on the second iteration.
  Tensor a(Shape{2, 2}, std::vector<double>{1, 0, 0, 100});
  const CgResult up = conjugate_gradient(dense_operator(a), Tensor::vector({10, 1}), 2);
  REQUIRE(up.residual_norms.size() == 3);
  CHECK(up.residual_norms[1] > up.residual_norms[0]);
  CHECK(up.residual_norms[2] < 1e-12);

  Rng rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 12;
    const Tensor a = random_spd(n, rng);
    const Tensor xstar = test::random_tensor(Shape{n}, rng);
    const Tensor b = dense_operator(a)(xstar);
    double prev = std::numeric_limits<double>::infinity();
    for (std::size_t k = 1; k <= n; ++k) {
      const Tensor e = conjugate_gradient_solve(dense_operator(a), b, k) - xstar;
      const double energy = dot(e, dense_operator(a)(e));
      CHECK(energy <= prev * (1 + 1e-10) + 1e-20);
      prev = energy;
    }
  }
}
