#include <cmath>

#include "doctest.h"
#include "nptm/attacks.hpp"
#include "test_support.hpp"

using namespace nptm;
using namespace nptm::test;

namespace {

const Shape kImage{1, 8, 8};

ClassifierModel tiny(std::uint64_t seed) { return init_model(tiny_cnn_spec(1, 8, 3), seed); }

FirstOrderStep linear_step(const FeatureMap& phi, const Tensor& at, const Tensor& grad, double eta, std::size_t k) {
  Tape tape;
  const Var xv = tape.variable(at);
  const Var emb = phi.embed(tape, xv, nullptr);
  const JacobianGramOperator gram(phi, tape, xv, emb, 1e-3, nullptr);
  return ppgd_first_order_step(phi, gram, at, grad, eta, k, 1e-3, nullptr);
}

Tensor identity_matrix(std::size_t n) {
  Tensor eye(Shape{n, n});
  for (std::size_t i = 0; i < n; ++i) eye[i * n + i] = 1.0;
  return eye;
}

AttackConfig small_config(double bound, std::uint64_t seed) {
  AttackConfig c;
  c.bound = bound;
  c.steps = 4;
  c.lambda_rounds = 2;
  c.seed = seed;
  return c;
}

}  // namespace

TEST_CASE("config validation") {
  AttackConfig c;
  CHECK_NOTHROW(c.validate());
  c.bound = -1;
  CHECK_THROWS(c.validate());
  c = AttackConfig{};
  c.steps = 0;
  CHECK_THROWS(c.validate());
  c = AttackConfig{};
  c.step_size = 0.0;
  CHECK_THROWS(c.validate());
  CHECK(AttackConfig{}.ppgd_step_size() == 0.125);
}

TEST_CASE("Jacobian products") {
  Rng rng(1);
  const Shape sh{1, 1, 5};
  const Tensor at = random_tensor(sh, rng);
  const Tensor v = random_tensor(sh, rng);

  const LinearFeatureMap id(identity_matrix(5), sh);
  CHECK(max_abs_diff(multiply_jacobian(id, at, v, 1e-3), v) < 1e-10);

  const Tensor a = random_tensor(Shape{4, 5}, rng);
  const LinearFeatureMap lin(a, sh);
  const Tensor expected = matvec(transpose(a), matvec(a, v.reshaped(Shape{5}))).reshaped(sh);
  const Tensor got = multiply_jacobian(lin, at, v, 1e-6);
  CHECK(norm2(got - expected) / norm2(expected) < 1e-6);

  PassCounter c;
  multiply_jacobian(lin, at, v, 1e-3, &c);
  CHECK(c == PassCounter{2, 1});
}

TEST_CASE("Jacobian product error on a CNN shrinks with the step") {
  const ClassifierModel m = tiny(2);
  const LpipsFeatureMap phi(m);
  Rng rng(2);
  const Tensor at = random_tensor(kImage, rng, 0.2, 0.8);
  const Tensor v = (1.0 / 8.0) * random_tensor(kImage, rng);

  // Explicit Jacobian by central differences, column by column.
  const Tensor e0 = phi.embed(at, nullptr);
  const std::size_t n = at.size(), mdim = e0.size();
  Tensor jac(Shape{mdim, n});
  for (std::size_t j = 0; j < n; ++j) {
    Tensor up = at, down = at;
    up[j] += 1e-6;
    down[j] -= 1e-6;
    const Tensor col = (1.0 / 2e-6) * (phi.embed(up, nullptr) - phi.embed(down, nullptr));
    for (std::size_t i = 0; i < mdim; ++i) jac[i * n + j] = col[i];
  }
  const Tensor jv = matvec(jac, v.reshaped(Shape{n}));
  const Tensor expected = matvec(transpose(jac), jv).reshaped(kImage);

  const double e2 = norm2(multiply_jacobian(phi, at, v, 1e-2) - expected);
  const double e4 = norm2(multiply_jacobian(phi, at, v, 1e-4) - expected);
  CHECK(e4 < e2);
  CHECK(e4 / norm2(expected) < 1e-2);
}

TEST_CASE("first-order step with the identity map is a normalized gradient") {
  Rng rng(3);
  const Shape sh{1, 1, 6};
  const LinearFeatureMap id(identity_matrix(6), sh);
  const Tensor g = random_tensor(sh, rng);
  const FirstOrderStep s = linear_step(id, random_tensor(sh, rng), g, 0.3, 5);
  CHECK(max_abs_diff(s.delta, (0.3 / norm2(g)) * g) < 1e-9);
  CHECK_FALSE(s.degenerate);
}

TEST_CASE("first-order step matches the closed form on linear maps") {
  Rng rng(4);
  for (int t = 0; t < 20; ++t) {
    const std::size_t n = 2 + rng.below(15);
    const Shape sh{1, 1, n};
    const Tensor g = random_tensor(Shape{n}, rng);
    const Tensor at = random_tensor(sh, rng);

    const Tensor a = random_gaussian_matrix(n, n, rng);
    const Tensor exact = lemma_step(a, g, 0.1);
    const FirstOrderStep full = linear_step(LinearFeatureMap(a, sh), at, g.reshaped(sh), 0.1, n);
    const Tensor d = full.delta.reshaped(Shape{n});
    CHECK(angle_between(d, exact) < 0.01);
    CHECK(std::abs(norm2(d) - norm2(exact)) / norm2(exact) < 0.01);

    const Tensor wc = random_conditioned(n, 2.0, rng);
    const Tensor exact_wc = lemma_step(wc, g, 0.1);
    const FirstOrderStep k5 = linear_step(LinearFeatureMap(wc, sh), at, g.reshaped(sh), 0.1, 5);
    CHECK(angle_between(k5.delta.reshaped(Shape{n}), exact_wc) < 0.05);
  }
}

TEST_CASE("model-level first-order step uses the loss gradient") {
  // Two-class linear classifier: the margin gradient for label 0 is w1 - w0.
  Rng rng(5);
  const Shape sh{1, 1, 4};
  const Tensor w = random_tensor(Shape{2, 4}, rng);
  const ClassifierModel m(linear_spec(sh, 2), {w, Tensor(Shape{2})});
  const Tensor a = random_conditioned(4, 2.0, rng);
  Tensor g(Shape{4});
  for (std::size_t j = 0; j < 4; ++j) g[j] = w[4 + j] - w[j];
  AttackConfig cfg;
  cfg.cg_iterations = 4;
  const FirstOrderStep s = ppgd_first_order_step(m, LinearFeatureMap(a, sh), random_tensor(sh, rng), 0, 0.2, cfg);
  CHECK(angle_between(s.delta.reshaped(Shape{4}), lemma_step(a, g, 0.2)) < 1e-6);
}

TEST_CASE("first-order step length on CNN features") {
  Rng rng(6);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const ClassifierModel m = tiny(seed);
    const LpipsFeatureMap phi(m);
    const Tensor x = random_tensor(kImage, rng, 0, 1);
    // Small enough that the step stays in the first-order regime.
    const double eta = 0.01;
    const FirstOrderStep s = ppgd_first_order_step(m, phi, x, 0, eta, AttackConfig{});
    const double moved = norm2(phi.embed(x + s.delta, nullptr) - phi.embed(x, nullptr));
    CHECK(std::abs(moved - eta) / eta < 0.1);
  }
}

TEST_CASE("degenerate direction gives a flagged zero step") {
  const Shape sh{1, 1, 3};
  const LinearFeatureMap id(identity_matrix(3), sh);
  const FirstOrderStep s = linear_step(id, Tensor(sh), Tensor(sh), 0.1, 5);
  CHECK(s.degenerate);
  CHECK(norm2(s.delta) == 0.0);
}

TEST_CASE("bisection projection") {
  const Tensor x = Tensor::vector({0, 0});
  const L2Ball l2(x);
  const ProjectionResult inside = project_bisection(l2, Tensor::vector({0.3, 0.4}), x, 1.0, 10);
  CHECK(inside.was_inside);
  CHECK(inside.point == Tensor::vector({0.3, 0.4}));

  // ||delta|| = 2 eps: the boundary is at alpha = 1/2.
  const Tensor far = Tensor::vector({1.2, 1.6});
  const ProjectionResult p = project_bisection(l2, far, x, 1.0, 10);
  const double alpha = norm2(p.point) / norm2(far);
  CHECK(std::abs(alpha - 0.5) <= std::ldexp(1.0, -10));
  CHECK(norm2(p.point) <= 1.0);
  CHECK(l2.evaluations() == 11 + 11);
}

TEST_CASE("bisection cost does not depend on the input") {
  const ClassifierModel m = tiny(7);
  const LpipsFeatureMap phi(m);
  Rng rng(7);
  const Tensor x = random_tensor(kImage, rng, 0, 1);
  for (double scale : {1e-4, 1.0}) {
    PassCounter c;
    const LpipsBall ball = LpipsBall::around(phi, x, &c);
    project_bisection(ball, x + scale * random_tensor(kImage, rng), x, 0.05, 10);
    CHECK(c == PassCounter{12, 0});
  }
}

TEST_CASE("Newton projection") {
  const Tensor x = Tensor::vector({0, 0, 0});
  const L2Ball l2(x);
  const ProjectionResult inside = project_newton(l2, Tensor::vector({0.1, 0, 0}), x, 1.0, 1e-2, 10);
  CHECK(inside.was_inside);
  CHECK(inside.point == Tensor::vector({0.1, 0, 0}));

  const ProjectionResult p = project_newton(l2, Tensor::vector({2, 0, 0}), x, 1.0, 1e-2, 10);
  CHECK_FALSE(p.fell_back);
  CHECK(p.iterations <= 3);
  CHECK(norm2(p.point) <= 1.0);
  CHECK(norm2(p.point) == doctest::Approx(0.99).epsilon(1e-12));

  const ClassifierModel m = tiny(8);
  const LpipsFeatureMap phi(m);
  Rng rng(8);
  for (int t = 0; t < 20; ++t) {
    const Tensor xi = random_tensor(kImage, rng, 0, 1);
    const LpipsBall ball = LpipsBall::around(phi, xi, nullptr);
    const Tensor start = xi + 0.5 * random_tensor(kImage, rng);
    const double eps = 0.5 * ball.value(start);
    const ProjectionResult r = project_newton(ball, start, xi, eps, 1e-2, 10);
    CHECK(ball.value(r.point) <= eps);
  }
}

namespace {

// A distance with zero gradient everywhere forces the Newton fallback.
class FlatDistance final : public DistanceToReference {
 public:
  explicit FlatDistance(Tensor ref) : ref_(std::move(ref)) {}
  double value(const Tensor& p) const override { return norm2(p - ref_); }
  double value_and_grad(const Tensor& p, Tensor& grad) const override {
    grad = Tensor(p.shape());
    return value(p);
  }

 private:
  Tensor ref_;
};

}  // namespace

TEST_CASE("Newton stall falls back to bisection") {
  const Tensor x = Tensor::vector({0, 0});
  const ProjectionResult r = project_newton(FlatDistance(x), Tensor::vector({3, 4}), x, 1.0, 1e-2, 10);
  CHECK(r.fell_back);
  CHECK(norm2(r.point) <= 1.0);
}

TEST_CASE("zero radius returns the natural input") {
  const ClassifierModel m = tiny(9);
  Rng rng(9);
  const Tensor x = random_tensor(kImage, rng, 0, 1);
  AttackConfig cfg = small_config(0.0, 1);
  CHECK(ppgd(m, x, 0, cfg).adversarial == x);
  CHECK(lpa(m, x, 0, cfg).adversarial == x);
  const AttackResult r = lpa(m, x, 0, cfg);
  CHECK(r.distance == 0.0);
  CHECK(r.success == (argmax(forward_logits(m, x)) != 0));
}

TEST_CASE("constant classifier cannot be fooled") {
  ClassifierModel m = tiny(10);
  auto& p = m.mutable_parameters();
  p[4] = Tensor(p[4].shape());
  p[5] = Tensor::vector({1.0, 0.0, 0.0});
  Rng rng(10);
  const Tensor x = random_tensor(kImage, rng, 0, 1);
  for (const AttackResult& r : {ppgd(m, x, 0, small_config(0.3, 2)), lpa(m, x, 0, small_config(0.3, 2))}) {
    CHECK_FALSE(r.success);
    CHECK(r.distance <= 0.3 * (1 + 1e-6));
  }
  CHECK(ppgd(m, x, 0, small_config(0.3, 2)).degenerate_steps == 4);
}

TEST_CASE("perceptual attacks stay inside the bound") {
  Rng rng(11);
  for (int t = 0; t < 6; ++t) {
    const ClassifierModel m = tiny(static_cast<std::uint64_t>(t));
    const Tensor x = random_tensor(kImage, rng, 0, 1);
    const std::size_t y = argmax(forward_logits(m, x));
    AttackConfig cfg = small_config(0.05 + 0.1 * t, static_cast<std::uint64_t>(t));
    cfg.projection = t % 2 ? ProjectionMethod::kNewton : ProjectionMethod::kBisection;
    const AttackResult p = ppgd(m, x, y, cfg);
    const AttackResult l = lpa(m, x, y, cfg);
    CHECK(p.distance <= cfg.bound * (1 + 1e-6));
    CHECK(l.distance <= cfg.bound * (1 + 1e-6));
    CHECK(p.success == (p.margin > 0));
    CHECK(l.distance == doctest::Approx(lpips_distance(m, l.adversarial, x)).epsilon(1e-15));
  }
}

TEST_CASE("attacks are reproducible under a seed") {
  const ClassifierModel m = tiny(12);
  Rng rng(12);
  const Tensor x = random_tensor(kImage, rng, 0, 1);
  CHECK(ppgd(m, x, 1, small_config(0.2, 5)).adversarial == ppgd(m, x, 1, small_config(0.2, 5)).adversarial);
  CHECK(fast_lpa(m, x, 1, small_config(0.2, 5)).adversarial == fast_lpa(m, x, 1, small_config(0.2, 5)).adversarial);
  CHECK_FALSE(lpa(m, x, 1, small_config(0.2, 5)).adversarial == lpa(m, x, 1, small_config(0.2, 6)).adversarial);
}

TEST_CASE("lambda schedules") {
  const ClassifierModel m = tiny(13);
  Rng rng(13);
  const Tensor x = random_tensor(kImage, rng, 0, 1);
  AttackConfig cfg = small_config(1e-9, 1);
  cfg.lambda_rounds = 5;
  cfg.steps = 2;
  const AttackResult r = lpa(m, x, 0, cfg);
  REQUIRE(r.lambda_history.size() == 5);
  const double expected[] = {0.01, 0.1, 1.0, 10.0, 100.0};
  for (std::size_t i = 0; i < 5; ++i) CHECK(r.lambda_history[i] == doctest::Approx(expected[i]).epsilon(1e-12));

  cfg.steps = 10;
  const AttackResult f = fast_lpa(m, x, 0, cfg);
  REQUIRE(f.lambda_history.size() == 10);
  CHECK(f.lambda_history.front() == std::pow(10.0, 0.1));
  CHECK(f.lambda_history.back() == 10.0);
}

TEST_CASE("pass accounting") {
  const ClassifierModel m = tiny(14);
  const ClassifierModel ext = tiny(15);
  Rng rng(14);
  const Tensor x = random_tensor(kImage, rng, 0, 1);
  for (std::size_t t : {1, 3}) {
    for (std::size_t k : {1, 3}) {
      for (std::size_t n : {1, 4}) {
        for (std::size_t s : {1, 2}) {
          AttackConfig cfg;
          cfg.bound = 0.1;
          cfg.steps = t;
          cfg.cg_iterations = k;
          cfg.bisection_iterations = n;
          cfg.lambda_rounds = s;
          CHECK(ppgd(m, x, 0, cfg).passes == PassCounter{1 + t * (k + n + 4), t * (k + 2)});
          CHECK(lpa(m, x, 0, cfg).passes == PassCounter{2 * s * t + n + 2, s * t});
          CHECK(fast_lpa(m, x, 0, cfg).passes == PassCounter{2 * t + 1, t});
          cfg.bound_mode = BoundMode::kExternal;
          CHECK(ppgd(m, ext, x, 0, cfg).passes == PassCounter{1 + t * (k + n + 5), t * (k + 2)});
          CHECK(lpa(m, ext, x, 0, cfg).passes == PassCounter{3 * s * t + n + 2, 2 * s * t});
          CHECK(fast_lpa(m, ext, x, 0, cfg).passes == PassCounter{3 * t + 1, 2 * t});
        }
      }
    }
  }
}

TEST_CASE("bound mode must match the networks") {
  const ClassifierModel m = tiny(16), ext = tiny(17);
  Rng rng(16);
  const Tensor x = random_tensor(kImage, rng, 0, 1);
  AttackConfig cfg = small_config(0.1, 1);
  CHECK_THROWS(ppgd(m, ext, x, 0, cfg));
  cfg.bound_mode = BoundMode::kExternal;
  CHECK_THROWS(lpa(m, x, 0, cfg));
}

TEST_CASE("external bound measures distance with the external network") {
  const ClassifierModel m = tiny(18), ext = tiny(19);
  Rng rng(18);
  const Tensor x = random_tensor(kImage, rng, 0, 1);
  AttackConfig cfg = small_config(0.1, 1);
  cfg.bound_mode = BoundMode::kExternal;
  const AttackResult r = lpa(m, ext, x, 0, cfg);
  CHECK(r.distance == lpips_distance(ext, r.adversarial, x));
  CHECK(r.distance <= 0.1 * (1 + 1e-6));
}

TEST_CASE("attack strength grows with the bound") {
  Rng rng(20);
  const ClassifierModel m = tiny(20);
  std::vector<Tensor> xs;
  for (int i = 0; i < 8; ++i) xs.push_back(random_tensor(kImage, rng, 0, 1));
  for (auto attack : {0, 1, 2}) {
    std::size_t prev = 0;
    for (double eps : {0.02, 0.1, 0.5}) {
      std::size_t fooled = 0;
      for (std::size_t i = 0; i < xs.size(); ++i) {
        const std::size_t y = argmax(forward_logits(m, xs[i]));
        AttackConfig cfg = small_config(eps, i);
        const AttackResult r = attack == 0 ? ppgd(m, xs[i], y, cfg)
                               : attack == 1 ? lpa(m, xs[i], y, cfg)
                                             : fast_lpa(m, xs[i], y, cfg);
        fooled += r.success;
      }
      CHECK(fooled >= prev);
      prev = fooled;
    }
  }
}

TEST_CASE("Lp PGD baselines") {
  Rng rng(21);
  const Shape sh{1, 2, 2};
  const Tensor w = random_tensor(Shape{2, 4}, rng);
  const ClassifierModel lin(linear_spec(sh, 2), {w, Tensor(Shape{2})});
  const Tensor x = random_tensor(sh, rng);
  PgdConfig cfg;
  cfg.bound = 0.1;
  cfg.steps = 1;
  cfg.step_size = 0.1;
  const AttackResult r = pgd_linf(lin, x, 0, cfg);
  for (std::size_t j = 0; j < 4; ++j) {
    const double diff = w[4 + j] - w[j];
    CHECK(r.adversarial[j] == x[j] + 0.1 * (diff > 0 ? 1.0 : -1.0));
  }
  CHECK(r.passes == PassCounter{1, 1});

  const ClassifierModel m = tiny(21);
  const Tensor img = random_tensor(kImage, rng, 0, 1);
  for (double eps : {0.0, 0.05, 0.5}) {
    PgdConfig c;
    c.bound = eps;
    c.steps = 5;
    const AttackResult li = pgd_linf(m, img, 0, c);
    CHECK(norm_inf(li.adversarial - img) <= eps + 1e-12);
    c.bound = eps * 4;
    const AttackResult l2 = pgd_l2(m, img, 0, c);
    CHECK(norm2(l2.adversarial - img) <= c.bound * (1 + 1e-12));
    if (eps == 0.0) {
      CHECK(li.adversarial == img);
      CHECK(l2.adversarial == img);
    }
  }
  PgdConfig clamp;
  clamp.bound = 0.5;
  clamp.clamp = true;
  const AttackResult cl = pgd_linf(m, img, 0, clamp);
  for (double v : cl.adversarial.data()) CHECK((v >= 0.0 && v <= 1.0));
}
