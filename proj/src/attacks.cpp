#include "nptm/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <stdexcept>

#include "nptm/rng.hpp"

namespace nptm {

void AttackConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("attack config: " + m); };
  if (!(bound >= 0.0) || !std::isfinite(bound)) fail("bound must be finite and >= 0");
  if (steps < 1) fail("steps must be >= 1");
  if (cg_iterations < 1) fail("cg_iterations must be >= 1");
  if (lambda_rounds < 1) fail("lambda_rounds must be >= 1");
  if (bisection_iterations < 1) fail("bisection_iterations must be >= 1");
  if (!(jacobian_step > 0.0)) fail("jacobian_step must be > 0");
  if (!(direction_step > 0.0)) fail("direction_step must be > 0");
  if (!(overshoot > 0.0)) fail("overshoot must be > 0");
  if (step_size && !(*step_size > 0.0)) fail("step_size must be > 0");
  if (!(initial_lambda > 0.0)) fail("initial_lambda must be > 0");
  if (!(init_noise >= 0.0)) fail("init_noise must be >= 0");
  if (!(margin_cap > 0.0)) fail("margin_cap must be > 0");
}

Var attack_objective(const AttackConfig& config, const Var& logits, std::size_t label) {
  const Var loss = attack_loss(config.loss, logits, label);
  if (config.loss != LossKind::kMargin || std::isinf(config.margin_cap)) return loss;
  // min(m, k) = k - relu(k - m)
  return add_scalar(scale(relu(add_scalar(scale(loss, -1.0), config.margin_cap)), -1.0), config.margin_cap);
}

double PgdConfig::effective_step() const { return step_size.value_or(bound * 2.5 / static_cast<double>(steps)); }

namespace {

void clamp_unit(Tensor& t) {
  for (auto& v : t.data()) v = std::clamp(v, 0.0, 1.0);
}

Tensor noisy_start(const Tensor& x, double sigma, Rng& rng) {
  Tensor out = x;
  for (auto& v : out.data()) v += sigma * rng.normal();
  return out;
}

Tensor segment_point(const Tensor& x, const Tensor& delta, double alpha) {
  Tensor p = x;
  axpy(alpha, delta, p);
  return p;
}

}  // namespace

// ---------------------------------------------------------------------------
// Projections

ProjectionResult project_bisection(const DistanceToReference& d, const Tensor& x_adv, const Tensor& x, double bound,
                                   std::size_t iterations) {
  require_same_shape(x_adv, x, "project_bisection");
  ProjectionResult res;
  const Tensor delta = x_adv - x;
  res.was_inside = d.value(x_adv) <= bound;
  double lo = 0.0, hi = 1.0;
  for (std::size_t i = 0; i < iterations; ++i) {
    const double mid = 0.5 * (lo + hi);
    if (d.value(segment_point(x, delta, mid)) > bound) {
      hi = mid;
    } else {
      lo = mid;
    }
  }
  res.iterations = iterations;
  res.point = res.was_inside ? x_adv : segment_point(x, delta, lo);
  return res;
}

ProjectionResult project_newton(const DistanceToReference& d, const Tensor& x_adv, const Tensor& x, double bound,
                                double overshoot, std::size_t bisection_fallback_iterations) {
  require_same_shape(x_adv, x, "project_newton");
  ProjectionResult res;
  Tensor p = x_adv;
  Tensor grad;
  for (std::size_t i = 0; i < kNewtonIterationCap; ++i) {
    const double r = d.value_and_grad(p, grad) - bound;
    if (r <= 0.0) {
      res.was_inside = (i == 0);
      res.iterations = i;
      res.point = std::move(p);
      return res;
    }
    const double gn2 = dot(grad, grad);
    if (std::sqrt(gn2) < kNewtonStallNorm) break;
    axpy(-(r + overshoot) / gn2, grad, p);
  }
  ProjectionResult fb = project_bisection(d, x_adv, x, bound, bisection_fallback_iterations);
  fb.fell_back = true;
  return fb;
}

namespace {

ProjectionResult project(const AttackConfig& cfg, const DistanceToReference& d, const Tensor& x_adv, const Tensor& x) {
  return cfg.projection == ProjectionMethod::kNewton
             ? project_newton(d, x_adv, x, cfg.bound, cfg.overshoot, cfg.bisection_iterations)
             : project_bisection(d, x_adv, x, cfg.bound, cfg.bisection_iterations);
}

}  // namespace

// ---------------------------------------------------------------------------
// PPGD

JacobianGramOperator::JacobianGramOperator(const FeatureMap& phi, Tape& tape, Var input, Var embedding, double step,
                                           PassCounter* counter)
    : phi_(phi), tape_(tape), input_(input), embedding_(embedding), step_(step), counter_(counter) {
  if (!(step > 0.0)) throw std::invalid_argument("JacobianGramOperator: step must be positive");
}

Tensor JacobianGramOperator::operator()(const Tensor& v) const {
  Tensor probe = input_.value();
  axpy(step_, v, probe);
  Tensor jv = phi_.embed(probe, counter_) - embedding_.value();
  jv = (1.0 / step_) * jv;
  // grad_u [phi(x + u)^T Jv] at u = 0 is a vector-Jacobian product with seed Jv.
  return tape_.backward(embedding_, jv).wrt(input_);
}

Tensor multiply_jacobian(const FeatureMap& phi, const Tensor& at, const Tensor& v, double step, PassCounter* counter) {
  Tape tape;
  const Var xv = tape.variable(at);
  const Var emb = phi.embed(tape, xv, counter);
  return JacobianGramOperator(phi, tape, xv, emb, step, counter)(v);
}

FirstOrderStep ppgd_first_order_step(const FeatureMap& phi, const JacobianGramOperator& gram, const Tensor& at,
                                     const Tensor& grad, double eta, std::size_t cg_iterations, double fd_step,
                                     PassCounter* counter) {
  FirstOrderStep step;
  step.cg = conjugate_gradient(std::cref(gram), grad, cg_iterations);
  const Tensor& delta = step.cg.solution;
  Tensor probe = at;
  axpy(fd_step, delta, probe);
  step.jacobian_norm = norm2(phi.embed(probe, counter) - gram.embedding()) / fd_step;
  if (step.jacobian_norm < 1e-12 || eta == 0.0) {
    step.degenerate = step.jacobian_norm < 1e-12;
    step.delta = Tensor(at.shape());
    return step;
  }
  step.delta = (eta / step.jacobian_norm) * delta;
  return step;
}

FirstOrderStep ppgd_first_order_step(const ClassifierModel& model, const FeatureMap& phi, const Tensor& at,
                                     std::size_t label, double eta, const AttackConfig& config, PassCounter* counter) {
  Tape tape;
  const Var xv = tape.variable(at);
  const auto trace = model.forward(tape, xv, counter);
  const Var loss = attack_objective(config, trace.logits, label);
  const Tensor grad = tape.backward(loss).wrt(xv);
  const Var emb = phi.embed(tape, xv, counter);
  const JacobianGramOperator gram(phi, tape, xv, emb, config.jacobian_step, counter);
  return ppgd_first_order_step(phi, gram, at, grad, eta, config.cg_iterations, config.jacobian_step, counter);
}

namespace {

struct Bounding {
  const ClassifierModel& model;
  const LpipsFeatureMap phi;
  bool self;
};

AttackResult run_ppgd(const Bounding& b, const Tensor& x, std::size_t label, const AttackConfig& cfg) {
  cfg.validate();
  AttackResult res;
  PassCounter* c = &res.passes;
  Rng rng(cfg.seed);
  const double eta = cfg.ppgd_step_size();

  const LpipsBall ball = LpipsBall::around(b.phi, x, c);
  Tensor xt = noisy_start(x, cfg.init_noise, rng);
  if (cfg.clamp) clamp_unit(xt);

  for (std::size_t t = 0; t < cfg.steps; ++t) {
    Tape tape;
    const Var xv = tape.variable(xt);
    const auto trace = b.model.forward(tape, xv, c);
    const Var loss = attack_objective(cfg, trace.logits, label);
    const Var emb = b.self ? LpipsFeatureMap::embed_features(trace.features) : b.phi.embed(tape, xv, c);
    const Tensor grad = tape.backward(loss).wrt(xv);

    const JacobianGramOperator gram(b.phi, tape, xv, emb, cfg.jacobian_step, c);
    const FirstOrderStep step =
        ppgd_first_order_step(b.phi, gram, xt, grad, eta, cfg.cg_iterations, cfg.jacobian_step, c);
    if (step.degenerate) ++res.degenerate_steps;
    xt = xt + step.delta;
    if (cfg.clamp) clamp_unit(xt);
    xt = project(cfg, ball, xt, x).point;
  }
  res.adversarial = std::move(xt);
  return res;
}

// Gradient of L(f(x~), y) - lambda * max(0, d(x~, x) - bound) at x~, with
// lambda chosen after the distance of this forward pass is known.
struct LagrangianEval {
  Tensor grad;
  Tensor embedding;
  double distance = 0.0;
};

LagrangianEval lagrangian_gradient(const Bounding& b, const Tensor& xt, std::size_t label, const Tensor& reference,
                                   const AttackConfig& cfg, const std::function<double(double)>& choose_lambda,
                                   PassCounter* c) {
  Tape tape;
  const Var xv = tape.variable(xt);
  const auto trace = b.model.forward(tape, xv, c);
  const Var emb = b.self ? LpipsFeatureMap::embed_features(trace.features) : b.phi.embed(tape, xv, c);
  const Var dist = embedding_distance(emb, reference);
  const double lambda = choose_lambda(dist.value().item());
  const Var penalty = relu(add_scalar(dist, -cfg.bound));
  const Var objective = sub(attack_objective(cfg, trace.logits, label), scale(penalty, lambda));
  LagrangianEval ev;
  ev.grad = tape.backward(objective).wrt(xv);
  ev.embedding = emb.value();
  ev.distance = dist.value().item();
  return ev;
}

// Moves x~ by approximately `eta` in LPIPS distance along the normalized
// gradient. One forward pass for the directional-derivative probe.
void lpips_normalized_step(const Bounding& b, Tensor& xt, const LagrangianEval& ev, double eta,
                           const AttackConfig& cfg, AttackResult& res) {
  const double gn = norm2(ev.grad);
  const Tensor dir = gn > 0.0 ? (1.0 / gn) * ev.grad : Tensor(xt.shape());
  Tensor probe = xt;
  axpy(cfg.direction_step, dir, probe);
  const double m = norm2(b.phi.embed(probe, &res.passes) - ev.embedding) / cfg.direction_step;
  if (m < 1e-12) {
    ++res.degenerate_steps;
    return;
  }
  axpy(eta / m, dir, xt);
  if (cfg.clamp) clamp_unit(xt);
}

double decayed_step(double bound, std::size_t t, std::size_t steps) {
  return bound * std::pow(0.1, static_cast<double>(t) / static_cast<double>(steps));
}

AttackResult run_lpa(const Bounding& b, const Tensor& x, std::size_t label, const AttackConfig& cfg) {
  cfg.validate();
  AttackResult res;
  PassCounter* c = &res.passes;
  Rng rng(cfg.seed);

  const Tensor reference = b.phi.embed(x, c);
  Tensor xt = noisy_start(x, cfg.init_noise, rng);
  if (cfg.clamp) clamp_unit(xt);
  double lambda = cfg.initial_lambda;

  for (std::size_t round = 0; round < cfg.lambda_rounds; ++round) {
    for (std::size_t t = 1; t <= cfg.steps; ++t) {
      // The first forward pass of a round sees the iterate the previous round
      // ended on; lambda grows tenfold if that iterate is outside the bound.
      auto choose = [&](double d) {
        if (t == 1 && round > 0 && d > cfg.bound) lambda *= 10.0;
        return lambda;
      };
      const LagrangianEval ev = lagrangian_gradient(b, xt, label, reference, cfg, choose, c);
      if (t == 1) res.lambda_history.push_back(lambda);
      lpips_normalized_step(b, xt, ev, decayed_step(cfg.bound, t, cfg.steps), cfg, res);
    }
  }
  const LpipsBall ball(b.phi, reference, c);
  res.adversarial = project(cfg, ball, xt, x).point;
  return res;
}

AttackResult run_fast_lpa(const Bounding& b, const Tensor& x, std::size_t label, const AttackConfig& cfg) {
  cfg.validate();
  AttackResult res;
  PassCounter* c = &res.passes;
  Rng rng(cfg.seed);

  const Tensor reference = b.phi.embed(x, c);
  Tensor xt = noisy_start(x, cfg.init_noise, rng);
  if (cfg.clamp) clamp_unit(xt);

  for (std::size_t t = 1; t <= cfg.steps; ++t) {
    const double lambda = std::pow(10.0, static_cast<double>(t) / static_cast<double>(cfg.steps));
    res.lambda_history.push_back(lambda);
    const LagrangianEval ev = lagrangian_gradient(b, xt, label, reference, cfg, [&](double) { return lambda; }, c);
    lpips_normalized_step(b, xt, ev, decayed_step(cfg.bound, t, cfg.steps), cfg, res);
  }
  res.adversarial = std::move(xt);
  return res;
}

void require_mode(const AttackConfig& cfg, BoundMode mode, const char* attack) {
  if (cfg.bound_mode != mode) {
    throw std::invalid_argument(std::string(attack) + ": config bound mode does not match the networks supplied");
  }
}

}  // namespace

void score_result(const ClassifierModel& model, const ClassifierModel& lpips_network, const Tensor& x,
                  std::size_t label, AttackResult& result) {
  result.margin = margin_loss(forward_logits(model, result.adversarial), label);
  result.success = result.margin > 0.0;
  result.distance = lpips_network.spec().feature_layers.empty()
                        ? std::numeric_limits<double>::quiet_NaN()
                        : lpips_distance(lpips_network, result.adversarial, x);
}

#define NPTM_DEFINE_PERCEPTUAL_ATTACK(name, runner)                                                            \
  AttackResult name(const ClassifierModel& model, const Tensor& x, std::size_t label, const AttackConfig& cfg) { \
    require_mode(cfg, BoundMode::kSelf, #name);                                                                 \
    AttackResult r = runner(Bounding{model, LpipsFeatureMap(model), true}, x, label, cfg);                      \
    score_result(model, model, x, label, r);                                                                    \
    return r;                                                                                                   \
  }                                                                                                             \
  AttackResult name(const ClassifierModel& model, const ClassifierModel& lpips_network, const Tensor& x,        \
                    std::size_t label, const AttackConfig& cfg) {                                               \
    if (&model == &lpips_network) return name(model, x, label, cfg);                                            \
    require_mode(cfg, BoundMode::kExternal, #name);                                                             \
    AttackResult r = runner(Bounding{model, LpipsFeatureMap(lpips_network), false}, x, label, cfg);             \
    score_result(model, lpips_network, x, label, r);                                                            \
    return r;                                                                                                   \
  }

NPTM_DEFINE_PERCEPTUAL_ATTACK(ppgd, run_ppgd)
NPTM_DEFINE_PERCEPTUAL_ATTACK(lpa, run_lpa)
NPTM_DEFINE_PERCEPTUAL_ATTACK(fast_lpa, run_fast_lpa)

#undef NPTM_DEFINE_PERCEPTUAL_ATTACK

// ---------------------------------------------------------------------------
// Lp baselines

namespace {

enum class Norm { kL2, kLinf };

AttackResult run_pgd(const ClassifierModel& model, const Tensor& x, std::size_t label, const PgdConfig& cfg, Norm norm) {
  if (!(cfg.bound >= 0.0)) throw std::invalid_argument("pgd: bound must be >= 0");
  if (cfg.steps < 1) throw std::invalid_argument("pgd: steps must be >= 1");
  AttackResult res;
  const double alpha = cfg.effective_step();
  Tensor xt = x;
  for (std::size_t t = 0; t < cfg.steps; ++t) {
    Tape tape;
    const Var xv = tape.variable(xt);
    const auto trace = model.forward(tape, xv, &res.passes);
    const Tensor grad = tape.backward(attack_loss(cfg.loss, trace.logits, label)).wrt(xv);
    Tensor delta = xt - x;
    if (norm == Norm::kL2) {
      const double gn = norm2(grad);
      if (gn > 0.0) axpy(alpha / gn, grad, delta);
      const double dn = norm2(delta);
      if (dn > cfg.bound) delta = (dn > 0.0 ? cfg.bound / dn : 0.0) * delta;
    } else {
      for (std::size_t i = 0; i < delta.size(); ++i) {
        const double s = grad[i] > 0.0 ? 1.0 : (grad[i] < 0.0 ? -1.0 : 0.0);
        delta[i] = std::clamp(delta[i] + alpha * s, -cfg.bound, cfg.bound);
      }
    }
    xt = x + delta;
    if (cfg.clamp) clamp_unit(xt);
  }
  res.adversarial = std::move(xt);
  return res;
}

}  // namespace

AttackResult pgd_l2(const ClassifierModel& model, const Tensor& x, std::size_t label, const PgdConfig& config) {
  AttackResult r = run_pgd(model, x, label, config, Norm::kL2);
  score_result(model, model, x, label, r);
  return r;
}

AttackResult pgd_linf(const ClassifierModel& model, const Tensor& x, std::size_t label, const PgdConfig& config) {
  AttackResult r = run_pgd(model, x, label, config, Norm::kLinf);
  score_result(model, model, x, label, r);
  return r;
}

}  // namespace nptm
