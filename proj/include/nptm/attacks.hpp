#pragma once

// Perceptual attacks (PPGD, LPA, Fast-LPA), the two projections onto the
// LPIPS ball, and L2 / Linf PGD baselines.
//
// Every attack reports the network passes it performed in AttackResult::passes.
// Passes spent afterwards to score the result (final margin and distance) are
// not included.

#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "nptm/autodiff.hpp"
#include "nptm/lpips.hpp"
#include "nptm/model.hpp"
#include "nptm/numerics.hpp"
#include "nptm/tensor.hpp"

namespace nptm {

enum class BoundMode { kSelf, kExternal };
enum class ProjectionMethod { kBisection, kNewton };

struct AttackConfig {
  double bound = 0.5;                   // LPIPS radius epsilon
  std::size_t steps = 10;               // T
  std::size_t cg_iterations = 5;        // K
  std::size_t lambda_rounds = 5;        // S
  double jacobian_step = 1e-3;          // finite-difference step for J v (PPGD)
  double direction_step = 0.1;          // finite-difference step for the LPA step normalization
  double overshoot = 1e-2;              // Newton projection overshoot s
  std::size_t bisection_iterations = 10;  // n
  std::optional<double> step_size;      // PPGD eta; bound / 4 when unset
  double initial_lambda = 0.01;
  double init_noise = 0.01;
  BoundMode bound_mode = BoundMode::kSelf;
  ProjectionMethod projection = ProjectionMethod::kBisection;
  bool clamp = false;                   // clamp iterates to [0, 1]
  LossKind loss = LossKind::kMargin;
  // Margin objective capped at kappa: min(margin, kappa). Infinite means uncapped.
  double margin_cap = std::numeric_limits<double>::infinity();
  std::uint64_t seed = 0;

  void validate() const;
  double ppgd_step_size() const { return step_size.value_or(bound / 4.0); }
};

struct AttackResult {
  Tensor adversarial;
  double distance = 0.0;  // LPIPS distance to the natural input under the bounding network (NaN if it has no features)
  double margin = 0.0;
  bool success = false;   // margin > 0
  PassCounter passes;
  std::vector<double> lambda_history;  // lambda in effect for each LPA round / Fast-LPA step
  std::size_t degenerate_steps = 0;    // steps skipped because the direction or its length vanished
};

// ---------------------------------------------------------------------------
// Projections onto {p : d(p, x) <= bound}.

struct ProjectionResult {
  Tensor point;
  bool was_inside = false;
  bool fell_back = false;  // Newton stalled or hit its cap and bisection took over
  std::size_t iterations = 0;
};

inline constexpr std::size_t kNewtonIterationCap = 50;
inline constexpr double kNewtonStallNorm = 1e-12;

// Always evaluates d at the input and at n midpoints, so its cost does not
// depend on the data. Returns the input unchanged when it is already inside;
// otherwise the lower end of the final bracket x + alpha (x_adv - x).
ProjectionResult project_bisection(const DistanceToReference& d, const Tensor& x_adv, const Tensor& x, double bound,
                                   std::size_t iterations);

// Generalized Newton-Raphson on r(p) = d(p, x) - bound with overshoot s:
// p <- p - grad r (r + s) / ||grad r||^2, until r <= 0.
ProjectionResult project_newton(const DistanceToReference& d, const Tensor& x_adv, const Tensor& x, double bound,
                                double overshoot, std::size_t bisection_fallback_iterations);

// ---------------------------------------------------------------------------
// PPGD building blocks.

// J^T J v for the Jacobian J of phi at a point whose forward pass is recorded
// on `tape` (input variable `input`, embedding node `embedding`). Each
// application costs one forward pass of phi and one reverse sweep.
class JacobianGramOperator {
 public:
  JacobianGramOperator(const FeatureMap& phi, Tape& tape, Var input, Var embedding, double step,
                       PassCounter* counter);
  Tensor operator()(const Tensor& v) const;
  const Tensor& embedding() const { return embedding_.value(); }

 private:
  const FeatureMap& phi_;
  Tape& tape_;
  Var input_;
  Var embedding_;
  double step_;
  PassCounter* counter_;
};

// Standalone J^T J v at `at` (records its own tape: one extra forward pass).
Tensor multiply_jacobian(const FeatureMap& phi, const Tensor& at, const Tensor& v, double step,
                         PassCounter* counter = nullptr);

struct FirstOrderStep {
  Tensor delta;
  double jacobian_norm = 0.0;  // m, finite-difference estimate of ||J delta_K||
  bool degenerate = false;
  CgResult cg;
};

// Solves J^T J delta = grad with K CG iterations and rescales the solution so
// ||J delta|| = eta to first order.
FirstOrderStep ppgd_first_order_step(const FeatureMap& phi, const JacobianGramOperator& gram, const Tensor& at,
                                     const Tensor& grad, double eta, std::size_t cg_iterations, double fd_step,
                                     PassCounter* counter);

// Model-level convenience: gradient of the attack loss plus the step above.
FirstOrderStep ppgd_first_order_step(const ClassifierModel& model, const FeatureMap& phi, const Tensor& at,
                                     std::size_t label, double eta, const AttackConfig& config,
                                     PassCounter* counter = nullptr);

// ---------------------------------------------------------------------------
// Attacks. The single-model overloads are self-bounded (the classifier is its
// own LPIPS network); the others use `lpips_network` as an external bound.

AttackResult ppgd(const ClassifierModel& model, const Tensor& x, std::size_t label, const AttackConfig& config);
AttackResult ppgd(const ClassifierModel& model, const ClassifierModel& lpips_network, const Tensor& x,
                  std::size_t label, const AttackConfig& config);

AttackResult lpa(const ClassifierModel& model, const Tensor& x, std::size_t label, const AttackConfig& config);
AttackResult lpa(const ClassifierModel& model, const ClassifierModel& lpips_network, const Tensor& x,
                 std::size_t label, const AttackConfig& config);

AttackResult fast_lpa(const ClassifierModel& model, const Tensor& x, std::size_t label, const AttackConfig& config);
AttackResult fast_lpa(const ClassifierModel& model, const ClassifierModel& lpips_network, const Tensor& x,
                      std::size_t label, const AttackConfig& config);

struct PgdConfig {
  double bound = 0.0;
  std::size_t steps = 10;
  std::optional<double> step_size;  // bound * 2.5 / steps when unset
  bool clamp = false;
  LossKind loss = LossKind::kMargin;

  double effective_step() const;
};

AttackResult pgd_l2(const ClassifierModel& model, const Tensor& x, std::size_t label, const PgdConfig& config);
AttackResult pgd_linf(const ClassifierModel& model, const Tensor& x, std::size_t label, const PgdConfig& config);

// attack_loss with AttackConfig::margin_cap applied to the margin objective.
Var attack_objective(const AttackConfig& config, const Var& logits, std::size_t label);

// Scores `adversarial` against the classifier and the LPIPS network without
// touching any pass counter.
void score_result(const ClassifierModel& model, const ClassifierModel& lpips_network, const Tensor& x,
                  std::size_t label, AttackResult& result);

}  // namespace nptm
