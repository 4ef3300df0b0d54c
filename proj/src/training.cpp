#include "nptm/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <stdexcept>

#include "nptm/rng.hpp"

namespace nptm {

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("train config: " + m); };
  if (epochs < 1) fail("epochs must be >= 1");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) fail("learning_rate must be > 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) fail("momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) fail("weight_decay must be >= 0");
  if (!(lr_drop_factor > 0.0)) fail("lr_drop_factor must be > 0");
  if (!(bound >= 0.0) || !std::isfinite(bound)) fail("bound must be finite and >= 0");
  if (!(baseline_bound >= 0.0) || !std::isfinite(baseline_bound)) fail("baseline_bound must be finite and >= 0");
  if (attack_steps < 1) fail("attack_steps must be >= 1");
}

double TrainConfig::lr_at(std::size_t epoch) const {
  double lr = learning_rate;
  for (std::size_t e : lr_drop_epochs) {
    if (e <= epoch) lr *= lr_drop_factor;
  }
  return lr;
}

std::string TrainLog::to_csv(bool with_time) const {
  std::ostringstream os;
  os << kCsvHeader << '\n';
  char line[256];
  for (const auto& e : epochs) {
    std::snprintf(line, sizeof line, "%zu,%.9g,%.9g,%.9g,%zu,%.3f\n", e.epoch, e.clean_loss, e.adv_loss, e.clean_acc,
                  e.attacked_count, with_time ? e.seconds : 0.0);
    os << line;
  }
  return os.str();
}

void sgd_momentum_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, SgdState& state, double lr,
                       double momentum, double weight_decay) {
  if (grads.size() != params.size()) throw ShapeError("sgd: parameter and gradient counts differ");
  if (state.velocity.empty()) {
    for (const auto& p : params) state.velocity.emplace_back(p.shape());
  }
  if (state.velocity.size() != params.size()) throw ShapeError("sgd: optimizer state does not match parameters");
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& p = params[k];
    Tensor& v = state.velocity[k];
    const Tensor& g = grads[k];
    if (g.shape() != p.shape() || v.shape() != p.shape()) throw ShapeError("sgd: shape mismatch in parameter " + std::to_string(k));
    for (std::size_t i = 0; i < p.size(); ++i) {
      v[i] = momentum * v[i] + g[i] + weight_decay * p[i];
      p[i] -= lr * v[i];
    }
  }
}

std::uint64_t attack_seed(std::uint64_t seed, std::size_t epoch, std::size_t index) {
  std::uint64_t h = seed * 0x9E3779B97F4A7C15ULL + 0xA77AC4ULL;
  h ^= (static_cast<std::uint64_t>(epoch) + 1) * 0xBF58476D1CE4E5B9ULL;
  h ^= (static_cast<std::uint64_t>(index) + 1) * 0x94D049BB133111EBULL;
  h ^= h >> 31;
  return h;
}

namespace {

// Returns the input to train on, or nothing to train on the clean example.
using InnerMax = std::function<std::optional<Tensor>(const ClassifierModel& model, const Tensor& x, std::size_t y,
                                                     std::uint64_t seed)>;

void check_data(const ClassifierModel& model, const Dataset& data) {
  data.validate();
  if (data.size() == 0) throw std::invalid_argument("training: empty dataset");
  if (data.example_shape() != model.spec().input_shape) {
    throw ShapeError("training: dataset example shape " + shape_string(data.example_shape()) +
                     " does not match model input " + shape_string(model.spec().input_shape));
  }
  if (data.classes != model.spec().classes) throw std::invalid_argument("training: class count mismatch");
}

TrainResult train_loop(ClassifierModel model, const Dataset& data, const TrainConfig& config, const InnerMax& inner,
                       const TrainObserver* observer) {
  config.validate();
  check_data(model, data);
  Rng shuffle(config.seed);
  SgdState state;
  TrainLog log;
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);
    const double lr = config.lr_at(epoch);
    EpochLog entry;
    entry.epoch = epoch;
    double clean_sum = 0.0, adv_sum = 0.0;
    std::size_t correct = 0;

    for (std::size_t b = 0; b < order.size(); b += config.batch_size) {
      const std::size_t end = std::min(order.size(), b + config.batch_size);
      std::vector<Tensor> grads;
      for (const auto& p : model.parameters()) grads.emplace_back(p.shape());

      for (std::size_t j = b; j < end; ++j) {
        const std::size_t index = order[j];
        const Tensor x = data.example(index);
        const std::size_t y = data.labels[index];

        const auto fail = [&] {
          return std::runtime_error("training: non-finite loss at epoch " + std::to_string(epoch) + ", example " +
                                    std::to_string(index) + " (lr " + std::to_string(lr) + ")");
        };
        std::optional<Tensor> adv;
        double clean_loss = 0.0;
        bool clean_correct = false;
        try {
          // Clean statistics come from a graph-free pass unless the clean input
          // is also the training input.
          if (inner) {
            const Tensor z = forward_logits(model, x);
            clean_loss = cross_entropy_loss(z, y);
            clean_correct = argmax(z) == y;
            if (!config.attack_correct_only || clean_correct) {
              adv = inner(model, x, y, attack_seed(config.seed, epoch, index));
              if (adv) ++entry.attacked_count;
            }
          }

          Tape tape;
          std::vector<Var> params;
          for (const auto& p : model.parameters()) params.push_back(tape.variable(p));
          const auto trace = model.forward(tape, tape.variable(adv ? *adv : x), nullptr, &params);
          const Var loss = cross_entropy_loss(trace.logits, y);
          const double value = loss.value().item();
          if (!std::isfinite(value)) throw fail();
          if (!inner) {
            clean_loss = value;
            clean_correct = argmax(trace.logits.value()) == y;
          }
          clean_sum += clean_loss;
          adv_sum += value;
          correct += clean_correct ? 1 : 0;

          const auto g = tape.backward(loss);
          for (std::size_t k = 0; k < params.size(); ++k) axpy(1.0, g.wrt(params[k]), grads[k]);
        } catch (const NumericError&) {
          throw fail();
        }
      }

      const double scale = 1.0 / static_cast<double>(end - b);
      for (auto& g : grads)
        for (auto& v : g.data()) v *= scale;
      sgd_momentum_step(model.mutable_parameters(), grads, state, lr, config.momentum, config.weight_decay);
      if (observer && observer->on_step) observer->on_step(epoch, step, model);
      ++step;
    }

    const double n = static_cast<double>(order.size());
    entry.examples = order.size();
    entry.clean_loss = clean_sum / n;
    entry.adv_loss = adv_sum / n;
    entry.clean_acc = static_cast<double>(correct) / n;
    entry.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    log.epochs.push_back(entry);
  }
  return {std::move(model), std::move(log)};
}

}  // namespace

TrainResult standard_train(ClassifierModel model, const Dataset& data, const TrainConfig& config,
                           const TrainObserver* observer) {
  return train_loop(std::move(model), data, config, nullptr, observer);
}

TrainResult pat_train(ClassifierModel model, const Dataset& data, const TrainConfig& config,
                      const ClassifierModel* lpips_network, const TrainObserver* observer) {
  if (config.bound == 0.0) return train_loop(std::move(model), data, config, nullptr, observer);
  const bool self = config.bound_mode == BoundMode::kSelf;
  if (!self && lpips_network == nullptr) throw std::invalid_argument("pat_train: external bound needs an LPIPS network");
  AttackConfig attack;
  attack.bound = config.bound;
  attack.steps = config.attack_steps;
  attack.loss = LossKind::kCrossEntropy;
  attack.clamp = config.clamp;
  attack.bound_mode = config.bound_mode;
  attack.validate();
  InnerMax inner = [=](const ClassifierModel& m, const Tensor& x, std::size_t y, std::uint64_t seed) {
    AttackConfig c = attack;
    c.seed = seed;
    // Self-bounded: the network being trained is the distance network, by identity.
    const ClassifierModel& bounding = self ? m : *lpips_network;
    if (observer && observer->on_attack) observer->on_attack(m, &bounding);
    return std::optional<Tensor>(self ? fast_lpa(m, x, y, c).adversarial : fast_lpa(m, bounding, x, y, c).adversarial);
  };
  return train_loop(std::move(model), data, config, inner, observer);
}

TrainResult adv_train(ClassifierModel model, const Dataset& data, const TrainConfig& config,
                      const TrainObserver* observer) {
  if (config.baseline == Baseline::kNone) throw std::invalid_argument("adv_train: no baseline attack configured");
  if (config.baseline_bound == 0.0) return train_loop(std::move(model), data, config, nullptr, observer);
  PgdConfig pgd;
  pgd.bound = config.baseline_bound;
  pgd.steps = config.attack_steps;
  pgd.loss = LossKind::kCrossEntropy;
  pgd.clamp = config.clamp;
  const Baseline kind = config.baseline;
  InnerMax inner = [=](const ClassifierModel& m, const Tensor& x, std::size_t y, std::uint64_t) {
    if (observer && observer->on_attack) observer->on_attack(m, nullptr);
    return std::optional<Tensor>(kind == Baseline::kPgdL2 ? pgd_l2(m, x, y, pgd).adversarial
                                                          : pgd_linf(m, x, y, pgd).adversarial);
  };
  return train_loop(std::move(model), data, config, inner, observer);
}

}  // namespace nptm
