#pragma once

// Standard training, perceptual adversarial training with Fast-LPA as the
// inner maximizer, and PGD adversarial training baselines.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "nptm/attacks.hpp"
#include "nptm/dataset.hpp"
#include "nptm/model.hpp"

namespace nptm {

enum class Baseline { kNone, kPgdL2, kPgdLinf };

struct TrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  double learning_rate = 0.05;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::vector<std::size_t> lr_drop_epochs{15};  // 0-based epoch indices
  double lr_drop_factor = 0.1;
  double bound = 0.5;               // PAT perceptual bound
  std::size_t attack_steps = 10;    // inner Fast-LPA / PGD iterations
  BoundMode bound_mode = BoundMode::kSelf;
  bool attack_correct_only = false;
  Baseline baseline = Baseline::kNone;
  double baseline_bound = 0.0;
  bool clamp = true;                // keep inner-attack iterates in [0, 1]
  std::uint64_t seed = 0;

  void validate() const;
  double lr_at(std::size_t epoch) const;
};

struct EpochLog {
  std::size_t epoch = 0;
  double clean_loss = 0.0;
  double adv_loss = 0.0;
  double clean_acc = 0.0;
  std::size_t attacked_count = 0;
  std::size_t examples = 0;
  double seconds = 0.0;
};

struct TrainLog {
  std::vector<EpochLog> epochs;

  static constexpr const char* kCsvHeader = "epoch,clean_loss,adv_loss,clean_acc,attacked_count,seconds";
  // `with_time` false writes 0 in the seconds column so logs compare byte for byte.
  std::string to_csv(bool with_time = true) const;
};

struct SgdState {
  std::vector<Tensor> velocity;
};

// v <- momentum v + g + weight_decay p; p <- p - lr v.
void sgd_momentum_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, SgdState& state, double lr,
                       double momentum, double weight_decay);

struct TrainObserver {
  // Called before each inner attack with the network being attacked and the
  // one defining the distance (null for PGD).
  std::function<void(const ClassifierModel& attacked, const ClassifierModel* lpips_network)> on_attack;
  // Called after every optimizer step.
  std::function<void(std::size_t epoch, std::size_t step, const ClassifierModel& model)> on_step;
};

struct TrainResult {
  ClassifierModel model;
  TrainLog log;
};

TrainResult standard_train(ClassifierModel model, const Dataset& data, const TrainConfig& config,
                           const TrainObserver* observer = nullptr);

// `lpips_network` is required for BoundMode::kExternal and ignored otherwise.
TrainResult pat_train(ClassifierModel model, const Dataset& data, const TrainConfig& config,
                      const ClassifierModel* lpips_network = nullptr, const TrainObserver* observer = nullptr);

// Uses config.baseline and config.baseline_bound.
TrainResult adv_train(ClassifierModel model, const Dataset& data, const TrainConfig& config,
                      const TrainObserver* observer = nullptr);

// Per-example seed for the inner attack, independent of the shuffle stream.
std::uint64_t attack_seed(std::uint64_t seed, std::size_t epoch, std::size_t index);

}  // namespace nptm
