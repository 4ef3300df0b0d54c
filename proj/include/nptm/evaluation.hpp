#pragma once

// Robust-accuracy evaluation, union / unseen-mean metrics, distance
// statistics, PGD bound calibration and the gradient check routine.

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "nptm/attacks.hpp"
#include "nptm/dataset.hpp"
#include "nptm/model.hpp"

namespace nptm {

// A registered attack with its configuration. Names: none, pgd_l2, pgd_linf,
// ppgd, lpa, fast_lpa.
struct AttackSpec {
  std::string name = "none";
  double bound = 0.0;
  AttackConfig perceptual;  // ppgd / lpa / fast_lpa (bound taken from `bound`)
  PgdConfig pgd;            // pgd_l2 / pgd_linf (bound taken from `bound`)
  std::uint64_t seed = 0;

  std::string label() const;  // e.g. "lpa@0.5"
};

const std::vector<std::string>& registered_attacks();
bool is_perceptual(const std::string& name);

// Runs one attack on one example. `lpips_network` null means self-bounded.
AttackResult run_attack(const AttackSpec& spec, const ClassifierModel& model, const ClassifierModel* lpips_network,
                        const Tensor& x, std::size_t label, std::uint64_t seed);

struct AccuracyResult {
  std::string attack;
  double accuracy = 0.0;
  // Post-attack correctness; initially misclassified examples count as broken.
  std::vector<bool> correct;
  std::vector<double> l2, linf, lpips;  // distance of each adversarial example
  std::vector<Tensor> adversarial;      // kept only when requested
};

// Distances are measured with `distance_network` (LPIPS) when given, else with
// the bounding network, else with the model.
AccuracyResult evaluate_accuracy(const ClassifierModel& model, const Dataset& data, const AttackSpec& spec,
                                 const ClassifierModel* lpips_network = nullptr,
                                 const ClassifierModel* distance_network = nullptr, bool keep_examples = false);

// Fraction correct under every attack at once. With no attacks, returns
// `clean_accuracy`.
double union_accuracy(const std::vector<std::vector<bool>>& correct, double clean_accuracy);

// Mean accuracy over the attacks not in `trained_against`.
double unseen_mean_accuracy(const std::map<std::string, double>& accuracies,
                            const std::set<std::string>& trained_against);

struct DistanceStats {
  double mean = 0.0, median = 0.0, p5 = 0.0, p95 = 0.0;
};
// Linear interpolation between order statistics.
DistanceStats summarize(std::vector<double> values);
double coefficient_of_variation(const std::vector<double>& values);

struct DistanceDistribution {
  std::string attack;
  DistanceStats l2, linf, lpips;
};
// Perceptual attacks are bounded by `extractor`, and every LPIPS distance is
// measured with it.
std::vector<DistanceDistribution> measure_distance_distributions(const ClassifierModel& model,
                                                                 const ClassifierModel& extractor,
                                                                 const Dataset& data,
                                                                 const std::vector<AttackSpec>& attacks);
inline constexpr const char* kDistanceCsvHeader = "attack,metric,mean,median,p5,p95";
std::string distance_csv(const std::vector<DistanceDistribution>& rows);

inline constexpr const char* kExampleCsvHeader = "attack,index,label,correct,l2,linf,lpips";
std::string per_example_csv(const std::vector<AccuracyResult>& results, const Dataset& data);

// Desk-scale stand-in for a human-study calibration: bisects the PGD bound
// until the median LPIPS distance (under `extractor`) of PGD examples on
// `data` matches `target`.
struct Calibration {
  double bound = 0.0;
  double median_lpips = 0.0;
  std::size_t iterations = 0;
};
Calibration calibrate_pgd_bound(const ClassifierModel& model, const ClassifierModel& extractor, const Dataset& data,
                                const std::string& attack, double target, const PgdConfig& base,
                                double upper = 1.0, std::size_t iterations = 12);

struct EvalReport {
  std::map<std::string, double> accuracy;  // keyed by attack label
  double clean_accuracy = 0.0;
  double union_accuracy = 0.0;
  std::optional<double> unseen_mean_accuracy;
  std::vector<DistanceDistribution> distances;
  std::map<std::string, std::string> config;
  std::uint64_t seed = 0;

  std::string to_json() const;
};

// Reverse-mode against central differences on random TinyCNN instances:
// input and parameter gradients of cross-entropy plus a random linear
// functional of the features. Coordinates whose stencil changes the
// activation pattern are skipped.
struct GradcheckReport {
  double max_relative_error = 0.0;
  std::size_t instances = 0;
  std::size_t checked = 0;
  std::size_t skipped = 0;
};
GradcheckReport gradcheck_tiny_cnn(std::uint64_t seed, std::size_t instances, double step = 1e-5,
                                   std::size_t parameter_samples = 48);

}  // namespace nptm
