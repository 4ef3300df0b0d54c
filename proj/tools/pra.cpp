// pra: train, attack and evaluate classifiers under the perceptual threat
// model. Exit status: 0 success, 1 usage error, 2 runtime error.

#include <algorithm>
#include <cstdio>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "nptm/binary_io.hpp"
#include "nptm/config.hpp"
#include "nptm/evaluation.hpp"
#include "nptm/training.hpp"

using namespace nptm;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Options {
  std::string config, model, data, labels, attack, lpips_model, projection, out, report, trained_against;
  double bound = 0.0;
  std::size_t steps = 0, instances = 10;
  std::uint64_t seed = 0;
  CLI::Option* bound_opt = nullptr;
  CLI::Option* steps_opt = nullptr;
  CLI::Option* seed_opt = nullptr;
};

std::string number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

void emit(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
  } else {
    io::write_atomically(path, text);
  }
}

// Config file first, then command-line overrides. Overrides are echoed into
// `entries` under their config key.
RunConfig run_config(const Options& o) {
  RunConfig c = o.config.empty() ? RunConfig{} : load_config(o.config);
  if (o.seed_opt->count()) {
    c.train.seed = c.attack.seed = c.synthetic.seed = o.seed;
    c.entries["seed"] = std::to_string(o.seed);
  }
  if (o.bound_opt && o.bound_opt->count()) {
    c.train.bound = c.attack.bound = o.bound;
    c.entries["bound"] = number(o.bound);
  }
  if (o.steps_opt && o.steps_opt->count()) {
    c.attack.steps = c.train.attack_steps = o.steps;
    c.entries["steps"] = std::to_string(o.steps);
  }
  if (!o.projection.empty()) {
    c.attack.projection = o.projection == "newton" ? ProjectionMethod::kNewton : ProjectionMethod::kBisection;
    c.entries["projection"] = o.projection;
  }
  if (!o.lpips_model.empty()) {
    c.lpips_model = o.lpips_model;
    c.entries["lpips_model"] = o.lpips_model;
  }
  c.train.validate();
  c.attack.validate();
  return c;
}

// --data/--labels when given, else the synthetic split named by `split`.
Dataset dataset(const Options& o, const RunConfig& c, const std::string& split) {
  if (!o.data.empty()) {
    Dataset d = load_dataset(o.data, o.labels);
    d.validate();
    return d;
  }
  SyntheticSplits s = generate_synthetic_splits(c.synthetic, c.synthetic.per_class, c.test_per_class);
  return split == "train" ? std::move(s.train) : std::move(s.test);
}

std::optional<ClassifierModel> lpips_network(const RunConfig& c) {
  if (c.lpips_model.empty() || c.lpips_model == "self") return std::nullopt;
  return load_model(c.lpips_model);
}

// "name", "name@bound" or "name@auto" (PGD only: calibrated so the median
// LPIPS distance matches the perceptual bound).
std::vector<AttackSpec> attack_specs(const std::string& list, RunConfig& c, const ClassifierModel& model,
                                     const ClassifierModel& extractor, const Dataset& data) {
  PgdConfig pgd;
  pgd.steps = c.attack.steps;
  pgd.clamp = c.attack.clamp;
  pgd.loss = c.attack.loss;
  std::vector<AttackSpec> specs;
  for (const auto& item : split_list(list)) {
    AttackSpec s;
    const auto at = item.find('@');
    s.name = item.substr(0, at);
    const auto& names = registered_attacks();
    if (std::find(names.begin(), names.end(), s.name) == names.end()) {
      throw UsageError("unknown attack '" + s.name + "'");
    }
    s.perceptual = c.attack;
    s.pgd = pgd;
    s.seed = c.attack.seed;
    s.bound = c.attack.bound;
    const std::string bound = at == std::string::npos ? "" : item.substr(at + 1);
    if (bound == "auto") {
      if (s.name != "pgd_l2" && s.name != "pgd_linf") throw UsageError("'@auto' applies to pgd_l2 and pgd_linf only");
      const Calibration cal = calibrate_pgd_bound(model, extractor, data.head(std::min<std::size_t>(50, data.size())),
                                                  s.name, c.attack.bound, pgd, s.name == "pgd_l2" ? 4.0 : 0.5, 10);
      s.bound = cal.bound;
      c.entries["calibration." + s.name] = "median-LPIPS stand-in: bound " + number(cal.bound) + ", median " +
                                           number(cal.median_lpips) + ", target " + number(c.attack.bound);
    } else if (!bound.empty()) {
      try {
        std::size_t used = 0;
        s.bound = std::stod(bound, &used);
        if (used != bound.size()) throw std::invalid_argument(bound);
      } catch (const std::exception&) {
        throw UsageError("bad bound in '" + item + "'");
      }
    }
    specs.push_back(std::move(s));
  }
  if (specs.empty()) throw UsageError("--attack names no attacks");
  return specs;
}

int cmd_train(const Options& o) {
  RunConfig c = run_config(o);
  const Dataset data = dataset(o, c, "train");
  const Shape shape = data.example_shape();
  if (shape[1] != shape[2]) throw std::invalid_argument("train: images must be square");
  const ClassifierModel init = init_model(tiny_cnn_spec(shape[0], shape[1], data.classes), c.train.seed);

  std::string method = o.attack;
  if (method.empty()) {
    method = c.train.baseline == Baseline::kPgdL2     ? "pgd_l2"
             : c.train.baseline == Baseline::kPgdLinf ? "pgd_linf"
                                                      : "fast_lpa";
  }
  const auto run = [&]() -> TrainResult {
    if (method == "none") return standard_train(init, data, c.train);
    if (method == "fast_lpa") {
      const auto lpips = lpips_network(c);
      if (lpips) c.train.bound_mode = BoundMode::kExternal;
      return pat_train(init, data, c.train, lpips ? &*lpips : nullptr);
    }
    if (method == "pgd_l2" || method == "pgd_linf") {
      c.train.baseline = method == "pgd_l2" ? Baseline::kPgdL2 : Baseline::kPgdLinf;
      if (o.bound_opt->count()) c.train.baseline_bound = o.bound;
      return adv_train(init, data, c.train);
    }
    throw UsageError("train --attack must be none, fast_lpa, pgd_l2 or pgd_linf");
  };
  const TrainResult result = run();

  save_model(result.model, o.out);
  if (!o.report.empty()) emit(o.report, result.log.to_csv(false));
  const EpochLog& last = result.log.epochs.back();
  std::printf("trained %s for %zu epochs on %zu examples: clean loss %.6g, clean accuracy %.4f\n", method.c_str(),
              result.log.epochs.size(), data.size(), last.clean_loss, last.clean_acc);
  return 0;
}

int cmd_attack(const Options& o) {
  RunConfig c = run_config(o);
  const ClassifierModel model = load_model(o.model);
  const auto lpips = lpips_network(c);
  const ClassifierModel& extractor = lpips ? *lpips : model;
  const Dataset data = dataset(o, c, "test");
  const auto specs = attack_specs(o.attack, c, model, extractor, data);
  if (specs.size() != 1) throw UsageError("attack takes a single --attack");

  const AccuracyResult r = evaluate_accuracy(model, data, specs[0], lpips ? &*lpips : nullptr, &extractor, true);
  if (!o.out.empty()) {
    Shape shape = data.images.shape();
    std::vector<double> values;
    values.reserve(data.images.size());
    for (const auto& a : r.adversarial) values.insert(values.end(), a.data().begin(), a.data().end());
    save_tensor_archive(Tensor(shape, std::move(values)), o.out);
  }
  if (!o.report.empty()) emit(o.report, per_example_csv({r}, data));
  std::printf("%s: accuracy %.4f on %zu examples\n", specs[0].label().c_str(), r.accuracy, data.size());
  return 0;
}

int cmd_eval(const Options& o) {
  RunConfig c = run_config(o);
  const ClassifierModel model = load_model(o.model);
  const auto lpips = lpips_network(c);
  const ClassifierModel& extractor = lpips ? *lpips : model;
  const Dataset data = dataset(o, c, "test");
  const auto specs = attack_specs(o.attack.empty() ? "pgd_linf@auto,pgd_l2@auto,lpa" : o.attack, c, model,
                                  extractor, data);

  EvalReport report;
  report.clean_accuracy = evaluate_accuracy(model, data, AttackSpec{}).accuracy;
  std::vector<AccuracyResult> results;
  std::vector<std::vector<bool>> correct;
  for (const auto& s : specs) {
    results.push_back(evaluate_accuracy(model, data, s, lpips ? &*lpips : nullptr, &extractor));
    const AccuracyResult& r = results.back();
    report.accuracy[s.label()] = r.accuracy;
    correct.push_back(r.correct);
    report.distances.push_back({s.label(), summarize(r.l2), summarize(r.linf), summarize(r.lpips)});
  }
  report.union_accuracy = union_accuracy(correct, report.clean_accuracy);

  if (!o.trained_against.empty()) {
    std::set<std::string> trained;
    for (const auto& t : split_list(o.trained_against)) {
      bool found = false;
      for (const auto& s : specs) {
        if (s.name == t || s.label() == t) {
          trained.insert(s.label());
          found = true;
        }
      }
      if (!found) throw UsageError("--trained-against '" + t + "' is not among the evaluated attacks");
    }
    report.unseen_mean_accuracy = unseen_mean_accuracy(report.accuracy, trained);
  }
  report.config = c.entries;
  report.seed = c.attack.seed;

  emit(o.report, report.to_json() + "\n");
  if (!o.out.empty()) emit(o.out, per_example_csv(results, data));
  return 0;
}

int cmd_distances(const Options& o) {
  RunConfig c = run_config(o);
  const ClassifierModel model = load_model(o.model);
  const auto lpips = lpips_network(c);
  const ClassifierModel& extractor = lpips ? *lpips : model;
  const Dataset data = dataset(o, c, "test");
  const auto specs = attack_specs(o.attack.empty() ? "pgd_linf@auto,pgd_l2@auto,ppgd,lpa,fast_lpa" : o.attack, c,
                                  model, extractor, data);
  emit(o.report, distance_csv(measure_distance_distributions(model, extractor, data, specs)));
  return 0;
}

int cmd_gradcheck(const Options& o) {
  const GradcheckReport r = gradcheck_tiny_cnn(o.seed, o.instances);
  std::printf("max relative error %.3e over %zu instances (%zu coordinates checked, %zu skipped)\n",
              r.max_relative_error, r.instances, r.checked, r.skipped);
  return r.max_relative_error < 1e-6 ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Perceptual robustness toolkit: training, attacks and evaluation"};
  app.require_subcommand(1);
  Options o;

  const auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "key = value run configuration")->check(CLI::ExistingFile);
    o.seed_opt = sub->add_option("--seed", o.seed, "Seed for all randomness (overrides the config)");
    auto* data = sub->add_option("--data", o.data, "Image tensor archive (default: synthetic data)");
    auto* labels = sub->add_option("--labels", o.labels, "Label archive for --data");
    data->needs(labels);
    labels->needs(data);
  };
  const auto add_attack = [&](CLI::App* sub) {
    sub->add_option("--bound", o.bound, "Perceptual bound epsilon");
    sub->add_option("--steps", o.steps, "Attack steps");
    sub->add_option("--lpips-model", o.lpips_model, "Bounding LPIPS network: self or a model archive");
    sub->add_option("--projection", o.projection, "Perceptual projection")
        ->check(CLI::IsMember({"newton", "bisection"}));
  };
  const auto bind = [&](CLI::App* sub) {
    o.bound_opt = sub->get_option_no_throw("--bound");
    o.steps_opt = sub->get_option_no_throw("--steps");
    o.seed_opt = sub->get_option("--seed");
  };

  auto* train = app.add_subcommand("train", "Train a TinyCNN (standard, PAT or PGD adversarial training)");
  add_common(train);
  add_attack(train);
  train->add_option("--attack", o.attack, "Training attack: none, fast_lpa (PAT), pgd_l2, pgd_linf");
  train->add_option("--out", o.out, "Model archive to write")->required();
  train->add_option("--report", o.report, "Per-epoch training log (CSV)");

  auto* attack = app.add_subcommand("attack", "Attack every example of a dataset");
  add_common(attack);
  add_attack(attack);
  attack->add_option("--model", o.model, "Model archive")->required()->check(CLI::ExistingFile);
  attack->add_option("--attack", o.attack, "Attack name, optionally name@bound")->required();
  attack->add_option("--out", o.out, "Adversarial images (tensor archive)");
  attack->add_option("--report", o.report, "Per-example results (CSV)");

  auto* eval = app.add_subcommand("eval", "Robust, union and unseen-mean accuracy report");
  add_common(eval);
  add_attack(eval);
  eval->add_option("--model", o.model, "Model archive")->required()->check(CLI::ExistingFile);
  eval->add_option("--attack", o.attack, "Comma-separated attacks, each name, name@bound or pgd_*@auto");
  eval->add_option("--trained-against", o.trained_against, "Attacks the model was trained against");
  eval->add_option("--report", o.report, "JSON report (default: stdout)");
  eval->add_option("--out", o.out, "Per-example results (CSV)");

  auto* distances = app.add_subcommand("distances", "L2, Linf and LPIPS distance distributions per attack");
  add_common(distances);
  add_attack(distances);
  distances->add_option("--model", o.model, "Model archive")->required()->check(CLI::ExistingFile);
  distances->add_option("--attack", o.attack, "Comma-separated attacks");
  distances->add_option("--report", o.report, "Distance CSV (default: stdout)");

  auto* gradcheck = app.add_subcommand("gradcheck", "Reverse mode against central differences on random TinyCNNs");
  o.seed_opt = gradcheck->add_option("--seed", o.seed, "Seed");
  gradcheck->add_option("--instances", o.instances, "Random instances")->check(CLI::PositiveNumber);

  if (argc > 1 && argv[1][0] != '-' && app.get_subcommand_no_throw(argv[1]) == nullptr) {
    std::cerr << "pra: unknown subcommand '" << argv[1] << "'\n\n" << app.help();
    return 1;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << "pra: " << e.what() << "\n\n" << app.help();
    return 1;
  }

  try {
    if (*gradcheck) return cmd_gradcheck(o);
    for (auto* sub : {train, attack, eval, distances}) {
      if (*sub) bind(sub);
    }
    if (*train) return cmd_train(o);
    if (*attack) return cmd_attack(o);
    if (*eval) return cmd_eval(o);
    return cmd_distances(o);
  } catch (const UsageError& e) {
    std::cerr << "pra: " << e.what() << "\n\n" << app.help();
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "pra: error: " << e.what() << "\n";
    return 2;
  }
}
