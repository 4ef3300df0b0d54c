#include "nptm/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "nptm/lpips.hpp"
#include "nptm/rng.hpp"

namespace nptm {

namespace {

std::string format_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

std::uint64_t example_seed(std::uint64_t seed, std::size_t index) {
  std::uint64_t h = (seed + 0x51ED270BULL) * 0x9E3779B97F4A7C15ULL;
  h ^= (static_cast<std::uint64_t>(index) + 1) * 0xD6E8FEB86659FD93ULL;
  return h ^ (h >> 29);
}

}  // namespace

std::string AttackSpec::label() const {
  return name == "none" ? name : name + "@" + format_number(bound);
}

const std::vector<std::string>& registered_attacks() {
  static const std::vector<std::string> names{"none", "pgd_l2", "pgd_linf", "ppgd", "lpa", "fast_lpa"};
  return names;
}

bool is_perceptual(const std::string& name) { return name == "ppgd" || name == "lpa" || name == "fast_lpa"; }

AttackResult run_attack(const AttackSpec& spec, const ClassifierModel& model, const ClassifierModel* lpips_network,
                        const Tensor& x, std::size_t label, std::uint64_t seed) {
  const bool self = lpips_network == nullptr || lpips_network == &model;
  if (spec.name == "none") {
    AttackResult r;
    r.adversarial = x;
    score_result(model, self ? model : *lpips_network, x, label, r);
    return r;
  }
  if (spec.name == "pgd_l2" || spec.name == "pgd_linf") {
    PgdConfig c = spec.pgd;
    c.bound = spec.bound;
    return spec.name == "pgd_l2" ? pgd_l2(model, x, label, c) : pgd_linf(model, x, label, c);
  }
  if (!is_perceptual(spec.name)) throw std::invalid_argument("unknown attack '" + spec.name + "'");
  AttackConfig c = spec.perceptual;
  c.bound = spec.bound;
  c.seed = seed;
  c.bound_mode = self ? BoundMode::kSelf : BoundMode::kExternal;
  if (spec.name == "ppgd") return self ? ppgd(model, x, label, c) : ppgd(model, *lpips_network, x, label, c);
  if (spec.name == "lpa") return self ? lpa(model, x, label, c) : lpa(model, *lpips_network, x, label, c);
  return self ? fast_lpa(model, x, label, c) : fast_lpa(model, *lpips_network, x, label, c);
}

AccuracyResult evaluate_accuracy(const ClassifierModel& model, const Dataset& data, const AttackSpec& spec,
                                 const ClassifierModel* lpips_network, const ClassifierModel* distance_network,
                                 bool keep_examples) {
  const auto& names = registered_attacks();
  if (std::find(names.begin(), names.end(), spec.name) == names.end()) {
    throw std::invalid_argument("unknown attack '" + spec.name + "'");
  }
  if (data.size() > 0 && data.example_shape() != model.spec().input_shape) {
    throw ShapeError("evaluate: dataset shape does not match the model input");
  }
  const ClassifierModel& dist = distance_network ? *distance_network : lpips_network ? *lpips_network : model;
  const bool has_features = !dist.spec().feature_layers.empty();
  AccuracyResult out;
  out.attack = spec.label();
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Tensor x = data.example(i);
    const std::size_t y = data.labels[i];
    const AttackResult r = run_attack(spec, model, lpips_network, x, y, example_seed(spec.seed, i));
    const bool ok = argmax(forward_logits(model, r.adversarial)) == y;
    correct += ok ? 1 : 0;
    out.correct.push_back(ok);
    const Tensor delta = r.adversarial - x;
    out.l2.push_back(norm2(delta));
    out.linf.push_back(norm_inf(delta));
    out.lpips.push_back(has_features ? lpips_distance(dist, r.adversarial, x)
                                     : std::numeric_limits<double>::quiet_NaN());
    if (keep_examples) out.adversarial.push_back(r.adversarial);
  }
  out.accuracy = data.size() == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(data.size());
  return out;
}

double union_accuracy(const std::vector<std::vector<bool>>& correct, double clean_accuracy) {
  if (correct.empty()) return clean_accuracy;
  const std::size_t n = correct.front().size();
  for (const auto& c : correct) {
    if (c.size() != n) throw std::invalid_argument("union accuracy: success vectors differ in length");
  }
  if (n == 0) return 0.0;
  std::size_t robust = 0;
  for (std::size_t i = 0; i < n; ++i) {
    bool all = true;
    for (const auto& c : correct) all = all && c[i];
    robust += all ? 1 : 0;
  }
  return static_cast<double>(robust) / static_cast<double>(n);
}

double unseen_mean_accuracy(const std::map<std::string, double>& accuracies,
                            const std::set<std::string>& trained_against) {
  for (const auto& t : trained_against) {
    if (!accuracies.count(t)) throw std::invalid_argument("unseen mean: training attack '" + t + "' was not evaluated");
  }
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& [name, acc] : accuracies) {
    if (trained_against.count(name)) continue;
    sum += acc;
    ++n;
  }
  if (n == 0) throw std::invalid_argument("unseen mean: every evaluated attack was trained against");
  return sum / static_cast<double>(n);
}

DistanceStats summarize(std::vector<double> values) {
  DistanceStats s;
  if (values.empty()) return s;
  std::sort(values.begin(), values.end());
  auto quantile = [&](double q) {
    const double pos = q * static_cast<double>(values.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, values.size() - 1);
    return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
  };
  double total = 0.0;
  for (double v : values) total += v;
  s.mean = total / static_cast<double>(values.size());
  s.median = quantile(0.5);
  s.p5 = quantile(0.05);
  s.p95 = quantile(0.95);
  return s;
}

double coefficient_of_variation(const std::vector<double>& values) {
  if (values.empty()) return 0.0;
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(values.size());
  double var = 0.0;
  for (double v : values) var += (v - mean) * (v - mean);
  var /= static_cast<double>(values.size());
  return mean == 0.0 ? 0.0 : std::sqrt(var) / mean;
}

std::vector<DistanceDistribution> measure_distance_distributions(const ClassifierModel& model,
                                                                 const ClassifierModel& extractor,
                                                                 const Dataset& data,
                                                                 const std::vector<AttackSpec>& attacks) {
  std::vector<DistanceDistribution> rows;
  for (const auto& spec : attacks) {
    // Perceptual attacks are bounded by the extractor the distances are measured with.
    const ClassifierModel* bound_by = is_perceptual(spec.name) ? &extractor : nullptr;
    const AccuracyResult r = evaluate_accuracy(model, data, spec, bound_by, &extractor);
    rows.push_back({spec.label(), summarize(r.l2), summarize(r.linf), summarize(r.lpips)});
  }
  return rows;
}

std::string distance_csv(const std::vector<DistanceDistribution>& rows) {
  std::ostringstream os;
  os << kDistanceCsvHeader << '\n';
  for (const auto& r : rows) {
    const std::pair<const char*, const DistanceStats*> metrics[] = {{"l2", &r.l2}, {"linf", &r.linf}, {"lpips", &r.lpips}};
    for (const auto& [metric, s] : metrics) {
      os << r.attack << ',' << metric << ',' << format_number(s->mean) << ',' << format_number(s->median) << ','
         << format_number(s->p5) << ',' << format_number(s->p95) << '\n';
    }
  }
  return os.str();
}

std::string per_example_csv(const std::vector<AccuracyResult>& results, const Dataset& data) {
  std::ostringstream os;
  os << kExampleCsvHeader << '\n';
  for (const auto& r : results) {
    for (std::size_t i = 0; i < r.correct.size(); ++i) {
      os << r.attack << ',' << i << ',' << data.labels.at(i) << ',' << (r.correct[i] ? 1 : 0) << ','
         << format_number(r.l2[i]) << ',' << format_number(r.linf[i]) << ',' << format_number(r.lpips[i]) << '\n';
    }
  }
  return os.str();
}

Calibration calibrate_pgd_bound(const ClassifierModel& model, const ClassifierModel& extractor, const Dataset& data,
                                const std::string& attack, double target, const PgdConfig& base, double upper,
                                std::size_t iterations) {
  if (attack != "pgd_l2" && attack != "pgd_linf") throw std::invalid_argument("calibration: not a PGD attack");
  if (!(target > 0.0) || !(upper > 0.0)) throw std::invalid_argument("calibration: target and bracket must be > 0");
  if (data.size() == 0) throw std::invalid_argument("calibration: empty dataset");
  AttackSpec spec;
  spec.name = attack;
  spec.pgd = base;
  auto median_at = [&](double bound) {
    spec.bound = bound;
    return summarize(evaluate_accuracy(model, data, spec, nullptr, &extractor).lpips).median;
  };
  Calibration c;
  double lo = 0.0, hi = upper;
  double at_hi = median_at(hi);
  for (int grow = 0; at_hi < target && grow < 8; ++grow) {
    lo = hi;
    hi *= 2.0;
    at_hi = median_at(hi);
  }
  for (c.iterations = 0; c.iterations < iterations; ++c.iterations) {
    const double mid = 0.5 * (lo + hi);
    if (median_at(mid) < target) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  c.bound = 0.5 * (lo + hi);
  c.median_lpips = median_at(c.bound);
  return c;
}

std::string EvalReport::to_json() const {
  nlohmann::ordered_json j;
  j["seed"] = seed;
  j["clean_accuracy"] = clean_accuracy;
  j["accuracy"] = nlohmann::ordered_json::object();
  for (const auto& [k, v] : accuracy) j["accuracy"][k] = v;
  j["union_accuracy"] = union_accuracy;
  j["unseen_mean_accuracy"] = unseen_mean_accuracy ? nlohmann::ordered_json(*unseen_mean_accuracy) : nullptr;
  j["distances"] = nlohmann::ordered_json::array();
  for (const auto& d : distances) {
    nlohmann::ordered_json row;
    row["attack"] = d.attack;
    const std::pair<const char*, const DistanceStats*> metrics[] = {{"l2", &d.l2}, {"linf", &d.linf}, {"lpips", &d.lpips}};
    for (const auto& [metric, s] : metrics) {
      row[metric] = {{"mean", s->mean}, {"median", s->median}, {"p5", s->p5}, {"p95", s->p95}};
    }
    j["distances"].push_back(row);
  }
  j["config"] = nlohmann::ordered_json::object();
  for (const auto& [k, v] : config) j["config"][k] = v;
  return j.dump(2) + "\n";
}

// ---------------------------------------------------------------------------

GradcheckReport gradcheck_tiny_cnn(std::uint64_t seed, std::size_t instances, double step,
                                   std::size_t parameter_samples) {
  GradcheckReport report;
  Rng rng(seed);
  for (std::size_t inst = 0; inst < instances; ++inst) {
    const std::size_t channels = 1 + rng.below(3);
    const std::size_t size = rng.below(2) == 0 ? 6 : 8;
    const std::size_t classes = 2 + rng.below(3);
    const ClassifierModel base = init_model(tiny_cnn_spec(channels, size, classes), rng.next());
    const std::size_t label = rng.below(classes);
    Tensor x(base.spec().input_shape);
    for (auto& v : x.data()) v = rng.uniform();
    std::vector<Tensor> probes;
    for (const auto& s : base.spec().feature_shapes()) {
      Tensor r(s);
      for (auto& v : r.data()) v = rng.uniform(-1.0, 1.0);
      probes.push_back(std::move(r));
    }

    auto value = [&](const ClassifierModel& m, const Tensor& at, std::vector<std::size_t>& pattern) {
      const auto out = m.evaluate(at, nullptr, true, &pattern);
      double f = cross_entropy_loss(out.logits, label);
      for (std::size_t l = 0; l < probes.size(); ++l) f += dot(out.features[l], probes[l]);
      return f;
    };

    Tape tape;
    std::vector<Var> params;
    for (const auto& p : base.parameters()) params.push_back(tape.variable(p));
    const Var xv = tape.variable(x);
    const auto trace = base.forward(tape, xv, nullptr, &params);
    Var f = cross_entropy_loss(trace.logits, label);
    for (std::size_t l = 0; l < probes.size(); ++l) f = add(f, sum(mul(trace.features[l], tape.constant(probes[l]))));
    const auto grads = tape.backward(f);

    std::vector<std::size_t> pattern0, up_pattern, down_pattern;
    value(base, x, pattern0);
    auto record = [&](double analytic, double up, double down) {
      if (up_pattern != pattern0 || down_pattern != pattern0) {
        ++report.skipped;
        return;
      }
      const double fd = (up - down) / (2.0 * step);
      const double err = std::abs(fd - analytic) / std::max({1.0, std::abs(fd), std::abs(analytic)});
      report.max_relative_error = std::max(report.max_relative_error, err);
      ++report.checked;
    };

    const Tensor gx = grads.wrt(xv);
    for (std::size_t i = 0; i < x.size(); ++i) {
      Tensor up = x, down = x;
      up[i] += step;
      down[i] -= step;
      const double fu = value(base, up, up_pattern), fd = value(base, down, down_pattern);
      record(gx[i], fu, fd);
    }

    std::vector<Tensor> gp;
    for (const auto& p : params) gp.push_back(grads.wrt(p));
    for (std::size_t s = 0; s < parameter_samples; ++s) {
      const std::size_t k = rng.below(gp.size());
      const std::size_t i = rng.below(gp[k].size());
      ClassifierModel up = base, down = base;
      up.mutable_parameters()[k][i] += step;
      down.mutable_parameters()[k][i] -= step;
      const double fu = value(up, x, up_pattern), fd = value(down, x, down_pattern);
      record(gp[k][i], fu, fd);
    }
    ++report.instances;
  }
  return report;
}

}  // namespace nptm
