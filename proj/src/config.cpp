#include "nptm/config.hpp"

#include <charconv>
#include <functional>
#include <sstream>

namespace nptm {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double to_double(const std::string& v) {
  double out = 0.0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError("not a number: '" + v + "'");
  return out;
}

std::size_t to_size(const std::string& v) {
  std::size_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError("not a non-negative integer: '" + v + "'");
  return out;
}

std::uint64_t to_u64(const std::string& v) {
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError("not a non-negative integer: '" + v + "'");
  return out;
}

bool to_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("not a boolean: '" + v + "'");
}

std::vector<std::size_t> to_size_list(const std::string& v) {
  std::vector<std::size_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(to_size(item));
  }
  return out;
}

using Setter = std::function<void(RunConfig&, const std::string&)>;

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table{
      // training
      {"epochs", [](RunConfig& c, const std::string& v) { c.train.epochs = to_size(v); }},
      {"batch_size", [](RunConfig& c, const std::string& v) { c.train.batch_size = to_size(v); }},
      {"learning_rate", [](RunConfig& c, const std::string& v) { c.train.learning_rate = to_double(v); }},
      {"momentum", [](RunConfig& c, const std::string& v) { c.train.momentum = to_double(v); }},
      {"weight_decay", [](RunConfig& c, const std::string& v) { c.train.weight_decay = to_double(v); }},
      {"lr_drop_epochs", [](RunConfig& c, const std::string& v) { c.train.lr_drop_epochs = to_size_list(v); }},
      {"lr_drop_factor", [](RunConfig& c, const std::string& v) { c.train.lr_drop_factor = to_double(v); }},
      {"attack_steps", [](RunConfig& c, const std::string& v) { c.train.attack_steps = to_size(v); }},
      {"attack_correct_only", [](RunConfig& c, const std::string& v) { c.train.attack_correct_only = to_bool(v); }},
      {"baseline",
       [](RunConfig& c, const std::string& v) {
         if (v == "none") {
           c.train.baseline = Baseline::kNone;
         } else if (v == "pgd_l2") {
           c.train.baseline = Baseline::kPgdL2;
         } else if (v == "pgd_linf") {
           c.train.baseline = Baseline::kPgdLinf;
         } else {
           throw ConfigError("baseline must be none, pgd_l2 or pgd_linf");
         }
       }},
      {"baseline_bound", [](RunConfig& c, const std::string& v) { c.train.baseline_bound = to_double(v); }},
      {"bound_mode",
       [](RunConfig& c, const std::string& v) {
         if (v != "self" && v != "external") throw ConfigError("bound_mode must be self or external");
         c.train.bound_mode = c.attack.bound_mode = v == "self" ? BoundMode::kSelf : BoundMode::kExternal;
       }},
      {"lpips_model", [](RunConfig& c, const std::string& v) { c.lpips_model = v; }},
      // shared
      {"bound", [](RunConfig& c, const std::string& v) { c.train.bound = c.attack.bound = to_double(v); }},
      {"seed", [](RunConfig& c, const std::string& v) { c.train.seed = c.attack.seed = c.synthetic.seed = to_u64(v); }},
      {"clamp", [](RunConfig& c, const std::string& v) { c.train.clamp = c.attack.clamp = to_bool(v); }},
      // attacks
      {"steps", [](RunConfig& c, const std::string& v) { c.attack.steps = to_size(v); }},
      {"cg_iterations", [](RunConfig& c, const std::string& v) { c.attack.cg_iterations = to_size(v); }},
      {"lambda_rounds", [](RunConfig& c, const std::string& v) { c.attack.lambda_rounds = to_size(v); }},
      {"jacobian_step", [](RunConfig& c, const std::string& v) { c.attack.jacobian_step = to_double(v); }},
      {"direction_step", [](RunConfig& c, const std::string& v) { c.attack.direction_step = to_double(v); }},
      {"overshoot", [](RunConfig& c, const std::string& v) { c.attack.overshoot = to_double(v); }},
      {"bisection_iterations", [](RunConfig& c, const std::string& v) { c.attack.bisection_iterations = to_size(v); }},
      {"step_size", [](RunConfig& c, const std::string& v) { c.attack.step_size = to_double(v); }},
      {"initial_lambda", [](RunConfig& c, const std::string& v) { c.attack.initial_lambda = to_double(v); }},
      {"init_noise", [](RunConfig& c, const std::string& v) { c.attack.init_noise = to_double(v); }},
      {"projection",
       [](RunConfig& c, const std::string& v) {
         if (v != "newton" && v != "bisection") throw ConfigError("projection must be newton or bisection");
         c.attack.projection = v == "newton" ? ProjectionMethod::kNewton : ProjectionMethod::kBisection;
       }},
      {"loss",
       [](RunConfig& c, const std::string& v) {
         if (v != "margin" && v != "cross_entropy") throw ConfigError("loss must be margin or cross_entropy");
         c.attack.loss = v == "margin" ? LossKind::kMargin : LossKind::kCrossEntropy;
       }},
      // synthetic data
      {"synthetic_classes", [](RunConfig& c, const std::string& v) { c.synthetic.classes = to_size(v); }},
      {"synthetic_channels", [](RunConfig& c, const std::string& v) { c.synthetic.channels = to_size(v); }},
      {"synthetic_size", [](RunConfig& c, const std::string& v) { c.synthetic.size = to_size(v); }},
      {"synthetic_per_class", [](RunConfig& c, const std::string& v) { c.synthetic.per_class = to_size(v); }},
      {"synthetic_test_per_class", [](RunConfig& c, const std::string& v) { c.test_per_class = to_size(v); }},
      {"synthetic_noise", [](RunConfig& c, const std::string& v) { c.synthetic.noise = to_double(v); }},
  };
  return table;
}

}  // namespace

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& [k, _] : setters()) keys.push_back(k);
  return keys;
}

RunConfig parse_config(const std::string& text, RunConfig defaults) {
  RunConfig c = std::move(defaults);
  std::istringstream is(text);
  std::string line;
  std::size_t number = 0;
  while (std::getline(is, line)) {
    ++number;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::string where = "config line " + std::to_string(number) + ": ";
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const auto it = setters().find(key);
    if (it == setters().end()) throw ConfigError(where + "unknown key '" + key + "'");
    if (c.entries.count(key)) throw ConfigError(where + "duplicate key '" + key + "'");
    if (value.empty()) throw ConfigError(where + "missing value for '" + key + "'");
    try {
      it->second(c, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + key + ": " + e.what());
    }
    c.entries[key] = value;
  }
  c.train.validate();
  c.attack.validate();
  return c;
}

RunConfig load_config(const std::string& path, RunConfig defaults) {
  return parse_config(read_file(path), std::move(defaults));
}

}  // namespace nptm
