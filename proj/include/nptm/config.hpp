#pragma once

// Line-oriented `key = value` run configuration with '#' comments.

#include <map>
#include <string>

#include "nptm/attacks.hpp"
#include "nptm/dataset.hpp"
#include "nptm/training.hpp"

namespace nptm {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct RunConfig {
  TrainConfig train;
  AttackConfig attack;
  SyntheticConfig synthetic;        // used when no dataset file is given
  std::size_t test_per_class = 125;
  std::string lpips_model;          // external bound network path
  std::map<std::string, std::string> entries;  // every key as written, for report echo
};

// Keys are the snake-case field names of TrainConfig and AttackConfig plus
// `lpips_model` and `synthetic_*`. `bound` and `seed` set both the training and
// the attack value. Unknown keys, duplicates and malformed values throw
// ConfigError naming the line.
RunConfig parse_config(const std::string& text, RunConfig defaults = {});
RunConfig load_config(const std::string& path, RunConfig defaults = {});

// Accepted key names, sorted.
std::vector<std::string> config_keys();

}  // namespace nptm
