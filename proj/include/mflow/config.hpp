#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "mflow/objective.hpp"
#include "mflow/tasks.hpp"
#include "mflow/trainer.hpp"

namespace mflow {

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Flat "section.key" -> value map over a fixed schema. Every key has a
/// default; files and overrides may only set keys the schema knows.
class Config {
 public:
  static Config defaults();
  /// INI text ("[section]" headers, "key = value" lines) merged over the defaults.
  static Config from_ini(const std::string& text);
  static Config load(const std::filesystem::path& path);

  /// Throws ConfigError naming the nearest valid key when `key` is unknown.
  void set(const std::string& key, const std::string& value);
  /// "section.key=value" strings, applied in order.
  void apply_overrides(const std::vector<std::string>& overrides);

  const std::string& get(const std::string& key) const;
  double get_double(const std::string& key) const;
  std::size_t get_size(const std::string& key) const;
  std::uint64_t get_u64(const std::string& key) const;
  std::vector<std::size_t> get_sizes(const std::string& key) const;
  std::vector<std::uint64_t> get_u64s(const std::string& key) const;
  std::vector<double> get_doubles(const std::string& key) const;
  std::vector<std::string> get_strings(const std::string& key) const;

  /// Canonical INI: every key, sections and keys in schema order.
  std::string to_ini() const;
  /// Hash of to_ini().
  std::string hash() const;

  const std::map<std::string, std::string>& values() const { return values_; }
  friend bool operator==(const Config&, const Config&) = default;

 private:
  std::map<std::string, std::string> values_;
};

/// Every key in the schema, in canonical order.
const std::vector<std::string>& config_keys();

/// Valid key closest to `key` by edit distance.
std::string nearest_config_key(const std::string& key);
std::size_t edit_distance(const std::string& a, const std::string& b);

/// Task spec for `name` with any [task] overrides applied.
TaskSpec task_spec(const Config& cfg, const std::string& name);
TaskSpec task_spec(const Config& cfg);  // data.task
Architecture architecture(const Config& cfg);
ObjectiveConfig objective_config(const Config& cfg);
TrainConfig train_config(const Config& cfg);
/// train_config with the [ablation] network and budget.
TrainConfig ablation_train_config(const Config& cfg);

}  // namespace mflow
