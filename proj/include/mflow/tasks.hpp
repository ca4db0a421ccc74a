#pragma once

// Synthetic action datasets. Every generator is a pure function of
// (TaskSpec, n, seed).

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mflow/rng.hpp"
#include "mflow/tensor.hpp"

namespace mflow {

enum class TaskKind { Gmm2d, Reach, PrecisionDock, MixedMagnitude };

std::string to_string(TaskKind kind);
TaskKind parse_task_kind(const std::string& name);

struct TaskSpec {
  TaskKind kind = TaskKind::Gmm2d;
  std::string name = "gmm2d";
  std::size_t action_dim = 2;
  std::size_t cond_dim = 0;

  // gmm2d: K components, means flattened [K x 2], isotropic std per component.
  std::vector<double> gmm_means;
  std::vector<double> gmm_weights;
  std::vector<double> gmm_stds;

  // reach / precision_dock / mixed_magnitude.
  std::array<double, 2> goal{0.3, -0.2};
  double magnitude = 1.0;      // reach: m_reach; precision_dock: m
  double m_large = 1.0;        // mixed_magnitude large-motion population
  double m_small = 0.02;       // mixed_magnitude small-motion population
  double small_fraction = 0.5;
  double label_noise = 0.01;   // sigma_a as a fraction of the population magnitude

  // Success thresholds.
  double success_angle_deg = 15.0;
  double success_norm_rel = 0.5;
  double goal_radius = 0.05;
  double gmm_success_sigmas = 3.0;

  void validate() const;
  std::size_t components() const { return gmm_weights.size(); }

  /// Ordered key/value pairs; doubles written with %.17g.
  std::vector<std::pair<std::string, std::string>> to_key_values() const;
  static TaskSpec from_key_values(const std::map<std::string, std::string>& kv);

  friend bool operator==(const TaskSpec&, const TaskSpec&) = default;
};

/// Defaults per task: "gmm2d", "reach", "precision_dock", "mixed_magnitude".
TaskSpec default_task(const std::string& name);

/// Stratum tags. Single-population tasks tag every row 0.
inline constexpr int kTagLarge = 0;
inline constexpr int kTagSmall = 1;

struct Dataset {
  TaskSpec spec;
  Tensor conds;    // [n x cond_dim]
  Tensor actions;  // [n x d]
  std::vector<int> tags;

  std::size_t size() const { return actions.rows(); }
  friend bool operator==(const Dataset&, const Dataset&) = default;
};

Dataset gen_gmm2d(const TaskSpec& spec, std::size_t n, std::uint64_t seed);
Dataset gen_reach(const TaskSpec& spec, std::size_t n, std::uint64_t seed);
Dataset gen_precision_dock(const TaskSpec& spec, std::size_t n, std::uint64_t seed);
Dataset gen_mixed_magnitude(const TaskSpec& spec, std::size_t n, std::uint64_t seed);
/// Dispatches on spec.kind.
Dataset generate(const TaskSpec& spec, std::size_t n, std::uint64_t seed);

// Expert geometry for the docking direction field.
double dock_base_angle(double c1, double c2);
double dock_length(double c1, double c2);
/// Both valid approach angles (radians) for a docking condition.
std::array<double, 2> dock_modes(double c1, double c2);

/// Angle between (x, y) and the nearest docking mode, in degrees.
double dock_angular_error_deg(double x, double y, double c1, double c2);

struct StratumStats {
  std::size_t count = 0;
  std::size_t successes = 0;
  double rate() const { return count ? static_cast<double>(successes) / static_cast<double>(count) : 0.0; }
};

/// Keyed by stratum name: "all", and "large"/"small" for mixed_magnitude.
using SuccessReport = std::map<std::string, StratumStats>;

SuccessReport eval_success(const TaskSpec& spec, const Tensor& actions, const Tensor& conds, std::span<const int> tags);

/// Text format: a "# mflow-dataset 1" line, key=value header lines, a
/// "rows <n>" line, then one row per sample: cond..., action..., tag.
void write_dataset(const Dataset& data, const std::filesystem::path& path);
Dataset read_dataset(const std::filesystem::path& path);
std::string dataset_to_text(const Dataset& data);
Dataset dataset_from_text(const std::string& text);

/// Rows [begin, end) as a new dataset.
Dataset subset(const Dataset& data, std::size_t begin, std::size_t end);

}  // namespace mflow
