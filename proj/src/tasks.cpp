#include "mflow/tasks.hpp"

#include <cmath>
#include <cstdio>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "mflow/io.hpp"

namespace mflow {

namespace {

constexpr double kPi = std::numbers::pi;
constexpr const char* kDatasetMagic = "# mflow-dataset 1";

std::string fmt(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

double parse_double(const std::string& s) {
  std::size_t used = 0;
  const double v = std::stod(s, &used);
  if (used != s.size()) throw std::invalid_argument("not a number: '" + s + "'");
  return v;
}

std::string join(const std::vector<double>& xs) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) out += (i ? "," : "") + fmt(xs[i]);
  return out;
}

std::vector<double> split_doubles(const std::string& s) {
  std::vector<double> out;
  if (s.empty()) return out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_double(item));
  return out;
}

const std::string& require(const std::map<std::string, std::string>& kv, const std::string& key) {
  const auto it = kv.find(key);
  if (it == kv.end()) throw std::invalid_argument("task spec is missing key '" + key + "'");
  return it->second;
}

// Both coordinates get independent N(0, sigma^2) noise.
std::array<double, 2> noisy(double x, double y, double sigma, Rng& rng) {
  return {x + sigma * rng.normal(), y + sigma * rng.normal()};
}

std::array<double, 2> dock_action(const TaskSpec& spec, double m, double c1, double c2, Rng& rng) {
  const auto modes = dock_modes(c1, c2);
  const double theta = modes[rng.bernoulli(0.5) ? 1 : 0];
  const double len = m * dock_length(c1, c2);
  auto a = noisy(len * std::cos(theta), len * std::sin(theta), spec.label_noise * m, rng);
  const double norm = std::hypot(a[0], a[1]);
  const double clamped = std::clamp(norm, 0.5 * m, 1.5 * m);
  if (norm > 0 && clamped != norm) {
    a[0] *= clamped / norm;
    a[1] *= clamped / norm;
  }
  return a;
}

Dataset empty_dataset(const TaskSpec& spec, std::size_t n) {
  spec.validate();
  return {spec, Tensor::zeros({n, spec.cond_dim}), Tensor::zeros({n, spec.action_dim}), std::vector<int>(n, 0)};
}

bool dock_success(const TaskSpec& spec, double m, double x, double y, double c1, double c2) {
  const double expected = m * dock_length(c1, c2);
  const double rel = std::abs(std::hypot(x, y) - expected) / expected;
  return dock_angular_error_deg(x, y, c1, c2) < spec.success_angle_deg && rel < spec.success_norm_rel;
}

bool reach_success(const TaskSpec& spec, double m, double x, double y, double s1, double s2) {
  return std::hypot(s1 + x / m - spec.goal[0], s2 + y / m - spec.goal[1]) < spec.goal_radius;
}

}  // namespace

std::string to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::Gmm2d: return "gmm2d";
    case TaskKind::Reach: return "reach";
    case TaskKind::PrecisionDock: return "precision_dock";
    case TaskKind::MixedMagnitude: return "mixed_magnitude";
  }
  return "?";
}

TaskKind parse_task_kind(const std::string& name) {
  for (auto k : {TaskKind::Gmm2d, TaskKind::Reach, TaskKind::PrecisionDock, TaskKind::MixedMagnitude}) {
    if (to_string(k) == name) return k;
  }
  throw std::invalid_argument("unknown task '" + name + "' (expected gmm2d, reach, precision_dock or mixed_magnitude)");
}

void TaskSpec::validate() const {
  if (action_dim != 2) throw std::invalid_argument("task: only 2-D actions are supported");
  switch (kind) {
    case TaskKind::Gmm2d: {
      const std::size_t k = gmm_weights.size();
      if (k == 0) throw std::invalid_argument("gmm2d: at least one component is required");
      if (gmm_means.size() != 2 * k || gmm_stds.size() != k) throw std::invalid_argument("gmm2d: means/stds do not match weights");
      for (std::size_t i = 0; i < k; ++i) {
        if (!(gmm_weights[i] > 0.0)) throw std::invalid_argument("gmm2d: weights must be positive");
        if (!(gmm_stds[i] >= 0.0)) throw std::invalid_argument("gmm2d: stds must be non-negative");
      }
      if (cond_dim != 0) throw std::invalid_argument("gmm2d: cond_dim must be 0");
      break;
    }
    case TaskKind::Reach:
    case TaskKind::PrecisionDock:
      if (!(magnitude > 0.0)) throw std::invalid_argument(name + ": magnitude scale m must be positive");
      if (cond_dim != 2) throw std::invalid_argument(name + ": cond_dim must be 2");
      break;
    case TaskKind::MixedMagnitude:
      if (!(m_small > 0.0) || !(m_large >= 25.0 * m_small)) {
        throw std::invalid_argument("mixed_magnitude: need m_small > 0 and m_large / m_small >= 25");
      }
      if (!(small_fraction >= 0.0 && small_fraction <= 1.0)) throw std::invalid_argument("mixed_magnitude: small_fraction must lie in [0, 1]");
      if (cond_dim != 3) throw std::invalid_argument("mixed_magnitude: cond_dim must be 3");
      break;
  }
  if (!(label_noise >= 0.0)) throw std::invalid_argument("task: label_noise must be non-negative");
  if (!(success_angle_deg > 0.0) || !(success_norm_rel > 0.0) || !(goal_radius > 0.0) || !(gmm_success_sigmas > 0.0)) {
    throw std::invalid_argument("task: success thresholds must be positive");
  }
}

std::vector<std::pair<std::string, std::string>> TaskSpec::to_key_values() const {
  return {
      {"kind", to_string(kind)},
      {"name", name},
      {"action_dim", std::to_string(action_dim)},
      {"cond_dim", std::to_string(cond_dim)},
      {"gmm_means", join(gmm_means)},
      {"gmm_weights", join(gmm_weights)},
      {"gmm_stds", join(gmm_stds)},
      {"goal", join({goal[0], goal[1]})},
      {"magnitude", fmt(magnitude)},
      {"m_large", fmt(m_large)},
      {"m_small", fmt(m_small)},
      {"small_fraction", fmt(small_fraction)},
      {"label_noise", fmt(label_noise)},
      {"success_angle_deg", fmt(success_angle_deg)},
      {"success_norm_rel", fmt(success_norm_rel)},
      {"goal_radius", fmt(goal_radius)},
      {"gmm_success_sigmas", fmt(gmm_success_sigmas)},
  };
}

TaskSpec TaskSpec::from_key_values(const std::map<std::string, std::string>& kv) {
  TaskSpec s;
  s.kind = parse_task_kind(require(kv, "kind"));
  s.name = require(kv, "name");
  s.action_dim = std::stoul(require(kv, "action_dim"));
  s.cond_dim = std::stoul(require(kv, "cond_dim"));
  s.gmm_means = split_doubles(require(kv, "gmm_means"));
  s.gmm_weights = split_doubles(require(kv, "gmm_weights"));
  s.gmm_stds = split_doubles(require(kv, "gmm_stds"));
  const auto goal = split_doubles(require(kv, "goal"));
  if (goal.size() != 2) throw std::invalid_argument("task spec: goal must have two entries");
  s.goal = {goal[0], goal[1]};
  s.magnitude = parse_double(require(kv, "magnitude"));
  s.m_large = parse_double(require(kv, "m_large"));
  s.m_small = parse_double(require(kv, "m_small"));
  s.small_fraction = parse_double(require(kv, "small_fraction"));
  s.label_noise = parse_double(require(kv, "label_noise"));
  s.success_angle_deg = parse_double(require(kv, "success_angle_deg"));
  s.success_norm_rel = parse_double(require(kv, "success_norm_rel"));
  s.goal_radius = parse_double(require(kv, "goal_radius"));
  s.gmm_success_sigmas = parse_double(require(kv, "gmm_success_sigmas"));
  s.validate();
  return s;
}

TaskSpec default_task(const std::string& name) {
  TaskSpec s;
  s.kind = parse_task_kind(name);
  s.name = name;
  switch (s.kind) {
    case TaskKind::Gmm2d:
      s.gmm_means = {1.0, 1.0, -1.0, 1.0, -1.0, -1.0, 1.0, -1.0};
      s.gmm_weights = {0.25, 0.25, 0.25, 0.25};
      s.gmm_stds = {0.1, 0.1, 0.1, 0.1};
      break;
    case TaskKind::Reach:
      s.cond_dim = 2;
      s.magnitude = 1.0;
      break;
    case TaskKind::PrecisionDock:
      s.cond_dim = 2;
      s.magnitude = 0.02;
      break;
    case TaskKind::MixedMagnitude:
      s.cond_dim = 3;
      break;
  }
  s.validate();
  return s;
}

// ---------------------------------------------------------------------------
// Generators

Dataset gen_gmm2d(const TaskSpec& spec, std::size_t n, std::uint64_t seed) {
  if (spec.kind != TaskKind::Gmm2d) throw std::invalid_argument("gen_gmm2d: spec is " + to_string(spec.kind));
  Dataset d = empty_dataset(spec, n);
  double total = 0;
  for (double w : spec.gmm_weights) total += w;
  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    double u = rng.uniform() * total;
    std::size_t k = 0;
    while (k + 1 < spec.components() && u >= spec.gmm_weights[k]) u -= spec.gmm_weights[k++];
    const auto a = noisy(spec.gmm_means[2 * k], spec.gmm_means[2 * k + 1], spec.gmm_stds[k], rng);
    d.actions[2 * i] = a[0];
    d.actions[2 * i + 1] = a[1];
    d.tags[i] = static_cast<int>(k);
  }
  return d;
}

Dataset gen_reach(const TaskSpec& spec, std::size_t n, std::uint64_t seed) {
  if (spec.kind != TaskKind::Reach) throw std::invalid_argument("gen_reach: spec is " + to_string(spec.kind));
  Dataset d = empty_dataset(spec, n);
  Rng rng(seed);
  const double m = spec.magnitude;
  for (std::size_t i = 0; i < n; ++i) {
    const double s1 = rng.uniform(-1, 1), s2 = rng.uniform(-1, 1);
    const auto a = noisy(m * (spec.goal[0] - s1), m * (spec.goal[1] - s2), spec.label_noise * m, rng);
    d.conds[2 * i] = s1;
    d.conds[2 * i + 1] = s2;
    d.actions[2 * i] = a[0];
    d.actions[2 * i + 1] = a[1];
  }
  return d;
}

Dataset gen_precision_dock(const TaskSpec& spec, std::size_t n, std::uint64_t seed) {
  if (spec.kind != TaskKind::PrecisionDock) throw std::invalid_argument("gen_precision_dock: spec is " + to_string(spec.kind));
  Dataset d = empty_dataset(spec, n);
  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    const double c1 = rng.uniform(-1, 1), c2 = rng.uniform(-1, 1);
    const auto a = dock_action(spec, spec.magnitude, c1, c2, rng);
    d.conds[2 * i] = c1;
    d.conds[2 * i + 1] = c2;
    d.actions[2 * i] = a[0];
    d.actions[2 * i + 1] = a[1];
  }
  return d;
}

Dataset gen_mixed_magnitude(const TaskSpec& spec, std::size_t n, std::uint64_t seed) {
  if (spec.kind != TaskKind::MixedMagnitude) throw std::invalid_argument("gen_mixed_magnitude: spec is " + to_string(spec.kind));
  Dataset d = empty_dataset(spec, n);
  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    const bool small = rng.bernoulli(spec.small_fraction);
    std::array<double, 2> a;
    double c1, c2;
    if (small) {
      c1 = rng.uniform(-1, 1);
      c2 = rng.uniform(-1, 1);
      a = dock_action(spec, spec.m_small, c1, c2, rng);
    } else {
      // Starts on the unit circle around the goal, so every large motion has norm m_large.
      const double phi = rng.uniform(0, 2 * kPi);
      c1 = spec.goal[0] + std::cos(phi);
      c2 = spec.goal[1] + std::sin(phi);
      a = noisy(spec.m_large * (spec.goal[0] - c1), spec.m_large * (spec.goal[1] - c2), spec.label_noise * spec.m_large, rng);
    }
    d.conds[3 * i] = c1;
    d.conds[3 * i + 1] = c2;
    d.conds[3 * i + 2] = small ? 1.0 : 0.0;
    d.actions[2 * i] = a[0];
    d.actions[2 * i + 1] = a[1];
    d.tags[i] = small ? kTagSmall : kTagLarge;
  }
  return d;
}

Dataset generate(const TaskSpec& spec, std::size_t n, std::uint64_t seed) {
  switch (spec.kind) {
    case TaskKind::Gmm2d: return gen_gmm2d(spec, n, seed);
    case TaskKind::Reach: return gen_reach(spec, n, seed);
    case TaskKind::PrecisionDock: return gen_precision_dock(spec, n, seed);
    case TaskKind::MixedMagnitude: return gen_mixed_magnitude(spec, n, seed);
  }
  throw std::logic_error("unhandled task kind");
}

// ---------------------------------------------------------------------------
// Docking geometry

double dock_base_angle(double c1, double c2) { return kPi * (c1 + 0.5 * c2); }

double dock_length(double c1, double c2) { return 1.0 + 0.25 * std::sin(kPi * c1) * std::cos(kPi * c2); }

std::array<double, 2> dock_modes(double c1, double c2) {
  const double base = dock_base_angle(c1, c2);
  return {base, base + 0.5 * kPi};
}

double dock_angular_error_deg(double x, double y, double c1, double c2) {
  const double angle = std::atan2(y, x);
  double best = 180.0;
  for (double mode : dock_modes(c1, c2)) {
    const double diff = std::remainder(angle - mode, 2 * kPi);
    best = std::min(best, std::abs(diff) * 180.0 / kPi);
  }
  return best;
}

// ---------------------------------------------------------------------------
// Success

SuccessReport eval_success(const TaskSpec& spec, const Tensor& actions, const Tensor& conds, std::span<const int> tags) {
  const std::size_t n = actions.rank() == 2 ? actions.rows() : 0;
  if (actions.rank() != 2 || actions.cols() != spec.action_dim) {
    throw ShapeError("eval_success: actions must be [n x " + std::to_string(spec.action_dim) + "], got " + to_string(actions.shape()));
  }
  if (conds.rank() != 2 || conds.rows() != n || conds.cols() != spec.cond_dim) {
    throw ShapeError("eval_success (conds)", conds.shape(), Shape{n, spec.cond_dim});
  }
  if (tags.size() != n) {
    throw ShapeError("eval_success: " + std::to_string(tags.size()) + " tags for " + std::to_string(n) + " actions");
  }

  SuccessReport report;
  report["all"];
  if (spec.kind == TaskKind::MixedMagnitude) {
    report["large"];
    report["small"];
  }
  for (std::size_t i = 0; i < n; ++i) {
    const double x = actions.at(i, 0), y = actions.at(i, 1);
    bool ok = false;
    std::string stratum;
    switch (spec.kind) {
      case TaskKind::Gmm2d: {
        for (std::size_t k = 0; k < spec.components(); ++k) {
          const double dist = std::hypot(x - spec.gmm_means[2 * k], y - spec.gmm_means[2 * k + 1]);
          ok = ok || dist <= spec.gmm_success_sigmas * std::max(spec.gmm_stds[k], 1e-12);
        }
        break;
      }
      case TaskKind::Reach:
        ok = reach_success(spec, spec.magnitude, x, y, conds.at(i, 0), conds.at(i, 1));
        break;
      case TaskKind::PrecisionDock:
        ok = dock_success(spec, spec.magnitude, x, y, conds.at(i, 0), conds.at(i, 1));
        break;
      case TaskKind::MixedMagnitude:
        if (tags[i] == kTagSmall) {
          stratum = "small";
          ok = dock_success(spec, spec.m_small, x, y, conds.at(i, 0), conds.at(i, 1));
        } else {
          stratum = "large";
          ok = reach_success(spec, spec.m_large, x, y, conds.at(i, 0), conds.at(i, 1));
        }
        break;
    }
    for (const std::string& key : {std::string("all"), stratum}) {
      if (key.empty()) continue;
      auto& s = report[key];
      ++s.count;
      s.successes += ok ? 1 : 0;
    }
  }
  return report;
}

// ---------------------------------------------------------------------------
// Serialization

std::string dataset_to_text(const Dataset& data) {
  std::string out = std::string(kDatasetMagic) + "\n";
  for (const auto& [k, v] : data.spec.to_key_values()) out += k + "=" + v + "\n";
  out += "rows " + std::to_string(data.size()) + "\n";
  const std::size_t cd = data.spec.cond_dim, ad = data.spec.action_dim;
  for (std::size_t i = 0; i < data.size(); ++i) {
    for (std::size_t j = 0; j < cd; ++j) out += fmt(data.conds[i * cd + j]) + " ";
    for (std::size_t j = 0; j < ad; ++j) out += fmt(data.actions[i * ad + j]) + " ";
    out += std::to_string(data.tags[i]) + "\n";
  }
  return out;
}

Dataset dataset_from_text(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kDatasetMagic) throw std::invalid_argument("not an mflow dataset file");
  std::map<std::string, std::string> kv;
  std::size_t rows = 0;
  bool have_rows = false;
  while (std::getline(in, line)) {
    if (line.rfind("rows ", 0) == 0) {
      rows = std::stoul(line.substr(5));
      have_rows = true;
      break;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("dataset header: malformed line '" + line + "'");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  if (!have_rows) throw std::invalid_argument("dataset: missing rows line");
  Dataset d = empty_dataset(TaskSpec::from_key_values(kv), rows);
  const std::size_t cd = d.spec.cond_dim, ad = d.spec.action_dim;
  for (std::size_t i = 0; i < rows; ++i) {
    if (!std::getline(in, line)) throw std::invalid_argument("dataset: expected " + std::to_string(rows) + " rows, got " + std::to_string(i));
    std::istringstream row(line);
    std::string tok;
    auto next = [&]() {
      if (!(row >> tok)) throw std::invalid_argument("dataset: short row " + std::to_string(i));
      return parse_double(tok);
    };
    for (std::size_t j = 0; j < cd; ++j) d.conds[i * cd + j] = next();
    for (std::size_t j = 0; j < ad; ++j) d.actions[i * ad + j] = next();
    if (!(row >> tok)) throw std::invalid_argument("dataset: missing tag in row " + std::to_string(i));
    d.tags[i] = std::stoi(tok);
  }
  return d;
}

void write_dataset(const Dataset& data, const std::filesystem::path& path) { write_file_atomic(path, dataset_to_text(data)); }

Dataset read_dataset(const std::filesystem::path& path) { return dataset_from_text(read_file(path)); }

Dataset subset(const Dataset& data, std::size_t begin, std::size_t end) {
  if (begin > end || end > data.size()) throw std::out_of_range("subset: bad row range");
  const std::size_t n = end - begin, cd = data.spec.cond_dim, ad = data.spec.action_dim;
  Dataset out = empty_dataset(data.spec, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < cd; ++j) out.conds[i * cd + j] = data.conds[(begin + i) * cd + j];
    for (std::size_t j = 0; j < ad; ++j) out.actions[i * ad + j] = data.actions[(begin + i) * ad + j];
    out.tags[i] = data.tags[begin + i];
  }
  return out;
}

}  // namespace mflow
