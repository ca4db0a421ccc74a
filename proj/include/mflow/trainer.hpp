#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mflow/network.hpp"
#include "mflow/objective.hpp"
#include "mflow/rng.hpp"
#include "mflow/tasks.hpp"

namespace mflow {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;

  friend bool operator==(const AdamConfig&, const AdamConfig&) = default;
};

struct AdamState {
  std::uint64_t t = 0;  // applied updates
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::uint64_t skipped = 0;  // updates dropped for non-finite gradients

  static AdamState zeros_like(const std::vector<Tensor>& params);
  friend bool operator==(const AdamState&, const AdamState&) = default;
};

/// Bias-corrected Adam with decoupled weight decay:
///   theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta).
/// Non-finite gradients leave everything but `skipped` untouched and return false.
bool adamw_step(std::vector<Tensor>& params, AdamState& state, const std::vector<Tensor>& grads, const AdamConfig& cfg);

struct TrainConfig {
  AdamConfig adam;
  std::size_t batch_size = 128;
  std::size_t epochs = 200;
  std::size_t eval_every = 20;   // epochs between evaluations
  std::size_t log_every = 10;    // steps between loss records
  std::size_t top_k = 5;
  double divergence_threshold = 1e6;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  ObjectiveConfig objective;
  Architecture arch;

  void validate() const;
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

struct EvalPoint {
  std::uint64_t step = 0;
  std::size_t epoch = 0;
  SuccessReport success;
  std::optional<double> mmd;
  double direction_cosine = 0.0;  // mean cosine between sampled and held-out actions
};

struct MetricRecord {
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
  std::size_t epoch = 0;
  LossTerms terms;
  std::size_t tape_nodes = 0;
  std::optional<EvalPoint> eval;
};

nlohmann::json to_json(const MetricRecord& r);
std::string to_jsonl(const std::vector<MetricRecord>& log);

/// Everything needed to continue a run exactly.
struct TrainState {
  std::uint64_t seed = 0;
  std::uint64_t step = 0;  // batches processed
  std::size_t epoch = 0;   // completed epochs
  VelocityNet net;
  AdamState adam;
  Rng data_rng;
  Rng noise_rng;
  Rng time_rng;
  std::vector<EvalPoint> evals;

  /// Fresh state: net initialised from a seed derived from `seed`.
  static TrainState initial(std::uint64_t seed, const Architecture& arch);
};

nlohmann::json state_to_json(const TrainState& s);
TrainState state_from_json(const nlohmann::json& j);
void save_state(const TrainState& s, const std::filesystem::path& path);
TrainState load_state(const std::filesystem::path& path);

struct TrainResult {
  TrainState state;
  std::vector<MetricRecord> log;
  bool diverged = false;
  std::string abort_reason;
  /// Per stratum: mean of the top_k success rates over the eval series.
  std::map<std::string, double> top_k_success;
  std::optional<double> best_mmd;   // smallest eval MMD
  std::optional<double> final_mmd;  // MMD at the last eval point
};

/// Fills top_k_success, best_mmd and final_mmd from res.state.evals.
void summarize_evals(TrainResult& res, std::size_t k);

struct TrainHooks {
  /// Written at every epoch boundary when set; left untouched on divergence.
  std::optional<std::filesystem::path> checkpoint;
  /// Stop after this many completed epochs (the state is returned for resuming).
  std::optional<std::size_t> stop_after_epoch;
};

/// The architecture's action/cond dims are taken from the dataset.
Architecture architecture_for(const TrainConfig& cfg, const TaskSpec& spec);

/// Runs (or continues) one seed. eval_data supplies held-out conditions and actions.
TrainResult train(const Dataset& data, const Dataset& eval_data, const TrainConfig& cfg, TrainState state,
                  const TrainHooks& hooks = {});

/// Starts a fresh run for `seed`.
TrainResult train_seed(const Dataset& data, const Dataset& eval_data, const TrainConfig& cfg, std::uint64_t seed,
                       const TrainHooks& hooks = {});

/// Evaluates one-step samples of `net` on the held-out set.
EvalPoint evaluate(const VelocityNet& net, const Dataset& eval_data, std::uint64_t sample_seed);

/// Runs `count` independent jobs on up to `jobs` threads; results land by index.
void parallel_for(std::size_t count, std::size_t jobs, const std::function<void(std::size_t)>& body);

}  // namespace mflow
