#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mflow/metrics.hpp"
#include "mflow/trainer.hpp"

namespace mflow {

// ---------------------------------------------------------------------------
// Gradient starvation probe

struct StarvationRow {
  double rho_star = 0.0;
  double alpha = 0.0;
  double d_mse = 0.0;           // |dL_mse/dalpha|, numeric
  double d_mse_analytic = 0.0;  // 2 rho rho* sin(alpha)
  double d_cos = 0.0;           // |dL_cos/dalpha|, numeric
  double d_cos_analytic = 0.0;  // sin(alpha) / (1 + cos(alpha))

  double mse_rel_error() const;
  double cos_rel_error() const;
};

/// rho* from 1 down to 1e-4, log spaced.
std::vector<double> default_rho_star_grid(std::size_t n = 10);
/// alpha = pi k / (n + 2), k = 1..n: strictly inside (0, pi), and through pi/2 when n is even.
std::vector<double> default_alpha_grid(std::size_t n = 10);

/// One row per (rho*, alpha), rho* major.
std::vector<StarvationRow> starvation_sweep(const std::vector<double>& rho_star_grid,
                                            const std::vector<double>& alpha_grid, double rho = 1.0);

/// Least-squares line through the (rho*, |dL_mse/dalpha|) points at one alpha.
struct LineFit {
  double slope = 0.0;
  double intercept = 0.0;
};
LineFit fit_mse_column(const std::vector<StarvationRow>& rows, double alpha);

// ---------------------------------------------------------------------------
// Tape memory

struct MemoryRow {
  std::size_t depth = 0;
  std::size_t width = 0;
  std::size_t nodes_jvp = 0;
  std::size_t nodes_dde = 0;
  std::size_t saved_jvp = 0;  // saved tensor elements
  std::size_t saved_dde = 0;

  double ratio() const { return static_cast<double>(nodes_dde) / static_cast<double>(nodes_jvp); }
};

/// Tape sizes for one loss+gradient step under JVP and DDE_full on the same net and batch.
MemoryRow memory_compare(const VelocityNet& net, const FlowBatch& batch, const ObjectiveConfig& cfg);

/// memory_compare over hidden depths, each net and batch drawn from `seed`.
std::vector<MemoryRow> memory_sweep(const std::vector<std::size_t>& depths, std::size_t width, std::size_t batch,
                                    std::uint64_t seed = 0);

// ---------------------------------------------------------------------------
// DDE convergence

struct DdeConvergenceRow {
  double epsilon = 0.0;
  double error = 0.0;  // |du/dt_DDE_full - du/dt_JVP|, Frobenius norm
  double ratio = 0.0;  // error at the previous (larger) epsilon over this one; 0 on the first row
};

/// Batch with t in [0.1, 0.9] and r in [0, t], so every stencil stays two-sided for eps < 0.1.
FlowBatch interior_batch(std::size_t batch, const Architecture& arch, std::uint64_t seed);

std::vector<DdeConvergenceRow> dde_convergence(const VelocityNet& net, const FlowBatch& batch,
                                               const std::vector<double>& epsilons);

// ---------------------------------------------------------------------------
// Ablation

struct AblationVariant {
  std::string name;
  ObjectiveConfig objective;
};

/// full, -L_dis, JVP->DDE, -L_dis-L_cos, derived from `base`.
std::vector<AblationVariant> ablation_variants(const ObjectiveConfig& base);

/// What one training run contributes to the table.
struct RunSummary {
  std::string task;
  std::string variant;
  std::uint64_t seed = 0;
  bool diverged = false;
  std::map<std::string, double> top_k_success;
  std::optional<double> final_mmd;
  double final_direction_cosine = 0.0;
};

RunSummary summarize_run(const std::string& task, const std::string& variant, std::uint64_t seed,
                         const TrainResult& res);

struct AblationCell {
  std::string task;
  std::string variant;
  bool present = false;  // false when no seed produced an eval
  std::vector<std::uint64_t> seeds;
  std::size_t diverged = 0;
  std::map<std::string, MeanStd> success;  // by stratum
  std::optional<MeanStd> mmd;
};

struct AblationTable {
  std::vector<std::string> tasks;
  std::vector<std::string> variants;
  std::vector<AblationCell> cells;  // task major, variant minor

  const AblationCell& at(const std::string& task, const std::string& variant) const;
};

/// Builds the table from whatever runs exist; a (task, variant) with no usable run is absent.
AblationTable ablation_table(const std::vector<std::string>& tasks, const std::vector<std::string>& variants,
                             const std::vector<RunSummary>& runs);

struct AblationTask {
  Dataset train;
  Dataset eval;
};

struct AblationOptions {
  std::size_t jobs = 1;
  /// Called once per finished run (from the worker thread); may persist logs or checkpoints.
  std::function<void(const RunSummary&, const TrainResult&)> on_run;
};

/// Trains every (task, variant, seed) and tabulates. A run that throws leaves its slot empty.
AblationTable ablation_suite(const std::vector<AblationTask>& tasks, const TrainConfig& cfg,
                             const AblationOptions& opts = {});

// ---------------------------------------------------------------------------
// Reports

struct EvalReport {
  std::string task;
  std::map<std::string, MeanStd> success;  // top-k per seed, then across seeds
  std::optional<MeanStd> mmd;              // final eval point
  MeanStd direction_cosine;                // final eval point
  std::optional<MemoryRow> tape_nodes;
  std::vector<StarvationRow> starvation;
};

EvalReport eval_report(const std::string& task, const std::vector<RunSummary>& runs);

nlohmann::json to_json(const StarvationRow& r);
nlohmann::json to_json(const MemoryRow& r);
nlohmann::json to_json(const DdeConvergenceRow& r);
nlohmann::json to_json(const MeanStd& m);
nlohmann::json to_json(const AblationTable& t);
nlohmann::json to_json(const EvalReport& r);

std::string starvation_text(const std::vector<StarvationRow>& rows);
std::string memory_text(const std::vector<MemoryRow>& rows);
std::string dde_text(const std::vector<DdeConvergenceRow>& rows);
std::string ablation_text(const AblationTable& t);
std::string eval_text(const EvalReport& r);

std::string starvation_csv(const std::vector<StarvationRow>& rows);
std::string memory_csv(const std::vector<MemoryRow>& rows);
std::string dde_csv(const std::vector<DdeConvergenceRow>& rows);
std::string ablation_csv(const AblationTable& t);
/// Training curve: one row per metric record.
std::string curve_csv(const std::vector<MetricRecord>& log);

/// Columns padded to their widest cell; the first row is the header.
std::string aligned_table(const std::vector<std::vector<std::string>>& rows);

}  // namespace mflow
