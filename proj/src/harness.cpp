#include "mflow/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <mutex>
#include <numbers>
#include <stdexcept>

namespace mflow {

namespace {

double rel_error(double numeric, double analytic) {
  const double denom = std::abs(analytic);
  return denom > 0 ? std::abs(numeric - analytic) / denom : std::abs(numeric);
}

std::string fmt(double x, const char* spec = "%.6g") {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, x);
  return buf;
}

std::string fmt_mean_std(const MeanStd& m, double scale = 1.0, const char* spec = "%.3f") {
  return fmt(m.mean * scale, spec) + " +- " + fmt(m.std * scale, spec);
}

// Round-trip precision for machine-readable outputs.
std::string exact(double x) { return fmt(x, "%.17g"); }

std::string csv_join(const std::vector<std::string>& cells) {
  std::string out;
  for (std::size_t i = 0; i < cells.size(); ++i) out += (i ? "," : "") + cells[i];
  return out + "\n";
}

std::vector<std::string> strata_of(const AblationTable& t) {
  std::vector<std::string> names;
  for (const auto& c : t.cells)
    for (const auto& [name, _] : c.success)
      if (std::find(names.begin(), names.end(), name) == names.end()) names.push_back(name);
  std::sort(names.begin(), names.end());
  return names;
}

}  // namespace

// ---------------------------------------------------------------------------
// Starvation

double StarvationRow::mse_rel_error() const { return rel_error(d_mse, d_mse_analytic); }
double StarvationRow::cos_rel_error() const { return rel_error(d_cos, d_cos_analytic); }

std::vector<double> default_rho_star_grid(std::size_t n) {
  if (n < 2) throw std::invalid_argument("rho* grid needs at least two points");
  std::vector<double> g(n);
  for (std::size_t i = 0; i < n; ++i) g[i] = std::pow(10.0, -4.0 * static_cast<double>(i) / static_cast<double>(n - 1));
  return g;
}

std::vector<double> default_alpha_grid(std::size_t n) {
  if (n == 0) throw std::invalid_argument("alpha grid must be nonempty");
  std::vector<double> g(n);
  for (std::size_t k = 0; k < n; ++k) g[k] = std::numbers::pi * static_cast<double>(k + 1) / static_cast<double>(n + 2);
  return g;
}

std::vector<StarvationRow> starvation_sweep(const std::vector<double>& rho_star_grid,
                                            const std::vector<double>& alpha_grid, double rho) {
  if (rho_star_grid.empty() || alpha_grid.empty()) throw std::invalid_argument("starvation_sweep: empty grid");
  for (double a : alpha_grid)
    if (!(a > 0.0 && a < std::numbers::pi)) throw std::invalid_argument("starvation_sweep: alpha must lie in (0, pi)");
  std::vector<StarvationRow> rows;
  for (double rs : rho_star_grid) {
    for (double a : alpha_grid) {
      const DirectionalProbe p = directional_gradient_probe(rho, rs, a);
      rows.push_back({rs, a, std::abs(p.d_mse_dalpha), std::abs(p.analytic_mse), std::abs(p.d_cos_dalpha),
                      std::abs(p.analytic_cos)});
    }
  }
  return rows;
}

LineFit fit_mse_column(const std::vector<StarvationRow>& rows, double alpha) {
  double n = 0, sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (const auto& r : rows) {
    if (r.alpha != alpha) continue;
    n += 1;
    sx += r.rho_star;
    sy += r.d_mse;
    sxx += r.rho_star * r.rho_star;
    sxy += r.rho_star * r.d_mse;
  }
  if (n < 2) throw std::invalid_argument("fit_mse_column: fewer than two rows at this alpha");
  const double den = n * sxx - sx * sx;
  LineFit f;
  f.slope = (n * sxy - sx * sy) / den;
  f.intercept = (sy - f.slope * sx) / n;
  return f;
}

// ---------------------------------------------------------------------------
// Memory

MemoryRow memory_compare(const VelocityNet& net, const FlowBatch& batch, const ObjectiveConfig& cfg) {
  ObjectiveConfig jvp = cfg, dde = cfg;
  jvp.derivative_mode = DerivativeMode::Jvp;
  dde.derivative_mode = DerivativeMode::DdeFull;
  const TapeStats a = total_loss(net, batch, jvp).tape;
  const TapeStats b = total_loss(net, batch, dde).tape;
  MemoryRow row;
  row.depth = net.arch().hidden_dims.size();
  row.width = row.depth ? net.arch().hidden_dims.front() : 0;
  row.nodes_jvp = a.nodes;
  row.nodes_dde = b.nodes;
  row.saved_jvp = a.saved_elements;
  row.saved_dde = b.saved_elements;
  return row;
}

std::vector<MemoryRow> memory_sweep(const std::vector<std::size_t>& depths, std::size_t width, std::size_t batch,
                                    std::uint64_t seed) {
  std::vector<MemoryRow> rows;
  for (std::size_t depth : depths) {
    Architecture arch;
    arch.hidden_dims.assign(depth, width);
    const VelocityNet net = VelocityNet::init(seed, arch);
    Rng rng(derive_seed(seed, depth));
    Tensor actions = Tensor::zeros({batch, arch.action_dim});
    for (std::size_t i = 0; i < actions.size(); ++i) actions[i] = rng.normal();
    const ObjectiveConfig cfg;
    const FlowBatch b = make_batch(actions, Tensor::zeros({batch, 0}), rng, cfg);
    rows.push_back(memory_compare(net, b, cfg));
  }
  return rows;
}

// ---------------------------------------------------------------------------
// DDE convergence

FlowBatch interior_batch(std::size_t batch, const Architecture& arch, std::uint64_t seed) {
  Rng rng(seed);
  auto normal = [&](std::size_t cols) {
    Tensor x = Tensor::zeros({batch, cols});
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = rng.normal();
    return x;
  };
  Tensor z0 = normal(arch.action_dim);
  Tensor eps = normal(arch.action_dim);
  Tensor c = normal(arch.cond_dim);
  Tensor r = Tensor::zeros({batch}), t = Tensor::zeros({batch});
  for (std::size_t i = 0; i < batch; ++i) {
    t[i] = rng.uniform(0.1, 0.9);
    r[i] = rng.uniform(0.0, t[i]);
  }
  return make_batch_at(std::move(z0), std::move(eps), std::move(r), std::move(t), std::move(c));
}

std::vector<DdeConvergenceRow> dde_convergence(const VelocityNet& net, const FlowBatch& batch,
                                               const std::vector<double>& epsilons) {
  ObjectiveConfig cfg;
  cfg.derivative_mode = DerivativeMode::Jvp;
  const Tensor exact = time_derivative(net, batch, cfg).dudt;
  cfg.derivative_mode = DerivativeMode::DdeFull;
  std::vector<DdeConvergenceRow> rows;
  for (double e : epsilons) {
    cfg.dde_epsilon = e;
    cfg.validate();
    const Tensor approx = time_derivative(net, batch, cfg).dudt;
    double s = 0;
    for (std::size_t i = 0; i < exact.size(); ++i) s += (approx[i] - exact[i]) * (approx[i] - exact[i]);
    DdeConvergenceRow row{e, std::sqrt(s), 0.0};
    if (!rows.empty()) row.ratio = rows.back().error / row.error;
    rows.push_back(row);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Ablation

std::vector<AblationVariant> ablation_variants(const ObjectiveConfig& base) {
  ObjectiveConfig full = base;
  full.derivative_mode = DerivativeMode::Jvp;
  ObjectiveConfig no_dis = full;
  no_dis.lambda_disp = 0.0;
  ObjectiveConfig dde = full;
  dde.derivative_mode = DerivativeMode::DdeFull;
  ObjectiveConfig bare = no_dis;
  bare.lambda_cos = 0.0;
  return {{"full", full}, {"-L_dis", no_dis}, {"JVP->DDE", dde}, {"-L_dis-L_cos", bare}};
}

RunSummary summarize_run(const std::string& task, const std::string& variant, std::uint64_t seed,
                         const TrainResult& res) {
  RunSummary s;
  s.task = task;
  s.variant = variant;
  s.seed = seed;
  s.diverged = res.diverged;
  s.top_k_success = res.top_k_success;
  s.final_mmd = res.final_mmd;
  if (!res.state.evals.empty()) s.final_direction_cosine = res.state.evals.back().direction_cosine;
  return s;
}

const AblationCell& AblationTable::at(const std::string& task, const std::string& variant) const {
  for (const auto& c : cells)
    if (c.task == task && c.variant == variant) return c;
  throw std::out_of_range("ablation table has no cell " + task + "/" + variant);
}

AblationTable ablation_table(const std::vector<std::string>& tasks, const std::vector<std::string>& variants,
                             const std::vector<RunSummary>& runs) {
  AblationTable t{tasks, variants, {}};
  for (const auto& task : tasks) {
    for (const auto& variant : variants) {
      AblationCell cell;
      cell.task = task;
      cell.variant = variant;
      std::map<std::string, std::vector<double>> rates;
      std::vector<double> mmds;
      for (const auto& r : runs) {
        if (r.task != task || r.variant != variant) continue;
        if (r.diverged) ++cell.diverged;
        if (r.top_k_success.empty()) continue;  // no eval point survived
        cell.seeds.push_back(r.seed);
        for (const auto& [name, v] : r.top_k_success) rates[name].push_back(v);
        if (r.final_mmd) mmds.push_back(*r.final_mmd);
      }
      cell.present = !cell.seeds.empty();
      for (const auto& [name, v] : rates) cell.success[name] = mean_std(v);
      if (!mmds.empty()) cell.mmd = mean_std(mmds);
      t.cells.push_back(std::move(cell));
    }
  }
  return t;
}

AblationTable ablation_suite(const std::vector<AblationTask>& tasks, const TrainConfig& cfg,
                             const AblationOptions& opts) {
  cfg.validate();
  const auto variants = ablation_variants(cfg.objective);
  struct Job {
    std::size_t task, variant;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (std::size_t t = 0; t < tasks.size(); ++t)
    for (std::size_t v = 0; v < variants.size(); ++v)
      for (std::uint64_t seed : cfg.seeds) jobs.push_back({t, v, seed});

  std::vector<std::optional<RunSummary>> slots(jobs.size());
  std::mutex callback_mutex;
  parallel_for(jobs.size(), opts.jobs, [&](std::size_t i) {
    const Job& j = jobs[i];
    const AblationTask& task = tasks[j.task];
    TrainConfig run_cfg = cfg;
    run_cfg.objective = variants[j.variant].objective;
    try {
      const TrainResult res = train_seed(task.train, task.eval, run_cfg, j.seed);
      slots[i] = summarize_run(task.train.spec.name, variants[j.variant].name, j.seed, res);
      if (opts.on_run) {
        std::lock_guard lock(callback_mutex);
        opts.on_run(*slots[i], res);
      }
    } catch (const std::exception&) {
      slots[i].reset();
    }
  });

  std::vector<std::string> task_names, variant_names;
  for (const auto& t : tasks) task_names.push_back(t.train.spec.name);
  for (const auto& v : variants) variant_names.push_back(v.name);
  std::vector<RunSummary> runs;
  for (auto& s : slots)
    if (s) runs.push_back(std::move(*s));
  return ablation_table(task_names, variant_names, runs);
}

// ---------------------------------------------------------------------------
// Reports

EvalReport eval_report(const std::string& task, const std::vector<RunSummary>& runs) {
  EvalReport r;
  r.task = task;
  std::map<std::string, std::vector<double>> rates;
  std::vector<double> mmds, cosines;
  for (const auto& run : runs) {
    for (const auto& [name, v] : run.top_k_success) rates[name].push_back(v);
    if (run.final_mmd) mmds.push_back(*run.final_mmd);
    cosines.push_back(run.final_direction_cosine);
  }
  for (const auto& [name, v] : rates) r.success[name] = mean_std(v);
  if (!mmds.empty()) r.mmd = mean_std(mmds);
  r.direction_cosine = mean_std(cosines);
  return r;
}

nlohmann::json to_json(const StarvationRow& r) {
  return {{"rho_star", r.rho_star},           {"alpha", r.alpha},
          {"d_mse", r.d_mse},                 {"d_mse_analytic", r.d_mse_analytic},
          {"d_cos", r.d_cos},                 {"d_cos_analytic", r.d_cos_analytic},
          {"mse_rel_error", r.mse_rel_error()}, {"cos_rel_error", r.cos_rel_error()}};
}

nlohmann::json to_json(const MemoryRow& r) {
  return {{"depth", r.depth},         {"width", r.width},         {"nodes_jvp", r.nodes_jvp},
          {"nodes_dde", r.nodes_dde}, {"saved_jvp", r.saved_jvp}, {"saved_dde", r.saved_dde},
          {"ratio", r.ratio()}};
}

nlohmann::json to_json(const DdeConvergenceRow& r) {
  return {{"epsilon", r.epsilon}, {"error", r.error}, {"ratio", r.ratio}};
}

nlohmann::json to_json(const MeanStd& m) { return {{"mean", m.mean}, {"std", m.std}, {"n", m.n}}; }

nlohmann::json to_json(const AblationTable& t) {
  nlohmann::json j;
  j["tasks"] = t.tasks;
  j["variants"] = t.variants;
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& c : t.cells) {
    nlohmann::json cj{{"task", c.task}, {"variant", c.variant}, {"present", c.present}, {"seeds", c.seeds},
                      {"diverged", c.diverged}};
    nlohmann::json s = nlohmann::json::object();
    for (const auto& [name, m] : c.success) s[name] = to_json(m);
    cj["success"] = s;
    cj["mmd"] = c.mmd ? to_json(*c.mmd) : nlohmann::json(nullptr);
    cells.push_back(cj);
  }
  j["cells"] = cells;
  return j;
}

nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json j;
  j["task"] = r.task;
  nlohmann::json s = nlohmann::json::object();
  for (const auto& [name, m] : r.success) s[name] = to_json(m);
  j["success"] = s;
  j["mmd"] = r.mmd ? to_json(*r.mmd) : nlohmann::json(nullptr);
  j["direction_cosine"] = to_json(r.direction_cosine);
  j["tape_nodes"] = r.tape_nodes ? nlohmann::json{{"jvp_mode", r.tape_nodes->nodes_jvp}, {"dde_mode", r.tape_nodes->nodes_dde}}
                                 : nlohmann::json(nullptr);
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : r.starvation) rows.push_back(to_json(row));
  j["starvation"] = rows;
  return j;
}

std::string aligned_table(const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> widths;
  for (const auto& row : rows) {
    if (row.size() > widths.size()) widths.resize(row.size(), 0);
    for (std::size_t c = 0; c < row.size(); ++c) widths[c] = std::max(widths[c], row[c].size());
  }
  std::string out;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    std::string line;
    for (std::size_t c = 0; c < rows[r].size(); ++c) {
      if (c) line += "  ";
      line += rows[r][c];
      if (c + 1 < rows[r].size()) line += std::string(widths[c] - rows[r][c].size(), ' ');
    }
    out += line + "\n";
    if (r == 0) {
      std::size_t total = 0;
      for (std::size_t c = 0; c < widths.size(); ++c) total += widths[c] + (c ? 2 : 0);
      out += std::string(total, '-') + "\n";
    }
  }
  return out;
}

std::string starvation_text(const std::vector<StarvationRow>& rows) {
  std::vector<std::vector<std::string>> t{{"rho*", "alpha", "|dMSE/da|", "2 rho rho* sin a", "|dCos/da|", "sin a/(1+cos a)"}};
  for (const auto& r : rows) {
    t.push_back({fmt(r.rho_star, "%.4g"), fmt(r.alpha, "%.4f"), fmt(r.d_mse, "%.10g"), fmt(r.d_mse_analytic, "%.10g"),
                 fmt(r.d_cos, "%.10g"), fmt(r.d_cos_analytic, "%.10g")});
  }
  return aligned_table(t);
}

std::string memory_text(const std::vector<MemoryRow>& rows) {
  std::vector<std::vector<std::string>> t{{"depth", "width", "nodes JVP", "nodes DDE", "ratio", "saved JVP", "saved DDE"}};
  for (const auto& r : rows) {
    t.push_back({std::to_string(r.depth), std::to_string(r.width), std::to_string(r.nodes_jvp),
                 std::to_string(r.nodes_dde), fmt(r.ratio(), "%.4f"), std::to_string(r.saved_jvp),
                 std::to_string(r.saved_dde)});
  }
  return aligned_table(t);
}

std::string dde_text(const std::vector<DdeConvergenceRow>& rows) {
  std::vector<std::vector<std::string>> t{{"epsilon", "|DDE - JVP|", "shrink factor"}};
  for (const auto& r : rows) {
    t.push_back({fmt(r.epsilon, "%.4g"), fmt(r.error, "%.6e"), r.ratio > 0 ? fmt(r.ratio, "%.4f") : "-"});
  }
  return aligned_table(t);
}

std::string ablation_text(const AblationTable& t) {
  const auto strata = strata_of(t);
  std::vector<std::string> header{"task", "variant"};
  for (const auto& s : strata) header.push_back("success[" + s + "] %");
  header.push_back("mmd");
  header.push_back("seeds");
  std::vector<std::vector<std::string>> rows{header};
  for (const auto& c : t.cells) {
    std::vector<std::string> row{c.task, c.variant};
    for (const auto& s : strata) {
      const auto it = c.success.find(s);
      row.push_back(!c.present ? "absent" : it == c.success.end() ? "-" : fmt_mean_std(it->second, 100.0, "%.1f"));
    }
    row.push_back(c.mmd ? fmt_mean_std(*c.mmd, 1.0, "%.4f") : "-");
    row.push_back(std::to_string(c.seeds.size()) + (c.diverged ? " (" + std::to_string(c.diverged) + " diverged)" : ""));
    rows.push_back(std::move(row));
  }
  return aligned_table(rows);
}

std::string eval_text(const EvalReport& r) {
  std::vector<std::vector<std::string>> rows{{"metric", "mean +- std"}};
  for (const auto& [name, m] : r.success) rows.push_back({"success[" + name + "] %", fmt_mean_std(m, 100.0, "%.1f")});
  if (r.mmd) rows.push_back({"mmd", fmt_mean_std(*r.mmd, 1.0, "%.5f")});
  rows.push_back({"direction cosine", fmt_mean_std(r.direction_cosine, 1.0, "%.4f")});
  if (r.tape_nodes) {
    rows.push_back({"tape nodes JVP", std::to_string(r.tape_nodes->nodes_jvp)});
    rows.push_back({"tape nodes DDE", std::to_string(r.tape_nodes->nodes_dde)});
  }
  return "task " + r.task + "\n" + aligned_table(rows);
}

std::string starvation_csv(const std::vector<StarvationRow>& rows) {
  std::string out = csv_join({"rho_star", "alpha", "d_mse", "d_mse_analytic", "d_cos", "d_cos_analytic"});
  for (const auto& r : rows) {
    out += csv_join({exact(r.rho_star), exact(r.alpha), exact(r.d_mse), exact(r.d_mse_analytic), exact(r.d_cos),
                     exact(r.d_cos_analytic)});
  }
  return out;
}

std::string memory_csv(const std::vector<MemoryRow>& rows) {
  std::string out = csv_join({"depth", "width", "nodes_jvp", "nodes_dde", "ratio", "saved_jvp", "saved_dde"});
  for (const auto& r : rows) {
    out += csv_join({std::to_string(r.depth), std::to_string(r.width), std::to_string(r.nodes_jvp),
                     std::to_string(r.nodes_dde), exact(r.ratio()), std::to_string(r.saved_jvp),
                     std::to_string(r.saved_dde)});
  }
  return out;
}

std::string dde_csv(const std::vector<DdeConvergenceRow>& rows) {
  std::string out = csv_join({"epsilon", "error", "ratio"});
  for (const auto& r : rows) out += csv_join({exact(r.epsilon), exact(r.error), exact(r.ratio)});
  return out;
}

std::string ablation_csv(const AblationTable& t) {
  const auto strata = strata_of(t);
  std::vector<std::string> header{"task", "variant", "present", "seeds"};
  for (const auto& s : strata) {
    header.push_back("success_" + s + "_mean");
    header.push_back("success_" + s + "_std");
  }
  header.push_back("mmd_mean");
  header.push_back("mmd_std");
  std::string out = csv_join(header);
  for (const auto& c : t.cells) {
    std::vector<std::string> row{c.task, c.variant, c.present ? "1" : "0", std::to_string(c.seeds.size())};
    for (const auto& s : strata) {
      const auto it = c.success.find(s);
      row.push_back(it == c.success.end() ? "" : exact(it->second.mean));
      row.push_back(it == c.success.end() ? "" : exact(it->second.std));
    }
    row.push_back(c.mmd ? exact(c.mmd->mean) : "");
    row.push_back(c.mmd ? exact(c.mmd->std) : "");
    out += csv_join(row);
  }
  return out;
}

std::string curve_csv(const std::vector<MetricRecord>& log) {
  std::string out = csv_join({"seed", "step", "epoch", "mse", "dispersive", "cosine", "total", "mean_cos_alpha",
                              "tape_nodes", "success_all", "mmd"});
  for (const auto& r : log) {
    std::string success, mmd_cell;
    if (r.eval) {
      const auto it = r.eval->success.find("all");
      if (it != r.eval->success.end()) success = exact(it->second.rate());
      if (r.eval->mmd) mmd_cell = exact(*r.eval->mmd);
    }
    out += csv_join({std::to_string(r.seed), std::to_string(r.step), std::to_string(r.epoch), exact(r.terms.mse),
                     exact(r.terms.dispersive), exact(r.terms.cosine), exact(r.terms.total),
                     exact(r.terms.mean_cos_alpha), std::to_string(r.tape_nodes), success, mmd_cell});
  }
  return out;
}

}  // namespace mflow
