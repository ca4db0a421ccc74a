// mflow: data generation, training, sampling, evaluation and probes.
//
// Every command reads a config (defaults, then --config, then --set overrides)
// and writes under --out. Files are written atomically; manifest.json records,
// per command, the config hash, the effective config (config/<command>.ini),
// the seeds and the files produced.
//
// Exit status: 0 success, 1 a check inside the command failed, 2 bad usage or
// config, 3 any other error.

#include <CLI11.hpp>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mflow/config.hpp"
#include "mflow/harness.hpp"
#include "mflow/io.hpp"
#include "mflow/sampler.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mflow;

namespace {

constexpr int kCheckFailed = 1;
constexpr int kUsage = 2;
constexpr int kError = 3;

struct Options {
  std::string config_path;
  std::string out;
  std::vector<std::string> overrides;
  std::string seeds;
  std::size_t jobs = 1;
  bool emit_csv = false;
  bool quiet = false;
  std::optional<std::uint64_t> sample_seed;  // sample: which trained seed
};

struct CheckFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Output directory plus the manifest being built for one command.
class Outputs {
 public:
  Outputs(fs::path root, std::string command, const Config& cfg) : root_(std::move(root)), command_(std::move(command)) {
    fs::create_directories(root_);
    const fs::path m = root_ / "manifest.json";
    if (fs::exists(m)) {
      manifest_ = json::parse(read_file(m));
      if (manifest_.value("format", "") != "mflow-manifest") throw std::runtime_error(m.string() + " is not an mflow manifest");
    } else {
      manifest_ = {{"format", "mflow-manifest"}, {"commands", json::object()}};
    }
    entry_ = {{"config_hash", cfg.hash()}, {"files", json::array()}};
    config_ini_ = cfg.to_ini();
  }

  const fs::path& root() const { return root_; }
  const json& manifest() const { return manifest_; }
  json& entry() { return entry_; }

  /// Writes root/rel atomically and records it.
  void write(const std::string& rel, const std::string& content) {
    const fs::path p = root_ / rel;
    fs::create_directories(p.parent_path());
    write_file_atomic(p, content);
    entry_["files"].push_back(rel);
  }

  /// Top-level manifest field, written at commit.
  void set_top(const std::string& key, json value) { top_[key] = std::move(value); }

  /// Records the command in the manifest. Called only after every file is in place.
  void commit(const std::vector<std::uint64_t>& seeds) {
    const std::string cfg_rel = "config/" + command_ + ".ini";
    fs::create_directories(root_ / "config");
    write_file_atomic(root_ / cfg_rel, config_ini_);
    entry_["config"] = cfg_rel;
    entry_["seeds"] = seeds;
    manifest_["config_hash"] = entry_["config_hash"];
    manifest_["commands"][command_] = entry_;
    for (auto& [key, value] : top_.items()) manifest_[key] = value;
    write_file_atomic(root_ / "manifest.json", manifest_.dump(2) + "\n");
  }

 private:
  fs::path root_;
  std::string command_;
  json manifest_;
  json entry_;
  json top_ = json::object();
  std::string config_ini_;
};

Config load_config(const Options& o) {
  Config cfg = o.config_path.empty() ? Config::defaults() : Config::load(o.config_path);
  cfg.apply_overrides(o.overrides);
  if (!o.seeds.empty()) cfg.set("trainer.seeds", o.seeds);
  return cfg;
}

void say(const Options& o, const std::string& text) {
  if (!o.quiet) std::cout << text << std::flush;
}

std::string seed_dir(std::uint64_t seed) { return "seed_" + std::to_string(seed); }

std::string variant_slug(const std::string& name) {
  if (name == "full") return "full";
  if (name == "-L_dis") return "no_dis";
  if (name == "JVP->DDE") return "dde";
  if (name == "-L_dis-L_cos") return "no_dis_no_cos";
  return name;
}

struct TaskData {
  Dataset train;
  Dataset eval;
};

TaskData make_data(const Config& cfg, const TaskSpec& spec) {
  const std::uint64_t seed = cfg.get_u64("data.seed");
  return {generate(spec, cfg.get_size("data.n_train"), derive_seed(seed, 0)),
          generate(spec, cfg.get_size("data.n_eval"), derive_seed(seed, 1))};
}

/// Datasets named by a previous gen-data, or freshly generated ones.
TaskData datasets_for(const Config& cfg, const Outputs& out) {
  const TaskSpec spec = task_spec(cfg);
  const json& m = out.manifest();
  if (m.contains("datasets")) {
    TaskData d{read_dataset(out.root() / m["datasets"]["train"].get<std::string>()),
               read_dataset(out.root() / m["datasets"]["eval"].get<std::string>())};
    if (!(d.train.spec == spec)) {
      throw std::runtime_error("datasets in " + out.root().string() + " were generated for task '" + d.train.spec.name +
                               "' with different settings; rerun gen-data");
    }
    return d;
  }
  return make_data(cfg, spec);
}

// ---------------------------------------------------------------------------

int cmd_gen_data(const Options& o) {
  const Config cfg = load_config(o);
  Outputs out(o.out, "gen-data", cfg);
  const TaskData d = make_data(cfg, task_spec(cfg));
  out.write("data/train.txt", dataset_to_text(d.train));
  out.write("data/eval.txt", dataset_to_text(d.eval));
  out.set_top("datasets", {{"train", "data/train.txt"}, {"eval", "data/eval.txt"}});
  out.commit({});
  say(o, "wrote " + std::to_string(d.train.size()) + " training and " + std::to_string(d.eval.size()) + " eval rows of " +
             d.train.spec.name + "\n");
  return 0;
}

int cmd_train(const Options& o) {
  const Config cfg = load_config(o);
  const TrainConfig tc = train_config(cfg);
  Outputs out(o.out, "train", cfg);
  const TaskData d = datasets_for(cfg, out);

  std::vector<TrainResult> results(tc.seeds.size());
  parallel_for(tc.seeds.size(), o.jobs,
               [&](std::size_t i) { results[i] = train_seed(d.train, d.eval, tc, tc.seeds[i]); });

  json checkpoints = json::object();
  std::vector<RunSummary> runs;
  bool diverged = false;
  for (std::size_t i = 0; i < results.size(); ++i) {
    const auto& r = results[i];
    const std::string dir = "train/" + seed_dir(tc.seeds[i]) + "/";
    out.write(dir + "checkpoint.json", state_to_json(r.state).dump());
    out.write(dir + "metrics.jsonl", to_jsonl(r.log));
    if (o.emit_csv) out.write(dir + "curve.csv", curve_csv(r.log));
    checkpoints[std::to_string(tc.seeds[i])] = dir + "checkpoint.json";
    runs.push_back(summarize_run(d.train.spec.name, "train", tc.seeds[i], r));
    if (r.diverged) {
      diverged = true;
      say(o, "seed " + std::to_string(tc.seeds[i]) + " diverged: " + r.abort_reason + "\n");
    }
  }
  const EvalReport report = eval_report(d.train.spec.name, runs);
  out.write("train/summary.json", to_json(report).dump(2) + "\n");
  out.entry()["checkpoints"] = checkpoints;
  out.commit(tc.seeds);
  say(o, eval_text(report));
  return diverged ? kCheckFailed : 0;
}

std::map<std::uint64_t, TrainState> load_checkpoints(const Outputs& out) {
  const json& m = out.manifest();
  if (!m["commands"].contains("train")) throw std::runtime_error("no train run recorded in " + out.root().string());
  std::map<std::uint64_t, TrainState> states;
  for (const auto& [seed, rel] : m["commands"]["train"]["checkpoints"].items()) {
    states.emplace(std::stoull(seed), load_state(out.root() / rel.get<std::string>()));
  }
  return states;
}

int cmd_sample(const Options& o) {
  const Config cfg = load_config(o);
  Outputs out(o.out, "sample", cfg);
  const auto states = load_checkpoints(out);
  const TaskData d = datasets_for(cfg, out);
  const std::uint64_t which = o.sample_seed.value_or(states.begin()->first);
  const auto it = states.find(which);
  if (it == states.end()) throw std::runtime_error("no checkpoint for seed " + std::to_string(which));

  const std::size_t n = cfg.get_size("sampler.n");
  const std::size_t dc = d.eval.spec.cond_dim;
  Tensor conds = Tensor::zeros({n, dc});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < dc; ++j) conds[i * dc + j] = d.eval.conds[(i % d.eval.size()) * dc + j];
  const SampleRequest req{conds, cfg.get_size("sampler.nfe"), cfg.get_u64("sampler.seed")};
  const Tensor a = sample_multi_step(it->second.net, req);

  std::string csv;
  for (std::size_t j = 0; j < dc; ++j) csv += "c" + std::to_string(j) + ",";
  for (std::size_t j = 0; j < a.cols(); ++j) csv += "a" + std::to_string(j) + (j + 1 < a.cols() ? "," : "\n");
  char buf[32];
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < dc; ++j) {
      std::snprintf(buf, sizeof buf, "%.17g,", conds[i * dc + j]);
      csv += buf;
    }
    for (std::size_t j = 0; j < a.cols(); ++j) {
      std::snprintf(buf, sizeof buf, j + 1 < a.cols() ? "%.17g," : "%.17g\n", a.at(i, j));
      csv += buf;
    }
  }
  out.write("samples/" + seed_dir(which) + ".csv", csv);
  out.commit({which});
  say(o, "wrote " + std::to_string(n) + " samples (nfe " + std::to_string(req.nfe) + ") from seed " +
             std::to_string(which) + "\n");
  return 0;
}

int cmd_eval(const Options& o) {
  const Config cfg = load_config(o);
  Outputs out(o.out, "eval", cfg);
  const auto states = load_checkpoints(out);
  const TaskData d = datasets_for(cfg, out);
  const std::size_t k = cfg.get_size("trainer.top_k");

  std::vector<RunSummary> runs;
  std::vector<std::uint64_t> seeds;
  for (const auto& [seed, state] : states) {
    TrainResult r;
    r.state = state;
    summarize_evals(r, k);
    runs.push_back(summarize_run(d.train.spec.name, "eval", seed, r));
    seeds.push_back(seed);
  }
  EvalReport report = eval_report(d.train.spec.name, runs);
  const VelocityNet& net = states.begin()->second.net;
  report.tape_nodes = memory_compare(net, interior_batch(cfg.get_size("probe.batch"), net.arch(), 0), objective_config(cfg));

  out.write("eval/report.json", to_json(report).dump(2) + "\n");
  out.write("eval/report.txt", eval_text(report));
  out.commit(seeds);
  say(o, eval_text(report));
  return 0;
}

int cmd_ablate(const Options& o) {
  const Config cfg = load_config(o);
  const TrainConfig tc = ablation_train_config(cfg);
  Outputs out(o.out, "ablate", cfg);

  std::vector<AblationTask> tasks;
  for (const auto& name : cfg.get_strings("ablation.tasks")) {
    TaskData d = make_data(cfg, task_spec(cfg, name));
    tasks.push_back({std::move(d.train), std::move(d.eval)});
  }
  AblationOptions opts;
  opts.jobs = o.jobs;
  std::map<std::string, std::string> files;
  opts.on_run = [&](const RunSummary& s, const TrainResult& r) {
    const std::string dir = "ablation/runs/" + s.task + "/" + variant_slug(s.variant) + "/" + seed_dir(s.seed) + "/";
    files[dir + "metrics.jsonl"] = to_jsonl(r.log);
    files[dir + "checkpoint.json"] = state_to_json(r.state).dump();
    if (o.emit_csv) files[dir + "curve.csv"] = curve_csv(r.log);
  };
  const AblationTable t = ablation_suite(tasks, tc, opts);
  for (const auto& [rel, content] : files) out.write(rel, content);
  out.write("ablation/table.json", to_json(t).dump(2) + "\n");
  out.write("ablation/table.txt", ablation_text(t));
  if (o.emit_csv) out.write("ablation/table.csv", ablation_csv(t));
  out.commit(tc.seeds);
  say(o, ablation_text(t));

  for (const auto& task : t.tasks)
    if (!t.at(task, "full").present) throw CheckFailure("full configuration produced no result on " + task);
  return 0;
}

int cmd_probe_starvation(const Options& o) {
  const Config cfg = load_config(o);
  Outputs out(o.out, "probe-starvation", cfg);
  const auto rows = starvation_sweep(default_rho_star_grid(cfg.get_size("probe.rho_star_points")),
                                     default_alpha_grid(cfg.get_size("probe.alpha_points")), cfg.get_double("probe.rho"));
  json j = json::array();
  for (const auto& r : rows) j.push_back(to_json(r));
  out.write("probes/starvation.json", j.dump(2) + "\n");
  out.write("probes/starvation.txt", starvation_text(rows));
  if (o.emit_csv) out.write("probes/starvation.csv", starvation_csv(rows));
  out.commit({});
  say(o, starvation_text(rows));
  for (const auto& r : rows) {
    if (r.mse_rel_error() > 1e-6 || r.cos_rel_error() > 1e-6) {
      throw CheckFailure("numeric derivative departs from its closed form at rho*=" + std::to_string(r.rho_star) +
                         " alpha=" + std::to_string(r.alpha));
    }
  }
  return 0;
}

int cmd_probe_memory(const Options& o) {
  const Config cfg = load_config(o);
  Outputs out(o.out, "probe-memory", cfg);
  const auto rows = memory_sweep(cfg.get_sizes("probe.depths"), cfg.get_size("probe.width"), cfg.get_size("probe.batch"),
                                 cfg.get_u64("probe.seed"));
  json j = json::array();
  for (const auto& r : rows) j.push_back(to_json(r));
  out.write("probes/memory.json", j.dump(2) + "\n");
  out.write("probes/memory.txt", memory_text(rows));
  if (o.emit_csv) out.write("probes/memory.csv", memory_csv(rows));
  out.commit({});
  say(o, memory_text(rows));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].nodes_dde >= rows[i].nodes_jvp) throw CheckFailure("DDE tape is not smaller at depth " + std::to_string(rows[i].depth));
    if (i && rows[i].ratio() >= rows[i - 1].ratio()) throw CheckFailure("savings do not grow at depth " + std::to_string(rows[i].depth));
  }
  return 0;
}

int cmd_probe_dde(const Options& o) {
  const Config cfg = load_config(o);
  Outputs out(o.out, "probe-dde", cfg);
  Architecture arch = architecture(cfg);
  arch.hidden_dims.assign(arch.hidden_dims.size(), cfg.get_size("probe.width"));
  const std::uint64_t seed = cfg.get_u64("probe.seed");
  const VelocityNet net = VelocityNet::init(derive_seed(seed, 0), arch);
  const auto rows = dde_convergence(net, interior_batch(cfg.get_size("probe.batch"), arch, derive_seed(seed, 1)),
                                    cfg.get_doubles("probe.dde_epsilons"));
  json j = json::array();
  for (const auto& r : rows) j.push_back(to_json(r));
  out.write("probes/dde.json", j.dump(2) + "\n");
  out.write("probes/dde.txt", dde_text(rows));
  if (o.emit_csv) out.write("probes/dde.csv", dde_csv(rows));
  out.commit({});
  say(o, dde_text(rows));
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const double expected = std::pow(rows[i - 1].epsilon / rows[i].epsilon, 2) * 3.5 / 4.0;
    if (rows[i].ratio < expected) throw CheckFailure("DDE error shrinks slower than second order at eps=" + std::to_string(rows[i].epsilon));
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MeanFlow policy training and probes"};
  app.require_subcommand(1);
  Options o;

  struct Command {
    const char* name;
    const char* help;
    int (*run)(const Options&);
  };
  const std::vector<Command> commands{
      {"gen-data", "Generate training and held-out datasets for data.task", cmd_gen_data},
      {"train", "Train one model per seed", cmd_train},
      {"sample", "Draw actions from a trained checkpoint", cmd_sample},
      {"eval", "Aggregate the evaluation series of trained checkpoints", cmd_eval},
      {"ablate", "Train the four ablation variants on every ablation task", cmd_ablate},
      {"probe-starvation", "Directional gradient of MSE and cosine losses over (rho*, alpha)", cmd_probe_starvation},
      {"probe-memory", "Tape size under JVP and DDE targets across depths", cmd_probe_memory},
      {"probe-dde", "Convergence of the DDE derivative to the JVP", cmd_probe_dde},
  };
  std::map<CLI::App*, int (*)(const Options&)> dispatch;
  for (const auto& c : commands) {
    CLI::App* sub = app.add_subcommand(c.name, c.help);
    sub->add_option("-c,--config", o.config_path, "INI config file")->check(CLI::ExistingFile);
    sub->add_option("-o,--out", o.out, "Output directory")->required();
    sub->add_option("--set", o.overrides, "Override a key, e.g. --set trainer.lr=3e-4")->allow_extra_args(false);
    sub->add_option("--seeds", o.seeds, "Comma-separated seeds (same as --set trainer.seeds=...)");
    sub->add_option("-j,--jobs", o.jobs, "Seeds or runs trained in parallel")->check(CLI::PositiveNumber);
    sub->add_flag("--emit-csv", o.emit_csv, "Also write plot-ready CSV files");
    sub->add_flag("-q,--quiet", o.quiet, "Print nothing on success");
    if (std::string(c.name) == "sample") sub->add_option("--seed", o.sample_seed, "Trained seed to sample from");
    dispatch[sub] = c.run;
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsage;
  }

  try {
    for (const auto& [sub, run] : dispatch)
      if (sub->parsed()) return run(o);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const CheckFailure& e) {
    std::cerr << "check failed: " << e.what() << "\n";
    return kCheckFailed;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kError;
  }
  return kUsage;
}
