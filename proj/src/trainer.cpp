#include "mflow/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <numeric>
#include <thread>

#include "mflow/io.hpp"
#include "mflow/metrics.hpp"
#include "mflow/sampler.hpp"

namespace mflow {

namespace {

// Child streams derived from a run seed.
enum Stream : std::uint64_t { kInitStream = 0, kDataStream = 1, kNoiseStream = 2, kTimeStream = 3, kEvalStream = 4 };

bool all_finite(const std::vector<Tensor>& xs) {
  for (const auto& x : xs)
    if (!x.all_finite()) return false;
  return true;
}

nlohmann::json tensors_to_json(const std::vector<Tensor>& xs) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& x : xs) out.push_back(x.values());
  return out;
}

std::vector<Tensor> tensors_from_json(const nlohmann::json& j, const std::vector<Tensor>& like) {
  if (!j.is_array() || j.size() != like.size()) throw std::invalid_argument("checkpoint: moment list does not match parameters");
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < like.size(); ++i) out.emplace_back(like[i].shape(), j[i].get<std::vector<double>>());
  return out;
}

nlohmann::json eval_to_json(const EvalPoint& e) {
  nlohmann::json j;
  j["step"] = e.step;
  j["epoch"] = e.epoch;
  nlohmann::json strata = nlohmann::json::object();
  for (const auto& [name, s] : e.success) strata[name] = {{"count", s.count}, {"successes", s.successes}, {"rate", s.rate()}};
  j["success_by_stratum"] = strata;
  if (e.mmd) j["mmd"] = *e.mmd;
  j["direction_cosine"] = e.direction_cosine;
  return j;
}

EvalPoint eval_from_json(const nlohmann::json& j) {
  EvalPoint e;
  e.step = j.at("step").get<std::uint64_t>();
  e.epoch = j.at("epoch").get<std::size_t>();
  for (const auto& [name, s] : j.at("success_by_stratum").items()) {
    e.success[name] = {s.at("count").get<std::size_t>(), s.at("successes").get<std::size_t>()};
  }
  if (j.contains("mmd")) e.mmd = j.at("mmd").get<double>();
  e.direction_cosine = j.at("direction_cosine").get<double>();
  return e;
}

}  // namespace

void summarize_evals(TrainResult& res, std::size_t k) {
  std::map<std::string, std::vector<double>> series;
  for (const auto& e : res.state.evals) {
    for (const auto& [name, s] : e.success) series[name].push_back(s.rate());
    if (e.mmd) res.best_mmd = res.best_mmd ? std::min(*res.best_mmd, *e.mmd) : *e.mmd;
  }
  for (const auto& [name, values] : series) res.top_k_success[name] = top_k_mean(values, k);
  if (!res.state.evals.empty()) res.final_mmd = res.state.evals.back().mmd;
}

// ---------------------------------------------------------------------------
// Optimizer

AdamState AdamState::zeros_like(const std::vector<Tensor>& params) {
  AdamState s;
  for (const auto& p : params) {
    s.m.push_back(Tensor::zeros(p.shape()));
    s.v.push_back(Tensor::zeros(p.shape()));
  }
  return s;
}

bool adamw_step(std::vector<Tensor>& params, AdamState& state, const std::vector<Tensor>& grads, const AdamConfig& cfg) {
  if (grads.size() != params.size() || state.m.size() != params.size() || state.v.size() != params.size()) {
    throw std::invalid_argument("adamw_step: parameter, gradient and moment lists differ in length");
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (grads[k].shape() != params[k].shape()) throw ShapeError("adamw_step", grads[k].shape(), params[k].shape());
  }
  if (!all_finite(grads)) {
    ++state.skipped;
    return false;
  }
  ++state.t;
  const double t = static_cast<double>(state.t);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& p = params[k];
    Tensor& m = state.m[k];
    Tensor& v = state.v[k];
    const Tensor& g = grads[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double m_hat = m[i] / c1;
      const double v_hat = v[i] / c2;
      p[i] -= cfg.lr * (m_hat / (std::sqrt(v_hat) + cfg.eps) + cfg.weight_decay * p[i]);
    }
  }
  return true;
}

// ---------------------------------------------------------------------------
// Config and state

void TrainConfig::validate() const {
  if (!(adam.lr > 0.0)) throw std::invalid_argument("train: lr must be positive");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0) || !(adam.beta2 >= 0.0 && adam.beta2 < 1.0)) {
    throw std::invalid_argument("train: betas must lie in [0, 1)");
  }
  if (!(adam.eps > 0.0)) throw std::invalid_argument("train: adam eps must be positive");
  if (!(adam.weight_decay >= 0.0)) throw std::invalid_argument("train: weight_decay must be non-negative");
  if (batch_size == 0) throw std::invalid_argument("train: batch_size must be positive");
  if (eval_every == 0) throw std::invalid_argument("train: eval_every must be positive");
  if (epochs > 0 && eval_every > epochs) throw std::invalid_argument("train: eval_every must not exceed epochs");
  if (log_every == 0) throw std::invalid_argument("train: log_every must be positive");
  if (top_k == 0) throw std::invalid_argument("train: top_k must be positive");
  if (seeds.empty()) throw std::invalid_argument("train: at least one seed is required");
  if (!(divergence_threshold > 0.0)) throw std::invalid_argument("train: divergence_threshold must be positive");
  objective.validate();
  arch.validate();
}

TrainState TrainState::initial(std::uint64_t seed, const Architecture& arch) {
  TrainState s;
  s.seed = seed;
  s.net = VelocityNet::init(derive_seed(seed, kInitStream), arch);
  s.adam = AdamState::zeros_like(s.net.parameters());
  s.data_rng = Rng(derive_seed(seed, kDataStream));
  s.noise_rng = Rng(derive_seed(seed, kNoiseStream));
  s.time_rng = Rng(derive_seed(seed, kTimeStream));
  return s;
}

nlohmann::json state_to_json(const TrainState& s) {
  nlohmann::json j;
  j["format"] = "mflow-train-state";
  j["version"] = 1;
  j["seed"] = s.seed;
  j["step"] = s.step;
  j["epoch"] = s.epoch;
  j["network"] = network_to_json(s.net);
  j["adam"] = {{"t", s.adam.t}, {"skipped", s.adam.skipped}, {"m", tensors_to_json(s.adam.m)}, {"v", tensors_to_json(s.adam.v)}};
  j["rng"] = {{"data", s.data_rng.state()}, {"noise", s.noise_rng.state()}, {"time", s.time_rng.state()}};
  nlohmann::json evals = nlohmann::json::array();
  for (const auto& e : s.evals) evals.push_back(eval_to_json(e));
  j["evals"] = evals;
  return j;
}

TrainState state_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "mflow-train-state") throw std::invalid_argument("not a training checkpoint");
  TrainState s;
  s.seed = j.at("seed").get<std::uint64_t>();
  s.step = j.at("step").get<std::uint64_t>();
  s.epoch = j.at("epoch").get<std::size_t>();
  s.net = network_from_json(j.at("network"));
  const auto& adam = j.at("adam");
  s.adam.t = adam.at("t").get<std::uint64_t>();
  s.adam.skipped = adam.at("skipped").get<std::uint64_t>();
  s.adam.m = tensors_from_json(adam.at("m"), s.net.parameters());
  s.adam.v = tensors_from_json(adam.at("v"), s.net.parameters());
  s.data_rng.restore(j.at("rng").at("data").get<std::string>());
  s.noise_rng.restore(j.at("rng").at("noise").get<std::string>());
  s.time_rng.restore(j.at("rng").at("time").get<std::string>());
  for (const auto& e : j.at("evals")) s.evals.push_back(eval_from_json(e));
  return s;
}

void save_state(const TrainState& s, const std::filesystem::path& path) { write_file_atomic(path, state_to_json(s).dump()); }

TrainState load_state(const std::filesystem::path& path) { return state_from_json(nlohmann::json::parse(read_file(path))); }

nlohmann::json to_json(const MetricRecord& r) {
  nlohmann::json j;
  j["seed"] = r.seed;
  j["step"] = r.step;
  j["epoch"] = r.epoch;
  j["mse"] = r.terms.mse;
  j["dispersive"] = r.terms.dispersive;
  j["cosine"] = r.terms.cosine;
  j["total"] = r.terms.total;
  j["mean_cos_alpha"] = r.terms.mean_cos_alpha;
  j["tape_nodes"] = r.tape_nodes;
  if (r.eval) {
    const auto e = eval_to_json(*r.eval);
    j["success_by_stratum"] = e["success_by_stratum"];
    if (e.contains("mmd")) j["mmd"] = e["mmd"];
    j["direction_cosine"] = e["direction_cosine"];
  } else {
    j["success_by_stratum"] = nullptr;
  }
  return j;
}

std::string to_jsonl(const std::vector<MetricRecord>& log) {
  std::string out;
  for (const auto& r : log) out += to_json(r).dump() + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Training

Architecture architecture_for(const TrainConfig& cfg, const TaskSpec& spec) {
  Architecture a = cfg.arch;
  a.action_dim = spec.action_dim;
  a.cond_dim = spec.cond_dim;
  a.validate();
  return a;
}

EvalPoint evaluate(const VelocityNet& net, const Dataset& eval_data, std::uint64_t sample_seed) {
  EvalPoint e;
  const Tensor samples = sample_one_step(net, {eval_data.conds, 1, sample_seed});
  e.success = eval_success(eval_data.spec, samples, eval_data.conds, eval_data.tags);
  if (eval_data.spec.kind == TaskKind::Gmm2d && eval_data.size() >= 2) e.mmd = mmd(samples, eval_data.actions);
  double cos_sum = 0;
  for (std::size_t i = 0; i < samples.rows(); ++i) {
    const double sx = samples.at(i, 0), sy = samples.at(i, 1);
    const double ax = eval_data.actions.at(i, 0), ay = eval_data.actions.at(i, 1);
    cos_sum += (sx * ax + sy * ay) / (std::max(std::hypot(sx, sy), 1e-12) * std::max(std::hypot(ax, ay), 1e-12));
  }
  e.direction_cosine = samples.rows() ? cos_sum / static_cast<double>(samples.rows()) : 0.0;
  return e;
}

TrainResult train(const Dataset& data, const Dataset& eval_data, const TrainConfig& cfg, TrainState state,
                  const TrainHooks& hooks) {
  cfg.validate();
  if (data.size() == 0) throw std::invalid_argument("train: dataset is empty");
  if (state.net.arch().action_dim != data.spec.action_dim || state.net.arch().cond_dim != data.spec.cond_dim) {
    throw std::invalid_argument("train: network dimensions do not match the dataset");
  }

  TrainResult res;
  res.state = std::move(state);
  TrainState& s = res.state;
  TrainState last_good = s;
  const std::size_t n = data.size();
  const std::size_t dc = data.spec.cond_dim, da = data.spec.action_dim;
  const std::uint64_t eval_seed = derive_seed(s.seed, kEvalStream);
  std::vector<std::size_t> order(n);
  MetricRecord last;

  while (s.epoch < cfg.epochs) {
    if (hooks.stop_after_epoch && s.epoch >= *hooks.stop_after_epoch) break;
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = n - 1; i > 0; --i) std::swap(order[i], order[s.data_rng.below(i + 1)]);

    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t b = std::min(cfg.batch_size, n - start);
      Tensor actions = Tensor::zeros({b, da});
      Tensor conds = Tensor::zeros({b, dc});
      for (std::size_t i = 0; i < b; ++i) {
        const std::size_t row = order[start + i];
        for (std::size_t j = 0; j < da; ++j) actions[i * da + j] = data.actions[row * da + j];
        for (std::size_t j = 0; j < dc; ++j) conds[i * dc + j] = data.conds[row * dc + j];
      }
      const FlowBatch batch = make_batch(actions, conds, s.noise_rng, s.time_rng, cfg.objective);

      LossEvaluation ev;
      try {
        ev = total_loss(s.net, batch, cfg.objective);
      } catch (const NonFiniteLossError& e) {
        res.diverged = true;
        res.abort_reason = e.what();
      }
      if (!res.diverged && ev.terms.total > cfg.divergence_threshold) {
        res.diverged = true;
        res.abort_reason = "total loss " + std::to_string(ev.terms.total) + " exceeds divergence threshold at step " +
                           std::to_string(s.step);
      }
      if (res.diverged) {
        res.state = std::move(last_good);
        summarize_evals(res, cfg.top_k);
        return res;
      }

      adamw_step(s.net.parameters(), s.adam, ev.gradients, cfg.adam);
      ++s.step;
      last = {s.seed, s.step, s.epoch, ev.terms, ev.tape.nodes, std::nullopt};
      if (s.step % cfg.log_every == 0) res.log.push_back(last);
    }
    ++s.epoch;

    if (s.epoch % cfg.eval_every == 0 || s.epoch == cfg.epochs) {
      EvalPoint e = evaluate(s.net, eval_data, eval_seed);
      e.step = s.step;
      e.epoch = s.epoch;
      s.evals.push_back(e);
      MetricRecord r = last;
      r.epoch = s.epoch;
      r.eval = std::move(e);
      res.log.push_back(std::move(r));
    }
    if (hooks.checkpoint) save_state(s, *hooks.checkpoint);
    last_good = s;
  }
  summarize_evals(res, cfg.top_k);
  return res;
}

TrainResult train_seed(const Dataset& data, const Dataset& eval_data, const TrainConfig& cfg, std::uint64_t seed,
                       const TrainHooks& hooks) {
  return train(data, eval_data, cfg, TrainState::initial(seed, architecture_for(cfg, data.spec)), hooks);
}

void parallel_for(std::size_t count, std::size_t jobs, const std::function<void(std::size_t)>& body) {
  jobs = std::max<std::size_t>(1, std::min(jobs, count));
  if (jobs == 1) {
    for (std::size_t i = 0; i < count; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> workers;
  for (std::size_t w = 0; w < jobs; ++w) {
    workers.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) {
        try {
          body(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : workers) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace mflow
