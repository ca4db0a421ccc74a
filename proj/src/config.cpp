#include "mflow/config.hpp"

#include <algorithm>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <cstdio>
#include <sstream>

#include "mflow/io.hpp"

namespace mflow {

namespace {

// Schema: key and default, in canonical order. An empty [task] value means
// "use the task's own default".
const std::vector<std::pair<std::string, std::string>>& schema() {
  static const std::vector<std::pair<std::string, std::string>> s{
      {"data.task", "gmm2d"},
      {"data.n_train", "1280"},
      {"data.n_eval", "1000"},
      {"data.seed", "1234"},
      {"task.magnitude", ""},
      {"task.m_large", ""},
      {"task.m_small", ""},
      {"task.small_fraction", ""},
      {"task.label_noise", ""},
      {"task.success_angle_deg", ""},
      {"task.success_norm_rel", ""},
      {"task.goal_radius", ""},
      {"task.gmm_success_sigmas", ""},
      {"network.hidden", "256,256,256"},
      {"network.time_embed_dim", "32"},
      {"network.activation", "gelu"},
      {"network.feature_layer", ""},
      {"objective.lambda_disp", "0.25"},
      {"objective.lambda_cos", "0.5"},
      {"objective.tau", "0.5"},
      {"objective.derivative_mode", "JVP"},
      {"objective.dde_epsilon", "0.001"},
      {"objective.p_equal", "0.75"},
      {"objective.norm_floor", "1e-08"},
      {"objective.cos_clamp", "0.01"},
      {"trainer.lr", "0.0001"},
      {"trainer.beta1", "0.9"},
      {"trainer.beta2", "0.999"},
      {"trainer.eps", "1e-08"},
      {"trainer.weight_decay", "0.01"},
      {"trainer.batch_size", "128"},
      {"trainer.epochs", "200"},
      {"trainer.eval_every", "20"},
      {"trainer.log_every", "10"},
      {"trainer.top_k", "5"},
      {"trainer.divergence_threshold", "1e6"},
      {"trainer.seeds", "0,1,2"},
      {"sampler.n", "1000"},
      {"sampler.nfe", "1"},
      {"sampler.seed", "0"},
      {"probe.rho", "1"},
      {"probe.rho_star_points", "10"},
      {"probe.alpha_points", "10"},
      {"probe.depths", "2,3,4,5,6"},
      {"probe.width", "64"},
      {"probe.batch", "32"},
      {"probe.seed", "0"},
      {"probe.dde_epsilons", "0.004,0.002,0.001"},
      {"ablation.tasks", "precision_dock,mixed_magnitude,reach,gmm2d"},
      {"ablation.hidden", "64,64,64"},
      {"ablation.epochs", "500"},
      {"ablation.eval_every", "50"},
      {"ablation.lr", ""},
  };
  return s;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <class T, class F>
T parse_value(const std::string& key, const std::string& text, F&& f) {
  try {
    std::size_t used = 0;
    const T v = f(text, &used);
    if (used != text.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': cannot parse '" + text + "'");
  }
}

double to_double(const std::string& key, const std::string& text) {
  return parse_value<double>(key, text, [](const std::string& s, std::size_t* n) { return std::stod(s, n); });
}

std::uint64_t to_u64(const std::string& key, const std::string& text) {
  if (!text.empty() && text[0] == '-') throw ConfigError("config key '" + key + "': expected a non-negative integer");
  return parse_value<std::uint64_t>(key, text,
                                    [](const std::string& s, std::size_t* n) { return std::stoull(s, n); });
}

double override_or(const Config& cfg, const std::string& key, double fallback) {
  const std::string& v = cfg.get(key);
  return v.empty() ? fallback : cfg.get_double(key);
}

}  // namespace

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k;
    for (const auto& [key, _] : schema()) k.push_back(key);
    return k;
  }();
  return keys;
}

std::size_t edit_distance(const std::string& a, const std::string& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

std::string nearest_config_key(const std::string& key) {
  const auto& keys = config_keys();
  return *std::min_element(keys.begin(), keys.end(), [&](const std::string& x, const std::string& y) {
    return edit_distance(key, x) < edit_distance(key, y);
  });
}

Config Config::defaults() {
  Config c;
  for (const auto& [key, value] : schema()) c.values_[key] = value;
  return c;
}

Config Config::from_ini(const std::string& text) {
  boost::property_tree::ptree tree;
  std::istringstream in(text);
  try {
    boost::property_tree::ini_parser::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  Config c = defaults();
  for (const auto& [section, body] : tree) {
    if (!body.data().empty()) throw ConfigError("config: key '" + section + "' must sit inside a [section]");
    for (const auto& [key, value] : body) c.set(section + "." + key, value.data());
  }
  return c;
}

Config Config::load(const std::filesystem::path& path) { return from_ini(read_file(path)); }

void Config::set(const std::string& key, const std::string& value) {
  const auto it = values_.find(key);
  if (it == values_.end()) {
    throw ConfigError("unknown config key '" + key + "' (did you mean '" + nearest_config_key(key) + "'?)");
  }
  it->second = trim(value);
}

void Config::apply_overrides(const std::vector<std::string>& overrides) {
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + o + "' is not of the form section.key=value");
    set(trim(o.substr(0, eq)), o.substr(eq + 1));
  }
}

const std::string& Config::get(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) {
    throw ConfigError("unknown config key '" + key + "' (did you mean '" + nearest_config_key(key) + "'?)");
  }
  return it->second;
}

double Config::get_double(const std::string& key) const { return to_double(key, get(key)); }
std::uint64_t Config::get_u64(const std::string& key) const { return to_u64(key, get(key)); }
std::size_t Config::get_size(const std::string& key) const { return static_cast<std::size_t>(get_u64(key)); }

std::vector<std::size_t> Config::get_sizes(const std::string& key) const {
  std::vector<std::size_t> out;
  for (const auto& s : split_list(get(key))) out.push_back(static_cast<std::size_t>(to_u64(key, s)));
  return out;
}

std::vector<std::uint64_t> Config::get_u64s(const std::string& key) const {
  std::vector<std::uint64_t> out;
  for (const auto& s : split_list(get(key))) out.push_back(to_u64(key, s));
  return out;
}

std::vector<double> Config::get_doubles(const std::string& key) const {
  std::vector<double> out;
  for (const auto& s : split_list(get(key))) out.push_back(to_double(key, s));
  return out;
}

std::vector<std::string> Config::get_strings(const std::string& key) const { return split_list(get(key)); }

std::string Config::to_ini() const {
  std::string out, section;
  for (const auto& key : config_keys()) {
    const auto dot = key.find('.');
    const std::string sec = key.substr(0, dot);
    if (sec != section) {
      out += (section.empty() ? "" : "\n") + ("[" + sec + "]\n");
      section = sec;
    }
    out += key.substr(dot + 1) + " = " + values_.at(key) + "\n";
  }
  return out;
}

std::string Config::hash() const { return content_hash(to_ini()); }

TaskSpec task_spec(const Config& cfg, const std::string& name) {
  TaskSpec s;
  try {
    s = default_task(name);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  s.magnitude = override_or(cfg, "task.magnitude", s.magnitude);
  s.m_large = override_or(cfg, "task.m_large", s.m_large);
  s.m_small = override_or(cfg, "task.m_small", s.m_small);
  s.small_fraction = override_or(cfg, "task.small_fraction", s.small_fraction);
  s.label_noise = override_or(cfg, "task.label_noise", s.label_noise);
  s.success_angle_deg = override_or(cfg, "task.success_angle_deg", s.success_angle_deg);
  s.success_norm_rel = override_or(cfg, "task.success_norm_rel", s.success_norm_rel);
  s.goal_radius = override_or(cfg, "task.goal_radius", s.goal_radius);
  s.gmm_success_sigmas = override_or(cfg, "task.gmm_success_sigmas", s.gmm_success_sigmas);
  s.validate();
  return s;
}

TaskSpec task_spec(const Config& cfg) { return task_spec(cfg, cfg.get("data.task")); }

Architecture architecture(const Config& cfg) {
  Architecture a;
  a.hidden_dims = cfg.get_sizes("network.hidden");
  a.time_embed_dim = cfg.get_size("network.time_embed_dim");
  try {
    a.activation = parse_activation(cfg.get("network.activation"));
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config key 'network.activation': ") + e.what());
  }
  if (!cfg.get("network.feature_layer").empty()) a.feature_layer = cfg.get_size("network.feature_layer");
  return a;
}

ObjectiveConfig objective_config(const Config& cfg) {
  ObjectiveConfig o;
  o.lambda_disp = cfg.get_double("objective.lambda_disp");
  o.lambda_cos = cfg.get_double("objective.lambda_cos");
  o.tau_disp = cfg.get_double("objective.tau");
  try {
    o.derivative_mode = parse_derivative_mode(cfg.get("objective.derivative_mode"));
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config key 'objective.derivative_mode': ") + e.what());
  }
  o.dde_epsilon = cfg.get_double("objective.dde_epsilon");
  o.p_equal = cfg.get_double("objective.p_equal");
  o.norm_floor = cfg.get_double("objective.norm_floor");
  o.cos_clamp = cfg.get_double("objective.cos_clamp");
  return o;
}

TrainConfig train_config(const Config& cfg) {
  TrainConfig t;
  t.adam.lr = cfg.get_double("trainer.lr");
  t.adam.beta1 = cfg.get_double("trainer.beta1");
  t.adam.beta2 = cfg.get_double("trainer.beta2");
  t.adam.eps = cfg.get_double("trainer.eps");
  t.adam.weight_decay = cfg.get_double("trainer.weight_decay");
  t.batch_size = cfg.get_size("trainer.batch_size");
  t.epochs = cfg.get_size("trainer.epochs");
  t.eval_every = cfg.get_size("trainer.eval_every");
  t.log_every = cfg.get_size("trainer.log_every");
  t.top_k = cfg.get_size("trainer.top_k");
  t.divergence_threshold = cfg.get_double("trainer.divergence_threshold");
  t.seeds = cfg.get_u64s("trainer.seeds");
  t.objective = objective_config(cfg);
  t.arch = architecture(cfg);
  try {
    t.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return t;
}

TrainConfig ablation_train_config(const Config& cfg) {
  TrainConfig t = train_config(cfg);
  t.arch.hidden_dims = cfg.get_sizes("ablation.hidden");
  t.epochs = cfg.get_size("ablation.epochs");
  t.eval_every = cfg.get_size("ablation.eval_every");
  t.adam.lr = override_or(cfg, "ablation.lr", t.adam.lr);
  try {
    t.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return t;
}

}  // namespace mflow
