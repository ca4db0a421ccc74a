#include "mflow/network.hpp"

#include <cmath>
#include <stdexcept>

#include "mflow/io.hpp"
#include "mflow/rng.hpp"

namespace mflow {

namespace {

constexpr double kMaxFrequency = 16.0;
constexpr const char* kNetworkFormat = "mflow-velocity-net";

}  // namespace

std::string to_string(Activation a) { return a == Activation::Gelu ? "gelu" : "relu"; }

Activation parse_activation(const std::string& name) {
  if (name == "gelu") return Activation::Gelu;
  if (name == "relu") return Activation::Relu;
  throw std::invalid_argument("unknown activation '" + name + "' (expected gelu or relu)");
}

std::size_t Architecture::feature_index() const {
  if (feature_layer) return *feature_layer;
  return hidden_dims.empty() ? 0 : (hidden_dims.size() - 1) / 2;
}

void Architecture::validate() const {
  if (action_dim == 0) throw std::invalid_argument("architecture: action_dim must be positive");
  if (hidden_dims.empty()) throw std::invalid_argument("architecture: at least one hidden layer is required");
  for (std::size_t i = 0; i < hidden_dims.size(); ++i) {
    if (hidden_dims[i] == 0) throw std::invalid_argument("architecture: hidden layer " + std::to_string(i) + " has zero width");
  }
  if (time_embed_dim == 0 || time_embed_dim % 2 != 0) {
    throw std::invalid_argument("architecture: time_embed_dim must be even and positive");
  }
  if (feature_index() >= hidden_dims.size()) throw std::invalid_argument("architecture: feature_layer out of range");
}

TimeEmbedding::TimeEmbedding(std::size_t dim) : dim_(dim) {
  if (dim == 0 || dim % 2 != 0) throw std::invalid_argument("time embedding dimension must be even and positive");
  const std::size_t half = dim / 2;
  frequencies_.resize(half);
  for (std::size_t k = 0; k < half; ++k) {
    const double frac = half > 1 ? static_cast<double>(k) / static_cast<double>(half - 1) : 0.0;
    frequencies_[k] = std::exp(frac * std::log(kMaxFrequency));
  }
}

ad::Var TimeEmbedding::embed(const ad::Var& t) const {
  const std::size_t batch = t.value().size();
  const ad::Var column = ad::reshape(t, {batch, 1});
  const ad::Var freqs(Tensor({1, frequencies_.size()}, frequencies_));
  const ad::Var phase = ad::matmul(column, freqs);
  return ad::concat({ad::sin(phase), ad::cos(phase)});
}

VelocityNet::VelocityNet(std::uint64_t seed, Architecture arch, std::vector<Tensor> params)
    : seed_(seed), arch_(std::move(arch)), params_(std::move(params)) {}

VelocityNet VelocityNet::init(std::uint64_t seed, Architecture arch) {
  arch.validate();
  Rng rng(seed);
  std::vector<std::size_t> widths{arch.input_dim()};
  widths.insert(widths.end(), arch.hidden_dims.begin(), arch.hidden_dims.end());
  widths.push_back(arch.action_dim);

  std::vector<Tensor> params;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    const std::size_t fan_in = widths[l], fan_out = widths[l + 1];
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    Tensor w = Tensor::zeros({fan_out, fan_in});
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = rng.uniform(-bound, bound);
    params.push_back(std::move(w));
    params.push_back(Tensor::zeros({fan_out}));
  }
  return VelocityNet(seed, std::move(arch), std::move(params));
}

std::size_t VelocityNet::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.size();
  return n;
}

std::vector<ad::Var> VelocityNet::bind(ad::Tape& tape) const {
  std::vector<ad::Var> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(tape.parameter(p));
  return out;
}

std::vector<ad::Var> VelocityNet::constants() const {
  std::vector<ad::Var> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.emplace_back(p);
  return out;
}

VelocityNet::Output VelocityNet::forward(std::span<const ad::Var> params, const ad::Var& z, const ad::Var& r,
                                         const ad::Var& t, const ad::Var& c) const {
  if (params.size() != params_.size()) throw std::invalid_argument("forward: wrong number of bound parameters");
  const Tensor& zv = z.value();
  if (zv.rank() != 2 || zv.cols() != arch_.action_dim) {
    throw ShapeError("forward: z must be [B x " + std::to_string(arch_.action_dim) + "], got " + to_string(zv.shape()));
  }
  const std::size_t batch = zv.rows();
  if (r.shape() != Shape{batch}) throw ShapeError("forward (r)", r.shape(), Shape{batch});
  if (t.shape() != Shape{batch}) throw ShapeError("forward (t)", t.shape(), Shape{batch});
  if (c.shape() != Shape{batch, arch_.cond_dim}) throw ShapeError("forward (c)", c.shape(), Shape{batch, arch_.cond_dim});
  for (std::size_t i = 0; i < batch; ++i) {
    const double ri = r.value()[i], ti = t.value()[i];
    if (!(ri >= 0.0 && ri <= 1.0) || !(ti >= 0.0 && ti <= 1.0)) {
      throw std::domain_error("forward: times must lie in [0, 1], row " + std::to_string(i) + " has r=" +
                              std::to_string(ri) + " t=" + std::to_string(ti));
    }
  }

  const TimeEmbedding embedding(arch_.time_embed_dim);
  std::vector<ad::Var> inputs{z, embedding.embed(r), embedding.embed(t)};
  if (arch_.cond_dim > 0) inputs.push_back(c);
  ad::Var h = ad::concat(std::span<const ad::Var>(inputs));

  const std::size_t hidden = arch_.hidden_dims.size();
  const std::size_t feature_at = arch_.feature_index();
  ad::Var features;
  for (std::size_t l = 0; l <= hidden; ++l) {
    const ad::Var& w = params[2 * l];
    const ad::Var& b = params[2 * l + 1];
    h = ad::add(ad::matmul(h, ad::transpose(w)), ad::broadcast_rows(b, batch));
    if (l == hidden) break;
    h = arch_.activation == Activation::Gelu ? ad::gelu(h) : ad::relu(h);
    if (l == feature_at) features = h;
  }
  return {h, features};
}

Tensor VelocityNet::velocity(const Tensor& z, const Tensor& r, const Tensor& t, const Tensor& c) const {
  const auto params = constants();
  return forward(params, ad::Var(z), ad::Var(r), ad::Var(t), ad::Var(c)).u.value();
}

// ---------------------------------------------------------------------------
// Serialization

nlohmann::json architecture_to_json(const Architecture& arch) {
  nlohmann::json j;
  j["action_dim"] = arch.action_dim;
  j["cond_dim"] = arch.cond_dim;
  j["hidden_dims"] = arch.hidden_dims;
  j["time_embed_dim"] = arch.time_embed_dim;
  j["activation"] = to_string(arch.activation);
  if (arch.feature_layer) j["feature_layer"] = *arch.feature_layer;
  return j;
}

Architecture architecture_from_json(const nlohmann::json& j) {
  Architecture arch;
  arch.action_dim = j.at("action_dim").get<std::size_t>();
  arch.cond_dim = j.at("cond_dim").get<std::size_t>();
  arch.hidden_dims = j.at("hidden_dims").get<std::vector<std::size_t>>();
  arch.time_embed_dim = j.at("time_embed_dim").get<std::size_t>();
  arch.activation = parse_activation(j.at("activation").get<std::string>());
  if (j.contains("feature_layer")) arch.feature_layer = j.at("feature_layer").get<std::size_t>();
  arch.validate();
  return arch;
}

nlohmann::json network_to_json(const VelocityNet& net) {
  nlohmann::json j;
  j["format"] = kNetworkFormat;
  j["version"] = 1;
  j["seed"] = net.seed();
  j["architecture"] = architecture_to_json(net.arch());
  std::vector<double> flat;
  flat.reserve(net.parameter_count());
  for (const auto& p : net.parameters()) flat.insert(flat.end(), p.data().begin(), p.data().end());
  j["parameters"] = std::move(flat);
  return j;
}

VelocityNet network_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != kNetworkFormat) throw std::invalid_argument("not a velocity network checkpoint");
  const Architecture arch = architecture_from_json(j.at("architecture"));
  const auto seed = j.at("seed").get<std::uint64_t>();
  const auto flat = j.at("parameters").get<std::vector<double>>();
  // Shapes come from a fresh init of the same architecture.
  VelocityNet net = VelocityNet::init(seed, arch);
  if (flat.size() != net.parameter_count()) {
    throw std::invalid_argument("checkpoint holds " + std::to_string(flat.size()) + " parameters, architecture needs " +
                                std::to_string(net.parameter_count()));
  }
  std::size_t offset = 0;
  for (auto& p : net.params_) {
    std::vector<double> values(flat.begin() + static_cast<std::ptrdiff_t>(offset),
                               flat.begin() + static_cast<std::ptrdiff_t>(offset + p.size()));
    offset += p.size();
    p = Tensor(p.shape(), std::move(values));
  }
  return net;
}

void save_network(const VelocityNet& net, const std::filesystem::path& path) {
  write_file_atomic(path, network_to_json(net).dump(1));
}

VelocityNet load_network(const std::filesystem::path& path) {
  return network_from_json(nlohmann::json::parse(read_file(path)));
}

}  // namespace mflow
