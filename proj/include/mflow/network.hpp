#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "mflow/autodiff.hpp"
#include "mflow/tensor.hpp"

namespace mflow {

enum class Activation { Gelu, Relu };

std::string to_string(Activation a);
Activation parse_activation(const std::string& name);

struct Architecture {
  std::size_t action_dim = 2;
  std::size_t cond_dim = 0;
  std::vector<std::size_t> hidden_dims{256, 256, 256};
  std::size_t time_embed_dim = 32;
  Activation activation = Activation::Gelu;
  /// Hidden layer whose post-activation output is exposed as features; unset means the middle one.
  std::optional<std::size_t> feature_layer;

  std::size_t input_dim() const { return action_dim + cond_dim + 2 * time_embed_dim; }
  std::size_t feature_index() const;
  /// Throws std::invalid_argument on a zero width or an out-of-range feature layer.
  void validate() const;

  friend bool operator==(const Architecture&, const Architecture&) = default;
};

/// Sinusoidal embedding of a scalar time on a geometric frequency ladder.
class TimeEmbedding {
 public:
  explicit TimeEmbedding(std::size_t dim);

  std::size_t dim() const { return dim_; }
  const std::vector<double>& frequencies() const { return frequencies_; }

  /// [B] -> [B x dim], sines then cosines.
  ad::Var embed(const ad::Var& t) const;

 private:
  std::size_t dim_;
  std::vector<double> frequencies_;
};

/// Conditioned mean-velocity MLP u(z_t, r, t | c).
///
/// Input is concat(z_t, emb(r), emb(t), c); each hidden layer is act(x W^T + b)
/// and the last layer is affine. Parameters are stored flat as W0, b0, W1, b1, ...
class VelocityNet {
 public:
  struct Output {
    ad::Var u;
    ad::Var features;
  };

  /// Empty network with no layers; assign from init() or a checkpoint before use.
  VelocityNet() = default;

  /// Fan-in scaled uniform weights, |w| <= sqrt(6 / fan_in), zero biases.
  static VelocityNet init(std::uint64_t seed, Architecture arch);

  const Architecture& arch() const { return arch_; }
  std::uint64_t seed() const { return seed_; }
  std::size_t layer_count() const { return params_.size() / 2; }
  const Tensor& weight(std::size_t layer) const { return params_[2 * layer]; }
  const Tensor& bias(std::size_t layer) const { return params_[2 * layer + 1]; }

  const std::vector<Tensor>& parameters() const { return params_; }
  std::vector<Tensor>& parameters() { return params_; }
  std::size_t parameter_count() const;

  /// Parameter leaves on `tape`, in parameters() order.
  std::vector<ad::Var> bind(ad::Tape& tape) const;
  /// Untracked parameter values.
  std::vector<ad::Var> constants() const;

  /// z [B x d], r [B], t [B], c [B x cond_dim]; r and t must lie in [0, 1].
  Output forward(std::span<const ad::Var> params, const ad::Var& z, const ad::Var& r, const ad::Var& t,
                 const ad::Var& c) const;

  /// Untracked evaluation; returns u.
  Tensor velocity(const Tensor& z, const Tensor& r, const Tensor& t, const Tensor& c) const;

  friend bool operator==(const VelocityNet&, const VelocityNet&) = default;

 private:
  VelocityNet(std::uint64_t seed, Architecture arch, std::vector<Tensor> params);
  friend VelocityNet network_from_json(const nlohmann::json& j);

  std::uint64_t seed_ = 0;
  Architecture arch_;
  std::vector<Tensor> params_;
};

nlohmann::json architecture_to_json(const Architecture& arch);
Architecture architecture_from_json(const nlohmann::json& j);

nlohmann::json network_to_json(const VelocityNet& net);
VelocityNet network_from_json(const nlohmann::json& j);

void save_network(const VelocityNet& net, const std::filesystem::path& path);
VelocityNet load_network(const std::filesystem::path& path);

}  // namespace mflow
