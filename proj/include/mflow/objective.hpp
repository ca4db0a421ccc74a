#pragma once

// Mean-velocity training objective.
//
// Interpolant: z_t = (1 - t) z0 + t eps, with noise at t = 1, so the
// instantaneous and straight-path velocity is v = eps - z0. The regression
// target is u_tgt = v - (t - r) du/dt, where du/dt is the total derivative of
// the network along (dz, dr, dt) = (v, 0, 1). u_tgt is treated as a constant.

#include <cstddef>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mflow/autodiff.hpp"
#include "mflow/network.hpp"
#include "mflow/rng.hpp"
#include "mflow/tensor.hpp"

namespace mflow {

enum class DerivativeMode { Jvp, DdeTimeOnly, DdeFull };

std::string to_string(DerivativeMode mode);
/// Accepts JVP, DDE (same as DDE_full), DDE_full, DDE_time_only.
DerivativeMode parse_derivative_mode(const std::string& name);

/// Keeps -log((cos + 1) / 2) and its gradient bounded for anti-parallel rows.
inline constexpr double kDefaultCosClamp = 1e-2;

struct ObjectiveConfig {
  double lambda_disp = 0.25;
  double lambda_cos = 0.5;
  double tau_disp = 0.5;
  DerivativeMode derivative_mode = DerivativeMode::Jvp;
  double dde_epsilon = 1e-3;
  double p_equal = 0.75;
  double norm_floor = 1e-8;
  /// The cosine is clamped to [-1 + cos_clamp, 1] before the log.
  double cos_clamp = kDefaultCosClamp;

  void validate() const;
  friend bool operator==(const ObjectiveConfig&, const ObjectiveConfig&) = default;
};

struct FlowBatch {
  Tensor z0;   // [B x d] clean actions
  Tensor eps;  // [B x d] standard normal noise
  Tensor r;    // [B]
  Tensor t;    // [B]
  Tensor z_t;  // [B x d]
  Tensor c;    // [B x cond_dim]

  std::size_t size() const { return z0.rows(); }
  /// eps - z0.
  Tensor velocity() const;
};

struct TimeSamples {
  Tensor r;
  Tensor t;
};

/// Per row: r, t are the order statistics of two uniforms, and with
/// probability p_equal r is set to t.
TimeSamples sample_times(std::size_t batch, double p_equal, Rng& rng);

FlowBatch make_batch(const Tensor& actions, const Tensor& conds, Rng& noise_rng, Rng& time_rng,
                     const ObjectiveConfig& cfg);
FlowBatch make_batch(const Tensor& actions, const Tensor& conds, Rng& rng, const ObjectiveConfig& cfg);

/// Builds a batch with caller-chosen times; z_t is recomputed from the interpolant.
FlowBatch make_batch_at(Tensor z0, Tensor eps, Tensor r, Tensor t, Tensor c);

struct TimeDerivative {
  Tensor dudt;
  /// Rows where the DDE stencil touched [0, 1] and fell back to a one-sided difference.
  std::size_t one_sided_rows = 0;
};

/// u(z, r, t | c) on Vars. Tangents attached to z and t must propagate through it.
using MeanVelocityModel = std::function<ad::Var(const ad::Var& z, const ad::Var& r, const ad::Var& t, const ad::Var& c)>;

/// The network with untracked parameters.
MeanVelocityModel as_model(const VelocityNet& net);

/// du/dt along (v, 0, 1) under cfg.derivative_mode, evaluated without recording.
TimeDerivative time_derivative(const MeanVelocityModel& u, const FlowBatch& batch, const ObjectiveConfig& cfg);
TimeDerivative time_derivative(const VelocityNet& net, const FlowBatch& batch, const ObjectiveConfig& cfg);

struct Target {
  Tensor u_tgt;
  Tensor dudt;
  std::size_t one_sided_rows = 0;
};

/// v - (t - r) * dudt rowwise.
Tensor identity_target(const FlowBatch& batch, const Tensor& dudt);

Target target_velocity(const MeanVelocityModel& u, const FlowBatch& batch, const ObjectiveConfig& cfg);
Target target_velocity(const VelocityNet& net, const FlowBatch& batch, const ObjectiveConfig& cfg);

// Loss terms. The Var forms record onto the operands' tape; the Tensor forms
// evaluate the same code on constants.

/// Mean over rows of |u_pred - u_tgt|^2.
ad::Var mse_loss(const ad::Var& u_pred, const ad::Var& u_tgt);
double mse_loss(const Tensor& u_pred, const Tensor& u_tgt);

struct CosineTerm {
  ad::Var loss;
  double mean_cos = 0.0;
};
/// Mean of -log((cos + 1) / 2) with floored norms and cos clamped to [-1 + clamp, 1].
CosineTerm cosine_loss(const ad::Var& u_pred, const ad::Var& v0, double norm_floor, double clamp = kDefaultCosClamp);

struct CosineValue {
  double loss = 0.0;
  double mean_cos = 0.0;
};
CosineValue cosine_loss(const Tensor& u_pred, const Tensor& v0, double norm_floor, double clamp = kDefaultCosClamp);

struct DispersiveTerm {
  ad::Var loss;
  /// Set when the batch has fewer than two rows and the term is 0.
  bool skipped = false;
};
/// log of the mean over ordered pairs i != j of exp(-|h_i - h_j|^2 / tau).
DispersiveTerm dispersive_loss(const ad::Var& features, double tau);
double dispersive_loss(const Tensor& features, double tau);

struct LossTerms {
  double mse = 0.0;
  double dispersive = 0.0;
  double cosine = 0.0;
  double total = 0.0;
  double mean_cos_alpha = 0.0;
  double mean_pred_norm = 0.0;
  double mean_target_norm = 0.0;
  std::size_t one_sided_rows = 0;
  bool dispersive_skipped = false;
};

struct CombinedLoss {
  ad::Var total;
  LossTerms terms;
};

/// mse + lambda_disp * dispersive + lambda_cos * cosine for a prediction and a fixed target.
CombinedLoss combine_losses(const ad::Var& u_pred, const Tensor& u_tgt, const Tensor& v0, const ad::Var& features,
                            const ObjectiveConfig& cfg);

/// Raised when the objective evaluates to NaN or Inf; the message carries a dump.
class NonFiniteLossError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TapeStats {
  std::size_t nodes = 0;
  std::size_t saved_elements = 0;
};

struct LossEvaluation {
  LossTerms terms;
  /// One per network parameter, in VelocityNet::parameters() order.
  std::vector<Tensor> gradients;
  Tensor u_tgt;
  TapeStats tape;
};

/// One full objective evaluation: target, loss terms and parameter gradients.
LossEvaluation total_loss(const VelocityNet& net, const FlowBatch& batch, const ObjectiveConfig& cfg);

struct DirectionalProbe {
  double d_mse_dalpha = 0.0;
  double d_cos_dalpha = 0.0;
  double analytic_mse = 0.0;  // 2 rho rho* sin(alpha)
  double analytic_cos = 0.0;  // sin(alpha) / (1 + cos(alpha))
};

/// Numerical d/dalpha of both losses for u = rho (cos a, sin a) against the
/// target rho* (1, 0), whose direction is also the straight-path direction.
/// Throws std::logic_error if the MSE branch departs from 2 rho rho* sin(alpha).
DirectionalProbe directional_gradient_probe(double rho, double rho_star, double alpha);

}  // namespace mflow
