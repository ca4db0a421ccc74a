#include "mflow/objective.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace mflow {

namespace {

void require_rows(const char* what, const Tensor& x, std::size_t rows) {
  if (x.rank() != 2 || x.rows() != rows) {
    throw ShapeError(std::string(what) + ": expected " + std::to_string(rows) + " rows, got " + to_string(x.shape()));
  }
}

// Rowwise scalar times matrix: out[i, :] = s[i] * x[i, :].
Tensor scale_rows(const Tensor& s, const Tensor& x) {
  Tensor out = x;
  const std::size_t w = x.cols();
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = s[i] * x[i * w + j];
  return out;
}

double mean_row_norm(const Tensor& x) {
  if (x.rows() == 0) return 0.0;
  double total = 0.0;
  const std::size_t w = x.cols();
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < w; ++j) s += x[i * w + j] * x[i * w + j];
    total += std::sqrt(s);
  }
  return total / static_cast<double>(x.rows());
}

std::string describe(const char* name, const Tensor& x) {
  std::ostringstream os;
  os.precision(6);
  double lo = 0, hi = 0, sum = 0;
  std::size_t bad = 0;
  bool first = true;
  for (double v : x.data()) {
    if (!std::isfinite(v)) {
      ++bad;
      continue;
    }
    lo = first ? v : std::min(lo, v);
    hi = first ? v : std::max(hi, v);
    sum += v;
    first = false;
  }
  os << "  " << name << " " << to_string(x.shape()) << " min=" << lo << " max=" << hi
     << " mean=" << (x.size() ? sum / static_cast<double>(x.size()) : 0.0) << " non-finite=" << bad << "\n";
  return os.str();
}

}  // namespace

std::string to_string(DerivativeMode mode) {
  switch (mode) {
    case DerivativeMode::Jvp: return "JVP";
    case DerivativeMode::DdeTimeOnly: return "DDE_time_only";
    case DerivativeMode::DdeFull: return "DDE_full";
  }
  return "?";
}

DerivativeMode parse_derivative_mode(const std::string& name) {
  if (name == "JVP" || name == "jvp") return DerivativeMode::Jvp;
  if (name == "DDE" || name == "DDE_full" || name == "dde" || name == "dde_full") return DerivativeMode::DdeFull;
  if (name == "DDE_time_only" || name == "dde_time_only") return DerivativeMode::DdeTimeOnly;
  throw std::invalid_argument("unknown derivative mode '" + name + "' (expected JVP, DDE, DDE_full or DDE_time_only)");
}

void ObjectiveConfig::validate() const {
  if (!(lambda_disp >= 0.0) || !(lambda_cos >= 0.0)) throw std::invalid_argument("objective: loss weights must be >= 0");
  if (!(tau_disp > 0.0)) throw std::invalid_argument("objective: tau_disp must be positive");
  if (!(dde_epsilon > 0.0 && dde_epsilon <= 0.1)) throw std::invalid_argument("objective: dde_epsilon must lie in (0, 0.1]");
  if (!(p_equal >= 0.0 && p_equal <= 1.0)) throw std::invalid_argument("objective: p_equal must lie in [0, 1]");
  if (!(norm_floor > 0.0)) throw std::invalid_argument("objective: norm_floor must be positive");
  if (!(cos_clamp > 0.0 && cos_clamp < 1.0)) throw std::invalid_argument("objective: cos_clamp must lie in (0, 1)");
}

Tensor FlowBatch::velocity() const {
  Tensor v = eps;
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = eps[i] - z0[i];
  return v;
}

TimeSamples sample_times(std::size_t batch, double p_equal, Rng& rng) {
  Tensor r = Tensor::zeros({batch});
  Tensor t = Tensor::zeros({batch});
  for (std::size_t i = 0; i < batch; ++i) {
    const double a = rng.uniform();
    const double b = rng.uniform();
    const bool equal = rng.bernoulli(p_equal);
    t[i] = std::max(a, b);
    r[i] = equal ? t[i] : std::min(a, b);
  }
  return {std::move(r), std::move(t)};
}

FlowBatch make_batch_at(Tensor z0, Tensor eps, Tensor r, Tensor t, Tensor c) {
  const std::size_t batch = z0.rank() == 2 ? z0.rows() : 0;
  require_rows("batch (z0)", z0, batch);
  if (eps.shape() != z0.shape()) throw ShapeError("batch (eps)", eps.shape(), z0.shape());
  if (r.shape() != Shape{batch}) throw ShapeError("batch (r)", r.shape(), Shape{batch});
  if (t.shape() != Shape{batch}) throw ShapeError("batch (t)", t.shape(), Shape{batch});
  require_rows("batch (c)", c, batch);
  Tensor z_t = z0;
  const std::size_t w = z0.cols();
  for (std::size_t i = 0; i < batch; ++i) {
    if (!(r[i] <= t[i])) throw std::domain_error("batch: row " + std::to_string(i) + " has r > t");
    for (std::size_t j = 0; j < w; ++j) z_t[i * w + j] = (1.0 - t[i]) * z0[i * w + j] + t[i] * eps[i * w + j];
  }
  return {std::move(z0), std::move(eps), std::move(r), std::move(t), std::move(z_t), std::move(c)};
}

FlowBatch make_batch(const Tensor& actions, const Tensor& conds, Rng& noise_rng, Rng& time_rng,
                     const ObjectiveConfig& cfg) {
  require_rows("make_batch (actions)", actions, actions.rank() == 2 ? actions.rows() : 0);
  const std::size_t batch = actions.rows();
  Tensor eps = Tensor::zeros(actions.shape());
  for (std::size_t i = 0; i < eps.size(); ++i) eps[i] = noise_rng.normal();
  auto times = sample_times(batch, cfg.p_equal, time_rng);
  return make_batch_at(actions, std::move(eps), std::move(times.r), std::move(times.t), conds);
}

FlowBatch make_batch(const Tensor& actions, const Tensor& conds, Rng& rng, const ObjectiveConfig& cfg) {
  return make_batch(actions, conds, rng, rng, cfg);
}

// ---------------------------------------------------------------------------
// Time derivative

namespace {

TimeDerivative jvp_derivative(const MeanVelocityModel& u, const FlowBatch& batch) {
  const ad::Var z = ad::Var(batch.z_t).with_tangent(ad::Var(batch.velocity()));
  const ad::Var t = ad::Var(batch.t).with_tangent(ad::Var(Tensor::filled(batch.t.shape(), 1.0)));
  const ad::Var out = u(z, ad::Var(batch.r), t, ad::Var(batch.c));
  if (!out.has_tangent()) return {Tensor::zeros(out.shape()), 0};
  return {out.tangent().value(), 0};
}

TimeDerivative dde_derivative(const MeanVelocityModel& u, const FlowBatch& batch, double eps, bool move_z) {
  const std::size_t n = batch.size();
  const std::size_t w = batch.z_t.cols();
  const Tensor v = batch.velocity();
  Tensor t_hi = batch.t, t_lo = batch.t;
  Tensor z_hi = batch.z_t, z_lo = batch.z_t;
  Tensor width = Tensor::filled({n}, 2.0 * eps);
  std::size_t one_sided = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double up = eps, down = eps;
    // Keep the stencil inside [0, 1]; near an end use a one-sided difference.
    if (batch.t[i] + eps > 1.0) {
      up = 0.0;
      ++one_sided;
    } else if (batch.t[i] - eps < 0.0) {
      down = 0.0;
      ++one_sided;
    }
    t_hi[i] = batch.t[i] + up;
    t_lo[i] = batch.t[i] - down;
    width[i] = up + down;
    if (move_z) {
      for (std::size_t j = 0; j < w; ++j) {
        z_hi[i * w + j] = batch.z_t[i * w + j] + up * v[i * w + j];
        z_lo[i * w + j] = batch.z_t[i * w + j] - down * v[i * w + j];
      }
    }
  }
  const ad::Var r(batch.r), c(batch.c);
  const Tensor u_hi = u(ad::Var(z_hi), r, ad::Var(t_hi), c).value();
  const Tensor u_lo = u(ad::Var(z_lo), r, ad::Var(t_lo), c).value();
  Tensor dudt = u_hi;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < w; ++j) dudt[i * w + j] = (u_hi[i * w + j] - u_lo[i * w + j]) / width[i];
  return {std::move(dudt), one_sided};
}

}  // namespace

MeanVelocityModel as_model(const VelocityNet& net) {
  return [&net, params = net.constants()](const ad::Var& z, const ad::Var& r, const ad::Var& t, const ad::Var& c) {
    return net.forward(params, z, r, t, c).u;
  };
}

TimeDerivative time_derivative(const MeanVelocityModel& u, const FlowBatch& batch, const ObjectiveConfig& cfg) {
  switch (cfg.derivative_mode) {
    case DerivativeMode::Jvp: return jvp_derivative(u, batch);
    case DerivativeMode::DdeTimeOnly: return dde_derivative(u, batch, cfg.dde_epsilon, false);
    case DerivativeMode::DdeFull: return dde_derivative(u, batch, cfg.dde_epsilon, true);
  }
  throw std::logic_error("unhandled derivative mode");
}

TimeDerivative time_derivative(const VelocityNet& net, const FlowBatch& batch, const ObjectiveConfig& cfg) {
  return time_derivative(as_model(net), batch, cfg);
}

Tensor identity_target(const FlowBatch& batch, const Tensor& dudt) {
  if (dudt.shape() != batch.z0.shape()) throw ShapeError("identity_target", dudt.shape(), batch.z0.shape());
  Tensor gap = batch.t;
  for (std::size_t i = 0; i < gap.size(); ++i) gap[i] = batch.t[i] - batch.r[i];
  const Tensor step = scale_rows(gap, dudt);
  Tensor u = batch.velocity();
  for (std::size_t i = 0; i < u.size(); ++i) u[i] -= step[i];
  return u;
}

Target target_velocity(const MeanVelocityModel& u, const FlowBatch& batch, const ObjectiveConfig& cfg) {
  auto d = time_derivative(u, batch, cfg);
  Tensor target = identity_target(batch, d.dudt);
  return {std::move(target), std::move(d.dudt), d.one_sided_rows};
}

Target target_velocity(const VelocityNet& net, const FlowBatch& batch, const ObjectiveConfig& cfg) {
  return target_velocity(as_model(net), batch, cfg);
}

// ---------------------------------------------------------------------------
// Losses

ad::Var mse_loss(const ad::Var& u_pred, const ad::Var& u_tgt) {
  if (u_pred.shape() != u_tgt.shape()) throw ShapeError("mse_loss", u_pred.shape(), u_tgt.shape());
  const ad::Var diff = ad::sub(u_pred, u_tgt);
  return ad::mean(ad::row_dot(diff, diff));
}

double mse_loss(const Tensor& u_pred, const Tensor& u_tgt) {
  return mse_loss(ad::Var(u_pred), ad::Var(u_tgt)).value().item();
}

CosineTerm cosine_loss(const ad::Var& u_pred, const ad::Var& v0, double norm_floor, double clamp) {
  if (u_pred.shape() != v0.shape()) throw ShapeError("cosine_loss", u_pred.shape(), v0.shape());
  const ad::Var dot = ad::row_dot(u_pred, v0);
  const ad::Var norms = ad::mul(ad::floor_min(ad::row_norm(u_pred), norm_floor), ad::floor_min(ad::row_norm(v0), norm_floor));
  const ad::Var cos = ad::clamp(ad::div(dot, norms), -1.0 + clamp, 1.0);
  const ad::Var loss = ad::mean(ad::neg(ad::log(ad::scale(ad::add_scalar(cos, 1.0), 0.5))));
  const double mean_cos = cos.value().size() ? ad::mean(ad::Var(cos.value())).value().item() : 0.0;
  return {loss, mean_cos};
}

CosineValue cosine_loss(const Tensor& u_pred, const Tensor& v0, double norm_floor, double clamp) {
  const auto term = cosine_loss(ad::Var(u_pred), ad::Var(v0), norm_floor, clamp);
  return {term.loss.value().item(), term.mean_cos};
}

DispersiveTerm dispersive_loss(const ad::Var& features, double tau) {
  if (features.value().rank() != 2) throw ShapeError("dispersive_loss: features must be a matrix, got " + to_string(features.shape()));
  if (!(tau > 0.0)) throw std::invalid_argument("dispersive_loss: tau must be positive");
  if (features.value().rows() < 2) return {ad::Var(Tensor::scalar(0.0)), true};
  return {ad::offdiag_log_mean_exp(ad::scale(ad::pairwise_sqdist(features), -1.0 / tau)), false};
}

double dispersive_loss(const Tensor& features, double tau) {
  return dispersive_loss(ad::Var(features), tau).loss.value().item();
}

CombinedLoss combine_losses(const ad::Var& u_pred, const Tensor& u_tgt, const Tensor& v0, const ad::Var& features,
                            const ObjectiveConfig& cfg) {
  const ad::Var mse = mse_loss(u_pred, ad::Var(u_tgt));
  const auto disp = dispersive_loss(features, cfg.tau_disp);
  const auto cos = cosine_loss(u_pred, ad::Var(v0), cfg.norm_floor, cfg.cos_clamp);
  const ad::Var total = ad::add(ad::add(mse, ad::scale(disp.loss, cfg.lambda_disp)), ad::scale(cos.loss, cfg.lambda_cos));

  LossTerms terms;
  terms.mse = mse.value().item();
  terms.dispersive = disp.loss.value().item();
  terms.cosine = cos.loss.value().item();
  terms.total = total.value().item();
  terms.mean_cos_alpha = cos.mean_cos;
  terms.mean_pred_norm = mean_row_norm(u_pred.value());
  terms.mean_target_norm = mean_row_norm(u_tgt);
  terms.dispersive_skipped = disp.skipped;
  return {total, terms};
}

LossEvaluation total_loss(const VelocityNet& net, const FlowBatch& batch, const ObjectiveConfig& cfg) {
  if (batch.size() == 0) throw std::invalid_argument("total_loss: empty batch");
  const Tensor v = batch.velocity();

  ad::Tape tape;
  const auto params = net.bind(tape);
  ad::Var z(batch.z_t), t(batch.t);
  if (cfg.derivative_mode == DerivativeMode::Jvp) {
    z = z.with_tangent(ad::Var(v));
    t = t.with_tangent(ad::Var(Tensor::filled(batch.t.shape(), 1.0)));
  }
  const auto out = net.forward(params, z, ad::Var(batch.r), t, ad::Var(batch.c));

  TimeDerivative d;
  if (cfg.derivative_mode == DerivativeMode::Jvp) {
    d.dudt = ad::detach(out.u.tangent()).value();
  } else {
    d = time_derivative(as_model(net), batch, cfg);
  }
  Tensor u_tgt = identity_target(batch, d.dudt);

  // Losses see only the primal path; the tangent graph feeds the target alone.
  auto combined = combine_losses(out.u.primal(), u_tgt, v, out.features.primal(), cfg);
  combined.terms.one_sided_rows = d.one_sided_rows;

  if (!std::isfinite(combined.terms.total)) {
    std::ostringstream os;
    os << "objective is not finite: mse=" << combined.terms.mse << " dispersive=" << combined.terms.dispersive
       << " cosine=" << combined.terms.cosine << " mode=" << to_string(cfg.derivative_mode) << "\n"
       << describe("z0", batch.z0) << describe("eps", batch.eps) << describe("r", batch.r) << describe("t", batch.t)
       << describe("u_pred", out.u.value()) << describe("u_tgt", u_tgt);
    throw NonFiniteLossError(os.str());
  }

  tape.freeze();
  const auto grads = tape.backward(combined.total);
  LossEvaluation result;
  result.terms = combined.terms;
  result.gradients.reserve(params.size());
  for (const auto& p : params) result.gradients.push_back(grads.at(p.id()));
  result.u_tgt = std::move(u_tgt);
  result.tape = {tape.node_count(), tape.saved_element_count()};
  return result;
}

// ---------------------------------------------------------------------------
// Probe

DirectionalProbe directional_gradient_probe(double rho, double rho_star, double alpha) {
  if (!(rho >= 0.0) || !(rho_star >= 0.0)) throw std::invalid_argument("probe: magnitudes must be non-negative");
  const Tensor target = Tensor::matrix({{rho_star, 0.0}});
  const Tensor direction = Tensor::matrix({{1.0, 0.0}});
  const double floor = ObjectiveConfig{}.norm_floor;
  auto pred = [&](double a) { return Tensor::matrix({{rho * std::cos(a), rho * std::sin(a)}}); };
  auto mse_at = [&](double a) { return mse_loss(pred(a), target); };
  auto cos_at = [&](double a) { return cosine_loss(pred(a), direction, floor).loss; };

  constexpr double h = 1e-3;
  auto stencil = [&](auto&& f) {
    return (-f(alpha + 2 * h) + 8 * f(alpha + h) - 8 * f(alpha - h) + f(alpha - 2 * h)) / (12 * h);
  };

  DirectionalProbe p;
  p.d_mse_dalpha = stencil(mse_at);
  p.d_cos_dalpha = rho > 0.0 ? stencil(cos_at) : 0.0;
  p.analytic_mse = 2.0 * rho * rho_star * std::sin(alpha);
  p.analytic_cos = rho > 0.0 ? std::sin(alpha) / (1.0 + std::cos(alpha)) : 0.0;

  const double scale = std::max(1.0, rho * rho_star);
  if (std::abs(p.d_mse_dalpha - p.analytic_mse) > 1e-7 * scale) {
    std::ostringstream os;
    os.precision(17);
    os << "probe: d(mse)/d(alpha)=" << p.d_mse_dalpha << " departs from 2 rho rho* sin(alpha)=" << p.analytic_mse;
    throw std::logic_error(os.str());
  }
  return p;
}

}  // namespace mflow
