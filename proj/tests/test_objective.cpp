#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "fd_oracle.hpp"
#include "mflow/objective.hpp"
#include "plain_mlp.hpp"

using namespace mflow;
using mflow::testing::random_tensor;

namespace {

Architecture tiny_arch(std::size_t cond = 0) {
  Architecture a;
  a.action_dim = 2;
  a.cond_dim = cond;
  a.hidden_dims = {8};
  a.time_embed_dim = 4;
  return a;
}

Architecture small_arch() {
  Architecture a;
  a.action_dim = 3;
  a.cond_dim = 2;
  a.hidden_dims = {16, 16, 16};
  a.time_embed_dim = 8;
  return a;
}

FlowBatch random_batch(Rng& rng, std::size_t batch, const Architecture& a, double p_equal = 0.5) {
  ObjectiveConfig cfg;
  cfg.p_equal = p_equal;
  const Tensor x = random_tensor(rng, {batch, a.action_dim}, -1, 1);
  const Tensor c = random_tensor(rng, {batch, a.cond_dim}, -1, 1);
  return make_batch(x, c, rng, cfg);
}

double norm_of(const Tensor& x) {
  double s = 0;
  for (double v : x.data()) s += v * v;
  return std::sqrt(s);
}

Tensor difference(const Tensor& a, const Tensor& b) {
  Tensor out = a;
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
  return out;
}

}  // namespace

TEST(Objective, DerivativeModeNames) {
  EXPECT_EQ(parse_derivative_mode("DDE"), DerivativeMode::DdeFull);
  EXPECT_EQ(parse_derivative_mode("JVP"), DerivativeMode::Jvp);
  EXPECT_EQ(parse_derivative_mode("DDE_time_only"), DerivativeMode::DdeTimeOnly);
  EXPECT_EQ(parse_derivative_mode(to_string(DerivativeMode::DdeFull)), DerivativeMode::DdeFull);
  EXPECT_THROW(parse_derivative_mode("finite"), std::invalid_argument);
}

TEST(Objective, ConfigValidation) {
  ObjectiveConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  cfg.tau_disp = 0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = {};
  cfg.p_equal = 1.5;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

TEST(SampleTimes, OrderedWithExpectedGap) {
  Rng rng(0);
  const auto s = sample_times(20000, 0.0, rng);
  double gap = 0;
  for (std::size_t i = 0; i < s.t.size(); ++i) {
    ASSERT_LT(s.r[i], s.t[i]);
    gap += s.t[i] - s.r[i];
  }
  EXPECT_NEAR(gap / 20000.0, 1.0 / 3.0, 0.01);
}

TEST(SampleTimes, EqualFractionFollowsProbability) {
  Rng rng(1);
  const auto all = sample_times(100, 1.0, rng);
  EXPECT_EQ(all.r, all.t);
  const auto some = sample_times(20000, 0.75, rng);
  std::size_t equal = 0;
  for (std::size_t i = 0; i < some.t.size(); ++i) equal += some.r[i] == some.t[i];
  EXPECT_NEAR(equal / 20000.0, 0.75, 0.015);
}

TEST(MakeBatch, InterpolantEndpoints) {
  Rng rng(2);
  const Tensor z0 = random_tensor(rng, {2, 2}, -1, 1);
  const Tensor eps = random_tensor(rng, {2, 2}, -1, 1);
  const auto b = make_batch_at(z0, eps, Tensor::vector({0.0, 0.0}), Tensor::vector({0.0, 1.0}), Tensor::zeros({2, 0}));
  EXPECT_EQ(b.z_t.at(0, 0), z0.at(0, 0));
  EXPECT_EQ(b.z_t.at(0, 1), z0.at(0, 1));
  EXPECT_EQ(b.z_t.at(1, 0), eps.at(1, 0));
  EXPECT_EQ(b.z_t.at(1, 1), eps.at(1, 1));
  EXPECT_THROW(make_batch_at(z0, eps, Tensor::vector({0.5, 0.0}), Tensor::vector({0.2, 1.0}), Tensor::zeros({2, 0})),
               std::domain_error);
}

TEST(Target, EqualTimesGiveVelocityBitwise) {
  Rng rng(3);
  const auto net = VelocityNet::init(1, small_arch());
  const auto batch = random_batch(rng, 64, net.arch());
  const Tensor v = batch.velocity();
  for (auto mode : {DerivativeMode::Jvp, DerivativeMode::DdeTimeOnly, DerivativeMode::DdeFull}) {
    ObjectiveConfig cfg;
    cfg.derivative_mode = mode;
    const auto target = target_velocity(net, batch, cfg);
    std::size_t checked = 0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      if (batch.r[i] != batch.t[i]) continue;
      ++checked;
      for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(target.u_tgt.at(i, j), v.at(i, j));
    }
    EXPECT_GT(checked, 10u);
  }
}

TEST(Target, LinearModelHasClosedFormDerivative) {
  // u(z, r, t) = z A^T + t b, so du/dt along (v, 0, 1) is v A^T + b.
  Rng rng(17);
  const Tensor a = random_tensor(rng, {2, 2}, -1, 1);
  const Tensor b = random_tensor(rng, {2}, -1, 1);
  const MeanVelocityModel model = [&](const ad::Var& z, const ad::Var&, const ad::Var& t, const ad::Var&) {
    const std::size_t n = z.value().rows();
    const ad::Var tb = ad::matmul(ad::reshape(t, {n, 1}), ad::Var(b.reshaped({1, 2})));
    return ad::add(ad::matmul(z, ad::transpose(ad::Var(a))), tb);
  };
  const auto batch = random_batch(rng, 9, tiny_arch(), 0.0);
  const Tensor dudt = time_derivative(model, batch, {}).dudt;
  const Tensor v = batch.velocity();
  for (std::size_t i = 0; i < 9; ++i)
    for (std::size_t j = 0; j < 2; ++j) {
      const double expected = a.at(j, 0) * v.at(i, 0) + a.at(j, 1) * v.at(i, 1) + b[j];
      EXPECT_NEAR(dudt.at(i, j), expected, 1e-10);
    }
}

TEST(Target, JvpMatchesDirectionalDifference) {
  Rng rng(4);
  const auto net = VelocityNet::init(2, small_arch());
  auto batch = random_batch(rng, 6, net.arch(), 0.0);
  for (std::size_t i = 0; i < batch.size(); ++i) batch.t[i] = 0.2 + 0.6 * batch.t[i];
  batch = make_batch_at(batch.z0, batch.eps, Tensor::zeros({6}), batch.t, batch.c);

  const auto jvp = time_derivative(net, batch, {});
  const auto fd = mflow::testing::central_directional(
      [&](const std::vector<Tensor>& x) { return net.velocity(x[0], batch.r, x[1], batch.c); },
      {batch.z_t, batch.t}, {batch.velocity(), Tensor::filled({6}, 1.0)}, 1e-6);
  EXPECT_LT(mflow::testing::relative_error({jvp.dudt}, {fd}), 1e-7);
}

TEST(Target, TimeOnlyStencilSeesPartialDerivative) {
  Rng rng(5);
  const auto net = VelocityNet::init(3, small_arch());
  auto batch = random_batch(rng, 5, net.arch(), 0.0);
  batch = make_batch_at(batch.z0, batch.eps, Tensor::filled({5}, 0.1), Tensor::filled({5}, 0.5), batch.c);
  ObjectiveConfig cfg;
  cfg.derivative_mode = DerivativeMode::DdeTimeOnly;
  const Tensor time_only = time_derivative(net, batch, cfg).dudt;
  const Tensor partial = mflow::testing::central_directional(
      [&](const std::vector<Tensor>& x) { return net.velocity(batch.z_t, batch.r, x[0], batch.c); }, {batch.t},
      {Tensor::filled({5}, 1.0)}, 1e-3);
  EXPECT_LT(mflow::testing::relative_error({time_only}, {partial}), 1e-12);
  cfg.derivative_mode = DerivativeMode::DdeFull;
  EXPECT_GT(max_abs_diff(time_derivative(net, batch, cfg).dudt, time_only), 1e-3);
}

TEST(Target, FullStencilConvergesAtSecondOrder) {
  Rng rng(6);
  const auto net = VelocityNet::init(4, small_arch());
  auto batch = random_batch(rng, 16, net.arch(), 0.0);
  for (std::size_t i = 0; i < batch.size(); ++i) batch.t[i] = 0.1 + 0.8 * batch.t[i];
  batch = make_batch_at(batch.z0, batch.eps, Tensor::zeros({16}), batch.t, batch.c);
  const Tensor exact = time_derivative(net, batch, {}).dudt;

  std::vector<double> errors;
  for (double eps : {4e-3, 2e-3, 1e-3}) {
    ObjectiveConfig cfg;
    cfg.derivative_mode = DerivativeMode::DdeFull;
    cfg.dde_epsilon = eps;
    const auto d = time_derivative(net, batch, cfg);
    EXPECT_EQ(d.one_sided_rows, 0u);
    errors.push_back(norm_of(difference(d.dudt, exact)));
  }
  EXPECT_GE(errors[0] / errors[1], 3.5);
  EXPECT_GE(errors[1] / errors[2], 3.5);
}

TEST(Target, BoundaryRowsUseOneSidedDifference) {
  Rng rng(7);
  const auto net = VelocityNet::init(5, small_arch());
  auto batch = random_batch(rng, 3, net.arch());
  batch = make_batch_at(batch.z0, batch.eps, Tensor::vector({0.0, 0.2, 0.0}), Tensor::vector({1.0, 0.5, 0.0}), batch.c);
  ObjectiveConfig cfg;
  cfg.derivative_mode = DerivativeMode::DdeFull;
  const auto d = time_derivative(net, batch, cfg);
  EXPECT_EQ(d.one_sided_rows, 2u);
  const Tensor exact = time_derivative(net, batch, {}).dudt;
  // First order: the error is a small multiple of epsilon times the curvature.
  for (std::size_t i = 0; i < d.dudt.size(); ++i) EXPECT_NEAR(d.dudt[i], exact[i], 0.05 * std::max(1.0, std::abs(exact[i])));
}

TEST(Losses, MseOfOrthogonalUnitRowsIsTwo) {
  EXPECT_DOUBLE_EQ(mse_loss(Tensor::matrix({{1, 0}, {0, 1}}), Tensor::matrix({{0, 1}, {1, 0}})), 2.0);
  EXPECT_EQ(mse_loss(Tensor::matrix({{0.3, -2}}), Tensor::matrix({{0.3, -2}})), 0.0);
}

TEST(Losses, MseMatchesLawOfCosines) {
  Rng rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    const double rho = rng.uniform(0.01, 3), rho_star = rng.uniform(0.01, 3), alpha = rng.uniform(0, std::numbers::pi);
    const double phi = rng.uniform(0, 2 * std::numbers::pi);
    const Tensor u = Tensor::matrix({{rho * std::cos(phi + alpha), rho * std::sin(phi + alpha)}});
    const Tensor target = Tensor::matrix({{rho_star * std::cos(phi), rho_star * std::sin(phi)}});
    const double expected = rho * rho + rho_star * rho_star - 2 * rho * rho_star * std::cos(alpha);
    EXPECT_NEAR(mse_loss(u, target), expected, 1e-12 * (rho * rho + rho_star * rho_star));
  }
}

TEST(Losses, CosineReferenceValues) {
  const double floor = 1e-8;
  const auto same = cosine_loss(Tensor::matrix({{0.3, 0.4}}), Tensor::matrix({{0.3, 0.4}}), floor);
  EXPECT_EQ(same.loss, 0.0);
  EXPECT_EQ(same.mean_cos, 1.0);
  EXPECT_NEAR(cosine_loss(Tensor::matrix({{1, 0}}), Tensor::matrix({{0, 2}}), floor).loss, std::log(2.0), 1e-15);
  const double anti = cosine_loss(Tensor::matrix({{1, 0}}), Tensor::matrix({{-1, 0}}), floor).loss;
  EXPECT_NEAR(anti, -std::log(ObjectiveConfig{}.cos_clamp / 2), 1e-9);
  // A zero prediction has no direction: cos = 0.
  EXPECT_NEAR(cosine_loss(Tensor::matrix({{0, 0}}), Tensor::matrix({{1, 1}}), floor).loss, std::log(2.0), 1e-15);
}

TEST(Losses, CosineIsScaleInvariant) {
  Rng rng(9);
  const Tensor u = random_tensor(rng, {10, 3}, -1, 1);
  const Tensor v = random_tensor(rng, {10, 3}, -1, 1);
  Tensor big = u, small = u;
  for (std::size_t i = 0; i < u.size(); ++i) {
    big[i] *= 1e3;
    small[i] *= 1e-4;
  }
  const double base = cosine_loss(u, v, 1e-8).loss;
  EXPECT_NEAR(cosine_loss(big, v, 1e-8).loss, base, 1e-12);
  EXPECT_NEAR(cosine_loss(small, v, 1e-8).loss, base, 1e-12);
}

TEST(Losses, DispersiveReferenceValues) {
  EXPECT_EQ(dispersive_loss(Tensor::matrix({{1, 2}, {1, 2}, {1, 2}}), 0.5), 0.0);
  // Two rows at squared distance tau.
  EXPECT_NEAR(dispersive_loss(Tensor::matrix({{0, 0}, {std::sqrt(0.5), 0}}), 0.5), -1.0, 1e-15);
  const auto single = dispersive_loss(ad::Var(Tensor::matrix({{1, 2}})), 0.5);
  EXPECT_TRUE(single.skipped);
  EXPECT_EQ(single.loss.value().item(), 0.0);
}

TEST(Losses, DispersiveFallsAsRowsSpread) {
  Rng rng(10);
  const Tensor h = random_tensor(rng, {8, 4}, -1, 1);
  double previous = 1.0;
  for (double s : {0.1, 0.5, 1.0, 2.0, 4.0}) {
    Tensor spread = h;
    for (double& x : spread.data()) x *= s;
    const double value = dispersive_loss(spread, 0.5);
    EXPECT_LT(value, previous);
    previous = value;
  }
}

TEST(Losses, DispersiveIsStableForFarApartRows) {
  const double value = dispersive_loss(Tensor::matrix({{0, 0}, {100, 0}}), 0.5);
  EXPECT_NEAR(value, -20000.0, 1e-9);
}

TEST(Combine, PerfectPredictionLeavesOnlyDispersion) {
  const Tensor v = Tensor::matrix({{1, 2}, {-3, 0.5}, {0.1, 0.1}});
  const Tensor features = Tensor::matrix({{0, 1}, {1, 0}, {2, 2}});
  ObjectiveConfig cfg;
  const auto c = combine_losses(ad::Var(v), v, v, ad::Var(features), cfg);
  EXPECT_EQ(c.terms.mse, 0.0);
  // cos may round one ulp below 1.
  EXPECT_NEAR(c.terms.cosine, 0.0, 1e-15);
  EXPECT_NEAR(c.terms.total, cfg.lambda_disp * dispersive_loss(features, cfg.tau_disp), 1e-15);
}

TEST(Combine, TotalIsWeightedSumExactly) {
  Rng rng(11);
  ObjectiveConfig cfg;
  cfg.lambda_disp = 0.37;
  cfg.lambda_cos = 1.9;
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor u = random_tensor(rng, {6, 2}, -1, 1);
    const auto c = combine_losses(ad::Var(u), random_tensor(rng, {6, 2}, -1, 1), random_tensor(rng, {6, 2}, -1, 1),
                                  ad::Var(random_tensor(rng, {6, 5}, -1, 1)), cfg);
    EXPECT_EQ(c.terms.total, c.terms.mse + cfg.lambda_disp * c.terms.dispersive + cfg.lambda_cos * c.terms.cosine);
  }
}

class TotalLossGradient : public ::testing::TestWithParam<DerivativeMode> {};

TEST_P(TotalLossGradient, MatchesPlainLoopDifferences) {
  Rng rng(12);
  const auto net = VelocityNet::init(6, tiny_arch(1));
  const auto batch = random_batch(rng, 5, net.arch());
  ObjectiveConfig cfg;
  cfg.derivative_mode = GetParam();
  const auto eval = total_loss(net, batch, cfg);

  const Tensor target = target_velocity(net, batch, cfg).u_tgt;
  EXPECT_EQ(eval.u_tgt, target);
  const Tensor v0 = batch.velocity();
  const mflow::testing::PlainWeights w{cfg.lambda_disp, cfg.lambda_cos, cfg.tau_disp, cfg.norm_floor, cfg.cos_clamp};
  auto objective = [&](const std::vector<Tensor>& params) {
    const auto out = mflow::testing::plain_forward(net.arch(), params, batch.z_t, batch.r, batch.t, batch.c);
    return mflow::testing::plain_objective(out, target, v0, w);
  };
  EXPECT_NEAR(objective(net.parameters()), eval.terms.total, 1e-12 * std::max(1.0, std::abs(eval.terms.total)));
  const auto fd = mflow::testing::central_gradient(objective, net.parameters(), 1e-5);
  EXPECT_LT(mflow::testing::relative_error(eval.gradients, fd), 1e-5);
}

INSTANTIATE_TEST_SUITE_P(Modes, TotalLossGradient,
                         ::testing::Values(DerivativeMode::Jvp, DerivativeMode::DdeTimeOnly, DerivativeMode::DdeFull));

TEST(TotalLoss, TargetCarriesNoGradient) {
  Rng rng(13);
  const auto net = VelocityNet::init(7, small_arch());
  const auto batch = random_batch(rng, 12, net.arch());
  ObjectiveConfig cfg;
  const auto eval = total_loss(net, batch, cfg);

  // Same loss with the target supplied as an external constant.
  ad::Tape tape;
  const auto params = net.bind(tape);
  const auto out = net.forward(params, ad::Var(batch.z_t), ad::Var(batch.r), ad::Var(batch.t), ad::Var(batch.c));
  const auto c = combine_losses(out.u, eval.u_tgt, batch.velocity(), out.features, cfg);
  tape.freeze();
  const auto grads = tape.backward(c.total);
  for (std::size_t p = 0; p < params.size(); ++p) EXPECT_EQ(eval.gradients[p], grads.at(params[p].id())) << p;
  EXPECT_EQ(c.terms.total, eval.terms.total);
  EXPECT_LT(tape.node_count(), eval.tape.nodes);
}

TEST(TotalLoss, FiniteDifferenceTargetRecordsNothingExtra) {
  Rng rng(14);
  const auto net = VelocityNet::init(8, small_arch());
  const auto batch = random_batch(rng, 12, net.arch());
  ObjectiveConfig jvp_cfg, dde_cfg;
  dde_cfg.derivative_mode = DerivativeMode::DdeFull;
  const auto jvp = total_loss(net, batch, jvp_cfg);
  const auto dde = total_loss(net, batch, dde_cfg);
  EXPECT_LT(dde.tape.nodes, jvp.tape.nodes);
  EXPECT_LT(dde.tape.saved_elements, jvp.tape.saved_elements);
  // Both targets agree to the stencil's accuracy.
  EXPECT_LT(max_abs_diff(jvp.u_tgt, dde.u_tgt), 1e-2);
}

TEST(TotalLoss, DeterministicAcrossCalls) {
  Rng rng(15);
  const auto net = VelocityNet::init(9, small_arch());
  const auto batch = random_batch(rng, 8, net.arch());
  const auto a = total_loss(net, batch, {});
  const auto b = total_loss(net, batch, {});
  EXPECT_EQ(a.gradients, b.gradients);
  EXPECT_EQ(a.terms.total, b.terms.total);
}

TEST(TotalLoss, NonFiniteObjectiveIsReported) {
  Rng rng(16);
  auto net = VelocityNet::init(10, tiny_arch());
  net.parameters().back()[0] = 1e200;
  const auto batch = random_batch(rng, 4, net.arch());
  try {
    total_loss(net, batch, {});
    FAIL() << "expected NonFiniteLossError";
  } catch (const NonFiniteLossError& e) {
    EXPECT_NE(std::string(e.what()).find("u_pred"), std::string::npos);
  }
}

TEST(Probe, ReferencePoint) {
  const auto p = directional_gradient_probe(1.0, 1.0, std::numbers::pi / 2);
  EXPECT_NEAR(p.d_mse_dalpha, 2.0, 1e-9);
  EXPECT_NEAR(p.d_cos_dalpha, 1.0, 1e-9);
  EXPECT_NEAR(p.analytic_cos, 1.0, 1e-15);
}

TEST(Probe, MseBranchVanishesWithTargetMagnitude) {
  const auto zero = directional_gradient_probe(1.0, 0.0, 1.0);
  EXPECT_NEAR(zero.d_mse_dalpha, 0.0, 1e-12);
  const double alpha = std::numbers::pi / 3;
  const auto big = directional_gradient_probe(1.0, 1.0, alpha);
  const auto tiny = directional_gradient_probe(1.0, 1e-4, alpha);
  EXPECT_LT(std::abs(tiny.d_mse_dalpha), 1e-3 * std::abs(big.d_mse_dalpha));
  EXPECT_NEAR(tiny.d_cos_dalpha, big.d_cos_dalpha, 1e-12);
  EXPECT_NEAR(big.d_cos_dalpha, big.analytic_cos, 1e-9);
}
