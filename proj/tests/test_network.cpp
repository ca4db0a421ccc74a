#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "fd_oracle.hpp"
#include "mflow/network.hpp"

using namespace mflow;
using mflow::testing::random_tensor;

namespace {

Architecture small_arch() {
  Architecture a;
  a.action_dim = 2;
  a.cond_dim = 3;
  a.hidden_dims = {16, 12, 8};
  a.time_embed_dim = 6;
  return a;
}

struct Inputs {
  Tensor z, r, t, c;
};

Inputs random_inputs(Rng& rng, std::size_t batch, const Architecture& a) {
  Tensor r = random_tensor(rng, {batch}, 0, 1);
  Tensor t = random_tensor(rng, {batch}, 0, 1);
  for (std::size_t i = 0; i < batch; ++i)
    if (r[i] > t[i]) std::swap(r[i], t[i]);
  return {random_tensor(rng, {batch, a.action_dim}, -2, 2), r, t, random_tensor(rng, {batch, a.cond_dim}, -1, 1)};
}

Tensor features_of(const VelocityNet& net, const Inputs& in) {
  const auto params = net.constants();
  return net.forward(params, ad::Var(in.z), ad::Var(in.r), ad::Var(in.t), ad::Var(in.c)).features.value();
}

}  // namespace

TEST(Network, InitIsDeterministicPerSeed) {
  const auto a = VelocityNet::init(3, small_arch());
  const auto b = VelocityNet::init(3, small_arch());
  const auto c = VelocityNet::init(4, small_arch());
  EXPECT_EQ(a, b);
  EXPECT_NE(a.parameters(), c.parameters());
}

TEST(Network, LayerWidthsFollowArchitecture) {
  const auto arch = small_arch();
  const auto net = VelocityNet::init(0, arch);
  EXPECT_EQ(net.weight(0).cols(), arch.action_dim + arch.cond_dim + 2 * arch.time_embed_dim);
  EXPECT_EQ(net.weight(net.layer_count() - 1).rows(), arch.action_dim);
}

TEST(Network, InitBoundFollowsFanIn) {
  Architecture a;
  a.action_dim = 2;
  a.cond_dim = 2;
  a.time_embed_dim = 48;  // fan-in 100
  a.hidden_dims = {32};
  const auto net = VelocityNet::init(1, a);
  ASSERT_EQ(net.weight(0).cols(), 100u);
  const double bound = std::sqrt(6.0 / 100.0);
  double largest = 0;
  for (double w : net.weight(0).data()) largest = std::max(largest, std::abs(w));
  EXPECT_LE(largest, bound);
  EXPECT_GT(largest, 0.9 * bound);
}

TEST(Network, ZeroWidthLayerRejected) {
  auto a = small_arch();
  a.hidden_dims = {8, 0};
  EXPECT_THROW(VelocityNet::init(0, a), std::invalid_argument);
}

TEST(Network, SingleRowSmoke) {
  Rng rng(0);
  const auto net = VelocityNet::init(0, small_arch());
  const auto in = random_inputs(rng, 1, net.arch());
  EXPECT_EQ(net.velocity(in.z, in.r, in.t, in.c).shape(), (Shape{1, 2}));
}

TEST(Network, ZeroWeightsGiveLastBias) {
  auto net = VelocityNet::init(0, small_arch());
  for (auto& p : net.parameters()) p = Tensor::zeros(p.shape());
  auto& last_bias = net.parameters().back();
  last_bias[0] = 0.5;
  last_bias[1] = -2.0;
  Rng rng(1);
  const auto in = random_inputs(rng, 4, net.arch());
  const Tensor u = net.velocity(in.z, in.r, in.t, in.c);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(u.at(i, 0), 0.5);
    EXPECT_EQ(u.at(i, 1), -2.0);
  }
}

TEST(Network, RowPermutationEquivariance) {
  Rng rng(2);
  const auto net = VelocityNet::init(5, small_arch());
  const std::size_t batch = 7;
  const auto in = random_inputs(rng, batch, net.arch());
  const Tensor u = net.velocity(in.z, in.r, in.t, in.c);

  std::vector<std::size_t> perm{3, 0, 6, 1, 5, 2, 4};
  auto permute_rows = [&](const Tensor& x) {
    Tensor out = x;
    const std::size_t w = x.rank() == 2 ? x.cols() : 1;
    for (std::size_t i = 0; i < batch; ++i)
      for (std::size_t c = 0; c < w; ++c) out[i * w + c] = x[perm[i] * w + c];
    return out;
  };
  const Tensor up = net.velocity(permute_rows(in.z), permute_rows(in.r), permute_rows(in.t), permute_rows(in.c));
  EXPECT_EQ(up, permute_rows(u));
}

TEST(Network, TimesOutsideUnitIntervalRejected) {
  Rng rng(3);
  const auto net = VelocityNet::init(0, small_arch());
  auto in = random_inputs(rng, 2, net.arch());
  in.t[1] = 1.5;
  EXPECT_THROW(net.velocity(in.z, in.r, in.t, in.c), std::domain_error);
  in.t[1] = 0.5;
  in.r[0] = -0.1;
  EXPECT_THROW(net.velocity(in.z, in.r, in.t, in.c), std::domain_error);
}

TEST(Network, EmbeddingEntriesAreUnitBounded) {
  const TimeEmbedding emb(32);
  EXPECT_EQ(emb.frequencies().size(), 16u);
  for (std::size_t k = 1; k < emb.frequencies().size(); ++k) EXPECT_GT(emb.frequencies()[k], emb.frequencies()[k - 1]);
  const Tensor e = emb.embed(ad::Var(Tensor::vector({0.0, 0.3, 1.0}))).value();
  for (double x : e.data()) EXPECT_LE(std::abs(x), 1.0);
}

TEST(Network, NoDeadUnitsAtInit) {
  Rng rng(4);
  const auto net = VelocityNet::init(9, small_arch());
  const auto in = random_inputs(rng, 8, net.arch());
  ad::Tape tape;
  const auto params = net.bind(tape);
  const auto out = net.forward(params, ad::Var(in.z), ad::Var(in.r), ad::Var(in.t), ad::Var(in.c));
  const ad::Var root = ad::sum(ad::square(out.u));
  tape.freeze();
  const auto grads = tape.backward(root);
  for (const auto& p : params) {
    double norm = 0;
    for (double g : grads.at(p.id()).data()) norm += g * g;
    EXPECT_GT(norm, 0.0);
  }
  // Spot check one weight entry against a central difference.
  const double h = 1e-5;
  auto loss_with = [&](double delta) {
    auto copy = net;
    copy.parameters()[2][0] += delta;
    const Tensor u = copy.velocity(in.z, in.r, in.t, in.c);
    double s = 0;
    for (double x : u.data()) s += x * x;
    return s;
  };
  const double fd = (loss_with(h) - loss_with(-h)) / (2 * h);
  EXPECT_NEAR(grads.at(params[2].id())[0], fd, 1e-6 * std::max(1.0, std::abs(fd)));
}

TEST(Network, FeaturesDependOnlyOnLayersUpToFeatureLayer) {
  Rng rng(5);
  const auto net = VelocityNet::init(2, small_arch());
  ASSERT_EQ(net.arch().feature_index(), 1u);
  const auto in = random_inputs(rng, 5, net.arch());
  const Tensor base = features_of(net, in);

  for (std::size_t p = 0; p < net.parameters().size(); ++p) {
    auto copy = net;
    copy.parameters()[p][0] += 0.1;
    const bool changed = features_of(copy, in) != base;
    const std::size_t layer = p / 2;
    EXPECT_EQ(changed, layer <= 1) << "parameter " << p;
  }
}

TEST(Network, CheckpointRoundTripsBitExactly) {
  const auto net = VelocityNet::init(17, small_arch());
  const auto path = std::filesystem::temp_directory_path() / "mflow_net_roundtrip.json";
  save_network(net, path);
  const auto back = load_network(path);
  EXPECT_EQ(back, net);
  std::filesystem::remove(path);
}
