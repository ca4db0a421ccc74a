#pragma once

#include <cstdint>
#include <functional>

#include "mflow/network.hpp"
#include "mflow/tensor.hpp"

namespace mflow {

struct SampleRequest {
  Tensor cond;  // [B x cond_dim]
  std::size_t nfe = 1;
  std::uint64_t seed = 0;

  std::size_t batch() const { return cond.rows(); }
};

/// Any mean-velocity field u(z, r, t | c) evaluated on a batch.
using MeanVelocityFn = std::function<Tensor(const Tensor& z, const Tensor& r, const Tensor& t, const Tensor& c)>;

/// z1 ~ N(0, I) of shape [B x d], drawn from Rng(seed) in row-major order.
Tensor draw_noise(std::size_t batch, std::size_t dim, std::uint64_t seed);

/// z0 = z1 - u(z1, 0, 1 | c).
Tensor sample_one_step(const VelocityNet& net, const SampleRequest& req);

/// Splits [0, 1] into nfe equal intervals and applies z <- z - h u(z, t - h, t | c)
/// from t = 1 down. nfe = 1 reproduces sample_one_step bit for bit.
Tensor sample_multi_step(const VelocityNet& net, const SampleRequest& req);

Tensor sample_multi_step(const MeanVelocityFn& u, std::size_t action_dim, const SampleRequest& req);

}  // namespace mflow
