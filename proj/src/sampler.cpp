#include "mflow/sampler.hpp"

#include <stdexcept>

#include "mflow/rng.hpp"

namespace mflow {

Tensor draw_noise(std::size_t batch, std::size_t dim, std::uint64_t seed) {
  Rng rng(seed);
  Tensor z = Tensor::zeros({batch, dim});
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = rng.normal();
  return z;
}

Tensor sample_multi_step(const MeanVelocityFn& u, std::size_t action_dim, const SampleRequest& req) {
  if (req.nfe == 0) throw std::invalid_argument("sample: nfe must be at least 1");
  if (req.cond.rank() != 2) throw ShapeError("sample: cond must be [B x cond_dim], got " + to_string(req.cond.shape()));
  const std::size_t batch = req.batch();
  Tensor z = draw_noise(batch, action_dim, req.seed);
  const double n = static_cast<double>(req.nfe);
  for (std::size_t k = req.nfe; k >= 1; --k) {
    const double t = static_cast<double>(k) / n;
    const double r = static_cast<double>(k - 1) / n;
    const double h = t - r;
    const Tensor vel = u(z, Tensor::filled({batch}, r), Tensor::filled({batch}, t), req.cond);
    if (vel.shape() != z.shape()) throw ShapeError("sample", vel.shape(), z.shape());
    for (std::size_t i = 0; i < z.size(); ++i) z[i] -= h * vel[i];
  }
  return z;
}

Tensor sample_multi_step(const VelocityNet& net, const SampleRequest& req) {
  const MeanVelocityFn u = [&net](const Tensor& z, const Tensor& r, const Tensor& t, const Tensor& c) {
    return net.velocity(z, r, t, c);
  };
  return sample_multi_step(u, net.arch().action_dim, req);
}

Tensor sample_one_step(const VelocityNet& net, const SampleRequest& req) {
  SampleRequest one = req;
  one.nfe = 1;
  return sample_multi_step(net, one);
}

}  // namespace mflow
