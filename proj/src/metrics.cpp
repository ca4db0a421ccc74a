#include "mflow/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>

namespace mflow {

namespace {

void check_samples(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols()) throw ShapeError("mmd", a.shape(), b.shape());
  if (a.rows() < 2 || b.rows() < 2) throw std::invalid_argument("mmd: each sample set needs at least two rows");
}

double sqdist(const Tensor& a, std::size_t i, const Tensor& b, std::size_t j) {
  const std::size_t d = a.cols();
  double s = 0;
  for (std::size_t k = 0; k < d; ++k) {
    const double e = a[i * d + k] - b[j * d + k];
    s += e * e;
  }
  return s;
}

}  // namespace

double median_bandwidth(const Tensor& a, const Tensor& b) {
  check_samples(a, b);
  std::vector<const Tensor*> src;
  std::vector<std::size_t> row;
  for (std::size_t i = 0; i < a.rows(); ++i) src.push_back(&a), row.push_back(i);
  for (std::size_t i = 0; i < b.rows(); ++i) src.push_back(&b), row.push_back(i);
  std::vector<double> dists;
  dists.reserve(src.size() * (src.size() - 1) / 2);
  for (std::size_t i = 0; i < src.size(); ++i)
    for (std::size_t j = i + 1; j < src.size(); ++j) dists.push_back(sqdist(*src[i], row[i], *src[j], row[j]));
  const auto mid = dists.begin() + static_cast<std::ptrdiff_t>(dists.size() / 2);
  std::nth_element(dists.begin(), mid, dists.end());
  const double median = std::sqrt(*mid);
  return median > 0 ? median : 1.0;
}

double mmd_unbiased(const Tensor& a, const Tensor& b, double bandwidth) {
  check_samples(a, b);
  if (!(bandwidth > 0)) throw std::invalid_argument("mmd: bandwidth must be positive");
  const double inv = 1.0 / (2.0 * bandwidth * bandwidth);
  auto within = [&](const Tensor& x) {
    double s = 0;
    for (std::size_t i = 0; i < x.rows(); ++i)
      for (std::size_t j = i + 1; j < x.rows(); ++j) s += std::exp(-sqdist(x, i, x, j) * inv);
    const double n = static_cast<double>(x.rows());
    return 2.0 * s / (n * (n - 1));
  };
  double cross = 0;
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.rows(); ++j) cross += std::exp(-sqdist(a, i, b, j) * inv);
  cross /= static_cast<double>(a.rows()) * static_cast<double>(b.rows());
  return within(a) + within(b) - 2.0 * cross;
}

double mmd(const Tensor& a, const Tensor& b, double bandwidth) {
  const double bw = bandwidth > 0 ? bandwidth : median_bandwidth(a, b);
  return std::max(0.0, mmd_unbiased(a, b, bw));
}

double top_k_mean(std::span<const double> values, std::size_t k) {
  if (values.empty() || k == 0) return 0.0;
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end(), std::greater<>());
  const std::size_t take = std::min(k, sorted.size());
  double s = 0;
  for (std::size_t i = 0; i < take; ++i) s += sorted[i];
  return s / static_cast<double>(take);
}

MeanStd mean_std(std::span<const double> values) {
  MeanStd out;
  out.n = values.size();
  if (values.empty()) return out;
  for (double v : values) out.mean += v;
  out.mean /= static_cast<double>(values.size());
  double var = 0;
  for (double v : values) var += (v - out.mean) * (v - out.mean);
  out.std = std::sqrt(var / static_cast<double>(values.size()));
  return out;
}

}  // namespace mflow
