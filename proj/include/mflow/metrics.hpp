#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "mflow/tensor.hpp"

namespace mflow {

/// Median pairwise Euclidean distance over the pooled rows of a and b.
double median_bandwidth(const Tensor& a, const Tensor& b);

/// Unbiased estimate of squared MMD with kernel exp(-|x - y|^2 / (2 bw^2)).
/// Can be slightly negative.
double mmd_unbiased(const Tensor& a, const Tensor& b, double bandwidth);

/// Unbiased MMD^2 floored at 0. A bandwidth <= 0 selects the median heuristic.
double mmd(const Tensor& a, const Tensor& b, double bandwidth = 0.0);

/// Mean of the k largest values (all of them when fewer than k).
double top_k_mean(std::span<const double> values, std::size_t k);

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // population standard deviation
  std::size_t n = 0;
};
MeanStd mean_std(std::span<const double> values);

}  // namespace mflow
