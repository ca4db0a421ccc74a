#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numbers>

#include "mflow/tasks.hpp"

using namespace mflow;

namespace {

double row_norm(const Tensor& x, std::size_t i) { return std::hypot(x.at(i, 0), x.at(i, 1)); }

double success_rate(const Dataset& d, const Tensor& actions, const std::string& stratum = "all") {
  return eval_success(d.spec, actions, d.conds, d.tags).at(stratum).rate();
}

}  // namespace

TEST(Tasks, NamesRoundTrip) {
  for (const char* name : {"gmm2d", "reach", "precision_dock", "mixed_magnitude"}) {
    EXPECT_EQ(to_string(default_task(name).kind), name);
  }
  EXPECT_THROW(default_task("peg_insert"), std::invalid_argument);
}

TEST(Gmm2d, DegenerateComponentIsItsMean) {
  TaskSpec s = default_task("gmm2d");
  s.gmm_means = {0.5, -0.25};
  s.gmm_weights = {1.0};
  s.gmm_stds = {0.0};
  const auto d = gen_gmm2d(s, 50, 1);
  for (std::size_t i = 0; i < 50; ++i) {
    EXPECT_EQ(d.actions.at(i, 0), 0.5);
    EXPECT_EQ(d.actions.at(i, 1), -0.25);
  }
}

TEST(Gmm2d, SymmetricPairAveragesToMidpoint) {
  TaskSpec s = default_task("gmm2d");
  s.gmm_means = {-1.0, 2.0, 3.0, 2.0};
  s.gmm_weights = {1.0, 1.0};
  s.gmm_stds = {0.2, 0.2};
  const std::size_t n = 20000;
  const auto d = gen_gmm2d(s, n, 7);
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += d.actions.at(i, 0);
    my += d.actions.at(i, 1);
  }
  mx /= n;
  my /= n;
  // Per-coordinate std: between-component spread 2 on x, 0.2 within.
  const double sx = std::sqrt(4.0 + 0.04), sy = 0.2;
  EXPECT_NEAR(mx, 1.0, 5 * sx / std::sqrt(double(n)));
  EXPECT_NEAR(my, 2.0, 5 * sy / std::sqrt(double(n)));
}

TEST(Gmm2d, ComponentCountsFollowWeights) {
  const auto d = gen_gmm2d(default_task("gmm2d"), 8000, 3);
  std::array<int, 4> counts{};
  for (int t : d.tags) ++counts[t];
  for (int c : counts) EXPECT_NEAR(c, 2000, 4 * std::sqrt(8000 * 0.25 * 0.75));
}

TEST(Tasks, GeneratorsAreDeterministic) {
  for (const char* name : {"gmm2d", "reach", "precision_dock", "mixed_magnitude"}) {
    const auto spec = default_task(name);
    EXPECT_EQ(generate(spec, 100, 5), generate(spec, 100, 5)) << name;
    EXPECT_NE(generate(spec, 100, 5).actions, generate(spec, 100, 6).actions) << name;
  }
}

TEST(Reach, ActionsPointAtGoalWithSmallNoise) {
  const auto spec = default_task("reach");
  const auto d = gen_reach(spec, 5000, 2);
  const double sigma = spec.label_noise * spec.magnitude;
  double cos_sum = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    const double gx = spec.goal[0] - d.conds.at(i, 0), gy = spec.goal[1] - d.conds.at(i, 1);
    // Residual is pure label noise, so a start at the goal gives an action near 0.
    EXPECT_LT(std::hypot(d.actions.at(i, 0) - spec.magnitude * gx, d.actions.at(i, 1) - spec.magnitude * gy), 6 * sigma);
    cos_sum += (d.actions.at(i, 0) * gx + d.actions.at(i, 1) * gy) / (row_norm(d.actions, i) * std::hypot(gx, gy));
  }
  EXPECT_GE(cos_sum / d.size(), 0.99);
}

TEST(Reach, ActionsScaleLinearlyWithMagnitude) {
  auto spec = default_task("reach");
  const auto full = gen_reach(spec, 200, 4);
  spec.magnitude = 0.5;
  const auto half = gen_reach(spec, 200, 4);
  for (std::size_t i = 0; i < full.actions.size(); ++i) EXPECT_NEAR(half.actions[i], 0.5 * full.actions[i], 1e-15);
}

TEST(PrecisionDock, NormsStayNearScale) {
  const auto spec = default_task("precision_dock");
  const double m = spec.magnitude;
  const auto d = gen_precision_dock(spec, 5000, 8);
  for (std::size_t i = 0; i < d.size(); ++i) {
    EXPECT_GE(row_norm(d.actions, i), 0.5 * m * (1 - 1e-12));
    EXPECT_LE(row_norm(d.actions, i), 1.5 * m * (1 + 1e-12));
  }
}

TEST(PrecisionDock, ZeroMagnitudeRejected) {
  auto spec = default_task("precision_dock");
  spec.magnitude = 0.0;
  EXPECT_THROW(gen_precision_dock(spec, 10, 0), std::invalid_argument);
}

TEST(PrecisionDock, DirectionsAreBimodalPerCondition) {
  const auto spec = default_task("precision_dock");
  const auto d = gen_precision_dock(spec, 20000, 9);
  // Bucket conditions on a coarse grid and count rows near each mode.
  std::map<std::pair<int, int>, std::array<int, 3>> buckets;
  for (std::size_t i = 0; i < d.size(); ++i) {
    const double c1 = d.conds.at(i, 0), c2 = d.conds.at(i, 1);
    const auto modes = dock_modes(c1, c2);
    const double angle = std::atan2(d.actions.at(i, 1), d.actions.at(i, 0));
    auto& b = buckets[{int(std::floor(c1 * 2)), int(std::floor(c2 * 2))}];
    int which = 2;
    for (int k = 0; k < 2; ++k)
      if (std::abs(std::remainder(angle - modes[k], 2 * std::numbers::pi)) < 0.2) which = k;
    ++b[which];
  }
  for (const auto& [key, b] : buckets) {
    const int total = b[0] + b[1] + b[2];
    EXPECT_EQ(b[2], 0);
    EXPECT_GT(b[0], total / 4);
    EXPECT_GT(b[1], total / 4);
  }
}

TEST(MixedMagnitude, PopulationRatioAndScales) {
  const auto spec = default_task("mixed_magnitude");
  const std::size_t n = 10000;
  const auto d = gen_mixed_magnitude(spec, n, 10);
  double small_norm = 0, large_norm = 0;
  std::size_t small = 0;
  for (std::size_t i = 0; i < n; ++i) {
    EXPECT_EQ(d.conds.at(i, 2), d.tags[i] == kTagSmall ? 1.0 : 0.0);
    if (d.tags[i] == kTagSmall) {
      ++small;
      small_norm += row_norm(d.actions, i);
    } else {
      large_norm += row_norm(d.actions, i);
    }
  }
  const double p = spec.small_fraction;
  EXPECT_NEAR(double(small), p * n, 4 * std::sqrt(n * p * (1 - p)));
  const double ratio = (large_norm / double(n - small)) / (small_norm / double(small));
  EXPECT_NEAR(ratio, spec.m_large / spec.m_small, 0.1 * spec.m_large / spec.m_small);
}

TEST(MixedMagnitude, RatioBelowFloorRejected) {
  auto spec = default_task("mixed_magnitude");
  spec.m_small = 0.05;
  EXPECT_THROW(spec.validate(), std::invalid_argument);
}

TEST(EvalSuccess, ExpertActionsSucceed) {
  for (const char* name : {"reach", "precision_dock", "mixed_magnitude", "gmm2d"}) {
    const auto d = generate(default_task(name), 4000, 11);
    const auto report = eval_success(d.spec, d.actions, d.conds, d.tags);
    for (const auto& [stratum, s] : report) EXPECT_GE(s.rate(), 0.99) << name << " " << stratum;
  }
}

TEST(EvalSuccess, MixedReportsBothStrata) {
  const auto d = generate(default_task("mixed_magnitude"), 100, 1);
  const auto report = eval_success(d.spec, d.actions, d.conds, d.tags);
  EXPECT_EQ(report.at("large").count + report.at("small").count, report.at("all").count);
}

TEST(EvalSuccess, ZeroActionsFailDocking) {
  const auto d = generate(default_task("precision_dock"), 500, 12);
  EXPECT_EQ(success_rate(d, Tensor::zeros(d.actions.shape())), 0.0);
}

TEST(EvalSuccess, RandomDirectionsHitTheConesByArea) {
  const auto d = generate(default_task("precision_dock"), 20000, 13);
  Rng rng(99);
  Tensor guess = Tensor::zeros(d.actions.shape());
  for (std::size_t i = 0; i < d.size(); ++i) {
    const double theta = rng.uniform(0, 2 * std::numbers::pi);
    const double len = d.spec.magnitude * dock_length(d.conds.at(i, 0), d.conds.at(i, 1));
    guess[2 * i] = len * std::cos(theta);
    guess[2 * i + 1] = len * std::sin(theta);
  }
  EXPECT_NEAR(success_rate(d, guess), 2.0 * 15.0 / 180.0, 0.05);
}

TEST(EvalSuccess, AngularCriterionIgnoresScale) {
  const auto d = generate(default_task("precision_dock"), 2000, 14);
  Rng rng(5);
  for (std::size_t i = 0; i < d.size(); ++i) {
    const double x = d.actions.at(i, 0) + rng.normal() * 0.01, y = d.actions.at(i, 1) + rng.normal() * 0.01;
    const double c1 = d.conds.at(i, 0), c2 = d.conds.at(i, 1);
    const bool base = dock_angular_error_deg(x, y, c1, c2) < 15.0;
    for (double s : {0.6, 1.4}) EXPECT_EQ(dock_angular_error_deg(s * x, s * y, c1, c2) < 15.0, base);
  }
}

TEST(EvalSuccess, MisalignedInputsRejected) {
  const auto d = generate(default_task("reach"), 10, 1);
  EXPECT_THROW(eval_success(d.spec, Tensor::zeros({9, 2}), d.conds, d.tags), ShapeError);
  EXPECT_THROW(eval_success(d.spec, d.actions, d.conds, std::span<const int>(d.tags).first(5)), ShapeError);
}

TEST(Dataset, FileRoundTripIsExact) {
  const auto d = generate(default_task("mixed_magnitude"), 300, 15);
  const auto path = std::filesystem::temp_directory_path() / "mflow_dataset_roundtrip.txt";
  write_dataset(d, path);
  EXPECT_EQ(read_dataset(path), d);
  std::filesystem::remove(path);
}

TEST(Dataset, MalformedTextRejected) {
  EXPECT_THROW(dataset_from_text("hello\n"), std::invalid_argument);
  std::string text = dataset_to_text(generate(default_task("reach"), 3, 0));
  text.resize(text.size() - 10);
  EXPECT_THROW(dataset_from_text(text), std::invalid_argument);
}

TEST(Dataset, SubsetCopiesRows) {
  const auto d = generate(default_task("precision_dock"), 10, 2);
  const auto s = subset(d, 3, 7);
  ASSERT_EQ(s.size(), 4u);
  EXPECT_EQ(s.actions.at(0, 1), d.actions.at(3, 1));
  EXPECT_EQ(s.conds.at(3, 0), d.conds.at(6, 0));
}
