#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "ccdm/labelspace.hpp"

using namespace ccdm;

namespace {

// One-pass (Welford) sample standard deviation, independent of the
// two-pass implementation under test.
double welford_sd(const std::vector<double>& xs) {
  double mean = 0.0, m2 = 0.0;
  int n = 0;
  for (double x : xs) {
    ++n;
    const double d = x - mean;
    mean += d / n;
    m2 += d * (x - mean);
  }
  return std::sqrt(m2 / (n - 1));
}

}  // namespace

TEST(LabelSpace, NormalizesAffinely) {
  const std::vector<double> raw{-80, 0, 80};
  const auto ls = normalize_labels(raw);
  EXPECT_EQ(ls.labels, (std::vector<double>{0.0, 0.5, 1.0}));
  EXPECT_EQ(ls.distinct, (std::vector<double>{0.0, 0.5, 1.0}));
}

TEST(LabelSpace, DenormalizesMidpoint) {
  const std::vector<double> raw{1, 60};
  EXPECT_DOUBLE_EQ(normalize_labels(raw).denormalize(0.5), 30.5);
}

TEST(LabelSpace, RotationAngleRangeBounds) {
  const std::vector<double> raw{0.1, 45.0, 89.9};
  const auto ls = normalize_labels(raw);
  EXPECT_EQ(ls.raw_min, 0.1);
  EXPECT_EQ(ls.raw_max, 89.9);
  EXPECT_EQ(ls.labels.front(), 0.0);
  EXPECT_EQ(ls.labels.back(), 1.0);
}

TEST(LabelSpace, RejectsDegenerateInput) {
  const std::vector<double> constant{3, 3, 3};
  EXPECT_THROW(normalize_labels(constant), std::invalid_argument);
  const std::vector<double> single{1};
  EXPECT_THROW(normalize_labels(single), std::invalid_argument);
}

TEST(LabelSpace, RoundTripWithinBounds) {
  std::mt19937_64 gen(5);
  std::uniform_real_distribution<double> u(-80.0, 80.0);
  std::vector<double> raw(500);
  for (auto& r : raw) r = u(gen);
  const auto ls = normalize_labels(raw);
  for (std::size_t i = 0; i < raw.size(); ++i) {
    EXPECT_GE(ls.labels[i], 0.0);
    EXPECT_LE(ls.labels[i], 1.0);
    EXPECT_NEAR(ls.denormalize(ls.labels[i]), raw[i], 1e-12);
  }
  for (std::size_t i = 1; i < ls.distinct.size(); ++i) EXPECT_LT(ls.distinct[i - 1], ls.distinct[i]);
}

TEST(KdeBandwidth, UniformGridMatchesOracle) {
  std::vector<double> grid;
  for (int i = 0; i < 100; ++i) grid.push_back((2 * i + 1) / 200.0);
  const double sd = welford_sd(grid);
  const double oracle = std::pow(4.0 * std::pow(sd, 5) / 300.0, 0.2);
  const double got = kde_bandwidth(grid);
  EXPECT_NEAR(got, oracle, 1e-12);
  // 40-digit reference: 0.12233699573265657...
  EXPECT_NEAR(got, 0.12233699573265658, 1e-13);
  EXPECT_NEAR(got, 0.122, 1e-3);
}

TEST(KdeBandwidth, RejectsZeroSpread) {
  const std::vector<double> same{0.3, 0.3, 0.3, 0.3};
  EXPECT_THROW(kde_bandwidth(same), std::invalid_argument);
}

TEST(KdeBandwidth, ScalesLinearlyWithSpread) {
  const std::vector<double> base{0.4, 0.45, 0.5, 0.52, 0.6};
  std::vector<double> wide;
  for (double y : base) wide.push_back(0.5 + 2.0 * (y - 0.5));
  EXPECT_NEAR(kde_bandwidth(wide), 2.0 * kde_bandwidth(base), 1e-12);
}

TEST(VicinityParams, SingleGap) {
  const std::vector<double> d{0.0, 1.0};
  const auto p = vicinity_params(d, 1);
  EXPECT_EQ(p.kappa_base, 1.0);
  EXPECT_EQ(p.kappa, 1.0);
  EXPECT_EQ(p.nu, 1.0);
}

TEST(VicinityParams, MaxConsecutiveGap) {
  const std::vector<double> d{0.0, 0.1, 0.35, 0.4};
  const auto p = vicinity_params(d, 2);
  EXPECT_DOUBLE_EQ(p.kappa_base, 0.25);
  EXPECT_DOUBLE_EQ(p.kappa, 0.5);
  EXPECT_DOUBLE_EQ(p.nu, 4.0);
}

TEST(VicinityParams, SteeringAngleLadder) {
  // Two distinct labels whose gap is the reported kappa_base.
  const std::vector<double> d{0.0, 0.00632};
  EXPECT_DOUBLE_EQ(vicinity_params(d, 5).kappa, 5 * 0.00632);
  EXPECT_NEAR(vicinity_params(d, 5).kappa, 0.0316, 1e-15);
}

TEST(VicinityParams, ZeroMultiplierDisablesVicinity) {
  const std::vector<double> d{0.0, 0.5, 1.0};
  const auto p = vicinity_params(d, 0);
  EXPECT_EQ(p.kappa, 0.0);
  EXPECT_EQ(p.nu, 0.0);
  const std::vector<double> one{0.5};
  EXPECT_THROW(vicinity_params(one, 1), std::invalid_argument);
}

TEST(VicinityParams, MonotoneInMultiplier) {
  const std::vector<double> d{0.0, 0.1, 0.35, 0.4, 1.0};
  for (int m = 1; m < 10; ++m) {
    const auto a = vicinity_params(d, m);
    const auto b = vicinity_params(d, m + 1);
    EXPECT_GE(b.kappa, a.kappa);
    EXPECT_LE(b.nu, a.nu);
  }
}

TEST(VicinalWeights, HardExamples) {
  EXPECT_EQ(hard_weight(0.52, 0.50, 0.017), 0.0);
  EXPECT_EQ(hard_weight(0.52, 0.50, 0.03), 1.0);
  EXPECT_EQ(hard_weight(0.3, 0.3, 0.0), 1.0);
}

TEST(VicinalWeights, SoftExamples) {
  EXPECT_EQ(soft_weight(0.4, 0.4, 10.0), 1.0);
  const double kappa = 0.03;
  EXPECT_NEAR(soft_weight(0.5 + kappa, 0.5, 1.0 / (kappa * kappa)), 0.36787944117144233, 1e-12);
  EXPECT_NEAR(soft_weight(0.75, 0.25, 4.0), 0.36787944117144233, 1e-15);
}

TEST(VicinalWeights, SymmetryAndDominance) {
  std::mt19937_64 gen(11);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < 2000; ++i) {
    const double a = u(gen), b = u(gen), kappa = 0.2 * u(gen) + 1e-3;
    EXPECT_EQ(hard_weight(a, b, kappa), hard_weight(b, a, kappa));
    const double nu = 1.0 / (kappa * kappa);
    EXPECT_EQ(soft_weight(a, b, nu), soft_weight(b, a, nu));
    EXPECT_LE(soft_weight(a, b, nu), 1.0);
    if (a != b) EXPECT_LT(soft_weight(a, b, nu), 1.0);
    if (hard_weight(a, b, kappa) == 1.0) EXPECT_GE(soft_weight(a, b, nu), std::exp(-1.0) - 1e-15);
  }
}

TEST(LabelSpace, BuildFillsRuleOfThumbAndSerializes) {
  std::vector<double> raw;
  for (int i = 0; i < 20; ++i) raw.push_back(i * 4.5);
  const auto ls = build_labelspace(raw, 2);
  EXPECT_NEAR(ls.sigma_delta, kde_bandwidth(ls.labels), 1e-15);
  EXPECT_NEAR(ls.kappa, 2.0 / 19.0, 1e-12);
  EXPECT_NEAR(ls.nu, 1.0 / (ls.kappa * ls.kappa), 1e-9);
  const auto back = LabelSpace::from_json(ls.to_json());
  EXPECT_EQ(back.kappa, ls.kappa);
  EXPECT_EQ(back.raw_max, ls.raw_max);
  EXPECT_EQ(ls.to_json().at("N_distinct"), 20);
}
