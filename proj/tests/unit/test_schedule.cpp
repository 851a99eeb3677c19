#include <gtest/gtest.h>

#include <cmath>

#include "ccdm/schedule.hpp"

using namespace ccdm;

TEST(Schedule, RejectsTooFewSteps) {
  EXPECT_THROW(make_cosine_schedule(1), std::invalid_argument);
  EXPECT_THROW(make_cosine_schedule(0), std::invalid_argument);
  EXPECT_NO_THROW(make_cosine_schedule(2));
}

TEST(Schedule, AlphaBarZeroIsExactlyOne) {
  const auto s = make_cosine_schedule(1000);
  EXPECT_EQ(s.alpha_bar(0), 1.0);
  EXPECT_EQ(s.alpha_bars.size(), 1001u);
}

TEST(Schedule, TerminalAlphaBarIsTiny) {
  // Reference value 2.4288e-9 from a 40-digit evaluation of the clipped
  // cosine recursion; only the bound is contractual.
  const auto s = make_cosine_schedule(1000);
  EXPECT_LT(s.alpha_bar(1000), 1e-3);
  EXPECT_NEAR(s.alpha_bar(1000), 2.428766907034468e-9, 1e-15);
}

TEST(Schedule, ShortScheduleBetasAreNondecreasingAndClipped) {
  const auto s = make_cosine_schedule(10);
  for (int t = 1; t <= 10; ++t) {
    EXPECT_GE(s.beta(t), 0.0);
    EXPECT_LE(s.beta(t), 0.999);
    if (t > 1) EXPECT_GE(s.beta(t), s.beta(t - 1));
  }
}

TEST(Schedule, InvariantsHoldForManyLengths) {
  for (int T : {2, 3, 10, 50, 250, 1000, 4000}) {
    const auto s = make_cosine_schedule(T);
    for (int t = 1; t <= T; ++t) {
      const double ab = s.alpha_bar(t);
      EXPECT_GT(ab, 0.0);
      EXPECT_LE(ab, 1.0);
      EXPECT_LE(std::abs(s.alpha(t) * s.alpha_bar(t - 1) - ab), 1e-12 * ab);
      if (s.beta(t) > 0.0) EXPECT_LT(ab, s.alpha_bar(t - 1));
      const auto c = coefficients_at(s, t);
      EXPECT_GE(c.sigma_q2, 0.0);
      EXPECT_LT(c.sigma_q2, 1.0);
    }
    EXPECT_EQ(coefficients_at(s, 1).sigma_q2, 0.0);
  }
}

TEST(Schedule, IsReferentiallyTransparent) {
  const auto a = make_cosine_schedule(1000);
  const auto b = make_cosine_schedule(1000);
  EXPECT_EQ(a.betas, b.betas);
  EXPECT_EQ(a.alpha_bars, b.alpha_bars);
}

TEST(Schedule, CoefficientsRejectOutOfRange) {
  const auto s = make_cosine_schedule(10);
  EXPECT_THROW(coefficients_at(s, 0), std::out_of_range);
  EXPECT_THROW(coefficients_at(s, 11), std::out_of_range);
}

TEST(Schedule, PosteriorVarianceScalarExample) {
  // alpha_t = 0.9, alpha_bar_{t-1} = 0.5 -> alpha_bar_t = 0.45.
  NoiseSchedule s;
  s.T = 2;
  s.betas = {0.5, 0.1};
  s.alphas = {0.5, 0.9};
  s.alpha_bars = {1.0, 0.5, 0.45};
  EXPECT_NEAR(coefficients_at(s, 2).sigma_q2, 0.09090909090909091, 1e-15);

  // A noise-free step contributes no posterior variance.
  s.betas = {0.5, 0.0};
  s.alphas = {0.5, 1.0};
  s.alpha_bars = {1.0, 0.5, 0.5};
  EXPECT_EQ(coefficients_at(s, 2).sigma_q2, 0.0);
}

TEST(Schedule, RespacedVarianceReducesToSingleStep) {
  const auto s = make_cosine_schedule(100);
  for (int t = 2; t <= 100; ++t)
    EXPECT_NEAR(sigma_q2_between(s, t, t - 1), coefficients_at(s, t).sigma_q2, 1e-12);
  EXPECT_EQ(sigma_q2_between(s, 100, 0), 0.0);
}

TEST(Schedule, SamplingTimestepsAreUniformAndBracketed) {
  const auto s = make_cosine_schedule(1000);
  for (int n : {1, 5, 50, 250, 999, 1000}) {
    const auto steps = sampling_timesteps(s, n);
    ASSERT_EQ(steps.size(), static_cast<std::size_t>(n + 1));
    EXPECT_EQ(steps.front(), 1000);
    EXPECT_EQ(steps.back(), 0);
    for (std::size_t i = 1; i < steps.size(); ++i) EXPECT_LT(steps[i], steps[i - 1]);
  }
  EXPECT_EQ(sampling_timesteps(s, 4), (std::vector<int>{1000, 750, 500, 250, 0}));
  EXPECT_THROW(sampling_timesteps(s, 0), std::invalid_argument);
  EXPECT_THROW(sampling_timesteps(s, 1001), std::invalid_argument);
}
