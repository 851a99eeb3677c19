#include "ccdm/schedule.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace ccdm {

NoiseSchedule make_cosine_schedule(int T, double offset, double beta_clip) {
  if (T < 2) throw std::invalid_argument("cosine schedule needs T >= 2, got " + std::to_string(T));
  if (!(offset >= 0.0)) throw std::invalid_argument("cosine schedule offset must be >= 0");
  if (!(beta_clip > 0.0 && beta_clip < 1.0))
    throw std::invalid_argument("beta clip must lie in (0, 1)");

  auto f = [&](int t) {
    const double phase = (static_cast<double>(t) / T + offset) / (1.0 + offset) * std::numbers::pi / 2.0;
    const double c = std::cos(phase);
    return c * c;
  };

  NoiseSchedule s;
  s.T = T;
  s.offset = offset;
  s.beta_clip = beta_clip;
  s.betas.resize(T);
  s.alphas.resize(T);
  s.alpha_bars.resize(T + 1);

  const double f0 = f(0);
  double prev_cos_bar = 1.0;
  s.alpha_bars[0] = 1.0;
  for (int t = 1; t <= T; ++t) {
    const double cos_bar = f(t) / f0;
    const double beta = std::clamp(1.0 - cos_bar / prev_cos_bar, 0.0, beta_clip);
    prev_cos_bar = cos_bar;
    s.betas[t - 1] = beta;
    s.alphas[t - 1] = 1.0 - beta;
    s.alpha_bars[t] = s.alpha_bars[t - 1] * s.alphas[t - 1];
  }
  return s;
}

StepCoefficients coefficients_at(const NoiseSchedule& s, int t) {
  if (t < 1 || t > s.T)
    throw std::out_of_range("time step " + std::to_string(t) + " outside [1, " + std::to_string(s.T) + "]");
  StepCoefficients c;
  c.alpha = s.alpha(t);
  c.alpha_bar = s.alpha_bar(t);
  c.alpha_bar_prev = s.alpha_bar(t - 1);
  c.sigma_q2 = (1.0 - c.alpha) * (1.0 - c.alpha_bar_prev) / (1.0 - c.alpha_bar);
  return c;
}

double sigma_q2_between(const NoiseSchedule& s, int t, int prev) {
  if (t < 1 || t > s.T || prev < 0 || prev >= t)
    throw std::out_of_range("invalid step pair (" + std::to_string(t) + ", " + std::to_string(prev) + ")");
  const double ab_t = s.alpha_bar(t);
  const double ab_prev = s.alpha_bar(prev);
  const double alpha_eff = ab_t / ab_prev;
  return (1.0 - alpha_eff) * (1.0 - ab_prev) / (1.0 - ab_t);
}

std::vector<int> sampling_timesteps(const NoiseSchedule& s, int num_steps) {
  if (num_steps < 1 || num_steps > s.T)
    throw std::invalid_argument("sampling steps must lie in [1, " + std::to_string(s.T) + "], got " +
                                std::to_string(num_steps));
  std::vector<int> steps;
  steps.reserve(num_steps + 1);
  for (int k = num_steps; k >= 1; --k) {
    // round(k * T / T'), computed in integers: spacing >= 1 keeps entries distinct.
    const long long num = 2LL * k * s.T + num_steps;
    steps.push_back(static_cast<int>(num / (2LL * num_steps)));
  }
  steps.push_back(0);
  return steps;
}

}  // namespace ccdm
