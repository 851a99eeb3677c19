#pragma once

#include <vector>

namespace ccdm {

/// Cosine variance schedule and the coefficients every diffusion step needs.
///
/// Arrays are indexed by time step: `betas[t-1]`/`alphas[t-1]` for t in 1..T,
/// and `alpha_bars[t]` for t in 0..T with `alpha_bars[0] == 1`.
/// All coefficients are kept in double precision; the tail of alpha_bar is
/// far below single-precision resolution.
struct NoiseSchedule {
  int T = 0;
  double offset = 0.008;
  double beta_clip = 0.999;
  std::vector<double> betas;
  std::vector<double> alphas;
  std::vector<double> alpha_bars;

  double beta(int t) const { return betas.at(t - 1); }
  double alpha(int t) const { return alphas.at(t - 1); }
  double alpha_bar(int t) const { return alpha_bars.at(t); }
};

/// Per-step coefficients of the ground-truth denoising transition.
struct StepCoefficients {
  double alpha;
  double alpha_bar;
  double alpha_bar_prev;
  /// Posterior variance scale: (1-alpha)(1-alpha_bar_prev)/(1-alpha_bar).
  double sigma_q2;
};

/// Builds the cosine schedule f(t) = cos^2(((t/T + s)/(1 + s)) * pi/2).
/// Betas are clipped to [0, beta_clip] and alpha_bar is re-accumulated from
/// the clipped alphas so that alpha_t * alpha_bar_{t-1} == alpha_bar_t.
/// Throws std::invalid_argument for T < 2.
NoiseSchedule make_cosine_schedule(int T, double offset = 0.008, double beta_clip = 0.999);

/// Throws std::out_of_range unless 1 <= t <= T.
StepCoefficients coefficients_at(const NoiseSchedule& s, int t);

/// Posterior variance scale for a jump from step t down to an earlier step
/// `prev` (prev < t). Reduces to coefficients_at(t).sigma_q2 when prev == t-1.
double sigma_q2_between(const NoiseSchedule& s, int t, int prev);

/// Uniformly spaced DDIM/respaced sampling steps over [1, T], descending,
/// always starting at T and terminated with 0. Size is num_steps + 1.
std::vector<int> sampling_timesteps(const NoiseSchedule& s, int num_steps);

}  // namespace ccdm
