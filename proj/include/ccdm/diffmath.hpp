#pragma once

#include <string>
#include <string_view>

#include <torch/torch.h>

#include "ccdm/schedule.hpp"

namespace ccdm {

/// What the denoiser's raw output represents.
enum class PredictionType { X0, Eps, V };

std::string to_string(PredictionType p);
/// Accepts "x0", "eps", "v" (case-insensitive). Throws std::invalid_argument.
PredictionType parse_prediction_type(std::string_view s);

// All functions below are pure and batched over the leading dimension.
// Time steps are either a single int (shared by the batch) or an int64
// tensor of shape [B]. Coefficients are evaluated in double precision and
// cast to the dtype of the image tensors. H_diag has the image's shape.

/// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) * sqrt(H) * eps_std.
torch::Tensor forward_sample(const torch::Tensor& x0, const torch::Tensor& t, const torch::Tensor& H_diag,
                             const torch::Tensor& eps_std, const NoiseSchedule& s);
torch::Tensor forward_sample(const torch::Tensor& x0, int t, const torch::Tensor& H_diag,
                             const torch::Tensor& eps_std, const NoiseSchedule& s);

/// One forward transition x_{t-1} -> x_t with variance beta_t * H.
torch::Tensor forward_step(const torch::Tensor& x_prev, int t, const torch::Tensor& H_diag,
                           const torch::Tensor& noise_std, const NoiseSchedule& s);

/// Mean of q(x_{t-1} | x_t, x0, y). Independent of H.
torch::Tensor posterior_mean(const torch::Tensor& xt, const torch::Tensor& x0, int t, const NoiseSchedule& s);
/// Mean of the respaced posterior q(x_prev | x_t, x0) for prev < t.
torch::Tensor posterior_mean(const torch::Tensor& xt, const torch::Tensor& x0, int t, int prev,
                             const NoiseSchedule& s);

struct GaussianMoments {
  torch::Tensor mean;
  torch::Tensor var;
};

/// Reference posterior computed coordinate-by-coordinate as the normalized
/// product of the one-step transition likelihood and the t-1 marginal.
/// Returns double tensors. Intended as an independent check of the closed form.
GaussianMoments bayes_posterior_oracle(const torch::Tensor& x0, const torch::Tensor& xt, int t,
                                       const torch::Tensor& H_diag, const NoiseSchedule& s);

/// Re-expresses a prediction between x0 / eps / v parameterizations.
torch::Tensor convert_prediction(const torch::Tensor& pred, const torch::Tensor& xt, const torch::Tensor& t,
                                 PredictionType from, PredictionType to, const NoiseSchedule& s);
torch::Tensor convert_prediction(const torch::Tensor& pred, const torch::Tensor& xt, int t,
                                 PredictionType from, PredictionType to, const NoiseSchedule& s);

/// Classifier-free guidance in x0 space: (1 - gamma) * uncond + gamma * cond.
torch::Tensor cfg_combine(const torch::Tensor& x0_cond, const torch::Tensor& x0_uncond, double gamma);

/// Deterministic DDIM update from step t to t_prev (t > t_prev >= 0).
torch::Tensor ddim_step(const torch::Tensor& xt, const torch::Tensor& x0_tilde, int t, int t_prev,
                        const NoiseSchedule& s);

/// Ancestral update: posterior mean plus sqrt(sigma_q2 * H) * noise_std;
/// no noise is added when t_prev == 0.
torch::Tensor ddpm_step(const torch::Tensor& xt, const torch::Tensor& x0_tilde, int t, int t_prev,
                        const torch::Tensor& H_diag, const torch::Tensor& noise_std, const NoiseSchedule& s);

}  // namespace ccdm
