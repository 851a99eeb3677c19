#include "ccdm/diffmath.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <stdexcept>

namespace ccdm {

std::string to_string(PredictionType p) {
  switch (p) {
    case PredictionType::X0: return "x0";
    case PredictionType::Eps: return "eps";
    case PredictionType::V: return "v";
  }
  return "?";
}

PredictionType parse_prediction_type(std::string_view s) {
  std::string lower(s);
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
  if (lower == "x0") return PredictionType::X0;
  if (lower == "eps" || lower == "epsilon") return PredictionType::Eps;
  if (lower == "v") return PredictionType::V;
  throw std::invalid_argument("unknown prediction type '" + std::string(s) + "' (expected x0, eps or v)");
}

namespace {

void check_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (a.sizes() != b.sizes())
    throw std::invalid_argument(std::string("shape mismatch in ") + what);
}

void check_step(const NoiseSchedule& s, int t, bool allow_zero = false) {
  if (t > s.T || t < (allow_zero ? 0 : 1))
    throw std::out_of_range("time step " + std::to_string(t) + " outside [" + (allow_zero ? "0" : "1") +
                            ", " + std::to_string(s.T) + "]");
}

// Per-row coefficient g(t) gathered into shape [B, 1, 1, ...] matching `like`.
template <typename Fn>
torch::Tensor per_row(const torch::Tensor& t, const torch::Tensor& like, const NoiseSchedule& s, Fn&& g) {
  auto tc = t.to(torch::kInt64).contiguous();
  if (tc.dim() != 1 || tc.size(0) != like.size(0))
    throw std::invalid_argument("time-step tensor must have shape [batch]");
  const auto* tp = tc.data_ptr<std::int64_t>();
  auto out = torch::empty({tc.size(0)}, torch::kFloat64);
  auto* op = out.data_ptr<double>();
  for (std::int64_t i = 0; i < tc.size(0); ++i) {
    check_step(s, static_cast<int>(tp[i]));
    op[i] = g(static_cast<int>(tp[i]));
  }
  std::vector<std::int64_t> shape(like.dim(), 1);
  shape[0] = tc.size(0);
  return out.view(shape).to(like.dtype());
}

torch::Tensor batch_steps(int t, const torch::Tensor& like) {
  return torch::full({like.size(0)}, t, torch::kInt64);
}

}  // namespace

torch::Tensor forward_sample(const torch::Tensor& x0, const torch::Tensor& t, const torch::Tensor& H_diag,
                             const torch::Tensor& eps_std, const NoiseSchedule& s) {
  check_same_shape(x0, H_diag, "forward_sample (x0 vs H_diag)");
  check_same_shape(x0, eps_std, "forward_sample (x0 vs eps_std)");
  auto a = per_row(t, x0, s, [&](int k) { return std::sqrt(s.alpha_bar(k)); });
  auto b = per_row(t, x0, s, [&](int k) { return std::sqrt(1.0 - s.alpha_bar(k)); });
  return a * x0 + b * (H_diag.sqrt() * eps_std);
}

torch::Tensor forward_sample(const torch::Tensor& x0, int t, const torch::Tensor& H_diag,
                             const torch::Tensor& eps_std, const NoiseSchedule& s) {
  return forward_sample(x0, batch_steps(t, x0), H_diag, eps_std, s);
}

torch::Tensor forward_step(const torch::Tensor& x_prev, int t, const torch::Tensor& H_diag,
                           const torch::Tensor& noise_std, const NoiseSchedule& s) {
  check_step(s, t);
  check_same_shape(x_prev, H_diag, "forward_step");
  check_same_shape(x_prev, noise_std, "forward_step");
  const double beta = s.beta(t);
  return std::sqrt(1.0 - beta) * x_prev + std::sqrt(beta) * (H_diag.sqrt() * noise_std);
}

torch::Tensor posterior_mean(const torch::Tensor& xt, const torch::Tensor& x0, int t, int prev,
                             const NoiseSchedule& s) {
  check_step(s, t);
  if (prev < 0 || prev >= t) throw std::out_of_range("posterior target step must satisfy 0 <= prev < t");
  check_same_shape(xt, x0, "posterior_mean");
  const double ab_t = s.alpha_bar(t);
  const double ab_p = s.alpha_bar(prev);
  const double alpha_eff = ab_t / ab_p;
  const double cx = std::sqrt(alpha_eff) * (1.0 - ab_p) / (1.0 - ab_t);
  const double c0 = std::sqrt(ab_p) * (1.0 - alpha_eff) / (1.0 - ab_t);
  return cx * xt + c0 * x0;
}

torch::Tensor posterior_mean(const torch::Tensor& xt, const torch::Tensor& x0, int t, const NoiseSchedule& s) {
  check_step(s, t);
  // Written directly in terms of alpha_t so the single-step form carries no
  // alpha_bar ratio round-off.
  check_same_shape(xt, x0, "posterior_mean");
  const auto c = coefficients_at(s, t);
  const double cx = std::sqrt(c.alpha) * (1.0 - c.alpha_bar_prev) / (1.0 - c.alpha_bar);
  const double c0 = std::sqrt(c.alpha_bar_prev) * (1.0 - c.alpha) / (1.0 - c.alpha_bar);
  return cx * xt + c0 * x0;
}

GaussianMoments bayes_posterior_oracle(const torch::Tensor& x0, const torch::Tensor& xt, int t,
                                       const torch::Tensor& H_diag, const NoiseSchedule& s) {
  check_step(s, t);
  check_same_shape(x0, xt, "bayes_posterior_oracle");
  check_same_shape(x0, H_diag, "bayes_posterior_oracle");
  auto a = x0.to(torch::kFloat64).contiguous();
  auto b = xt.to(torch::kFloat64).contiguous();
  auto h = H_diag.to(torch::kFloat64).contiguous();
  auto mean = torch::empty_like(a);
  auto var = torch::empty_like(a);
  const double alpha = s.alpha(t);
  const double beta = s.beta(t);
  const double ab_prev = s.alpha_bar(t - 1);
  const double* pa = a.data_ptr<double>();
  const double* pb = b.data_ptr<double>();
  const double* ph = h.data_ptr<double>();
  double* pm = mean.data_ptr<double>();
  double* pv = var.data_ptr<double>();
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    // Prior on x_{t-1} given x0: N(sqrt(abar_{t-1}) x0, (1 - abar_{t-1}) h).
    const double prior_mean = std::sqrt(ab_prev) * pa[i];
    const double prior_var = (1.0 - ab_prev) * ph[i];
    if (prior_var == 0.0) {
      pm[i] = prior_mean;
      pv[i] = 0.0;
      continue;
    }
    // Likelihood of x_t as a function of x_{t-1}:
    // N(x_t; sqrt(alpha) x_{t-1}, beta h)  ~  N(x_{t-1}; x_t / sqrt(alpha), beta h / alpha).
    const double lik_mean = pb[i] / std::sqrt(alpha);
    const double lik_var = beta * ph[i] / alpha;
    const double precision = 1.0 / prior_var + 1.0 / lik_var;
    pv[i] = 1.0 / precision;
    pm[i] = pv[i] * (prior_mean / prior_var + lik_mean / lik_var);
  }
  return {mean, var};
}

torch::Tensor convert_prediction(const torch::Tensor& pred, const torch::Tensor& xt, const torch::Tensor& t,
                                 PredictionType from, PredictionType to, const NoiseSchedule& s) {
  check_same_shape(pred, xt, "convert_prediction");
  if (from == to) return pred;
  auto sa = per_row(t, xt, s, [&](int k) {
    const double ab = s.alpha_bar(k);
    if (ab <= 0.0) throw std::domain_error("alpha_bar is zero; prediction conversion undefined");
    return std::sqrt(ab);
  });
  auto sb = per_row(t, xt, s, [&](int k) { return std::sqrt(1.0 - s.alpha_bar(k)); });

  torch::Tensor x0, eps;
  switch (from) {
    case PredictionType::X0:
      x0 = pred;
      eps = (xt - sa * x0) / sb;
      break;
    case PredictionType::Eps:
      eps = pred;
      x0 = (xt - sb * eps) / sa;
      break;
    case PredictionType::V:
      x0 = sa * xt - sb * pred;
      eps = sb * xt + sa * pred;
      break;
  }
  switch (to) {
    case PredictionType::X0: return x0;
    case PredictionType::Eps: return eps;
    case PredictionType::V: return sa * eps - sb * x0;
  }
  return pred;
}

torch::Tensor convert_prediction(const torch::Tensor& pred, const torch::Tensor& xt, int t,
                                 PredictionType from, PredictionType to, const NoiseSchedule& s) {
  return convert_prediction(pred, xt, batch_steps(t, xt), from, to, s);
}

torch::Tensor cfg_combine(const torch::Tensor& x0_cond, const torch::Tensor& x0_uncond, double gamma) {
  check_same_shape(x0_cond, x0_uncond, "cfg_combine");
  // exact at gamma = 1 and when both branches agree
  return x0_cond + (x0_cond - x0_uncond) * (gamma - 1.0);
}

torch::Tensor ddim_step(const torch::Tensor& xt, const torch::Tensor& x0_tilde, int t, int t_prev,
                        const NoiseSchedule& s) {
  check_step(s, t);
  check_step(s, t_prev, /*allow_zero=*/true);
  if (t_prev >= t) throw std::invalid_argument("ddim_step requires t_prev < t");
  check_same_shape(xt, x0_tilde, "ddim_step");
  const double ab_t = s.alpha_bar(t);
  const double ab_p = s.alpha_bar(t_prev);
  if (ab_t >= 1.0) throw std::domain_error("alpha_bar_t == 1 at t > 0; DDIM residual undefined");
  const double keep = std::sqrt(ab_p);
  const double resid = std::sqrt(1.0 - ab_p) / std::sqrt(1.0 - ab_t);
  return x0_tilde * keep + (xt - x0_tilde * std::sqrt(ab_t)) * resid;
}

torch::Tensor ddpm_step(const torch::Tensor& xt, const torch::Tensor& x0_tilde, int t, int t_prev,
                        const torch::Tensor& H_diag, const torch::Tensor& noise_std, const NoiseSchedule& s) {
  auto mean = (t_prev == t - 1) ? posterior_mean(xt, x0_tilde, t, s) : posterior_mean(xt, x0_tilde, t, t_prev, s);
  if (t_prev == 0) return mean;
  check_same_shape(xt, H_diag, "ddpm_step");
  check_same_shape(xt, noise_std, "ddpm_step");
  const double var = (t_prev == t - 1) ? coefficients_at(s, t).sigma_q2 : sigma_q2_between(s, t, t_prev);
  return mean + std::sqrt(var) * (H_diag.sqrt() * noise_std);
}

}  // namespace ccdm
