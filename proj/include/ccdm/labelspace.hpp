#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

namespace ccdm {

/// Normalized regression labels plus the vicinity hyperparameters derived
/// from them.
struct LabelSpace {
  double raw_min = 0.0;
  double raw_max = 1.0;
  std::vector<double> labels;    ///< normalized, dataset order
  std::vector<double> distinct;  ///< strictly increasing
  double sigma_delta = 0.0;
  double kappa_base = 0.0;
  int m_kappa = 1;
  double kappa = 0.0;
  double nu = 0.0;  ///< 0 when kappa == 0 (soft vicinity undefined)

  double normalize(double raw) const { return (raw - raw_min) / (raw_max - raw_min); }
  double denormalize(double y) const { return raw_min + y * (raw_max - raw_min); }
  double raw_range() const { return raw_max - raw_min; }

  nlohmann::json to_json() const;
  /// Restores metadata only (labels/distinct are not persisted).
  static LabelSpace from_json(const nlohmann::json& j);
};

/// Min-max normalizes raw labels to [0, 1] and fills `labels`/`distinct`.
/// Throws std::invalid_argument for fewer than 2 labels or a constant array.
LabelSpace normalize_labels(std::span<const double> raw_labels);

/// Same, but with explicit bounds (e.g. the nominal range of a dataset).
LabelSpace normalize_labels(std::span<const double> raw_labels, double raw_min, double raw_max);

/// Sorted distinct values under exact equality.
std::vector<double> distinct_sorted(std::span<const double> labels);

/// Rule-of-thumb KDE bandwidth (4 s^5 / 3N)^(1/5), s the sample standard
/// deviation (N-1 divisor). Throws std::invalid_argument if N < 2 or s == 0.
double kde_bandwidth(std::span<const double> labels);

struct VicinityParams {
  double kappa_base;
  double kappa;
  double nu;
};

/// kappa_base = largest gap between consecutive distinct labels,
/// kappa = m_kappa * kappa_base, nu = 1/kappa^2 (0 when kappa == 0).
/// Throws std::invalid_argument for fewer than 2 distinct labels or m_kappa < 0.
VicinityParams vicinity_params(std::span<const double> distinct, int m_kappa);

/// Normalizes, then fills sigma_delta and the vicinity parameters.
LabelSpace build_labelspace(std::span<const double> raw_labels, int m_kappa);
LabelSpace build_labelspace(std::span<const double> raw_labels, int m_kappa, double raw_min,
                            double raw_max);

/// Hard vicinal weight: 1 iff |target - label| <= kappa.
inline double hard_weight(double target, double label, double kappa) {
  const double d = target - label;
  return (d <= kappa && -d <= kappa) ? 1.0 : 0.0;
}

/// Soft vicinal weight exp(-nu (target - label)^2).
double soft_weight(double target, double label, double nu);

}  // namespace ccdm
