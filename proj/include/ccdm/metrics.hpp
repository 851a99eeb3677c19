#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "ccdm/data.hpp"
#include "ccdm/embednet.hpp"
#include "ccdm/labelspace.hpp"

namespace ccdm {

/// Frechet distance between Gaussian fits of two feature sets (rows = samples).
/// Throws std::invalid_argument with fewer than 2 rows or mismatched widths.
double fid(const torch::Tensor& features_a, const torch::Tensor& features_b);

/// Same distance from explicit moments.
double frechet_distance(const torch::Tensor& mu_a, const torch::Tensor& cov_a, const torch::Tensor& mu_b,
                        const torch::Tensor& cov_b);

/// Entropy (natural log) of the empirical distribution given by `counts`.
double entropy_of_counts(const std::vector<std::int64_t>& counts);

/// Image -> class logits; same convolutional trunk as the label regressor.
struct ClassifierImpl : torch::nn::Module {
  ClassifierImpl(ImageShape shape, std::int64_t num_classes, std::int64_t width = 32);
  torch::Tensor forward(const torch::Tensor& x);
  torch::Tensor predict(const torch::Tensor& x);  // argmax class, int64 [B]

  ImageShape shape;
  std::int64_t num_classes, width;
  torch::nn::Sequential convs{nullptr};
  torch::nn::Sequential head{nullptr};
};
TORCH_MODULE(Classifier);

struct OracleOptions {
  int epochs = 30;
  int batch_size = 64;
  int min_steps_per_epoch = 50;
  double lr = 1e-3;
  std::int64_t feature_dim = 128;
  std::int64_t width = 32;
  std::uint64_t seed = 0;
};

/// Evaluation networks, trained on real data only.
struct Oracles {
  AuxRegressor regressor{nullptr};   // label in [0, 1]; penultimate layer = features
  Classifier classifier{nullptr};    // absent without class tags
  double regressor_train_mae = 0.0;  // normalized units
  double classifier_train_acc = 0.0;

  torch::Tensor features(const torch::Tensor& images) const;
  torch::Tensor predict_labels(const torch::Tensor& images) const;
  torch::Tensor predict_classes(const torch::Tensor& images) const;

  void save(const std::filesystem::path& dir) const;
  static Oracles load(const std::filesystem::path& dir);
};

Oracles train_oracles(const Dataset& ds, const LabelSpace& ls, const OracleOptions& opts = {});

struct ScoreStats {
  double mean = 0.0;
  double std = 0.0;
};

/// MAE between denormalized predicted and assigned labels, std across images.
ScoreStats label_score_from(const std::vector<double>& predicted, const std::vector<double>& assigned,
                            const LabelSpace& ls);
ScoreStats label_score(const Oracles& o, const torch::Tensor& images, const std::vector<double>& assigned,
                       const LabelSpace& ls);

struct DiversityResult {
  ScoreStats stats;
  std::vector<std::optional<double>> per_group;  // nullopt where a group was empty
  int skipped = 0;
};

/// Entropy of predicted classes per group, averaged over non-empty groups.
DiversityResult diversity_from_predictions(const std::vector<std::int64_t>& classes,
                                           const std::vector<std::int64_t>& group, std::int64_t num_groups,
                                           std::int64_t num_classes);

struct EvalProtocol {
  std::vector<double> centers;  // normalized, strictly increasing
  int n_per_center = 20;
  double r_sfid = 0.0;          // normalized units

  void validate() const;
  /// Evenly spaced centers over [lo, hi] (normalized).
  static std::vector<double> even_centers(int count, double lo = 0.0, double hi = 1.0);
};

struct SfidResult {
  std::vector<std::optional<double>> per_center;
  ScoreStats stats;
  int skipped = 0;
};

/// Windowed FID on precomputed features; labels normalized.
SfidResult sfid_from_features(const EvalProtocol& p, const torch::Tensor& real_feat, const std::vector<double>& real_labels,
                              const torch::Tensor& fake_feat, const std::vector<double>& fake_labels);
SfidResult sfid(const EvalProtocol& p, const Oracles& o, const torch::Tensor& real_images,
                const std::vector<double>& real_labels, const torch::Tensor& fake_images,
                const std::vector<double>& fake_labels);

struct CenterReport {
  double center = 0.0;      // normalized
  double center_raw = 0.0;
  std::optional<double> fid;
  std::optional<double> label_score;
  std::optional<double> diversity;
  std::int64_t n_real = 0;
  std::int64_t n_fake = 0;
};

struct EvalReport {
  std::vector<CenterReport> centers;
  ScoreStats sfid;
  ScoreStats label_score;  // raw units
  std::optional<ScoreStats> diversity;
  int skipped_sfid = 0;
  int skipped_diversity = 0;
  double r_sfid = 0.0;
  nlohmann::json meta = nlohmann::json::object();

  nlohmann::json to_json() const;
  static EvalReport from_json(const nlohmann::json& j);
  void write(const std::filesystem::path& json_path, const std::filesystem::path& csv_path = {}) const;
};

/// Checks the required keys and types of a serialized report; returns problems found.
std::vector<std::string> validate_report_json(const nlohmann::json& j);

/// Full protocol: SFID over windows, label score and diversity per center.
/// Fake images carry their assigned (normalized) labels.
EvalReport evaluate(const EvalProtocol& p, const Oracles& o, const LabelSpace& ls, const torch::Tensor& real_images,
                    const std::vector<double>& real_labels, const torch::Tensor& fake_images,
                    const std::vector<double>& fake_labels);

}  // namespace ccdm
