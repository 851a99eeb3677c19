#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "ccdm/data.hpp"

namespace ccdm {

inline constexpr std::int64_t kShortEmbedDim = 128;
inline constexpr double kDefaultClampB = 20.0;
inline constexpr double kZetaStd = 0.2;  // variance 0.04

/// How the scalar label reaches the denoiser. Learned is the regressor-paired
/// MLP; the other two are fixed encodings kept for ablations.
enum class LabelEncoding { Learned, Sinusoidal, GaussianFourier };
std::string to_string(LabelEncoding e);
LabelEncoding parse_label_encoding(const std::string& s);

/// LabelDependent uses H_y = diag(exp(-h_long)); Identity pins H_y = I.
enum class CovarianceMode { LabelDependent, Identity };
std::string to_string(CovarianceMode c);
CovarianceMode parse_covariance_mode(const std::string& s);

/// Image -> label regressor split into a feature extractor (T1, ends in a
/// ReLU'd layer of width feature_dim) and a linear head (T2).
struct AuxRegressorImpl : torch::nn::Module {
  AuxRegressorImpl(ImageShape shape, std::int64_t feature_dim, std::int64_t width = 32);

  torch::Tensor features(const torch::Tensor& x);
  torch::Tensor head(const torch::Tensor& h);
  torch::Tensor forward(const torch::Tensor& x) { return head(features(x)); }
  /// Label estimate clamped to [0, 1], shape [B].
  torch::Tensor predict(const torch::Tensor& x);

  ImageShape shape;
  std::int64_t feature_dim;
  std::int64_t width;
  torch::nn::Sequential convs{nullptr};
  torch::nn::Sequential dense{nullptr};
  torch::nn::Linear out{nullptr};
};
TORCH_MODULE(AuxRegressor);

/// Five linear layers; the first four followed by GroupNorm + ReLU. A final
/// ReLU keeps outputs in the (non-negative) feature space of the regressor.
struct PhiMlpImpl : torch::nn::Module {
  PhiMlpImpl(std::int64_t out_dim, std::int64_t hidden = 128, std::int64_t groups = 8);
  /// y: [B] or [B, 1] -> [B, out_dim].
  torch::Tensor forward(const torch::Tensor& y);

  std::int64_t out_dim;
  std::int64_t hidden;
  torch::nn::Sequential net{nullptr};
};
TORCH_MODULE(PhiMlp);

struct AuxTrainOptions {
  int epochs = 10;
  int batch_size = 64;
  int min_steps_per_epoch = 50;
  double lr = 1e-3;
  std::int64_t width = 32;
  std::uint64_t seed = 0;
};

struct AuxTrainResult {
  AuxRegressor net{nullptr};
  double final_loss = 0.0;  // mean squared error over the training set, after training
};

/// Fits T2(T1(x)) to normalized labels by minibatch MSE, then freezes the net.
AuxTrainResult train_aux_cnn(const torch::Tensor& images, const std::vector<double>& labels, std::int64_t feature_dim,
                             const AuxTrainOptions& opts = {});

struct PhiTrainOptions {
  int steps = 2000;
  int batch_size = 128;
  double lr = 1e-3;
  std::int64_t hidden = 128;
  int validation_draws = 64;  // zeta draws per label for the objective estimate
  std::uint64_t seed = 0;
};

struct PhiTrainResult {
  PhiMlp net{nullptr};
  double initial_objective = 0.0;
  double final_objective = 0.0;
};

/// Monte-Carlo estimate of mean_i mean_m (t2(t3(y_i + z_im)) - (y_i + z_im))^2
/// for the noise matrix z of shape [N_distinct, M].
double ili_objective(const std::function<torch::Tensor(const torch::Tensor&)>& t3,
                     const std::function<torch::Tensor(const torch::Tensor&)>& t2, const std::vector<double>& distinct,
                     const torch::Tensor& zeta);

/// Trains a label -> feature map against a frozen regressor head.
PhiTrainResult train_phi(const AuxRegressor& aux, const std::vector<double>& distinct, const PhiTrainOptions& opts = {});

/// The covariance map: output width equals the flattened image size.
PhiTrainResult train_phi_long(const AuxRegressor& aux, const std::vector<double>& distinct,
                              const PhiTrainOptions& opts = {});

struct ShortEmbeddingResult {
  AuxRegressor aux{nullptr};
  PhiMlp phi{nullptr};
  double aux_loss = 0.0;
  double phi_objective = 0.0;
};

/// Same regressor-paired scheme with a 128-wide feature layer.
ShortEmbeddingResult train_phi_short(const torch::Tensor& images, const std::vector<double>& labels,
                                     const AuxTrainOptions& aux_opts = {}, const PhiTrainOptions& phi_opts = {});

struct ConditionEmbedding {
  torch::Tensor h_short;    // [B, 128]; zero rows where null
  torch::Tensor h_long;     // [B, D]
  torch::Tensor H_diag;     // [B, D]
  torch::Tensor null_mask;  // [B] bool

  std::int64_t batch() const { return h_short.size(0); }
  /// H_diag reshaped to [B, C, H, W].
  torch::Tensor H_image(const ImageShape& s) const;
  ConditionEmbedding index(const torch::Tensor& rows) const;
  static ConditionEmbedding cat(const ConditionEmbedding& a, const ConditionEmbedding& b);
};

/// Builds a ConditionEmbedding directly from a long embedding (testing and tooling).
ConditionEmbedding embedding_from_long(const torch::Tensor& h_short, const torch::Tensor& h_long,
                                       const torch::Tensor& null_mask, double clamp_B = kDefaultClampB);

struct EmbeddingNets {
  ImageShape shape;
  LabelEncoding encoding = LabelEncoding::Learned;
  CovarianceMode covariance = CovarianceMode::LabelDependent;
  double clamp_B = kDefaultClampB;
  std::uint64_t seed = 0;

  AuxRegressor aux_long{nullptr};
  PhiMlp phi_long{nullptr};
  AuxRegressor aux_short{nullptr};
  PhiMlp phi_short{nullptr};
  torch::Tensor fourier_weights;  // [64], GaussianFourier only

  std::int64_t long_dim() const { return shape.numel(); }

  /// y: [B] normalized labels (ignored where null_mask is set).
  ConditionEmbedding embed(const torch::Tensor& y, const torch::Tensor& null_mask) const;
  ConditionEmbedding embed(const std::vector<std::optional<double>>& ys) const;
  ConditionEmbedding embed(std::optional<double> y) const;
  torch::Tensor short_embedding(const torch::Tensor& y) const;

  void save(const std::filesystem::path& dir) const;
  static EmbeddingNets load(const std::filesystem::path& dir);
};

struct EmbeddingTrainOptions {
  LabelEncoding encoding = LabelEncoding::Learned;
  CovarianceMode covariance = CovarianceMode::LabelDependent;
  AuxTrainOptions aux;
  PhiTrainOptions phi;
  double clamp_B = kDefaultClampB;
  std::uint64_t seed = 0;
};

/// Trains every net the chosen encoding and covariance mode need.
/// `labels` are normalized, `distinct` their sorted unique values.
EmbeddingNets train_embeddings(const torch::Tensor& images, const std::vector<double>& labels,
                               const std::vector<double>& distinct, const EmbeddingTrainOptions& opts);

/// Fixed encodings used by the ablation modes, [B] -> [B, 128].
torch::Tensor sinusoidal_label_encoding(const torch::Tensor& y);
torch::Tensor gaussian_fourier_encoding(const torch::Tensor& y, const torch::Tensor& weights);

}  // namespace ccdm
