#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "ccdm/data.hpp"
#include "ccdm/denoiser.hpp"
#include "ccdm/embednet.hpp"
#include "ccdm/labelspace.hpp"
#include "ccdm/rng.hpp"
#include "ccdm/schedule.hpp"

namespace ccdm {

enum class VicinityMode { Hard, Soft, None };
std::string to_string(VicinityMode v);
VicinityMode parse_vicinity_mode(const std::string& s);

/// Space in which the regression residual is measured. Native uses the
/// denoiser's own parameterization (x0, eps or v); X0 always converts first.
enum class LossSpace { Native, X0 };
std::string to_string(LossSpace l);
LossSpace parse_loss_space(const std::string& s);

inline constexpr double kSoftWeightFloor = 1e-3;

struct TrainConfig {
  int steps = 3000;
  int batch_size = 64;
  double p_drop = 0.1;
  VicinityMode vicinity = VicinityMode::Hard;
  LossSpace loss_space = LossSpace::Native;
  double lr = 1e-4;
  std::uint64_t seed = 0;
  int retry_limit = 10;
  int checkpoint_every = 0;  // 0 disables intermediate checkpoints
  int log_every = 1;         // trace records every n steps
  std::filesystem::path out_dir;  // empty: nothing written

  /// Throws ConfigError on out-of-range values or a mode the label space cannot support.
  void validate(const LabelSpace& ls) const;
};

struct VicinalBatch {
  torch::Tensor images;                            // [m, C, H, W]
  std::vector<std::optional<double>> target_labels;  // y + delta, or null
  std::vector<double> image_labels;                // normalized label of each chosen image
  std::vector<std::int64_t> image_index;
  std::vector<double> raw_deltas;                  // first delta draw per row, unclamped
  std::vector<bool> fallback;
  torch::Tensor weights;                           // [m] double
  torch::Tensor timesteps;                         // [m] int64 in 1..T
  ConditionEmbedding cond;

  std::int64_t size() const { return static_cast<std::int64_t>(target_labels.size()); }
  double drop_fraction() const;
  int fallback_count() const;
};

/// Label lookup built once per dataset; labels must be normalized.
class VicinitySampler {
 public:
  VicinitySampler(const LabelSpace& ls);
  /// Indices of images whose label lies within `radius` of `target`.
  std::vector<std::int64_t> within(double target, double radius) const;
  /// Indices of images sharing the label nearest to `target`.
  std::vector<std::int64_t> nearest(double target) const;
  const LabelSpace& labelspace() const { return ls_; }

 private:
  const LabelSpace& ls_;
  std::vector<std::pair<double, std::int64_t>> sorted_;
};

/// One minibatch of vicinal training pairs.
VicinalBatch assemble_batch(const Dataset& ds, const LabelSpace& ls, const EmbeddingNets& nets, const TrainConfig& cfg,
                            int T, RandomStream& rng);
VicinalBatch assemble_batch(const Dataset& ds, const VicinitySampler& vs, const EmbeddingNets& nets,
                            const TrainConfig& cfg, int T, RandomStream& rng);

/// Noise realization for a batch: xt and the scaled noise sqrt(H) * eps_std.
struct NoisedBatch {
  torch::Tensor xt;
  torch::Tensor eps;
};
NoisedBatch noise_batch(const VicinalBatch& b, const NoiseSchedule& s, RandomStream& rng);

/// Weighted Mahalanobis residual averaged over rows, given a raw prediction.
/// Throws NumericalFault naming the first non-finite row.
torch::Tensor hvidl_from_prediction(const torch::Tensor& pred, PredictionType type, const VicinalBatch& b,
                                    const NoisedBatch& n, const NoiseSchedule& s, LossSpace space = LossSpace::Native);

/// Draws noise, runs the denoiser and returns the scalar loss.
torch::Tensor hvidl_loss(Denoiser& f, const VicinalBatch& b, const NoiseSchedule& s, RandomStream& rng,
                         LossSpace space = LossSpace::Native);

struct LossRecord {
  int step;
  double loss;
  double drop_fraction;
  int fallback_count;
};

struct TrainResult {
  std::vector<LossRecord> trace;
  int fallback_total = 0;
  int retries = 0;
};

using TrainProgress = std::function<void(const LossRecord&)>;

/// Runs cfg.steps Adam updates. Writes loss.ndjson and checkpoints under
/// cfg.out_dir when it is set. A non-finite loss is retried once with a
/// fresh batch before the NumericalFault propagates.
TrainResult train_loop(Denoiser& f, const Dataset& ds, const LabelSpace& ls, const EmbeddingNets& nets,
                       const NoiseSchedule& s, const TrainConfig& cfg, const TrainProgress& progress = {});

}  // namespace ccdm
