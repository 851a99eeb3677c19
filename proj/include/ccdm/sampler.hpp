#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "ccdm/denoiser.hpp"
#include "ccdm/embednet.hpp"
#include "ccdm/labelspace.hpp"
#include "ccdm/rng.hpp"
#include "ccdm/schedule.hpp"

namespace ccdm {

enum class SamplerKind { DDIM, DDPM };
std::string to_string(SamplerKind k);
SamplerKind parse_sampler_kind(const std::string& s);

struct SampleRequest {
  std::vector<double> y_targets;  // normalized labels
  int n_per_label = 1;
  int T_prime = 250;
  double gamma = 1.5;
  std::uint64_t seed = 0;
  SamplerKind sampler = SamplerKind::DDIM;
  int batch_size = 100;  // rows per forward pass, never mixing labels

  /// Throws ConfigError for out-of-range values.
  void validate(int T) const;
};

/// Raw prediction of some denoiser for a batch sharing one condition.
using Predictor = std::function<torch::Tensor(const torch::Tensor& xt, const torch::Tensor& t,
                                              const ConditionEmbedding& cond)>;

struct PredictorView {
  Predictor fn;
  PredictionType pred_type = PredictionType::X0;
  bool has_null_branch = true;
};

/// Wraps a denoiser in inference mode. The null branch counts as missing when
/// the model is known to have been trained with p_drop = 0.
PredictorView view_of(Denoiser& f);

struct SampleResult {
  torch::Tensor images;                 // [L * n, C, H, W] in [-1, 1]
  std::vector<double> labels;           // normalized label per image
  std::vector<std::int64_t> label_index;
  std::vector<std::int64_t> image_index;
};

/// The initial state sqrt(H) * z for one target, z drawn from `rng`.
torch::Tensor initial_noise(const torch::Tensor& H_row, RandomStream& rng);

/// Philox stream owned by one generated image. Keyed by the label's value so
/// that reordering or subsetting targets reproduces the same images.
RandomStream sample_stream(std::uint64_t seed, double y, std::int64_t image_index);

/// Multi-step guided generation (DDIM or ancestral DDPM per req.sampler).
SampleResult sample(const PredictorView& f, const EmbeddingNets& nets, const NoiseSchedule& s,
                    const SampleRequest& req);
SampleResult sample(Denoiser& f, const EmbeddingNets& nets, const NoiseSchedule& s, const SampleRequest& req);

/// Ancestral sampling; identical to sample() with req.sampler = DDPM.
SampleResult sample_ddpm(const PredictorView& f, const EmbeddingNets& nets, const NoiseSchedule& s,
                         SampleRequest req);

/// Writes {label}_{index}.png per image and a labels.csv manifest (filename,label) with
/// denormalized labels.
void write_samples(const SampleResult& r, const LabelSpace& ls, const std::filesystem::path& dir);

/// File stem used for an image: shortest round-trip label then the index.
std::string sample_filename(double raw_label, std::int64_t index);

}  // namespace ccdm
