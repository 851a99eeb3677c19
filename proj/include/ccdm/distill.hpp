#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "ccdm/denoiser.hpp"
#include "ccdm/embednet.hpp"
#include "ccdm/labelspace.hpp"
#include "ccdm/rng.hpp"
#include "ccdm/schedule.hpp"
#include "ccdm/train.hpp"

namespace ccdm {

inline constexpr std::int64_t kGeneratorZDim = 128;

// ---------------------------------------------------------------------------
// Differentiable augmentation

struct AugmentPolicy {
  bool color = false;
  bool translation = false;
  bool cutout = false;

  bool empty() const { return !color && !translation && !cutout; }
  std::string str() const;
};

/// Comma separated subset of {color, translation, cutout}; "" or "none" is empty.
AugmentPolicy parse_augment_policy(const std::string& s);

/// Per-image transform parameters, drawn once and shared by paired calls.
struct AugmentParams {
  std::vector<double> brightness, saturation, contrast;  // uniform [0, 1) draws
  std::vector<int> shift_y, shift_x;                     // in [-s, s]
  std::vector<int> cut_y, cut_x;                         // cutout centers
  int cut_h = 0, cut_w = 0;
};

AugmentParams draw_augment_params(const AugmentPolicy& p, std::int64_t batch, std::int64_t height, std::int64_t width,
                                  RandomStream& rng);
torch::Tensor diffaugment(const torch::Tensor& x, const AugmentPolicy& p, const AugmentParams& params);
torch::Tensor diffaugment(const torch::Tensor& x, const AugmentPolicy& p, RandomStream& rng);

// ---------------------------------------------------------------------------
// Networks

/// Spectrally normalized weight W / sigma(W) with one power iteration; `u`
/// is refreshed in place when `update` is set.
torch::Tensor spectral_normalize(const torch::Tensor& w, torch::Tensor& u, bool update);

struct SNConv2dImpl : torch::nn::Module {
  SNConv2dImpl(std::int64_t in, std::int64_t out, std::int64_t k, std::int64_t stride = 1, std::int64_t pad = 0);
  torch::Tensor forward(const torch::Tensor& x);
  torch::Tensor weight, bias, u;
  std::int64_t stride, pad;
};
TORCH_MODULE(SNConv2d);

struct SNLinearImpl : torch::nn::Module {
  SNLinearImpl(std::int64_t in, std::int64_t out, bool with_bias = true);
  torch::Tensor forward(const torch::Tensor& x);
  torch::Tensor weight, bias, u;
};
TORCH_MODULE(SNLinear);

/// BatchNorm whose scale and shift are linear functions of the label embedding.
struct CondBatchNormImpl : torch::nn::Module {
  CondBatchNormImpl(std::int64_t ch, std::int64_t cond_dim);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& h);
  torch::nn::BatchNorm2d bn{nullptr};
  torch::nn::Linear gain{nullptr}, shift{nullptr};
};
TORCH_MODULE(CondBatchNorm);

struct GenBlockImpl : torch::nn::Module {
  GenBlockImpl(std::int64_t in, std::int64_t out, std::int64_t cond_dim);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& h);
  CondBatchNorm bn1{nullptr}, bn2{nullptr};
  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr}, skip{nullptr};
};
TORCH_MODULE(GenBlock);

/// (z, h_short) -> image in [-1, 1]; three residual up-sampling blocks.
struct GeneratorImpl : torch::nn::Module {
  GeneratorImpl(ImageShape shape, std::int64_t channels = 64, std::int64_t cond_dim = kShortEmbedDim);
  torch::Tensor forward(const torch::Tensor& z, const torch::Tensor& h_short);

  ImageShape shape;
  std::int64_t channels;
  torch::nn::Linear fc{nullptr};
  torch::nn::ModuleList blocks{nullptr};
  torch::nn::BatchNorm2d bn_out{nullptr};
  torch::nn::Conv2d conv_out{nullptr};
};
TORCH_MODULE(Generator);

struct DiscBlockImpl : torch::nn::Module {
  DiscBlockImpl(std::int64_t in, std::int64_t out, bool down, bool first);
  torch::Tensor forward(const torch::Tensor& x);
  SNConv2d conv1{nullptr}, conv2{nullptr}, skip{nullptr};
  bool down, first;
};
TORCH_MODULE(DiscBlock);

/// Spectral-norm residual discriminator with a label projection head.
struct DiscriminatorImpl : torch::nn::Module {
  DiscriminatorImpl(ImageShape shape, std::int64_t channels = 64, std::int64_t cond_dim = kShortEmbedDim);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& h_short);

  torch::nn::ModuleList blocks{nullptr};
  SNLinear out{nullptr}, embed{nullptr};
};
TORCH_MODULE(Discriminator);

// ---------------------------------------------------------------------------

struct DistillConfig {
  int steps = 1000;
  int batch_size = 64;
  double lr_g = 1e-4;
  double lr_d = 1e-4;
  double lr_fake = 1e-4;
  double w_D = 10.0;
  double w_G = 1.0;
  int d_updates = 2;  // critic updates per generator update
  std::string policy = "color,translation,cutout";
  double real_guidance = 1.5;  // CFG scale applied to the frozen score
  double t_min_frac = 0.02;
  double t_max_frac = 0.98;
  std::int64_t g_channels = 64;
  std::int64_t d_channels = 64;
  int m_kappa = 0;
  std::uint64_t seed = 0;
  int monitor_every = 1000;
  std::filesystem::path out_dir;

  void validate() const;
};

/// Everything distillation mutates, plus a borrowed frozen teacher.
class DistillState {
 public:
  DistillState(Denoiser& real_score, const EmbeddingNets& nets, const DistillConfig& cfg);

  Generator G{nullptr};
  Discriminator D{nullptr};
  std::unique_ptr<Denoiser> fake_score;
  Denoiser* real_score;
  const EmbeddingNets* nets;
  DistillConfig cfg;
  AugmentPolicy policy;
  std::unique_ptr<torch::optim::Adam> opt_g, opt_d, opt_fake;
};

/// Gradient signal of the distribution-matching term for generator output x:
/// (p_real - p_fake) / mean|p_real| with p = x - x0_hat at a noised copy of x.
torch::Tensor dm_gradient(DistillState& st, const torch::Tensor& x, const ConditionEmbedding& cond,
                          const torch::Tensor& t, const torch::Tensor& eps_std, const NoiseSchedule& s);

struct GeneratorLoss {
  double total, dm, gan;
};
struct CriticLoss {
  double fake_score, discriminator;
};

/// One update of G. `targets` provides labels, embeddings and row weights.
GeneratorLoss generator_step(DistillState& st, const VicinalBatch& targets, const NoiseSchedule& s, RandomStream& rng);

/// One update of the fake score and the discriminator.
CriticLoss critic_step(DistillState& st, const VicinalBatch& real, const NoiseSchedule& s, RandomStream& rng);

/// Weighted hinge terms, exposed for tests: mean_i w_i [relu(1 - d_real) + relu(1 + d_fake)].
torch::Tensor hinge_d_loss(const torch::Tensor& d_real, const torch::Tensor& d_fake, const torch::Tensor& w);
torch::Tensor hinge_g_loss(const torch::Tensor& d_fake, const torch::Tensor& w);

struct DistillRecord {
  int step;
  GeneratorLoss g;
  CriticLoss c;
};
using DistillMonitor = std::function<void(int step, DistillState& st)>;

/// Alternates d_updates critic steps with one generator step.
std::vector<DistillRecord> distill_loop(DistillState& st, const Dataset& ds, const LabelSpace& ls,
                                        const NoiseSchedule& s, const DistillMonitor& monitor = {});

/// One-step generation: G(z, phi(y)) with z keyed per (label, image index).
torch::Tensor generate(Generator& G, const EmbeddingNets& nets, const std::vector<double>& y_targets, int n_per_label,
                       std::uint64_t seed, int batch_size = 500);

void save_generator(const Generator& G, const DistillConfig& cfg, const std::filesystem::path& path);
Generator load_generator(const std::filesystem::path& path);

}  // namespace ccdm
