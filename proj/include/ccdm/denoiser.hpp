#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "ccdm/data.hpp"
#include "ccdm/diffmath.hpp"
#include "ccdm/embednet.hpp"

namespace ccdm {

struct DenoiserConfig {
  ImageShape shape{1, 32, 32};
  std::int64_t base_channels = 64;
  std::vector<std::int64_t> channel_mults{1, 2, 4};
  std::int64_t res_blocks = 2;
  std::int64_t groups = 8;
  std::int64_t label_embed_dim = kShortEmbedDim;
  std::int64_t label_layers = 2;
  PredictionType pred_type = PredictionType::X0;

  std::int64_t time_embed_dim() const { return 4 * base_channels; }
  /// Throws ConfigError for shapes the encoder cannot halve cleanly.
  void validate() const;
  nlohmann::json to_json() const;
  static DenoiserConfig from_json(const nlohmann::json& j);
};

/// Sinusoidal features of integer time steps, [B] -> [B, dim].
torch::Tensor timestep_embedding(const torch::Tensor& t, std::int64_t dim);

struct ResBlockImpl : torch::nn::Module {
  ResBlockImpl(std::int64_t in, std::int64_t out, std::int64_t emb_dim, std::int64_t groups);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& emb);

  torch::nn::GroupNorm norm1{nullptr}, norm2{nullptr};
  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr}, skip{nullptr};
  torch::nn::Linear emb_proj{nullptr};
};
TORCH_MODULE(ResBlock);

/// Encoder-decoder with skip connections. The time embedding and the label
/// block output are summed and injected into every residual block.
struct UNetImpl : torch::nn::Module {
  explicit UNetImpl(const DenoiserConfig& cfg);

  /// xt [B,C,H,W], t [B] int64, h_short [B,label_dim], null_mask [B] bool.
  torch::Tensor forward(const torch::Tensor& xt, const torch::Tensor& t, const torch::Tensor& h_short,
                        const torch::Tensor& null_mask);

  DenoiserConfig cfg;
  bool zero_skips = false;  // test hook: multiplies every skip tensor by zero

  torch::Tensor null_embedding;  // learned, starts at zero
  torch::nn::Sequential time_mlp{nullptr};
  torch::nn::Sequential label_block{nullptr};
  torch::nn::Conv2d conv_in{nullptr};
  torch::nn::ModuleList down{nullptr};
  torch::nn::ModuleList mid{nullptr};
  torch::nn::ModuleList up{nullptr};
  torch::nn::GroupNorm norm_out{nullptr};
  torch::nn::Conv2d conv_out{nullptr};

 private:
  // Layout of `down`/`up`: entries are ResBlocks or resampling convs, in order.
  std::vector<bool> down_is_res_, up_is_res_;
};
TORCH_MODULE(UNet);

/// Trainable predictor plus the metadata needed to interpret its output.
class Denoiser {
 public:
  Denoiser(const DenoiserConfig& cfg, int T, std::uint64_t init_seed = 0);

  /// Raw output in cfg.pred_type space. t in 1..T, one per row.
  torch::Tensor predict(const torch::Tensor& xt, const torch::Tensor& t, const ConditionEmbedding& cond);
  torch::Tensor predict(const torch::Tensor& xt, const torch::Tensor& t, const torch::Tensor& h_short,
                        const torch::Tensor& null_mask);
  /// Output converted to the x0 parameterization.
  torch::Tensor predict_x0(const torch::Tensor& xt, const torch::Tensor& t, const ConditionEmbedding& cond,
                           const NoiseSchedule& s);

  UNet& net() { return net_; }
  const UNet& net() const { return net_; }
  const DenoiserConfig& config() const { return cfg_; }
  PredictionType pred_type() const { return cfg_.pred_type; }
  int T() const { return T_; }
  /// Condition-drop probability the weights were trained with, if known.
  std::optional<double> trained_p_drop() const { return trained_p_drop_; }
  void set_trained_p_drop(double p) { trained_p_drop_ = p; }

  void save(const std::filesystem::path& path, const nlohmann::json& extra_meta) const;
  static Denoiser load(const std::filesystem::path& path);

 private:
  DenoiserConfig cfg_;
  int T_;
  std::optional<double> trained_p_drop_;
  UNet net_{nullptr};
};

Denoiser build_unet(const ImageShape& shape, std::int64_t base_channels, const std::vector<std::int64_t>& mults,
                    PredictionType pred_type, int T = 1000, std::uint64_t init_seed = 0);

}  // namespace ccdm
