#include "ccdm/denoiser.hpp"

#include <cmath>
#include <stdexcept>

#include "ccdm/errors.hpp"
#include "ccdm/torch_util.hpp"

namespace nn = torch::nn;
namespace F = torch::nn::functional;

namespace ccdm {

void DenoiserConfig::validate() const {
  if (channel_mults.empty()) throw ConfigError("channel_mults must not be empty");
  if (base_channels < groups || base_channels % groups != 0)
    throw ConfigError("base_channels must be a positive multiple of the group count");
  if (res_blocks < 1) throw ConfigError("res_blocks must be >= 1");
  const std::int64_t factor = std::int64_t{1} << (channel_mults.size() - 1);
  if (shape.height % factor != 0 || shape.width % factor != 0)
    throw ConfigError("image height and width must be divisible by " + std::to_string(factor));
  for (auto m : channel_mults)
    if (m < 1) throw ConfigError("channel multipliers must be positive");
}

nlohmann::json DenoiserConfig::to_json() const {
  return {{"image_shape", shape},
          {"base_channels", base_channels},
          {"channel_mults", channel_mults},
          {"res_blocks", res_blocks},
          {"groups", groups},
          {"label_embed_dim", label_embed_dim},
          {"label_layers", label_layers},
          {"pred_type", to_string(pred_type)}};
}

DenoiserConfig DenoiserConfig::from_json(const nlohmann::json& j) {
  DenoiserConfig c;
  c.shape = j.at("image_shape").get<ImageShape>();
  c.base_channels = j.at("base_channels");
  c.channel_mults = j.at("channel_mults").get<std::vector<std::int64_t>>();
  c.res_blocks = j.at("res_blocks");
  c.groups = j.value("groups", std::int64_t{8});
  c.label_embed_dim = j.value("label_embed_dim", kShortEmbedDim);
  c.label_layers = j.value("label_layers", std::int64_t{2});
  c.pred_type = parse_prediction_type(j.at("pred_type").get<std::string>());
  return c;
}

torch::Tensor timestep_embedding(const torch::Tensor& t, std::int64_t dim) {
  const std::int64_t half = dim / 2;
  const auto freqs = torch::exp(-std::log(10000.0) * torch::arange(half, torch::kFloat32) / half);
  const auto args = t.to(torch::kFloat32).unsqueeze(1) * freqs.unsqueeze(0);
  auto emb = torch::cat({torch::cos(args), torch::sin(args)}, 1);
  if (dim % 2) emb = F::pad(emb, F::PadFuncOptions({0, 1}));
  return emb;
}

ResBlockImpl::ResBlockImpl(std::int64_t in, std::int64_t out, std::int64_t emb_dim, std::int64_t groups) {
  norm1 = register_module("norm1", nn::GroupNorm(groups, in));
  conv1 = register_module("conv1", nn::Conv2d(nn::Conv2dOptions(in, out, 3).padding(1)));
  emb_proj = register_module("emb_proj", nn::Linear(emb_dim, out));
  norm2 = register_module("norm2", nn::GroupNorm(groups, out));
  conv2 = register_module("conv2", nn::Conv2d(nn::Conv2dOptions(out, out, 3).padding(1)));
  if (in != out) skip = register_module("skip", nn::Conv2d(nn::Conv2dOptions(in, out, 1)));
}

torch::Tensor ResBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& emb) {
  auto h = conv1->forward(torch::silu(norm1->forward(x)));
  h = h + emb_proj->forward(torch::silu(emb)).unsqueeze(-1).unsqueeze(-1);
  h = conv2->forward(torch::silu(norm2->forward(h)));
  return (skip ? skip->forward(x) : x) + h;
}

UNetImpl::UNetImpl(const DenoiserConfig& c) : cfg(c) {
  cfg.validate();
  const auto base = cfg.base_channels;
  const auto temb = cfg.time_embed_dim();
  const auto g = cfg.groups;

  null_embedding = register_parameter("null_embedding", torch::zeros({cfg.label_embed_dim}));
  time_mlp = register_module("time_mlp", nn::Sequential(nn::Linear(base, temb), nn::SiLU(), nn::Linear(temb, temb)));
  label_block = register_module("label_block", nn::Sequential());
  std::int64_t in = cfg.label_embed_dim;
  for (std::int64_t i = 0; i < cfg.label_layers; ++i) {
    label_block->push_back(nn::Linear(in, temb));
    label_block->push_back(nn::BatchNorm1d(temb));
    label_block->push_back(nn::ReLU());
    in = temb;
  }

  conv_in = register_module("conv_in", nn::Conv2d(nn::Conv2dOptions(cfg.shape.channels, base, 3).padding(1)));
  down = register_module("down", nn::ModuleList());
  mid = register_module("mid", nn::ModuleList());
  up = register_module("up", nn::ModuleList());

  std::vector<std::int64_t> skip_ch{base};
  std::int64_t ch = base;
  const auto levels = cfg.channel_mults.size();
  for (std::size_t l = 0; l < levels; ++l) {
    const auto out = base * cfg.channel_mults[l];
    for (std::int64_t r = 0; r < cfg.res_blocks; ++r) {
      down->push_back(ResBlock(ch, out, temb, g));
      down_is_res_.push_back(true);
      ch = out;
      skip_ch.push_back(ch);
    }
    if (l + 1 < levels) {
      down->push_back(nn::Conv2d(nn::Conv2dOptions(ch, ch, 3).stride(2).padding(1)));
      down_is_res_.push_back(false);
      skip_ch.push_back(ch);
    }
  }
  mid->push_back(ResBlock(ch, ch, temb, g));
  mid->push_back(ResBlock(ch, ch, temb, g));
  for (std::size_t l = levels; l-- > 0;) {
    const auto out = base * cfg.channel_mults[l];
    for (std::int64_t r = 0; r <= cfg.res_blocks; ++r) {
      const auto s = skip_ch.back();
      skip_ch.pop_back();
      up->push_back(ResBlock(ch + s, out, temb, g));
      up_is_res_.push_back(true);
      ch = out;
    }
    if (l > 0) {
      up->push_back(nn::Conv2d(nn::Conv2dOptions(ch, ch, 3).padding(1)));
      up_is_res_.push_back(false);
    }
  }
  norm_out = register_module("norm_out", nn::GroupNorm(g, ch));
  conv_out = register_module("conv_out", nn::Conv2d(nn::Conv2dOptions(ch, cfg.shape.channels, 3).padding(1)));
  torch::NoGradGuard ng;
  conv_out->weight.zero_();
  conv_out->bias.zero_();
}

torch::Tensor UNetImpl::forward(const torch::Tensor& xt, const torch::Tensor& t, const torch::Tensor& h_short,
                                const torch::Tensor& null_mask) {
  const auto mask = null_mask.to(torch::kBool).unsqueeze(1);
  const auto label_in = torch::where(mask, null_embedding.unsqueeze(0).expand_as(h_short), h_short.to(null_embedding.dtype()));
  const auto emb = time_mlp->forward(timestep_embedding(t, cfg.base_channels).to(xt.dtype())) + label_block->forward(label_in);

  auto x = conv_in->forward(xt);
  std::vector<torch::Tensor> skips{x};
  for (std::size_t i = 0; i < down->size(); ++i) {
    if (down_is_res_[i])
      x = down[i]->as<ResBlock>()->forward(x, emb);
    else
      x = down[i]->as<nn::Conv2d>()->forward(x);
    skips.push_back(x);
  }
  for (std::size_t i = 0; i < mid->size(); ++i) x = mid[i]->as<ResBlock>()->forward(x, emb);
  for (std::size_t i = 0; i < up->size(); ++i) {
    if (up_is_res_[i]) {
      auto s = skips.back();
      skips.pop_back();
      if (zero_skips) s = s * 0.0;
      x = up[i]->as<ResBlock>()->forward(torch::cat({x, s}, 1), emb);
    } else {
      x = F::interpolate(x, F::InterpolateFuncOptions().scale_factor(std::vector<double>{2.0, 2.0}).mode(torch::kNearest));
      x = up[i]->as<nn::Conv2d>()->forward(x);
    }
  }
  return conv_out->forward(torch::silu(norm_out->forward(x)));
}

// ---------------------------------------------------------------------------

Denoiser::Denoiser(const DenoiserConfig& cfg, int T, std::uint64_t init_seed) : cfg_(cfg), T_(T) {
  cfg_.validate();
  if (T < 2) throw std::invalid_argument("T must be >= 2");
  torch::manual_seed(init_seed);
  net_ = UNet(cfg_);
}

torch::Tensor Denoiser::predict(const torch::Tensor& xt, const torch::Tensor& t, const torch::Tensor& h_short,
                                const torch::Tensor& null_mask) {
  const auto& s = cfg_.shape;
  if (xt.dim() != 4 || xt.size(1) != s.channels || xt.size(2) != s.height || xt.size(3) != s.width)
    throw std::invalid_argument("xt shape does not match the denoiser's image shape");
  if (t.dim() != 1 || t.size(0) != xt.size(0)) throw std::invalid_argument("t must have one entry per row");
  if (h_short.dim() != 2 || h_short.size(0) != xt.size(0) || h_short.size(1) != cfg_.label_embed_dim)
    throw std::invalid_argument("short embedding shape mismatch");
  if (t.numel() > 0 && (t.min().item<std::int64_t>() < 1 || t.max().item<std::int64_t>() > T_))
    throw std::out_of_range("time step outside 1..T");
  return net_->forward(xt, t.to(torch::kInt64), h_short.to(xt.dtype()), null_mask);
}

torch::Tensor Denoiser::predict(const torch::Tensor& xt, const torch::Tensor& t, const ConditionEmbedding& cond) {
  return predict(xt, t, cond.h_short, cond.null_mask);
}

torch::Tensor Denoiser::predict_x0(const torch::Tensor& xt, const torch::Tensor& t, const ConditionEmbedding& cond,
                                   const NoiseSchedule& s) {
  auto out = predict(xt, t, cond);
  if (cfg_.pred_type == PredictionType::X0) return out;
  return convert_prediction(out, xt, t, cfg_.pred_type, PredictionType::X0, s);
}

void Denoiser::save(const std::filesystem::path& path, const nlohmann::json& extra) const {
  auto meta = cfg_.to_json();
  meta["T"] = T_;
  if (trained_p_drop_) meta["trained_p_drop"] = *trained_p_drop_;
  meta.update(extra);
  save_checkpoint(*net_, path, meta);
}

Denoiser Denoiser::load(const std::filesystem::path& path) {
  const auto meta = read_metadata(path);
  Denoiser d(DenoiserConfig::from_json(meta), meta.at("T").get<int>());
  load_parameters(*d.net_, path);
  if (meta.contains("trained_p_drop")) d.trained_p_drop_ = meta.at("trained_p_drop").get<double>();
  d.net_->eval();
  return d;
}

Denoiser build_unet(const ImageShape& shape, std::int64_t base_channels, const std::vector<std::int64_t>& mults,
                    PredictionType pred_type, int T, std::uint64_t init_seed) {
  DenoiserConfig c;
  c.shape = shape;
  c.base_channels = base_channels;
  c.channel_mults = mults;
  c.pred_type = pred_type;
  return Denoiser(c, T, init_seed);
}

}  // namespace ccdm
