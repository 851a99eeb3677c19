#include "ccdm/distill.hpp"

#include <bit>
#include <cmath>
#include <sstream>

#include "ccdm/errors.hpp"
#include "ccdm/torch_util.hpp"

namespace nn = torch::nn;
namespace F = torch::nn::functional;

namespace ccdm {

std::string AugmentPolicy::str() const {
  std::string s;
  auto add = [&](bool on, const char* name) {
    if (!on) return;
    if (!s.empty()) s += ',';
    s += name;
  };
  add(color, "color");
  add(translation, "translation");
  add(cutout, "cutout");
  return s;
}

AugmentPolicy parse_augment_policy(const std::string& s) {
  AugmentPolicy p;
  if (s.empty() || s == "none") return p;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok == "color") p.color = true;
    else if (tok == "translation") p.translation = true;
    else if (tok == "cutout") p.cutout = true;
    else throw std::invalid_argument("unknown augmentation '" + tok + "' (color|translation|cutout)");
  }
  return p;
}

AugmentParams draw_augment_params(const AugmentPolicy& p, std::int64_t batch, std::int64_t height, std::int64_t width,
                                  RandomStream& rng) {
  AugmentParams a;
  for (std::int64_t i = 0; i < batch; ++i) {
    if (p.color) {
      a.brightness.push_back(rng.uniform());
      a.saturation.push_back(rng.uniform());
      a.contrast.push_back(rng.uniform());
    }
    if (p.translation) {
      const int sy = static_cast<int>(height / 8.0 + 0.5), sx = static_cast<int>(width / 8.0 + 0.5);
      a.shift_y.push_back(static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(2 * sy + 1))) - sy);
      a.shift_x.push_back(static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(2 * sx + 1))) - sx);
    }
    if (p.cutout) {
      a.cut_h = static_cast<int>(height / 2.0 + 0.5);
      a.cut_w = static_cast<int>(width / 2.0 + 0.5);
      a.cut_y.push_back(static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(height + (1 - a.cut_h % 2)))));
      a.cut_x.push_back(static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(width + (1 - a.cut_w % 2)))));
    }
  }
  return a;
}

torch::Tensor diffaugment(const torch::Tensor& x, const AugmentPolicy& p, const AugmentParams& a) {
  if (p.empty()) return x;
  const auto B = x.size(0), H = x.size(2), W = x.size(3);
  auto opts = torch::TensorOptions().dtype(x.dtype());
  auto out = x;
  if (p.color) {
    auto col = [&](const std::vector<double>& v) { return torch::tensor(v, torch::kFloat64).to(opts).view({B, 1, 1, 1}); };
    out = out + (col(a.brightness) - 0.5);
    auto m = out.mean(1, true);
    out = (out - m) * (col(a.saturation) * 2.0) + m;
    m = out.mean({1, 2, 3}, true);
    out = (out - m) * (col(a.contrast) + 0.5) + m;
  }
  if (p.translation) {
    const int sy = static_cast<int>(H / 8.0 + 0.5), sx = static_cast<int>(W / 8.0 + 0.5);
    const auto padded = F::pad(out, F::PadFuncOptions({sx, sx, sy, sy}));
    std::vector<torch::Tensor> rows;
    for (std::int64_t i = 0; i < B; ++i)
      rows.push_back(padded[i].narrow(1, sy - a.shift_y[i], H).narrow(2, sx - a.shift_x[i], W));
    out = torch::stack(rows);
  }
  if (p.cutout) {
    auto mask = torch::ones({B, 1, H, W}, opts);
    for (std::int64_t i = 0; i < B; ++i) {
      const auto y0 = std::clamp<std::int64_t>(a.cut_y[i] - a.cut_h / 2, 0, H);
      const auto y1 = std::clamp<std::int64_t>(a.cut_y[i] - a.cut_h / 2 + a.cut_h, 0, H);
      const auto x0 = std::clamp<std::int64_t>(a.cut_x[i] - a.cut_w / 2, 0, W);
      const auto x1 = std::clamp<std::int64_t>(a.cut_x[i] - a.cut_w / 2 + a.cut_w, 0, W);
      if (y1 > y0 && x1 > x0) mask[i].narrow(1, y0, y1 - y0).narrow(2, x0, x1 - x0).zero_();
    }
    out = out * mask;
  }
  return out;
}

torch::Tensor diffaugment(const torch::Tensor& x, const AugmentPolicy& p, RandomStream& rng) {
  return diffaugment(x, p, draw_augment_params(p, x.size(0), x.size(2), x.size(3), rng));
}

// ---------------------------------------------------------------------------

torch::Tensor spectral_normalize(const torch::Tensor& w, torch::Tensor& u, bool update) {
  const auto mat = w.view({w.size(0), -1});
  torch::Tensor uu, v;
  {
    torch::NoGradGuard ng;
    v = F::normalize(torch::mv(mat.t(), u), F::NormalizeFuncOptions().dim(0).eps(1e-12));
    uu = F::normalize(torch::mv(mat, v), F::NormalizeFuncOptions().dim(0).eps(1e-12));
    if (update) u.copy_(uu);
  }
  const auto sigma = torch::dot(uu, torch::mv(mat, v));
  return w / sigma;
}

SNConv2dImpl::SNConv2dImpl(std::int64_t in, std::int64_t out, std::int64_t k, std::int64_t s, std::int64_t p)
    : stride(s), pad(p) {
  nn::Conv2d proto(nn::Conv2dOptions(in, out, k));
  weight = register_parameter("weight", proto->weight.detach().clone());
  bias = register_parameter("bias", proto->bias.detach().clone());
  u = register_buffer("u", F::normalize(torch::randn({out}), F::NormalizeFuncOptions().dim(0)));
}

torch::Tensor SNConv2dImpl::forward(const torch::Tensor& x) {
  const auto w = spectral_normalize(weight, u, is_training());
  return F::conv2d(x, w, F::Conv2dFuncOptions().bias(bias).stride(stride).padding(pad));
}

SNLinearImpl::SNLinearImpl(std::int64_t in, std::int64_t out, bool with_bias) {
  nn::Linear proto(nn::LinearOptions(in, out).bias(with_bias));
  weight = register_parameter("weight", proto->weight.detach().clone());
  if (with_bias) bias = register_parameter("bias", proto->bias.detach().clone());
  u = register_buffer("u", F::normalize(torch::randn({out}), F::NormalizeFuncOptions().dim(0)));
}

torch::Tensor SNLinearImpl::forward(const torch::Tensor& x) {
  return F::linear(x, spectral_normalize(weight, u, is_training()), bias);
}

CondBatchNormImpl::CondBatchNormImpl(std::int64_t ch, std::int64_t cond_dim) {
  bn = register_module("bn", nn::BatchNorm2d(nn::BatchNorm2dOptions(ch).affine(false)));
  gain = register_module("gain", nn::Linear(nn::LinearOptions(cond_dim, ch).bias(false)));
  shift = register_module("shift", nn::Linear(nn::LinearOptions(cond_dim, ch).bias(false)));
}

torch::Tensor CondBatchNormImpl::forward(const torch::Tensor& x, const torch::Tensor& h) {
  const auto g = (1.0 + gain->forward(h)).unsqueeze(-1).unsqueeze(-1);
  const auto b = shift->forward(h).unsqueeze(-1).unsqueeze(-1);
  return bn->forward(x) * g + b;
}

GenBlockImpl::GenBlockImpl(std::int64_t in, std::int64_t out, std::int64_t cond_dim) {
  bn1 = register_module("bn1", CondBatchNorm(in, cond_dim));
  conv1 = register_module("conv1", nn::Conv2d(nn::Conv2dOptions(in, out, 3).padding(1)));
  bn2 = register_module("bn2", CondBatchNorm(out, cond_dim));
  conv2 = register_module("conv2", nn::Conv2d(nn::Conv2dOptions(out, out, 3).padding(1)));
  skip = register_module("skip", nn::Conv2d(nn::Conv2dOptions(in, out, 1)));
}

namespace {
torch::Tensor up2(const torch::Tensor& x) {
  return F::interpolate(x, F::InterpolateFuncOptions().scale_factor(std::vector<double>{2.0, 2.0}).mode(torch::kNearest));
}
}  // namespace

torch::Tensor GenBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& h) {
  auto y = conv1->forward(up2(torch::relu(bn1->forward(x, h))));
  y = conv2->forward(torch::relu(bn2->forward(y, h)));
  return y + skip->forward(up2(x));
}

GeneratorImpl::GeneratorImpl(ImageShape s, std::int64_t c, std::int64_t cond_dim) : shape(s), channels(c) {
  if (s.height % 8 != 0 || s.width % 8 != 0) throw std::invalid_argument("generator needs height and width divisible by 8");
  fc = register_module("fc", nn::Linear(kGeneratorZDim, c * (s.height / 8) * (s.width / 8)));
  blocks = register_module("blocks", nn::ModuleList());
  for (int i = 0; i < 3; ++i) blocks->push_back(GenBlock(c, c, cond_dim));
  bn_out = register_module("bn_out", nn::BatchNorm2d(c));
  conv_out = register_module("conv_out", nn::Conv2d(nn::Conv2dOptions(c, s.channels, 3).padding(1)));
}

torch::Tensor GeneratorImpl::forward(const torch::Tensor& z, const torch::Tensor& h) {
  auto x = fc->forward(z).view({z.size(0), channels, shape.height / 8, shape.width / 8});
  for (std::size_t i = 0; i < blocks->size(); ++i) x = blocks[i]->as<GenBlock>()->forward(x, h);
  return torch::tanh(conv_out->forward(torch::relu(bn_out->forward(x))));
}

DiscBlockImpl::DiscBlockImpl(std::int64_t in, std::int64_t out, bool d, bool f) : down(d), first(f) {
  conv1 = register_module("conv1", SNConv2d(in, out, 3, 1, 1));
  conv2 = register_module("conv2", SNConv2d(out, out, 3, 1, 1));
  if (in != out || d) skip = register_module("skip", SNConv2d(in, out, 1));
}

torch::Tensor DiscBlockImpl::forward(const torch::Tensor& x) {
  auto h = first ? x : torch::relu(x);
  h = conv2->forward(torch::relu(conv1->forward(h)));
  if (down) h = F::avg_pool2d(h, F::AvgPool2dFuncOptions(2));
  torch::Tensor sc = x;
  if (skip) {
    if (first) {
      sc = skip->forward(down ? F::avg_pool2d(x, F::AvgPool2dFuncOptions(2)) : x);
    } else {
      sc = skip->forward(x);
      if (down) sc = F::avg_pool2d(sc, F::AvgPool2dFuncOptions(2));
    }
  }
  return h + sc;
}

DiscriminatorImpl::DiscriminatorImpl(ImageShape s, std::int64_t c, std::int64_t cond_dim) {
  blocks = register_module("blocks", nn::ModuleList());
  blocks->push_back(DiscBlock(s.channels, c, true, true));
  blocks->push_back(DiscBlock(c, c, true, false));
  blocks->push_back(DiscBlock(c, c, false, false));
  blocks->push_back(DiscBlock(c, c, false, false));
  out = register_module("out", SNLinear(c, 1));
  embed = register_module("embed", SNLinear(cond_dim, c, false));
}

torch::Tensor DiscriminatorImpl::forward(const torch::Tensor& x, const torch::Tensor& h) {
  auto f = x;
  for (std::size_t i = 0; i < blocks->size(); ++i) f = blocks[i]->as<DiscBlock>()->forward(f);
  f = torch::relu(f).sum({2, 3});
  return out->forward(f).squeeze(1) + (embed->forward(h) * f).sum(1);
}

// ---------------------------------------------------------------------------

void DistillConfig::validate() const {
  if (steps < 0 || batch_size < 1) throw ConfigError("distillation needs steps >= 0 and batch_size >= 1");
  if (!(lr_g > 0 && lr_d > 0 && lr_fake > 0)) throw ConfigError("learning rates must be positive");
  if (!(w_D > 0 && w_G >= 0)) throw ConfigError("w_D must be positive and w_G non-negative");
  if (d_updates < 1) throw ConfigError("d_updates must be >= 1");
  if (!(t_min_frac > 0 && t_min_frac < t_max_frac && t_max_frac <= 1))
    throw ConfigError("need 0 < t_min_frac < t_max_frac <= 1");
  if (m_kappa < 0) throw ConfigError("m_kappa must be >= 0");
  parse_augment_policy(policy);
}

DistillState::DistillState(Denoiser& real, const EmbeddingNets& n, const DistillConfig& c)
    : real_score(&real), nets(&n), cfg(c) {
  cfg.validate();
  policy = parse_augment_policy(cfg.policy);
  freeze(*real.net());
  fake_score = std::make_unique<Denoiser>(real.config(), real.T());
  {
    torch::NoGradGuard ng;
    auto src = real.net()->named_parameters(true);
    for (auto& kv : fake_score->net()->named_parameters(true)) kv.value().copy_(src[kv.key()]);
    auto bsrc = real.net()->named_buffers(true);
    for (auto& kv : fake_score->net()->named_buffers(true)) kv.value().copy_(bsrc[kv.key()]);
  }
  torch::manual_seed(mix64(cfg.seed ^ stream_id("distill_init")));
  G = Generator(n.shape, cfg.g_channels);
  D = Discriminator(n.shape, cfg.d_channels);
  opt_g = std::make_unique<torch::optim::Adam>(G->parameters(), torch::optim::AdamOptions(cfg.lr_g).betas({0.0, 0.999}));
  opt_d = std::make_unique<torch::optim::Adam>(D->parameters(), torch::optim::AdamOptions(cfg.lr_d).betas({0.0, 0.999}));
  opt_fake = std::make_unique<torch::optim::Adam>(fake_score->net()->parameters(), torch::optim::AdamOptions(cfg.lr_fake));
}

namespace {

ConditionEmbedding null_like(const ConditionEmbedding& c) {
  return embedding_from_long(torch::zeros_like(c.h_short), torch::zeros_like(c.h_long),
                             torch::ones_like(c.null_mask, torch::kBool));
}

torch::Tensor x0_of(Denoiser& f, const torch::Tensor& xt, const torch::Tensor& t, const ConditionEmbedding& c,
                    const NoiseSchedule& s) {
  return f.predict_x0(xt, t, c, s);
}

void check_finite(const torch::Tensor& loss, const char* what) {
  if (!std::isfinite(loss.item<double>())) throw NumericalFault(std::string("non-finite ") + what);
}

torch::Tensor draw_t(int B, const NoiseSchedule& s, const DistillConfig& cfg, RandomStream& rng) {
  const int lo = std::max(1, static_cast<int>(std::lround(cfg.t_min_frac * s.T)));
  const int hi = std::max(lo, static_cast<int>(std::lround(cfg.t_max_frac * s.T)));
  std::vector<std::int64_t> t;
  for (int i = 0; i < B; ++i) t.push_back(lo + static_cast<std::int64_t>(rng.uniform_int(static_cast<std::uint64_t>(hi - lo + 1))));
  return torch::tensor(t, torch::kInt64);
}

}  // namespace

torch::Tensor dm_gradient(DistillState& st, const torch::Tensor& x, const ConditionEmbedding& cond,
                          const torch::Tensor& t, const torch::Tensor& eps_std, const NoiseSchedule& s) {
  torch::NoGradGuard ng;
  const auto xd = x.detach();
  const auto H = cond.H_image(st.nets->shape).to(xd.dtype());
  const auto xt = forward_sample(xd, t, H, eps_std, s);
  const bool fake_training = st.fake_score->net()->is_training();
  st.fake_score->net()->eval();
  auto x0_real = x0_of(*st.real_score, xt, t, cond, s);
  if (st.cfg.real_guidance != 1.0)
    x0_real = cfg_combine(x0_real, x0_of(*st.real_score, xt, t, null_like(cond), s), st.cfg.real_guidance);
  const auto x0_fake = x0_of(*st.fake_score, xt, t, cond, s);
  st.fake_score->net()->train(fake_training);
  const auto p_real = xd - x0_real;
  const auto p_fake = xd - x0_fake;
  const auto scale = p_real.abs().mean({1, 2, 3}, true).clamp_min(1e-8);
  return torch::nan_to_num((p_real - p_fake) / scale);
}

torch::Tensor hinge_d_loss(const torch::Tensor& d_real, const torch::Tensor& d_fake, const torch::Tensor& w) {
  return ((torch::relu(1.0 - d_real) + torch::relu(1.0 + d_fake)) * w).mean();
}

torch::Tensor hinge_g_loss(const torch::Tensor& d_fake, const torch::Tensor& w) { return (-d_fake * w).mean(); }

GeneratorLoss generator_step(DistillState& st, const VicinalBatch& tb, const NoiseSchedule& s, RandomStream& rng) {
  const auto B = tb.size();
  st.G->train();
  st.D->train();
  const auto w = tb.weights.to(torch::kFloat32);
  const auto z = rng.randn({B, kGeneratorZDim});
  const auto x = st.G->forward(z, tb.cond.h_short);
  const auto t = draw_t(static_cast<int>(B), s, st.cfg, rng);
  const auto eps_std = rng.randn(x.sizes());
  const auto grad = dm_gradient(st, x, tb.cond, t, eps_std, s);
  const auto dm = ((0.5 * (x - (x - grad).detach()).square()).flatten(1).mean(1) * w).mean();
  const auto params = draw_augment_params(st.policy, B, x.size(2), x.size(3), rng);
  const auto gan = hinge_g_loss(st.D->forward(diffaugment(x, st.policy, params), tb.cond.h_short), w);
  const auto loss = dm + st.cfg.w_G * gan;
  check_finite(loss, "generator loss");
  st.opt_g->zero_grad();
  loss.backward();
  st.opt_g->step();
  return {loss.item<double>(), dm.item<double>(), gan.item<double>()};
}

CriticLoss critic_step(DistillState& st, const VicinalBatch& real, const NoiseSchedule& s, RandomStream& rng) {
  const auto B = real.size();
  const auto w = real.weights.to(torch::kFloat32);
  torch::Tensor x_fake;
  {
    torch::NoGradGuard ng;
    st.G->train();
    x_fake = st.G->forward(rng.randn({B, kGeneratorZDim}), real.cond.h_short);
  }
  // Fake score: denoising loss on generator samples.
  VicinalBatch fb = real;
  fb.images = x_fake;
  st.fake_score->net()->train();
  const auto n = noise_batch(fb, s, rng);
  const auto pred = st.fake_score->predict(n.xt, fb.timesteps, fb.cond);
  const auto fake_loss = hvidl_from_prediction(pred, st.fake_score->pred_type(), fb, n, s);
  st.opt_fake->zero_grad();
  fake_loss.backward();
  st.opt_fake->step();

  st.D->train();
  const auto params = draw_augment_params(st.policy, B, x_fake.size(2), x_fake.size(3), rng);
  const auto d_real = st.D->forward(diffaugment(real.images, st.policy, params), real.cond.h_short);
  const auto d_fake = st.D->forward(diffaugment(x_fake, st.policy, params), real.cond.h_short);
  const auto d_loss = st.cfg.w_D * hinge_d_loss(d_real, d_fake, w);
  check_finite(d_loss, "discriminator loss");
  st.opt_d->zero_grad();
  d_loss.backward();
  st.opt_d->step();
  return {fake_loss.item<double>(), d_loss.item<double>()};
}

std::vector<DistillRecord> distill_loop(DistillState& st, const Dataset& ds, const LabelSpace& ls,
                                        const NoiseSchedule& s, const DistillMonitor& monitor) {
  std::vector<DistillRecord> trace;
  if (st.cfg.steps == 0) return trace;
  TrainConfig tc;
  tc.batch_size = st.cfg.batch_size;
  tc.p_drop = 0.0;
  tc.seed = st.cfg.seed;
  // Without a vicinity radius the perturbed target could never match, so use exact labels.
  tc.vicinity = ls.kappa > 0.0 ? VicinityMode::Hard : VicinityMode::None;
  const VicinitySampler vs(ls);
  int faults = 0;
  for (int step = 1; step <= st.cfg.steps; ++step) {
    const auto us = static_cast<std::uint64_t>(step);
    try {
      DistillRecord rec{step, {}, {}};
      for (int k = 0; k < st.cfg.d_updates; ++k) {
        RandomStream br(st.cfg.seed, stream_id("distill_critic_batch", us, static_cast<std::uint64_t>(k)));
        RandomStream nr(st.cfg.seed, stream_id("distill_critic_noise", us, static_cast<std::uint64_t>(k)));
        rec.c = critic_step(st, assemble_batch(ds, vs, *st.nets, tc, s.T, br), s, nr);
      }
      RandomStream br(st.cfg.seed, stream_id("distill_gen_batch", us));
      RandomStream nr(st.cfg.seed, stream_id("distill_gen_noise", us));
      rec.g = generator_step(st, assemble_batch(ds, vs, *st.nets, tc, s.T, br), s, nr);
      trace.push_back(rec);
      faults = 0;
    } catch (const NumericalFault& e) {
      if (++faults >= 3) throw NumericalFault(std::string(e.what()) + " (3 consecutive steps, aborting at step " + std::to_string(step) + ")");
    }
    if (monitor && st.cfg.monitor_every > 0 && step % st.cfg.monitor_every == 0) monitor(step, st);
  }
  st.G->eval();
  if (!st.cfg.out_dir.empty()) save_generator(st.G, st.cfg, st.cfg.out_dir / "generator.pt");
  return trace;
}

torch::Tensor generate(Generator& G, const EmbeddingNets& nets, const std::vector<double>& y_targets, int n_per_label,
                       std::uint64_t seed, int batch_size) {
  torch::NoGradGuard ng;
  G->eval();
  std::vector<double> ys;
  std::vector<torch::Tensor> zs;
  for (double y : y_targets)
    for (int k = 0; k < n_per_label; ++k) {
      RandomStream r(seed, stream_id("generate", std::bit_cast<std::uint64_t>(y), static_cast<std::uint64_t>(k)));
      zs.push_back(r.randn({kGeneratorZDim}));
      ys.push_back(y);
    }
  const auto yt = torch::tensor(ys, torch::kFloat64);
  const auto z = torch::stack(zs);
  std::vector<torch::Tensor> out;
  for (std::int64_t i = 0; i < z.size(0); i += batch_size) {
    const auto n = std::min<std::int64_t>(batch_size, z.size(0) - i);
    const auto cond = nets.embed(yt.narrow(0, i, n), torch::zeros({n}, torch::kBool));
    out.push_back(G->forward(z.narrow(0, i, n), cond.h_short));
  }
  return torch::cat(out);
}

void save_generator(const Generator& G, const DistillConfig& cfg, const std::filesystem::path& path) {
  save_checkpoint(*G, path,
                  {{"z_dim", kGeneratorZDim},
                   {"w_D", cfg.w_D},
                   {"w_G", cfg.w_G},
                   {"policy", cfg.policy},
                   {"m_kappa", cfg.m_kappa},
                   {"image_shape", G->shape},
                   {"g_channels", G->channels},
                   {"real_guidance", cfg.real_guidance}});
}

Generator load_generator(const std::filesystem::path& path) {
  const auto meta = read_metadata(path);
  Generator G(meta.at("image_shape").get<ImageShape>(), meta.at("g_channels").get<std::int64_t>());
  load_parameters(*G, path);
  G->eval();
  return G;
}

}  // namespace ccdm
