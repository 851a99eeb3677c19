#include "ccdm/embednet.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <stdexcept>

#include "ccdm/errors.hpp"
#include "ccdm/labelspace.hpp"
#include "ccdm/rng.hpp"
#include "ccdm/torch_util.hpp"

namespace fs = std::filesystem;
namespace nn = torch::nn;

namespace ccdm {

std::string to_string(LabelEncoding e) {
  switch (e) {
    case LabelEncoding::Learned: return "learned";
    case LabelEncoding::Sinusoidal: return "sinusoidal";
    case LabelEncoding::GaussianFourier: return "gaussian_fourier";
  }
  return "?";
}

LabelEncoding parse_label_encoding(const std::string& s) {
  if (s == "learned" || s == "cnn") return LabelEncoding::Learned;
  if (s == "sinusoidal") return LabelEncoding::Sinusoidal;
  if (s == "gaussian_fourier") return LabelEncoding::GaussianFourier;
  throw std::invalid_argument("unknown label encoding '" + s + "' (learned|sinusoidal|gaussian_fourier)");
}

std::string to_string(CovarianceMode c) {
  return c == CovarianceMode::LabelDependent ? "label_dependent" : "identity";
}

CovarianceMode parse_covariance_mode(const std::string& s) {
  if (s == "label_dependent") return CovarianceMode::LabelDependent;
  if (s == "identity") return CovarianceMode::Identity;
  throw std::invalid_argument("unknown covariance mode '" + s + "' (label_dependent|identity)");
}

// ---------------------------------------------------------------------------

AuxRegressorImpl::AuxRegressorImpl(ImageShape s, std::int64_t fd, std::int64_t w)
    : shape(s), feature_dim(fd), width(w) {
  if (fd < 1 || w < 8 || w % 8 != 0) throw std::invalid_argument("aux regressor needs feature_dim >= 1, width % 8 == 0");
  convs = register_module(
      "convs", nn::Sequential(nn::Conv2d(nn::Conv2dOptions(s.channels, w, 3).padding(1)),
                              nn::GroupNorm(8, w), nn::ReLU(),
                              nn::Conv2d(nn::Conv2dOptions(w, 2 * w, 4).stride(2).padding(1)),
                              nn::GroupNorm(8, 2 * w), nn::ReLU(),
                              nn::Conv2d(nn::Conv2dOptions(2 * w, 2 * w, 4).stride(2).padding(1)),
                              nn::GroupNorm(8, 2 * w), nn::ReLU(), nn::AdaptiveAvgPool2d(4), nn::Flatten()));
  dense = register_module("dense", nn::Sequential(nn::Linear(2 * w * 16, 256), nn::ReLU(), nn::Linear(256, fd),
                                                  nn::ReLU()));
  out = register_module("out", nn::Linear(fd, 1));
}

torch::Tensor AuxRegressorImpl::features(const torch::Tensor& x) { return dense->forward(convs->forward(x)); }

torch::Tensor AuxRegressorImpl::head(const torch::Tensor& h) { return out->forward(h).squeeze(-1); }

torch::Tensor AuxRegressorImpl::predict(const torch::Tensor& x) { return forward(x).clamp(0.0, 1.0); }

PhiMlpImpl::PhiMlpImpl(std::int64_t od, std::int64_t h, std::int64_t groups) : out_dim(od), hidden(h) {
  if (od < 1 || h < groups || h % groups != 0) throw std::invalid_argument("phi mlp: hidden must be a multiple of groups");
  net = register_module("net", nn::Sequential());
  std::int64_t in = 1;
  for (int i = 0; i < 4; ++i) {
    net->push_back(nn::Linear(in, h));
    net->push_back(nn::GroupNorm(groups, h));
    net->push_back(nn::ReLU());
    in = h;
  }
  net->push_back(nn::Linear(h, od));
  net->push_back(nn::ReLU());
}

torch::Tensor PhiMlpImpl::forward(const torch::Tensor& y) {
  auto in = y.dim() == 1 ? y.unsqueeze(1) : y;
  return net->forward(in.to(torch::kFloat32));
}

// ---------------------------------------------------------------------------

namespace {

void check_training_set(const torch::Tensor& images, const std::vector<double>& labels) {
  if (!images.defined() || images.size(0) == 0 || labels.empty()) throw std::invalid_argument("empty training set");
  if (images.dim() != 4) throw std::invalid_argument("images must be [N, C, H, W]");
  if (images.size(0) != static_cast<std::int64_t>(labels.size()))
    throw std::invalid_argument("image and label counts differ");
  for (double y : labels)
    if (!(y >= 0.0 && y <= 1.0)) throw std::invalid_argument("labels must be normalized to [0, 1]");
}

}  // namespace

AuxTrainResult train_aux_cnn(const torch::Tensor& images, const std::vector<double>& labels, std::int64_t feature_dim,
                             const AuxTrainOptions& o) {
  check_training_set(images, labels);
  if (o.epochs < 1 || o.batch_size < 1) throw std::invalid_argument("aux training needs epochs >= 1, batch >= 1");
  const ImageShape shape{images.size(1), images.size(2), images.size(3)};
  torch::manual_seed(o.seed);
  AuxRegressor net(shape, feature_dim, o.width);
  torch::optim::Adam opt(net->parameters(), torch::optim::AdamOptions(o.lr));
  const auto x = images.to(torch::kFloat32);
  const auto y = torch::tensor(labels, torch::kFloat64).to(torch::kFloat32);
  const std::int64_t n = x.size(0);
  const std::int64_t bs = std::min<std::int64_t>(o.batch_size, n);
  const std::int64_t steps = std::max<std::int64_t>((n + bs - 1) / bs, o.min_steps_per_epoch);
  net->train();
  for (int epoch = 0; epoch < o.epochs; ++epoch) {
    const auto perm = permutation(n, o.seed, stream_id("aux_epoch", static_cast<std::uint64_t>(epoch)));
    std::size_t cursor = 0;
    for (std::int64_t s = 0; s < steps; ++s) {
      std::vector<std::int64_t> idx;
      for (std::int64_t b = 0; b < bs; ++b) idx.push_back(perm[cursor++ % perm.size()]);
      const auto ix = torch::tensor(idx, torch::kInt64);
      auto loss = torch::mse_loss(net->forward(x.index_select(0, ix)), y.index_select(0, ix));
      opt.zero_grad();
      loss.backward();
      opt.step();
    }
  }
  freeze(*net);
  double mse = 0.0;
  {
    torch::NoGradGuard ng;
    for (std::int64_t i = 0; i < n; i += 256) {
      const auto len = std::min<std::int64_t>(256, n - i);
      mse += torch::sum(torch::square(net->forward(x.narrow(0, i, len)) - y.narrow(0, i, len))).item<double>();
    }
  }
  return {net, mse / static_cast<double>(n)};
}

double ili_objective(const std::function<torch::Tensor(const torch::Tensor&)>& t3,
                     const std::function<torch::Tensor(const torch::Tensor&)>& t2, const std::vector<double>& distinct,
                     const torch::Tensor& zeta) {
  if (distinct.empty()) throw std::invalid_argument("no distinct labels");
  torch::NoGradGuard ng;
  const auto base = torch::tensor(distinct, torch::kFloat64).unsqueeze(1);
  const auto target = (base + zeta.to(torch::kFloat64)).reshape({-1});
  const auto pred = t2(t3(target.to(torch::kFloat32))).to(torch::kFloat64).reshape({-1});
  return torch::mean(torch::square(pred - target)).item<double>();
}

PhiTrainResult train_phi(const AuxRegressor& aux, const std::vector<double>& distinct, const PhiTrainOptions& o) {
  if (distinct.empty()) throw std::invalid_argument("no distinct labels");
  if (!aux || !is_frozen(*aux)) throw std::invalid_argument("the regressor must be trained and frozen first");
  if (o.steps < 1 || o.batch_size < 1) throw std::invalid_argument("phi training needs steps >= 1, batch >= 1");
  AuxRegressor t2 = aux;  // holder copy; shares the frozen parameters
  torch::manual_seed(o.seed);
  PhiMlp phi(aux->feature_dim, o.hidden);
  auto gen = make_generator(mix64(o.seed ^ stream_id("phi_train")));
  auto val_gen = make_generator(mix64(o.seed ^ stream_id("phi_validation")));
  const auto val_zeta =
      torch::randn({static_cast<std::int64_t>(distinct.size()), o.validation_draws}, val_gen, torch::kFloat64) *
      kZetaStd;
  auto head = [&](const torch::Tensor& h) { return t2->head(h); };
  auto map = [&](const torch::Tensor& y) { return phi->forward(y); };

  PhiTrainResult res;
  res.initial_objective = ili_objective(map, head, distinct, val_zeta);
  const auto ys = torch::tensor(distinct, torch::kFloat64).to(torch::kFloat32);
  torch::optim::Adam opt(phi->parameters(), torch::optim::AdamOptions(o.lr));
  phi->train();
  for (int s = 0; s < o.steps; ++s) {
    const auto idx = torch::randint(static_cast<std::int64_t>(distinct.size()), {o.batch_size}, gen, torch::kInt64);
    const auto target = ys.index_select(0, idx) + torch::randn({o.batch_size}, gen, torch::kFloat32) * kZetaStd;
    auto loss = torch::mse_loss(t2->head(phi->forward(target)), target);
    opt.zero_grad();
    loss.backward();
    opt.step();
  }
  freeze(*phi);
  res.final_objective = ili_objective(map, head, distinct, val_zeta);
  res.net = phi;
  return res;
}

PhiTrainResult train_phi_long(const AuxRegressor& aux, const std::vector<double>& distinct, const PhiTrainOptions& o) {
  if (aux && aux->feature_dim != aux->shape.numel())
    throw std::invalid_argument("covariance regressor feature width must equal the flattened image size");
  return train_phi(aux, distinct, o);
}

ShortEmbeddingResult train_phi_short(const torch::Tensor& images, const std::vector<double>& labels,
                                     const AuxTrainOptions& aux_opts, const PhiTrainOptions& phi_opts) {
  auto aux = train_aux_cnn(images, labels, kShortEmbedDim, aux_opts);
  auto phi = train_phi(aux.net, distinct_sorted(labels), phi_opts);
  return {aux.net, phi.net, aux.final_loss, phi.final_objective};
}

// ---------------------------------------------------------------------------

torch::Tensor ConditionEmbedding::H_image(const ImageShape& s) const {
  return H_diag.view({H_diag.size(0), s.channels, s.height, s.width});
}

ConditionEmbedding ConditionEmbedding::index(const torch::Tensor& rows) const {
  return {h_short.index_select(0, rows), h_long.index_select(0, rows), H_diag.index_select(0, rows),
          null_mask.index_select(0, rows)};
}

ConditionEmbedding ConditionEmbedding::cat(const ConditionEmbedding& a, const ConditionEmbedding& b) {
  return {torch::cat({a.h_short, b.h_short}), torch::cat({a.h_long, b.h_long}), torch::cat({a.H_diag, b.H_diag}),
          torch::cat({a.null_mask, b.null_mask})};
}

ConditionEmbedding embedding_from_long(const torch::Tensor& h_short, const torch::Tensor& h_long,
                                       const torch::Tensor& null_mask, double clamp_B) {
  const auto keep = null_mask.logical_not().unsqueeze(1);
  ConditionEmbedding e;
  e.null_mask = null_mask.to(torch::kBool);
  e.h_short = h_short * keep;
  e.h_long = h_long.clamp(-clamp_B, clamp_B) * keep;
  e.H_diag = torch::exp(-e.h_long);
  return e;
}

torch::Tensor sinusoidal_label_encoding(const torch::Tensor& y) {
  const std::int64_t half = kShortEmbedDim / 2;
  const auto freqs = torch::exp(-std::log(10000.0) * torch::arange(half, torch::kFloat64) / half);
  const auto arg = (y.to(torch::kFloat64) * 1000.0).unsqueeze(1) * freqs.unsqueeze(0);
  return torch::cat({torch::sin(arg), torch::cos(arg)}, 1).to(torch::kFloat32);
}

torch::Tensor gaussian_fourier_encoding(const torch::Tensor& y, const torch::Tensor& w) {
  const auto arg = 2.0 * std::numbers::pi * y.to(torch::kFloat64).unsqueeze(1) * w.to(torch::kFloat64).unsqueeze(0);
  return torch::cat({torch::sin(arg), torch::cos(arg)}, 1).to(torch::kFloat32);
}

torch::Tensor EmbeddingNets::short_embedding(const torch::Tensor& y) const {
  switch (encoding) {
    case LabelEncoding::Learned:
      if (!phi_short) throw DependencyError("short embedding net not trained");
      return PhiMlp(phi_short)->forward(y.to(torch::kFloat32));
    case LabelEncoding::Sinusoidal: return sinusoidal_label_encoding(y);
    case LabelEncoding::GaussianFourier: return gaussian_fourier_encoding(y, fourier_weights);
  }
  throw std::logic_error("bad encoding");
}

ConditionEmbedding EmbeddingNets::embed(const torch::Tensor& y, const torch::Tensor& null_mask) const {
  if (y.dim() != 1 || null_mask.sizes() != y.sizes()) throw std::invalid_argument("embed expects y and null_mask of shape [B]");
  const auto mask = null_mask.to(torch::kBool);
  const auto yd = y.to(torch::kFloat64);
  const auto bad = (yd.lt(0.0) | yd.gt(1.0) | yd.isnan()) & mask.logical_not();
  if (bad.any().item<bool>()) throw std::invalid_argument("labels passed to embed must lie in [0, 1]");
  torch::NoGradGuard ng;
  const auto ysafe = torch::where(mask, torch::zeros_like(yd), yd);
  const auto hs = short_embedding(ysafe);
  torch::Tensor hl;
  if (covariance == CovarianceMode::LabelDependent) {
    if (!phi_long) throw DependencyError("covariance embedding net not trained");
    hl = PhiMlp(phi_long)->forward(ysafe.to(torch::kFloat32));
  } else {
    hl = torch::zeros({y.size(0), long_dim()});
  }
  return embedding_from_long(hs, hl, mask, clamp_B);
}

ConditionEmbedding EmbeddingNets::embed(const std::vector<std::optional<double>>& ys) const {
  std::vector<double> v;
  std::vector<std::int64_t> m;
  for (const auto& y : ys) {
    v.push_back(y.value_or(0.0));
    m.push_back(y ? 0 : 1);
  }
  return embed(torch::tensor(v, torch::kFloat64), torch::tensor(m, torch::kInt64).to(torch::kBool));
}

ConditionEmbedding EmbeddingNets::embed(std::optional<double> y) const {
  return embed(std::vector<std::optional<double>>{y});
}

void EmbeddingNets::save(const fs::path& dir) const {
  fs::create_directories(dir);
  auto meta = [&](std::int64_t out_dim, const nlohmann::json& extra) {
    nlohmann::json j = {{"input_range", {0.0, 1.0}}, {"out_dim", out_dim}, {"clamp_B", clamp_B}, {"seed", seed}};
    j.update(extra);
    return j;
  };
  nlohmann::json top = {{"image_shape", shape},
                        {"encoding", to_string(encoding)},
                        {"covariance", to_string(covariance)},
                        {"clamp_B", clamp_B},
                        {"seed", seed},
                        {"short_embedding_source", "retrained_per_dataset"}};
  if (aux_long) {
    save_checkpoint(*aux_long, dir / "aux_long.pt",
                    {{"input_range", {-1.0, 1.0}}, {"out_dim", 1}, {"feature_dim", aux_long->feature_dim},
                     {"width", aux_long->width}, {"clamp_B", clamp_B}, {"seed", seed}});
    save_checkpoint(*phi_long, dir / "phi_long.pt", meta(phi_long->out_dim, {{"hidden", phi_long->hidden}}));
  }
  if (aux_short) {
    save_checkpoint(*aux_short, dir / "aux_short.pt",
                    {{"input_range", {-1.0, 1.0}}, {"out_dim", 1}, {"feature_dim", aux_short->feature_dim},
                     {"width", aux_short->width}, {"clamp_B", clamp_B}, {"seed", seed}});
    save_checkpoint(*phi_short, dir / "phi_short.pt", meta(phi_short->out_dim, {{"hidden", phi_short->hidden}}));
  }
  if (fourier_weights.defined()) top["fourier_weights"] = to_vector(fourier_weights);
  std::ofstream(dir / "embeddings.json") << top.dump(2) << '\n';
}

EmbeddingNets EmbeddingNets::load(const fs::path& dir) {
  std::ifstream in(dir / "embeddings.json");
  if (!in) throw DependencyError("missing " + (dir / "embeddings.json").string() + " (run train-embeddings first)");
  const auto top = nlohmann::json::parse(in);
  EmbeddingNets e;
  e.shape = top.at("image_shape").get<ImageShape>();
  e.encoding = parse_label_encoding(top.at("encoding"));
  e.covariance = parse_covariance_mode(top.at("covariance"));
  e.clamp_B = top.at("clamp_B");
  e.seed = top.at("seed");
  auto load_aux = [&](const std::string& name) {
    const auto m = read_metadata(dir / name);
    AuxRegressor a(e.shape, m.at("feature_dim").get<std::int64_t>(), m.at("width").get<std::int64_t>());
    load_parameters(*a, dir / name);
    freeze(*a);
    return a;
  };
  auto load_phi = [&](const std::string& name) {
    const auto m = read_metadata(dir / name);
    PhiMlp p(m.at("out_dim").get<std::int64_t>(), m.at("hidden").get<std::int64_t>());
    load_parameters(*p, dir / name);
    freeze(*p);
    return p;
  };
  if (e.covariance == CovarianceMode::LabelDependent) {
    e.aux_long = load_aux("aux_long.pt");
    e.phi_long = load_phi("phi_long.pt");
  }
  if (e.encoding == LabelEncoding::Learned) {
    e.aux_short = load_aux("aux_short.pt");
    e.phi_short = load_phi("phi_short.pt");
  }
  if (top.contains("fourier_weights"))
    e.fourier_weights = torch::tensor(top.at("fourier_weights").get<std::vector<double>>(), torch::kFloat64);
  return e;
}

EmbeddingNets train_embeddings(const torch::Tensor& images, const std::vector<double>& labels,
                               const std::vector<double>& distinct, const EmbeddingTrainOptions& o) {
  check_training_set(images, labels);
  EmbeddingNets e;
  e.shape = {images.size(1), images.size(2), images.size(3)};
  e.encoding = o.encoding;
  e.covariance = o.covariance;
  e.clamp_B = o.clamp_B;
  e.seed = o.seed;
  auto aux_opts = o.aux;
  auto phi_opts = o.phi;
  if (o.covariance == CovarianceMode::LabelDependent) {
    aux_opts.seed = mix64(o.seed ^ stream_id("aux_long"));
    phi_opts.seed = mix64(o.seed ^ stream_id("phi_long"));
    e.aux_long = train_aux_cnn(images, labels, e.long_dim(), aux_opts).net;
    e.phi_long = train_phi_long(e.aux_long, distinct, phi_opts).net;
  }
  if (o.encoding == LabelEncoding::Learned) {
    aux_opts.seed = mix64(o.seed ^ stream_id("aux_short"));
    phi_opts.seed = mix64(o.seed ^ stream_id("phi_short"));
    auto s = train_phi_short(images, labels, aux_opts, phi_opts);
    e.aux_short = s.aux;
    e.phi_short = s.phi;
  } else if (o.encoding == LabelEncoding::GaussianFourier) {
    auto gen = make_generator(mix64(o.seed ^ stream_id("fourier")));
    e.fourier_weights = torch::randn({kShortEmbedDim / 2}, gen, torch::kFloat64) * 16.0;
  }
  return e;
}

}  // namespace ccdm
