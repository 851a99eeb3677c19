#include "ccdm/sampler.hpp"

#include <bit>
#include <charconv>
#include <fstream>

#include "ccdm/errors.hpp"
#include "ccdm/image_io.hpp"
#include "ccdm/rng.hpp"

namespace ccdm {

std::string to_string(SamplerKind k) { return k == SamplerKind::DDIM ? "ddim" : "ddpm"; }

SamplerKind parse_sampler_kind(const std::string& s) {
  if (s == "ddim") return SamplerKind::DDIM;
  if (s == "ddpm") return SamplerKind::DDPM;
  throw std::invalid_argument("unknown sampler '" + s + "' (ddim|ddpm)");
}

void SampleRequest::validate(int T) const {
  if (y_targets.empty()) throw ConfigError("no target labels");
  for (double y : y_targets)
    if (!(y >= 0.0 && y <= 1.0)) throw ConfigError("target labels must be normalized to [0, 1]");
  if (n_per_label < 1) throw ConfigError("n_per_label must be >= 1");
  if (T_prime < 1 || T_prime > T) throw ConfigError("T' must lie in [1, T]");
  if (!std::isfinite(gamma)) throw ConfigError("gamma must be finite");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
}

PredictorView view_of(Denoiser& f) {
  PredictorView v;
  v.pred_type = f.pred_type();
  v.has_null_branch = !(f.trained_p_drop() && *f.trained_p_drop() == 0.0);
  v.fn = [&f](const torch::Tensor& xt, const torch::Tensor& t, const ConditionEmbedding& c) {
    return f.predict(xt, t, c);
  };
  return v;
}

torch::Tensor initial_noise(const torch::Tensor& H_row, RandomStream& rng) {
  return rng.randn(H_row.sizes(), H_row.scalar_type()) * H_row.sqrt();
}

RandomStream sample_stream(std::uint64_t seed, double y, std::int64_t image_index) {
  return RandomStream(seed, stream_id("sample", std::bit_cast<std::uint64_t>(y), static_cast<std::uint64_t>(image_index)));
}

namespace {

torch::Tensor to_x0(const PredictorView& f, const torch::Tensor& xt, const torch::Tensor& t,
                    const ConditionEmbedding& c, const NoiseSchedule& s) {
  auto out = f.fn(xt, t, c);
  if (f.pred_type == PredictionType::X0) return out;
  return convert_prediction(out, xt, t, f.pred_type, PredictionType::X0, s);
}

}  // namespace

SampleResult sample(const PredictorView& f, const EmbeddingNets& nets, const NoiseSchedule& s,
                    const SampleRequest& req) {
  req.validate(s.T);
  if (!f.has_null_branch && req.gamma != 1.0)
    throw ConfigError("model was trained with p_drop = 0, so guidance needs gamma = 1");
  torch::NoGradGuard ng;
  const auto& shape = nets.shape;
  const auto steps = sampling_timesteps(s, req.T_prime);
  const auto cond_all = nets.embed(torch::tensor(req.y_targets, torch::kFloat64),
                                   torch::zeros({static_cast<std::int64_t>(req.y_targets.size())}, torch::kBool));
  SampleResult res;
  std::vector<torch::Tensor> chunks;
  for (std::size_t li = 0; li < req.y_targets.size(); ++li) {
    const double y = req.y_targets[li];
    const auto one = torch::tensor({static_cast<std::int64_t>(li)}, torch::kInt64);
    const auto cond1 = cond_all.index(one);
    for (int start = 0; start < req.n_per_label; start += req.batch_size) {
      const int n = std::min(req.batch_size, req.n_per_label - start);
      const auto rep = torch::zeros({n}, torch::kInt64);
      const auto cond = cond1.index(rep);
      const auto null_cond = embedding_from_long(torch::zeros_like(cond.h_short), torch::zeros_like(cond.h_long),
                                                 torch::ones({n}, torch::kBool));
      const auto H = cond.H_image(shape);
      std::vector<RandomStream> rngs;
      std::vector<torch::Tensor> x_rows;
      for (int k = 0; k < n; ++k) {
        rngs.push_back(sample_stream(req.seed, y, start + k));
        x_rows.push_back(initial_noise(H[k], rngs.back()));
      }
      auto x = torch::stack(x_rows);
      for (std::size_t i = 0; i + 1 < steps.size(); ++i) {
        const int t = steps[i], prev = steps[i + 1];
        const auto tt = torch::full({n}, t, torch::kInt64);
        const auto x0_c = to_x0(f, x, tt, cond, s);
        const auto x0_u = to_x0(f, x, tt, null_cond, s);
        const auto x0_tilde = cfg_combine(x0_c, x0_u, req.gamma);
        if (req.sampler == SamplerKind::DDIM) {
          x = ddim_step(x, x0_tilde, t, prev, s);
        } else {
          std::vector<torch::Tensor> z;
          if (prev > 0)
            for (auto& r : rngs) z.push_back(r.randn(shape.dims(), x.scalar_type()));
          const auto noise = prev > 0 ? torch::stack(z) : torch::zeros_like(x);
          x = ddpm_step(x, x0_tilde, t, prev, H, noise, s);
        }
      }
      x = x.clamp(-1.0, 1.0);
      const auto bad = torch::isfinite(x).flatten(1).all(1).logical_not();
      if (bad.any().item<bool>()) throw NumericalFault("non-finite sample for label index " + std::to_string(li));
      chunks.push_back(x);
      for (int k = 0; k < n; ++k) {
        res.labels.push_back(y);
        res.label_index.push_back(static_cast<std::int64_t>(li));
        res.image_index.push_back(start + k);
      }
    }
  }
  res.images = torch::cat(chunks);
  return res;
}

SampleResult sample(Denoiser& f, const EmbeddingNets& nets, const NoiseSchedule& s, const SampleRequest& req) {
  f.net()->eval();
  return sample(view_of(f), nets, s, req);
}

SampleResult sample_ddpm(const PredictorView& f, const EmbeddingNets& nets, const NoiseSchedule& s, SampleRequest req) {
  req.sampler = SamplerKind::DDPM;
  return sample(f, nets, s, req);
}

std::string sample_filename(double raw_label, std::int64_t index) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), raw_label);
  (void)ec;
  return std::string(buf, end) + "_" + std::to_string(index) + ".png";
}

void write_samples(const SampleResult& r, const LabelSpace& ls, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream manifest(dir / "labels.csv");
  manifest << "filename,label\n";
  manifest.precision(17);
  for (std::int64_t i = 0; i < r.images.size(0); ++i) {
    const double raw = ls.denormalize(r.labels[static_cast<std::size_t>(i)]);
    const auto name = sample_filename(raw, r.image_index[static_cast<std::size_t>(i)]);
    write_png(dir / name, tensor_to_image(r.images[i]));
    manifest << name << ',' << raw << '\n';
  }
}

}  // namespace ccdm
