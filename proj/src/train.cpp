#include "ccdm/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "ccdm/errors.hpp"

namespace ccdm {

std::string to_string(VicinityMode v) {
  switch (v) {
    case VicinityMode::Hard: return "hard";
    case VicinityMode::Soft: return "soft";
    case VicinityMode::None: return "none";
  }
  return "?";
}

VicinityMode parse_vicinity_mode(const std::string& s) {
  if (s == "hard") return VicinityMode::Hard;
  if (s == "soft") return VicinityMode::Soft;
  if (s == "none") return VicinityMode::None;
  throw std::invalid_argument("unknown vicinity mode '" + s + "' (hard|soft|none)");
}

std::string to_string(LossSpace l) { return l == LossSpace::Native ? "native" : "x0"; }

LossSpace parse_loss_space(const std::string& s) {
  if (s == "native") return LossSpace::Native;
  if (s == "x0") return LossSpace::X0;
  throw std::invalid_argument("unknown loss space '" + s + "' (native|x0)");
}

void TrainConfig::validate(const LabelSpace& ls) const {
  if (steps < 0) throw ConfigError("steps must be >= 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(p_drop >= 0.0 && p_drop <= 1.0)) throw ConfigError("p_drop must lie in [0, 1]");
  if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (retry_limit < 0) throw ConfigError("retry_limit must be >= 0");
  if (checkpoint_every < 0 || log_every < 1) throw ConfigError("checkpoint_every >= 0 and log_every >= 1 required");
  if (vicinity == VicinityMode::Soft && !(ls.kappa > 0.0 && ls.nu > 0.0))
    throw ConfigError("soft vicinity needs kappa > 0 (set m_kappa >= 1)");
}

double VicinalBatch::drop_fraction() const {
  if (target_labels.empty()) return 0.0;
  const auto dropped = std::count_if(target_labels.begin(), target_labels.end(), [](const auto& y) { return !y; });
  return static_cast<double>(dropped) / static_cast<double>(target_labels.size());
}

int VicinalBatch::fallback_count() const { return static_cast<int>(std::count(fallback.begin(), fallback.end(), true)); }

VicinitySampler::VicinitySampler(const LabelSpace& ls) : ls_(ls) {
  if (ls.labels.empty()) throw std::invalid_argument("empty label space");
  for (std::size_t i = 0; i < ls.labels.size(); ++i)
    sorted_.emplace_back(ls.labels[i], static_cast<std::int64_t>(i));
  std::sort(sorted_.begin(), sorted_.end());
}

std::vector<std::int64_t> VicinitySampler::within(double target, double radius) const {
  std::vector<std::int64_t> out;
  auto it = std::lower_bound(sorted_.begin(), sorted_.end(), std::make_pair(target - radius, std::int64_t{-1}));
  // Step back one slot so rounding in target - radius cannot skip a boundary label.
  if (it != sorted_.begin()) --it;
  for (; it != sorted_.end() && it->first <= target + radius + 1e-15; ++it)
    if (hard_weight(target, it->first, radius) > 0.0) out.push_back(it->second);
  return out;
}

std::vector<std::int64_t> VicinitySampler::nearest(double target) const {
  double best = std::numeric_limits<double>::infinity();
  for (const auto& [y, i] : sorted_) best = std::min(best, std::abs(y - target));
  std::vector<std::int64_t> out;
  for (const auto& [y, i] : sorted_)
    if (std::abs(y - target) == best) out.push_back(i);
  return out;
}

VicinalBatch assemble_batch(const Dataset& ds, const LabelSpace& ls, const EmbeddingNets& nets, const TrainConfig& cfg,
                            int T, RandomStream& rng) {
  return assemble_batch(ds, VicinitySampler(ls), nets, cfg, T, rng);
}

VicinalBatch assemble_batch(const Dataset& ds, const VicinitySampler& vs, const EmbeddingNets& nets,
                            const TrainConfig& cfg, int T, RandomStream& rng) {
  const auto& ls = vs.labelspace();
  if (ds.size() == 0 || ls.distinct.empty()) throw std::invalid_argument("empty training set");
  if (static_cast<std::int64_t>(ls.labels.size()) != ds.size())
    throw std::invalid_argument("label space does not match the dataset");
  const bool none = cfg.vicinity == VicinityMode::None;
  const bool soft = cfg.vicinity == VicinityMode::Soft;
  const double radius = none ? 0.0 : soft ? std::sqrt(-std::log(kSoftWeightFloor) / ls.nu) : ls.kappa;
  const double sd = none ? 0.0 : ls.sigma_delta;

  VicinalBatch b;
  std::vector<double> w;
  std::vector<std::int64_t> ts;
  for (int r = 0; r < cfg.batch_size; ++r) {
    const double base = ls.distinct[rng.uniform_int(ls.distinct.size())];
    double target = base;
    std::vector<std::int64_t> cands;
    for (int attempt = 0; attempt <= cfg.retry_limit; ++attempt) {
      const double delta = sd > 0.0 ? rng.normal(0.0, sd) : 0.0;
      if (attempt == 0) b.raw_deltas.push_back(delta);
      target = std::clamp(base + delta, 0.0, 1.0);
      cands = vs.within(target, radius);
      if (!cands.empty()) break;
    }
    bool fell_back = false;
    if (cands.empty()) {
      cands = vs.nearest(target);
      fell_back = true;
    }
    const auto idx = cands[rng.uniform_int(cands.size())];
    const double y_img = ls.labels[static_cast<std::size_t>(idx)];
    const bool drop = rng.uniform() < cfg.p_drop;
    double weight = 1.0;
    if (!drop && soft) weight = soft_weight(target, y_img, ls.nu);
    b.image_index.push_back(idx);
    b.image_labels.push_back(y_img);
    b.target_labels.push_back(drop ? std::nullopt : std::optional<double>(target));
    b.fallback.push_back(fell_back);
    w.push_back(weight);
    ts.push_back(static_cast<std::int64_t>(rng.uniform_int(static_cast<std::uint64_t>(T))) + 1);
  }
  b.images = ds.images.index_select(0, torch::tensor(b.image_index, torch::kInt64));
  b.weights = torch::tensor(w, torch::kFloat64);
  b.timesteps = torch::tensor(ts, torch::kInt64);
  b.cond = nets.embed(b.target_labels);
  return b;
}

NoisedBatch noise_batch(const VicinalBatch& b, const NoiseSchedule& s, RandomStream& rng) {
  const auto& x0 = b.images;
  const auto eps_std = rng.randn(x0.sizes(), x0.scalar_type());
  const auto H = b.cond.H_diag.view(x0.sizes()).to(x0.scalar_type());
  NoisedBatch n;
  n.xt = forward_sample(x0, b.timesteps, H, eps_std, s);
  n.eps = eps_std * H.sqrt();
  return n;
}

torch::Tensor hvidl_from_prediction(const torch::Tensor& pred, PredictionType type, const VicinalBatch& b,
                                    const NoisedBatch& n, const NoiseSchedule& s, LossSpace space) {
  const auto& x0 = b.images;
  const auto H = b.cond.H_diag.view(x0.sizes()).to(pred.scalar_type());
  torch::Tensor residual;
  if (space == LossSpace::X0 || type == PredictionType::X0) {
    const auto x0_hat = type == PredictionType::X0 ? pred : convert_prediction(pred, n.xt, b.timesteps, type, PredictionType::X0, s);
    residual = x0_hat - x0.to(pred.scalar_type());
  } else {
    const auto target = type == PredictionType::Eps
                            ? n.eps.to(pred.scalar_type())
                            : convert_prediction(x0, n.xt, b.timesteps, PredictionType::X0, type, s).to(pred.scalar_type());
    residual = pred - target;
  }
  const auto per_row = (residual.square() / H).flatten(1).sum(1) * b.weights.to(pred.scalar_type());
  const auto finite = torch::isfinite(per_row.detach());
  if (!finite.all().item<bool>()) {
    const auto row = torch::nonzero(finite.logical_not())[0][0].item<std::int64_t>();
    throw NumericalFault("non-finite loss in batch row " + std::to_string(row), static_cast<long>(row));
  }
  return per_row.mean();
}

torch::Tensor hvidl_loss(Denoiser& f, const VicinalBatch& b, const NoiseSchedule& s, RandomStream& rng,
                         LossSpace space) {
  const auto n = noise_batch(b, s, rng);
  const auto pred = f.predict(n.xt, b.timesteps, b.cond);
  return hvidl_from_prediction(pred, f.pred_type(), b, n, s, space);
}

namespace {

nlohmann::json checkpoint_meta(const NoiseSchedule& s, const LabelSpace& ls, const TrainConfig& cfg, int step) {
  return {{"schedule", {{"T", s.T}, {"offset", s.offset}, {"beta_clip", s.beta_clip}}},
          {"labelspace", ls.to_json()},
          {"train",
           {{"step", step},
            {"batch_size", cfg.batch_size},
            {"p_drop", cfg.p_drop},
            {"vicinity", to_string(cfg.vicinity)},
            {"loss_space", to_string(cfg.loss_space)},
            {"lr", cfg.lr},
            {"seed", cfg.seed}}}};
}

}  // namespace

TrainResult train_loop(Denoiser& f, const Dataset& ds, const LabelSpace& ls, const EmbeddingNets& nets,
                       const NoiseSchedule& s, const TrainConfig& cfg, const TrainProgress& progress) {
  cfg.validate(ls);
  TrainResult res;
  if (cfg.steps == 0) return res;
  if (ds.shape() != f.config().shape) throw ConfigError("dataset image shape differs from the denoiser's");
  const VicinitySampler vs(ls);
  torch::optim::Adam opt(f.net()->parameters(), torch::optim::AdamOptions(cfg.lr));
  std::ofstream trace_out;
  if (!cfg.out_dir.empty()) {
    std::filesystem::create_directories(cfg.out_dir);
    trace_out.open(cfg.out_dir / "loss.ndjson");
  }
  f.set_trained_p_drop(cfg.p_drop);
  f.net()->train();
  for (int step = 1; step <= cfg.steps; ++step) {
    torch::Tensor loss;
    VicinalBatch batch;
    for (int attempt = 0;; ++attempt) {
      RandomStream brng(cfg.seed, stream_id("batch", static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(attempt)));
      RandomStream nrng(cfg.seed, stream_id("noise", static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(attempt)));
      batch = assemble_batch(ds, vs, nets, cfg, s.T, brng);
      try {
        loss = hvidl_loss(f, batch, s, nrng, cfg.loss_space);
        break;
      } catch (const NumericalFault& e) {
        if (attempt >= 1) throw NumericalFault(std::string(e.what()) + " at step " + std::to_string(step) + " (after retry)", e.row());
        ++res.retries;
      }
    }
    opt.zero_grad();
    loss.backward();
    opt.step();
    res.fallback_total += batch.fallback_count();
    if (step % cfg.log_every == 0 || step == cfg.steps) {
      LossRecord rec{step, loss.item<double>(), batch.drop_fraction(), batch.fallback_count()};
      res.trace.push_back(rec);
      if (trace_out) {
        trace_out << nlohmann::json{{"step", rec.step},
                                    {"loss", rec.loss},
                                    {"drop_fraction", rec.drop_fraction},
                                    {"fallback_count", rec.fallback_count}}
                         .dump()
                  << '\n';
        trace_out.flush();
      }
      if (progress) progress(rec);
    }
    if (!cfg.out_dir.empty() && cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step != cfg.steps)
      f.save(cfg.out_dir / ("denoiser_step" + std::to_string(step) + ".pt"), checkpoint_meta(s, ls, cfg, step));
  }
  f.net()->eval();
  if (!cfg.out_dir.empty()) f.save(cfg.out_dir / "denoiser.pt", checkpoint_meta(s, ls, cfg, cfg.steps));
  return res;
}

}  // namespace ccdm
