// Acceptance run: fourteen numbered checks, one PASS/FAIL line each.
// The toy-study checks (9-11, 13) train small models on the rotor dataset and
// cache them under the work directory keyed by their settings.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "ccdm/data.hpp"
#include "ccdm/denoiser.hpp"
#include "ccdm/diffmath.hpp"
#include "ccdm/distill.hpp"
#include "ccdm/embednet.hpp"
#include "ccdm/labelspace.hpp"
#include "ccdm/metrics.hpp"
#include "ccdm/rng.hpp"
#include "ccdm/sampler.hpp"
#include "ccdm/schedule.hpp"
#include "ccdm/torch_util.hpp"
#include "ccdm/train.hpp"

namespace fs = std::filesystem;
using namespace ccdm;
using json = nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os << std::setprecision(prec) << v;
  return os.str();
}

struct Outcome {
  int id;
  std::string name;
  bool pass;
  std::string detail;
};

std::vector<Outcome> g_outcomes;

void report(int id, const std::string& name, bool pass, const std::string& detail) {
  g_outcomes.push_back({id, name, pass, detail});
  std::cout << (pass ? "[PASS] " : "[FAIL] ") << std::setw(2) << id << "  " << name << ": " << detail << std::endl;
}

void note(const std::string& s) { std::cerr << "  .. " << s << std::endl; }

std::string fnv_hex(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

torch::Tensor uniform(torch::IntArrayRef shape, double lo, double hi, torch::Generator& g) {
  return torch::rand(shape, g, torch::kFloat64) * (hi - lo) + lo;
}

// Untrained label-dependent embedding nets; enough for the sampler checks.
EmbeddingNets random_nets(ImageShape shape, std::uint64_t seed) {
  EmbeddingNets e;
  e.shape = shape;
  e.encoding = LabelEncoding::Sinusoidal;
  e.covariance = CovarianceMode::LabelDependent;
  e.seed = seed;
  torch::manual_seed(seed);
  e.phi_long = PhiMlp(shape.numel());
  return e;
}

DenoiserConfig small_unet(ImageShape shape, PredictionType p) {
  DenoiserConfig c;
  c.shape = shape;
  c.base_channels = 8;
  c.channel_mults = {1, 2};
  c.res_blocks = 1;
  c.groups = 4;
  c.pred_type = p;
  return c;
}

void perturb_head(Denoiser& f, std::uint64_t seed) {
  torch::NoGradGuard ng;
  auto g = make_generator(seed);
  for (auto& p : f.net()->conv_out->parameters()) p.copy_(torch::randn(p.sizes(), g, p.scalar_type()) * 0.1);
}

// ---------------------------------------------------------------------------
// 1-8: exact properties

void check_posterior_oracle() {
  const auto t0 = Clock::now();
  const auto s = make_cosine_schedule(1000);
  auto g = make_generator(101);
  double worst = 0.0;
  for (int c = 0; c < 200; ++c) {
    const int d = 1 + c % 8;
    const int t = 1 + static_cast<int>(torch::randint(1000, {1}, g).item<std::int64_t>());
    const auto H = uniform({1, d}, 0.05, 2.0, g);
    const auto x0 = torch::randn({1, d}, g, torch::kFloat64);
    const auto xt = torch::randn({1, d}, g, torch::kFloat64);
    const auto m = bayes_posterior_oracle(x0, xt, t, H, s);

    // closed forms straight from the cumulative products
    const double ab = s.alpha_bar(t), abp = s.alpha_bar(t - 1), a = ab / abp, b = 1.0 - a;
    const auto mean = std::sqrt(abp) * b / (1.0 - ab) * x0 + std::sqrt(a) * (1.0 - abp) / (1.0 - ab) * xt;
    const auto var = (1.0 - abp) / (1.0 - ab) * b * H;
    worst = std::max({worst, (m.mean - mean).abs().max().item<double>(), (m.var - var).abs().max().item<double>()});
  }
  const double sec = seconds_since(t0);
  report(1, "posterior oracle vs closed form", worst <= 1e-10 && sec < 5.0,
         "200 cases d=1..8, max abs err " + fmt(worst, 3) + " (<= 1e-10), " + fmt(sec, 3) + " s (< 5)");
}

void check_forward_marginals() {
  const auto t0 = Clock::now();
  const int T = 10, n = 100000;
  const auto s = make_cosine_schedule(T);
  const auto x0 = torch::tensor({0.8, -0.4, 0.3, -0.9}, torch::kFloat64).unsqueeze(0);
  const auto H = torch::tensor({0.3, 0.8, 1.0, 1.7}, torch::kFloat64).unsqueeze(0);
  RandomStream rng(2024, stream_id("forward_chains"));
  auto x = x0.expand({n, 4}).clone();
  double worst_mean = 0.0, worst_var = 0.0;
  for (int t = 1; t <= T; ++t) {
    x = forward_step(x, t, H.expand({n, 4}), rng.randn({n, 4}, torch::kFloat64), s);
    const double ab = s.alpha_bar(t);
    const auto mu = std::sqrt(ab) * x0[0];
    const auto var = (1.0 - ab) * H[0];
    const auto emp_mu = x.mean(0), emp_var = x.var(0, false);
    const auto scale = torch::maximum(mu.abs(), var.sqrt());
    worst_mean = std::max(worst_mean, ((emp_mu - mu).abs() / scale).max().item<double>());
    worst_var = std::max(worst_var, ((emp_var / var) - 1.0).abs().max().item<double>());
  }
  const double sec = seconds_since(t0);
  report(2, "forward composition vs marginal", worst_mean <= 0.01 && worst_var <= 0.03 && sec < 60.0,
         "d=4 T=10 1e5 chains, mean err " + fmt(100 * worst_mean, 3) + "% of max(|mean|,std) (<= 1%), var err " +
             fmt(100 * worst_var, 3) + "% (<= 3%), " + fmt(sec, 3) + " s (< 60)");
}

struct LossSetup {
  Dataset ds;
  LabelSpace ls;
  EmbeddingNets nets;
  NoiseSchedule s;
};

LossSetup loss_setup() {
  RotorOptions o;
  o.n_angles = 6;
  o.per_angle = 3;
  o.size = 8;
  o.seed = 11;
  LossSetup r{make_rotor_dataset(o), {}, {}, make_cosine_schedule(1000)};
  r.ls = build_labelspace(r.ds.raw_labels, 1);
  r.nets = random_nets(r.ds.shape(), 5);
  return r;
}

void check_hvidl_reductions() {
  auto st = loss_setup();
  TrainConfig tc;
  tc.vicinity = VicinityMode::Hard;
  tc.p_drop = 0.1;
  tc.batch_size = 16;
  RandomStream rng(31, 31);
  auto b = assemble_batch(st.ds, st.ls, st.nets, tc, 1000, rng);
  b.images = b.images.to(torch::kFloat64);
  const auto n = noise_batch(b, st.s, rng);

  // exact prediction, label-dependent H and vicinal weights as drawn
  const double zero = hvidl_from_prediction(b.images, PredictionType::X0, b, n, st.s).item<double>();

  auto g = make_generator(32);
  const auto pred = b.images + 0.25 * torch::randn(b.images.sizes(), g, torch::kFloat64);
  auto bi = b;
  bi.cond.H_diag = torch::ones_like(b.cond.H_diag);
  bi.weights = torch::ones_like(b.weights);
  const double loss = hvidl_from_prediction(pred, PredictionType::X0, bi, n, st.s).item<double>();
  const double mse = (pred - b.images).square().flatten(1).sum(1).mean().item<double>();
  const double err = std::abs(loss - mse);
  report(3, "HVIDL reductions", err <= 1e-10 && zero == 0.0,
         "H=I,w=1 vs x0-MSE |diff| " + fmt(err, 3) + " (<= 1e-10); exact prediction loss " + fmt(zero) + " (== 0)");
}

void check_loss_gradient() {
  auto st = loss_setup();
  Denoiser f(small_unet(st.ds.shape(), PredictionType::X0), 1000, 4);
  f.net()->to(torch::kFloat64);
  perturb_head(f, 41);
  f.net()->eval();
  TrainConfig tc;
  tc.vicinity = VicinityMode::Hard;
  tc.p_drop = 0.2;
  tc.batch_size = 6;
  RandomStream rng(42, 42);
  auto b = assemble_batch(st.ds, st.ls, st.nets, tc, 1000, rng);
  b.images = b.images.to(torch::kFloat64);
  auto loss = [&] {
    RandomStream r(43, 43);
    return hvidl_loss(f, b, st.s, r);
  };
  f.net()->zero_grad();
  loss().backward();
  torch::NoGradGuard ng;
  int probes = 0, skipped = 0;
  double worst = 0.0;
  for (auto& kv : f.net()->named_parameters()) {
    auto p = kv.value();
    if (!p.grad().defined()) continue;
    auto flat = p.view(-1);
    for (int k = 0; k < 2; ++k) {
      const auto i = (probes * 104729 + k * 7919) % flat.numel();
      const double an = p.grad().view(-1)[i].item<double>();
      const double orig = flat[i].item<double>(), h = 1e-6;
      flat[i].fill_(orig + h);
      const double up = loss().item<double>();
      flat[i].fill_(orig - h);
      const double dn = loss().item<double>();
      flat[i].fill_(orig);
      const double fd = (up - dn) / (2 * h);
      // relative error, with an absolute floor for entries that are numerically zero
      const double denom = std::max(std::abs(an), std::abs(fd));
      if (denom < 1e-8) {
        ++skipped;
        continue;
      }
      worst = std::max(worst, std::abs(fd - an) / denom);
      ++probes;
    }
  }
  report(4, "HVIDL gradient vs central differences", probes >= 20 && worst <= 1e-3,
         std::to_string(probes) + " probes (" + std::to_string(skipped) + " zero-gradient skipped), max rel err " +
             fmt(worst, 3) + " (<= 1e-3)");
}

PredictorView constant_predictor(double c) {
  PredictorView v;
  v.fn = [c](const torch::Tensor& xt, const torch::Tensor&, const ConditionEmbedding&) {
    return torch::full_like(xt, c);
  };
  return v;
}

void check_ddim_constant() {
  const ImageShape shape{1, 8, 8};
  const auto nets = random_nets(shape, 6);
  const auto s = make_cosine_schedule(1000);
  int runs = 0, exact = 0;
  for (int T_prime : {5, 50, 250}) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      SampleRequest r;
      r.y_targets = {0.1, 0.55, 0.9};
      r.n_per_label = 3;
      r.T_prime = T_prime;
      r.seed = 500 + seed;
      const double c = -0.6 + 0.13 * static_cast<double>(seed);
      const auto out = sample(constant_predictor(c), nets, s, r);
      ++runs;
      if (torch::equal(out.images, torch::full_like(out.images, c))) ++exact;
    }
  }
  report(5, "DDIM reproduces a constant predictor", exact == runs,
         std::to_string(exact) + "/" + std::to_string(runs) + " runs bit-exact (10 seeds x T'={5,50,250})");
}

// Conditional-only DDIM that never evaluates the null branch.
torch::Tensor cond_only_ddim(Denoiser& f, const EmbeddingNets& nets, const NoiseSchedule& s, double y, int n,
                             int T_prime, std::uint64_t seed) {
  torch::NoGradGuard ng;
  f.net()->eval();
  const auto cond = nets.embed(y).index(torch::zeros({n}, torch::kInt64));
  const auto H = cond.H_image(nets.shape);
  std::vector<torch::Tensor> rows;
  for (int k = 0; k < n; ++k) {
    auto r = sample_stream(seed, y, k);
    rows.push_back(initial_noise(H[k], r));
  }
  auto x = torch::stack(rows);
  const auto steps = sampling_timesteps(s, T_prime);
  for (std::size_t i = 0; i + 1 < steps.size(); ++i) {
    auto pred = f.predict(x, torch::full({n}, steps[i], torch::kInt64), cond);
    const auto x0 = convert_prediction(pred, x, steps[i], f.pred_type(), PredictionType::X0, s);
    x = ddim_step(x, x0, steps[i], steps[i + 1], s);
  }
  return x.clamp(-1.0, 1.0);
}

void check_cfg_identity() {
  const ImageShape shape{1, 8, 8};
  const auto nets = random_nets(shape, 7);
  const auto s = make_cosine_schedule(1000);
  int runs = 0, same = 0;
  for (auto pt : {PredictionType::X0, PredictionType::Eps}) {
    Denoiser f(small_unet(shape, pt), 1000, 8);
    perturb_head(f, 9);
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const double y = 0.15 + 0.17 * static_cast<double>(seed);
      SampleRequest r;
      r.y_targets = {y};
      r.n_per_label = 4;
      r.T_prime = 20;
      r.gamma = 1.0;
      r.seed = 900 + seed;
      const auto a = sample(f, nets, s, r);
      const auto b = cond_only_ddim(f, nets, s, y, 4, 20, 900 + seed);
      ++runs;
      if (torch::equal(a.images, b)) ++same;
    }
  }
  report(6, "CFG at gamma=1 equals conditional-only sampling", same == runs,
         std::to_string(same) + "/" + std::to_string(runs) + " runs bit-identical (x0 and eps nets, 5 seeds each)");
}

void check_initial_noise() {
  const ImageShape shape{1, 8, 8};
  const auto nets = random_nets(shape, 12);
  const int n = 100000;
  double worst = 0.0;
  for (double y : {0.1, 0.5, 0.9}) {
    const auto H = nets.embed(y).H_image(shape)[0].to(torch::kFloat64);
    auto acc = torch::zeros_like(H);
    for (int i = 0; i < n; ++i) {
      auto r = sample_stream(77, y, i);
      acc += initial_noise(H, r).to(torch::kFloat64).square();
    }
    worst = std::max(worst, (acc / n / H - 1.0).abs().max().item<double>());
  }
  report(7, "initial noise covariance", worst <= 0.03,
         "1e5 draws per label, 3 labels x 64 coords, max |var/H - 1| " + fmt(100 * worst, 3) + "% (<= 3%)");
}

void check_rules_of_thumb() {
  std::vector<double> grid;
  for (int i = 0; i < 100; ++i) grid.push_back(0.005 + 0.01 * i);
  const double sd = kde_bandwidth(grid);
  const std::vector<double> distinct{0.0, 0.00632};
  const auto v = vicinity_params(distinct, 5);
  const bool ok = std::abs(sd - 0.122) <= 1e-3 && v.kappa_base == 0.00632 && std::abs(v.kappa - 0.0316) <= 1e-15 &&
                  std::abs(v.nu - 1.0 / (0.0316 * 0.0316)) <= 1e-9;
  report(8, "rule-of-thumb bandwidth and vicinity", ok,
         "sigma_delta " + fmt(sd, 6) + " (0.122 +- 1e-3); kappa_base " + fmt(v.kappa_base, 6) + " x 5 = " +
             fmt(v.kappa, 17) + " (0.0316)");
}

// ---------------------------------------------------------------------------
// Toy study on the rotor dataset

struct ToySettings {
  int T = 1000;
  int K = 3000;
  int batch = 32;
  double lr = 5e-4;
  int base = 16;
  std::vector<std::int64_t> mults{1, 2, 2};
  int n_centers = 20;
  int n_per_center = 20;
  int T_prime = 50;
  double gamma = 1.5;

  json to_json() const {
    return {{"T", T}, {"K", K}, {"batch", batch}, {"lr", lr}, {"base", base}, {"mults", mults}};
  }
};

struct Toy {
  fs::path dir;
  ToySettings cfg;
  Dataset ds;
  LabelSpace ls;
  EmbeddingNets nets;
  Oracles oracles;
  NoiseSchedule s;
  EvalProtocol protocol;
  std::map<std::string, EvalReport> scores;
  std::map<std::string, double> sample_seconds;
};

RotorOptions toy_rotor() {
  RotorOptions o;
  o.n_angles = 45;
  o.per_angle = 10;
  o.size = 32;
  o.seed = 7;
  return o;
}

std::unique_ptr<Toy> make_toy(const fs::path& work) {
  auto toy = std::make_unique<Toy>();
  toy->dir = work / "toy";
  fs::create_directories(toy->dir);
  toy->ds = make_rotor_dataset(toy_rotor());
  toy->ls = build_labelspace(toy->ds.raw_labels, 1);
  toy->s = make_cosine_schedule(toy->cfg.T);

  const auto emb_dir = toy->dir / "embeddings";
  if (fs::exists(emb_dir / "embeddings.json")) {
    toy->nets = EmbeddingNets::load(emb_dir);
  } else {
    const auto t0 = Clock::now();
    EmbeddingTrainOptions eo;
    eo.seed = 0;
    toy->nets = train_embeddings(toy->ds.images, toy->ls.labels, toy->ls.distinct, eo);
    toy->nets.save(emb_dir);
    note("embeddings trained in " + fmt(seconds_since(t0), 3) + " s");
  }

  const auto or_dir = toy->dir / "oracles";
  if (fs::exists(or_dir / "oracle_regressor.pt")) {
    toy->oracles = Oracles::load(or_dir);
  } else {
    const auto t0 = Clock::now();
    toy->oracles = train_oracles(toy->ds, toy->ls, OracleOptions{});
    toy->oracles.save(or_dir);
    note("oracles trained in " + fmt(seconds_since(t0), 3) + " s (train MAE " + fmt(toy->oracles.regressor_train_mae) +
         ", acc " + fmt(toy->oracles.classifier_train_acc) + ")");
  }

  toy->protocol.centers = EvalProtocol::even_centers(toy->cfg.n_centers);
  toy->protocol.n_per_center = toy->cfg.n_per_center;
  toy->protocol.r_sfid = 0.5 / (toy->cfg.n_centers - 1);
  return toy;
}

std::unique_ptr<Denoiser> toy_model(Toy& toy, VicinityMode v, PredictionType p, std::uint64_t seed) {
  const auto& c = toy.cfg;
  json key = c.to_json();
  key["vicinity"] = to_string(v);
  key["pred"] = to_string(p);
  key["seed"] = seed;
  const std::string name = to_string(v) + "-" + to_string(p) + "-s" + std::to_string(seed);
  const auto path = toy.dir / "models" / (name + "-" + fnv_hex(key.dump()).substr(0, 10) + ".pt");
  if (fs::exists(path)) return std::make_unique<Denoiser>(Denoiser::load(path));

  DenoiserConfig m;
  m.shape = toy.ds.shape();
  m.base_channels = c.base;
  m.channel_mults = c.mults;
  m.res_blocks = 1;
  m.groups = 8;
  m.pred_type = p;
  auto f = std::make_unique<Denoiser>(m, c.T, mix64(seed ^ stream_id("init")));
  TrainConfig tc;
  tc.steps = c.K;
  tc.batch_size = c.batch;
  tc.lr = c.lr;
  tc.vicinity = v;
  tc.seed = seed;
  tc.log_every = 10;
  const auto t0 = Clock::now();
  const auto r = train_loop(*f, toy.ds, toy.ls, toy.nets, toy.s, tc);
  double tail = 0.0;
  const std::size_t k = std::min<std::size_t>(20, r.trace.size());
  for (std::size_t i = r.trace.size() - k; i < r.trace.size(); ++i) tail += r.trace[i].loss / k;
  note("trained " + name + " in " + fmt(seconds_since(t0), 4) + " s, final loss ~" + fmt(tail));
  fs::create_directories(path.parent_path());
  f->save(path, {{"acceptance_key", key}});
  return f;
}

const EvalReport& toy_score(Toy& toy, const std::string& name, Denoiser& f, double gamma, int T_prime,
                            std::uint64_t seed) {
  const std::string key = name + "@" + fmt(gamma) + "/" + std::to_string(T_prime);
  if (auto it = toy.scores.find(key); it != toy.scores.end()) return it->second;
  SampleRequest r;
  r.y_targets = toy.protocol.centers;
  r.n_per_label = toy.protocol.n_per_center;
  r.T_prime = T_prime;
  r.gamma = gamma;
  r.seed = seed;
  const auto t0 = Clock::now();
  const auto res = sample(f, toy.nets, toy.s, r);
  toy.sample_seconds[key] = seconds_since(t0);
  auto rep = evaluate(toy.protocol, toy.oracles, toy.ls, toy.ds.images, toy.ls.labels, res.images, res.labels);
  note(key + ": label score " + fmt(rep.label_score.mean) + ", diversity " +
       (rep.diversity ? fmt(rep.diversity->mean) : std::string("n/a")) + ", sfid " + fmt(rep.sfid.mean) + " (" +
       fmt(seconds_since(t0), 3) + " s)");
  return toy.scores.emplace(key, std::move(rep)).first->second;
}

double diversity_of(const EvalReport& r) { return r.diversity ? r.diversity->mean : 0.0; }

const std::vector<std::uint64_t> kSeeds{0, 1, 2};

std::string join(const std::vector<double>& v, int prec = 4) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "/" : "") + fmt(v[i], prec);
  return s;
}

void check_gamma_direction(Toy& toy) {
  const std::vector<double> gammas{1.0, 1.5, 3.0};
  int inv_ls = 0, inv_div = 0;
  std::string detail;
  for (auto seed : kSeeds) {
    auto f = toy_model(toy, VicinityMode::Hard, PredictionType::X0, seed);
    std::vector<double> ls, dv;
    for (double g : gammas) {
      const auto& r = toy_score(toy, "hard-x0-s" + std::to_string(seed), *f, g, toy.cfg.T_prime, 1000 + seed);
      ls.push_back(r.label_score.mean);
      dv.push_back(diversity_of(r));
    }
    for (std::size_t i = 0; i < gammas.size(); ++i)
      for (std::size_t j = i + 1; j < gammas.size(); ++j) {
        if (ls[j] > ls[i]) ++inv_ls;
        if (dv[j] > dv[i]) ++inv_div;
      }
    detail += "s" + std::to_string(seed) + " LS " + join(ls) + " Div " + join(dv) + "; ";
  }
  report(9, "guidance scale trades label score for diversity", inv_ls <= 1 && inv_div <= 1,
         detail + "inversions LS " + std::to_string(inv_ls) + ", Div " + std::to_string(inv_div) + " (<= 1 each)");
}

void check_vicinity_benefit(Toy& toy) {
  std::vector<double> hard, none;
  for (auto seed : kSeeds) {
    auto fh = toy_model(toy, VicinityMode::Hard, PredictionType::X0, seed);
    hard.push_back(toy_score(toy, "hard-x0-s" + std::to_string(seed), *fh, toy.cfg.gamma, toy.cfg.T_prime, 1000 + seed)
                       .label_score.mean);
    auto fn = toy_model(toy, VicinityMode::None, PredictionType::X0, seed);
    none.push_back(toy_score(toy, "none-x0-s" + std::to_string(seed), *fn, toy.cfg.gamma, toy.cfg.T_prime, 1000 + seed)
                       .label_score.mean);
  }
  const double mh = torch::tensor(hard).mean().item<double>(), mn = torch::tensor(none).mean().item<double>();
  report(10, "hard vicinity vs none", mh <= mn,
         "mean label score HARD " + fmt(mh) + " (" + join(hard) + ") vs NONE " + fmt(mn) + " (" + join(none) + ")");
}

void check_eps_degradation(Toy& toy) {
  std::vector<double> x0, eps;
  for (auto seed : kSeeds) {
    auto fx = toy_model(toy, VicinityMode::Hard, PredictionType::X0, seed);
    x0.push_back(toy_score(toy, "hard-x0-s" + std::to_string(seed), *fx, toy.cfg.gamma, toy.cfg.T_prime, 1000 + seed)
                     .label_score.mean);
    auto fe = toy_model(toy, VicinityMode::Hard, PredictionType::Eps, seed);
    eps.push_back(toy_score(toy, "hard-eps-s" + std::to_string(seed), *fe, toy.cfg.gamma, toy.cfg.T_prime, 1000 + seed)
                      .label_score.mean);
  }
  const double mx = torch::tensor(x0).mean().item<double>(), me = torch::tensor(eps).mean().item<double>();
  report(11, "eps-prediction under DDIM-50 vs x0-prediction", me >= mx,
         "mean label score eps " + fmt(me) + " (" + join(eps) + ") vs x0 " + fmt(mx) + " (" + join(x0) + ")");
}

void check_metric_identities(Toy& toy) {
  const auto& ds = toy.ds;
  const auto sf = sfid(toy.protocol, toy.oracles, ds.images, toy.ls.labels, ds.images, toy.ls.labels);
  double worst_sfid = 0.0;
  for (const auto& v : sf.per_center)
    if (v) worst_sfid = std::max(worst_sfid, std::abs(*v));

  const std::int64_t K = ds.num_classes();
  std::vector<std::int64_t> cls, grp;
  for (std::int64_t g = 0; g < 3; ++g)
    for (std::int64_t k = 0; k < K; ++k)
      for (int r = 0; r < 5; ++r) {
        cls.push_back(k);
        grp.push_back(g);
      }
  const auto div = diversity_from_predictions(cls, grp, 3, K);
  const double div_err = std::abs(div.stats.mean - std::log(static_cast<double>(K)));

  const auto ls_exact = label_score_from(toy.ls.labels, toy.ls.labels, toy.ls);

  const auto feats = toy.oracles.features(ds.images).to(torch::kFloat64);
  const auto half = feats.size(0) / 2;
  const auto a = feats.slice(0, 0, half), b = feats.slice(0, half);
  const double ab = fid(a, b), ba = fid(b, a);
  const double sym = std::abs(ab - ba);

  const bool ok = worst_sfid <= 1e-6 && div_err <= 1e-12 && ls_exact.mean == 0.0 && sym <= 1e-8;
  report(12, "metric identities", ok,
         "sfid(real,real) max " + fmt(worst_sfid, 3) + " over " + std::to_string(sf.per_center.size() - sf.skipped) +
             " windows (<= 1e-6); diversity uniform - ln" + std::to_string(K) + " = " + fmt(div_err, 3) +
             "; exact label score " + fmt(ls_exact.mean) + "; |fid(a,b)-fid(b,a)| " + fmt(sym, 3) + " (<= 1e-8)");
}

void check_distillation(Toy& toy) {
  auto teacher = toy_model(toy, VicinityMode::Hard, PredictionType::X0, 0);

  DistillConfig dc;
  dc.steps = 800;
  dc.batch_size = 32;
  dc.g_channels = 32;
  dc.d_channels = 32;
  dc.lr_g = 2e-4;
  dc.lr_d = 2e-4;
  dc.lr_fake = 2e-4;
  dc.m_kappa = 1;
  dc.seed = 5;
  dc.monitor_every = 0;
  json key = toy.cfg.to_json();
  key["distill"] = {{"steps", dc.steps}, {"batch", dc.batch_size}, {"ch", dc.g_channels}, {"lr", dc.lr_g},
                    {"m_kappa", dc.m_kappa}, {"seed", dc.seed}};
  const auto gpath = toy.dir / "models" / ("generator-" + fnv_hex(key.dump()).substr(0, 10) + ".pt");
  Generator G{nullptr};
  if (fs::exists(gpath)) {
    G = load_generator(gpath);
  } else {
    const auto t0 = Clock::now();
    DistillState st(*teacher, toy.nets, dc);
    const auto recs = distill_loop(st, toy.ds, toy.ls, toy.s);
    note("distilled " + std::to_string(dc.steps) + " steps in " + fmt(seconds_since(t0), 4) + " s, last dm " +
         fmt(recs.empty() ? 0.0 : recs.back().g.dm) + " gan " + fmt(recs.empty() ? 0.0 : recs.back().g.gan));
    G = st.G;
    fs::create_directories(gpath.parent_path());
    save_generator(G, dc, gpath);
  }
  G->eval();

  // one-step generator: full 10^4 images
  const int n_total = 10000;
  const auto& centers = toy.protocol.centers;
  const int per = n_total / static_cast<int>(centers.size());
  auto t0 = Clock::now();
  const auto big = generate(G, toy.nets, centers, per, 99);
  const double g_sec = seconds_since(t0);

  // DDIM-250 on one eval set, extrapolated per image
  const auto& slow = toy_score(toy, "hard-x0-s0", *teacher, toy.cfg.gamma, 250, 1000);
  const double ddim_subset = toy.sample_seconds.at("hard-x0-s0@" + fmt(toy.cfg.gamma) + "/250");
  const double n_subset = static_cast<double>(centers.size() * toy.protocol.n_per_center);
  const double ddim_sec = ddim_subset / n_subset * big.size(0);

  const auto fake = generate(G, toy.nets, centers, toy.protocol.n_per_center, 1000).clamp(-1.0, 1.0);
  std::vector<double> labels;
  for (double c : centers)
    for (int k = 0; k < toy.protocol.n_per_center; ++k) labels.push_back(c);
  const auto grep = evaluate(toy.protocol, toy.oracles, toy.ls, toy.ds.images, toy.ls.labels, fake, labels);
  const double dg = diversity_of(grep), dd = diversity_of(slow);
  const double ratio = g_sec / ddim_sec;
  report(13, "one-step generator speed and diversity", ratio < 0.01 && dg > 0.5 * dd,
         "1e4 images: generator " + fmt(g_sec, 3) + " s vs DDIM-250 " + fmt(ddim_sec, 4) + " s (extrapolated from " +
             fmt(n_subset, 3) + " images) ratio " + fmt(100 * ratio, 3) + "% (< 1%); diversity " + fmt(dg) +
             " vs DDIM-250 " + fmt(dd) + " (need > " + fmt(0.5 * dd) + "); generator label score " +
             fmt(grep.label_score.mean) + ", DDIM-250 " + fmt(slow.label_score.mean));
}

// ---------------------------------------------------------------------------
// 14: the command-line pipeline

void check_pipeline(const fs::path& work, const std::string& exe) {
  const auto dir = work / "pipeline";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const json cfg = {
      {"seed", 0},
      {"dataset", {{"type", "rotor"}, {"n_angles", 45}, {"per_angle", 10}, {"size", 32}, {"seed", 7}}},
      {"model", {{"base_channels", 16}, {"channel_mults", {1, 2, 2}}, {"res_blocks", 1}, {"groups", 8}}},
      {"train", {{"K", 3000}, {"m", 32}, {"lr", 5e-4}}},
      {"sample", {{"T_prime", 50}, {"gamma", 1.5}}},
      {"eval", {{"n_centers", 20}, {"n_per_center", 20}}},
      {"paths", {{"root", (dir / "run").string()}}},
  };
  const auto cfg_path = dir / "config.json";
  std::ofstream(cfg_path) << cfg.dump(2);

  const auto t0 = Clock::now();
  std::string failed;
  for (const std::string verb : {"make-dataset", "train-embeddings", "train", "sample", "eval"}) {
    const auto ts = Clock::now();
    const std::string cmd = "\"" + exe + "\" -q -c \"" + cfg_path.string() + "\" " + verb + " > \"" +
                            (dir / (verb + ".log")).string() + "\" 2>&1";
    const int rc = std::system(cmd.c_str());
    note("ccdm " + verb + " rc=" + std::to_string(rc) + " in " + fmt(seconds_since(ts), 4) + " s");
    if (rc != 0) {
      failed = verb + " (rc " + std::to_string(rc) + ")";
      break;
    }
  }
  const double sec = seconds_since(t0);

  std::vector<std::string> problems;
  std::size_t n_centers = 0;
  const auto report_path = dir / "run" / "eval" / "report.json";
  if (failed.empty()) {
    if (!fs::exists(report_path)) {
      problems.push_back("report.json missing");
    } else {
      json j;
      std::ifstream(report_path) >> j;
      problems = validate_report_json(j);
      if (j.contains("centers")) n_centers = j["centers"].size();
    }
    for (const char* p : {"fid_vs_label.svg", "label_score_vs_label.svg", "diversity_vs_label.svg"})
      if (!fs::exists(dir / "run" / "eval" / p)) problems.push_back(std::string(p) + " missing");
    std::size_t n_png = 0;
    for (const auto& e : fs::directory_iterator(dir / "run" / "samples"))
      if (e.path().extension() == ".png") ++n_png;
    if (n_png != 400) problems.push_back(std::to_string(n_png) + " sample images instead of 400");
  }
  std::string detail = failed.empty() ? "all five commands exit 0" : "failed at " + failed;
  detail += "; " + fmt(sec, 4) + " s (<= 1800); report " +
            (problems.empty() ? "schema-valid with " + std::to_string(n_centers) + " centers, plots present"
                              : "problems: " + problems.front());
  report(14, "end-to-end command pipeline", failed.empty() && problems.empty() && sec <= 1800.0, detail);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ccdm acceptance run"};
  std::string only;
  std::string work = CCDM_ACCEPTANCE_WORK;
  std::string exe = CCDM_EXECUTABLE;
  app.add_option("--only", only, "comma separated check numbers");
  app.add_option("--work", work, "directory for cached toy models and pipeline output");
  app.add_option("--ccdm", exe, "path of the ccdm executable");
  CLI11_PARSE(app, argc, argv);

  std::set<int> wanted;
  if (!only.empty()) {
    std::stringstream ss(only);
    for (std::string tok; std::getline(ss, tok, ',');) wanted.insert(std::stoi(tok));
  }
  auto want = [&](int id) { return wanted.empty() || wanted.count(id) > 0; };

  torch::set_num_threads(1);
  fs::create_directories(work);
  const auto t0 = Clock::now();

  auto guarded = [&](int id, const std::string& name, const std::function<void()>& fn) {
    if (!want(id)) return;
    try {
      fn();
    } catch (const std::exception& e) {
      report(id, name, false, std::string("threw: ") + e.what());
    }
  };

  guarded(1, "posterior oracle vs closed form", check_posterior_oracle);
  guarded(2, "forward composition vs marginal", check_forward_marginals);
  guarded(3, "HVIDL reductions", check_hvidl_reductions);
  guarded(4, "HVIDL gradient vs central differences", check_loss_gradient);
  guarded(5, "DDIM reproduces a constant predictor", check_ddim_constant);
  guarded(6, "CFG at gamma=1 equals conditional-only sampling", check_cfg_identity);
  guarded(7, "initial noise covariance", check_initial_noise);
  guarded(8, "rule-of-thumb bandwidth and vicinity", check_rules_of_thumb);

  std::unique_ptr<Toy> toy;
  auto need_toy = [&]() -> Toy& {
    if (!toy) toy = make_toy(work);
    return *toy;
  };
  guarded(9, "guidance scale trades label score for diversity", [&] { check_gamma_direction(need_toy()); });
  guarded(10, "hard vicinity vs none", [&] { check_vicinity_benefit(need_toy()); });
  guarded(11, "eps-prediction under DDIM-50 vs x0-prediction", [&] { check_eps_degradation(need_toy()); });
  guarded(12, "metric identities", [&] { check_metric_identities(need_toy()); });
  guarded(13, "one-step generator speed and diversity", [&] { check_distillation(need_toy()); });
  guarded(14, "end-to-end command pipeline", [&] { check_pipeline(work, exe); });

  int failed = 0;
  for (const auto& o : g_outcomes) failed += o.pass ? 0 : 1;
  std::cout << "\n" << g_outcomes.size() - failed << "/" << g_outcomes.size() << " checks passed in "
            << fmt(seconds_since(t0), 5) << " s" << std::endl;
  return failed == 0 ? 0 : 1;
}
