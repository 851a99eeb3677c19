#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "ccdm/denoiser.hpp"
#include "ccdm/errors.hpp"
#include "ccdm/torch_util.hpp"
#include "fixtures.hpp"

using namespace ccdm;
using ccdm::testing::quick_nets;
using ccdm::testing::randomize_head;
using ccdm::testing::tiny_config;

namespace {

struct Inputs {
  torch::Tensor xt, t;
  ConditionEmbedding cond;
};

Inputs inputs(ImageShape s, int B, std::uint64_t seed = 1) {
  auto g = make_generator(seed);
  const auto nets = quick_nets(s);
  std::vector<std::optional<double>> ys;
  for (int i = 0; i < B; ++i) ys.push_back(i % 3 == 2 ? std::nullopt : std::optional<double>(0.1 * i));
  return {torch::randn({B, s.channels, s.height, s.width}, g), torch::randint(1, 1001, {B}, g, torch::kInt64),
          nets.embed(ys)};
}

}  // namespace

TEST(Denoiser, OutputIsZeroAtInit) {
  const ImageShape s{1, 16, 16};
  Denoiser f(tiny_config(s), 1000, 3);
  const auto in = inputs(s, 4);
  const auto out = f.predict(in.xt, in.t, in.cond);
  EXPECT_EQ(out.sizes(), in.xt.sizes());
  EXPECT_EQ(out.abs().max().item<double>(), 0.0);
}

TEST(Denoiser, ShapesAcrossSeedsAndChannels) {
  for (ImageShape s : {ImageShape{1, 16, 16}, ImageShape{3, 16, 16}, ImageShape{1, 8, 8}}) {
    for (std::uint64_t seed : {0, 1, 2}) {
      Denoiser f(tiny_config(s), 1000, seed);
      randomize_head(f, seed);
      const auto in = inputs(s, 3, seed);
      const auto out = f.predict(in.xt, in.t, in.cond);
      EXPECT_EQ(out.sizes(), in.xt.sizes());
      EXPECT_TRUE(torch::isfinite(out).all().item<bool>());
    }
  }
}

TEST(Denoiser, ParameterCountIsSeedIndependent) {
  const ImageShape s{1, 16, 16};
  Denoiser a(tiny_config(s), 1000, 1), b(tiny_config(s), 1000, 2), c(tiny_config(s), 1000, 1);
  EXPECT_EQ(parameter_count(*a.net()), parameter_count(*b.net()));
  auto pa = a.net()->named_parameters(), pb = b.net()->named_parameters(), pc = c.net()->named_parameters();
  bool any_diff = false;
  for (const auto& kv : pa) {
    EXPECT_TRUE(torch::equal(kv.value(), pc[kv.key()])) << kv.key();
    any_diff |= !torch::equal(kv.value(), pb[kv.key()]);
  }
  EXPECT_TRUE(any_diff);
}

TEST(Denoiser, RejectsIndivisibleShapes) {
  DenoiserConfig c = tiny_config({1, 18, 18});
  c.channel_mults = {1, 2, 4};
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(Denoiser(c, 1000), ConfigError);
  DenoiserConfig g = tiny_config({1, 16, 16});
  g.groups = 3;
  EXPECT_THROW(g.validate(), ConfigError);
}

TEST(Denoiser, RejectsBadInputs) {
  const ImageShape s{1, 16, 16};
  Denoiser f(tiny_config(s), 1000);
  auto in = inputs(s, 2);
  EXPECT_THROW(f.predict(in.xt, torch::tensor({0, 5}, torch::kInt64), in.cond), std::out_of_range);
  EXPECT_THROW(f.predict(in.xt, torch::tensor({1001, 5}, torch::kInt64), in.cond), std::out_of_range);
  EXPECT_THROW(f.predict(torch::zeros({2, 1, 8, 8}), in.t, in.cond), std::invalid_argument);
}

TEST(Denoiser, ZeroSkipsChangesOutput) {
  const ImageShape s{1, 16, 16};
  Denoiser f(tiny_config(s), 1000, 4);
  randomize_head(f);
  const auto in = inputs(s, 2);
  torch::NoGradGuard ng;
  const auto a = f.predict(in.xt, in.t, in.cond);
  f.net()->zero_skips = true;
  const auto b = f.predict(in.xt, in.t, in.cond);
  EXPECT_GT((a - b).abs().max().item<double>(), 1e-6);
}

TEST(Denoiser, NullRowsIgnoreShortEmbedding) {
  const ImageShape s{1, 8, 8};
  Denoiser f(tiny_config(s), 1000, 4);
  randomize_head(f);
  f.net()->eval();
  auto g = make_generator(3);
  const auto xt = torch::randn({1, 1, 8, 8}, g);
  const auto t = torch::tensor({300}, torch::kInt64);
  const auto mask = torch::ones({1}, torch::kBool);
  const auto a = f.predict(xt, t, torch::randn({1, kShortEmbedDim}, g), mask);
  const auto b = f.predict(xt, t, torch::randn({1, kShortEmbedDim}, g), mask);
  EXPECT_TRUE(torch::equal(a, b));
}

TEST(Denoiser, GradientMatchesFiniteDifferences) {
  const ImageShape s{1, 8, 8};
  Denoiser f(tiny_config(s), 1000, 6);
  f.net()->to(torch::kFloat64);
  randomize_head(f);
  f.net()->eval();  // batch-norm statistics fixed
  auto in = inputs(s, 3, 2);
  const auto xt = in.xt.to(torch::kFloat64);
  auto g = make_generator(8);
  const auto r = torch::randn(xt.sizes(), g, torch::kFloat64);
  auto objective = [&] { return (f.predict(xt, in.t, in.cond) * r).sum(); };
  f.net()->zero_grad();
  objective().backward();
  int probes = 0;
  torch::NoGradGuard ng;
  for (auto& kv : f.net()->named_parameters()) {
    auto p = kv.value();
    if (!p.grad().defined() || p.numel() == 0) continue;
    const auto flat = p.view(-1);
    const auto gflat = p.grad().view(-1);
    const std::int64_t i = (probes * 7919) % flat.numel();
    const double h = 1e-6;
    const double orig = flat[i].item<double>();
    flat[i].fill_(orig + h);
    const double up = objective().item<double>();
    flat[i].fill_(orig - h);
    const double down = objective().item<double>();
    flat[i].fill_(orig);
    const double fd = (up - down) / (2 * h);
    const double an = gflat[i].item<double>();
    EXPECT_LE(std::abs(fd - an), 1e-3 * std::max(1e-4, std::abs(an))) << kv.key() << " fd=" << fd << " an=" << an;
    ++probes;
  }
  EXPECT_GE(probes, 20);
}

TEST(Denoiser, SaveLoadRoundTrip) {
  const ImageShape s{1, 8, 8};
  Denoiser f(tiny_config(s, PredictionType::Eps), 1000, 2);
  randomize_head(f);
  f.set_trained_p_drop(0.25);
  const auto path = std::filesystem::temp_directory_path() / "ccdm_denoiser_rt.pt";
  f.save(path, {{"note", "x"}});
  auto back = Denoiser::load(path);
  EXPECT_EQ(back.T(), 1000);
  EXPECT_EQ(back.pred_type(), PredictionType::Eps);
  ASSERT_TRUE(back.trained_p_drop());
  EXPECT_DOUBLE_EQ(*back.trained_p_drop(), 0.25);
  f.net()->eval();
  const auto in = inputs(s, 2);
  torch::NoGradGuard ng;
  EXPECT_TRUE(torch::equal(f.predict(in.xt, in.t, in.cond), back.predict(in.xt, in.t, in.cond)));
  EXPECT_THROW(Denoiser::load("/nonexistent/denoiser.pt"), DependencyError);
}

TEST(Denoiser, ConfigJsonRoundTrip) {
  auto c = tiny_config({3, 16, 16}, PredictionType::V);
  const auto back = DenoiserConfig::from_json(c.to_json());
  EXPECT_EQ(back.shape, c.shape);
  EXPECT_EQ(back.channel_mults, c.channel_mults);
  EXPECT_EQ(back.pred_type, PredictionType::V);
}
