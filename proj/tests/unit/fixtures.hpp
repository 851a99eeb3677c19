#pragma once

#include <vector>

#include <torch/torch.h>

#include "ccdm/data.hpp"
#include "ccdm/denoiser.hpp"
#include "ccdm/embednet.hpp"
#include "ccdm/labelspace.hpp"

namespace ccdm::testing {

// Untrained but fully functional embedding nets. With label-dependent
// covariance the long net is randomly initialized, so H varies with y.
inline EmbeddingNets quick_nets(ImageShape shape, bool label_dependent = false, std::uint64_t seed = 1) {
  EmbeddingNets e;
  e.shape = shape;
  e.encoding = LabelEncoding::Sinusoidal;
  e.covariance = label_dependent ? CovarianceMode::LabelDependent : CovarianceMode::Identity;
  e.seed = seed;
  if (label_dependent) {
    torch::manual_seed(seed);
    e.phi_long = PhiMlp(shape.numel());
  }
  return e;
}

inline Dataset small_rotor(int n_angles = 5, int per_angle = 2, int size = 16, std::uint64_t seed = 3) {
  RotorOptions o;
  o.n_angles = n_angles;
  o.per_angle = per_angle;
  o.size = size;
  o.seed = seed;
  return make_rotor_dataset(o);
}

inline DenoiserConfig tiny_config(ImageShape shape, PredictionType type = PredictionType::X0) {
  DenoiserConfig c;
  c.shape = shape;
  c.base_channels = 8;
  c.channel_mults = {1, 2};
  c.res_blocks = 1;
  c.groups = 4;
  c.pred_type = type;
  return c;
}

// Replaces the zero-initialized output conv so gradients reach the trunk.
inline void randomize_head(Denoiser& f, std::uint64_t seed = 9) {
  torch::NoGradGuard ng;
  auto g = at::make_generator<at::CPUGeneratorImpl>(seed);
  for (auto& p : f.net()->conv_out->parameters()) p.copy_(torch::randn(p.sizes(), g, p.scalar_type()) * 0.1);
}

}  // namespace ccdm::testing
