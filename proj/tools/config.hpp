#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ccdm/data.hpp"
#include "ccdm/denoiser.hpp"
#include "ccdm/distill.hpp"
#include "ccdm/embednet.hpp"
#include "ccdm/metrics.hpp"
#include "ccdm/sampler.hpp"
#include "ccdm/train.hpp"

namespace ccdm::cli {

struct DatasetSpec {
  std::string type = "rotor";  // rotor | count | directory
  RotorOptions rotor;
  CountOptions count;
  std::filesystem::path path;  // directory datasets only
};

struct SampleSection {
  int T_prime = 250;
  double gamma = 1.5;
  SamplerKind sampler = SamplerKind::DDIM;
  std::vector<double> labels;  // raw units; empty means the evaluation centers
  std::optional<int> n_per_label;
  int batch_size = 100;
};

struct EvalSection {
  std::vector<double> centers;  // raw units; empty means n_centers evenly spaced
  int n_centers = 20;
  int n_per_center = 20;
  std::optional<double> r_sfid;  // raw units; default is half the center spacing
  OracleOptions oracle;
};

struct Paths {
  std::filesystem::path root = "runs/default";
  std::filesystem::path dataset, embeddings, model, samples, generator, eval, oracles;
};

struct ExperimentConfig {
  nlohmann::json raw;  // normalized document the hash is taken over
  std::uint64_t seed = 0;
  int workers = 1;
  DatasetSpec dataset;
  int T = 1000;
  int m_kappa = 1;
  EmbeddingTrainOptions embeddings;
  DenoiserConfig model;
  TrainConfig train;
  SampleSection sample;
  EvalSection eval;
  DistillConfig distill;
  Paths paths;

  std::string hash() const;
};

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
  std::optional<std::filesystem::path> root;
};

/// Checks the whole document (types, unknown keys, ranges, cross-field
/// rules) and throws ConfigError naming the offending key.
ExperimentConfig parse_config(nlohmann::json j, const Overrides& ov = {});
ExperimentConfig load_config(const std::filesystem::path& file, const Overrides& ov = {});

std::string fnv1a_hex(const std::string& bytes);

}  // namespace ccdm::cli
