#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

namespace ccdm {

/// Private CPU generator, so training randomness never touches global state.
torch::Generator make_generator(std::uint64_t seed);

/// Random permutation of [0, n) drawn from a Philox stream.
std::vector<std::int64_t> permutation(std::int64_t n, std::uint64_t seed, std::uint64_t stream);

/// Stops gradient flow into every parameter and switches to inference mode.
void freeze(torch::nn::Module& m);
bool is_frozen(const torch::nn::Module& m);

std::int64_t parameter_count(const torch::nn::Module& m);

/// Module parameters and buffers go to `path`, metadata to `path` + ".json".
void save_checkpoint(const torch::nn::Module& m, const std::filesystem::path& path, const nlohmann::json& meta);
nlohmann::json read_metadata(const std::filesystem::path& path);
void load_parameters(torch::nn::Module& m, const std::filesystem::path& path);

std::vector<double> to_vector(const torch::Tensor& t);

}  // namespace ccdm
