#include "ccdm/torch_util.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <fstream>
#include <numeric>

#include "ccdm/errors.hpp"
#include "ccdm/rng.hpp"

namespace ccdm {

torch::Generator make_generator(std::uint64_t seed) { return at::make_generator<at::CPUGeneratorImpl>(seed); }

std::vector<std::int64_t> permutation(std::int64_t n, std::uint64_t seed, std::uint64_t stream) {
  std::vector<std::int64_t> p(static_cast<std::size_t>(n));
  std::iota(p.begin(), p.end(), 0);
  RandomStream rng(seed, stream);
  for (std::int64_t i = n - 1; i > 0; --i) {
    const auto j = static_cast<std::int64_t>(rng.uniform_int(static_cast<std::uint64_t>(i + 1)));
    std::swap(p[i], p[j]);
  }
  return p;
}

void freeze(torch::nn::Module& m) {
  for (auto& p : m.parameters()) p.set_requires_grad(false);
  m.eval();
}

bool is_frozen(const torch::nn::Module& m) {
  if (m.is_training()) return false;
  for (const auto& p : m.parameters())
    if (p.requires_grad()) return false;
  return true;
}

std::int64_t parameter_count(const torch::nn::Module& m) {
  std::int64_t n = 0;
  for (const auto& p : m.parameters()) n += p.numel();
  return n;
}

// Named tensors are stored through an archive so any module type round trips.
void save_checkpoint(const torch::nn::Module& m, const std::filesystem::path& path, const nlohmann::json& meta) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  torch::serialize::OutputArchive ar;
  for (const auto& kv : m.named_parameters(true)) ar.write(kv.key(), kv.value());
  for (const auto& kv : m.named_buffers(true)) ar.write(kv.key(), kv.value(), true);
  ar.save_to(path.string());
  std::ofstream js(path.string() + ".json");
  js << meta.dump(2) << '\n';
}

nlohmann::json read_metadata(const std::filesystem::path& path) {
  std::ifstream js(path.string() + ".json");
  if (!js) throw DependencyError("missing checkpoint metadata " + path.string() + ".json");
  return nlohmann::json::parse(js);
}

void load_parameters(torch::nn::Module& m, const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw DependencyError("missing checkpoint " + path.string());
  torch::serialize::InputArchive ar;
  ar.load_from(path.string());
  torch::NoGradGuard ng;
  for (auto& kv : m.named_parameters(true)) {
    torch::Tensor t;
    if (!ar.try_read(kv.key(), t)) throw DependencyError(path.string() + ": missing tensor " + kv.key());
    kv.value().copy_(t);
  }
  for (auto& kv : m.named_buffers(true)) {
    torch::Tensor t;
    if (ar.try_read(kv.key(), t, true)) kv.value().copy_(t);
  }
}

std::vector<double> to_vector(const torch::Tensor& t) {
  auto c = t.to(torch::kFloat64).contiguous().view(-1);
  return {c.data_ptr<double>(), c.data_ptr<double>() + c.numel()};
}

}  // namespace ccdm
