#pragma once

#include <array>
#include <cstdint>
#include <string_view>

#include <torch/torch.h>

namespace ccdm {

/// Philox4x32-10 counter-based block cipher. Output depends only on
/// (key, counter), so streams are reproducible across platforms and
/// independent of call interleaving.
struct Philox4x32 {
  using Block = std::array<std::uint32_t, 4>;
  using Key = std::array<std::uint32_t, 2>;

  static Block generate(Block counter, Key key) noexcept;
};

/// Mixes arbitrary identifiers into a 64-bit stream id (SplitMix64 finalizer).
std::uint64_t mix64(std::uint64_t x) noexcept;
std::uint64_t stream_id(std::string_view role, std::uint64_t a = 0, std::uint64_t b = 0) noexcept;

/// Sequential draws from one Philox stream identified by (seed, stream).
class RandomStream {
 public:
  RandomStream(std::uint64_t seed, std::uint64_t stream) noexcept;

  std::uint32_t next_u32() noexcept;
  /// Uniform on [0, 1) with 53 bits of resolution.
  double uniform() noexcept;
  /// Uniform integer on [0, n). Requires n > 0.
  std::uint64_t uniform_int(std::uint64_t n) noexcept;
  double normal() noexcept;
  double normal(double mean, double stddev) noexcept { return mean + stddev * normal(); }

  /// Tensor of i.i.d. standard normals, filled in row-major order.
  torch::Tensor randn(torch::IntArrayRef shape, torch::ScalarType dtype = torch::kFloat32);

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream() const noexcept { return stream_; }

 private:
  void refill() noexcept;

  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t block_index_ = 0;
  Philox4x32::Block buffer_{};
  int buffered_ = 0;
  bool has_spare_normal_ = false;
  double spare_normal_ = 0.0;
};

}  // namespace ccdm
