#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include <torch/torch.h>

namespace ccdm {

/// 8-bit image in planar-agnostic interleaved layout (H x W x C).
struct Image8 {
  int channels = 1;
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> pixels;
};

/// Grayscale (1 channel) or RGB (3 channels) PNG. Throws std::runtime_error on I/O failure.
Image8 read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Image8& image);

/// [C, H, W] tensor in [-1, 1] <-> 8-bit image, via x = p / 127.5 - 1.
torch::Tensor image_to_tensor(const Image8& image);
Image8 tensor_to_image(const torch::Tensor& chw);

}  // namespace ccdm
