#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

namespace ccdm {

struct ImageShape {
  std::int64_t channels = 1;
  std::int64_t height = 32;
  std::int64_t width = 32;

  std::int64_t numel() const { return channels * height * width; }
  std::vector<std::int64_t> dims() const { return {channels, height, width}; }
  bool operator==(const ImageShape&) const = default;
};

void to_json(nlohmann::json& j, const ImageShape& s);
void from_json(const nlohmann::json& j, ImageShape& s);

/// Labeled images held in memory. `images` is [N, C, H, W], values in [-1, 1].
struct Dataset {
  torch::Tensor images;
  std::vector<double> raw_labels;
  std::optional<std::vector<int>> class_tags;
  nlohmann::json provenance = nlohmann::json::object();

  std::int64_t size() const { return static_cast<std::int64_t>(raw_labels.size()); }
  ImageShape shape() const;
  int num_classes() const;
};

/// Reads `root/labels.csv` ("filename,label" or "filename,label,class") and
/// the referenced PNGs. Rows keep manifest order. Throws DataError with the
/// offending row on any problem.
Dataset load_dataset(const std::filesystem::path& root);

/// Writes PNGs, labels.csv and, when provenance is non-empty, generator.json.
void save_dataset(const Dataset& ds, const std::filesystem::path& root);

/// Keeps rows whose raw label satisfies `keep`; order preserved.
Dataset filter_by_label(const Dataset& ds, const std::function<bool(double)>& keep);

/// Rows whose label is an odd integer (the odd-count training split).
Dataset odd_counts_only(const Dataset& ds);

// ---------------------------------------------------------------------------
// Synthetic generators. Pure functions of their arguments: all randomness is
// drawn from Philox streams keyed by (seed, item index).

struct RotorOptions {
  int n_angles = 45;
  int per_angle = 10;
  int size = 32;
  double angle_min = 0.0;
  double angle_max = 90.0;
  int num_shapes = 4;
  std::uint64_t seed = 0;
};

/// Grayscale renders of one of `num_shapes` asymmetric glyphs rotated by an
/// angle from a uniform grid; label = angle in degrees, class tag = glyph id.
Dataset make_rotor_dataset(const RotorOptions& opts);

/// Single anti-aliased glyph render, [1, size, size] in [-1, 1].
torch::Tensor render_rotor(int shape_id, double angle_deg, int size, double intensity = 1.0);

struct CountOptions {
  int max_count = 20;
  int per_count = 10;
  int size = 32;
  double radius = 1.5;
  bool odd_only = false;
  std::uint64_t seed = 0;
};

/// Images with k non-touching disks for k in 1..max_count; label = k.
Dataset make_count_dataset(const CountOptions& opts);

}  // namespace ccdm
