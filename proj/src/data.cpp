#include "ccdm/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include "ccdm/errors.hpp"
#include "ccdm/image_io.hpp"
#include "ccdm/rng.hpp"

namespace fs = std::filesystem;

namespace ccdm {

void to_json(nlohmann::json& j, const ImageShape& s) {
  j = nlohmann::json::array({s.channels, s.height, s.width});
}

void from_json(const nlohmann::json& j, ImageShape& s) {
  s.channels = j.at(0).get<std::int64_t>();
  s.height = j.at(1).get<std::int64_t>();
  s.width = j.at(2).get<std::int64_t>();
}

ImageShape Dataset::shape() const {
  if (!images.defined() || images.dim() != 4) throw DataError("dataset has no image tensor");
  return {images.size(1), images.size(2), images.size(3)};
}

int Dataset::num_classes() const {
  if (!class_tags || class_tags->empty()) return 0;
  return *std::max_element(class_tags->begin(), class_tags->end()) + 1;
}

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::string strip_cr(std::string s) {
  if (!s.empty() && s.back() == '\r') s.pop_back();
  return s;
}

// Quantize to the 8-bit grid so in-memory and on-disk datasets agree exactly.
torch::Tensor quantize(const torch::Tensor& x) {
  return x.add(1.0).mul(127.5).round().clamp(0, 255).div(127.5).sub(1.0);
}

}  // namespace

Dataset load_dataset(const fs::path& root) {
  const auto manifest = root / "labels.csv";
  std::ifstream in(manifest);
  if (!in) throw DataError("missing manifest " + manifest.string());
  std::string header;
  std::getline(in, header);
  header = strip_cr(header);
  bool with_class = false;
  if (header == "filename,label,class") {
    with_class = true;
  } else if (header != "filename,label") {
    throw DataError("labels.csv header must be 'filename,label[,class]', got '" + header + "'");
  }

  Dataset ds;
  std::vector<torch::Tensor> images;
  std::vector<int> tags;
  std::optional<std::vector<std::int64_t>> shape;
  std::string line;
  int row = 1;
  while (std::getline(in, line)) {
    ++row;
    line = strip_cr(line);
    if (line.empty()) continue;
    const auto cells = split_csv(line);
    const std::string where = manifest.string() + " row " + std::to_string(row);
    if (cells.size() != (with_class ? 3u : 2u)) throw DataError(where + ": wrong number of columns");
    double label = 0.0;
    try {
      std::size_t used = 0;
      label = std::stod(cells[1], &used);
      if (used != cells[1].size()) throw std::invalid_argument("trailing characters");
    } catch (const std::exception&) {
      throw DataError(where + ": unparsable label '" + cells[1] + "'");
    }
    if (!std::isfinite(label)) throw DataError(where + ": non-finite label");
    if (with_class) {
      try {
        tags.push_back(std::stoi(cells[2]));
      } catch (const std::exception&) {
        throw DataError(where + ": unparsable class '" + cells[2] + "'");
      }
      if (tags.back() < 0) throw DataError(where + ": negative class id");
    }
    const auto path = root / cells[0];
    if (!fs::exists(path)) throw DataError(where + ": missing image file '" + cells[0] + "'");
    Image8 img;
    try {
      img = read_png(path);
    } catch (const std::exception& e) {
      throw DataError(where + ": " + e.what());
    }
    auto t = image_to_tensor(img);
    const std::vector<std::int64_t> dims(t.sizes().begin(), t.sizes().end());
    if (shape && *shape != dims) throw DataError(where + ": image shape differs from earlier rows");
    shape = dims;
    if (t.min().item<float>() < -1.0f || t.max().item<float>() > 1.0f)
      throw DataError(where + ": pixel values outside [-1, 1] after scaling");
    images.push_back(t);
    ds.raw_labels.push_back(label);
  }
  if (images.empty()) throw DataError(manifest.string() + ": no rows");
  ds.images = torch::stack(images);
  if (with_class) ds.class_tags = std::move(tags);
  const auto spec = root / "generator.json";
  if (fs::exists(spec)) {
    std::ifstream js(spec);
    ds.provenance = nlohmann::json::parse(js);
  } else {
    ds.provenance = {{"source", fs::absolute(root).string()}};
  }
  return ds;
}

void save_dataset(const Dataset& ds, const fs::path& root) {
  fs::create_directories(root);
  std::ofstream csv(root / "labels.csv");
  csv << (ds.class_tags ? "filename,label,class\n" : "filename,label\n");
  csv.precision(17);
  for (std::int64_t i = 0; i < ds.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "img_%06lld.png", static_cast<long long>(i));
    write_png(root / name, tensor_to_image(ds.images[i]));
    csv << name << ',' << ds.raw_labels[i];
    if (ds.class_tags) csv << ',' << (*ds.class_tags)[i];
    csv << '\n';
  }
  if (!ds.provenance.empty()) {
    std::ofstream js(root / "generator.json");
    js << ds.provenance.dump(2) << '\n';
  }
}

Dataset filter_by_label(const Dataset& ds, const std::function<bool(double)>& keep) {
  std::vector<std::int64_t> idx;
  for (std::int64_t i = 0; i < ds.size(); ++i)
    if (keep(ds.raw_labels[i])) idx.push_back(i);
  if (idx.empty()) throw DataError("label filter removed every row");
  Dataset out;
  out.images = ds.images.index_select(0, torch::tensor(idx, torch::kInt64));
  for (auto i : idx) out.raw_labels.push_back(ds.raw_labels[i]);
  if (ds.class_tags) {
    out.class_tags.emplace();
    for (auto i : idx) out.class_tags->push_back((*ds.class_tags)[i]);
  }
  out.provenance = ds.provenance;
  return out;
}

Dataset odd_counts_only(const Dataset& ds) {
  auto out = filter_by_label(ds, [](double y) {
    const double r = std::round(y);
    return r == y && static_cast<long long>(r) % 2 != 0;
  });
  out.provenance["subset"] = "odd_counts";
  return out;
}

// ---------------------------------------------------------------------------
// Rotor glyphs

namespace {

struct Rect {
  double x0, x1, y0, y1;
};

// Glyphs in units of half the image size, centered on the image.
const std::array<std::vector<Rect>, 6>& glyphs() {
  static const std::array<std::vector<Rect>, 6> g{{
      {{-0.75, 0.75, -0.12, 0.12}},                                  // bar
      {{-0.75, 0.75, -0.12, 0.12}, {0.45, 0.75, 0.12, 0.55}},        // L
      {{-0.75, 0.75, -0.12, 0.12}, {-0.12, 0.12, 0.12, 0.62}},       // T
      {{-0.75, 0.75, -0.12, 0.12}, {-0.75, -0.42, -0.38, 0.38}},     // flag
      {{-0.75, 0.75, -0.10, 0.10}, {0.30, 0.50, -0.45, 0.45}},       // cross-guard
      {{-0.75, 0.60, -0.14, 0.14}, {0.60, 0.75, -0.05, 0.05}},       // pointer
  }};
  return g;
}

void exact_sincos(double angle_deg, double& s, double& c) {
  const double r = std::fmod(std::fmod(angle_deg, 360.0) + 360.0, 360.0);
  if (r == 0.0) { s = 0.0; c = 1.0; return; }
  if (r == 90.0) { s = 1.0; c = 0.0; return; }
  if (r == 180.0) { s = 0.0; c = -1.0; return; }
  if (r == 270.0) { s = -1.0; c = 0.0; return; }
  const double a = angle_deg * std::numbers::pi / 180.0;
  s = std::sin(a);
  c = std::cos(a);
}

}  // namespace

torch::Tensor render_rotor(int shape_id, double angle_deg, int size, double intensity) {
  const auto& all = glyphs();
  if (shape_id < 0 || shape_id >= static_cast<int>(all.size()))
    throw std::invalid_argument("rotor glyph id out of range");
  if (size < 4) throw std::invalid_argument("rotor image size must be >= 4");
  const auto& rects = all[shape_id];
  double s, c;
  exact_sincos(angle_deg, s, c);
  constexpr int ss = 4;
  const double half = size / 2.0;
  auto out = torch::empty({1, size, size}, torch::kFloat32);
  auto acc = out.accessor<float, 3>();
  for (int py = 0; py < size; ++py) {
    for (int px = 0; px < size; ++px) {
      int hits = 0;
      for (int sy = 0; sy < ss; ++sy) {
        for (int sx = 0; sx < ss; ++sx) {
          const double x = (px + (sx + 0.5) / ss - half) / half;
          const double y = (half - (py + (sy + 0.5) / ss)) / half;
          // Rotate the sample into the glyph frame (inverse rotation).
          const double u = c * x + s * y;
          const double v = -s * x + c * y;
          for (const auto& r : rects) {
            if (u >= r.x0 && u <= r.x1 && v >= r.y0 && v <= r.y1) {
              ++hits;
              break;
            }
          }
        }
      }
      const double coverage = static_cast<double>(hits) / (ss * ss);
      acc[0][py][px] = static_cast<float>(-1.0 + coverage * (intensity + 1.0));
    }
  }
  return out;
}

Dataset make_rotor_dataset(const RotorOptions& o) {
  if (o.n_angles < 2 || o.per_angle < 1 || !(o.angle_max > o.angle_min))
    throw std::invalid_argument("rotor grid needs n_angles >= 2, per_angle >= 1 and angle_max > angle_min");
  if (o.num_shapes < 1 || o.num_shapes > static_cast<int>(glyphs().size()))
    throw std::invalid_argument("rotor num_shapes must lie in [1, " + std::to_string(glyphs().size()) + "]");
  Dataset ds;
  std::vector<torch::Tensor> images;
  ds.class_tags.emplace();
  for (int a = 0; a < o.n_angles; ++a) {
    const double angle = o.angle_min + (o.angle_max - o.angle_min) * a / (o.n_angles - 1);
    for (int k = 0; k < o.per_angle; ++k) {
      RandomStream rng(o.seed, stream_id("rotor", static_cast<std::uint64_t>(a), static_cast<std::uint64_t>(k)));
      const int shape = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(o.num_shapes)));
      const double intensity = 0.55 + 0.45 * rng.uniform();
      images.push_back(quantize(render_rotor(shape, angle, o.size, intensity)));
      ds.raw_labels.push_back(angle);
      ds.class_tags->push_back(shape);
    }
  }
  ds.images = torch::stack(images);
  ds.provenance = {{"type", "rotor"},
                   {"params",
                    {{"n_angles", o.n_angles},
                     {"per_angle", o.per_angle},
                     {"size", o.size},
                     {"angle_min", o.angle_min},
                     {"angle_max", o.angle_max},
                     {"num_shapes", o.num_shapes}}},
                   {"seed", o.seed}};
  return ds;
}

Dataset make_count_dataset(const CountOptions& o) {
  if (o.max_count < 1) throw std::invalid_argument("count dataset needs max_count >= 1 (k = 0 is not a valid label)");
  if (o.per_count < 1 || o.size < 8 || !(o.radius > 0.0))
    throw std::invalid_argument("count dataset needs per_count >= 1, size >= 8, radius > 0");
  const double min_dist = 2.0 * o.radius + 2.0;
  Dataset ds;
  std::vector<torch::Tensor> images;
  for (int k = 1; k <= o.max_count; ++k) {
    if (o.odd_only && k % 2 == 0) continue;
    for (int j = 0; j < o.per_count; ++j) {
      RandomStream rng(o.seed, stream_id("count", static_cast<std::uint64_t>(k), static_cast<std::uint64_t>(j)));
      std::vector<std::array<double, 2>> centers;
      for (int restart = 0; restart < 200 && static_cast<int>(centers.size()) < k; ++restart) {
        centers.clear();
        for (int tries = 0; tries < 5000 && static_cast<int>(centers.size()) < k; ++tries) {
          const double lo = o.radius + 0.5, span = o.size - 2.0 * lo;
          const std::array<double, 2> p{lo + span * rng.uniform(), lo + span * rng.uniform()};
          const bool clear = std::all_of(centers.begin(), centers.end(), [&](const auto& q) {
            return std::hypot(p[0] - q[0], p[1] - q[1]) >= min_dist;
          });
          if (clear) centers.push_back(p);
        }
      }
      if (static_cast<int>(centers.size()) < k)
        throw std::invalid_argument("cannot place " + std::to_string(k) + " separated disks in a " +
                                    std::to_string(o.size) + "px image");
      auto img = torch::full({1, o.size, o.size}, -1.0f);
      auto acc = img.accessor<float, 3>();
      for (const auto& p : centers) {
        const float value = static_cast<float>(0.2 + 0.8 * rng.uniform());
        for (int py = 0; py < o.size; ++py)
          for (int px = 0; px < o.size; ++px)
            if (std::hypot(px + 0.5 - p[0], py + 0.5 - p[1]) <= o.radius) acc[0][py][px] = value;
      }
      images.push_back(quantize(img));
      ds.raw_labels.push_back(k);
    }
  }
  ds.images = torch::stack(images);
  ds.provenance = {{"type", "count"},
                   {"params",
                    {{"max_count", o.max_count},
                     {"per_count", o.per_count},
                     {"size", o.size},
                     {"radius", o.radius},
                     {"odd_only", o.odd_only}}},
                   {"seed", o.seed}};
  return ds;
}

}  // namespace ccdm
