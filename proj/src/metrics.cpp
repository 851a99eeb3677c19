#include "ccdm/metrics.hpp"

#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "ccdm/errors.hpp"
#include "ccdm/rng.hpp"
#include "ccdm/torch_util.hpp"

namespace nn = torch::nn;

namespace ccdm {

namespace {

torch::Tensor psd_sqrt(const torch::Tensor& m) {
  auto [vals, vecs] = torch::linalg_eigh(0.5 * (m + m.t()));
  return vecs.matmul(torch::diag(vals.clamp_min(0.0).sqrt())).matmul(vecs.t());
}

ScoreStats population_stats(const std::vector<double>& v) {
  ScoreStats s;
  if (v.empty()) return s;
  s.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - s.mean) * (x - s.mean);
  s.std = std::sqrt(ss / static_cast<double>(v.size()));
  return s;
}

std::int64_t nearest_index(const std::vector<double>& centers, double y) {
  std::int64_t best = 0;
  for (std::size_t i = 1; i < centers.size(); ++i)
    if (std::abs(centers[i] - y) < std::abs(centers[static_cast<std::size_t>(best)] - y)) best = static_cast<std::int64_t>(i);
  return best;
}

torch::Tensor batched(const torch::Tensor& x, const std::function<torch::Tensor(const torch::Tensor&)>& fn) {
  torch::NoGradGuard ng;
  std::vector<torch::Tensor> out;
  for (std::int64_t i = 0; i < x.size(0); i += 256) out.push_back(fn(x.narrow(0, i, std::min<std::int64_t>(256, x.size(0) - i))));
  return torch::cat(out);
}

}  // namespace

double frechet_distance(const torch::Tensor& mu_a, const torch::Tensor& cov_a, const torch::Tensor& mu_b,
                        const torch::Tensor& cov_b) {
  const auto ma = mu_a.to(torch::kFloat64), mb = mu_b.to(torch::kFloat64);
  const auto ca = cov_a.to(torch::kFloat64), cb = cov_b.to(torch::kFloat64);
  const auto sa = psd_sqrt(ca);
  const auto inner = sa.matmul(cb).matmul(sa);
  auto vals = torch::linalg_eigvalsh(0.5 * (inner + inner.t()));
  const double tr_sqrt = vals.clamp_min(0.0).sqrt().sum().item<double>();
  const double d = (ma - mb).square().sum().item<double>() + ca.trace().item<double>() + cb.trace().item<double>() -
                   2.0 * tr_sqrt;
  return std::max(d, 0.0);
}

double fid(const torch::Tensor& a, const torch::Tensor& b) {
  if (a.dim() != 2 || b.dim() != 2 || a.size(1) != b.size(1)) throw std::invalid_argument("fid needs [n, d] feature sets of equal width");
  if (a.size(0) < 2 || b.size(0) < 2) throw std::invalid_argument("fid needs at least 2 rows per set");
  auto moments = [](const torch::Tensor& f) {
    const auto x = f.to(torch::kFloat64);
    const auto mu = x.mean(0);
    const auto c = x - mu;
    return std::make_pair(mu, c.t().matmul(c) / static_cast<double>(x.size(0) - 1));
  };
  const auto [ma, ca] = moments(a);
  const auto [mb, cb] = moments(b);
  return frechet_distance(ma, ca, mb, cb);
}

double entropy_of_counts(const std::vector<std::int64_t>& counts) {
  const double n = static_cast<double>(std::accumulate(counts.begin(), counts.end(), std::int64_t{0}));
  if (n <= 0) throw std::invalid_argument("entropy of an empty distribution");
  double h = 0.0;
  for (auto c : counts)
    if (c > 0) {
      const double p = static_cast<double>(c) / n;
      h -= p * std::log(p);
    }
  return h;
}

// ---------------------------------------------------------------------------

ClassifierImpl::ClassifierImpl(ImageShape s, std::int64_t k, std::int64_t w) : shape(s), num_classes(k), width(w) {
  if (k < 2) throw std::invalid_argument("classifier needs at least 2 classes");
  convs = register_module(
      "convs", nn::Sequential(nn::Conv2d(nn::Conv2dOptions(s.channels, w, 3).padding(1)), nn::GroupNorm(8, w), nn::ReLU(),
                              nn::Conv2d(nn::Conv2dOptions(w, 2 * w, 4).stride(2).padding(1)), nn::GroupNorm(8, 2 * w),
                              nn::ReLU(), nn::Conv2d(nn::Conv2dOptions(2 * w, 2 * w, 4).stride(2).padding(1)),
                              nn::GroupNorm(8, 2 * w), nn::ReLU(), nn::AdaptiveAvgPool2d(4), nn::Flatten()));
  head = register_module("head", nn::Sequential(nn::Linear(2 * w * 16, 256), nn::ReLU(), nn::Linear(256, k)));
}

torch::Tensor ClassifierImpl::forward(const torch::Tensor& x) { return head->forward(convs->forward(x)); }

torch::Tensor ClassifierImpl::predict(const torch::Tensor& x) { return forward(x).argmax(1); }

torch::Tensor Oracles::features(const torch::Tensor& images) const {
  AuxRegressor r = regressor;
  return batched(images, [&](const torch::Tensor& x) { return r->features(x.to(torch::kFloat32)); });
}

torch::Tensor Oracles::predict_labels(const torch::Tensor& images) const {
  AuxRegressor r = regressor;
  return batched(images, [&](const torch::Tensor& x) { return r->predict(x.to(torch::kFloat32)); });
}

torch::Tensor Oracles::predict_classes(const torch::Tensor& images) const {
  if (!classifier) throw DependencyError("no oracle classifier (dataset has no class tags)");
  Classifier c = classifier;
  return batched(images, [&](const torch::Tensor& x) { return c->predict(x.to(torch::kFloat32)); });
}

void Oracles::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  save_checkpoint(*regressor, dir / "oracle_regressor.pt",
                  {{"image_shape", regressor->shape},
                   {"feature_dim", regressor->feature_dim},
                   {"width", regressor->width},
                   {"train_mae", regressor_train_mae}});
  if (classifier)
    save_checkpoint(*classifier, dir / "oracle_classifier.pt",
                    {{"image_shape", classifier->shape},
                     {"num_classes", classifier->num_classes},
                     {"width", classifier->width},
                     {"train_acc", classifier_train_acc}});
}

Oracles Oracles::load(const std::filesystem::path& dir) {
  Oracles o;
  const auto rm = read_metadata(dir / "oracle_regressor.pt");
  o.regressor = AuxRegressor(rm.at("image_shape").get<ImageShape>(), rm.at("feature_dim").get<std::int64_t>(),
                             rm.at("width").get<std::int64_t>());
  load_parameters(*o.regressor, dir / "oracle_regressor.pt");
  freeze(*o.regressor);
  o.regressor_train_mae = rm.value("train_mae", 0.0);
  if (std::filesystem::exists(dir / "oracle_classifier.pt")) {
    const auto cm = read_metadata(dir / "oracle_classifier.pt");
    o.classifier = Classifier(cm.at("image_shape").get<ImageShape>(), cm.at("num_classes").get<std::int64_t>(),
                              cm.at("width").get<std::int64_t>());
    load_parameters(*o.classifier, dir / "oracle_classifier.pt");
    freeze(*o.classifier);
    o.classifier_train_acc = cm.value("train_acc", 0.0);
  }
  return o;
}

Oracles train_oracles(const Dataset& ds, const LabelSpace& ls, const OracleOptions& opts) {
  Oracles o;
  AuxTrainOptions ao;
  ao.epochs = opts.epochs;
  ao.batch_size = opts.batch_size;
  ao.min_steps_per_epoch = opts.min_steps_per_epoch;
  ao.lr = opts.lr;
  ao.width = opts.width;
  ao.seed = mix64(opts.seed ^ stream_id("oracle_regressor"));
  o.regressor = train_aux_cnn(ds.images, ls.labels, opts.feature_dim, ao).net;
  {
    const auto pred = to_vector(o.predict_labels(ds.images));
    double mae = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) mae += std::abs(pred[i] - ls.labels[i]);
    o.regressor_train_mae = mae / static_cast<double>(pred.size());
  }
  if (ds.class_tags && ds.num_classes() >= 2) {
    const auto shape = ds.shape();
    torch::manual_seed(mix64(opts.seed ^ stream_id("oracle_classifier")));
    Classifier c(shape, ds.num_classes(), opts.width);
    torch::optim::Adam opt(c->parameters(), torch::optim::AdamOptions(opts.lr));
    std::vector<std::int64_t> tags(ds.class_tags->begin(), ds.class_tags->end());
    const auto y = torch::tensor(tags, torch::kInt64);
    const auto x = ds.images.to(torch::kFloat32);
    const std::int64_t n = ds.size();
    const std::int64_t bs = std::min<std::int64_t>(opts.batch_size, n);
    const std::int64_t steps = std::max<std::int64_t>((n + bs - 1) / bs, opts.min_steps_per_epoch);
    c->train();
    for (int e = 0; e < opts.epochs; ++e) {
      const auto perm = permutation(n, opts.seed, stream_id("oracle_classifier_epoch", static_cast<std::uint64_t>(e)));
      std::size_t cur = 0;
      for (std::int64_t s = 0; s < steps; ++s) {
        std::vector<std::int64_t> idx;
        for (std::int64_t b = 0; b < bs; ++b) idx.push_back(perm[cur++ % perm.size()]);
        const auto ix = torch::tensor(idx, torch::kInt64);
        auto loss = torch::nn::functional::cross_entropy(c->forward(x.index_select(0, ix)), y.index_select(0, ix));
        opt.zero_grad();
        loss.backward();
        opt.step();
      }
    }
    freeze(*c);
    o.classifier = c;
    o.classifier_train_acc = o.predict_classes(x).eq(y).to(torch::kFloat64).mean().item<double>();
  }
  return o;
}

// ---------------------------------------------------------------------------

ScoreStats label_score_from(const std::vector<double>& predicted, const std::vector<double>& assigned,
                            const LabelSpace& ls) {
  if (predicted.empty() || predicted.size() != assigned.size())
    throw std::invalid_argument("label score needs equally sized, non-empty prediction and assignment lists");
  std::vector<double> err;
  for (std::size_t i = 0; i < predicted.size(); ++i)
    err.push_back(std::abs(ls.denormalize(predicted[i]) - ls.denormalize(assigned[i])));
  return population_stats(err);
}

ScoreStats label_score(const Oracles& o, const torch::Tensor& images, const std::vector<double>& assigned,
                       const LabelSpace& ls) {
  if (images.size(0) == 0) throw std::invalid_argument("label score of an empty set");
  return label_score_from(to_vector(o.predict_labels(images)), assigned, ls);
}

DiversityResult diversity_from_predictions(const std::vector<std::int64_t>& classes,
                                           const std::vector<std::int64_t>& group, std::int64_t num_groups,
                                           std::int64_t num_classes) {
  if (num_classes < 2) throw std::invalid_argument("diversity needs K >= 2");
  if (classes.size() != group.size()) throw std::invalid_argument("class and group lists differ in length");
  std::vector<std::vector<std::int64_t>> counts(static_cast<std::size_t>(num_groups),
                                                std::vector<std::int64_t>(static_cast<std::size_t>(num_classes), 0));
  for (std::size_t i = 0; i < classes.size(); ++i) counts.at(static_cast<std::size_t>(group[i])).at(static_cast<std::size_t>(classes[i]))++;
  DiversityResult r;
  std::vector<double> ents;
  for (const auto& c : counts) {
    if (std::accumulate(c.begin(), c.end(), std::int64_t{0}) == 0) {
      r.per_group.push_back(std::nullopt);
      ++r.skipped;
      continue;
    }
    ents.push_back(entropy_of_counts(c));
    r.per_group.push_back(ents.back());
  }
  r.stats = population_stats(ents);
  return r;
}

void EvalProtocol::validate() const {
  if (centers.empty()) throw ConfigError("no evaluation centers");
  for (std::size_t i = 0; i < centers.size(); ++i) {
    if (!(centers[i] >= 0.0 && centers[i] <= 1.0)) throw ConfigError("evaluation centers must lie in [0, 1]");
    if (i > 0 && !(centers[i] > centers[i - 1])) throw ConfigError("evaluation centers must be strictly increasing");
  }
  if (!(r_sfid >= 0.0)) throw ConfigError("r_sfid must be >= 0");
  if (n_per_center < 1) throw ConfigError("n_per_center must be >= 1");
}

std::vector<double> EvalProtocol::even_centers(int count, double lo, double hi) {
  if (count < 1) throw std::invalid_argument("need at least one center");
  if (count == 1) return {0.5 * (lo + hi)};
  std::vector<double> c;
  for (int i = 0; i < count; ++i) c.push_back(lo + (hi - lo) * i / (count - 1));
  return c;
}

SfidResult sfid_from_features(const EvalProtocol& p, const torch::Tensor& rf, const std::vector<double>& rl,
                              const torch::Tensor& ff, const std::vector<double>& fl) {
  p.validate();
  SfidResult r;
  std::vector<double> vals;
  for (double c : p.centers) {
    std::vector<std::int64_t> ri, fi;
    for (std::size_t i = 0; i < rl.size(); ++i)
      if (hard_weight(c, rl[i], p.r_sfid) > 0) ri.push_back(static_cast<std::int64_t>(i));
    for (std::size_t i = 0; i < fl.size(); ++i)
      if (hard_weight(c, fl[i], p.r_sfid) > 0) fi.push_back(static_cast<std::int64_t>(i));
    if (ri.size() < 2 || fi.size() < 2) {
      r.per_center.push_back(std::nullopt);
      ++r.skipped;
      continue;
    }
    const double d = fid(rf.index_select(0, torch::tensor(ri, torch::kInt64)), ff.index_select(0, torch::tensor(fi, torch::kInt64)));
    r.per_center.push_back(d);
    vals.push_back(d);
  }
  if (vals.empty()) throw ConfigError("every SFID window is empty; widen r_sfid or move the centers");
  r.stats = population_stats(vals);
  return r;
}

SfidResult sfid(const EvalProtocol& p, const Oracles& o, const torch::Tensor& real_images,
                const std::vector<double>& real_labels, const torch::Tensor& fake_images,
                const std::vector<double>& fake_labels) {
  return sfid_from_features(p, o.features(real_images), real_labels, o.features(fake_images), fake_labels);
}

EvalReport evaluate(const EvalProtocol& p, const Oracles& o, const LabelSpace& ls, const torch::Tensor& real_images,
                    const std::vector<double>& real_labels, const torch::Tensor& fake_images,
                    const std::vector<double>& fake_labels) {
  p.validate();
  if (fake_images.size(0) == 0) throw std::invalid_argument("no generated images to evaluate");
  EvalReport rep;
  rep.r_sfid = p.r_sfid;
  const auto s = sfid(p, o, real_images, real_labels, fake_images, fake_labels);
  rep.sfid = s.stats;
  rep.skipped_sfid = s.skipped;

  const auto pred = to_vector(o.predict_labels(fake_images));
  rep.label_score = label_score_from(pred, fake_labels, ls);

  std::vector<std::int64_t> group;
  for (double y : fake_labels) group.push_back(nearest_index(p.centers, y));
  const auto m = static_cast<std::int64_t>(p.centers.size());
  std::optional<DiversityResult> div;
  if (o.classifier) {
    const auto cls = o.predict_classes(fake_images);
    std::vector<std::int64_t> cv(cls.data_ptr<std::int64_t>(), cls.data_ptr<std::int64_t>() + cls.numel());
    div = diversity_from_predictions(cv, group, m, o.classifier->num_classes);
    rep.diversity = div->stats;
    rep.skipped_diversity = div->skipped;
  }
  for (std::int64_t j = 0; j < m; ++j) {
    CenterReport c;
    c.center = p.centers[static_cast<std::size_t>(j)];
    c.center_raw = ls.denormalize(c.center);
    c.fid = s.per_center[static_cast<std::size_t>(j)];
    for (double y : real_labels) c.n_real += hard_weight(c.center, y, p.r_sfid) > 0;
    double err = 0.0;
    for (std::size_t i = 0; i < group.size(); ++i)
      if (group[i] == j) {
        ++c.n_fake;
        err += std::abs(ls.denormalize(pred[i]) - ls.denormalize(fake_labels[i]));
      }
    if (c.n_fake > 0) c.label_score = err / static_cast<double>(c.n_fake);
    if (div) c.diversity = div->per_group[static_cast<std::size_t>(j)];
    rep.centers.push_back(c);
  }
  rep.meta = {{"diversity_entropy", "natural_log"},
              {"feature_extractor", "oracle_regressor_penultimate"},
              {"std_convention", "population"},
              {"label_score_units", "raw"}};
  return rep;
}

// ---------------------------------------------------------------------------

namespace {
nlohmann::json opt_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }
std::optional<double> json_opt(const nlohmann::json& j) {
  return j.is_null() ? std::nullopt : std::optional<double>(j.get<double>());
}
}  // namespace

nlohmann::json EvalReport::to_json() const {
  nlohmann::json cs = nlohmann::json::array();
  for (const auto& c : centers)
    cs.push_back({{"center", c.center},
                  {"center_raw", c.center_raw},
                  {"fid", opt_json(c.fid)},
                  {"label_score", opt_json(c.label_score)},
                  {"diversity", opt_json(c.diversity)},
                  {"n_real", c.n_real},
                  {"n_fake", c.n_fake}});
  nlohmann::json j = {{"centers", cs},
                      {"sfid_mean", sfid.mean},
                      {"sfid_std", sfid.std},
                      {"label_score_mean", label_score.mean},
                      {"label_score_std", label_score.std},
                      {"diversity_mean", diversity ? nlohmann::json(diversity->mean) : nlohmann::json(nullptr)},
                      {"diversity_std", diversity ? nlohmann::json(diversity->std) : nlohmann::json(nullptr)},
                      {"skipped_sfid_centers", skipped_sfid},
                      {"skipped_diversity_centers", skipped_diversity},
                      {"r_sfid", r_sfid},
                      {"meta", meta}};
  return j;
}

EvalReport EvalReport::from_json(const nlohmann::json& j) {
  const auto problems = validate_report_json(j);
  if (!problems.empty()) throw DataError("invalid evaluation report: " + problems.front());
  EvalReport r;
  for (const auto& c : j.at("centers"))
    r.centers.push_back({c.at("center"), c.at("center_raw"), json_opt(c.at("fid")), json_opt(c.at("label_score")),
                         json_opt(c.at("diversity")), c.at("n_real"), c.at("n_fake")});
  r.sfid = {j.at("sfid_mean"), j.at("sfid_std")};
  r.label_score = {j.at("label_score_mean"), j.at("label_score_std")};
  if (!j.at("diversity_mean").is_null()) r.diversity = ScoreStats{j.at("diversity_mean"), j.at("diversity_std")};
  r.skipped_sfid = j.at("skipped_sfid_centers");
  r.skipped_diversity = j.at("skipped_diversity_centers");
  r.r_sfid = j.at("r_sfid");
  r.meta = j.value("meta", nlohmann::json::object());
  return r;
}

std::vector<std::string> validate_report_json(const nlohmann::json& j) {
  std::vector<std::string> bad;
  if (!j.is_object()) return {"report is not an object"};
  for (const char* k : {"sfid_mean", "sfid_std", "label_score_mean", "label_score_std", "r_sfid"})
    if (!j.contains(k) || !j.at(k).is_number()) bad.push_back(std::string("missing numeric field ") + k);
  for (const char* k : {"diversity_mean", "diversity_std"})
    if (!j.contains(k) || !(j.at(k).is_number() || j.at(k).is_null())) bad.push_back(std::string("missing field ") + k);
  for (const char* k : {"skipped_sfid_centers", "skipped_diversity_centers"})
    if (!j.contains(k) || !j.at(k).is_number_integer()) bad.push_back(std::string("missing integer field ") + k);
  if (!j.contains("centers") || !j.at("centers").is_array() || j.at("centers").empty()) {
    bad.push_back("centers must be a non-empty array");
    return bad;
  }
  for (const auto& c : j.at("centers")) {
    for (const char* k : {"center", "center_raw"})
      if (!c.contains(k) || !c.at(k).is_number()) bad.push_back(std::string("center entry lacks ") + k);
    for (const char* k : {"fid", "label_score", "diversity"})
      if (!c.contains(k) || !(c.at(k).is_number() || c.at(k).is_null())) bad.push_back(std::string("center entry lacks ") + k);
    for (const char* k : {"n_real", "n_fake"})
      if (!c.contains(k) || !c.at(k).is_number_integer()) bad.push_back(std::string("center entry lacks ") + k);
  }
  if (bad.empty() && j.at("sfid_mean").get<double>() < 0) bad.push_back("sfid_mean is negative");
  return bad;
}

void EvalReport::write(const std::filesystem::path& json_path, const std::filesystem::path& csv_path) const {
  if (json_path.has_parent_path()) std::filesystem::create_directories(json_path.parent_path());
  std::ofstream(json_path) << to_json().dump(2) << '\n';
  if (csv_path.empty()) return;
  std::ofstream csv(csv_path);
  csv.precision(10);
  csv << "center,center_raw,fid,label_score,diversity,n_real,n_fake\n";
  auto cell = [](const std::optional<double>& v) { return v ? std::to_string(*v) : std::string(); };
  for (const auto& c : centers)
    csv << c.center << ',' << c.center_raw << ',' << cell(c.fid) << ',' << cell(c.label_score) << ','
        << cell(c.diversity) << ',' << c.n_real << ',' << c.n_fake << '\n';
}

}  // namespace ccdm
