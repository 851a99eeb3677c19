#include "config.hpp"

#include <cmath>
#include <fstream>
#include <set>

#include "ccdm/errors.hpp"

namespace ccdm::cli {

namespace {

using nlohmann::json;

// Reads one JSON object, remembering which keys were consumed so leftovers
// can be reported as typos.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) fail("", "must be an object");
  }

  bool has(const std::string& k) const { return j_.contains(k); }

  Section child(const std::string& k) {
    seen_.insert(k);
    static const json empty = json::object();
    return Section(j_.contains(k) ? j_.at(k) : empty, key(k));
  }

  double number(const std::string& k, double def) {
    const json* v = take(k);
    if (!v) return def;
    if (!v->is_number()) fail(k, "must be a number");
    const double d = v->get<double>();
    if (!std::isfinite(d)) fail(k, "must be finite");
    return d;
  }

  std::int64_t integer(const std::string& k, std::int64_t def) {
    const json* v = take(k);
    if (!v) return def;
    if (!v->is_number_integer()) fail(k, "must be an integer");
    return v->get<std::int64_t>();
  }

  std::optional<std::uint64_t> seed(const std::string& k) {
    const json* v = take(k);
    if (!v) return std::nullopt;
    if (!v->is_number_unsigned() && !(v->is_number_integer() && v->get<std::int64_t>() >= 0))
      fail(k, "must be a non-negative integer");
    return v->get<std::uint64_t>();
  }

  bool boolean(const std::string& k, bool def) {
    const json* v = take(k);
    if (!v) return def;
    if (!v->is_boolean()) fail(k, "must be true or false");
    return v->get<bool>();
  }

  std::string string(const std::string& k, const std::string& def) {
    const json* v = take(k);
    if (!v) return def;
    if (!v->is_string()) fail(k, "must be a string");
    return v->get<std::string>();
  }

  std::vector<double> numbers(const std::string& k) {
    const json* v = take(k);
    if (!v) return {};
    if (!v->is_array()) fail(k, "must be an array of numbers");
    std::vector<double> out;
    for (const auto& e : *v) {
      if (!e.is_number()) fail(k, "must be an array of numbers");
      out.push_back(e.get<double>());
    }
    return out;
  }

  template <class F>
  auto parsed(const std::string& k, const std::string& def, F&& parse) {
    const auto s = string(k, def);
    try {
      return parse(s);
    } catch (const std::invalid_argument& e) {
      fail(k, e.what());
    }
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) fail(k, "unknown key");
  }

  [[noreturn]] void fail(const std::string& k, const std::string& msg) const {
    throw ConfigError(key(k) + ": " + msg);
  }

  std::string key(const std::string& k) const {
    if (k.empty()) return path_.empty() ? "config" : path_;
    return path_.empty() ? k : path_ + "." + k;
  }

 private:
  const json* take(const std::string& k) {
    seen_.insert(k);
    if (!j_.contains(k) || j_.at(k).is_null()) return nullptr;
    return &j_.at(k);
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void require(bool ok, const std::string& key, const std::string& msg) {
  if (!ok) throw ConfigError(key + ": " + msg);
}

}  // namespace

std::string fnv1a_hex(const std::string& bytes) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string ExperimentConfig::hash() const { return fnv1a_hex(raw.dump()); }

ExperimentConfig parse_config(json j, const Overrides& ov) {
  if (!j.is_object()) throw ConfigError("config: top level must be a JSON object");
  if (ov.seed) j["seed"] = *ov.seed;
  if (ov.workers) j["workers"] = *ov.workers;
  if (ov.root) j["paths"]["root"] = ov.root->string();

  ExperimentConfig c;
  c.raw = j;
  Section top(j, "");
  c.seed = top.seed("seed").value_or(0);
  c.workers = static_cast<int>(top.integer("workers", 1));
  require(c.workers >= 1, "workers", "must be >= 1");
  auto derive = [&](std::optional<std::uint64_t> explicit_seed, const char* role) {
    return explicit_seed ? *explicit_seed : mix64(c.seed ^ stream_id(role));
  };

  // dataset
  {
    auto d = top.child("dataset");
    c.dataset.type = d.string("type", "rotor");
    if (c.dataset.type == "rotor") {
      auto& r = c.dataset.rotor;
      r.n_angles = static_cast<int>(d.integer("n_angles", r.n_angles));
      r.per_angle = static_cast<int>(d.integer("per_angle", r.per_angle));
      r.size = static_cast<int>(d.integer("size", r.size));
      r.angle_min = d.number("angle_min", r.angle_min);
      r.angle_max = d.number("angle_max", r.angle_max);
      r.num_shapes = static_cast<int>(d.integer("num_shapes", r.num_shapes));
      r.seed = d.seed("seed").value_or(c.seed);
      require(r.n_angles >= 2, d.key("n_angles"), "must be >= 2");
      require(r.per_angle >= 1, d.key("per_angle"), "must be >= 1");
      require(r.angle_max > r.angle_min, d.key("angle_max"), "must exceed angle_min");
      require(r.num_shapes >= 1, d.key("num_shapes"), "must be >= 1");
      require(r.size >= 8, d.key("size"), "must be >= 8");
    } else if (c.dataset.type == "count") {
      auto& r = c.dataset.count;
      r.max_count = static_cast<int>(d.integer("max_count", r.max_count));
      r.per_count = static_cast<int>(d.integer("per_count", r.per_count));
      r.size = static_cast<int>(d.integer("size", r.size));
      r.radius = d.number("radius", r.radius);
      r.odd_only = d.boolean("odd_only", r.odd_only);
      r.seed = d.seed("seed").value_or(c.seed);
      require(r.max_count >= 2, d.key("max_count"), "must be >= 2");
      require(r.per_count >= 1, d.key("per_count"), "must be >= 1");
      require(r.radius > 0, d.key("radius"), "must be positive");
      require(r.size >= 8, d.key("size"), "must be >= 8");
    } else if (c.dataset.type == "directory") {
      c.dataset.path = d.string("path", "");
      require(!c.dataset.path.empty(), d.key("path"), "required for directory datasets");
    } else {
      d.fail("type", "must be one of rotor, count, directory (got '" + c.dataset.type + "')");
    }
    d.finish();
  }

  {
    auto s = top.child("schedule");
    c.T = static_cast<int>(s.integer("T", 1000));
    require(c.T >= 1, "schedule.T", "must be >= 1");
    s.finish();
  }
  {
    auto l = top.child("labelspace");
    c.m_kappa = static_cast<int>(l.integer("m_kappa", 1));
    require(c.m_kappa >= 0, "labelspace.m_kappa", "must be >= 0");
    l.finish();
  }

  {
    auto e = top.child("embeddings");
    auto& o = c.embeddings;
    o.encoding = e.parsed("encoding", "learned", parse_label_encoding);
    o.covariance = e.parsed("covariance", "label_dependent", parse_covariance_mode);
    o.clamp_B = e.number("clamp_B", o.clamp_B);
    o.aux.epochs = static_cast<int>(e.integer("aux_epochs", o.aux.epochs));
    o.aux.batch_size = static_cast<int>(e.integer("aux_batch_size", o.aux.batch_size));
    o.aux.min_steps_per_epoch = static_cast<int>(e.integer("aux_min_steps_per_epoch", o.aux.min_steps_per_epoch));
    o.aux.lr = e.number("aux_lr", o.aux.lr);
    o.aux.width = e.integer("aux_width", o.aux.width);
    o.phi.steps = static_cast<int>(e.integer("phi_steps", o.phi.steps));
    o.phi.batch_size = static_cast<int>(e.integer("phi_batch_size", o.phi.batch_size));
    o.phi.lr = e.number("phi_lr", o.phi.lr);
    o.phi.hidden = e.integer("phi_hidden", o.phi.hidden);
    o.seed = derive(e.seed("seed"), "embeddings");
    require(o.clamp_B > 0, e.key("clamp_B"), "must be positive");
    require(o.aux.epochs >= 1 && o.aux.batch_size >= 1 && o.aux.lr > 0 && o.aux.width >= 8 && o.aux.width % 8 == 0,
            e.key("aux_*"), "epochs, batch size and lr must be positive; width a multiple of 8");
    require(o.phi.steps >= 1 && o.phi.batch_size >= 1 && o.phi.lr > 0 && o.phi.hidden >= 8 && o.phi.hidden % 8 == 0,
            e.key("phi_*"), "steps, batch size and lr must be positive; hidden a multiple of 8");
    e.finish();
  }

  {
    auto m = top.child("model");
    auto& d = c.model;
    d.base_channels = m.integer("base_channels", d.base_channels);
    const auto mults = m.numbers("channel_mults");
    if (!mults.empty()) {
      d.channel_mults.clear();
      for (double v : mults) {
        require(v == std::floor(v) && v >= 1, m.key("channel_mults"), "entries must be positive integers");
        d.channel_mults.push_back(static_cast<std::int64_t>(v));
      }
    }
    d.res_blocks = m.integer("res_blocks", d.res_blocks);
    d.groups = m.integer("groups", d.groups);
    m.finish();
  }

  {
    auto t = top.child("train");
    auto& o = c.train;
    o.steps = static_cast<int>(t.integer("K", o.steps));
    o.batch_size = static_cast<int>(t.integer("m", o.batch_size));
    o.p_drop = t.number("p_drop", o.p_drop);
    o.vicinity = t.parsed("vicinity_mode", "hard", parse_vicinity_mode);
    c.model.pred_type = t.parsed("pred_type", "x0", parse_prediction_type);
    o.loss_space = t.parsed("loss_space", "native", parse_loss_space);
    o.lr = t.number("lr", o.lr);
    o.seed = derive(t.seed("seed"), "train");
    o.retry_limit = static_cast<int>(t.integer("retry_limit", o.retry_limit));
    o.checkpoint_every = static_cast<int>(t.integer("checkpoint_every", o.checkpoint_every));
    o.log_every = static_cast<int>(t.integer("log_every", o.log_every));
    require(o.steps >= 0, t.key("K"), "must be >= 0");
    require(o.batch_size >= 1, t.key("m"), "must be >= 1");
    require(o.p_drop >= 0 && o.p_drop <= 1, t.key("p_drop"), "must lie in [0, 1]");
    require(o.lr > 0, t.key("lr"), "must be positive");
    require(o.retry_limit >= 0, t.key("retry_limit"), "must be >= 0");
    require(o.checkpoint_every >= 0, t.key("checkpoint_every"), "must be >= 0");
    require(o.log_every >= 1, t.key("log_every"), "must be >= 1");
    require(!(o.vicinity == VicinityMode::Soft && c.m_kappa == 0), t.key("vicinity_mode"),
            "soft vicinity needs kappa > 0; set labelspace.m_kappa >= 1 or use \"hard\"/\"none\"");
    t.finish();
  }

  {
    auto s = top.child("sample");
    auto& o = c.sample;
    o.T_prime = static_cast<int>(s.integer("T_prime", o.T_prime));
    o.gamma = s.number("gamma", o.gamma);
    o.sampler = s.parsed("sampler", "ddim", parse_sampler_kind);
    o.labels = s.numbers("labels");
    if (s.has("n_per_label")) o.n_per_label = static_cast<int>(s.integer("n_per_label", 1));
    o.batch_size = static_cast<int>(s.integer("batch_size", o.batch_size));
    require(o.T_prime >= 1 && o.T_prime <= c.T, s.key("T_prime"), "must lie in [1, schedule.T]");
    require(!o.n_per_label || *o.n_per_label >= 1, s.key("n_per_label"), "must be >= 1");
    require(o.batch_size >= 1, s.key("batch_size"), "must be >= 1");
    require(!(o.gamma != 1.0 && c.train.p_drop == 0.0), s.key("gamma"),
            "guidance needs an unconditional branch; with train.p_drop = 0 set gamma to 1");
    s.finish();
  }

  {
    auto e = top.child("eval");
    auto& o = c.eval;
    o.centers = e.numbers("centers");
    o.n_centers = static_cast<int>(e.integer("n_centers", o.n_centers));
    o.n_per_center = static_cast<int>(e.integer("n_per_center", o.n_per_center));
    if (e.has("r_sfid")) o.r_sfid = e.number("r_sfid", 0.0);
    o.oracle.epochs = static_cast<int>(e.integer("oracle_epochs", o.oracle.epochs));
    o.oracle.batch_size = static_cast<int>(e.integer("oracle_batch_size", o.oracle.batch_size));
    o.oracle.min_steps_per_epoch = static_cast<int>(e.integer("oracle_min_steps_per_epoch", o.oracle.min_steps_per_epoch));
    o.oracle.lr = e.number("oracle_lr", o.oracle.lr);
    o.oracle.width = e.integer("oracle_width", o.oracle.width);
    o.oracle.feature_dim = e.integer("oracle_feature_dim", o.oracle.feature_dim);
    o.oracle.seed = derive(e.seed("oracle_seed"), "oracle");
    for (std::size_t i = 1; i < o.centers.size(); ++i)
      require(o.centers[i] > o.centers[i - 1], e.key("centers"), "must be strictly increasing");
    require(o.n_centers >= 1, e.key("n_centers"), "must be >= 1");
    require(o.n_per_center >= 1, e.key("n_per_center"), "must be >= 1");
    require(!o.r_sfid || *o.r_sfid >= 0, e.key("r_sfid"), "must be >= 0");
    require(o.oracle.epochs >= 1 && o.oracle.lr > 0 && o.oracle.width % 8 == 0 && o.oracle.feature_dim >= 2,
            e.key("oracle_*"), "epochs and lr must be positive, width a multiple of 8, feature_dim >= 2");
    e.finish();
  }

  {
    auto d = top.child("distill");
    auto& o = c.distill;
    o.steps = static_cast<int>(d.integer("steps", o.steps));
    o.batch_size = static_cast<int>(d.integer("batch_size", o.batch_size));
    o.w_D = d.number("w_D", o.w_D);
    o.w_G = d.number("w_G", o.w_G);
    o.d_updates = static_cast<int>(d.integer("d_updates", o.d_updates));
    o.policy = d.string("policy", o.policy);
    o.m_kappa = static_cast<int>(d.integer("m_kappa", o.m_kappa));
    o.lr_g = d.number("lr_g", o.lr_g);
    o.lr_d = d.number("lr_d", o.lr_d);
    o.lr_fake = d.number("lr_fake", o.lr_fake);
    o.real_guidance = d.number("real_guidance", o.real_guidance);
    o.g_channels = d.integer("g_channels", o.g_channels);
    o.d_channels = d.integer("d_channels", o.d_channels);
    o.monitor_every = static_cast<int>(d.integer("monitor_every", o.monitor_every));
    o.seed = derive(d.seed("seed"), "distill");
    try {
      o.validate();
    } catch (const std::exception& e) {
      throw ConfigError(std::string("distill: ") + e.what());
    }
    require(!(o.real_guidance != 1.0 && c.train.p_drop == 0.0), d.key("real_guidance"),
            "guidance needs an unconditional branch; with train.p_drop = 0 set real_guidance to 1");
    d.finish();
  }

  {
    auto p = top.child("paths");
    auto& o = c.paths;
    o.root = p.string("root", o.root.string());
    auto sub = [&](const char* k, const char* def) {
      const auto s = p.string(k, "");
      return s.empty() ? o.root / def : std::filesystem::path(s);
    };
    o.dataset = c.dataset.type == "directory" && !p.has("dataset") ? c.dataset.path : sub("dataset", "dataset");
    o.embeddings = sub("embeddings", "embeddings");
    o.model = sub("model", "model");
    o.samples = sub("samples", "samples");
    o.generator = sub("generator", "generator");
    o.eval = sub("eval", "eval");
    o.oracles = sub("oracles", "oracles");
    p.finish();
  }
  top.finish();

  if (c.dataset.type != "directory") {
    const int size = c.dataset.type == "rotor" ? c.dataset.rotor.size : c.dataset.count.size;
    c.model.shape = {1, size, size};
    try {
      c.model.validate();
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("model: ") + e.what());
    }
  }
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& file, const Overrides& ov) {
  std::ifstream in(file);
  if (!in) throw ConfigError("cannot open config file '" + file.string() + "'");
  json j;
  try {
    j = json::parse(in, nullptr, true, /*ignore_comments=*/true);
  } catch (const json::parse_error& e) {
    throw ConfigError("config file '" + file.string() + "' is not valid JSON: " + e.what());
  }
  return parse_config(std::move(j), ov);
}

}  // namespace ccdm::cli
