#include "commands.hpp"

#include <cmath>
#include <fstream>
#include <iostream>

#include "ccdm/errors.hpp"
#include "ccdm/image_io.hpp"
#include "ccdm/labelspace.hpp"
#include "ccdm/schedule.hpp"
#include "plot.hpp"

#ifndef CCDM_CODE_VERSION
#define CCDM_CODE_VERSION "unknown"
#endif

namespace fs = std::filesystem;
using nlohmann::json;

namespace ccdm::cli {

namespace {

json schedule_json(const NoiseSchedule& s) { return {{"T", s.T}, {"offset", s.offset}, {"beta_clip", s.beta_clip}}; }

std::string hash_of(const json& j) { return fnv1a_hex(j.dump()); }

void log(const CommandOptions& o, const std::string& msg) {
  if (!o.quiet) std::cerr << msg << std::endl;
}

void write_provenance(const fs::path& dir, const std::string& command, const ExperimentConfig& c, json extra = {}) {
  fs::create_directories(dir);
  json p = {{"command", command},
            {"config_hash", c.hash()},
            {"code_version", CCDM_CODE_VERSION},
            {"seed", c.seed},
            {"config", c.raw}};
  if (extra.is_object()) p.update(extra);
  std::ofstream(dir / "provenance.json") << p.dump(2) << '\n';
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw DependencyError("cannot read '" + p.string() + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw DataError("'" + p.string() + "' is not valid JSON: " + e.what());
  }
}

Dataset need_dataset(const fs::path& dir, const char* producer) {
  if (!fs::exists(dir / "labels.csv"))
    throw DependencyError("no dataset at '" + dir.string() + "' (labels.csv missing); run `ccdm " + producer + "` first");
  return load_dataset(dir);
}

EmbeddingNets need_embeddings(const ExperimentConfig& c) {
  if (!fs::exists(c.paths.embeddings / "embeddings.json"))
    throw DependencyError("no embedding nets at '" + c.paths.embeddings.string() +
                          "'; run `ccdm train-embeddings` first");
  return EmbeddingNets::load(c.paths.embeddings);
}

fs::path checkpoint_path(const ExperimentConfig& c, const CommandOptions& o) {
  const auto p = o.checkpoint.value_or(c.paths.model / "denoiser.pt");
  if (!fs::exists(p)) throw DependencyError("no denoiser checkpoint at '" + p.string() + "'; run `ccdm train` first");
  return p;
}

json checkpoint_meta(const fs::path& p) {
  const auto side = fs::path(p.string() + ".json");
  return fs::exists(side) ? read_json(side) : json::object();
}

// Refuses to mix artifacts produced under a different schedule or label space.
void check_hashes(const json& recorded, const std::string& what, const std::string& schedule_hash,
                  const std::string& labelspace_hash, bool allow) {
  std::string problem;
  if (recorded.contains("schedule_hash") && recorded["schedule_hash"] != schedule_hash)
    problem = "schedule";
  else if (recorded.contains("labelspace_hash") && recorded["labelspace_hash"] != labelspace_hash)
    problem = "label space";
  if (problem.empty()) return;
  const std::string msg = what + " was produced under a different " + problem + " than this config";
  if (!allow) throw ConfigError(msg + " (pass --allow-mismatch to evaluate anyway)");
  std::cerr << "warning: " << msg << '\n';
}

std::vector<double> eval_centers_raw(const ExperimentConfig& c, const LabelSpace& ls) {
  if (!c.eval.centers.empty()) return c.eval.centers;
  return EvalProtocol::even_centers(c.eval.n_centers, ls.raw_min, ls.raw_max);
}

double to_normalized(const LabelSpace& ls, double raw, const std::string& key) {
  const double y = ls.normalize(raw);
  if (y < -1e-12 || y > 1 + 1e-12)
    throw ConfigError(key + ": label " + std::to_string(raw) + " lies outside the training range [" +
                      std::to_string(ls.raw_min) + ", " + std::to_string(ls.raw_max) + "]");
  return std::clamp(y, 0.0, 1.0);
}

void check_shape(const ExperimentConfig& c, const Dataset& ds, DenoiserConfig& m) {
  m = c.model;
  m.shape = ds.shape();
  try {
    m.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("model: ") + e.what() + " for images of shape " + std::to_string(m.shape.channels) +
                      "x" + std::to_string(m.shape.height) + "x" + std::to_string(m.shape.width));
  }
}

}  // namespace

void cmd_make_dataset(const ExperimentConfig& c, const CommandOptions& o) {
  const auto& spec = c.dataset;
  if (spec.type == "directory") {
    const auto ds = need_dataset(spec.path, "make-dataset");
    const auto s = ds.shape();
    log(o, "dataset at " + spec.path.string() + ": " + std::to_string(ds.size()) + " images of " +
               std::to_string(s.channels) + "x" + std::to_string(s.height) + "x" + std::to_string(s.width));
    return;
  }
  Dataset ds = spec.type == "rotor" ? make_rotor_dataset(spec.rotor) : make_count_dataset(spec.count);
  const auto dir = c.paths.dataset;
  // only clear directories this tool wrote earlier
  if (fs::exists(dir / "generator.json")) fs::remove_all(dir);
  save_dataset(ds, dir);
  write_provenance(dir, "make-dataset", c, {{"n_images", ds.size()}});
  log(o, "wrote " + std::to_string(ds.size()) + " images to " + dir.string());
}

void cmd_train_embeddings(const ExperimentConfig& c, const CommandOptions& o) {
  const auto ds = need_dataset(c.paths.dataset, "make-dataset");
  const auto ls = build_labelspace(ds.raw_labels, c.m_kappa);
  log(o, "training embedding nets on " + std::to_string(ds.size()) + " images (" + std::to_string(ls.distinct.size()) +
             " distinct labels)");
  const auto nets = train_embeddings(ds.images, ls.labels, ls.distinct, c.embeddings);
  nets.save(c.paths.embeddings);
  std::ofstream(c.paths.embeddings / "labelspace.json") << ls.to_json().dump(2) << '\n';
  write_provenance(c.paths.embeddings, "train-embeddings", c, {{"labelspace_hash", hash_of(ls.to_json())}});
  log(o, "saved embedding nets to " + c.paths.embeddings.string());
}

void cmd_train(const ExperimentConfig& c, const CommandOptions& o) {
  const auto ds = need_dataset(c.paths.dataset, "make-dataset");
  const auto ls = build_labelspace(ds.raw_labels, c.m_kappa);
  const auto nets = need_embeddings(c);
  if (nets.shape != ds.shape()) throw ConfigError("embedding nets were trained on a different image shape");
  DenoiserConfig m;
  check_shape(c, ds, m);
  auto tc = c.train;
  tc.out_dir = c.paths.model;
  tc.validate(ls);
  const auto s = make_cosine_schedule(c.T);
  Denoiser f(m, c.T, mix64(tc.seed ^ stream_id("init")));
  const int every = std::max(1, tc.steps / 20);
  log(o, "training " + to_string(m.pred_type) + "-prediction denoiser for " + std::to_string(tc.steps) + " steps");
  const auto r = train_loop(f, ds, ls, nets, s, tc, [&](const LossRecord& rec) {
    if (rec.step % every == 0 || rec.step == tc.steps)
      log(o, "  step " + std::to_string(rec.step) + "/" + std::to_string(tc.steps) + "  loss " + std::to_string(rec.loss));
  });
  if (tc.steps == 0) f.save(c.paths.model / "denoiser.pt", {{"schedule", schedule_json(s)}, {"labelspace", ls.to_json()}});
  write_provenance(c.paths.model, "train", c,
                   {{"schedule_hash", hash_of(schedule_json(s))},
                    {"labelspace_hash", hash_of(ls.to_json())},
                    {"fallback_rows", r.fallback_total},
                    {"retries", r.retries}});
  if (r.fallback_total > 0) log(o, "note: " + std::to_string(r.fallback_total) + " rows fell back to the nearest label");
  log(o, "saved " + (c.paths.model / "denoiser.pt").string());
}

void cmd_sample(const ExperimentConfig& c, const CommandOptions& o) {
  const auto nets = need_embeddings(c);
  LabelSpace ls;
  std::string schedule_hash, labelspace_hash;
  SampleResult res;
  if (o.generator) {
    if (!fs::exists(*o.generator)) throw DependencyError("no generator at '" + o.generator->string() + "'; run `ccdm distill` first");
    ls = LabelSpace::from_json(read_json(c.paths.embeddings / "labelspace.json"));
  } else {
    const auto meta = checkpoint_meta(checkpoint_path(c, o));
    if (!meta.contains("labelspace")) throw DataError("checkpoint metadata lacks the label space");
    ls = LabelSpace::from_json(meta["labelspace"]);
    schedule_hash = hash_of(meta["schedule"]);
    labelspace_hash = hash_of(meta["labelspace"]);
    if (meta["schedule"]["T"].get<int>() != c.T && !o.allow_mismatch)
      throw ConfigError("schedule.T = " + std::to_string(c.T) + " but the checkpoint was trained with T = " +
                        std::to_string(meta["schedule"]["T"].get<int>()));
  }
  std::vector<double> raw = c.sample.labels.empty() ? eval_centers_raw(c, ls) : c.sample.labels;
  SampleRequest req;
  for (double r : raw) req.y_targets.push_back(to_normalized(ls, r, "sample.labels"));
  req.n_per_label = c.sample.n_per_label.value_or(c.eval.n_per_center);
  req.T_prime = c.sample.T_prime;
  req.gamma = c.sample.gamma;
  req.sampler = c.sample.sampler;
  req.seed = mix64(c.seed ^ stream_id("sample"));
  req.batch_size = c.sample.batch_size;

  if (o.generator) {
    auto G = load_generator(*o.generator);
    res.images = generate(G, nets, req.y_targets, req.n_per_label, req.seed, req.batch_size).clamp(-1.0, 1.0);
    for (std::size_t li = 0; li < req.y_targets.size(); ++li)
      for (int k = 0; k < req.n_per_label; ++k) {
        res.labels.push_back(req.y_targets[li]);
        res.label_index.push_back(static_cast<std::int64_t>(li));
        res.image_index.push_back(k);
      }
  } else {
    auto f = Denoiser::load(checkpoint_path(c, o));
    const auto s = make_cosine_schedule(f.T());
    log(o, "sampling " + std::to_string(req.y_targets.size()) + " labels x " + std::to_string(req.n_per_label) +
               " images with " + to_string(req.sampler) + "-" + std::to_string(req.T_prime) + ", gamma " +
               std::to_string(req.gamma));
    res = sample(f, nets, s, req);
  }
  if (fs::exists(c.paths.samples / "provenance.json")) fs::remove_all(c.paths.samples);
  write_samples(res, ls, c.paths.samples);
  json extra = {{"n_images", res.images.size(0)}, {"source", o.generator ? "generator" : "denoiser"}};
  if (!schedule_hash.empty()) {
    extra["schedule_hash"] = schedule_hash;
    extra["labelspace_hash"] = labelspace_hash;
  }
  write_provenance(c.paths.samples, "sample", c, extra);
  log(o, "wrote " + std::to_string(res.images.size(0)) + " images to " + c.paths.samples.string());
}

void cmd_distill(const ExperimentConfig& c, const CommandOptions& o) {
  const auto ds = need_dataset(c.paths.dataset, "make-dataset");
  const auto nets = need_embeddings(c);
  auto real = Denoiser::load(checkpoint_path(c, o));
  if (real.T() != c.T && !o.allow_mismatch) throw ConfigError("schedule.T differs from the checkpoint's T");
  const auto ls = build_labelspace(ds.raw_labels, c.distill.m_kappa);
  const auto s = make_cosine_schedule(real.T());
  auto dc = c.distill;
  dc.out_dir = c.paths.generator;
  DistillState st(real, nets, dc);
  log(o, "distilling for " + std::to_string(dc.steps) + " steps (vicinity " + (ls.kappa > 0 ? "hard" : "none") + ")");
  const int every = std::max(1, dc.steps / 20);
  std::ofstream trace;
  fs::create_directories(dc.out_dir);
  trace.open(dc.out_dir / "distill.ndjson");
  const auto recs = distill_loop(st, ds, ls, s);
  for (const auto& r : recs) {
    trace << json{{"step", r.step}, {"g_total", r.g.total}, {"dm", r.g.dm}, {"gan", r.g.gan},
                  {"fake_score", r.c.fake_score}, {"discriminator", r.c.discriminator}}
                 .dump()
          << '\n';
    if (r.step % every == 0 || r.step == dc.steps)
      log(o, "  step " + std::to_string(r.step) + "  dm " + std::to_string(r.g.dm) + "  gan " + std::to_string(r.g.gan) +
                 "  D " + std::to_string(r.c.discriminator));
  }
  if (dc.steps == 0) save_generator(st.G, dc, dc.out_dir / "generator.pt");
  write_provenance(c.paths.generator, "distill", c, {{"schedule_hash", hash_of(schedule_json(s))}});
  log(o, "saved " + (dc.out_dir / "generator.pt").string());
}

void cmd_eval(const ExperimentConfig& c, const CommandOptions& o) {
  const auto real_dir = o.real_dir.value_or(c.paths.dataset);
  const auto fake_dir = o.fake_dir.value_or(c.paths.samples);
  const auto real = need_dataset(real_dir, "make-dataset");
  const auto fake = need_dataset(fake_dir, "sample");
  if (real.shape() != fake.shape()) throw DataError("real and generated images differ in shape");
  const auto ls = build_labelspace(real.raw_labels, c.m_kappa);
  const auto s = make_cosine_schedule(c.T);
  const auto sh = hash_of(schedule_json(s)), lh = hash_of(ls.to_json());
  if (fs::exists(fake_dir / "provenance.json"))
    check_hashes(read_json(fake_dir / "provenance.json"), "'" + fake_dir.string() + "'", sh, lh, o.allow_mismatch);
  if (!o.fake_dir && fs::exists(c.paths.model / "denoiser.pt")) {
    const auto meta = checkpoint_meta(c.paths.model / "denoiser.pt");
    if (meta.contains("schedule") && meta.contains("labelspace"))
      check_hashes({{"schedule_hash", hash_of(meta["schedule"])}, {"labelspace_hash", hash_of(meta["labelspace"])}},
                   "the denoiser checkpoint", sh, lh, o.allow_mismatch);
  }

  // oracles are tied to the real set; retrain when it changes
  const std::string fingerprint = fnv1a_hex(lh + c.raw["eval"].dump() + std::to_string(real.size()));
  Oracles oracles;
  const auto stamp = c.paths.oracles / "oracles.json";
  if (fs::exists(stamp) && read_json(stamp).value("fingerprint", "") == fingerprint) {
    oracles = Oracles::load(c.paths.oracles);
    log(o, "reusing oracles from " + c.paths.oracles.string());
  } else {
    log(o, "training evaluation oracles on " + std::to_string(real.size()) + " real images");
    oracles = train_oracles(real, ls, c.eval.oracle);
    oracles.save(c.paths.oracles);
    std::ofstream(stamp) << json{{"fingerprint", fingerprint},
                                 {"regressor_train_mae", oracles.regressor_train_mae},
                                 {"classifier_train_acc", oracles.classifier_train_acc}}
                                .dump(2)
                         << '\n';
  }

  EvalProtocol p;
  for (double r : eval_centers_raw(c, ls)) p.centers.push_back(to_normalized(ls, r, "eval.centers"));
  p.n_per_center = c.eval.n_per_center;
  if (c.eval.r_sfid) {
    p.r_sfid = *c.eval.r_sfid / ls.raw_range();
  } else {
    p.r_sfid = p.centers.size() > 1 ? 0.5 * (p.centers.back() - p.centers.front()) / (p.centers.size() - 1) : 0.05;
  }
  std::vector<double> real_y, fake_y;
  for (double r : real.raw_labels) real_y.push_back(ls.normalize(r));
  for (double r : fake.raw_labels) fake_y.push_back(ls.normalize(r));
  auto rep = evaluate(p, oracles, ls, real.images, real_y, fake.images, fake_y);
  rep.meta["config_hash"] = c.hash();
  rep.meta["code_version"] = CCDM_CODE_VERSION;
  rep.meta["real_dir"] = fs::absolute(real_dir).string();
  rep.meta["fake_dir"] = fs::absolute(fake_dir).string();
  rep.meta["r_sfid_raw"] = p.r_sfid * ls.raw_range();
  fs::create_directories(c.paths.eval);
  rep.write(c.paths.eval / "report.json", c.paths.eval / "report.csv");
  write_provenance(c.paths.eval, "eval", c, {{"schedule_hash", sh}, {"labelspace_hash", lh}});
  CommandOptions po = o;
  po.report = c.paths.eval / "report.json";
  cmd_plot(c, po);
  std::ostringstream msg;
  msg << "SFID " << rep.sfid.mean << " (" << rep.sfid.std << ")  Label Score " << rep.label_score.mean << " ("
      << rep.label_score.std << ")";
  if (rep.diversity) msg << "  Diversity " << rep.diversity->mean << " (" << rep.diversity->std << ")";
  std::cout << msg.str() << std::endl;
}

void cmd_plot(const ExperimentConfig& c, const CommandOptions& o) {
  const auto report_path = o.report.value_or(c.paths.eval / "report.json");
  if (!fs::exists(report_path)) throw DependencyError("no report at '" + report_path.string() + "'; run `ccdm eval` first");
  const auto j = read_json(report_path);
  const auto problems = validate_report_json(j);
  if (!problems.empty()) throw DataError("'" + report_path.string() + "' is not a valid report: " + problems.front());
  const auto rep = EvalReport::from_json(j);
  const auto dir = report_path.parent_path();
  Series fid{"SFID", {}, {}}, ls{"Label Score", {}, {}}, div{"Diversity", {}, {}};
  for (const auto& cr : rep.centers) {
    for (auto* s : {&fid, &ls, &div}) s->x.push_back(cr.center_raw);
    fid.y.push_back(cr.fid);
    ls.y.push_back(cr.label_score);
    div.y.push_back(cr.diversity);
  }
  write_line_chart(dir / "fid_vs_label.svg", "FID within each window", "label", "FID", {fid});
  write_line_chart(dir / "label_score_vs_label.svg", "Label Score", "label", "mean |predicted - assigned|", {ls});
  if (rep.diversity) write_line_chart(dir / "diversity_vs_label.svg", "Diversity", "label", "entropy (nats)", {div});

  const auto trace = c.paths.model / "loss.ndjson";
  if (fs::exists(trace)) {
    Series loss{"loss", {}, {}};
    std::ifstream in(trace);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto r = json::parse(line);
      loss.x.push_back(r.at("step").get<double>());
      loss.y.push_back(r.at("loss").get<double>());
    }
    write_line_chart(dir / "train_loss.svg", "Training loss", "step", "loss", {loss});
  }
  log(o, "plots written to " + dir.string());
}

}  // namespace ccdm::cli
