#include <cstdlib>
#include <iostream>

#include <CLI11.hpp>
#include <torch/torch.h>

#include "ccdm/errors.hpp"
#include "commands.hpp"
#include "config.hpp"

using namespace ccdm;
using namespace ccdm::cli;

namespace {

enum Exit { kOk = 0, kFailure = 1, kConfig = 2, kDependency = 3, kNumerical = 4 };

std::optional<std::string> env(const char* name) {
  const char* v = std::getenv(name);
  if (!v || !*v) return std::nullopt;
  return std::string(v);
}

template <class T>
std::optional<T> env_number(const char* name) {
  const auto v = env(name);
  if (!v) return std::nullopt;
  try {
    std::size_t used = 0;
    const auto n = std::stoull(*v, &used);
    if (used != v->size()) throw std::invalid_argument(*v);
    return static_cast<T>(n);
  } catch (const std::exception&) {
    throw ConfigError(std::string(name) + " must be a non-negative integer (got '" + *v + "')");
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Continuous conditional diffusion: datasets, training, sampling, distillation and evaluation"};
  app.require_subcommand(1);
  std::string config_file;
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
  std::optional<std::string> out;
  CommandOptions opts;
  app.add_option("-c,--config", config_file, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "override the experiment seed (env CCDM_SEED)");
  app.add_option("--workers", workers, "intra-op threads (env CCDM_WORKERS)")->check(CLI::PositiveNumber);
  app.add_option("--out", out, "override paths.root");
  app.add_flag("-q,--quiet", opts.quiet, "no progress output");

  auto* make = app.add_subcommand("make-dataset", "synthesize or check the dataset");
  auto* emb = app.add_subcommand("train-embeddings", "train the label embedding nets");
  auto* train = app.add_subcommand("train", "train the denoiser");
  auto* smp = app.add_subcommand("sample", "generate images");
  auto* dst = app.add_subcommand("distill", "distill the denoiser into a one-step generator");
  auto* ev = app.add_subcommand("eval", "SFID, Label Score and Diversity of generated images");
  auto* plt = app.add_subcommand("plot", "render SVG plots from an evaluation report");

  std::string checkpoint, generator, real_dir, fake_dir, report;
  smp->add_option("--checkpoint", checkpoint, "denoiser checkpoint (default paths.model/denoiser.pt)");
  smp->add_option("--generator", generator, "sample from a distilled generator instead");
  smp->add_flag("--allow-mismatch", opts.allow_mismatch, "accept a checkpoint built under another schedule");
  dst->add_option("--checkpoint", checkpoint, "denoiser checkpoint (default paths.model/denoiser.pt)");
  dst->add_flag("--allow-mismatch", opts.allow_mismatch, "accept a checkpoint built under another schedule");
  ev->add_option("--real", real_dir, "real image directory (default paths.dataset)");
  ev->add_option("--fake", fake_dir, "generated image directory (default paths.samples)");
  ev->add_flag("--allow-mismatch", opts.allow_mismatch, "evaluate despite schedule/label space hash mismatch");
  plt->add_option("--report", report, "report.json (default paths.eval/report.json)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }

  auto set = [](const std::string& s) { return s.empty() ? std::nullopt : std::optional<std::filesystem::path>(s); };
  opts.checkpoint = set(checkpoint);
  opts.generator = set(generator);
  opts.real_dir = set(real_dir);
  opts.fake_dir = set(fake_dir);
  opts.report = set(report);

  try {
    Overrides ov;
    ov.seed = seed ? seed : env_number<std::uint64_t>("CCDM_SEED");
    ov.workers = workers ? workers : env_number<int>("CCDM_WORKERS");
    if (out) ov.root = *out;
    const auto cfg = load_config(config_file, ov);
    torch::set_num_threads(cfg.workers);

    if (*make) cmd_make_dataset(cfg, opts);
    else if (*emb) cmd_train_embeddings(cfg, opts);
    else if (*train) cmd_train(cfg, opts);
    else if (*smp) cmd_sample(cfg, opts);
    else if (*dst) cmd_distill(cfg, opts);
    else if (*ev) cmd_eval(cfg, opts);
    else if (*plt) cmd_plot(cfg, opts);
    return kOk;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const DependencyError& e) {
    std::cerr << "missing dependency: " << e.what() << '\n';
    return kDependency;
  } catch (const DataError& e) {
    std::cerr << "bad input data: " << e.what() << '\n';
    return kDependency;
  } catch (const NumericalFault& e) {
    std::cerr << "numerical fault: " << e.what() << '\n';
    return kNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFailure;
  }
}
