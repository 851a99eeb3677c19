#pragma once

#include <filesystem>
#include <optional>

#include "config.hpp"

namespace ccdm::cli {

struct CommandOptions {
  std::optional<std::filesystem::path> checkpoint;  // sample, distill
  std::optional<std::filesystem::path> generator;   // sample from a one-step generator instead
  std::optional<std::filesystem::path> real_dir;    // eval
  std::optional<std::filesystem::path> fake_dir;    // eval
  std::optional<std::filesystem::path> report;      // plot
  bool allow_mismatch = false;
  bool quiet = false;
};

void cmd_make_dataset(const ExperimentConfig& c, const CommandOptions& o);
void cmd_train_embeddings(const ExperimentConfig& c, const CommandOptions& o);
void cmd_train(const ExperimentConfig& c, const CommandOptions& o);
void cmd_sample(const ExperimentConfig& c, const CommandOptions& o);
void cmd_distill(const ExperimentConfig& c, const CommandOptions& o);
void cmd_eval(const ExperimentConfig& c, const CommandOptions& o);
void cmd_plot(const ExperimentConfig& c, const CommandOptions& o);

}  // namespace ccdm::cli
