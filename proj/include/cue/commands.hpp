#pragma once

// The CLI subcommands as library calls. Each writes its artifacts under the
// configured directories and returns what it wrote.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "cue/io.hpp"

namespace cue {

struct GenOutput {
  std::filesystem::path manifest;
};
// Writes both splits to cfg.data_dir().
GenOutput cmd_gen(const ExperimentConfig& cfg);

struct TrainOutput {
  std::filesystem::path checkpoint;
  std::filesystem::path report;
  json report_json;
};
// Reads the train split and writes checkpoint.bin and train_report.json
// under cfg.out. Throws NumericalError on a non-finite loss.
TrainOutput cmd_train(const ExperimentConfig& cfg);

struct EvalOutput {
  std::filesystem::path report;
  std::filesystem::path reliability;
  std::filesystem::path dump;  // empty for calib
  json report_json;
};
// Scores the eval split with cfg.eval_method(); the checkpoint defaults to
// cfg.out / checkpoint.bin. Files are suffixed with the method name.
EvalOutput cmd_eval(const ExperimentConfig& cfg,
                    const std::optional<std::filesystem::path>& checkpoint = std::nullopt);

// Re-bins an eval dump.
EvalOutput cmd_calib(const std::filesystem::path& dump, std::size_t bins,
                     const std::filesystem::path& out);

struct OracleOutput {
  std::filesystem::path table;
  std::filesystem::path report;
  json report_json;
  bool pass = false;
};
OracleOutput cmd_oracle(const std::string& suite, std::uint64_t seed, const std::filesystem::path& out);

}  // namespace cue
