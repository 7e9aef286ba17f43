// cue: generate data, train, evaluate, re-bin and run oracles.
// Exit codes: 0 ok, 1 usage or config error, 2 numerical failure (including
// failed oracle gates).

#include <cstdio>
#include <exception>
#include <filesystem>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "cue/commands.hpp"

namespace {

constexpr int kOk = 0, kUsage = 1, kNumerical = 2;

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out, data, checkpoint, method;
  std::optional<std::size_t> bins;
};

cue::ExperimentConfig resolved(const Overrides& o, bool out_is_data) {
  auto cfg = cue::load_config(o.config);
  if (o.seed) cfg.seed = *o.seed;
  if (!o.out.empty()) (out_is_data ? cfg.data : cfg.out) = o.out;
  if (!o.data.empty()) cfg.data = o.data;
  if (!o.method.empty()) cfg.method = o.method;
  if (o.bins) cfg.bins = *o.bins;
  cfg.resolve();
  return cfg;
}

void add_common(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--config", o.config, "experiment config JSON")->required()->check(CLI::ExistingFile);
  cmd->add_option("--seed", o.seed, "overrides the config seed");
  cmd->add_option("--out", o.out, "output directory");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Calibrated uncertainty estimation for point-cloud embeddings"};
  app.require_subcommand(1);

  Overrides gen_o, train_o, eval_o;
  auto* gen = app.add_subcommand("gen", "generate a synthetic dataset");
  add_common(gen, gen_o);

  auto* train = app.add_subcommand("train", "train the configured variant");
  add_common(train, train_o);
  train->add_option("--data", train_o.data, "dataset directory");

  auto* eval = app.add_subcommand("eval", "score the eval split and emit calibration artifacts");
  add_common(eval, eval_o);
  eval->add_option("--data", eval_o.data, "dataset directory");
  eval->add_option("--checkpoint", eval_o.checkpoint, "checkpoint path (default: <out>/checkpoint.bin)");
  eval->add_option("--method", eval_o.method, "cue, cue_plus, se, au, mcd or rg");
  eval->add_option("--bins", eval_o.bins, "number of reliability bins");

  std::string calib_in, calib_out = ".";
  std::size_t calib_bins = cue::kDefaultBins;
  auto* calib = app.add_subcommand("calib", "re-bin an eval dump");
  calib->add_option("input", calib_in, "eval dump CSV")->required()->check(CLI::ExistingFile);
  calib->add_option("--bins", calib_bins, "number of reliability bins");
  calib->add_option("--out", calib_out, "output directory");

  std::string suite, oracle_out = ".";
  std::uint64_t oracle_seed = 0;
  auto* oracle = app.add_subcommand("oracle", "analytic vs Monte Carlo / finite-difference tables");
  oracle->add_option("suite", suite, "moments, probability, gradients or covariance")
      ->required()
      ->check(CLI::IsMember(cue::oracle_suite_names()));
  oracle->add_option("--seed", oracle_seed, "oracle seed");
  oracle->add_option("--out", oracle_out, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*gen) {
      const auto r = cue::cmd_gen(resolved(gen_o, true));
      std::printf("wrote %s\n", r.manifest.string().c_str());
    } else if (*train) {
      const auto r = cue::cmd_train(resolved(train_o, false));
      std::printf("wrote %s and %s (%zu parameters)\n", r.checkpoint.string().c_str(), r.report.string().c_str(),
                  r.report_json["parameter_count"].get<std::size_t>());
    } else if (*eval) {
      std::optional<std::filesystem::path> ck;
      if (!eval_o.checkpoint.empty()) ck = eval_o.checkpoint;
      const auto r = cue::cmd_eval(resolved(eval_o, false), ck);
      std::printf("%s: ece %.4f, wrote %s\n", r.report_json["method"].get<std::string>().c_str(),
                  r.report_json["ece"].get<double>(), r.report.string().c_str());
    } else if (*calib) {
      const auto r = cue::cmd_calib(calib_in, calib_bins, calib_out);
      std::printf("ece %.4f, wrote %s\n", r.report_json["ece"].get<double>(), r.report.string().c_str());
    } else if (*oracle) {
      const auto r = cue::cmd_oracle(suite, oracle_seed, oracle_out);
      std::printf("%s: %s, %zu failures, max error %.3g, wrote %s\n", suite.c_str(), r.pass ? "pass" : "FAIL",
                  r.report_json["failures"].get<std::size_t>(), r.report_json["max_error"].get<double>(),
                  r.table.string().c_str());
      return r.pass ? kOk : kNumerical;
    }
  } catch (const cue::NumericalError& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return kNumerical;
  } catch (const cue::ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kUsage;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kUsage;
  }
  return kOk;
}
