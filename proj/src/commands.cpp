#include "cue/commands.hpp"

#include <chrono>

namespace cue {

namespace fs = std::filesystem;

GenOutput cmd_gen(const ExperimentConfig& cfg) {
  cfg.validate();
  write_dataset(cfg, cfg.data_dir());
  return {cfg.data_dir() / "manifest.json"};
}

namespace {

Dataset dataset_for(const ExperimentConfig& cfg) {
  Dataset ds = read_dataset(cfg.data_dir());
  if (ds.task != cfg.task)
    throw ConfigError(std::string("dataset in ") + cfg.data_dir().string() + " is for " + to_string(ds.task) +
                      ", config wants " + to_string(cfg.task));
  return ds;
}

}  // namespace

TrainOutput cmd_train(const ExperimentConfig& cfg) {
  cfg.validate();
  const Dataset ds = dataset_for(cfg);
  TrainResult res;
  try {
    if (cfg.task == Task::segmentation) {
      if (ds.train_scenes.empty()) throw ConfigError("dataset has no training scenes");
      if (cfg.net.kind == ModelKind::au)
        res = train_baseline_au(cfg.net, ds.train_scenes, cfg.segmentation);
      else
        res = train_segmentation(cfg.net, ds.train_scenes, cfg.net.kind, cfg.segmentation);
    } else {
      if (ds.train_pairs.empty()) throw ConfigError("dataset has no training pairs");
      res = train_matching(cfg.net, ds.train_pairs, cfg.net.kind, cfg.matching);
    }
  } catch (const NumericalError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }

  TrainOutput out;
  out.checkpoint = cfg.out / "checkpoint.bin";
  out.report = cfg.out / "train_report.json";
  res.report.checkpoint = out.checkpoint.generic_string();
  const json meta = {{"task", to_string(cfg.task)},
                     {"variant", cfg.variant},
                     {"seed", *cfg.seed},
                     {"config", to_json(cfg)},
                     {"loss_history", loss_history_json(res.report)}};
  save_checkpoint(out.checkpoint, {res.params, meta});
  out.report_json = train_report_json(cfg, res.report);
  write_file(out.report, report_bytes(out.report_json));
  return out;
}

EvalOutput cmd_eval(const ExperimentConfig& cfg, const std::optional<fs::path>& checkpoint) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const fs::path ck_path = checkpoint ? *checkpoint : cfg.out / "checkpoint.bin";
  const Checkpoint ck = load_checkpoint(ck_path);
  const std::string ck_task = ck.metadata.value("task", std::string());
  if (ck_task != to_string(cfg.task))
    throw ConfigError("checkpoint " + ck_path.string() + " was trained for '" + ck_task + "', config task is " +
                      to_string(cfg.task));
  const Dataset ds = dataset_for(cfg);
  const Method method = cfg.eval_method();

  std::vector<double> levels, raw;
  std::vector<int> correct;
  json predictive;
  try {
    if (cfg.task == Task::segmentation) {
      const auto ev = evaluate_segmentation(ck.params, ds.eval_scenes, method, cfg.eval);
      levels = ev.levels;
      raw = ev.raw;
      correct = ev.correct;
      std::size_t hits = 0, noisy = 0;
      for (int c : ev.correct) hits += c;
      for (int n : ev.noisy) noisy += n;
      predictive = {{"miou", ev.miou},
                    {"accuracy", ev.correct.empty() ? 0.0 : double(hits) / double(ev.correct.size())},
                    {"noisy_labels", noisy}};
    } else {
      const auto ev = evaluate_matching(ck.params, ds.eval_pairs, method, cfg.matching.inlier_threshold, cfg.eval);
      levels = ev.levels;
      raw = ev.raw;
      correct = ev.correct;
      double mean = 0.0;
      for (double h : ev.hit_ratios) mean += h;
      predictive = {{"fmr", ev.fmr},
                    {"hit_ratios", ev.hit_ratios},
                    {"mean_hit_ratio", ev.hit_ratios.empty() ? 0.0 : mean / double(ev.hit_ratios.size())}};
    }
  } catch (const NumericalError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }

  const auto summary = summarize_calibration(levels, correct, cfg.bins);
  json rep = calibration_json(summary);
  rep["kind"] = "calibration_report";
  rep["task"] = to_string(cfg.task);
  rep["variant"] = ck.metadata.value("variant", std::string());
  rep["method"] = to_string(method);
  rep["seed"] = *cfg.seed;
  rep["checkpoint"] = ck_path.generic_string();
  rep["config"] = to_json(cfg);
  rep["predictive"] = predictive;
  rep["timing"] = {{"wall_seconds", std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()}};
  stamp_content_hash(rep);

  const std::string m = to_string(method);
  EvalOutput out{cfg.out / ("calibration_report_" + m + ".json"), cfg.out / ("reliability_" + m + ".csv"),
                 cfg.out / ("eval_dump_" + m + ".csv"), rep};
  write_file(out.report, report_bytes(rep));
  write_file(out.reliability, reliability_csv(summary.bins));
  write_file(out.dump, eval_dump_csv(levels, correct, raw));
  return out;
}

EvalOutput cmd_calib(const fs::path& dump, std::size_t bins, const fs::path& out_dir) {
  if (bins == 0) throw ConfigError("bins must be >= 1");
  const EvalDump d = eval_dump_from_csv(read_file(dump));
  CalibrationSummary summary;
  try {
    summary = summarize_calibration(d.levels, d.correct, bins);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  json rep = calibration_json(summary);
  rep["kind"] = "calibration_report";
  rep["source"] = dump.generic_string();
  stamp_content_hash(rep);
  EvalOutput out{out_dir / "calib_report.json", out_dir / "reliability.csv", {}, rep};
  write_file(out.report, report_bytes(rep));
  write_file(out.reliability, reliability_csv(summary.bins));
  return out;
}

OracleOutput cmd_oracle(const std::string& suite, std::uint64_t seed, const fs::path& out_dir) {
  OracleTable table;
  try {
    table = run_oracle_suite(suite, seed);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  OracleOutput out{out_dir / ("oracle_" + suite + ".csv"), out_dir / ("oracle_" + suite + ".json"),
                   oracle_json(table), table.pass()};
  out.report_json["seed"] = seed;
  stamp_content_hash(out.report_json);
  write_file(out.table, table.csv());
  write_file(out.report, report_bytes(out.report_json));
  return out;
}

}  // namespace cue
