#pragma once

// Run configuration, dataset and checkpoint files, and report documents.
//
// Point clouds are CSV (`x,y,z[,label]`, 9 significant digits) next to a
// manifest.json. Checkpoints are an 8-byte magic, a u32 format version, a u64
// header length, a JSON header (net config, tensor table, metadata) and the
// tensors as raw little-endian doubles in header order.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "cue/calibration.hpp"
#include "cue/net.hpp"
#include "cue/oracle.hpp"
#include "cue/tasks.hpp"

namespace cue {

using json = nlohmann::json;

// Bad configuration, unreadable input or unwritable output (exit code 1).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Task { segmentation, matching };
const char* to_string(Task t);
Task task_from_string(const std::string& s);

// Variants are model-plus-scorer names: deterministic, cue, cue_plus, se,
// au, mcd, rg.
ModelKind trained_kind(const std::string& variant);
Method default_method(const std::string& variant);
bool variant_valid_for(Task task, const std::string& variant);

struct ExperimentConfig {
  Task task = Task::segmentation;
  std::string variant = "cue";
  NetConfig net;  // classes and kind are derived from task and variant
  SceneConfig scene;
  PairConfig pair;
  std::size_t train_count = 64;
  std::size_t eval_count = 16;
  SegmentationOptions segmentation;
  MatchingOptions matching;
  EvalOptions eval;
  std::size_t bins = kDefaultBins;
  std::optional<std::string> method;  // eval scorer; default from variant
  std::optional<std::uint64_t> seed;
  std::filesystem::path out = "out";
  std::filesystem::path data;  // dataset directory; empty means `out`

  // Propagates the seed and classes into the sub-configs; call after
  // overriding seed or paths.
  void resolve();
  void validate() const;
  std::filesystem::path data_dir() const { return data.empty() ? out : data; }
  Method eval_method() const;
};

ExperimentConfig config_from_json(const json& j);
json to_json(const ExperimentConfig& c);
ExperimentConfig load_config(const std::filesystem::path& path);

json to_json(const NetConfig& c);
NetConfig net_config_from_json(const json& j);
json to_json(const RigidTransform& t);
RigidTransform transform_from_json(const json& j);

// Files
std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view bytes);
void ensure_dir(const std::filesystem::path& dir);

std::string cloud_to_csv(const PointCloud& cloud);
PointCloud cloud_from_csv(std::string_view text);
std::string labels_to_csv(const std::vector<int>& labels);
std::vector<int> labels_from_csv(std::string_view text);

struct Dataset {
  Task task = Task::segmentation;
  std::vector<SegmentationScene> train_scenes, eval_scenes;
  std::vector<MatchingPair> train_pairs, eval_pairs;
};

// Generates both splits and writes CSVs plus manifest.json under dir.
json write_dataset(const ExperimentConfig& cfg, const std::filesystem::path& dir);
Dataset read_dataset(const std::filesystem::path& dir);

// Checkpoints
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  NetParams params;
  json metadata;  // seed, variant, loss history, ...
};

std::string encode_checkpoint(const Checkpoint& ck);
Checkpoint decode_checkpoint(std::string_view bytes);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Reports. Top-level keys listed here are excluded from the content hash
// and from determinism comparisons.
inline constexpr const char* kNondeterministicFields[] = {"timing"};

// FNV-1a 64 of the compact dump, hex.
std::string fnv1a_hex(std::string_view bytes);
// Adds "content_hash" over everything except content_hash itself and the
// nondeterministic fields.
void stamp_content_hash(json& report);
std::string report_bytes(const json& report);  // pretty dump plus newline

json loss_history_json(const TrainReport& r);
json train_report_json(const ExperimentConfig& cfg, const TrainReport& r);

struct CalibrationSummary {
  std::vector<BinStats> bins;
  double ece = 0.0;
  double ece_uniform = 0.0;
  double spearman = 0.0;  // bin level vs bin accuracy, NaN when undefined
  std::size_t items = 0;
};
CalibrationSummary summarize_calibration(std::span<const double> levels, std::span<const int> correct,
                                         std::size_t bins);

// bin_center,mean_level,count,accuracy,confidence; empty bins leave accuracy blank.
std::string reliability_csv(const std::vector<BinStats>& bins);
json calibration_json(const CalibrationSummary& s);

// level,correct,raw per evaluated item, full precision, for re-binning.
std::string eval_dump_csv(std::span<const double> levels, std::span<const int> correct,
                          std::span<const double> raw);
struct EvalDump {
  std::vector<double> levels;
  std::vector<int> correct;
  std::vector<double> raw;
};
EvalDump eval_dump_from_csv(std::string_view text);

json oracle_json(const OracleTable& t);

}  // namespace cue
