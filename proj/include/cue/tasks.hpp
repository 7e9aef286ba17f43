#pragma once

// Synthetic stand-ins for the segmentation and matching experiments: scene
// and pair generators, the training loops for each variant, and the
// evaluation pipelines that feed the calibration metrics.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cue/calibration.hpp"
#include "cue/embedding.hpp"
#include "cue/net.hpp"
#include "cue/rng.hpp"
#include "cue/sampling.hpp"
#include "cue/triplet.hpp"

namespace cue {

// Thrown when a loss turns non-finite during training.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Primitive { floor, sphere, low_box, tall_box };
const char* to_string(Primitive p);
Primitive primitive_from_string(const std::string& s);

struct SceneConfig {
  std::size_t points = 1024;
  std::size_t classes = 4;
  // One primitive per class; empty cycles floor, sphere, low box, tall box.
  std::vector<Primitive> primitives;
  double extent = 1.0;  // geometry scale; the floor spans 3 x 3 m at 1
  double noise_sigma = 0.01;
  double label_noise = 0.05;
  std::vector<double> class_label_noise;  // per-class override of label_noise
  std::uint64_t seed = 0;

  void validate() const;
  Primitive primitive(std::size_t cls) const;
  double flip_rate(std::size_t cls) const;
  // Points sampled for class c before noise: an even split.
  std::size_t budget(std::size_t cls) const;
};

struct SegmentationScene {
  PointCloud cloud;            // labels after flipping
  std::vector<int> clean;      // labels before flipping
  std::size_t flipped() const;
};

SegmentationScene gen_segmentation_scene(const SceneConfig& cfg, Rng& rng);
std::vector<SegmentationScene> gen_segmentation_scenes(const SceneConfig& cfg, std::size_t count,
                                                       std::uint64_t stream = 0);

struct PairConfig {
  std::size_t points = 512;
  double rotation_min_deg = 0.0;
  double rotation_max_deg = 360.0;
  bool vertical_axis = false;  // rotate about z instead of a random axis
  double scale_min = 0.8;
  double scale_max = 1.2;
  double translation = 0.5;  // per-axis bound
  double jitter = 0.0;
  // extra jitter per unit of horizontal distance from the cloud_i centroid,
  // a crude range-dependent sensor noise
  double range_jitter = 0.0;
  double overlap = 1.0;
  SceneConfig scene;  // geometry source; points is overridden
  std::uint64_t seed = 0;

  void validate() const;
};

struct MatchingPair {
  PointCloud cloud_i;
  PointCloud cloud_j;  // crop(scale R cloud_i + t) + jitter
  RigidTransform transform;
  std::vector<std::size_t> source;  // cloud_j row -> cloud_i row
};

MatchingPair gen_matching_pair(const PairConfig& cfg, Rng& rng);
std::vector<MatchingPair> gen_matching_pairs(const PairConfig& cfg, std::size_t count,
                                             std::uint64_t stream = 0);

struct EpochLoss {
  std::string stage;
  std::optional<double> ce;
  std::optional<double> hinge;
  std::optional<double> metric;
  double total = 0.0;
};

struct TrainReport {
  ModelKind variant = ModelKind::deterministic;
  std::vector<EpochLoss> epochs;
  double wall_seconds = 0.0;
  std::size_t parameter_count = 0;
  std::string checkpoint;
};

struct TrainResult {
  NetParams params;
  TrainReport report;
};

struct SegmentationOptions {
  std::size_t epochs = 30;
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 0.0;
  double lr_decay = 1.0;  // multiplied in after every epoch
  double lambda = 1.0;
  double margin = 0.2;
  std::size_t triplets = 256;
  std::size_t ces_neighbors = kDefaultCesNeighbors;
  MomentMode moments = MomentMode::exact;
  std::size_t n_mc = 10;  // au only
  std::uint64_t seed = 0;

  void validate() const;
};

// mean over n_mc draws z = logits + sqrt(var) eps of the softmax cross-entropy.
ad::Var sampled_logit_cross_entropy(const ad::Var& logits, const ad::Var& var,
                                    std::span<const int> labels, std::size_t n_mc, Rng& rng);
// mean max(0, |a - p|^2 - |a - n|^2 + margin) over the batch.
ad::Var triplet_hinge_loss(const ad::Var& anchor_set, const ad::Var& positive_set,
                           const ad::Var& negative_set, const TripletBatch& batch, double margin);

// variant: deterministic, cue or cue_plus; cfg.dropout > 0 trains with
// dropout (the MCD baseline).
TrainResult train_segmentation(NetConfig cfg, const std::vector<SegmentationScene>& scenes,
                               ModelKind variant, const SegmentationOptions& opts);
TrainResult train_baseline_au(NetConfig cfg, const std::vector<SegmentationScene>& scenes,
                              const SegmentationOptions& opts);

struct MatchingOptions {
  std::size_t stage1_epochs = 40;
  std::size_t stage2_epochs = 20;
  double lr = 0.05;
  double stage2_lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 0.0;
  double lr_decay = 1.0;
  double hinge_margin = 0.5;
  double margin = 0.1;  // L_M margin
  double inlier_threshold = kDefaultInlierThreshold;
  std::size_t triplets = 256;
  MomentMode moments = MomentMode::exact;
  std::uint64_t seed = 0;

  void validate() const;
};

// Stage 1 trains mu with a triplet hinge on CEM triplets; stage 2 freezes
// mu and trains lam (and p for cue_plus) with L_M. deterministic stops
// after stage 1.
TrainResult train_matching(NetConfig cfg, const std::vector<MatchingPair>& pairs,
                           ModelKind variant, const MatchingOptions& opts);

// Uncertainty scorers for evaluation.
enum class Method { cue, cue_plus, se, au, mcd, rg };
const char* to_string(Method m);
Method method_from_string(const std::string& s);

struct SegmentationEval {
  std::vector<int> predictions;
  std::vector<int> labels;      // labels the predictions are scored against
  std::vector<double> raw;      // unnormalized uncertainty per point
  std::vector<double> levels;   // in [0, 1]
  std::vector<int> correct;
  std::vector<int> noisy;       // 1 where the label was flipped
  double miou = 0.0;
};

struct EvalOptions {
  std::size_t mcd_passes = kDefaultMcdPasses;
  std::uint64_t seed = 0;
};

SegmentationEval evaluate_segmentation(const NetParams& params,
                                       const std::vector<SegmentationScene>& scenes,
                                       Method method, const EvalOptions& opts = {});

struct MatchingEval {
  std::vector<double> hit_ratios;  // per pair
  double fmr = 0.0;
  std::vector<double> raw;
  std::vector<double> levels;
  std::vector<int> correct;
};

MatchingEval evaluate_matching(const NetParams& params, const std::vector<MatchingPair>& pairs,
                               Method method, double inlier_threshold = kDefaultInlierThreshold,
                               const EvalOptions& opts = {});

}  // namespace cue
