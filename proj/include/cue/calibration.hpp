#pragma once

// Uncertainty levels, reliability bins, ECE and the predictive metrics used
// to evaluate segmentation and matching.

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cue/rng.hpp"
#include "cue/sampling.hpp"
#include "cue/tensor.hpp"

namespace cue {

// Min-max normalization; constant input maps to zeros.
std::vector<double> normalize_uncertainty(std::span<const double> values);

// -sum p log p / log C, with 0 log 0 = 0.
double softmax_entropy(std::span<const double> probs);
std::vector<double> softmax(std::span<const double> logits);

// y (1 - 0.5 q) + (1 - y) (0.5 q), as printed for the AU/MCD baselines.
double au_uncertainty_level(double q, int y);

struct McdResult {
  Tensor mean;      // N x C
  Tensor variance;  // N x C, unbiased over passes
  std::vector<int> prediction;
  std::vector<double> uncertainty;  // variance at the predicted class
};
inline constexpr std::size_t kDefaultMcdPasses = 40;
// passes: each N x C softmax probabilities.
McdResult mcd_aggregate(std::span<const Tensor> passes);

struct BinStats {
  double center = 0.0;
  double mean_level = 0.0;
  std::size_t count = 0;
  std::optional<double> accuracy;  // absent for empty bins
  double confidence() const { return 1.0 - mean_level; }
};

inline constexpr std::size_t kDefaultBins = 10;
// Equal-width bins over [0, 1]; level 1.0 goes to the last bin.
std::vector<BinStats> reliability_bins(std::span<const double> levels,
                                       std::span<const int> correct,
                                       std::size_t num_bins = kDefaultBins);

enum class EceWeighting { by_count, uniform };
// sum_b w_b |accuracy_b - confidence_b| over nonempty bins.
double ece(std::span<const BinStats> bins, EceWeighting weighting = EceWeighting::by_count);

// Spearman rank correlation between bin mean level and accuracy over
// nonempty bins (average ranks for ties). NaN with fewer than two bins.
double bin_level_accuracy_spearman(std::span<const BinStats> bins);
double spearman(std::span<const double> x, std::span<const double> y);

// Per-anchor outcome of nearest-neighbour matching in embedding space.
struct MatchOutcome {
  std::size_t anchor = 0;   // index in cloud i
  std::size_t matched = 0;  // embedding-space nearest neighbour in cloud j
  std::size_t truth = 0;    // ground-truth correspondent in cloud j
  bool hit = false;
};

// For every ground-truth pair, matches the anchor's embedding against
// embed_j and checks |x_matched - x_truth| <= threshold in cloud j coordinates.
std::vector<MatchOutcome> match_by_embedding(const Tensor& embed_i, const Tensor& embed_j,
                                             const Tensor& coords_j,
                                             const CorrespondenceSet& truth, double threshold);
double hit_ratio(std::span<const MatchOutcome> outcomes);

inline constexpr double kDefaultFmrRecall = 0.05;
double fmr(std::span<const double> hit_ratios, double recall_threshold = kDefaultFmrRecall);

// Mean IoU over classes present in predictions or labels.
double miou(std::span<const int> predictions, std::span<const int> labels, std::size_t classes);

std::vector<double> random_guess_levels(std::size_t n, Rng& rng);

}  // namespace cue
