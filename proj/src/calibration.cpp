#include "cue/calibration.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace cue {

std::vector<double> normalize_uncertainty(std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("normalize_uncertainty: empty input");
  for (double v : values)
    if (!(v >= 0.0) || !std::isfinite(v))
      throw std::invalid_argument("normalize_uncertainty: values must be finite and >= 0");
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  const double range = *hi - *lo;
  std::vector<double> out(values.size(), 0.0);
  if (range > 0.0)
    for (std::size_t i = 0; i < values.size(); ++i) out[i] = (values[i] - *lo) / range;
  return out;
}

double softmax_entropy(std::span<const double> probs) {
  const std::size_t c = probs.size();
  if (c < 2) throw std::invalid_argument("softmax_entropy: need at least two classes");
  double total = 0.0, h = 0.0;
  for (double p : probs) {
    if (!(p >= -1e-6) || !std::isfinite(p)) throw std::invalid_argument("softmax_entropy: invalid probability");
    total += p;
    if (p > 0.0) h -= p * std::log(p);
  }
  if (std::abs(total - 1.0) > 1e-6) throw std::invalid_argument("softmax_entropy: probabilities do not sum to 1");
  return std::clamp(h / std::log(static_cast<double>(c)), 0.0, 1.0);
}

std::vector<double> softmax(std::span<const double> logits) {
  const double m = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += p[i] = std::exp(logits[i] - m);
  for (auto& v : p) v /= s;
  return p;
}

double au_uncertainty_level(double q, int y) {
  if (!(q >= 0.0 && q <= 1.0)) throw std::invalid_argument("au_uncertainty_level: q must be in [0,1]");
  if (y != 0 && y != 1) throw std::invalid_argument("au_uncertainty_level: y must be 0 or 1");
  return y * (1.0 - 0.5 * q) + (1 - y) * (0.5 * q);
}

McdResult mcd_aggregate(std::span<const Tensor> passes) {
  if (passes.size() < 2) throw std::invalid_argument("mcd_aggregate: need at least two passes");
  const Shape& shape = passes.front().shape();
  if (shape.size() != 2) throw ShapeError("mcd_aggregate: passes must be N x C");
  for (const auto& p : passes) require_same_shape(passes.front(), p, "mcd pass");
  const std::size_t n = shape[0], c = shape[1];
  const double k = static_cast<double>(passes.size());
  McdResult r{Tensor(shape, 0.0), Tensor(shape, 0.0), std::vector<int>(n), std::vector<double>(n)};
  for (const auto& p : passes)
    for (std::size_t i = 0; i < p.size(); ++i) r.mean[i] += p[i] / k;
  for (const auto& p : passes)
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double d = p[i] - r.mean[i];
      r.variance[i] += d * d / (k - 1.0);
    }
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = r.mean.row(i);
    const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    r.prediction[i] = static_cast<int>(best);
    r.uncertainty[i] = r.variance[i * c + best];
  }
  return r;
}

std::vector<BinStats> reliability_bins(std::span<const double> levels, std::span<const int> correct,
                                       std::size_t num_bins) {
  if (levels.size() != correct.size()) throw ShapeError("reliability_bins: length mismatch");
  if (num_bins == 0) throw std::invalid_argument("reliability_bins: need at least one bin");
  std::vector<BinStats> bins(num_bins);
  std::vector<double> level_sum(num_bins, 0.0), hit_sum(num_bins, 0.0);
  const double width = 1.0 / static_cast<double>(num_bins);
  for (std::size_t b = 0; b < num_bins; ++b) bins[b].center = (static_cast<double>(b) + 0.5) * width;
  for (std::size_t i = 0; i < levels.size(); ++i) {
    const double l = levels[i];
    if (!(l >= 0.0 && l <= 1.0)) throw std::invalid_argument("reliability_bins: level outside [0,1]");
    const auto b = std::min(static_cast<std::size_t>(l * static_cast<double>(num_bins)), num_bins - 1);
    ++bins[b].count;
    level_sum[b] += l;
    hit_sum[b] += correct[i] ? 1.0 : 0.0;
  }
  for (std::size_t b = 0; b < num_bins; ++b) {
    if (bins[b].count == 0) continue;
    const double n = static_cast<double>(bins[b].count);
    bins[b].mean_level = level_sum[b] / n;
    bins[b].accuracy = hit_sum[b] / n;
  }
  return bins;
}

double ece(std::span<const BinStats> bins, EceWeighting weighting) {
  std::size_t total = 0, nonempty = 0;
  for (const auto& b : bins)
    if (b.count > 0) {
      total += b.count;
      ++nonempty;
    }
  if (total == 0) throw std::invalid_argument("ece: all bins are empty");
  double e = 0.0;
  for (const auto& b : bins) {
    if (b.count == 0) continue;
    const double w = weighting == EceWeighting::by_count
                         ? static_cast<double>(b.count) / static_cast<double>(total)
                         : 1.0 / static_cast<double>(nonempty);
    e += w * std::abs(*b.accuracy - b.confidence());
  }
  return e;
}

namespace {

std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double rank = 0.5 * static_cast<double>(i + j);
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = rank;
    i = j + 1;
  }
  return r;
}

}  // namespace

double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw ShapeError("spearman: length mismatch");
  if (x.size() < 2) return std::numeric_limits<double>::quiet_NaN();
  const auto rx = average_ranks(x), ry = average_ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return std::numeric_limits<double>::quiet_NaN();
  return sxy / std::sqrt(sxx * syy);
}

double bin_level_accuracy_spearman(std::span<const BinStats> bins) {
  std::vector<double> level, acc;
  for (const auto& b : bins)
    if (b.count > 0) {
      level.push_back(b.mean_level);
      acc.push_back(*b.accuracy);
    }
  return spearman(level, acc);
}

std::vector<MatchOutcome> match_by_embedding(const Tensor& embed_i, const Tensor& embed_j,
                                             const Tensor& coords_j,
                                             const CorrespondenceSet& truth, double threshold) {
  if (!(threshold >= 0.0)) throw std::invalid_argument("match_by_embedding: negative threshold");
  if (embed_i.rank() != 2 || embed_j.rank() != 2 || embed_i.dim(1) != embed_j.dim(1))
    throw ShapeError("match_by_embedding: embedding shapes differ");
  const double thr2 = threshold * threshold;
  std::vector<MatchOutcome> out;
  out.reserve(truth.size());
  for (const auto& [i, j] : truth.pairs) {
    MatchOutcome m;
    m.anchor = i;
    m.truth = j;
    m.matched = nearest_row(embed_j, embed_i.data() + i * embed_i.dim(1));
    double d2 = 0.0;
    for (int c = 0; c < 3; ++c) {
      const double d = coords_j[3 * m.matched + c] - coords_j[3 * j + c];
      d2 += d * d;
    }
    m.hit = d2 <= thr2;
    out.push_back(m);
  }
  return out;
}

double hit_ratio(std::span<const MatchOutcome> outcomes) {
  if (outcomes.empty()) throw std::invalid_argument("hit_ratio: empty evaluation set");
  std::size_t hits = 0;
  for (const auto& o : outcomes) hits += o.hit ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(outcomes.size());
}

double fmr(std::span<const double> hit_ratios, double recall_threshold) {
  if (hit_ratios.empty()) throw std::invalid_argument("fmr: empty input");
  std::size_t n = 0;
  for (double h : hit_ratios) n += h > recall_threshold ? 1 : 0;
  return static_cast<double>(n) / static_cast<double>(hit_ratios.size());
}

double miou(std::span<const int> predictions, std::span<const int> labels, std::size_t classes) {
  if (predictions.empty()) throw std::invalid_argument("miou: empty input");
  if (predictions.size() != labels.size()) throw ShapeError("miou: length mismatch");
  std::vector<std::size_t> tp(classes, 0), fp(classes, 0), fn(classes, 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int p = predictions[i], l = labels[i];
    if (p < 0 || l < 0 || static_cast<std::size_t>(p) >= classes ||
        static_cast<std::size_t>(l) >= classes)
      throw std::out_of_range("miou: class id out of range");
    if (p == l) {
      ++tp[p];
    } else {
      ++fp[p];
      ++fn[l];
    }
  }
  double sum = 0.0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    const std::size_t denom = tp[c] + fp[c] + fn[c];
    if (denom == 0) continue;
    sum += static_cast<double>(tp[c]) / static_cast<double>(denom);
    ++present;
  }
  return sum / static_cast<double>(present);
}

std::vector<double> random_guess_levels(std::size_t n, Rng& rng) {
  if (n == 0) throw std::invalid_argument("random_guess_levels: n must be >= 1");
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform();
  return v;
}

}  // namespace cue
