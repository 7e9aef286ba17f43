#pragma once

// Bayesian triplet loss over Gaussian point embeddings.
//
// For a triplet (X_a, X_p, X_n) the statistic
//   tau = sum_d (X_a^d - X_p^d)^2 - (X_a^d - X_n^d)^2
// is approximated as normal, so P(tau < -m) = Phi((-m - mu_tau) / sigma_tau).
// Squared distances are used throughout; the moment formulas require them.

#include <cstddef>
#include <span>
#include <vector>

#include "cue/autodiff.hpp"
#include "cue/embedding.hpp"
#include "cue/rng.hpp"
#include "cue/tensor.hpp"

namespace cue {

// Floor on sigma_tau for collapsed variances.
inline constexpr double kSigmaFloor = 1e-8;

struct TauMoments {
  double mean = 0.0;
  double var = 0.0;
};

// Mean and variance of T^d for one dimension, independent members.
TauMoments per_dim_moments(const TripletGaussian& t, std::size_t d);
// Sum of per-dimension moments; factors, if any, are ignored.
TauMoments tau_moments_diag(const TripletGaussian& t);

// Y ~ N(mean, diag + factor factor^T), moments of Y^T A Y.
struct QuadraticForm {
  Tensor form;               // M x M, symmetric
  std::vector<double> mean;  // M
  std::vector<double> diag;  // M, > 0
  Tensor factor;             // M x K (K may be 0)

  std::size_t size() const { return mean.size(); }
  std::size_t rank() const { return factor.empty() ? 0 : factor.dim(1); }
  void validate() const;
};

// Materializes S; used for M <= kDenseQuadraticFormLimit.
TauMoments quadratic_form_moments_dense(const QuadraticForm& q);
// Uses only the diagonal and factor parts of S.
TauMoments quadratic_form_moments_structured(const QuadraticForm& q);
inline constexpr std::size_t kDenseQuadraticFormLimit = 64;
TauMoments quadratic_form_moments(const QuadraticForm& q);

// The 3D-dimensional form over stacked (X_a, X_p, X_n). Members from
// different factor groups get disjoint latent columns.
QuadraticForm triplet_quadratic_form(const TripletGaussian& t);
TauMoments tau_moments_lowrank(const TripletGaussian& t);

double triplet_probability(const TauMoments& tm, double margin);

enum class MomentMode {
  exact,     // correlated moments when factors are present
  diagonal,  // factors folded into marginal variances, correlations ignored
};

TauMoments tau_moments(const TripletGaussian& t, MomentMode mode = MomentMode::exact);
// -(1/T) sum_t log P(tau_t < -margin)
double metric_loss(std::span<const TripletGaussian> triplets, double margin,
                   MomentMode mode = MomentMode::exact);

struct McEstimate {
  double estimate = 0.0;
  double std_error = 0.0;
};

struct McTauMoments {
  double mean = 0.0;
  double mean_std_error = 0.0;
  double var = 0.0;
  double var_std_error = 0.0;
};

// Draws from the exact joint Gaussian of the triplet, including factor
// correlations and identical members.
McEstimate mc_triplet_probability(const TripletGaussian& t, double margin, std::size_t n,
                                  Rng& rng);
McTauMoments mc_tau_moments(const TripletGaussian& t, std::size_t n, Rng& rng);

namespace ad {

// Differentiable embedding set. p, when present, is N x (K*D) with latent
// column k occupying columns [k*D, (k+1)*D).
struct EmbeddingVars {
  Var mu;
  Var lam;
  Var p;
  std::size_t rank = 0;
  int group = 0;
};

struct TripletIndices {
  std::span<const std::size_t> anchor;
  std::span<const std::size_t> positive;
  std::span<const std::size_t> negative;
};

struct TauVars {
  Var mean;  // (T)
  Var var;   // (T)
};

// Batched tau moments for triplets drawn from up to three embedding sets.
TauVars tau_moments(const EmbeddingVars& anchor_set, const EmbeddingVars& positive_set,
                    const EmbeddingVars& negative_set, const TripletIndices& idx,
                    MomentMode mode = MomentMode::exact);

Var metric_loss(const EmbeddingVars& anchor_set, const EmbeddingVars& positive_set,
                const EmbeddingVars& negative_set, const TripletIndices& idx, double margin,
                MomentMode mode = MomentMode::exact);

}  // namespace ad

}  // namespace cue
