#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "cue/rng.hpp"
#include "cue/tensor.hpp"

namespace cue {

struct PointCloud {
  Tensor coords;            // N x 3, meters
  std::vector<int> labels;  // empty, or one class id per point
  std::string id;

  PointCloud() = default;
  PointCloud(Tensor coords, std::vector<int> labels = {}, std::string id = {});

  std::size_t size() const { return coords.empty() ? 0 : coords.dim(0); }
  bool has_labels() const { return !labels.empty(); }
  const double* point(std::size_t i) const { return coords.data() + 3 * i; }
  void validate() const;
};

// CUE: X ~ N(mu, diag(lam)) over all points.
struct DiagGaussianEmbeddings {
  Tensor mu;   // N x D, unit-norm rows
  Tensor lam;  // N x D, > 0

  std::size_t size() const { return mu.dim(0); }
  std::size_t dims() const { return mu.dim(1); }
  void validate() const;
};

// CUE+: Sigma = P P^T + diag(lam) over the flattened N*D coordinates.
struct LowRankGaussianEmbeddings {
  Tensor mu;   // N x D
  Tensor lam;  // N x D
  Tensor p;    // N x D x K

  std::size_t size() const { return mu.dim(0); }
  std::size_t dims() const { return mu.dim(1); }
  std::size_t rank() const { return p.dim(2); }
  double factor(std::size_t i, std::size_t d, std::size_t k) const {
    return p[(i * dims() + d) * rank() + k];
  }
  void validate() const;
};

// Dense Sigma is only ever built for small models (tests, oracles).
inline constexpr std::size_t kMaxDenseCovariance = 4096;
Tensor dense_covariance(const LowRankGaussianEmbeddings& emb);

double point_uncertainty(const DiagGaussianEmbeddings& emb, std::size_t i);
double point_uncertainty(const LowRankGaussianEmbeddings& emb, std::size_t i);
std::vector<double> point_uncertainties(const DiagGaussianEmbeddings& emb);
std::vector<double> point_uncertainties(const LowRankGaussianEmbeddings& emb);
double correspondence_uncertainty(double u_i, double u_j);

// X = mu + reshape(P e1 + lam^(1/2) e2) with one shared e1 per sample.
std::vector<Tensor> sample_embeddings(const LowRankGaussianEmbeddings& emb, Rng& rng,
                                      std::size_t count);

// Parameters of one point taken from an embedding set.
struct GaussianPoint {
  std::vector<double> mean;    // D
  std::vector<double> var;     // D
  std::vector<double> factor;  // D*K, row-major (d, k); empty for diagonal sources
  int group = 0;               // points in the same group share the latent factor
  std::size_t index = 0;       // index within its set
};

struct TripletGaussian {
  GaussianPoint anchor;
  GaussianPoint positive;
  GaussianPoint negative;
  double margin = 0.0;

  std::size_t dims() const { return anchor.mean.size(); }
  std::size_t rank() const;  // 0 when no point carries a factor
  bool has_factors() const { return rank() > 0; }
  void validate() const;
};

// Non-owning view of an embedding set for triplet extraction.
struct EmbeddingView {
  const Tensor* mu = nullptr;
  const Tensor* lam = nullptr;
  const Tensor* p = nullptr;  // nullptr for diagonal sets
  int group = 0;

  EmbeddingView(const DiagGaussianEmbeddings& e, int group = 0);
  EmbeddingView(const LowRankGaussianEmbeddings& e, int group = 0);
  std::size_t size() const { return mu->dim(0); }
  std::size_t dims() const { return mu->dim(1); }
  GaussianPoint point(std::size_t i) const;
};

TripletGaussian extract_triplet(const EmbeddingView& anchor_set, std::size_t a,
                                const EmbeddingView& positive_set, std::size_t p,
                                const EmbeddingView& negative_set, std::size_t n, double margin);
TripletGaussian extract_triplet(const EmbeddingView& set, std::size_t a, std::size_t p,
                                std::size_t n, double margin);

// 3D x 3D covariance of the stacked (X_a, X_p, X_n). Identical points (same
// group and index) are the same random variable.
Tensor joint_covariance(const TripletGaussian& t);

}  // namespace cue
