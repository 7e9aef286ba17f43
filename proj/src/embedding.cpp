#include "cue/embedding.hpp"

#include <cmath>
#include <stdexcept>

namespace cue {

PointCloud::PointCloud(Tensor c, std::vector<int> l, std::string i)
    : coords(std::move(c)), labels(std::move(l)), id(std::move(i)) {
  validate();
}

void PointCloud::validate() const {
  if (coords.rank() != 2 || coords.dim(1) != 3) throw ShapeError("point cloud must be N x 3");
  if (coords.dim(0) == 0) throw std::invalid_argument("point cloud must not be empty");
  if (!coords.all_finite()) throw std::invalid_argument("point cloud has non-finite coordinates");
  if (!labels.empty() && labels.size() != size())
    throw ShapeError("point cloud label count differs from point count");
}

namespace {

void validate_mean_var(const Tensor& mu, const Tensor& lam) {
  if (mu.rank() != 2) throw ShapeError("embedding mean must be N x D");
  require_same_shape(mu, lam, "embedding variance");
  for (std::size_t i = 0; i < mu.dim(0); ++i) {
    double s = 0.0;
    for (double v : mu.row(i)) s += v * v;
    if (std::abs(std::sqrt(s) - 1.0) > 1e-6)
      throw std::invalid_argument("embedding mean row " + std::to_string(i) + " is not unit norm");
  }
  for (double v : lam.values())
    if (!(v > 0.0)) throw std::invalid_argument("embedding variances must be positive");
}

}  // namespace

void DiagGaussianEmbeddings::validate() const { validate_mean_var(mu, lam); }

void LowRankGaussianEmbeddings::validate() const {
  validate_mean_var(mu, lam);
  if (p.rank() != 3 || p.dim(0) != mu.dim(0) || p.dim(1) != mu.dim(1) || p.dim(2) == 0)
    throw ShapeError("scale factor must be N x D x K");
  if (!p.all_finite()) throw std::invalid_argument("scale factor has non-finite entries");
}

Tensor dense_covariance(const LowRankGaussianEmbeddings& emb) {
  const std::size_t m = emb.size() * emb.dims();
  if (m > kMaxDenseCovariance) throw std::length_error("dense covariance too large");
  const std::size_t k = emb.rank();
  Tensor s(Shape{m, m}, 0.0);
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t c = 0; c < m; ++c) {
      double v = 0.0;
      for (std::size_t j = 0; j < k; ++j) v += emb.p[r * k + j] * emb.p[c * k + j];
      s[r * m + c] = v;
    }
    s[r * m + r] += emb.lam[r];
  }
  return s;
}

double point_uncertainty(const DiagGaussianEmbeddings& emb, std::size_t i) {
  if (i >= emb.size()) throw std::out_of_range("point_uncertainty: index out of range");
  double s = 0.0;
  for (double v : emb.lam.row(i)) s += v;
  return s / static_cast<double>(emb.dims());
}

double point_uncertainty(const LowRankGaussianEmbeddings& emb, std::size_t i) {
  if (i >= emb.size()) throw std::out_of_range("point_uncertainty: index out of range");
  const std::size_t d_count = emb.dims(), k_count = emb.rank();
  double s = 0.0;
  for (std::size_t d = 0; d < d_count; ++d) {
    s += emb.lam[i * d_count + d];
    for (std::size_t k = 0; k < k_count; ++k) {
      const double f = emb.factor(i, d, k);
      s += f * f;
    }
  }
  return s / static_cast<double>(d_count);
}

std::vector<double> point_uncertainties(const DiagGaussianEmbeddings& emb) {
  std::vector<double> u(emb.size());
  for (std::size_t i = 0; i < u.size(); ++i) u[i] = point_uncertainty(emb, i);
  return u;
}

std::vector<double> point_uncertainties(const LowRankGaussianEmbeddings& emb) {
  std::vector<double> u(emb.size());
  for (std::size_t i = 0; i < u.size(); ++i) u[i] = point_uncertainty(emb, i);
  return u;
}

double correspondence_uncertainty(double u_i, double u_j) {
  if (u_i < 0.0 || u_j < 0.0)
    throw std::invalid_argument("correspondence_uncertainty: negative point uncertainty");
  return u_i + u_j;
}

std::vector<Tensor> sample_embeddings(const LowRankGaussianEmbeddings& emb, Rng& rng,
                                      std::size_t count) {
  if (count == 0) throw std::invalid_argument("sample_embeddings: count must be >= 1");
  const std::size_t m = emb.size() * emb.dims(), k = emb.rank();
  std::vector<Tensor> out;
  out.reserve(count);
  std::vector<double> latent(k);
  for (std::size_t s = 0; s < count; ++s) {
    for (auto& e : latent) e = rng.normal();
    Tensor x = emb.mu;
    for (std::size_t r = 0; r < m; ++r) {
      double v = std::sqrt(emb.lam[r]) * rng.normal();
      for (std::size_t j = 0; j < k; ++j) v += emb.p[r * k + j] * latent[j];
      x[r] += v;
    }
    out.push_back(std::move(x));
  }
  return out;
}

std::size_t TripletGaussian::rank() const {
  const std::size_t d = dims();
  for (const auto* g : {&anchor, &positive, &negative})
    if (!g->factor.empty()) return g->factor.size() / d;
  return 0;
}

void TripletGaussian::validate() const {
  const std::size_t d = dims();
  if (d == 0) throw std::invalid_argument("triplet has zero dimensions");
  const std::size_t k = rank();
  for (const auto* g : {&anchor, &positive, &negative}) {
    if (g->mean.size() != d || g->var.size() != d)
      throw ShapeError("triplet members have different dimensions");
    if (!g->factor.empty() && g->factor.size() != d * k)
      throw ShapeError("triplet members have different factor ranks");
    for (double v : g->var)
      if (!(v > 0.0)) throw std::invalid_argument("triplet variances must be positive");
  }
  if (!(margin >= 0.0)) throw std::invalid_argument("triplet margin must be >= 0");
}

EmbeddingView::EmbeddingView(const DiagGaussianEmbeddings& e, int g)
    : mu(&e.mu), lam(&e.lam), p(nullptr), group(g) {}

EmbeddingView::EmbeddingView(const LowRankGaussianEmbeddings& e, int g)
    : mu(&e.mu), lam(&e.lam), p(&e.p), group(g) {}

GaussianPoint EmbeddingView::point(std::size_t i) const {
  if (i >= size()) throw std::out_of_range("embedding index out of range");
  const std::size_t d = dims();
  GaussianPoint g;
  g.mean.assign(mu->data() + i * d, mu->data() + (i + 1) * d);
  g.var.assign(lam->data() + i * d, lam->data() + (i + 1) * d);
  if (p) {
    const std::size_t k = p->dim(2);
    g.factor.assign(p->data() + i * d * k, p->data() + (i + 1) * d * k);
  }
  g.group = group;
  g.index = i;
  return g;
}

TripletGaussian extract_triplet(const EmbeddingView& anchor_set, std::size_t a,
                                const EmbeddingView& positive_set, std::size_t p,
                                const EmbeddingView& negative_set, std::size_t n, double margin) {
  if (anchor_set.dims() != positive_set.dims() || anchor_set.dims() != negative_set.dims())
    throw ShapeError("extract_triplet: embedding sets differ in dimension");
  const bool any_factor = anchor_set.p || positive_set.p || negative_set.p;
  TripletGaussian t{anchor_set.point(a), positive_set.point(p), negative_set.point(n), margin};
  if (any_factor) {
    // A diagonal member mixed with low-rank members carries zero factors.
    std::size_t k = 0;
    for (const auto* v : {&anchor_set, &positive_set, &negative_set})
      if (v->p) k = v->p->dim(2);
    for (auto* g : {&t.anchor, &t.positive, &t.negative}) {
      if (g->factor.empty()) g->factor.assign(t.dims() * k, 0.0);
      if (g->factor.size() != t.dims() * k)
        throw ShapeError("extract_triplet: embedding sets differ in factor rank");
    }
  }
  t.validate();
  return t;
}

TripletGaussian extract_triplet(const EmbeddingView& set, std::size_t a, std::size_t p,
                                std::size_t n, double margin) {
  return extract_triplet(set, a, set, p, set, n, margin);
}

Tensor joint_covariance(const TripletGaussian& t) {
  const std::size_t d = t.dims(), k = t.rank(), m = 3 * d;
  const GaussianPoint* members[3] = {&t.anchor, &t.positive, &t.negative};
  Tensor s(Shape{m, m}, 0.0);
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t c = 0; c < 3; ++c) {
      const GaussianPoint& gr = *members[r];
      const GaussianPoint& gc = *members[c];
      const bool same_group = gr.group == gc.group;
      const bool same_point = same_group && gr.index == gc.index;
      for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
          double v = 0.0;
          if (same_group && k > 0)
            for (std::size_t q = 0; q < k; ++q) v += gr.factor[i * k + q] * gc.factor[j * k + q];
          if (same_point && i == j) v += gr.var[i];
          s[(r * d + i) * m + (c * d + j)] = v;
        }
      }
    }
  }
  return s;
}

}  // namespace cue
