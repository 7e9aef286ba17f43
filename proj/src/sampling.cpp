#include "cue/sampling.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <unordered_set>

#include "cue/simd/kernels.hpp"

namespace cue {

RigidTransform RigidTransform::from_axis_angle(std::array<double, 3> axis, double angle,
                                               std::array<double, 3> translation, double scale) {
  const double len = std::sqrt(axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]);
  if (!(len > 0.0)) throw std::invalid_argument("rotation axis must be nonzero");
  const double x = axis[0] / len, y = axis[1] / len, z = axis[2] / len;
  const double c = std::cos(angle), s = std::sin(angle), v = 1.0 - c;
  RigidTransform t;
  t.rotation = {c + x * x * v,     x * y * v - z * s, x * z * v + y * s,
                y * x * v + z * s, c + y * y * v,     y * z * v - x * s,
                z * x * v - y * s, z * y * v + x * s, c + z * z * v};
  t.translation = translation;
  t.scale = scale;
  t.validate();
  return t;
}

void RigidTransform::validate() const {
  const auto& r = rotation;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double v = 0.0;
      for (int k = 0; k < 3; ++k) v += r[k * 3 + i] * r[k * 3 + j];
      if (std::abs(v - (i == j ? 1.0 : 0.0)) > 1e-9)
        throw std::invalid_argument("rotation is not orthonormal");
    }
  const double det = r[0] * (r[4] * r[8] - r[5] * r[7]) - r[1] * (r[3] * r[8] - r[5] * r[6]) +
                     r[2] * (r[3] * r[7] - r[4] * r[6]);
  if (det < 0.0) throw std::invalid_argument("rotation has determinant -1");
  if (!(scale > 0.0) || !std::isfinite(scale)) throw std::invalid_argument("scale must be > 0");
  for (double v : translation)
    if (!std::isfinite(v)) throw std::invalid_argument("translation must be finite");
}

std::array<double, 3> RigidTransform::apply(const double* x) const {
  std::array<double, 3> y{};
  for (int i = 0; i < 3; ++i)
    y[i] = scale * (rotation[i * 3] * x[0] + rotation[i * 3 + 1] * x[1] +
                    rotation[i * 3 + 2] * x[2]) +
           translation[i];
  return y;
}

Tensor RigidTransform::apply(const Tensor& coords) const {
  if (coords.rank() != 2 || coords.dim(1) != 3) throw ShapeError("transform expects N x 3");
  Tensor out(coords.shape());
  for (std::size_t i = 0; i < coords.dim(0); ++i) {
    const auto y = apply(coords.data() + 3 * i);
    std::copy(y.begin(), y.end(), out.data() + 3 * i);
  }
  return out;
}

namespace {

void smallest_k(std::vector<std::size_t>& idx, const std::vector<double>& dist, std::size_t k) {
  auto less = [&](std::size_t a, std::size_t b) {
    return dist[a] < dist[b] || (dist[a] == dist[b] && a < b);
  };
  if (k < idx.size()) {
    std::nth_element(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), less);
    idx.resize(k);
  }
  std::sort(idx.begin(), idx.end(), less);
}

}  // namespace

std::vector<std::size_t> knn_rows(const Tensor& rows, const double* query, std::size_t k) {
  if (rows.rank() != 2) throw ShapeError("knn expects an N x dim matrix");
  const std::size_t n = rows.dim(0);
  if (k > n) throw std::invalid_argument("knn: k exceeds the number of points");
  std::vector<double> dist(n);
  simd::active().squared_distances(query, rows.data(), n, rows.dim(1), dist.data());
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  smallest_k(idx, dist, k);
  return idx;
}

std::size_t nearest_row(const Tensor& rows, const double* query) {
  if (rows.rank() != 2 || rows.dim(0) == 0) throw ShapeError("nearest_row expects N >= 1 rows");
  const std::size_t n = rows.dim(0);
  std::vector<double> dist(n);
  simd::active().squared_distances(query, rows.data(), n, rows.dim(1), dist.data());
  // First minimum, so ties go to the lower index.
  return static_cast<std::size_t>(std::min_element(dist.begin(), dist.end()) - dist.begin());
}

std::vector<std::size_t> knn(const PointCloud& cloud, const double* query, std::size_t k) {
  return knn_rows(cloud.coords, query, k);
}

std::vector<std::size_t> knn_graph(const Tensor& rows, std::size_t k) {
  if (rows.rank() != 2) throw ShapeError("knn_graph expects an N x dim matrix");
  const std::size_t n = rows.dim(0), dim = rows.dim(1);
  if (k + 1 > n) throw std::invalid_argument("knn_graph: k must be smaller than N");
  std::vector<std::size_t> graph(n * k);
  std::vector<double> dist(n);
  std::vector<std::size_t> idx;
  const auto& kern = simd::active();
  for (std::size_t i = 0; i < n; ++i) {
    kern.squared_distances(rows.data() + i * dim, rows.data(), n, dim, dist.data());
    dist[i] = std::numeric_limits<double>::infinity();
    idx.resize(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    smallest_k(idx, dist, k);
    std::copy(idx.begin(), idx.end(), graph.begin() + static_cast<std::ptrdiff_t>(i * k));
  }
  return graph;
}

std::vector<std::size_t> canonical_order(const PointCloud& cloud) {
  std::vector<std::size_t> order(cloud.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const double* pa = cloud.point(a);
    const double* pb = cloud.point(b);
    for (int c = 0; c < 3; ++c)
      if (pa[c] != pb[c]) return pa[c] < pb[c];
    return a < b;
  });
  return order;
}

CesIndex::CesIndex(const PointCloud& cloud, std::size_t k) : k_(k) {
  cloud.validate();
  if (k < 2) throw std::invalid_argument("CES neighbourhood size must be >= 2");
  order_ = canonical_order(cloud);
  Tensor sorted(Shape{cloud.size(), 3});
  for (std::size_t r = 0; r < order_.size(); ++r)
    std::copy_n(cloud.point(order_[r]), 3, sorted.data() + 3 * r);
  graph_ = knn_graph(sorted, k);
}

TripletBatch sample_ces(const PointCloud& cloud, std::size_t t_target, std::size_t k, Rng& rng) {
  if (!cloud.has_labels()) throw std::invalid_argument("sample_ces: cloud has no labels");
  return sample_ces(CesIndex(cloud, k), cloud.labels, t_target, rng);
}

TripletBatch sample_ces(const CesIndex& index, const std::vector<int>& labels,
                        std::size_t t_target, Rng& rng) {
  if (labels.empty()) throw std::invalid_argument("sample_ces: cloud has no labels");
  if (labels.size() != index.size()) throw ShapeError("sample_ces: label count mismatch");
  TripletBatch batch;
  std::vector<std::size_t> same, diff;
  const std::size_t budget = 4 * t_target;
  for (std::size_t attempt = 0; attempt < budget && batch.size() < t_target; ++attempt) {
    const std::size_t r = rng.uniform_index(index.size());
    const std::size_t a = index.original(r);
    same.clear();
    diff.clear();
    const std::size_t* nb = index.neighbors(r);
    for (std::size_t j = 0; j < index.k(); ++j) {
      const std::size_t o = index.original(nb[j]);
      (labels[o] == labels[a] ? same : diff).push_back(o);
    }
    if (same.empty() || diff.empty()) continue;
    const std::size_t p = same[rng.uniform_index(same.size())];
    const std::size_t n = diff[rng.uniform_index(diff.size())];
    batch.push(a, p, n);
  }
  return batch;
}

CorrespondenceSet find_correspondences(const PointCloud& cloud_i, const PointCloud& cloud_j,
                                       const RigidTransform& t, double threshold) {
  if (!(threshold > 0.0)) throw std::invalid_argument("correspondence threshold must be > 0");
  t.validate();
  CorrespondenceSet out;
  out.threshold = threshold;
  const double thr2 = threshold * threshold;
  const std::size_t nj = cloud_j.size();
  std::vector<double> dist(nj);
  const auto& kern = simd::active();
  for (std::size_t i = 0; i < cloud_i.size(); ++i) {
    const auto x = t.apply(cloud_i.point(i));
    kern.squared_distances(x.data(), cloud_j.coords.data(), nj, 3, dist.data());
    const auto j = static_cast<std::size_t>(std::min_element(dist.begin(), dist.end()) -
                                            dist.begin());
    if (dist[j] <= thr2) out.pairs.emplace_back(i, j);
  }
  return out;
}

namespace {

// Uniform draw from [0, n) avoiding `excluded`.
std::size_t draw_excluding(Rng& rng, std::size_t n, const std::unordered_set<std::size_t>& excluded) {
  if (excluded.size() >= n) throw std::invalid_argument("sample_cem: no admissible negative");
  for (;;) {
    const std::size_t c = rng.uniform_index(n);
    if (!excluded.count(c)) return c;
  }
}

}  // namespace

std::pair<TripletBatch, TripletBatch> sample_cem(const CorrespondenceSet& corrs, std::size_t n_i,
                                                 std::size_t n_j, std::size_t t_target, Rng& rng) {
  if (corrs.empty()) throw std::invalid_argument("sample_cem: empty correspondence set");
  std::vector<std::unordered_set<std::size_t>> partners_i(n_j), partners_j(n_i);
  for (const auto& [i, j] : corrs.pairs) {
    if (i >= n_i || j >= n_j) throw std::out_of_range("sample_cem: correspondence out of range");
    partners_i[j].insert(i);  // points of cloud i matched to j
    partners_j[i].insert(j);
  }
  TripletBatch ij, ji;
  ij.anchor_set = SetTag::first;
  ij.positive_set = SetTag::second;
  ij.negative_set = SetTag::first;
  ji.anchor_set = SetTag::second;
  ji.positive_set = SetTag::first;
  ji.negative_set = SetTag::second;
  for (std::size_t t = 0; t < t_target; ++t) {
    const auto& [i, j] = corrs.pairs[rng.uniform_index(corrs.size())];
    ij.push(i, j, draw_excluding(rng, n_i, partners_i[j]));
    ji.push(j, i, draw_excluding(rng, n_j, partners_j[i]));
  }
  return {std::move(ij), std::move(ji)};
}

}  // namespace cue
