#pragma once

// Nearest-neighbour search and triplet construction over point clouds.
//
// CES draws boundary triplets inside one labeled cloud; CEM draws
// correspondence triplets across two clouds related by a known transform.

#include <array>
#include <cstddef>
#include <utility>
#include <vector>

#include "cue/embedding.hpp"
#include "cue/rng.hpp"
#include "cue/tensor.hpp"

namespace cue {

// y = scale * R x + t
struct RigidTransform {
  std::array<double, 9> rotation{1, 0, 0, 0, 1, 0, 0, 0, 1};  // row-major
  std::array<double, 3> translation{0, 0, 0};
  double scale = 1.0;

  static RigidTransform identity() { return {}; }
  // Rotation by `angle` radians about a (normalized) axis.
  static RigidTransform from_axis_angle(std::array<double, 3> axis, double angle,
                                        std::array<double, 3> translation = {0, 0, 0},
                                        double scale = 1.0);

  void validate() const;
  std::array<double, 3> apply(const double* x) const;
  Tensor apply(const Tensor& coords) const;
};

// Indices of the k rows nearest to `query`, ascending distance, ties to the
// lower index. rows is N x dim.
std::vector<std::size_t> knn_rows(const Tensor& rows, const double* query, std::size_t k);
std::size_t nearest_row(const Tensor& rows, const double* query);
std::vector<std::size_t> knn(const PointCloud& cloud, const double* query, std::size_t k);

// For every point its k nearest other points (self excluded), N x k row-major.
std::vector<std::size_t> knn_graph(const Tensor& rows, std::size_t k);

// Lexicographic order by (x, y, z), ties by index.
std::vector<std::size_t> canonical_order(const PointCloud& cloud);

// Which embedding set each index of a batch addresses.
enum class SetTag { first, second };

struct TripletBatch {
  std::vector<std::size_t> anchor;
  std::vector<std::size_t> positive;
  std::vector<std::size_t> negative;
  SetTag anchor_set = SetTag::first;
  SetTag positive_set = SetTag::first;
  SetTag negative_set = SetTag::first;

  std::size_t size() const { return anchor.size(); }
  bool empty() const { return anchor.empty(); }
  void push(std::size_t a, std::size_t p, std::size_t n) {
    anchor.push_back(a);
    positive.push_back(p);
    negative.push_back(n);
  }
};

inline constexpr std::size_t kDefaultCesNeighbors = 16;
inline constexpr double kDefaultInlierThreshold = 0.1;

// Neighbourhoods for CES, built once per cloud. Neighbour lists live in
// canonical order so sampling does not depend on the input point order.
class CesIndex {
 public:
  CesIndex(const PointCloud& cloud, std::size_t k);

  std::size_t size() const { return order_.size(); }
  std::size_t k() const { return k_; }
  // Canonical rank r -> original index.
  std::size_t original(std::size_t rank) const { return order_[rank]; }
  // Neighbours of canonical rank r, as canonical ranks.
  const std::size_t* neighbors(std::size_t rank) const { return graph_.data() + rank * k_; }

 private:
  std::size_t k_;
  std::vector<std::size_t> order_;
  std::vector<std::size_t> graph_;
};

TripletBatch sample_ces(const PointCloud& cloud, std::size_t t_target, std::size_t k, Rng& rng);
TripletBatch sample_ces(const CesIndex& index, const std::vector<int>& labels,
                        std::size_t t_target, Rng& rng);

struct CorrespondenceSet {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (index in i, index in j)
  double threshold = kDefaultInlierThreshold;

  std::size_t size() const { return pairs.size(); }
  bool empty() const { return pairs.empty(); }
};

CorrespondenceSet find_correspondences(const PointCloud& cloud_i, const PointCloud& cloud_j,
                                       const RigidTransform& t, double threshold);

// (i -> j) triples (a in i, p in j, n in i) and the mirrored (j -> i) batch.
std::pair<TripletBatch, TripletBatch> sample_cem(const CorrespondenceSet& corrs, std::size_t n_i,
                                                 std::size_t n_j, std::size_t t_target, Rng& rng);

}  // namespace cue
