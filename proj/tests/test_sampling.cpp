#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "cue/sampling.hpp"
#include "doctest.h"
#include "test_support.hpp"

using namespace cue;
using cue::testing::random_tensor;

namespace {

double dist2(const double* a, const double* b) {
  double s = 0.0;
  for (int c = 0; c < 3; ++c) s += (a[c] - b[c]) * (a[c] - b[c]);
  return s;
}

PointCloud random_cloud(Rng& rng, std::size_t n, double extent = 1.0) {
  return PointCloud(random_tensor(rng, {n, 3}, -extent, extent));
}

// Two classes split by the plane x = 0.
PointCloud half_spaces(Rng& rng, std::size_t n) {
  PointCloud c = random_cloud(rng, n);
  c.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) c.labels[i] = c.point(i)[0] < 0.0 ? 0 : 1;
  return c;
}

}  // namespace

TEST_CASE("RigidTransform") {
  const auto t = RigidTransform::from_axis_angle({0, 0, 1}, M_PI / 2, {1, 2, 3}, 2.0);
  const double x[3] = {1, 0, 0};
  const auto y = t.apply(x);
  CHECK(y[0] == doctest::Approx(1.0));
  CHECK(y[1] == doctest::Approx(4.0));
  CHECK(y[2] == doctest::Approx(3.0));
  RigidTransform bad;
  bad.rotation[0] = -1.0;  // reflection
  CHECK_THROWS(bad.validate());
  bad.rotation = {1, 0.1, 0, 0, 1, 0, 0, 0, 1};
  CHECK_THROWS(bad.validate());
  Rng rng(1);
  for (int i = 0; i < 20; ++i) {
    const auto r = RigidTransform::from_axis_angle({rng.normal(), rng.normal(), rng.normal()},
                                                   rng.uniform(0, 2 * M_PI));
    CHECK_NOTHROW(r.validate());
  }
}

TEST_CASE("knn examples") {
  PointCloud line(Tensor(Shape{4, 3}, {0, 0, 0, 1, 0, 0, 2, 0, 0, 3, 0, 0}));
  const double q[3] = {1.4, 0, 0};
  CHECK(knn(line, q, 2) == std::vector<std::size_t>{1, 2});
  CHECK(knn(line, line.point(3), 1) == std::vector<std::size_t>{3});
  const double mid[3] = {1.5, 0, 0};
  CHECK(knn(line, mid, 2) == std::vector<std::size_t>{1, 2});  // tie to lower index
  CHECK_THROWS(knn(line, q, 5));
}

TEST_CASE("knn matches an exhaustive scan") {
  Rng rng(2);
  const PointCloud c = random_cloud(rng, 200);
  for (int trial = 0; trial < 20; ++trial) {
    const double q[3] = {rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
    std::vector<std::pair<double, std::size_t>> all;
    for (std::size_t i = 0; i < c.size(); ++i) all.emplace_back(dist2(q, c.point(i)), i);
    std::sort(all.begin(), all.end());
    const auto got = knn(c, q, 10);
    for (std::size_t r = 0; r < 10; ++r) CHECK(got[r] == all[r].second);
  }
}

TEST_CASE("knn_graph excludes self") {
  Rng rng(3);
  const PointCloud c = random_cloud(rng, 50);
  const auto g = knn_graph(c.coords, 5);
  for (std::size_t i = 0; i < 50; ++i) {
    const auto ref = knn(c, c.point(i), 6);
    CHECK(ref[0] == i);
    for (std::size_t j = 0; j < 5; ++j) CHECK(g[i * 5 + j] == ref[j + 1]);
  }
}

TEST_CASE("sample_ces on a single-class cloud is empty") {
  Rng rng(4);
  PointCloud c = random_cloud(rng, 100);
  c.labels.assign(100, 2);
  CHECK(sample_ces(c, 64, 8, rng).empty());
  PointCloud unlabeled = random_cloud(rng, 10);
  CHECK_THROWS(sample_ces(unlabeled, 4, 4, rng));
}

TEST_CASE("sample_ces emits boundary triplets satisfying the label constraints") {
  Rng rng(5);
  const PointCloud c = half_spaces(rng, 800);
  Rng s(6);
  const auto b = sample_ces(c, 256, 8, s);
  CHECK(b.size() > 0);
  CHECK(b.size() <= 256);
  for (std::size_t t = 0; t < b.size(); ++t) {
    CHECK(c.labels[b.anchor[t]] == c.labels[b.positive[t]]);
    CHECK(c.labels[b.anchor[t]] != c.labels[b.negative[t]]);
    CHECK(b.positive[t] != b.anchor[t]);
    // The anchor's brute-force 8-neighbourhood is label-mixed.
    const auto nb = knn(c, c.point(b.anchor[t]), 9);
    bool mixed = false;
    for (std::size_t j = 1; j < nb.size(); ++j) mixed |= c.labels[nb[j]] != c.labels[b.anchor[t]];
    CHECK(mixed);
  }
}

TEST_CASE("sample_ces is deterministic and independent of point order") {
  Rng rng(7);
  const PointCloud c = half_spaces(rng, 300);
  Rng a(8), b(8);
  const auto x = sample_ces(c, 64, 8, a);
  const auto y = sample_ces(c, 64, 8, b);
  CHECK(x.anchor == y.anchor);
  CHECK(x.positive == y.positive);
  CHECK(x.negative == y.negative);

  std::vector<std::size_t> perm(300);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng shuffle(9);
  for (std::size_t i = perm.size() - 1; i > 0; --i) std::swap(perm[i], perm[shuffle.uniform_index(i + 1)]);
  PointCloud q(Tensor(Shape{300, 3}), std::vector<int>(300));
  for (std::size_t i = 0; i < 300; ++i) {
    std::copy_n(c.point(perm[i]), 3, q.coords.data() + 3 * i);
    q.labels[i] = c.labels[perm[i]];
  }
  Rng z(8);
  const auto w = sample_ces(q, 64, 8, z);
  REQUIRE(w.size() == x.size());
  for (std::size_t t = 0; t < x.size(); ++t) {
    CHECK(perm[w.anchor[t]] == x.anchor[t]);
    CHECK(perm[w.positive[t]] == x.positive[t]);
    CHECK(perm[w.negative[t]] == x.negative[t]);
  }
}

TEST_CASE("find_correspondences examples") {
  Rng rng(10);
  const PointCloud c = random_cloud(rng, 100);
  const auto self = find_correspondences(c, c, RigidTransform::identity(), 0.05);
  REQUIRE(self.size() == 100);
  for (std::size_t i = 0; i < 100; ++i) CHECK(self.pairs[i] == std::pair<std::size_t, std::size_t>{i, i});

  Tensor moved = c.coords;
  for (std::size_t i = 0; i < 100; ++i) moved[3 * i] += 10.0;
  CHECK(find_correspondences(c, PointCloud(moved), RigidTransform::identity(), 0.05).empty());
  CHECK_THROWS(find_correspondences(c, c, RigidTransform::identity(), 0.0));
}

TEST_CASE("find_correspondences on a noisy transformed copy matches brute force") {
  Rng rng(11);
  const PointCloud ci = random_cloud(rng, 300);
  const auto t = RigidTransform::from_axis_angle({1, 2, 3}, 0.7, {0.5, -0.2, 1.0}, 1.1);
  Tensor xj = t.apply(ci.coords);
  for (auto& v : xj.values()) v += 0.01 * rng.normal();
  const PointCloud cj(xj);
  const auto corrs = find_correspondences(ci, cj, t, 0.05);
  std::size_t count = 0;
  for (std::size_t i = 0; i < ci.size(); ++i) {
    const auto y = t.apply(ci.point(i));
    double best = 1e300;
    for (std::size_t j = 0; j < cj.size(); ++j) best = std::min(best, dist2(y.data(), cj.point(j)));
    if (best <= 0.05 * 0.05) ++count;
  }
  CHECK(corrs.size() == count);
  for (const auto& [i, j] : corrs.pairs) {
    const auto y = t.apply(ci.point(i));
    CHECK(std::sqrt(dist2(y.data(), cj.point(j))) <= 0.05);
  }
}

TEST_CASE("sample_cem contracts") {
  Rng rng(12);
  SUBCASE("forced negative") {
    CorrespondenceSet one{{{0, 0}}, 0.1};
    const auto [ij, ji] = sample_cem(one, 2, 2, 20, rng);
    for (std::size_t t = 0; t < 20; ++t) {
      CHECK(ij.negative[t] == 1);
      CHECK(ji.negative[t] == 1);
    }
    CHECK(ij.positive_set == SetTag::second);
    CHECK(ji.anchor_set == SetTag::second);
  }
  SUBCASE("batch sizes and negative rejection") {
    CorrespondenceSet corrs;
    for (std::size_t i = 0; i < 1000; ++i) corrs.pairs.emplace_back(i, (i * 7) % 1000);
    const auto [ij, ji] = sample_cem(corrs, 1200, 1000, 512, rng);
    CHECK(ij.size() == 512);
    CHECK(ji.size() == 512);
    const auto [big_ij, big_ji] = sample_cem(corrs, 1200, 1000, 10000, rng);
    std::set<std::pair<std::size_t, std::size_t>> all(corrs.pairs.begin(), corrs.pairs.end());
    for (std::size_t t = 0; t < 10000; ++t) {
      CHECK(all.count({big_ij.anchor[t], big_ij.positive[t]}) == 1);
      CHECK(big_ij.negative[t] != big_ij.anchor[t]);
      CHECK(all.count({big_ij.negative[t], big_ij.positive[t]}) == 0);
      CHECK(big_ji.negative[t] != big_ji.anchor[t]);
      CHECK(all.count({big_ji.positive[t], big_ji.negative[t]}) == 0);
    }
  }
  CHECK_THROWS(sample_cem(CorrespondenceSet{}, 2, 2, 1, rng));
}
