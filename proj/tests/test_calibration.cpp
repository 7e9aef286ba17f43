#include <algorithm>
#include <cmath>
#include <numeric>

#include "cue/calibration.hpp"
#include "doctest.h"
#include "test_support.hpp"

using namespace cue;

TEST_CASE("normalize_uncertainty examples and monotonicity") {
  CHECK(normalize_uncertainty(std::vector<double>{2, 2, 2}) == std::vector<double>{0, 0, 0});
  const auto v = normalize_uncertainty(std::vector<double>{0, 1, 3});
  CHECK(v[0] == 0.0);
  CHECK(v[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  CHECK(v[2] == 1.0);
  CHECK_THROWS(normalize_uncertainty(std::vector<double>{1, -1}));
  CHECK_THROWS(normalize_uncertainty(std::vector<double>{}));

  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> x(20);
    for (auto& e : x) e = rng.uniform(0.0, 5.0);
    const auto y = normalize_uncertainty(x);
    for (std::size_t i = 0; i < x.size(); ++i)
      for (std::size_t j = 0; j < x.size(); ++j)
        if (x[i] < x[j]) CHECK(y[i] <= y[j]);
    CHECK(*std::min_element(y.begin(), y.end()) == 0.0);
    CHECK(*std::max_element(y.begin(), y.end()) == 1.0);
  }
}

TEST_CASE("softmax entropy") {
  CHECK(softmax_entropy(std::vector<double>{0.25, 0.25, 0.25, 0.25}) == doctest::Approx(1.0));
  CHECK(softmax_entropy(std::vector<double>{0, 1, 0, 0}) == 0.0);
  CHECK(softmax_entropy(std::vector<double>{0.5, 0.5, 0, 0}) ==
        doctest::Approx(std::log(2.0) / std::log(4.0)).epsilon(1e-14));
  CHECK(softmax_entropy(std::vector<double>{0.5, 0.5, 0, 0}) == doctest::Approx(0.5));
  CHECK_THROWS(softmax_entropy(std::vector<double>{0.5, 0.6}));
  CHECK_THROWS(softmax_entropy(std::vector<double>{1.5, -0.5}));
  const auto p = softmax(std::vector<double>{1000.0, 1000.0});
  CHECK(p[0] == 0.5);
}

TEST_CASE("AU transform as printed") {
  CHECK(au_uncertainty_level(0.0, 1) == 1.0);
  CHECK(au_uncertainty_level(1.0, 0) == 0.5);
  CHECK(au_uncertainty_level(1.0, 1) == 0.5);
  CHECK(au_uncertainty_level(0.4, 0) == doctest::Approx(0.2).epsilon(1e-15));
  CHECK_THROWS(au_uncertainty_level(1.1, 0));
  CHECK_THROWS(au_uncertainty_level(0.5, 2));
}

TEST_CASE("mcd aggregation") {
  std::vector<Tensor> same(3, Tensor({2, 2}, {0.3, 0.7, 0.6, 0.4}));
  auto r = mcd_aggregate(same);
  for (double v : r.variance.values()) CHECK(v == 0.0);
  CHECK(r.prediction == std::vector<int>{1, 0});

  std::vector<Tensor> two{Tensor({1, 2}, {1.0, 0.0}), Tensor({1, 2}, {0.0, 1.0})};
  r = mcd_aggregate(two);
  CHECK(r.mean[0] == 0.5);
  CHECK(r.mean[1] == 0.5);
  CHECK(r.variance[0] == 0.5);
  CHECK(r.variance[1] == 0.5);
  CHECK(r.uncertainty[0] == 0.5);
  CHECK(kDefaultMcdPasses == 40);
  CHECK_THROWS(mcd_aggregate(std::span<const Tensor>(two.data(), 1)));
  two[1] = Tensor({1, 3}, 0.0);
  CHECK_THROWS(mcd_aggregate(two));
}

TEST_CASE("reliability bins") {
  {
    std::vector<double> lv(7, 0.05);
    std::vector<int> ok(7, 1);
    const auto bins = reliability_bins(lv, ok);
    REQUIRE(bins.size() == 10);
    CHECK(bins[0].count == 7);
    CHECK(*bins[0].accuracy == 1.0);
    for (std::size_t b = 1; b < 10; ++b) {
      CHECK(bins[b].count == 0);
      CHECK_FALSE(bins[b].accuracy.has_value());
    }
  }
  {
    std::vector<double> lv(10, 0.05);
    lv.insert(lv.end(), 10, 0.95);
    std::vector<int> ok(10, 1);
    ok.insert(ok.end(), 10, 0);
    const auto bins = reliability_bins(lv, ok);
    CHECK(*bins[0].accuracy == 1.0);
    CHECK(*bins[9].accuracy == 0.0);
  }
  {
    const auto bins = reliability_bins(std::vector<double>{1.0, 0.0}, std::vector<int>{1, 1});
    CHECK(bins[9].count == 1);
    CHECK(bins[0].count == 1);
  }
  CHECK_THROWS(reliability_bins(std::vector<double>{0.5}, std::vector<int>{}));
  CHECK_THROWS(reliability_bins(std::vector<double>{1.5}, std::vector<int>{1}));

  Rng rng(11);
  std::vector<double> lv(5000);
  std::vector<int> ok(5000);
  for (std::size_t i = 0; i < lv.size(); ++i) {
    lv[i] = rng.uniform();
    ok[i] = rng.bernoulli(0.5);
  }
  const auto bins = reliability_bins(lv, ok, 7);
  std::vector<std::size_t> hist(7, 0);
  std::size_t total = 0;
  for (double l : lv) {
    std::size_t b = 0;
    while (b + 1 < 7 && l >= static_cast<double>(b + 1) / 7.0) ++b;
    ++hist[b];
  }
  for (std::size_t b = 0; b < 7; ++b) {
    CHECK(bins[b].count == hist[b]);
    total += bins[b].count;
  }
  CHECK(total == lv.size());

  // Permuting the input leaves the bins unchanged.
  std::vector<std::size_t> perm(lv.size());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  for (std::size_t i = perm.size() - 1; i > 0; --i) std::swap(perm[i], perm[rng.uniform_index(i + 1)]);
  std::vector<double> lv2(lv.size());
  std::vector<int> ok2(lv.size());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    lv2[i] = lv[perm[i]];
    ok2[i] = ok[perm[i]];
  }
  const auto bins2 = reliability_bins(lv2, ok2, 7);
  for (std::size_t b = 0; b < 7; ++b) {
    CHECK(bins2[b].count == bins[b].count);
    CHECK(*bins2[b].accuracy == *bins[b].accuracy);
    CHECK(bins2[b].mean_level == doctest::Approx(bins[b].mean_level).epsilon(1e-12));
  }
}

TEST_CASE("ece fixtures") {
  std::vector<BinStats> bins(2);
  bins[0].count = 10;
  bins[0].accuracy = 0.9;
  bins[0].mean_level = 0.15;
  bins[1].count = 30;
  bins[1].accuracy = 0.7;
  bins[1].mean_level = 0.25;
  CHECK(ece(bins) == doctest::Approx(0.05).epsilon(1e-12));
  CHECK(ece(bins, EceWeighting::uniform) == doctest::Approx(0.05).epsilon(1e-12));

  std::vector<BinStats> perfect(1);
  perfect[0].count = 4;
  perfect[0].accuracy = 1.0;
  CHECK(ece(perfect) == 0.0);

  std::vector<BinStats> ident(3);
  for (std::size_t b = 0; b < 3; ++b) {
    ident[b].count = b + 1;
    ident[b].mean_level = 0.25 * static_cast<double>(b);
    ident[b].accuracy = 1.0 - ident[b].mean_level;
  }
  CHECK(ece(ident) == 0.0);
  ident[1].accuracy = *ident[1].accuracy + 0.01;
  CHECK(ece(ident) > 0.0);

  std::vector<BinStats> empty(10);
  CHECK_THROWS(ece(empty));
}

TEST_CASE("bernoulli correctness stream is calibrated") {
  Rng rng(2024);
  const std::size_t n = 100000;
  std::vector<double> lv(n);
  std::vector<int> ok(n);
  for (std::size_t i = 0; i < n; ++i) {
    lv[i] = rng.uniform();
    ok[i] = rng.bernoulli(1.0 - lv[i]);
  }
  CHECK(ece(reliability_bins(lv, ok)) < 0.02);
}

TEST_CASE("random guess levels") {
  Rng a(5), b(5);
  CHECK(random_guess_levels(100, a) == random_guess_levels(100, b));
  CHECK_THROWS(random_guess_levels(0, a));

  Rng rng(17);
  const std::size_t n = 100000;
  const auto lv = random_guess_levels(n, rng);
  const double mean = std::accumulate(lv.begin(), lv.end(), 0.0) / static_cast<double>(n);
  CHECK(std::abs(mean - 0.5) < 3.0 * std::sqrt(1.0 / 12.0 / static_cast<double>(n)));

  // Flat accuracy a: E[ECE] = integral of |a - (1 - u)| du.
  for (double acc : {0.9, 0.6}) {
    std::vector<int> ok(n);
    for (auto& o : ok) o = rng.bernoulli(acc);
    const double c = 1.0 - acc;
    const double analytic = 0.5 * c * c + 0.5 * (1.0 - c) * (1.0 - c);
    const double sim = ece(reliability_bins(lv, ok));
    CHECK(std::abs(sim - analytic) < 0.01);
  }
}

TEST_CASE("spearman") {
  CHECK(spearman(std::vector<double>{1, 2, 3}, std::vector<double>{3, 2, 1}) == doctest::Approx(-1.0));
  CHECK(spearman(std::vector<double>{1, 2, 3, 4}, std::vector<double>{1, 4, 9, 16}) == doctest::Approx(1.0));
  // Ties use average ranks: x ranks (0,1.5,1.5,3), y ranks (0,1,2,3).
  CHECK(spearman(std::vector<double>{1, 2, 2, 3}, std::vector<double>{1, 2, 3, 4}) ==
        doctest::Approx(4.5 / std::sqrt(4.5 * 5.0)));
  CHECK(std::isnan(spearman(std::vector<double>{1}, std::vector<double>{2})));
}

TEST_CASE("hit ratio and matching") {
  Rng rng(8);
  const std::size_t n = 500;
  Tensor xyz = cue::testing::random_tensor(rng, {n, 3}, -1.0, 1.0);
  CorrespondenceSet gt;
  for (std::size_t i = 0; i < n; ++i) gt.pairs.emplace_back(i, i);

  auto id = match_by_embedding(xyz, xyz, xyz, gt, 0.1);
  CHECK(hit_ratio(id) == 1.0);
  CHECK(hit_ratio(match_by_embedding(xyz, xyz, xyz, gt, 0.0)) == 1.0);

  // Random embeddings against a spread-out cloud hit at roughly chance rate.
  const Tensor ei = cue::testing::random_tensor(rng, {n, 8}, -1.0, 1.0);
  const Tensor ej = cue::testing::random_tensor(rng, {n, 8}, -1.0, 1.0);
  const auto rnd = match_by_embedding(ei, ej, xyz, gt, 0.1);
  CHECK(hit_ratio(rnd) < 0.1);
  CHECK(hit_ratio(match_by_embedding(ei, ej, xyz, gt, 0.0)) < 0.02);
  // Brute-force recount.
  std::size_t hits = 0;
  for (const auto& o : rnd) {
    std::size_t best = 0;
    double bd = 1e300;
    for (std::size_t j = 0; j < n; ++j) {
      double d = 0.0;
      for (std::size_t c = 0; c < 8; ++c) d += std::pow(ei[o.anchor * 8 + c] - ej[j * 8 + c], 2);
      if (d < bd) {
        bd = d;
        best = j;
      }
    }
    CHECK(best == o.matched);
    double g = 0.0;
    for (std::size_t c = 0; c < 3; ++c) g += std::pow(xyz[best * 3 + c] - xyz[o.truth * 3 + c], 2);
    hits += std::sqrt(g) <= 0.1 ? 1 : 0;
  }
  CHECK(hit_ratio(rnd) == static_cast<double>(hits) / static_cast<double>(n));
  CHECK_THROWS(hit_ratio(std::vector<MatchOutcome>{}));
}

TEST_CASE("fmr") {
  CHECK(fmr(std::vector<double>{1.0, 1.0, 1.0}) == 1.0);
  CHECK(fmr(std::vector<double>{0.04, 0.06}) == 0.5);
  CHECK(fmr(std::vector<double>{0.05}) == 0.0);
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> h(1 + rng.uniform_index(30));
    for (auto& x : h) x = rng.uniform(0.0, 0.1);
    std::size_t c = 0;
    for (double x : h) c += x > 0.05;
    CHECK(fmr(h) == static_cast<double>(c) / static_cast<double>(h.size()));
  }
}

TEST_CASE("miou") {
  std::vector<int> y{0, 0, 1, 1};
  CHECK(miou(y, y, 2) == 1.0);
  CHECK(miou(std::vector<int>{1, 1, 0, 0}, y, 2) == 0.0);
  CHECK(miou(std::vector<int>{0, 1, 1, 1}, y, 2) == doctest::Approx(7.0 / 12.0).epsilon(1e-15));
  // Class 2 absent from both is excluded.
  CHECK(miou(std::vector<int>{0, 1, 1, 1}, y, 3) == doctest::Approx(7.0 / 12.0).epsilon(1e-15));
  CHECK_THROWS(miou(std::vector<int>{}, std::vector<int>{}, 2));
  CHECK_THROWS(miou(std::vector<int>{0, 2}, std::vector<int>{0, 1}, 2));

  Rng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<int> p(200), l(200), perm{2, 0, 3, 1};
    for (std::size_t i = 0; i < p.size(); ++i) {
      p[i] = static_cast<int>(rng.uniform_index(4));
      l[i] = static_cast<int>(rng.uniform_index(4));
    }
    std::vector<int> p2(p.size()), l2(l.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
      p2[i] = perm[p[i]];
      l2[i] = perm[l[i]];
    }
    CHECK(miou(p2, l2, 4) == doctest::Approx(miou(p, l, 4)).epsilon(1e-14));
  }
}
