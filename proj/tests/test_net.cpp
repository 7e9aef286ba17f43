#include <cmath>
#include <numeric>

#include "cue/net.hpp"
#include "cue/sampling.hpp"
#include "cue/special.hpp"
#include "cue/triplet.hpp"
#include "doctest.h"
#include "test_support.hpp"

using namespace cue;
using cue::testing::check_gradients;
using cue::testing::random_tensor;

namespace {

PointCloud formula_cloud(std::size_t n) {
  Tensor x(Shape{n, 3});
  for (std::size_t i = 0; i < n; ++i) {
    x[3 * i] = std::sin(1.3 * static_cast<double>(i));
    x[3 * i + 1] = 0.5 * std::cos(0.7 * static_cast<double>(i));
    x[3 * i + 2] = 0.1 * static_cast<double>(i);
  }
  return PointCloud(x);
}

NetConfig small_config(ModelKind kind, std::size_t classes = 3) {
  NetConfig c;
  c.embed_dim = 4;
  c.hidden = {6, 5};
  c.classes = classes;
  c.rank = 1;
  c.k_ctx = 4;
  c.kind = kind;
  return c;
}

Tensor random_features(Rng& rng, std::size_t n) { return random_tensor(rng, {n, kPointFeatures}); }

void perturb(NetParams& p, Rng& rng, double s) {
  for (auto& t : p.tensors)
    for (auto& v : t.values()) v += s * rng.normal();
}

}  // namespace

TEST_CASE("point_features golden values") {
  // Reference computed independently with numpy for this formula cloud.
  const PointCloud c = formula_cloud(20);
  const Tensor f = point_features(c, 4);
  const double golden[3][7] = {
      {0.007452588120972969, 0.45528695403004876, -0.95, -0.27759794010100874,
       0.4229405506240691, -0.32500000000000007, 0.9000085077761487},
      {0.3265509504703251, 0.048543138741336214, -0.2499999999999999, 0.00446285009051145,
       0.1597406777317793, -0.025000000000000022, 0.5537108362366423},
      {-0.41190832795225835, 0.3266615403818841, 0.9500000000000002, 0.19623122389427994,
       0.13950743061174734, 0.44999999999999996, 0.7543847961812074}};
  const std::size_t rows[3] = {0, 7, 19};
  for (int r = 0; r < 3; ++r)
    for (std::size_t j = 0; j < 7; ++j)
      CHECK(f[rows[r] * 7 + j] == doctest::Approx(golden[r][j]).epsilon(1e-12));
  CHECK_THROWS(point_features(c, 20));
}

TEST_CASE("point_features simple geometry") {
  Rng rng(1);
  Tensor x = random_tensor(rng, {50, 3}, -0.01, 0.01);
  double mean[3] = {0, 0, 0};
  for (std::size_t i = 0; i < 50; ++i)
    for (int c = 0; c < 3; ++c) mean[c] += x[3 * i + c] / 50.0;
  const Tensor f = point_features(PointCloud(x), 8);
  for (std::size_t i = 0; i < 50; ++i)
    for (int c = 0; c < 3; ++c) CHECK(std::abs(f[i * 7 + c] - x[3 * i + c]) <= std::abs(mean[c]) + 1e-15);

  // Interior points of a uniform grid see a symmetric 6-neighbourhood.
  Tensor g(Shape{125, 3});
  for (std::size_t i = 0; i < 125; ++i) {
    g[3 * i] = static_cast<double>(i % 5);
    g[3 * i + 1] = static_cast<double>((i / 5) % 5);
    g[3 * i + 2] = static_cast<double>(i / 25);
  }
  const Tensor fg = point_features(PointCloud(g), 6);
  const std::size_t center = 2 + 5 * 2 + 25 * 2;
  for (int c = 3; c < 6; ++c) CHECK(std::abs(fg[center * 7 + c]) < 1e-12);
  CHECK(fg[center * 7 + 6] == doctest::Approx(1.0));
}

TEST_CASE("config validation") {
  NetConfig c;
  CHECK_NOTHROW(c.validate());
  c.embed_dim = 1;
  CHECK_THROWS(c.validate());
  c = NetConfig{};
  c.dropout = 1.0;
  CHECK_THROWS(c.validate());
  c = NetConfig{};
  c.hidden = {};
  CHECK_THROWS(c.validate());
}

TEST_CASE("forward output contracts hold for random parameters") {
  Rng rng(2);
  for (int trial = 0; trial < 30; ++trial) {
    NetParams p = init_params(small_config(ModelKind::cue_plus), static_cast<std::uint64_t>(trial));
    perturb(p, rng, 3.0);
    const Tensor f = random_features(rng, 9);
    const auto out = predict(p, f, ModelKind::cue_plus);
    for (std::size_t i = 0; i < 9; ++i) {
      double s = 0.0;
      for (double v : out.mu.row(i)) s += v * v;
      CHECK(std::abs(std::sqrt(s) - 1.0) < 1e-6);
    }
    for (double v : out.lam.values()) CHECK(v > 0.0);
    CHECK(out.p.shape() == Shape{9, 4, 1});
    CHECK(out.logits.shape() == Shape{9, 3});
    CHECK_NOTHROW(out.lowrank().validate());
  }
}

TEST_CASE("deterministic mode evaluates only mu and logits") {
  const NetParams p = init_params(small_config(ModelKind::deterministic), 3);
  Rng rng(3);
  const auto out = predict(p, random_features(rng, 5), ModelKind::deterministic);
  CHECK(out.lam.empty());
  CHECK(out.p.empty());
  CHECK(out.logits.shape() == Shape{5, 3});
}

TEST_CASE("forward is permutation equivariant") {
  const PointCloud c = formula_cloud(30);
  const NetParams p = init_params(small_config(ModelKind::cue_plus), 4);
  std::vector<std::size_t> perm(30);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng(4);
  for (std::size_t i = 29; i > 0; --i) std::swap(perm[i], perm[rng.uniform_index(i + 1)]);
  Tensor xq(Shape{30, 3});
  for (std::size_t i = 0; i < 30; ++i) std::copy_n(c.point(perm[i]), 3, xq.data() + 3 * i);
  const auto a = predict(p, point_features(c, 4), ModelKind::cue_plus);
  const auto b = predict(p, point_features(PointCloud(xq), 4), ModelKind::cue_plus);
  for (std::size_t i = 0; i < 30; ++i) {
    for (std::size_t j = 0; j < 4; ++j) {
      CHECK(b.mu[i * 4 + j] == doctest::Approx(a.mu[perm[i] * 4 + j]).epsilon(1e-12));
      CHECK(b.lam[i * 4 + j] == doctest::Approx(a.lam[perm[i] * 4 + j]).epsilon(1e-12));
      CHECK(b.p[i * 4 + j] == doctest::Approx(a.p[perm[i] * 4 + j]).epsilon(1e-12));
    }
    for (std::size_t j = 0; j < 3; ++j)
      CHECK(b.logits[i * 3 + j] == doctest::Approx(a.logits[perm[i] * 3 + j]).epsilon(1e-12));
  }
}

TEST_CASE("shared tensors start identical across model kinds") {
  const auto a = init_params(small_config(ModelKind::deterministic), 9);
  const auto b = init_params(small_config(ModelKind::cue_plus), 9);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(b.get(a.names[i]) == a.tensors[i]);
  CHECK(b.get("lam.b")[0] == doctest::Approx(softplus_inverse(0.1)));
  CHECK(init_params(small_config(ModelKind::cue), 10).get("mu.w") != a.get("mu.w"));
}

TEST_CASE("parameter count ordering") {
  const auto d = init_params(small_config(ModelKind::deterministic), 0).parameter_count();
  const auto c = init_params(small_config(ModelKind::cue), 0).parameter_count();
  const auto cp = init_params(small_config(ModelKind::cue_plus), 0).parameter_count();
  CHECK(cp > c);
  CHECK(c > d);
}

TEST_CASE("forward_dropout") {
  NetConfig cfg = small_config(ModelKind::deterministic);
  cfg.hidden = {8};
  const NetParams p = init_params(cfg, 5);
  Rng rng(5);
  const Tensor f = random_features(rng, 5);
  const Tensor plain = predict(p, f, ModelKind::deterministic).logits;

  Rng tiny(6);
  const Tensor almost = forward_dropout(p, f, 1e-12, tiny);
  for (std::size_t i = 0; i < plain.size(); ++i) CHECK(almost[i] == doctest::Approx(plain[i]).epsilon(1e-10));

  Rng a(7), b(7);
  CHECK(forward_dropout(p, f, 0.3, a) == forward_dropout(p, f, 0.3, b));

  // With one hidden layer the logits are linear in the masked activations.
  Rng mc(8);
  const std::size_t n = 10000;
  std::vector<double> s(plain.size(), 0.0), s2(plain.size(), 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    const Tensor l = forward_dropout(p, f, 0.2, mc);
    for (std::size_t i = 0; i < l.size(); ++i) {
      s[i] += l[i];
      s2[i] += l[i] * l[i];
    }
  }
  for (std::size_t i = 0; i < plain.size(); ++i) {
    const double m = s[i] / n;
    const double se = std::sqrt((s2[i] / n - m * m) / n);
    CHECK(std::abs(m - plain[i]) <= 3.0 * se);
  }
  CHECK_THROWS(forward_dropout(p, f, 0.0, mc));
}

TEST_CASE("sgd update rule") {
  NetParams p;
  p.names = {"w"};
  p.tensors = {Tensor::vector({1.0})};
  p.branch = {"trunk"};
  p.frozen = {false};
  Sgd zero(0.1, 0.9, 0.0);
  zero.step(p, {Tensor::vector({0.0})});
  CHECK(p.tensors[0][0] == 1.0);

  Sgd plain(0.1, 0.0, 0.0);
  plain.step(p, {Tensor::vector({p.tensors[0][0]})});  // gradient of w^2 / 2
  CHECK(p.tensors[0][0] == doctest::Approx(0.9).epsilon(1e-15));

  // Convex toy problem: (w - 3)^2 with momentum.
  p.tensors[0][0] = -2.0;
  Sgd opt(0.01, 0.3, 0.0);
  double prev = 1e300;
  for (int i = 0; i < 100; ++i) {
    const double w = p.tensors[0][0];
    const double loss = (w - 3) * (w - 3);
    CHECK(loss < prev);
    prev = loss;
    opt.step(p, {Tensor::vector({2 * (w - 3)})});
  }
  CHECK_THROWS(Sgd(0.0));
  CHECK_THROWS(opt.step(p, {}));
}

namespace {

double ce_loss_and_step(NetParams& p, const Tensor& f, const std::vector<int>& labels, Sgd& opt) {
  ad::Tape tape;
  const auto b = bind(tape, p);
  const auto out = forward(b, f, ModelKind::cue);
  const auto loss = ad::cross_entropy(out.logits, labels) + ad::sum(ad::square(out.lam));
  tape.backward(loss);
  opt.step(p, collect_grads(b));
  return loss.value()[0];
}

}  // namespace

TEST_CASE("freeze contracts") {
  Rng rng(9);
  const Tensor f = random_features(rng, 12);
  const std::vector<int> labels = {0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1, 2};

  NetParams p = init_params(small_config(ModelKind::cue), 11);
  const NetParams before = p;
  const std::string mu[] = {"mu"};
  freeze(p, mu);
  Sgd opt(0.1);
  for (int i = 0; i < 10; ++i) ce_loss_and_step(p, f, labels, opt);
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p.branch[i] == "trunk" || p.branch[i] == "mu_head") CHECK(p.tensors[i] == before.tensors[i]);
  CHECK(p.get("lam.w") != before.get("lam.w"));
  CHECK(p.get("cls.w") != before.get("cls.w"));

  NetParams q = init_params(small_config(ModelKind::cue), 11);
  Sgd opt2(0.1);
  for (int i = 0; i < 3; ++i) ce_loss_and_step(q, f, labels, opt2);
  for (std::size_t i = 0; i < q.size(); i += 2) CHECK(q.tensors[i] != before.tensors[i]);

  NetParams r = init_params(small_config(ModelKind::cue), 11);
  const std::string all[] = {"all"};
  freeze(r, all);
  Sgd opt3(0.1);
  const double first = ce_loss_and_step(r, f, labels, opt3);
  for (int i = 0; i < 5; ++i) CHECK(ce_loss_and_step(r, f, labels, opt3) == first);

  const std::string bogus[] = {"nonsense"};
  CHECK_THROWS(freeze(r, bogus));
}

TEST_CASE("combined loss gradients through the network match finite differences") {
  const PointCloud c = formula_cloud(12);
  const Tensor f = point_features(c, 4);
  const std::vector<int> labels = {0, 1, 2, 0, 1, 2, 2, 1, 0, 0, 1, 2};
  const std::vector<std::size_t> a = {0, 3, 5, 7}, pos = {3, 9, 2, 11}, neg = {1, 4, 6, 10};
  Rng rng(10);
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const ModelKind kind = trial % 2 ? ModelKind::cue_plus : ModelKind::cue;
    NetParams p = init_params(small_config(kind), static_cast<std::uint64_t>(100 + trial));
    perturb(p, rng, 0.3);
    const auto g = check_gradients(p.tensors, [&](ad::Tape&, const std::vector<ad::Var>& v) {
      BoundParams b{&p, v};
      const auto out = forward(b, f, kind);
      ad::EmbeddingVars e{out.mu, out.lam, out.p, kind == ModelKind::cue_plus ? 1u : 0u, 0};
      return ad::cross_entropy(out.logits, labels) +
             ad::metric_loss(e, e, e, {a, pos, neg}, 0.2);
    });
    worst = std::max(worst, g.max_rel_error);
  }
  MESSAGE("max relative error " << worst);
  CHECK(worst < 1e-4);
}
