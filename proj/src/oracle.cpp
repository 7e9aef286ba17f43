#include "cue/oracle.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "cue/net.hpp"
#include "cue/triplet.hpp"

namespace cue {

bool OracleTable::pass() const { return failures() == 0 && !rows.empty(); }

std::size_t OracleTable::failures() const {
  return static_cast<std::size_t>(std::count_if(rows.begin(), rows.end(), [](const OracleRow& r) { return !r.pass; }));
}

double OracleTable::max_error() const {
  double m = 0.0;
  for (const auto& r : rows) m = std::max(m, r.error);
  return m;
}

std::string OracleTable::csv() const {
  std::string out = "item,quantity,analytic,oracle,std_error,error,tolerance,verdict\n";
  char buf[320];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%s,%s,%.12g,%.12g,%.6g,%.6g,%.6g,%s\n", r.item.c_str(),
                  r.quantity.c_str(), r.analytic, r.oracle, r.std_error, r.error, r.tolerance,
                  r.pass ? "pass" : "fail");
    out += buf;
  }
  return out;
}

GaussianPoint random_gaussian_point(Rng& rng, std::size_t d, std::size_t k, int group,
                                    std::size_t index) {
  GaussianPoint g;
  g.group = group;
  g.index = index;
  const double s = 1.0 / std::sqrt(static_cast<double>(d));
  for (std::size_t i = 0; i < d; ++i) {
    g.mean.push_back(rng.uniform(-s, s));
    g.var.push_back(rng.uniform(0.01, 0.2));
  }
  for (std::size_t i = 0; i < d * k; ++i) g.factor.push_back(0.3 * s * rng.uniform(-1.0, 1.0));
  return g;
}

TripletGaussian random_gaussian_triplet(Rng& rng, std::size_t d, std::size_t k, double margin) {
  TripletGaussian t;
  t.anchor = random_gaussian_point(rng, d, k, 0, 0);
  t.positive = random_gaussian_point(rng, d, k, 0, 1);
  t.negative = random_gaussian_point(rng, d, k, 1, 2);
  t.margin = margin;
  return t;
}

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string triplet_name(std::size_t i, std::size_t d) {
  return "triplet" + std::to_string(i) + "_D" + std::to_string(d);
}

OracleRow gated(std::string item, std::string quantity, double analytic, double oracle,
                double se, double tolerance) {
  const double err = std::abs(analytic - oracle);
  return {std::move(item), std::move(quantity), analytic, oracle, se, err, tolerance, err <= tolerance};
}

}  // namespace

OracleTable moment_suite(const MomentSuiteOptions& opts) {
  if (opts.dims.empty()) throw std::invalid_argument("moment_suite: no dimensions");
  const auto t0 = Clock::now();
  OracleTable table{"moments", {}, 0.0};
  Rng gen(derive_seed(opts.seed, 0));
  for (std::size_t i = 0; i < opts.triplets; ++i) {
    const std::size_t d = opts.dims[i % opts.dims.size()];
    const auto t = random_gaussian_triplet(gen, d);
    const auto a = tau_moments_diag(t);
    Rng mc_rng(derive_seed(opts.seed, 1 + i));
    const auto mc = mc_tau_moments(t, opts.samples, mc_rng);
    const auto name = triplet_name(i, d);
    table.rows.push_back(gated(name, "mean", a.mean, mc.mean, mc.mean_std_error, opts.sigmas * mc.mean_std_error));
    table.rows.push_back(gated(name, "var", a.var, mc.var, mc.var_std_error, opts.sigmas * mc.var_std_error));
  }
  table.seconds = seconds_since(t0);
  return table;
}

OracleTable probability_suite(const ProbabilitySuiteOptions& opts) {
  if (opts.dims.empty()) throw std::invalid_argument("probability_suite: no dimensions");
  const auto t0 = Clock::now();
  OracleTable table{"probability", {}, 0.0};
  Rng gen(derive_seed(opts.seed, 0));
  for (std::size_t i = 0; i < opts.triplets; ++i) {
    const std::size_t d = opts.dims[i % opts.dims.size()];
    const auto t = random_gaussian_triplet(gen, d);
    const double p = triplet_probability(tau_moments_diag(t), t.margin);
    Rng mc_rng(derive_seed(opts.seed, 1 + i));
    const auto mc = mc_triplet_probability(t, t.margin, opts.samples, mc_rng);
    table.rows.push_back(gated(triplet_name(i, d), "probability", p, mc.estimate, mc.std_error,
                               opts.sigmas * mc.std_error + opts.slack));
  }
  table.seconds = seconds_since(t0);
  return table;
}

GradientCheck check_gradients(const std::vector<Tensor>& inputs, const LossBuilder& build, double h) {
  std::vector<Tensor> analytic;
  {
    ad::Tape tape;
    std::vector<ad::Var> leaves;
    for (const auto& t : inputs) leaves.push_back(tape.leaf(t));
    const ad::Var loss = build(tape, leaves);
    tape.backward(loss);
    for (const auto& l : leaves) analytic.push_back(l.grad());
  }
  auto eval = [&](const std::vector<Tensor>& xs) {
    ad::Tape tape;
    std::vector<ad::Var> leaves;
    for (const auto& t : xs) leaves.push_back(tape.constant(t));
    return build(tape, leaves).value()[0];
  };
  GradientCheck out;
  std::vector<Tensor> xs = inputs;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    for (std::size_t j = 0; j < xs[i].size(); ++j) {
      const double orig = xs[i][j];
      xs[i][j] = orig + h;
      const double fp = eval(xs);
      xs[i][j] = orig - h;
      const double fm = eval(xs);
      xs[i][j] = orig;
      const double fd = (fp - fm) / (2.0 * h);
      const double a = analytic[i][j];
      // floor keeps entries that are zero up to rounding from dominating
      const double err = std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1e-4});
      if (err >= out.max_rel_error) {
        out.max_rel_error = err;
        out.worst_analytic = a;
        out.worst_numeric = fd;
      }
      ++out.checked;
    }
  }
  return out;
}

OracleTable gradient_suite(const GradientSuiteOptions& opts) {
  const auto t0 = Clock::now();
  OracleTable table{"gradients", {}, 0.0};
  Rng rng(derive_seed(opts.seed, 0));

  const std::size_t n = 12;
  Tensor coords(Shape{n, 3});
  for (auto& v : coords.values()) v = rng.uniform(-1.0, 1.0);
  const Tensor features = point_features(PointCloud(coords), 4);
  std::vector<int> labels(n);
  for (auto& l : labels) l = static_cast<int>(rng.uniform_index(3));
  const std::vector<std::size_t> a = {0, 3, 5, 7}, pos = {3, 9, 2, 11}, neg = {1, 4, 6, 10};

  enum class Loss { metric, ce, combined };
  const std::pair<Loss, const char*> losses[] = {{Loss::metric, "L_M"}, {Loss::ce, "L_CE"}, {Loss::combined, "L_CE+L_M"}};

  for (std::size_t trial = 0; trial < opts.points; ++trial) {
    const ModelKind kind = trial % 2 ? ModelKind::cue_plus : ModelKind::cue;
    NetConfig cfg;
    cfg.embed_dim = 4;
    cfg.hidden = {6, 5};
    cfg.classes = 3;
    cfg.rank = 1;
    cfg.k_ctx = 4;
    cfg.kind = kind;
    NetParams params = init_params(cfg, derive_seed(opts.seed, 100 + trial));
    for (auto& t : params.tensors)
      for (auto& v : t.values()) v += 0.3 * rng.normal();

    for (const auto& [loss, name] : losses) {
      const auto g = check_gradients(params.tensors, [&](ad::Tape&, const std::vector<ad::Var>& v) {
        BoundParams b{&params, v};
        const auto out = forward(b, features, kind);
        ad::EmbeddingVars e{out.mu, out.lam, out.p, kind == ModelKind::cue_plus ? 1u : 0u, 0};
        if (loss == Loss::ce) return ad::cross_entropy(out.logits, labels);
        const ad::Var lm = ad::metric_loss(e, e, e, {a, pos, neg}, 0.2);
        return loss == Loss::metric ? lm : ad::cross_entropy(out.logits, labels) + lm;
      });
      OracleRow row{"point" + std::to_string(trial) + "_" + to_string(kind), name, g.worst_analytic,
                    g.worst_numeric, 0.0, g.max_rel_error, opts.tolerance, g.max_rel_error < opts.tolerance};
      table.rows.push_back(std::move(row));
    }
  }
  table.seconds = seconds_since(t0);
  return table;
}

OracleTable covariance_suite(const CovarianceSuiteOptions& opts) {
  const auto t0 = Clock::now();
  OracleTable table{"covariance", {}, 0.0};
  Rng gen(derive_seed(opts.seed, 0));
  const std::pair<std::size_t, std::size_t> shapes[] = {{1, 4}, {2, 2}, {2, 4}, {4, 4}, {8, 2}, {16, 1}};
  std::size_t c = 0;
  for (const auto& [n, d] : shapes) {
    LowRankGaussianEmbeddings e{Tensor(Shape{n, d}), Tensor(Shape{n, d}), Tensor(Shape{n, d, 1})};
    for (auto& v : e.mu.values()) v = gen.uniform(-1.0, 1.0);
    for (auto& v : e.lam.values()) v = gen.uniform(0.05, 0.5);
    for (auto& v : e.p.values()) v = gen.uniform(-0.8, 0.8);
    const Tensor ref = dense_covariance(e);
    Rng rng(derive_seed(opts.seed, 1 + c));
    const auto xs = sample_embeddings(e, rng, opts.samples);

    const std::size_t m = n * d;
    std::vector<double> mean(m, 0.0), cov(m * m, 0.0);
    for (const auto& x : xs)
      for (std::size_t i = 0; i < m; ++i) mean[i] += x[i];
    for (auto& v : mean) v /= static_cast<double>(xs.size());
    for (const auto& x : xs)
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < m; ++j) cov[i * m + j] += (x[i] - mean[i]) * (x[j] - mean[j]);
    double diff = 0.0, norm = 0.0, sample_norm = 0.0;
    for (std::size_t i = 0; i < m * m; ++i) {
      cov[i] /= static_cast<double>(xs.size() - 1);
      diff += (cov[i] - ref[i]) * (cov[i] - ref[i]);
      norm += ref[i] * ref[i];
      sample_norm += cov[i] * cov[i];
    }
    const double rel = std::sqrt(diff / norm);
    table.rows.push_back({"model" + std::to_string(c) + "_N" + std::to_string(n) + "_D" + std::to_string(d),
                          "frobenius", std::sqrt(norm), std::sqrt(sample_norm), 0.0, rel,
                          opts.tolerance, rel < opts.tolerance});
    ++c;
  }
  table.seconds = seconds_since(t0);
  return table;
}

std::vector<std::string> oracle_suite_names() { return {"moments", "probability", "gradients", "covariance"}; }

OracleTable run_oracle_suite(const std::string& suite, std::uint64_t seed) {
  if (suite == "moments") {
    MomentSuiteOptions o;
    o.seed = seed;
    return moment_suite(o);
  }
  if (suite == "probability") {
    ProbabilitySuiteOptions o;
    o.seed = seed;
    return probability_suite(o);
  }
  if (suite == "gradients") {
    GradientSuiteOptions o;
    o.seed = seed;
    return gradient_suite(o);
  }
  if (suite == "covariance") {
    CovarianceSuiteOptions o;
    o.seed = seed;
    return covariance_suite(o);
  }
  throw std::invalid_argument("unknown oracle suite '" + suite + "'");
}

}  // namespace cue
