#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "cue/autodiff.hpp"
#include "cue/embedding.hpp"
#include "cue/rng.hpp"
#include "cue/tensor.hpp"

namespace cue::testing {

// Builds a scalar loss from leaf vars created on the given tape.
using LossBuilder = std::function<ad::Var(ad::Tape&, const std::vector<ad::Var>&)>;

struct GradCheck {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

// |a - f| / max(|a|, |f|, floor); the floor keeps entries that are zero up to
// rounding from dominating.
inline double rel_error(double a, double f, double floor = 1e-4) {
  return std::abs(a - f) / std::max({std::abs(a), std::abs(f), floor});
}

// Central differences with step h against reverse-mode gradients.
inline GradCheck check_gradients(const std::vector<Tensor>& inputs, const LossBuilder& build,
                                 double h = 1e-5) {
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
  GradCheck out;
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
      out.max_rel_error = std::max(out.max_rel_error, rel_error(analytic[i][j], fd));
      ++out.checked;
    }
  }
  return out;
}

inline Tensor random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

inline Tensor unit_rows(Rng& rng, std::size_t rows, std::size_t cols) {
  Tensor t(Shape{rows, cols});
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (auto& v : t.row(r)) {
      v = rng.normal();
      s += v * v;
    }
    for (auto& v : t.row(r)) v /= std::sqrt(s);
  }
  return t;
}

inline GaussianPoint random_point(Rng& rng, std::size_t d, std::size_t k, int group,
                                  std::size_t index, double var_lo = 0.01, double var_hi = 0.2,
                                  double factor_scale = 0.3) {
  GaussianPoint g;
  g.group = group;
  g.index = index;
  const double s = 1.0 / std::sqrt(static_cast<double>(d));
  for (std::size_t i = 0; i < d; ++i) {
    g.mean.push_back(rng.uniform(-s, s));
    g.var.push_back(rng.uniform(var_lo, var_hi));
  }
  for (std::size_t i = 0; i < d * k; ++i) g.factor.push_back(rng.uniform(-1.0, 1.0) * factor_scale * s);
  return g;
}

// Distinct members; k > 0 gives factors with anchor/positive sharing group 0
// and the negative in group 1 unless `one_group`.
inline TripletGaussian random_triplet(Rng& rng, std::size_t d, std::size_t k = 0,
                                      bool one_group = false, double margin = 0.1) {
  TripletGaussian t;
  t.anchor = random_point(rng, d, k, 0, 0);
  t.positive = random_point(rng, d, k, 0, 1);
  t.negative = random_point(rng, d, k, one_group ? 0 : 1, 2);
  t.margin = margin;
  return t;
}

}  // namespace cue::testing
