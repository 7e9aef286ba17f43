#include "cue/triplet.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "cue/simd/kernels.hpp"
#include "cue/special.hpp"

namespace cue {

TauMoments per_dim_moments(const TripletGaussian& t, std::size_t d) {
  if (d >= t.dims()) throw std::out_of_range("per_dim_moments: dimension out of range");
  for (const auto* g : {&t.anchor, &t.positive, &t.negative})
    if (!(g->var[d] > 0.0)) throw std::invalid_argument("per_dim_moments: non-positive variance");
  const simd::TripletArrays arr{&t.anchor.mean[d],   &t.anchor.var[d],   &t.positive.mean[d],
                                &t.positive.var[d],  &t.negative.mean[d], &t.negative.var[d]};
  TauMoments m;
  simd::scalar_kernels().triplet_moment_sums(arr, 1, &m.mean, &m.var);
  return m;
}

TauMoments tau_moments_diag(const TripletGaussian& t) {
  t.validate();
  const simd::TripletArrays arr{t.anchor.mean.data(),   t.anchor.var.data(),
                                t.positive.mean.data(), t.positive.var.data(),
                                t.negative.mean.data(), t.negative.var.data()};
  TauMoments m;
  simd::active().triplet_moment_sums(arr, t.dims(), &m.mean, &m.var);
  return m;
}

void QuadraticForm::validate() const {
  const std::size_t m = size();
  if (form.rank() != 2 || form.dim(0) != m || form.dim(1) != m)
    throw ShapeError("quadratic form matrix must be M x M");
  if (diag.size() != m) throw ShapeError("quadratic form diagonal must have M entries");
  if (!factor.empty() && (factor.rank() != 2 || factor.dim(0) != m))
    throw ShapeError("quadratic form factor must be M x K");
  double scale = 1.0;
  for (double v : form.values()) scale = std::max(scale, std::abs(v));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = i + 1; j < m; ++j)
      if (std::abs(form[i * m + j] - form[j * m + i]) > 1e-12 * scale)
        throw std::invalid_argument("quadratic form matrix is not symmetric");
  for (double v : diag)
    if (!(v > 0.0)) throw std::invalid_argument("quadratic form diagonal must be positive");
}

TauMoments quadratic_form_moments_dense(const QuadraticForm& q) {
  q.validate();
  const std::size_t m = q.size(), k = q.rank();
  std::vector<double> s(m * m, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      double v = 0.0;
      for (std::size_t c = 0; c < k; ++c) v += q.factor[i * k + c] * q.factor[j * k + c];
      s[i * m + j] = v;
    }
    s[i * m + i] += q.diag[i];
  }
  std::vector<double> as(m * m, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t l = 0; l < m; ++l) {
      const double a = q.form[i * m + l];
      if (a == 0.0) continue;
      for (std::size_t j = 0; j < m; ++j) as[i * m + j] += a * s[l * m + j];
    }
  double tr_as = 0.0, tr_asas = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    tr_as += as[i * m + i];
    for (std::size_t j = 0; j < m; ++j) tr_asas += as[i * m + j] * as[j * m + i];
  }
  std::vector<double> am(m, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j) am[i] += q.form[i * m + j] * q.mean[j];
  double mam = 0.0, masam = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    mam += q.mean[i] * am[i];
    for (std::size_t j = 0; j < m; ++j) masam += am[i] * s[i * m + j] * am[j];
  }
  return {tr_as + mam, 2.0 * tr_asas + 4.0 * masam};
}

TauMoments quadratic_form_moments_structured(const QuadraticForm& q) {
  q.validate();
  const std::size_t m = q.size(), k = q.rank();
  const Tensor& a = q.form;
  const auto& l = q.diag;

  double tr_as = 0.0, tr_alal = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    tr_as += a[i * m + i] * l[i];
    for (std::size_t j = 0; j < m; ++j) tr_alal += a[i * m + j] * a[i * m + j] * l[i] * l[j];
  }
  std::vector<double> am(m, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j) am[i] += a[i * m + j] * q.mean[j];
  double mam = 0.0, mal_am = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    mam += q.mean[i] * am[i];
    mal_am += am[i] * l[i] * am[i];
  }

  // A f_k for every latent column.
  std::vector<double> af(m * k, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      const double aij = a[i * m + j];
      if (aij == 0.0) continue;
      for (std::size_t c = 0; c < k; ++c) af[i * k + c] += aij * q.factor[j * k + c];
    }
  std::vector<double> g(k * k, 0.0);  // F^T A F
  double cross = 0.0;                 // sum_k (A f_k)^T diag (A f_k)
  double fam = 0.0;                   // sum_k (f_k^T A m)^2
  for (std::size_t c = 0; c < k; ++c) {
    double fam_c = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      cross += af[i * k + c] * l[i] * af[i * k + c];
      fam_c += af[i * k + c] * q.mean[i];
      for (std::size_t c2 = 0; c2 < k; ++c2) g[c * k + c2] += q.factor[i * k + c] * af[i * k + c2];
    }
    fam += fam_c * fam_c;
    tr_as += g[c * k + c];
  }
  double g_sq = 0.0;
  for (double v : g) g_sq += v * v;

  const double tr_asas = tr_alal + 2.0 * cross + g_sq;
  const double masam = mal_am + fam;
  return {tr_as + mam, 2.0 * tr_asas + 4.0 * masam};
}

TauMoments quadratic_form_moments(const QuadraticForm& q) {
  return q.size() <= kDenseQuadraticFormLimit ? quadratic_form_moments_dense(q)
                                              : quadratic_form_moments_structured(q);
}

QuadraticForm triplet_quadratic_form(const TripletGaussian& t) {
  t.validate();
  const std::size_t d = t.dims(), k = t.rank(), m = 3 * d;
  const GaussianPoint* members[3] = {&t.anchor, &t.positive, &t.negative};

  QuadraticForm q;
  q.form = Tensor(Shape{m, m}, 0.0);
  for (std::size_t i = 0; i < d; ++i) {
    const std::size_t ia = i, ip = d + i, in = 2 * d + i;
    q.form[ia * m + ip] = q.form[ip * m + ia] = -1.0;
    q.form[ia * m + in] = q.form[in * m + ia] = 1.0;
    q.form[ip * m + ip] = 1.0;
    q.form[in * m + in] = -1.0;
  }
  q.mean.reserve(m);
  q.diag.reserve(m);
  for (const auto* g : members) {
    q.mean.insert(q.mean.end(), g->mean.begin(), g->mean.end());
    q.diag.insert(q.diag.end(), g->var.begin(), g->var.end());
  }
  if (k > 0) {
    std::vector<int> groups;
    for (const auto* g : members)
      if (std::find(groups.begin(), groups.end(), g->group) == groups.end())
        groups.push_back(g->group);
    const std::size_t cols = k * groups.size();
    q.factor = Tensor(Shape{m, cols}, 0.0);
    for (std::size_t r = 0; r < 3; ++r) {
      const auto gi = static_cast<std::size_t>(
          std::find(groups.begin(), groups.end(), members[r]->group) - groups.begin());
      for (std::size_t i = 0; i < d; ++i)
        for (std::size_t c = 0; c < k; ++c)
          q.factor[(r * d + i) * cols + gi * k + c] = members[r]->factor[i * k + c];
    }
  }
  return q;
}

TauMoments tau_moments_lowrank(const TripletGaussian& t) {
  if (!t.has_factors()) throw std::invalid_argument("tau_moments_lowrank: triplet has no factors");
  return quadratic_form_moments(triplet_quadratic_form(t));
}

double triplet_probability(const TauMoments& tm, double margin) {
  const double sigma = std::max(std::sqrt(std::max(tm.var, 0.0)), kSigmaFloor);
  return std_normal_cdf((-margin - tm.mean) / sigma);
}

namespace {

TripletGaussian fold_factors(const TripletGaussian& t) {
  TripletGaussian out = t;
  const std::size_t k = t.rank();
  for (auto* g : {&out.anchor, &out.positive, &out.negative}) {
    for (std::size_t i = 0; i < g->var.size(); ++i)
      for (std::size_t c = 0; c < k; ++c) g->var[i] += g->factor[i * k + c] * g->factor[i * k + c];
    g->factor.clear();
  }
  return out;
}

}  // namespace

TauMoments tau_moments(const TripletGaussian& t, MomentMode mode) {
  if (!t.has_factors()) return tau_moments_diag(t);
  if (mode == MomentMode::diagonal) return tau_moments_diag(fold_factors(t));
  return tau_moments_lowrank(t);
}

double metric_loss(std::span<const TripletGaussian> triplets, double margin, MomentMode mode) {
  if (triplets.empty()) throw std::invalid_argument("metric_loss: empty triplet list");
  double total = 0.0;
  for (const auto& t : triplets) {
    const TauMoments tm = tau_moments(t, mode);
    const double sigma = std::sqrt(std::max(tm.var, kSigmaFloor * kSigmaFloor));
    total -= std_normal_log_cdf((-margin - tm.mean) / sigma);
  }
  return total / static_cast<double>(triplets.size());
}

namespace {

// Generates joint draws of (X_a, X_p, X_n) and evaluates tau for each.
class TripletSampler {
 public:
  explicit TripletSampler(const TripletGaussian& t) : d_(t.dims()), k_(t.rank()) {
    t.validate();
    const GaussianPoint* m[3] = {&t.anchor, &t.positive, &t.negative};
    for (int r = 0; r < 3; ++r) {
      members_[r] = m[r];
      alias_[r] = r;
      for (int s = 0; s < r; ++s)
        if (m[s]->group == m[r]->group && m[s]->index == m[r]->index) {
          alias_[r] = alias_[s];
          break;
        }
      gslot_[r] = r;
      for (int s = 0; s < r; ++s)
        if (m[s]->group == m[r]->group) {
          gslot_[r] = gslot_[s];
          break;
        }
      sd_[r].resize(d_);
      for (std::size_t i = 0; i < d_; ++i) sd_[r][i] = std::sqrt(m[r]->var[i]);
      x_[r].resize(d_);
    }
    latent_.resize(3 * std::max<std::size_t>(k_, 1));
  }

  double draw(Rng& rng) {
    for (int g = 0; g < 3; ++g)
      for (std::size_t c = 0; c < k_; ++c) latent_[g * k_ + c] = rng.normal();
    for (int r = 0; r < 3; ++r) {
      if (alias_[r] != r) continue;
      const GaussianPoint& g = *members_[r];
      const double* z = latent_.data() + gslot_[r] * k_;
      for (std::size_t i = 0; i < d_; ++i) {
        double v = g.mean[i] + sd_[r][i] * rng.normal();
        for (std::size_t c = 0; c < k_; ++c) v += g.factor[i * k_ + c] * z[c];
        x_[r][i] = v;
      }
    }
    const auto& xa = x_[alias_[0]];
    const auto& xp = x_[alias_[1]];
    const auto& xn = x_[alias_[2]];
    double tau = 0.0;
    for (std::size_t i = 0; i < d_; ++i) {
      const double dp = xa[i] - xp[i];
      const double dn = xa[i] - xn[i];
      tau += dp * dp - dn * dn;
    }
    return tau;
  }

 private:
  std::size_t d_, k_;
  const GaussianPoint* members_[3];
  int alias_[3];
  int gslot_[3];
  std::vector<double> sd_[3];
  std::vector<double> x_[3];
  std::vector<double> latent_;
};

}  // namespace

McEstimate mc_triplet_probability(const TripletGaussian& t, double margin, std::size_t n,
                                  Rng& rng) {
  if (n < 1000) throw std::invalid_argument("mc_triplet_probability: need at least 1000 samples");
  TripletSampler sampler(t);
  std::size_t hits = 0;
  for (std::size_t s = 0; s < n; ++s)
    if (sampler.draw(rng) < -margin) ++hits;
  const double p = static_cast<double>(hits) / static_cast<double>(n);
  return {p, std::sqrt(p * (1.0 - p) / static_cast<double>(n))};
}

McTauMoments mc_tau_moments(const TripletGaussian& t, std::size_t n, Rng& rng) {
  if (n < 1000) throw std::invalid_argument("mc_tau_moments: need at least 1000 samples");
  TripletSampler sampler(t);
  std::vector<double> tau(n);
  double s = 0.0;
  for (auto& v : tau) {
    v = sampler.draw(rng);
    s += v;
  }
  const double nd = static_cast<double>(n);
  const double mean = s / nd;
  double m2 = 0.0, m4 = 0.0;
  for (double v : tau) {
    const double c = v - mean;
    const double c2 = c * c;
    m2 += c2;
    m4 += c2 * c2;
  }
  const double var = m2 / (nd - 1.0);
  const double mu4 = m4 / nd;
  const double var_se = std::sqrt(std::max(mu4 - var * var * (nd - 3.0) / (nd - 1.0), 0.0) / nd);
  return {mean, std::sqrt(var / nd), var, var_se};
}

namespace ad {
namespace {

Var zeros_like_rows(Tape& tape, std::size_t rows, std::size_t cols) {
  return tape.constant(Tensor(Shape{rows, cols}, 0.0));
}

TauVars diag_moments(const Var& ma, const Var& sa, const Var& mp, const Var& sp, const Var& mn,
                     const Var& sn) {
  const Var ma2 = square(ma), mp2 = square(mp), mn2 = square(mn);
  const Var mean = sub(add(mp2, sp), add(mn2, sn)) - scale(mul(ma, sub(mp, mn)), 2.0);

  const Var sa_ma2 = add(sa, ma2);
  auto bracket = [&](const Var& m, const Var& m2, const Var& s) {
    Var b = add(square(s), scale(mul(m2, s), 2.0));
    b = add(b, scale(mul(sa_ma2, add(s, m2)), 2.0));
    b = sub(b, scale(mul(ma2, m2), 2.0));
    return sub(b, scale(mul(mul(ma, m), s), 4.0));
  };
  Var var = scale(add(bracket(mp, mp2, sp), bracket(mn, mn2, sn)), 2.0);
  var = sub(var, scale(mul(mul(mp, mn), sa), 8.0));
  return {row_sum(mean), row_sum(var)};
}

struct FactorColumn {
  Var fa, fp, fn;  // T x D
};

TauVars lowrank_moments(const Var& ma, const Var& la, const Var& mp, const Var& lp, const Var& mn,
                        const Var& ln, const std::vector<FactorColumn>& cols) {
  const Var dm_ap = sub(ma, mp);
  const Var dm_an = sub(ma, mn);

  // tr(A Lambda) + m^T A m, per dimension
  Var mean_d = add(sub(lp, ln), sub(square(dm_ap), square(dm_an)));
  // tr(A Lambda A Lambda), per dimension
  Var tr_ll = add(add(square(lp), square(ln)), scale(add(mul(la, lp), mul(la, ln)), 2.0));
  // (A m)^T Lambda (A m), per dimension
  Var mlm = add(add(mul(la, square(sub(dm_ap, dm_an))), mul(lp, square(dm_ap))),
                mul(ln, square(dm_an)));

  Var mean = row_sum(mean_d);
  Var tr_asas = row_sum(tr_ll);
  Var masam = row_sum(mlm);

  std::vector<Var> d_ap(cols.size()), d_an(cols.size());
  for (std::size_t c = 0; c < cols.size(); ++c) {
    d_ap[c] = sub(cols[c].fa, cols[c].fp);
    d_an[c] = sub(cols[c].fa, cols[c].fn);
  }
  for (std::size_t c = 0; c < cols.size(); ++c) {
    // f^T A Lambda A f
    const Var falaf = add(add(mul(la, square(sub(d_ap[c], d_an[c]))), mul(lp, square(d_ap[c]))),
                          mul(ln, square(d_an[c])));
    tr_asas = add(tr_asas, scale(row_sum(falaf), 2.0));
    // f^T A m
    const Var fam = row_sum(sub(mul(d_ap[c], dm_ap), mul(d_an[c], dm_an)));
    masam = add(masam, square(fam));
    for (std::size_t c2 = 0; c2 < cols.size(); ++c2) {
      const Var g = row_sum(sub(mul(d_ap[c], d_ap[c2]), mul(d_an[c], d_an[c2])));
      if (c == c2) mean = add(mean, g);
      tr_asas = add(tr_asas, square(g));
    }
  }
  return {mean, add(scale(tr_asas, 2.0), scale(masam, 4.0))};
}

}  // namespace

TauVars tau_moments(const EmbeddingVars& as, const EmbeddingVars& ps, const EmbeddingVars& ns,
                    const TripletIndices& idx, MomentMode mode) {
  const std::size_t t_count = idx.anchor.size();
  if (t_count == 0) throw std::invalid_argument("tau_moments: empty triplet batch");
  if (idx.positive.size() != t_count || idx.negative.size() != t_count)
    throw ShapeError("tau_moments: index lists differ in length");
  const std::size_t d = as.mu.value().dim(1);
  for (const auto* s : {&ps, &ns})
    if (s->mu.value().dim(1) != d) throw ShapeError("tau_moments: embedding dimensions differ");
  Tape& tape = as.mu.tape();

  const Var ma = gather_rows(as.mu, idx.anchor);
  const Var mp = gather_rows(ps.mu, idx.positive);
  const Var mn = gather_rows(ns.mu, idx.negative);
  Var la = gather_rows(as.lam, idx.anchor);
  Var lp = gather_rows(ps.lam, idx.positive);
  Var ln = gather_rows(ns.lam, idx.negative);

  const EmbeddingVars* sets[3] = {&as, &ps, &ns};
  const std::span<const std::size_t> rows[3] = {idx.anchor, idx.positive, idx.negative};
  bool any_factor = false;
  for (const auto* s : sets) any_factor = any_factor || (s->p.valid() && s->rank > 0);
  if (!any_factor) return diag_moments(ma, la, mp, lp, mn, ln);

  // Gathered factor blocks per member and latent column.
  std::vector<std::vector<Var>> f(3);
  std::size_t k = 0;
  for (int r = 0; r < 3; ++r) {
    if (!sets[r]->p.valid() || sets[r]->rank == 0) continue;
    if (k != 0 && k != sets[r]->rank) throw ShapeError("tau_moments: factor ranks differ");
    k = sets[r]->rank;
    const Var g = gather_rows(sets[r]->p, rows[r]);
    for (std::size_t c = 0; c < k; ++c) f[r].push_back(slice_cols(g, c * d, d));
  }

  if (mode == MomentMode::diagonal) {
    Var* lams[3] = {&la, &lp, &ln};
    for (int r = 0; r < 3; ++r)
      for (const Var& fc : f[r]) *lams[r] = add(*lams[r], square(fc));
    return diag_moments(ma, la, mp, lp, mn, ln);
  }

  std::vector<int> groups;
  for (int r = 0; r < 3; ++r)
    if (!f[r].empty() &&
        std::find(groups.begin(), groups.end(), sets[r]->group) == groups.end())
      groups.push_back(sets[r]->group);
  const Var zero = zeros_like_rows(tape, t_count, d);
  std::vector<FactorColumn> cols;
  for (int g : groups)
    for (std::size_t c = 0; c < k; ++c) {
      FactorColumn col{zero, zero, zero};
      Var* slot[3] = {&col.fa, &col.fp, &col.fn};
      for (int r = 0; r < 3; ++r)
        if (!f[r].empty() && sets[r]->group == g) *slot[r] = f[r][c];
      cols.push_back(col);
    }
  return lowrank_moments(ma, la, mp, lp, mn, ln, cols);
}

Var metric_loss(const EmbeddingVars& as, const EmbeddingVars& ps, const EmbeddingVars& ns,
                const TripletIndices& idx, double margin, MomentMode mode) {
  const TauVars tm = tau_moments(as, ps, ns, idx, mode);
  const Var sigma = sqrt(clamp_min(tm.var, kSigmaFloor * kSigmaFloor));
  const Var z = div(neg(add_scalar(tm.mean, margin)), sigma);
  return neg(mean(std_normal_log_cdf(z)));
}

}  // namespace ad

}  // namespace cue
