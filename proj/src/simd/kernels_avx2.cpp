// Compiled with -mavx2 -mfma. Only reached after a runtime CPU check.

#include <immintrin.h>

#include "cue/simd/kernels.hpp"

namespace cue::simd {
namespace {

inline double hsum(__m256d v) {
  const __m128d lo = _mm256_castpd256_pd128(v);
  const __m128d hi = _mm256_extractf128_pd(v, 1);
  const __m128d s = _mm_add_pd(lo, hi);
  return _mm_cvtsd_f64(_mm_add_sd(s, _mm_unpackhi_pd(s, s)));
}

double dot(const double* x, const double* y, std::size_t n) {
  __m256d acc0 = _mm256_setzero_pd();
  __m256d acc1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i), acc0);
    acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i + 4), _mm256_loadu_pd(y + i + 4), acc1);
  }
  for (; i + 4 <= n; i += 4)
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i), acc0);
  double s = hsum(_mm256_add_pd(acc0, acc1));
  for (; i < n; ++i) s += x[i] * y[i];
  return s;
}

void axpy(double alpha, const double* x, double* y, std::size_t n) {
  const __m256d a = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(y + i, _mm256_fmadd_pd(a, _mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
  for (; i < n; ++i) y[i] += alpha * x[i];
}

void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
             double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    for (std::size_t kk = 0; kk < k; ++kk) axpy(a[i * k + kk], b + kk * n, ci, n);
  }
}

void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
             double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* bi = b + i * n;
    for (std::size_t kk = 0; kk < k; ++kk) axpy(a[i * k + kk], bi, c + kk * n, n);
  }
}

void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
             double* c) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t kk = 0; kk < k; ++kk) c[i * k + kk] += dot(a + i * n, b + kk * n, n);
}

void squared_distances(const double* query, const double* rows, std::size_t n, std::size_t dim,
                       double* out) {
  if (dim == 3) {
    const __m256i idx = _mm256_set_epi64x(9, 6, 3, 0);
    const __m256d qx = _mm256_set1_pd(query[0]);
    const __m256d qy = _mm256_set1_pd(query[1]);
    const __m256d qz = _mm256_set1_pd(query[2]);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
      const double* base = rows + i * 3;
      const __m256d dx = _mm256_sub_pd(_mm256_i64gather_pd(base, idx, 8), qx);
      const __m256d dy = _mm256_sub_pd(_mm256_i64gather_pd(base + 1, idx, 8), qy);
      const __m256d dz = _mm256_sub_pd(_mm256_i64gather_pd(base + 2, idx, 8), qz);
      __m256d s = _mm256_mul_pd(dx, dx);
      s = _mm256_fmadd_pd(dy, dy, s);
      s = _mm256_fmadd_pd(dz, dz, s);
      _mm256_storeu_pd(out + i, s);
    }
    for (; i < n; ++i) {
      const double* r = rows + i * 3;
      const double dx = r[0] - query[0], dy = r[1] - query[1], dz = r[2] - query[2];
      out[i] = dx * dx + dy * dy + dz * dz;
    }
    return;
  }
  for (std::size_t i = 0; i < n; ++i) {
    const double* r = rows + i * dim;
    __m256d acc = _mm256_setzero_pd();
    std::size_t d = 0;
    for (; d + 4 <= dim; d += 4) {
      const __m256d diff = _mm256_sub_pd(_mm256_loadu_pd(r + d), _mm256_loadu_pd(query + d));
      acc = _mm256_fmadd_pd(diff, diff, acc);
    }
    double s = hsum(acc);
    for (; d < dim; ++d) {
      const double diff = r[d] - query[d];
      s += diff * diff;
    }
    out[i] = s;
  }
}

void triplet_moment_sums(const TripletArrays& t, std::size_t dims, double* mean_sum,
                         double* var_sum) {
  const __m256d two = _mm256_set1_pd(2.0);
  const __m256d four = _mm256_set1_pd(4.0);
  const __m256d eight = _mm256_set1_pd(8.0);
  __m256d msum = _mm256_setzero_pd();
  __m256d vsum = _mm256_setzero_pd();
  std::size_t d = 0;
  for (; d + 4 <= dims; d += 4) {
    const __m256d ma = _mm256_loadu_pd(t.mu_a + d), sa = _mm256_loadu_pd(t.var_a + d);
    const __m256d mp = _mm256_loadu_pd(t.mu_p + d), sp = _mm256_loadu_pd(t.var_p + d);
    const __m256d mn = _mm256_loadu_pd(t.mu_n + d), sn = _mm256_loadu_pd(t.var_n + d);
    const __m256d ma2 = _mm256_mul_pd(ma, ma);
    const __m256d mp2 = _mm256_mul_pd(mp, mp);
    const __m256d mn2 = _mm256_mul_pd(mn, mn);

    // mp^2 + sp - mn^2 - sn - 2 ma (mp - mn)
    __m256d mean = _mm256_sub_pd(_mm256_add_pd(mp2, sp), _mm256_add_pd(mn2, sn));
    mean = _mm256_fnmadd_pd(_mm256_mul_pd(two, ma), _mm256_sub_pd(mp, mn), mean);
    msum = _mm256_add_pd(msum, mean);

    const __m256d sa_ma2 = _mm256_add_pd(sa, ma2);
    __m256d pos = _mm256_mul_pd(sp, sp);
    pos = _mm256_fmadd_pd(_mm256_mul_pd(two, mp2), sp, pos);
    pos = _mm256_fmadd_pd(_mm256_mul_pd(two, sa_ma2), _mm256_add_pd(sp, mp2), pos);
    pos = _mm256_fnmadd_pd(_mm256_mul_pd(two, ma2), mp2, pos);
    pos = _mm256_fnmadd_pd(_mm256_mul_pd(four, _mm256_mul_pd(ma, mp)), sp, pos);

    __m256d neg = _mm256_mul_pd(sn, sn);
    neg = _mm256_fmadd_pd(_mm256_mul_pd(two, mn2), sn, neg);
    neg = _mm256_fmadd_pd(_mm256_mul_pd(two, sa_ma2), _mm256_add_pd(sn, mn2), neg);
    neg = _mm256_fnmadd_pd(_mm256_mul_pd(two, ma2), mn2, neg);
    neg = _mm256_fnmadd_pd(_mm256_mul_pd(four, _mm256_mul_pd(ma, mn)), sn, neg);

    __m256d var = _mm256_mul_pd(two, _mm256_add_pd(pos, neg));
    var = _mm256_fnmadd_pd(_mm256_mul_pd(eight, _mm256_mul_pd(mp, mn)), sa, var);
    vsum = _mm256_add_pd(vsum, var);
  }
  double ms = hsum(msum);
  double vs = hsum(vsum);
  if (d < dims) {
    const TripletArrays tail{t.mu_a + d, t.var_a + d, t.mu_p + d,
                             t.var_p + d, t.mu_n + d, t.var_n + d};
    double mt = 0.0, vt = 0.0;
    scalar_kernels().triplet_moment_sums(tail, dims - d, &mt, &vt);
    ms += mt;
    vs += vt;
  }
  *mean_sum = ms;
  *var_sum = vs;
}

}  // namespace

const KernelTable* avx2_kernels() {
  static const KernelTable table{Isa::avx2,     "avx2",  dot,
                                 axpy,          gemm_nn, gemm_tn,
                                 gemm_nt,       squared_distances,
                                 triplet_moment_sums};
  return &table;
}

}  // namespace cue::simd
