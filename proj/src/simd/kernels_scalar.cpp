#include "cue/simd/kernels.hpp"

namespace cue::simd {
namespace {

double dot(const double* x, const double* y, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += x[i] * y[i];
  return s;
}

void axpy(double alpha, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
             double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double aik = a[i * k + kk];
      const double* bk = b + kk * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aik * bk[j];
    }
  }
}

void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
             double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* bi = b + i * n;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double aik = a[i * k + kk];
      double* ck = c + kk * n;
      for (std::size_t j = 0; j < n; ++j) ck[j] += aik * bi[j];
    }
  }
}

void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
             double* c) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t kk = 0; kk < k; ++kk) c[i * k + kk] += dot(a + i * n, b + kk * n, n);
}

void squared_distances(const double* query, const double* rows, std::size_t n, std::size_t dim,
                       double* out) {
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    const double* r = rows + i * dim;
    for (std::size_t d = 0; d < dim; ++d) {
      const double diff = r[d] - query[d];
      s += diff * diff;
    }
    out[i] = s;
  }
}

// Closed-form moments, term for term as they are usually printed.
void triplet_moment_sums(const TripletArrays& t, std::size_t dims, double* mean_sum,
                         double* var_sum) {
  double ms = 0.0;
  double vs = 0.0;
  for (std::size_t d = 0; d < dims; ++d) {
    const double ma = t.mu_a[d], sa = t.var_a[d];
    const double mp = t.mu_p[d], sp = t.var_p[d];
    const double mn = t.mu_n[d], sn = t.var_n[d];
    ms += mp * mp + sp - mn * mn - sn - 2.0 * ma * (mp - mn);
    const double pos = sp * sp + 2.0 * mp * mp * sp + 2.0 * (sa + ma * ma) * (sp + mp * mp) -
                       2.0 * ma * ma * mp * mp - 4.0 * ma * mp * sp;
    const double neg = sn * sn + 2.0 * mn * mn * sn + 2.0 * (sa + ma * ma) * (sn + mn * mn) -
                       2.0 * ma * ma * mn * mn - 4.0 * ma * mn * sn;
    vs += 2.0 * pos + 2.0 * neg - 8.0 * mp * mn * sa;
  }
  *mean_sum = ms;
  *var_sum = vs;
}

}  // namespace

const KernelTable& scalar_kernels() {
  static const KernelTable table{Isa::scalar,     "scalar", dot,
                                 axpy,            gemm_nn,  gemm_tn,
                                 gemm_nt,         squared_distances,
                                 triplet_moment_sums};
  return table;
}

}  // namespace cue::simd
