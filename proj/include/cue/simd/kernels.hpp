#pragma once

// Inner-loop kernels with a scalar reference implementation and an AVX2/FMA
// variant. The active table is chosen once per process from CPU features; the
// CUE_SIMD environment variable ("scalar" or "avx2") overrides the choice.
//
// All matrices are dense row-major. gemm kernels accumulate into C.

#include <cstddef>

namespace cue::simd {

enum class Isa { scalar, avx2 };

// Parallel arrays for one diagonal-Gaussian triplet, one entry per dimension.
struct TripletArrays {
  const double* mu_a;
  const double* var_a;
  const double* mu_p;
  const double* var_p;
  const double* mu_n;
  const double* var_n;
};

struct KernelTable {
  Isa isa;
  const char* name;

  double (*dot)(const double* x, const double* y, std::size_t n);
  // y += alpha * x
  void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
  // C[m x n] += A[m x k] * B[k x n]
  void (*gemm_nn)(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
                  double* c);
  // C[k x n] += A^T * B, with A[m x k] and B[m x n]
  void (*gemm_tn)(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
                  double* c);
  // C[m x k] += A * B^T, with A[m x n] and B[k x n]
  void (*gemm_nt)(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
                  double* c);
  // out[i] = |rows[i] - query|^2 for rows[n x dim]
  void (*squared_distances)(const double* query, const double* rows, std::size_t n,
                            std::size_t dim, double* out);
  // Sums of the per-dimension mean and variance of
  // T^d = (X_a^d - X_p^d)^2 - (X_a^d - X_n^d)^2 over independent Gaussians.
  void (*triplet_moment_sums)(const TripletArrays& t, std::size_t dims, double* mean_sum,
                              double* var_sum);
};

const KernelTable& scalar_kernels();
// nullptr when the binary was built without the AVX2 translation unit.
const KernelTable* avx2_kernels();

bool cpu_supports(Isa isa);
const KernelTable& select(Isa isa);
const KernelTable& active();

}  // namespace cue::simd
