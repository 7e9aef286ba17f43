#include "cue/special.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace cue {
namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kLogSqrt2Pi = 0.91893853320467274178;

void require_finite(double z, const char* what) {
  if (!std::isfinite(z)) throw std::domain_error(std::string(what) + ": non-finite input");
}

double clamp_arg(double z) { return std::fmin(std::fmax(z, -kCdfClamp), kCdfClamp); }

// log Phi(z) ~ log phi(z) - log(-z) + log(1 - 1/z^2 + 3/z^4) for z << 0.
double log_cdf_tail(double z) {
  const double inv2 = 1.0 / (z * z);
  return -0.5 * z * z - kLogSqrt2Pi - std::log(-z) + std::log1p(-inv2 + 3.0 * inv2 * inv2);
}

double log_cdf_tail_grad(double z) {
  const double inv2 = 1.0 / (z * z);
  const double series = 1.0 - inv2 + 3.0 * inv2 * inv2;
  const double dseries = 2.0 * inv2 / z - 12.0 * inv2 * inv2 / z;
  return -z - 1.0 / z + dseries / series;
}

}  // namespace

double std_normal_pdf(double z) { return std::exp(-0.5 * z * z - kLogSqrt2Pi); }

double std_normal_cdf(double z) {
  require_finite(z, "std_normal_cdf");
  z = clamp_arg(z);
  return 0.5 * std::erfc(-z * kInvSqrt2);
}

double std_normal_log_cdf(double z) {
  require_finite(z, "std_normal_log_cdf");
  z = clamp_arg(z);
  if (z < kLogCdfTailStart) return log_cdf_tail(z);
  if (z < 0.0) return std::log(0.5 * std::erfc(-z * kInvSqrt2));
  return std::log1p(-0.5 * std::erfc(z * kInvSqrt2));
}

double std_normal_log_cdf_grad(double z) {
  require_finite(z, "std_normal_log_cdf_grad");
  if (z <= -kCdfClamp || z >= kCdfClamp) return 0.0;
  if (z < kLogCdfTailStart) return log_cdf_tail_grad(z);
  return std_normal_pdf(z) / (0.5 * std::erfc(-z * kInvSqrt2));
}

double softplus(double x) {
  require_finite(x, "softplus");
  if (x > 30.0) return x;
  return std::log1p(std::exp(x));
}

double softplus_inverse(double y) {
  if (!(y > 0.0)) throw std::domain_error("softplus_inverse: argument must be positive");
  if (y > 30.0) return y;
  return std::log(std::expm1(y));
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Tensor softplus(const Tensor& x) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = softplus(x[i]);
  return out;
}

}  // namespace cue
