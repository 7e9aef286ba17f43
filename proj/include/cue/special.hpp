#pragma once

#include "cue/tensor.hpp"

namespace cue {

// Arguments to the normal CDF are clamped to this range before evaluation.
inline constexpr double kCdfClamp = 37.0;
// Below this point the log-CDF switches to its asymptotic tail expansion.
inline constexpr double kLogCdfTailStart = -5.0;

double std_normal_pdf(double z);
double std_normal_cdf(double z);
double std_normal_log_cdf(double z);
// d/dz log Phi(z), consistent with the branch std_normal_log_cdf uses; zero
// outside the clamp range.
double std_normal_log_cdf_grad(double z);

double softplus(double x);
double softplus_inverse(double y);
double sigmoid(double x);

Tensor softplus(const Tensor& x);

}  // namespace cue
