#pragma once

// Independent checks of the analytic machinery: Monte Carlo for the tau
// moments and triplet probabilities, central differences for gradients, and
// sample covariance for the low-rank sampler. Each suite returns a table and
// a single verdict.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cue/autodiff.hpp"
#include "cue/embedding.hpp"
#include "cue/rng.hpp"
#include "cue/tensor.hpp"

namespace cue {

struct OracleRow {
  std::string item;
  std::string quantity;
  double analytic = 0.0;
  double oracle = 0.0;
  double std_error = 0.0;  // 0 where the oracle is not stochastic
  double error = 0.0;      // the statistic the gate is applied to
  double tolerance = 0.0;
  bool pass = false;
};

struct OracleTable {
  std::string suite;
  std::vector<OracleRow> rows;
  double seconds = 0.0;

  bool pass() const;
  std::size_t failures() const;
  double max_error() const;
  // item,quantity,analytic,oracle,std_error,error,tolerance,verdict
  std::string csv() const;
};

GaussianPoint random_gaussian_point(Rng& rng, std::size_t d, std::size_t k, int group,
                                    std::size_t index);
// Distinct diagonal members unless k > 0; anchor and positive share group 0.
TripletGaussian random_gaussian_triplet(Rng& rng, std::size_t d, std::size_t k = 0,
                                        double margin = 0.1);

struct MomentSuiteOptions {
  std::size_t triplets = 50;
  std::vector<std::size_t> dims{1, 4, 16, 64};
  std::size_t samples = 1000000;
  double sigmas = 3.0;
  std::uint64_t seed = 0;
};
// Analytic (mu_tau, sigma_tau^2) against MC, gate |diff| <= sigmas * stderr.
OracleTable moment_suite(const MomentSuiteOptions& opts = {});

struct ProbabilitySuiteOptions {
  std::size_t triplets = 50;
  std::vector<std::size_t> dims{16, 32, 64};
  std::size_t samples = 1000000;
  double sigmas = 3.0;
  double slack = 0.005;
  std::uint64_t seed = 1;
};
// Normal-approximation probability against the MC frequency.
OracleTable probability_suite(const ProbabilitySuiteOptions& opts = {});

struct GradientCheck {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  double worst_analytic = 0.0;  // the entry attaining max_rel_error
  double worst_numeric = 0.0;
};

// Reverse-mode gradients of build(leaves) against central differences.
using LossBuilder = std::function<ad::Var(ad::Tape&, const std::vector<ad::Var>&)>;
GradientCheck check_gradients(const std::vector<Tensor>& inputs, const LossBuilder& build,
                              double h = 1e-5);

struct GradientSuiteOptions {
  std::size_t points = 20;  // random parameter points per loss
  double tolerance = 1e-4;
  std::uint64_t seed = 2;
};
// L_M, L_CE and L_CE + L_M through a small network, cue and cue_plus.
OracleTable gradient_suite(const GradientSuiteOptions& opts = {});

struct CovarianceSuiteOptions {
  std::size_t samples = 100000;
  double tolerance = 0.05;
  std::uint64_t seed = 3;
};
// K=1 models with N*D <= 16 against P P^T + diag(lam), relative Frobenius.
OracleTable covariance_suite(const CovarianceSuiteOptions& opts = {});

// moments, probability, gradients, covariance
OracleTable run_oracle_suite(const std::string& suite, std::uint64_t seed);
std::vector<std::string> oracle_suite_names();

}  // namespace cue
