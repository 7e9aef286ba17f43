#pragma once

// Per-point embedding network: a tanh MLP trunk over local point features
// and output heads for mu (L2-normalized), lam (softplus), the scale factor
// p = tanh(a) * softplus(b), class logits, and an optional logit-variance
// head for the aleatoric baseline.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cue/autodiff.hpp"
#include "cue/embedding.hpp"
#include "cue/rng.hpp"
#include "cue/tensor.hpp"

namespace cue {

enum class ModelKind { deterministic, cue, cue_plus, au };

const char* to_string(ModelKind k);
ModelKind model_kind_from_string(const std::string& s);

inline constexpr std::size_t kPointFeatures = 7;

struct NetConfig {
  std::size_t embed_dim = 16;
  std::vector<std::size_t> hidden{64, 64, 64};
  std::size_t classes = 0;  // 0: no classifier head
  std::size_t rank = 1;     // factor rank K for cue_plus
  double dropout = 0.0;
  std::size_t k_ctx = 8;
  ModelKind kind = ModelKind::cue;

  void validate() const;
};

// [xyz - centroid, xyz - mean of k_ctx nearest neighbours, mean neighbour distance]
Tensor point_features(const PointCloud& cloud, std::size_t k_ctx);
// Same, with a precomputed knn_graph(coords, k_ctx).
Tensor point_features(const PointCloud& cloud, std::span<const std::size_t> graph,
                      std::size_t k_ctx);

struct NetParams {
  NetConfig config;
  std::vector<std::string> names;
  std::vector<Tensor> tensors;
  std::vector<std::string> branch;  // trunk, mu, lam, p, cls, au
  std::vector<bool> frozen;

  std::size_t size() const { return tensors.size(); }
  std::size_t index(const std::string& name) const;  // throws if absent
  const Tensor& get(const std::string& name) const { return tensors[index(name)]; }
  std::size_t parameter_count() const;
};

// Xavier-uniform weights, zero biases, lam-head bias softplus^-1(0.1). Each
// tensor is seeded from (seed, name), so tensors shared between model kinds
// start identical.
NetParams init_params(const NetConfig& cfg, std::uint64_t seed);

// Branch names: "mu" (trunk and mu head, everything mu depends on), "trunk",
// "mu_head", "lam", "p", "cls", "au", "all".
void freeze(NetParams& params, std::span<const std::string> branches);
void unfreeze_all(NetParams& params);

// Parameters registered on a tape. Frozen tensors become constants.
struct BoundParams {
  const NetParams* params = nullptr;
  std::vector<ad::Var> vars;
  const ad::Var& operator[](const std::string& name) const { return vars[params->index(name)]; }
};
BoundParams bind(ad::Tape& tape, const NetParams& params);

struct NetOutputs {
  ad::Var mu;      // N x D, unit rows
  ad::Var lam;     // N x D (cue, cue_plus)
  ad::Var p;       // N x (K*D), latent column k in columns [k*D, (k+1)*D) (cue_plus)
  ad::Var logits;  // N x C (when classes > 0)
  ad::Var logit_var;  // N x C (au)
};

struct Dropout {
  double rate = 0.0;
  Rng* rng = nullptr;
};

// Evaluates the heads `mode` needs. Logits come from the mu head output
// before L2-normalization.
NetOutputs forward(const BoundParams& params, const Tensor& features, ModelKind mode,
                   const Dropout& dropout = {});

// Logits with Bernoulli masks after every hidden nonlinearity.
Tensor forward_dropout(const NetParams& params, const Tensor& features, double p_drop, Rng& rng);

// Plain-tensor results of a forward pass.
struct Prediction {
  Tensor mu;
  Tensor lam;  // empty unless cue / cue_plus
  Tensor p;    // N x D x K, empty unless cue_plus
  Tensor logits;
  Tensor logit_var;

  DiagGaussianEmbeddings diag() const { return {mu, lam}; }
  LowRankGaussianEmbeddings lowrank() const { return {mu, lam, p}; }
};
Prediction predict(const NetParams& params, const Tensor& features, ModelKind mode);

// Converts an N x (K*D) factor block to N x D x K.
Tensor factor_to_ndk(const Tensor& p, std::size_t d, std::size_t k);

// v <- m v + g; w <- w - lr (v + wd w). Frozen tensors are left untouched.
class Sgd {
 public:
  Sgd(double lr, double momentum = 0.9, double weight_decay = 0.0);
  void step(NetParams& params, const std::vector<Tensor>& grads);
  double lr() const { return lr_; }
  void set_lr(double lr);

 private:
  double lr_, momentum_, weight_decay_;
  std::vector<Tensor> velocity_;
};

// Gradients of every bound tensor after tape.backward (zeros for frozen).
std::vector<Tensor> collect_grads(const BoundParams& bound);

}  // namespace cue
