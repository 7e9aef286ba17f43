#include "cue/net.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "cue/sampling.hpp"
#include "cue/special.hpp"

namespace cue {

const char* to_string(ModelKind k) {
  switch (k) {
    case ModelKind::deterministic: return "deterministic";
    case ModelKind::cue: return "cue";
    case ModelKind::cue_plus: return "cue_plus";
    case ModelKind::au: return "au";
  }
  return "?";
}

ModelKind model_kind_from_string(const std::string& s) {
  if (s == "deterministic") return ModelKind::deterministic;
  if (s == "cue") return ModelKind::cue;
  if (s == "cue_plus") return ModelKind::cue_plus;
  if (s == "au") return ModelKind::au;
  throw std::invalid_argument("unknown model kind: " + s);
}

void NetConfig::validate() const {
  if (embed_dim < 2) throw std::invalid_argument("embedding dimension must be >= 2");
  if (hidden.empty()) throw std::invalid_argument("at least one hidden layer is required");
  for (auto w : hidden)
    if (w == 0) throw std::invalid_argument("hidden widths must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw std::invalid_argument("dropout must be in [0, 1)");
  if (kind == ModelKind::cue_plus && rank == 0) throw std::invalid_argument("factor rank must be >= 1");
  if (kind == ModelKind::au && classes == 0) throw std::invalid_argument("au needs a classifier");
  if (k_ctx == 0) throw std::invalid_argument("k_ctx must be >= 1");
}

Tensor point_features(const PointCloud& cloud, std::size_t k_ctx) {
  if (k_ctx >= cloud.size()) throw std::invalid_argument("point_features: k_ctx must be < N");
  const auto graph = knn_graph(cloud.coords, k_ctx);
  return point_features(cloud, graph, k_ctx);
}

Tensor point_features(const PointCloud& cloud, std::span<const std::size_t> graph,
                      std::size_t k_ctx) {
  const std::size_t n = cloud.size();
  if (k_ctx == 0 || k_ctx >= n) throw std::invalid_argument("point_features: k_ctx must be < N");
  if (graph.size() != n * k_ctx) throw ShapeError("point_features: graph size mismatch");
  double centroid[3] = {0, 0, 0};
  for (std::size_t i = 0; i < n; ++i)
    for (int c = 0; c < 3; ++c) centroid[c] += cloud.point(i)[c];
  for (double& c : centroid) c /= static_cast<double>(n);

  Tensor f(Shape{n, kPointFeatures});
  for (std::size_t i = 0; i < n; ++i) {
    const double* x = cloud.point(i);
    double* out = f.data() + i * kPointFeatures;
    double local[3] = {0, 0, 0};
    double dist = 0.0;
    for (std::size_t j = 0; j < k_ctx; ++j) {
      const double* y = cloud.point(graph[i * k_ctx + j]);
      double s = 0.0;
      for (int c = 0; c < 3; ++c) {
        local[c] += y[c];
        s += (x[c] - y[c]) * (x[c] - y[c]);
      }
      dist += std::sqrt(s);
    }
    for (int c = 0; c < 3; ++c) {
      out[c] = x[c] - centroid[c];
      out[3 + c] = x[c] - local[c] / static_cast<double>(k_ctx);
    }
    out[6] = dist / static_cast<double>(k_ctx);
  }
  return f;
}

std::size_t NetParams::index(const std::string& name) const {
  const auto it = std::find(names.begin(), names.end(), name);
  if (it == names.end()) throw std::out_of_range("no parameter named " + name);
  return static_cast<std::size_t>(it - names.begin());
}

std::size_t NetParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors) n += t.size();
  return n;
}

namespace {

constexpr std::uint64_t kInitStream = 0x1f2e3d4c5b6a7988ULL;

void add_linear(NetParams& p, const std::string& name, const std::string& branch,
                std::size_t in, std::size_t out, std::uint64_t seed, double bias = 0.0) {
  Tensor w(Shape{in, out});
  Rng rng(derive_seed(seed ^ kInitStream, hash_string((name + ".w").c_str())));
  const double a = std::sqrt(6.0 / static_cast<double>(in + out));
  for (auto& v : w.values()) v = rng.uniform(-a, a);
  p.names.push_back(name + ".w");
  p.tensors.push_back(std::move(w));
  p.branch.push_back(branch);
  p.names.push_back(name + ".b");
  p.tensors.push_back(Tensor(Shape{out}, bias));
  p.branch.push_back(branch);
}

}  // namespace

NetParams init_params(const NetConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  NetParams p;
  p.config = cfg;
  std::size_t in = kPointFeatures;
  for (std::size_t l = 0; l < cfg.hidden.size(); ++l) {
    add_linear(p, "trunk." + std::to_string(l), "trunk", in, cfg.hidden[l], seed);
    in = cfg.hidden[l];
  }
  const std::size_t h = in, d = cfg.embed_dim;
  add_linear(p, "mu", "mu_head", h, d, seed);
  if (cfg.classes > 0) add_linear(p, "cls", "cls", d, cfg.classes, seed);
  const double small = softplus_inverse(0.1);
  if (cfg.kind == ModelKind::cue || cfg.kind == ModelKind::cue_plus)
    add_linear(p, "lam", "lam", h, d, seed, small);
  if (cfg.kind == ModelKind::cue_plus) {
    add_linear(p, "p_dir", "p", h, cfg.rank * d, seed);
    add_linear(p, "p_mag", "p", h, cfg.rank * d, seed, small);
  }
  if (cfg.kind == ModelKind::au) add_linear(p, "au_var", "au", d, cfg.classes, seed, small);
  p.frozen.assign(p.tensors.size(), false);
  return p;
}

void freeze(NetParams& params, std::span<const std::string> branches) {
  for (const auto& b : branches) {
    bool known = b == "all";
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& br = params.branch[i];
      const bool hit = b == "all" || br == b || (b == "mu" && (br == "trunk" || br == "mu_head"));
      if (hit) params.frozen[i] = true;
      known = known || hit;
    }
    static const char* valid[] = {"mu", "trunk", "mu_head", "lam", "p", "cls", "au"};
    known = known || std::find(std::begin(valid), std::end(valid), b) != std::end(valid);
    if (!known) throw std::invalid_argument("unknown branch: " + b);
  }
}

void unfreeze_all(NetParams& params) { params.frozen.assign(params.tensors.size(), false); }

BoundParams bind(ad::Tape& tape, const NetParams& params) {
  BoundParams b;
  b.params = &params;
  b.vars.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i)
    b.vars.push_back(params.frozen[i] ? tape.constant(params.tensors[i])
                                      : tape.leaf(params.tensors[i]));
  return b;
}

namespace {

ad::Var linear(const BoundParams& b, const std::string& name, const ad::Var& x) {
  return ad::add_bias(ad::matmul(x, b[name + ".w"]), b[name + ".b"]);
}

Tensor dropout_mask(std::size_t rows, std::size_t cols, double rate, Rng& rng) {
  Tensor m(Shape{rows, cols});
  const double keep = 1.0 / (1.0 - rate);
  for (auto& v : m.values()) v = rng.uniform() < rate ? 0.0 : keep;
  return m;
}

}  // namespace

NetOutputs forward(const BoundParams& b, const Tensor& features, ModelKind mode,
                   const Dropout& dropout) {
  const NetConfig& cfg = b.params->config;
  if (features.rank() != 2 || features.dim(1) != kPointFeatures)
    throw ShapeError("forward: features must be N x " + std::to_string(kPointFeatures));
  if (dropout.rate > 0.0 && !dropout.rng) throw std::invalid_argument("dropout needs an rng");
  ad::Tape& tape = b.vars.front().tape();
  ad::Var h = tape.constant(features);
  for (std::size_t l = 0; l < cfg.hidden.size(); ++l) {
    h = ad::tanh(linear(b, "trunk." + std::to_string(l), h));
    if (dropout.rate > 0.0)
      h = ad::mul_const(h, dropout_mask(features.dim(0), cfg.hidden[l], dropout.rate, *dropout.rng));
  }
  NetOutputs out;
  const ad::Var pre_mu = linear(b, "mu", h);
  out.mu = ad::l2_normalize_rows(pre_mu);
  if (cfg.classes > 0) out.logits = linear(b, "cls", pre_mu);
  if (mode == ModelKind::cue || mode == ModelKind::cue_plus)
    out.lam = ad::softplus(linear(b, "lam", h));
  if (mode == ModelKind::cue_plus)
    out.p = ad::mul(ad::tanh(linear(b, "p_dir", h)), ad::softplus(linear(b, "p_mag", h)));
  if (mode == ModelKind::au) out.logit_var = ad::softplus(linear(b, "au_var", pre_mu));
  return out;
}

Tensor forward_dropout(const NetParams& params, const Tensor& features, double p_drop, Rng& rng) {
  if (!(p_drop > 0.0 && p_drop < 1.0)) throw std::invalid_argument("dropout rate must be in (0,1)");
  if (params.config.classes == 0) throw std::invalid_argument("forward_dropout needs a classifier");
  ad::Tape tape;
  const auto b = bind(tape, params);
  return forward(b, features, ModelKind::deterministic, {p_drop, &rng}).logits.value();
}

Tensor factor_to_ndk(const Tensor& p, std::size_t d, std::size_t k) {
  const std::size_t n = p.dim(0);
  if (p.dim(1) != d * k) throw ShapeError("factor block must be N x (K*D)");
  Tensor out(Shape{n, d, k});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < k; ++c)
      for (std::size_t j = 0; j < d; ++j) out[(i * d + j) * k + c] = p[i * k * d + c * d + j];
  return out;
}

Prediction predict(const NetParams& params, const Tensor& features, ModelKind mode) {
  ad::Tape tape;
  NetParams frozen = params;
  frozen.frozen.assign(frozen.size(), true);  // no gradient bookkeeping
  const auto b = bind(tape, frozen);
  const auto o = forward(b, features, mode);
  Prediction p;
  p.mu = o.mu.value();
  if (o.lam.valid()) p.lam = o.lam.value();
  if (o.p.valid()) p.p = factor_to_ndk(o.p.value(), params.config.embed_dim, params.config.rank);
  if (o.logits.valid()) p.logits = o.logits.value();
  if (o.logit_var.valid()) p.logit_var = o.logit_var.value();
  return p;
}

Sgd::Sgd(double lr, double momentum, double weight_decay)
    : lr_(lr), momentum_(momentum), weight_decay_(weight_decay) {
  set_lr(lr);
  if (momentum < 0.0 || momentum >= 1.0) throw std::invalid_argument("momentum must be in [0,1)");
  if (weight_decay < 0.0) throw std::invalid_argument("weight decay must be >= 0");
}

void Sgd::set_lr(double lr) {
  if (!(lr > 0.0)) throw std::invalid_argument("learning rate must be > 0");
  lr_ = lr;
}

void Sgd::step(NetParams& params, const std::vector<Tensor>& grads) {
  if (grads.size() != params.size()) throw ShapeError("sgd: gradient count mismatch");
  if (velocity_.empty())
    for (const auto& t : params.tensors) velocity_.emplace_back(t.shape(), 0.0);
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params.frozen[i]) continue;
    Tensor& w = params.tensors[i];
    require_same_shape(w, grads[i], "sgd gradient");
    Tensor& v = velocity_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      v[j] = momentum_ * v[j] + grads[i][j];
      w[j] -= lr_ * (v[j] + weight_decay_ * w[j]);
    }
  }
}

std::vector<Tensor> collect_grads(const BoundParams& bound) {
  std::vector<Tensor> g;
  g.reserve(bound.vars.size());
  for (std::size_t i = 0; i < bound.vars.size(); ++i) {
    if (bound.params->frozen[i])
      g.emplace_back(bound.params->tensors[i].shape(), 0.0);
    else
      g.push_back(bound.vars[i].grad());
  }
  return g;
}

}  // namespace cue
