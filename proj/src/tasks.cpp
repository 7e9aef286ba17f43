#include "cue/tasks.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <numbers>
#include <numeric>

namespace cue {

const char* to_string(Primitive p) {
  switch (p) {
    case Primitive::floor: return "floor";
    case Primitive::sphere: return "sphere";
    case Primitive::low_box: return "low_box";
    case Primitive::tall_box: return "tall_box";
  }
  return "?";
}

Primitive primitive_from_string(const std::string& s) {
  for (auto p : {Primitive::floor, Primitive::sphere, Primitive::low_box, Primitive::tall_box})
    if (s == to_string(p)) return p;
  throw std::invalid_argument("unknown primitive: " + s);
}

void SceneConfig::validate() const {
  if (classes < 2) throw std::invalid_argument("SceneConfig: classes must be >= 2");
  if (points < classes) throw std::invalid_argument("SceneConfig: need at least one point per class");
  if (!(noise_sigma >= 0.0)) throw std::invalid_argument("SceneConfig: noise sigma must be >= 0");
  if (!(extent > 0.0)) throw std::invalid_argument("SceneConfig: extent must be > 0");
  if (!(label_noise >= 0.0 && label_noise < 0.5))
    throw std::invalid_argument("SceneConfig: label noise must be in [0, 0.5)");
  if (!primitives.empty() && primitives.size() != classes)
    throw std::invalid_argument("SceneConfig: primitives must list one entry per class");
  if (!class_label_noise.empty()) {
    if (class_label_noise.size() != classes)
      throw std::invalid_argument("SceneConfig: class label noise must list one rate per class");
    for (double r : class_label_noise)
      if (!(r >= 0.0 && r < 0.5)) throw std::invalid_argument("SceneConfig: label noise must be in [0, 0.5)");
  }
}

Primitive SceneConfig::primitive(std::size_t cls) const {
  if (!primitives.empty()) return primitives.at(cls);
  static constexpr std::array objects{Primitive::sphere, Primitive::low_box, Primitive::tall_box};
  return cls == 0 ? Primitive::floor : objects[(cls - 1) % objects.size()];
}

double SceneConfig::flip_rate(std::size_t cls) const {
  return class_label_noise.empty() ? label_noise : class_label_noise.at(cls);
}

std::size_t SceneConfig::budget(std::size_t cls) const {
  return points / classes + (cls < points % classes ? 1 : 0);
}

std::size_t SegmentationScene::flipped() const {
  std::size_t n = 0;
  for (std::size_t i = 0; i < clean.size(); ++i) n += clean[i] != cloud.labels[i];
  return n;
}

namespace {

constexpr double kFloorHalf = 1.5;
constexpr double kPlacementHalf = 1.0;

struct Placed {
  Primitive kind;
  double cx, cy;
  double sx, sy, sz;  // box half extents in x, y and full height; sphere radius in sx
  double footprint;
};

Placed make_object(Primitive kind, Rng& rng) {
  Placed p{kind, 0, 0, 0, 0, 0, 0};
  switch (kind) {
    case Primitive::sphere:
      p.sx = rng.uniform(0.4, 0.5);
      p.footprint = p.sx;
      break;
    case Primitive::low_box:
      p.sx = rng.uniform(0.3, 0.45);
      p.sy = rng.uniform(0.3, 0.45);
      p.sz = rng.uniform(0.15, 0.25);
      p.footprint = std::hypot(p.sx, p.sy);
      break;
    case Primitive::tall_box:
      p.sx = rng.uniform(0.1, 0.15);
      p.sy = rng.uniform(0.1, 0.15);
      p.sz = rng.uniform(1.3, 1.7);
      p.footprint = std::hypot(p.sx, p.sy);
      break;
    case Primitive::floor: break;
  }
  return p;
}

bool under_box(const Placed& o, double x, double y) {
  return (o.kind == Primitive::low_box || o.kind == Primitive::tall_box) &&
         std::abs(x - o.cx) < o.sx && std::abs(y - o.cy) < o.sy;
}

std::array<double, 3> sample_surface(const Placed& o, const std::vector<Placed>& objects, Rng& rng) {
  switch (o.kind) {
    case Primitive::floor: {
      for (;;) {
        const double x = rng.uniform(-kFloorHalf, kFloorHalf);
        const double y = rng.uniform(-kFloorHalf, kFloorHalf);
        const bool hidden = std::any_of(objects.begin(), objects.end(),
                                        [&](const Placed& b) { return under_box(b, x, y); });
        if (!hidden) return {x, y, 0.0};
      }
    }
    case Primitive::sphere: {
      double v[3], n2 = 0.0;
      do {
        n2 = 0.0;
        for (double& c : v) {
          c = rng.normal();
          n2 += c * c;
        }
      } while (n2 < 1e-12);
      const double s = o.sx / std::sqrt(n2);
      return {o.cx + s * v[0], o.cy + s * v[1], o.sx + s * v[2]};
    }
    case Primitive::low_box:
    case Primitive::tall_box: {
      // Top and four sides, area weighted; the bottom rests on the floor.
      const double top = 4.0 * o.sx * o.sy, side_x = 2.0 * o.sy * o.sz, side_y = 2.0 * o.sx * o.sz;
      const double u = rng.uniform(0.0, top + 2.0 * side_x + 2.0 * side_y);
      const double a = rng.uniform(-1.0, 1.0), b = rng.uniform(-1.0, 1.0);
      if (u < top) return {o.cx + a * o.sx, o.cy + b * o.sy, o.sz};
      const double z = 0.5 * (b + 1.0) * o.sz;
      if (u < top + 2.0 * side_x) {
        const double sign = u < top + side_x ? -1.0 : 1.0;
        return {o.cx + sign * o.sx, o.cy + a * o.sy, z};
      }
      const double sign = u < top + 2.0 * side_x + side_y ? -1.0 : 1.0;
      return {o.cx + a * o.sx, o.cy + sign * o.sy, z};
    }
  }
  return {0, 0, 0};
}

// Rejection placement with non-overlapping footprints; gives up after a
// bounded number of tries and keeps the last draw.
void place(std::vector<Placed>& objects, Rng& rng) {
  for (std::size_t k = 0; k < objects.size(); ++k) {
    auto& o = objects[k];
    const double lim = std::max(0.0, kPlacementHalf - 0.5 * o.footprint);
    for (int attempt = 0; attempt < 200; ++attempt) {
      o.cx = rng.uniform(-lim, lim);
      o.cy = rng.uniform(-lim, lim);
      bool clear = true;
      for (std::size_t m = 0; m < k; ++m)
        if (std::hypot(o.cx - objects[m].cx, o.cy - objects[m].cy) <
            o.footprint + objects[m].footprint + 0.05)
          clear = false;
      if (clear) break;
    }
  }
}

std::array<double, 3> random_unit(Rng& rng) {
  for (;;) {
    std::array<double, 3> v{rng.normal(), rng.normal(), rng.normal()};
    const double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    if (n > 1e-9) return {v[0] / n, v[1] / n, v[2] / n};
  }
}

}  // namespace

SegmentationScene gen_segmentation_scene(const SceneConfig& cfg, Rng& rng) {
  cfg.validate();
  std::vector<Placed> objects;
  std::vector<Placed> per_class(cfg.classes);
  for (std::size_t c = 0; c < cfg.classes; ++c) {
    const Primitive kind = cfg.primitive(c);
    per_class[c] = make_object(kind, rng);
  }
  {
    std::vector<Placed> movable;
    for (const auto& o : per_class)
      if (o.kind != Primitive::floor) movable.push_back(o);
    place(movable, rng);
    std::size_t m = 0;
    for (auto& o : per_class)
      if (o.kind != Primitive::floor) o = movable[m++];
    objects = movable;
  }

  Tensor coords({cfg.points, 3});
  std::vector<int> clean;
  clean.reserve(cfg.points);
  std::size_t row = 0;
  for (std::size_t c = 0; c < cfg.classes; ++c) {
    for (std::size_t k = 0; k < cfg.budget(c); ++k, ++row) {
      const auto x = sample_surface(per_class[c], objects, rng);
      for (int a = 0; a < 3; ++a) coords[3 * row + a] = cfg.extent * x[a] + cfg.noise_sigma * rng.normal();
      clean.push_back(static_cast<int>(c));
    }
  }
  std::vector<int> labels = clean;
  for (auto& l : labels) {
    if (!rng.bernoulli(cfg.flip_rate(static_cast<std::size_t>(l)))) continue;
    const auto other = static_cast<int>(rng.uniform_index(cfg.classes - 1));
    l = other >= l ? other + 1 : other;
  }
  SegmentationScene s;
  s.cloud = PointCloud(std::move(coords), std::move(labels));
  s.clean = std::move(clean);
  return s;
}

std::vector<SegmentationScene> gen_segmentation_scenes(const SceneConfig& cfg, std::size_t count,
                                                       std::uint64_t stream) {
  std::vector<SegmentationScene> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng(derive_seed(derive_seed(cfg.seed, stream), i));
    out.push_back(gen_segmentation_scene(cfg, rng));
    out.back().cloud.id = "scene_" + std::to_string(stream) + "_" + std::to_string(i);
  }
  return out;
}

void PairConfig::validate() const {
  if (points < 2) throw std::invalid_argument("PairConfig: need at least two points");
  if (!(overlap > 0.0 && overlap <= 1.0)) throw std::invalid_argument("PairConfig: overlap must be in (0, 1]");
  if (!(rotation_min_deg <= rotation_max_deg)) throw std::invalid_argument("PairConfig: rotation range reversed");
  if (!(scale_min > 0.0 && scale_min <= scale_max)) throw std::invalid_argument("PairConfig: invalid scale range");
  if (!(jitter >= 0.0) || !(range_jitter >= 0.0) || !(translation >= 0.0))
    throw std::invalid_argument("PairConfig: jitter and translation must be >= 0");
  SceneConfig s = scene;
  s.points = points;
  s.label_noise = 0.0;
  s.class_label_noise.clear();
  s.validate();
}

MatchingPair gen_matching_pair(const PairConfig& cfg, Rng& rng) {
  cfg.validate();
  SceneConfig scfg = cfg.scene;
  scfg.points = cfg.points;
  scfg.label_noise = 0.0;
  scfg.class_label_noise.clear();
  MatchingPair pair;
  pair.cloud_i = PointCloud(gen_segmentation_scene(scfg, rng).cloud.coords);

  const std::array<double, 3> axis = cfg.vertical_axis ? std::array<double, 3>{0, 0, 1} : random_unit(rng);
  const double angle = rng.uniform(cfg.rotation_min_deg, cfg.rotation_max_deg) * std::numbers::pi / 180.0;
  const double scale = rng.uniform(cfg.scale_min, cfg.scale_max);
  std::array<double, 3> t;
  for (auto& v : t) v = rng.uniform(-cfg.translation, cfg.translation);
  pair.transform = RigidTransform::from_axis_angle(axis, angle, t, scale);

  const std::size_t n = cfg.points;
  const auto keep = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround(cfg.overlap * static_cast<double>(n))), 1, n);
  std::vector<std::size_t> rows(n);
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  const auto dir = random_unit(rng);
  if (keep < n) {
    std::vector<double> proj(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double* x = pair.cloud_i.point(i);
      proj[i] = dir[0] * x[0] + dir[1] * x[1] + dir[2] * x[2];
    }
    std::stable_sort(rows.begin(), rows.end(), [&](std::size_t a, std::size_t b) { return proj[a] < proj[b]; });
    rows.resize(keep);
    std::sort(rows.begin(), rows.end());
  }
  double cx = 0.0, cy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    cx += pair.cloud_i.point(i)[0];
    cy += pair.cloud_i.point(i)[1];
  }
  cx /= static_cast<double>(n);
  cy /= static_cast<double>(n);
  Tensor cj({keep, 3});
  for (std::size_t r = 0; r < keep; ++r) {
    const double* x = pair.cloud_i.point(rows[r]);
    const double sigma = cfg.jitter + cfg.range_jitter * std::hypot(x[0] - cx, x[1] - cy);
    const auto y = pair.transform.apply(x);
    for (int a = 0; a < 3; ++a) cj[3 * r + a] = sigma > 0.0 ? y[a] + sigma * rng.normal() : y[a];
  }
  pair.cloud_j = PointCloud(std::move(cj));
  pair.source = std::move(rows);
  return pair;
}

std::vector<MatchingPair> gen_matching_pairs(const PairConfig& cfg, std::size_t count,
                                             std::uint64_t stream) {
  std::vector<MatchingPair> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng(derive_seed(derive_seed(cfg.seed, stream), i));
    out.push_back(gen_matching_pair(cfg, rng));
    const std::string id = "pair_" + std::to_string(stream) + "_" + std::to_string(i);
    out.back().cloud_i.id = id + "_i";
    out.back().cloud_j.id = id + "_j";
  }
  return out;
}

void SegmentationOptions::validate() const {
  if (!(lr > 0.0)) throw std::invalid_argument("lr must be > 0");
  if (!(lambda >= 0.0)) throw std::invalid_argument("lambda must be >= 0");
  if (!(margin >= 0.0)) throw std::invalid_argument("margin must be >= 0");
  if (!(lr_decay > 0.0 && lr_decay <= 1.0)) throw std::invalid_argument("lr_decay must be in (0, 1]");
  if (triplets == 0) throw std::invalid_argument("triplet count must be >= 1");
  if (n_mc == 0) throw std::invalid_argument("n_mc must be >= 1");
}

void MatchingOptions::validate() const {
  if (!(lr > 0.0) || !(stage2_lr > 0.0)) throw std::invalid_argument("lr must be > 0");
  if (!(margin >= 0.0) || !(hinge_margin >= 0.0)) throw std::invalid_argument("margin must be >= 0");
  if (!(lr_decay > 0.0 && lr_decay <= 1.0)) throw std::invalid_argument("lr_decay must be in (0, 1]");
  if (!(inlier_threshold > 0.0)) throw std::invalid_argument("inlier threshold must be > 0");
  if (triplets == 0) throw std::invalid_argument("triplet count must be >= 1");
}

namespace {

// Sub-stream indices of a training run.
enum Stream : std::uint64_t { order_stream = 1, ces_stream, dropout_stream, noise_stream, cem_stream };

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

void guard(const ad::Var& loss, const std::string& where) {
  if (!std::isfinite(loss.value()[0])) throw NumericalError("non-finite loss at " + where);
}

std::string where(std::size_t epoch, std::size_t item) {
  return "epoch " + std::to_string(epoch) + ", item " + std::to_string(item);
}

std::vector<std::size_t> shuffled(std::size_t n, Rng& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.uniform_index(i)]);
  return order;
}

ad::EmbeddingVars embedding_vars(const NetOutputs& out, const NetConfig& cfg, int group) {
  ad::EmbeddingVars e{out.mu, out.lam, {}, 0, group};
  if (cfg.kind == ModelKind::cue_plus) {
    e.p = out.p;
    e.rank = cfg.rank;
  }
  return e;
}

ad::TripletIndices indices(const TripletBatch& b) { return {b.anchor, b.positive, b.negative}; }

struct PreparedScene {
  Tensor features;
  CesIndex ces;
  const std::vector<int>* labels;
};

std::vector<PreparedScene> prepare(const std::vector<SegmentationScene>& scenes, const NetConfig& cfg,
                                   std::size_t ces_k) {
  std::vector<PreparedScene> out;
  out.reserve(scenes.size());
  for (const auto& s : scenes) {
    if (!s.cloud.has_labels()) throw std::invalid_argument("segmentation scenes need labels");
    for (int l : s.cloud.labels)
      if (l < 0 || static_cast<std::size_t>(l) >= cfg.classes)
        throw std::invalid_argument("scene label outside the configured classes");
    out.push_back({point_features(s.cloud, cfg.k_ctx), CesIndex(s.cloud, ces_k), &s.cloud.labels});
  }
  return out;
}

class EpochMeans {
 public:
  void add(double ce, double hinge, double metric, double total) {
    ce_ += ce;
    hinge_ += hinge;
    metric_ += metric;
    total_ += total;
    ++n_;
  }
  EpochLoss finish(std::string stage, bool ce, bool hinge, bool metric) const {
    const double n = static_cast<double>(n_);
    EpochLoss e;
    e.stage = std::move(stage);
    if (ce) e.ce = ce_ / n;
    if (hinge) e.hinge = hinge_ / n;
    if (metric) e.metric = metric_ / n;
    e.total = total_ / n;
    return e;
  }

 private:
  double ce_ = 0, hinge_ = 0, metric_ = 0, total_ = 0;
  std::size_t n_ = 0;
};

}  // namespace

TrainResult train_segmentation(NetConfig cfg, const std::vector<SegmentationScene>& scenes,
                               ModelKind variant, const SegmentationOptions& opts) {
  if (scenes.empty()) throw std::invalid_argument("train_segmentation: no scenes");
  if (variant == ModelKind::au) return train_baseline_au(cfg, scenes, opts);
  opts.validate();
  cfg.kind = variant;
  cfg.validate();
  if (cfg.classes == 0) throw std::invalid_argument("train_segmentation: classes must be > 0");
  const auto t0 = Clock::now();
  const bool probabilistic = variant == ModelKind::cue || variant == ModelKind::cue_plus;

  TrainResult res{init_params(cfg, opts.seed), {}};
  const auto data = prepare(scenes, cfg, opts.ces_neighbors);
  Rng order_rng(derive_seed(opts.seed, order_stream));
  Rng ces_rng(derive_seed(opts.seed, ces_stream));
  Rng drop_rng(derive_seed(opts.seed, dropout_stream));
  Sgd sgd(opts.lr, opts.momentum, opts.weight_decay);

  for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
    sgd.set_lr(opts.lr * std::pow(opts.lr_decay, static_cast<double>(epoch)));
    EpochMeans means;
    for (std::size_t s : shuffled(data.size(), order_rng)) {
      const auto& sc = data[s];
      ad::Tape tape;
      const auto bound = bind(tape, res.params);
      const auto out = forward(bound, sc.features, variant, {cfg.dropout, &drop_rng});
      const ad::Var ce = ad::cross_entropy(out.logits, *sc.labels);
      ad::Var total = ce;
      double lm_value = 0.0;
      if (probabilistic) {
        const TripletBatch batch = sample_ces(sc.ces, *sc.labels, opts.triplets, ces_rng);
        if (!batch.empty()) {
          const auto e = embedding_vars(out, cfg, 0);
          const ad::Var lm = ad::metric_loss(e, e, e, indices(batch), opts.margin, opts.moments);
          lm_value = lm.value()[0];
          total = ad::add(ce, ad::scale(lm, opts.lambda));
        }
      }
      guard(total, where(epoch, s));
      tape.backward(total);
      sgd.step(res.params, collect_grads(bound));
      means.add(ce.value()[0], 0.0, lm_value, total.value()[0]);
    }
    res.report.epochs.push_back(means.finish("train", true, false, probabilistic));
  }
  res.report.variant = variant;
  res.report.parameter_count = res.params.parameter_count();
  res.report.wall_seconds = seconds_since(t0);
  return res;
}

ad::Var sampled_logit_cross_entropy(const ad::Var& logits, const ad::Var& var,
                                    std::span<const int> labels, std::size_t n_mc, Rng& rng) {
  if (n_mc == 0) throw std::invalid_argument("sampled_logit_cross_entropy: n_mc must be >= 1");
  const ad::Var sd = ad::sqrt(var);
  ad::Var total;
  for (std::size_t k = 0; k < n_mc; ++k) {
    const Tensor eps = sample_std_normal(rng, logits.shape());
    const ad::Var ce = ad::cross_entropy(ad::add(logits, ad::mul_const(sd, eps)), labels);
    total = total.valid() ? ad::add(total, ce) : ce;
  }
  return ad::scale(total, 1.0 / static_cast<double>(n_mc));
}

TrainResult train_baseline_au(NetConfig cfg, const std::vector<SegmentationScene>& scenes,
                              const SegmentationOptions& opts) {
  if (scenes.empty()) throw std::invalid_argument("train_baseline_au: no scenes");
  opts.validate();
  cfg.kind = ModelKind::au;
  cfg.validate();
  if (cfg.classes == 0) throw std::invalid_argument("train_baseline_au: classes must be > 0");
  const auto t0 = Clock::now();

  TrainResult res{init_params(cfg, opts.seed), {}};
  const auto data = prepare(scenes, cfg, opts.ces_neighbors);
  Rng order_rng(derive_seed(opts.seed, order_stream));
  Rng noise_rng(derive_seed(opts.seed, noise_stream));
  Rng drop_rng(derive_seed(opts.seed, dropout_stream));
  Sgd sgd(opts.lr, opts.momentum, opts.weight_decay);

  for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
    sgd.set_lr(opts.lr * std::pow(opts.lr_decay, static_cast<double>(epoch)));
    EpochMeans means;
    for (std::size_t s : shuffled(data.size(), order_rng)) {
      const auto& sc = data[s];
      ad::Tape tape;
      const auto bound = bind(tape, res.params);
      const auto out = forward(bound, sc.features, ModelKind::au, {cfg.dropout, &drop_rng});
      const ad::Var total = sampled_logit_cross_entropy(out.logits, out.logit_var, *sc.labels, opts.n_mc, noise_rng);
      guard(total, where(epoch, s));
      tape.backward(total);
      sgd.step(res.params, collect_grads(bound));
      means.add(total.value()[0], 0.0, 0.0, total.value()[0]);
    }
    res.report.epochs.push_back(means.finish("train", true, false, false));
  }
  res.report.variant = ModelKind::au;
  res.report.parameter_count = res.params.parameter_count();
  res.report.wall_seconds = seconds_since(t0);
  return res;
}

namespace {

struct PreparedPair {
  Tensor features_i, features_j;
  CorrespondenceSet corrs;
  std::size_t n_i, n_j;
};

ad::Var squared_distance_rows(const ad::Var& a, const ad::Var& b) {
  return ad::row_sum(ad::square(ad::sub(a, b)));
}

}  // namespace

ad::Var triplet_hinge_loss(const ad::Var& anchor_set, const ad::Var& positive_set,
                           const ad::Var& negative_set, const TripletBatch& b, double margin) {
  if (b.empty()) throw std::invalid_argument("triplet_hinge_loss: empty batch");
  const ad::Var a = ad::gather_rows(anchor_set, b.anchor);
  const ad::Var p = ad::gather_rows(positive_set, b.positive);
  const ad::Var n = ad::gather_rows(negative_set, b.negative);
  const ad::Var gap = ad::sub(squared_distance_rows(a, p), squared_distance_rows(a, n));
  return ad::mean(ad::relu(ad::add_scalar(gap, margin)));
}

TrainResult train_matching(NetConfig cfg, const std::vector<MatchingPair>& pairs, ModelKind variant,
                           const MatchingOptions& opts) {
  if (pairs.empty()) throw std::invalid_argument("train_matching: no pairs");
  if (variant != ModelKind::deterministic && variant != ModelKind::cue && variant != ModelKind::cue_plus)
    throw std::invalid_argument("train_matching: variant must be deterministic, cue or cue_plus");
  opts.validate();
  cfg.kind = variant;
  cfg.validate();
  const auto t0 = Clock::now();

  std::vector<PreparedPair> data;
  data.reserve(pairs.size());
  for (const auto& p : pairs) {
    auto corrs = find_correspondences(p.cloud_i, p.cloud_j, p.transform, opts.inlier_threshold);
    if (corrs.empty()) continue;
    data.push_back({point_features(p.cloud_i, cfg.k_ctx), point_features(p.cloud_j, cfg.k_ctx),
                    std::move(corrs), p.cloud_i.size(), p.cloud_j.size()});
  }
  if (data.empty()) throw std::invalid_argument("train_matching: no pair has correspondences");

  TrainResult res{init_params(cfg, opts.seed), {}};
  Rng order_rng(derive_seed(opts.seed, order_stream));
  Rng cem_rng(derive_seed(opts.seed, cem_stream));

  {
    Sgd sgd(opts.lr, opts.momentum, opts.weight_decay);
    for (std::size_t epoch = 0; epoch < opts.stage1_epochs; ++epoch) {
      sgd.set_lr(opts.lr * std::pow(opts.lr_decay, static_cast<double>(epoch)));
      EpochMeans means;
      for (std::size_t s : shuffled(data.size(), order_rng)) {
        const auto& d = data[s];
        ad::Tape tape;
        const auto bound = bind(tape, res.params);
        const auto oi = forward(bound, d.features_i, ModelKind::deterministic);
        const auto oj = forward(bound, d.features_j, ModelKind::deterministic);
        const auto [ij, ji] = sample_cem(d.corrs, d.n_i, d.n_j, opts.triplets, cem_rng);
        const ad::Var loss = ad::scale(ad::add(triplet_hinge_loss(oi.mu, oj.mu, oi.mu, ij, opts.hinge_margin),
                                               triplet_hinge_loss(oj.mu, oi.mu, oj.mu, ji, opts.hinge_margin)),
                                       0.5);
        guard(loss, "stage 1, " + where(epoch, s));
        tape.backward(loss);
        sgd.step(res.params, collect_grads(bound));
        means.add(0.0, loss.value()[0], 0.0, loss.value()[0]);
      }
      res.report.epochs.push_back(means.finish("embed", false, true, false));
    }
  }

  const std::vector<std::string> frozen{"mu"};
  freeze(res.params, frozen);
  if (variant != ModelKind::deterministic) {
    Sgd sgd(opts.stage2_lr, opts.momentum, opts.weight_decay);
    for (std::size_t epoch = 0; epoch < opts.stage2_epochs; ++epoch) {
      sgd.set_lr(opts.stage2_lr * std::pow(opts.lr_decay, static_cast<double>(epoch)));
      EpochMeans means;
      for (std::size_t s : shuffled(data.size(), order_rng)) {
        const auto& d = data[s];
        ad::Tape tape;
        const auto bound = bind(tape, res.params);
        const auto oi = forward(bound, d.features_i, variant);
        const auto oj = forward(bound, d.features_j, variant);
        const auto ei = embedding_vars(oi, cfg, 0), ej = embedding_vars(oj, cfg, 1);
        const auto [ij, ji] = sample_cem(d.corrs, d.n_i, d.n_j, opts.triplets, cem_rng);
        const ad::Var loss = ad::scale(
            ad::add(ad::metric_loss(ei, ej, ei, indices(ij), opts.margin, opts.moments),
                    ad::metric_loss(ej, ei, ej, indices(ji), opts.margin, opts.moments)),
            0.5);
        guard(loss, "stage 2, " + where(epoch, s));
        tape.backward(loss);
        sgd.step(res.params, collect_grads(bound));
        means.add(0.0, 0.0, loss.value()[0], loss.value()[0]);
      }
      res.report.epochs.push_back(means.finish("variance", false, false, true));
    }
  }
  unfreeze_all(res.params);
  res.report.variant = variant;
  res.report.parameter_count = res.params.parameter_count();
  res.report.wall_seconds = seconds_since(t0);
  return res;
}

const char* to_string(Method m) {
  switch (m) {
    case Method::cue: return "cue";
    case Method::cue_plus: return "cue_plus";
    case Method::se: return "se";
    case Method::au: return "au";
    case Method::mcd: return "mcd";
    case Method::rg: return "rg";
  }
  return "?";
}

Method method_from_string(const std::string& s) {
  for (auto m : {Method::cue, Method::cue_plus, Method::se, Method::au, Method::mcd, Method::rg})
    if (s == to_string(m)) return m;
  throw std::invalid_argument("unknown method: " + s);
}

namespace {

void require_method(const NetParams& params, Method m) {
  const ModelKind k = params.config.kind;
  const bool ok = [&] {
    switch (m) {
      case Method::cue: return k == ModelKind::cue || k == ModelKind::cue_plus;
      case Method::cue_plus: return k == ModelKind::cue_plus;
      case Method::au: return k == ModelKind::au;
      case Method::mcd: return params.config.dropout > 0.0;
      case Method::se:
      case Method::rg: return true;
    }
    return false;
  }();
  if (!ok)
    throw std::invalid_argument(std::string("method ") + to_string(m) + " does not apply to a " +
                                to_string(k) + " model" +
                                (m == Method::mcd ? " trained without dropout" : ""));
}

ModelKind heads_for(Method m) {
  if (m == Method::cue) return ModelKind::cue;
  if (m == Method::cue_plus) return ModelKind::cue_plus;
  if (m == Method::au) return ModelKind::au;
  return ModelKind::deterministic;
}

int argmax(std::span<const double> row) {
  return static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
}

}  // namespace

SegmentationEval evaluate_segmentation(const NetParams& params,
                                       const std::vector<SegmentationScene>& scenes, Method method,
                                       const EvalOptions& opts) {
  if (scenes.empty()) throw std::invalid_argument("evaluate_segmentation: no scenes");
  const std::size_t classes = params.config.classes;
  if (classes == 0) throw std::invalid_argument("evaluate_segmentation: model has no classifier");
  require_method(params, method);
  Rng rng(derive_seed(opts.seed, static_cast<std::uint64_t>(method) + 101));
  SegmentationEval ev;
  std::vector<double> variance_at_pred;
  for (const auto& sc : scenes) {
    const Tensor f = point_features(sc.cloud, params.config.k_ctx);
    const std::size_t n = sc.cloud.size();
    if (method == Method::mcd) {
      std::vector<Tensor> passes;
      passes.reserve(opts.mcd_passes);
      for (std::size_t k = 0; k < opts.mcd_passes; ++k) {
        Tensor logits = forward_dropout(params, f, params.config.dropout, rng);
        for (std::size_t i = 0; i < n; ++i) {
          const auto p = softmax(logits.row(i));
          std::copy(p.begin(), p.end(), logits.row(i).begin());
        }
        passes.push_back(std::move(logits));
      }
      const auto agg = mcd_aggregate(passes);
      ev.predictions.insert(ev.predictions.end(), agg.prediction.begin(), agg.prediction.end());
      ev.raw.insert(ev.raw.end(), agg.uncertainty.begin(), agg.uncertainty.end());
    } else {
      const Prediction pr = predict(params, f, heads_for(method));
      for (std::size_t i = 0; i < n; ++i) {
        const int c = argmax(pr.logits.row(i));
        ev.predictions.push_back(c);
        switch (method) {
          case Method::cue: ev.raw.push_back(point_uncertainty(pr.diag(), i)); break;
          case Method::cue_plus: ev.raw.push_back(point_uncertainty(pr.lowrank(), i)); break;
          case Method::se: ev.raw.push_back(softmax_entropy(softmax(pr.logits.row(i)))); break;
          case Method::au: ev.raw.push_back(pr.logit_var[i * classes + static_cast<std::size_t>(c)]); break;
          default: ev.raw.push_back(0.0); break;
        }
      }
    }
    ev.labels.insert(ev.labels.end(), sc.cloud.labels.begin(), sc.cloud.labels.end());
    for (std::size_t i = 0; i < n; ++i) ev.noisy.push_back(sc.clean.empty() ? 0 : sc.clean[i] != sc.cloud.labels[i]);
  }
  const std::size_t total = ev.labels.size();
  ev.correct.resize(total);
  for (std::size_t i = 0; i < total; ++i) ev.correct[i] = ev.predictions[i] == ev.labels[i];
  switch (method) {
    case Method::cue:
    case Method::cue_plus: ev.levels = normalize_uncertainty(ev.raw); break;
    case Method::se: ev.levels = ev.raw; break;
    case Method::rg: ev.levels = ev.raw = random_guess_levels(total, rng); break;
    case Method::au:
    case Method::mcd: {
      const auto q = normalize_uncertainty(ev.raw);
      ev.levels.resize(total);
      for (std::size_t i = 0; i < total; ++i) ev.levels[i] = au_uncertainty_level(q[i], ev.correct[i]);
      break;
    }
  }
  ev.miou = miou(ev.predictions, ev.labels, classes);
  return ev;
}

MatchingEval evaluate_matching(const NetParams& params, const std::vector<MatchingPair>& pairs,
                               Method method, double inlier_threshold, const EvalOptions& opts) {
  if (pairs.empty()) throw std::invalid_argument("evaluate_matching: no pairs");
  if (method != Method::cue && method != Method::cue_plus && method != Method::rg)
    throw std::invalid_argument(std::string("method ") + to_string(method) + " does not apply to matching");
  require_method(params, method);
  Rng rng(derive_seed(opts.seed, static_cast<std::uint64_t>(method) + 101));
  MatchingEval ev;
  for (const auto& pair : pairs) {
    const auto corrs = find_correspondences(pair.cloud_i, pair.cloud_j, pair.transform, inlier_threshold);
    if (corrs.empty()) {
      ev.hit_ratios.push_back(0.0);
      continue;
    }
    const ModelKind heads = heads_for(method);
    const Prediction pi = predict(params, point_features(pair.cloud_i, params.config.k_ctx), heads);
    const Prediction pj = predict(params, point_features(pair.cloud_j, params.config.k_ctx), heads);
    const auto outcomes = match_by_embedding(pi.mu, pj.mu, pair.cloud_j.coords, corrs, inlier_threshold);
    ev.hit_ratios.push_back(hit_ratio(outcomes));
    std::vector<double> ui, uj;
    if (method == Method::cue) {
      ui = point_uncertainties(pi.diag());
      uj = point_uncertainties(pj.diag());
    } else if (method == Method::cue_plus) {
      ui = point_uncertainties(pi.lowrank());
      uj = point_uncertainties(pj.lowrank());
    }
    for (const auto& o : outcomes) {
      ev.correct.push_back(o.hit);
      ev.raw.push_back(method == Method::rg ? 0.0 : correspondence_uncertainty(ui[o.anchor], uj[o.matched]));
    }
  }
  ev.fmr = fmr(ev.hit_ratios);
  if (ev.raw.empty()) throw std::invalid_argument("evaluate_matching: no pair has correspondences");
  if (method == Method::rg)
    ev.levels = ev.raw = random_guess_levels(ev.raw.size(), rng);
  else
    ev.levels = normalize_uncertainty(ev.raw);
  return ev;
}

}  // namespace cue
