#include "cue/io.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

namespace cue {

namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little, "checkpoints are written little-endian");

const char* to_string(Task t) { return t == Task::segmentation ? "segmentation" : "matching"; }

Task task_from_string(const std::string& s) {
  if (s == "segmentation") return Task::segmentation;
  if (s == "matching") return Task::matching;
  throw ConfigError("unknown task '" + s + "'");
}

namespace {

const std::set<std::string> kVariants = {"deterministic", "cue", "cue_plus", "se", "au", "mcd", "rg"};

void check_variant(const std::string& v) {
  if (!kVariants.count(v)) throw ConfigError("unknown variant '" + v + "'");
}

}  // namespace

ModelKind trained_kind(const std::string& variant) {
  check_variant(variant);
  if (variant == "cue") return ModelKind::cue;
  if (variant == "cue_plus") return ModelKind::cue_plus;
  if (variant == "au") return ModelKind::au;
  return ModelKind::deterministic;
}

Method default_method(const std::string& variant) {
  check_variant(variant);
  if (variant == "deterministic") return Method::rg;
  return method_from_string(variant);
}

bool variant_valid_for(Task task, const std::string& variant) {
  check_variant(variant);
  if (task == Task::segmentation) return true;
  return variant == "deterministic" || variant == "cue" || variant == "cue_plus" || variant == "rg";
}

// Config JSON

namespace {

// Reads fields from one JSON object and rejects keys nobody asked for.
class Fields {
 public:
  Fields(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + ": expected an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(where_ + "." + key + ": " + e.what());
    }
  }

  const json* child(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError(where_ + ": unknown key '" + it.key() + "'");
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

json scene_json(const SceneConfig& s) {
  json prims = json::array();
  for (auto p : s.primitives) prims.push_back(to_string(p));
  return {{"points", s.points},
          {"classes", s.classes},
          {"primitives", prims},
          {"extent", s.extent},
          {"noise_sigma", s.noise_sigma},
          {"label_noise", s.label_noise},
          {"class_label_noise", s.class_label_noise}};
}

void read_scene(const json& j, SceneConfig& s) {
  Fields f(j, "scene");
  f.get("points", s.points);
  f.get("classes", s.classes);
  std::vector<std::string> prims;
  f.get("primitives", prims);
  if (!prims.empty()) {
    s.primitives.clear();
    for (const auto& p : prims) {
      try {
        s.primitives.push_back(primitive_from_string(p));
      } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("scene.primitives: ") + e.what());
      }
    }
  }
  f.get("extent", s.extent);
  f.get("noise_sigma", s.noise_sigma);
  f.get("label_noise", s.label_noise);
  f.get("class_label_noise", s.class_label_noise);
  f.finish();
}

json pair_json(const PairConfig& p) {
  return {{"points", p.points},
          {"rotation_min_deg", p.rotation_min_deg},
          {"rotation_max_deg", p.rotation_max_deg},
          {"vertical_axis", p.vertical_axis},
          {"scale_min", p.scale_min},
          {"scale_max", p.scale_max},
          {"translation", p.translation},
          {"jitter", p.jitter},
          {"range_jitter", p.range_jitter},
          {"overlap", p.overlap}};
}

void read_pair(const json& j, PairConfig& p) {
  Fields f(j, "pair");
  f.get("points", p.points);
  f.get("rotation_min_deg", p.rotation_min_deg);
  f.get("rotation_max_deg", p.rotation_max_deg);
  f.get("vertical_axis", p.vertical_axis);
  f.get("scale_min", p.scale_min);
  f.get("scale_max", p.scale_max);
  f.get("translation", p.translation);
  f.get("jitter", p.jitter);
  f.get("range_jitter", p.range_jitter);
  f.get("overlap", p.overlap);
  f.finish();
}

const char* to_string(MomentMode m) { return m == MomentMode::exact ? "exact" : "diagonal"; }

MomentMode moment_mode_from_string(const std::string& s) {
  if (s == "exact") return MomentMode::exact;
  if (s == "diagonal") return MomentMode::diagonal;
  throw ConfigError("unknown moment mode '" + s + "'");
}

}  // namespace

json to_json(const NetConfig& c) {
  return {{"embed_dim", c.embed_dim}, {"hidden", c.hidden},   {"classes", c.classes},
          {"rank", c.rank},           {"dropout", c.dropout}, {"k_ctx", c.k_ctx},
          {"kind", to_string(c.kind)}};
}

NetConfig net_config_from_json(const json& j) {
  NetConfig c;
  Fields f(j, "net");
  f.get("embed_dim", c.embed_dim);
  f.get("hidden", c.hidden);
  f.get("classes", c.classes);
  f.get("rank", c.rank);
  f.get("dropout", c.dropout);
  f.get("k_ctx", c.k_ctx);
  std::string kind = to_string(c.kind);
  f.get("kind", kind);
  f.finish();
  try {
    c.kind = model_kind_from_string(kind);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return c;
}

json to_json(const RigidTransform& t) {
  return {{"rotation", t.rotation}, {"translation", t.translation}, {"scale", t.scale}};
}

RigidTransform transform_from_json(const json& j) {
  RigidTransform t;
  Fields f(j, "transform");
  f.get("rotation", t.rotation);
  f.get("translation", t.translation);
  f.get("scale", t.scale);
  f.finish();
  return t;
}

void ExperimentConfig::resolve() {
  if (seed) {
    scene.seed = pair.seed = segmentation.seed = matching.seed = eval.seed = *seed;
  }
  net.classes = task == Task::segmentation ? scene.classes : 0;
  net.kind = trained_kind(variant);
  if (variant == "mcd" && net.dropout == 0.0) net.dropout = 0.1;
  pair.scene = scene;
}

void ExperimentConfig::validate() const {
  check_variant(variant);
  if (!seed) throw ConfigError("config: seed is required (set \"seed\" or pass --seed)");
  if (!variant_valid_for(task, variant))
    throw ConfigError(std::string("variant ") + variant + " is not valid for task " + to_string(task));
  if (train_count == 0 || eval_count == 0) throw ConfigError("config: train_count and eval_count must be >= 1");
  if (bins == 0) throw ConfigError("config: bins must be >= 1");
  if (out.empty()) throw ConfigError("config: out must be set");
  try {
    net.validate();
    if (task == Task::segmentation) {
      scene.validate();
      segmentation.validate();
    } else {
      pair.validate();
      matching.validate();
    }
    if (method) {
      const Method m = method_from_string(*method);
      if (task == Task::matching && m != Method::cue && m != Method::cue_plus && m != Method::rg)
        throw ConfigError(std::string("method ") + *method + " does not apply to matching");
    }
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (variant == "mcd" && net.dropout <= 0.0) throw ConfigError("config: mcd needs net.dropout > 0");
}

Method ExperimentConfig::eval_method() const {
  try {
    return method ? method_from_string(*method) : default_method(variant);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig c;
  Fields f(j, "config");
  std::string task = to_string(c.task);
  f.get("task", task);
  c.task = task_from_string(task);
  f.get("variant", c.variant);
  std::uint64_t seed = 0;
  if (j.contains("seed")) {
    f.get("seed", seed);
    c.seed = seed;
  } else {
    f.child("seed");
  }
  std::string out = c.out.string(), data;
  f.get("out", out);
  f.get("data", data);
  c.out = out;
  c.data = data;
  f.get("train_count", c.train_count);
  f.get("eval_count", c.eval_count);

  const bool seg = c.task == Task::segmentation;
  double margin = seg ? c.segmentation.margin : c.matching.margin;
  std::size_t epochs = seg ? c.segmentation.epochs : c.matching.stage2_epochs;
  f.get("margin", margin);
  f.get("lambda", c.segmentation.lambda);
  f.get("epochs", epochs);
  c.segmentation.margin = c.matching.margin = margin;
  c.segmentation.epochs = c.matching.stage2_epochs = epochs;

  if (const json* n = f.child("net")) {
    NetConfig net = net_config_from_json(*n);
    c.net = net;
  }
  if (const json* s = f.child("scene")) read_scene(*s, c.scene);
  if (const json* p = f.child("pair")) read_pair(*p, c.pair);
  if (const json* t = f.child("train")) {
    Fields tf(*t, "train");
    double lr = seg ? c.segmentation.lr : c.matching.lr;
    double momentum = c.segmentation.momentum, wd = c.segmentation.weight_decay, decay = c.segmentation.lr_decay;
    std::size_t triplets = c.segmentation.triplets;
    std::string moments = to_string(c.segmentation.moments);
    tf.get("lr", lr);
    tf.get("momentum", momentum);
    tf.get("weight_decay", wd);
    tf.get("lr_decay", decay);
    tf.get("triplets", triplets);
    tf.get("moments", moments);
    tf.get("ces_neighbors", c.segmentation.ces_neighbors);
    tf.get("n_mc", c.segmentation.n_mc);
    tf.get("stage1_epochs", c.matching.stage1_epochs);
    tf.get("stage2_lr", c.matching.stage2_lr);
    tf.get("hinge_margin", c.matching.hinge_margin);
    tf.get("inlier_threshold", c.matching.inlier_threshold);
    tf.finish();
    c.segmentation.lr = c.matching.lr = lr;
    c.segmentation.momentum = c.matching.momentum = momentum;
    c.segmentation.weight_decay = c.matching.weight_decay = wd;
    c.segmentation.lr_decay = c.matching.lr_decay = decay;
    c.segmentation.triplets = c.matching.triplets = triplets;
    c.segmentation.moments = c.matching.moments = moment_mode_from_string(moments);
  }
  if (const json* e = f.child("eval")) {
    Fields ef(*e, "eval");
    std::string method;
    ef.get("method", method);
    if (!method.empty()) c.method = method;
    ef.get("bins", c.bins);
    ef.get("mcd_passes", c.eval.mcd_passes);
    ef.finish();
  }
  f.finish();
  c.resolve();
  return c;
}

json to_json(const ExperimentConfig& c) {
  const bool seg = c.task == Task::segmentation;
  json j;
  j["task"] = to_string(c.task);
  j["variant"] = c.variant;
  if (c.seed) j["seed"] = *c.seed;
  j["out"] = c.out.generic_string();
  if (!c.data.empty()) j["data"] = c.data.generic_string();
  j["train_count"] = c.train_count;
  j["eval_count"] = c.eval_count;
  j["margin"] = seg ? c.segmentation.margin : c.matching.margin;
  j["lambda"] = c.segmentation.lambda;
  j["epochs"] = seg ? c.segmentation.epochs : c.matching.stage2_epochs;
  json net = to_json(c.net);
  net.erase("classes");
  net.erase("kind");
  j["net"] = net;
  j["scene"] = scene_json(c.scene);
  if (!seg) j["pair"] = pair_json(c.pair);
  json train = {{"lr", seg ? c.segmentation.lr : c.matching.lr},
                {"momentum", seg ? c.segmentation.momentum : c.matching.momentum},
                {"weight_decay", seg ? c.segmentation.weight_decay : c.matching.weight_decay},
                {"lr_decay", seg ? c.segmentation.lr_decay : c.matching.lr_decay},
                {"triplets", seg ? c.segmentation.triplets : c.matching.triplets},
                {"moments", to_string(seg ? c.segmentation.moments : c.matching.moments)}};
  if (seg) {
    train["ces_neighbors"] = c.segmentation.ces_neighbors;
    train["n_mc"] = c.segmentation.n_mc;
  } else {
    train["stage1_epochs"] = c.matching.stage1_epochs;
    train["stage2_lr"] = c.matching.stage2_lr;
    train["hinge_margin"] = c.matching.hinge_margin;
    train["inlier_threshold"] = c.matching.inlier_threshold;
  }
  j["train"] = train;
  json eval = {{"bins", c.bins}, {"mcd_passes", c.eval.mcd_passes}};
  if (c.method) eval["method"] = *c.method;
  j["eval"] = eval;
  return j;
}

ExperimentConfig load_config(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

// Files

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, std::string_view bytes) {
  if (path.has_parent_path()) ensure_dir(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ConfigError("write failed for " + path.string());
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw ConfigError("cannot create directory " + dir.string());
}

namespace {

void append_number(std::string& out, double v, int digits) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  out += buf;
}

std::vector<std::string_view> split(std::string_view line, char sep) {
  std::vector<std::string_view> parts;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(sep, start);
    parts.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return parts;
}

std::vector<std::string_view> lines(std::string_view text) {
  std::vector<std::string_view> out;
  for (auto l : split(text, '\n')) {
    if (!l.empty() && l.back() == '\r') l.remove_suffix(1);
    if (!l.empty()) out.push_back(l);
  }
  return out;
}

double parse_double(std::string_view s) {
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) throw ConfigError("bad number '" + std::string(s) + "'");
  return v;
}

long long parse_int(std::string_view s) {
  long long v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) throw ConfigError("bad integer '" + std::string(s) + "'");
  return v;
}

}  // namespace

std::string cloud_to_csv(const PointCloud& cloud) {
  const bool labelled = cloud.has_labels();
  std::string out = labelled ? "x,y,z,label\n" : "x,y,z\n";
  out.reserve(out.size() + cloud.size() * 48);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const double* x = cloud.point(i);
    for (int a = 0; a < 3; ++a) {
      if (a) out += ',';
      append_number(out, x[a], 9);
    }
    if (labelled) {
      out += ',';
      out += std::to_string(cloud.labels[i]);
    }
    out += '\n';
  }
  return out;
}

PointCloud cloud_from_csv(std::string_view text) {
  const auto rows = lines(text);
  if (rows.empty()) throw ConfigError("point cloud CSV is empty");
  const auto header = split(rows[0], ',');
  const bool labelled = header.size() == 4 && header[3] == "label";
  if (!(header.size() >= 3 && header[0] == "x" && header[1] == "y" && header[2] == "z") ||
      !(header.size() == 3 || labelled))
    throw ConfigError("point cloud CSV header must be x,y,z[,label]");
  const std::size_t n = rows.size() - 1;
  Tensor coords(Shape{n, 3});
  std::vector<int> labels;
  if (labelled) labels.reserve(n);
  for (std::size_t r = 0; r < n; ++r) {
    const auto cells = split(rows[r + 1], ',');
    if (cells.size() != header.size()) throw ConfigError("point cloud CSV row " + std::to_string(r + 2) + " has the wrong width");
    for (int a = 0; a < 3; ++a) coords[3 * r + a] = parse_double(cells[a]);
    if (labelled) labels.push_back(static_cast<int>(parse_int(cells[3])));
  }
  return PointCloud(std::move(coords), std::move(labels));
}

std::string labels_to_csv(const std::vector<int>& labels) {
  std::string out = "label\n";
  for (int l : labels) {
    out += std::to_string(l);
    out += '\n';
  }
  return out;
}

std::vector<int> labels_from_csv(std::string_view text) {
  const auto rows = lines(text);
  if (rows.empty() || rows[0] != "label") throw ConfigError("label CSV header must be 'label'");
  std::vector<int> out;
  out.reserve(rows.size() - 1);
  for (std::size_t r = 1; r < rows.size(); ++r) out.push_back(static_cast<int>(parse_int(rows[r])));
  return out;
}

namespace {

std::string index_csv(const std::vector<std::size_t>& idx) {
  std::string out = "source\n";
  for (auto i : idx) {
    out += std::to_string(i);
    out += '\n';
  }
  return out;
}

std::vector<std::size_t> index_from_csv(std::string_view text) {
  const auto rows = lines(text);
  if (rows.empty() || rows[0] != "source") throw ConfigError("source CSV header must be 'source'");
  std::vector<std::size_t> out;
  for (std::size_t r = 1; r < rows.size(); ++r) out.push_back(static_cast<std::size_t>(parse_int(rows[r])));
  return out;
}

std::uint64_t item_seed(std::uint64_t seed, std::uint64_t stream, std::size_t i) {
  return derive_seed(derive_seed(seed, stream), i);
}

}  // namespace

json write_dataset(const ExperimentConfig& cfg, const fs::path& dir) {
  cfg.validate();
  ensure_dir(dir);
  json manifest;
  manifest["format"] = "cue-dataset";
  manifest["version"] = 1;
  manifest["task"] = to_string(cfg.task);
  manifest["seed"] = *cfg.seed;
  manifest["scene"] = scene_json(cfg.scene);
  if (cfg.task == Task::matching) manifest["pair"] = pair_json(cfg.pair);

  const std::pair<const char*, std::size_t> splits[] = {{"train", cfg.train_count}, {"eval", cfg.eval_count}};
  for (std::uint64_t stream = 0; stream < 2; ++stream) {
    const auto [split_name, count] = splits[stream];
    json items = json::array();
    if (cfg.task == Task::segmentation) {
      const auto scenes = gen_segmentation_scenes(cfg.scene, count, stream);
      for (std::size_t i = 0; i < scenes.size(); ++i) {
        const auto& s = scenes[i];
        const std::string base = std::string(split_name) + "/" + s.cloud.id;
        write_file(dir / (base + ".csv"), cloud_to_csv(s.cloud));
        write_file(dir / (base + "_clean.csv"), labels_to_csv(s.clean));
        items.push_back({{"id", s.cloud.id},
                         {"cloud", base + ".csv"},
                         {"clean_labels", base + "_clean.csv"},
                         {"points", s.cloud.size()},
                         {"flipped", s.flipped()},
                         {"seed", item_seed(cfg.scene.seed, stream, i)}});
      }
    } else {
      const auto pairs = gen_matching_pairs(cfg.pair, count, stream);
      for (std::size_t i = 0; i < pairs.size(); ++i) {
        const auto& p = pairs[i];
        const std::string id = p.cloud_i.id.substr(0, p.cloud_i.id.size() - 2);
        const std::string base = std::string(split_name) + "/" + id;
        write_file(dir / (base + "_i.csv"), cloud_to_csv(p.cloud_i));
        write_file(dir / (base + "_j.csv"), cloud_to_csv(p.cloud_j));
        write_file(dir / (base + "_source.csv"), index_csv(p.source));
        items.push_back({{"id", id},
                         {"cloud_i", base + "_i.csv"},
                         {"cloud_j", base + "_j.csv"},
                         {"source", base + "_source.csv"},
                         {"transform", to_json(p.transform)},
                         {"seed", item_seed(cfg.pair.seed, stream, i)}});
      }
    }
    manifest[split_name] = items;
  }
  write_file(dir / "manifest.json", report_bytes(manifest));
  return manifest;
}

Dataset read_dataset(const fs::path& dir) {
  json manifest;
  try {
    manifest = json::parse(read_file(dir / "manifest.json"));
  } catch (const json::parse_error& e) {
    throw ConfigError((dir / "manifest.json").string() + ": " + e.what());
  }
  Dataset ds;
  try {
    if (manifest.at("format") != "cue-dataset") throw ConfigError("not a dataset manifest");
    ds.task = task_from_string(manifest.at("task").get<std::string>());
    for (const char* split_name : {"train", "eval"}) {
      const bool train = std::string(split_name) == "train";
      for (const auto& item : manifest.at(split_name)) {
        const std::string id = item.at("id");
        if (ds.task == Task::segmentation) {
          SegmentationScene s;
          s.cloud = cloud_from_csv(read_file(dir / item.at("cloud").get<std::string>()));
          s.clean = labels_from_csv(read_file(dir / item.at("clean_labels").get<std::string>()));
          s.cloud.id = id;
          if (!s.cloud.has_labels() || s.clean.size() != s.cloud.size())
            throw ConfigError("scene " + id + ": labels do not match the cloud");
          (train ? ds.train_scenes : ds.eval_scenes).push_back(std::move(s));
        } else {
          MatchingPair p;
          p.cloud_i = cloud_from_csv(read_file(dir / item.at("cloud_i").get<std::string>()));
          p.cloud_j = cloud_from_csv(read_file(dir / item.at("cloud_j").get<std::string>()));
          p.source = index_from_csv(read_file(dir / item.at("source").get<std::string>()));
          p.transform = transform_from_json(item.at("transform"));
          p.cloud_i.id = id + "_i";
          p.cloud_j.id = id + "_j";
          if (p.source.size() != p.cloud_j.size()) throw ConfigError("pair " + id + ": source does not match cloud_j");
          (train ? ds.train_pairs : ds.eval_pairs).push_back(std::move(p));
        }
      }
    }
  } catch (const json::exception& e) {
    throw ConfigError((dir / "manifest.json").string() + ": " + e.what());
  }
  return ds;
}

// Checkpoints

namespace {

constexpr char kMagic[8] = {'C', 'U', 'E', 'C', 'K', 'P', 'T', '\0'};

template <class T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <class T>
T take(std::string_view bytes, std::size_t& pos) {
  if (pos + sizeof(T) > bytes.size()) throw ConfigError("checkpoint truncated");
  T v;
  std::memcpy(&v, bytes.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

}  // namespace

std::string encode_checkpoint(const Checkpoint& ck) {
  const NetParams& p = ck.params;
  json tensors = json::array();
  for (std::size_t i = 0; i < p.size(); ++i)
    tensors.push_back({{"name", p.names[i]},
                       {"shape", p.tensors[i].shape()},
                       {"branch", p.branch[i]},
                       {"frozen", static_cast<bool>(p.frozen[i])}});
  const json header = {{"format_version", kCheckpointVersion},
                       {"net", to_json(p.config)},
                       {"tensors", tensors},
                       {"metadata", ck.metadata}};
  const std::string h = header.dump();
  std::string out(kMagic, sizeof kMagic);
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint64_t>(out, h.size());
  out += h;
  for (const auto& t : p.tensors)
    out.append(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(double));
  return out;
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  if (bytes.size() < sizeof kMagic || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0)
    throw ConfigError("not a checkpoint (bad magic)");
  std::size_t pos = sizeof kMagic;
  const auto version = take<std::uint32_t>(bytes, pos);
  if (version != kCheckpointVersion) throw ConfigError("unsupported checkpoint version " + std::to_string(version));
  const auto hlen = take<std::uint64_t>(bytes, pos);
  if (pos + hlen > bytes.size()) throw ConfigError("checkpoint truncated");
  Checkpoint ck;
  try {
    const json header = json::parse(bytes.substr(pos, hlen));
    pos += hlen;
    ck.params.config = net_config_from_json(header.at("net"));
    ck.metadata = header.at("metadata");
    for (const auto& t : header.at("tensors")) {
      const auto shape = t.at("shape").get<Shape>();
      Tensor tensor(shape);
      const std::size_t nbytes = tensor.size() * sizeof(double);
      if (pos + nbytes > bytes.size()) throw ConfigError("checkpoint truncated");
      std::memcpy(tensor.data(), bytes.data() + pos, nbytes);
      pos += nbytes;
      ck.params.names.push_back(t.at("name"));
      ck.params.branch.push_back(t.at("branch"));
      ck.params.frozen.push_back(t.at("frozen").get<bool>());
      ck.params.tensors.push_back(std::move(tensor));
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("checkpoint header: ") + e.what());
  }
  if (pos != bytes.size()) throw ConfigError("checkpoint has trailing bytes");

  // The tensor table must be what this config builds.
  const NetParams ref = init_params(ck.params.config, 0);
  if (ref.names != ck.params.names) throw ConfigError("checkpoint tensors do not match its net config");
  for (std::size_t i = 0; i < ref.size(); ++i)
    if (!ref.tensors[i].same_shape(ck.params.tensors[i]))
      throw ConfigError("checkpoint tensor " + ref.names[i] + " has the wrong shape");
  return ck;
}

void save_checkpoint(const fs::path& path, const Checkpoint& ck) { write_file(path, encode_checkpoint(ck)); }

Checkpoint load_checkpoint(const fs::path& path) { return decode_checkpoint(read_file(path)); }

// Reports

std::string fnv1a_hex(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void stamp_content_hash(json& report) {
  json copy = report;
  copy.erase("content_hash");
  for (const char* k : kNondeterministicFields) copy.erase(k);
  report["content_hash"] = fnv1a_hex(copy.dump());
}

std::string report_bytes(const json& report) { return report.dump(2) + "\n"; }

json loss_history_json(const TrainReport& r) {
  json h = json::array();
  for (std::size_t e = 0; e < r.epochs.size(); ++e) {
    const auto& ep = r.epochs[e];
    json row = {{"epoch", e}, {"stage", ep.stage}, {"total", ep.total}};
    if (ep.ce) row["L_CE"] = *ep.ce;
    if (ep.hinge) row["L_hinge"] = *ep.hinge;
    if (ep.metric) row["L_M"] = *ep.metric;
    h.push_back(row);
  }
  return h;
}

json train_report_json(const ExperimentConfig& cfg, const TrainReport& r) {
  json series = json::object();
  for (const char* key : {"L_CE", "L_hinge", "L_M"}) {
    json s = json::array();
    for (const auto& row : loss_history_json(r))
      if (row.contains(key)) s.push_back(row[key]);
    if (!s.empty()) series[key] = s;
  }
  json rep = {{"kind", "train_report"},
              {"task", to_string(cfg.task)},
              {"variant", cfg.variant},
              {"model", to_string(cfg.net.kind)},
              {"seed", *cfg.seed},
              {"config", to_json(cfg)},
              {"parameter_count", r.parameter_count},
              {"epochs", r.epochs.size()},
              {"loss_history", loss_history_json(r)},
              {"series", series},
              {"checkpoint", r.checkpoint},
              {"timing", {{"wall_seconds", r.wall_seconds}}}};
  stamp_content_hash(rep);
  return rep;
}

CalibrationSummary summarize_calibration(std::span<const double> levels, std::span<const int> correct,
                                         std::size_t bins) {
  CalibrationSummary s;
  s.bins = reliability_bins(levels, correct, bins);
  s.ece = ece(s.bins, EceWeighting::by_count);
  s.ece_uniform = ece(s.bins, EceWeighting::uniform);
  s.spearman = bin_level_accuracy_spearman(s.bins);
  s.items = levels.size();
  return s;
}

std::string reliability_csv(const std::vector<BinStats>& bins) {
  std::string out = "bin_center,mean_level,count,accuracy,confidence\n";
  for (const auto& b : bins) {
    append_number(out, b.center, 9);
    out += ',';
    append_number(out, b.mean_level, 9);
    out += ',' + std::to_string(b.count) + ',';
    if (b.accuracy) append_number(out, *b.accuracy, 9);
    out += ',';
    append_number(out, b.confidence(), 9);
    out += '\n';
  }
  return out;
}

json calibration_json(const CalibrationSummary& s) {
  json bins = json::array();
  for (const auto& b : s.bins)
    bins.push_back({{"bin_center", b.center},
                    {"mean_level", b.mean_level},
                    {"count", b.count},
                    {"accuracy", b.accuracy ? json(*b.accuracy) : json(nullptr)},
                    {"confidence", b.confidence()}});
  return {{"bins", s.bins.size()},
          {"items", s.items},
          {"ece", s.ece},
          {"ece_uniform", s.ece_uniform},
          {"spearman", std::isfinite(s.spearman) ? json(s.spearman) : json(nullptr)},
          {"reliability", bins}};
}

std::string eval_dump_csv(std::span<const double> levels, std::span<const int> correct,
                          std::span<const double> raw) {
  if (levels.size() != correct.size() || levels.size() != raw.size())
    throw std::invalid_argument("eval_dump_csv: length mismatch");
  std::string out = "level,correct,raw\n";
  for (std::size_t i = 0; i < levels.size(); ++i) {
    append_number(out, levels[i], 17);
    out += correct[i] ? ",1," : ",0,";
    append_number(out, raw[i], 17);
    out += '\n';
  }
  return out;
}

EvalDump eval_dump_from_csv(std::string_view text) {
  const auto rows = lines(text);
  if (rows.empty() || rows[0] != "level,correct,raw") throw ConfigError("eval dump header must be level,correct,raw");
  EvalDump d;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto cells = split(rows[r], ',');
    if (cells.size() != 3) throw ConfigError("eval dump row " + std::to_string(r + 1) + " has the wrong width");
    d.levels.push_back(parse_double(cells[0]));
    const auto c = parse_int(cells[1]);
    if (c != 0 && c != 1) throw ConfigError("eval dump: correct must be 0 or 1");
    d.correct.push_back(static_cast<int>(c));
    d.raw.push_back(parse_double(cells[2]));
  }
  return d;
}

json oracle_json(const OracleTable& t) {
  json rep = {{"kind", "oracle_report"},
              {"suite", t.suite},
              {"rows", t.rows.size()},
              {"failures", t.failures()},
              {"max_error", t.max_error()},
              {"pass", t.pass()},
              {"timing", {{"wall_seconds", t.seconds}}}};
  stamp_content_hash(rep);
  return rep;
}

}  // namespace cue
