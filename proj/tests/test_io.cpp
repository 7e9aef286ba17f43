#include <cmath>
#include <filesystem>
#include <string>
#include <unistd.h>

#include "cue/commands.hpp"
#include "cue/io.hpp"
#include "doctest.h"

using namespace cue;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("cue_io_" + std::to_string(::getpid())) / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

json tiny_segmentation(const fs::path& root, const std::string& variant) {
  return {{"task", "segmentation"},
          {"variant", variant},
          {"seed", 5},
          {"out", (root / variant).string()},
          {"data", (root / "data").string()},
          {"train_count", 2},
          {"eval_count", 1},
          {"epochs", 2},
          {"net", {{"embed_dim", 4}, {"hidden", {8}}, {"k_ctx", 4}}},
          {"scene", {{"points", 96}}},
          {"train", {{"triplets", 24}}},
          {"eval", {{"mcd_passes", 4}}}};
}

json tiny_matching(const fs::path& root, const std::string& variant) {
  return {{"task", "matching"},
          {"variant", variant},
          {"seed", 6},
          {"out", (root / variant).string()},
          {"data", (root / "data").string()},
          {"train_count", 2},
          {"eval_count", 2},
          {"epochs", 2},
          {"net", {{"embed_dim", 4}, {"hidden", {8}}, {"k_ctx", 4}}},
          {"pair",
           {{"points", 96}, {"rotation_max_deg", 10.0}, {"vertical_axis", true}, {"scale_min", 0.95},
            {"scale_max", 1.05}, {"jitter", 0.005}, {"overlap", 0.8}}},
          {"train", {{"triplets", 24}, {"stage1_epochs", 2}}}};
}

std::string strip_timing(const fs::path& report) {
  json j = json::parse(read_file(report));
  for (const char* k : kNondeterministicFields) j.erase(k);
  return j.dump();
}

}  // namespace

TEST_CASE("shipped configs parse and validate") {
  for (const char* name : {"segmentation.json", "matching.json"}) {
    const auto cfg = load_config(fs::path(CUE_SOURCE_DIR) / "configs" / name);
    CHECK_NOTHROW(cfg.validate());
    // resolved config survives a JSON round trip
    CHECK(to_json(config_from_json(to_json(cfg))) == to_json(cfg));
  }
}

TEST_CASE("config validation errors") {
  const fs::path root = scratch("config");
  json j = tiny_segmentation(root, "cue");
  CHECK_NOTHROW(config_from_json(j).validate());

  json typo = j;
  typo["net"]["embed_dims"] = 4;
  CHECK_THROWS_AS(config_from_json(typo), ConfigError);

  json no_seed = j;
  no_seed.erase("seed");
  CHECK_THROWS_AS(config_from_json(no_seed).validate(), ConfigError);

  json bad_variant = j;
  bad_variant["variant"] = "bayes";
  CHECK_THROWS_AS(config_from_json(bad_variant), ConfigError);

  for (const char* v : {"se", "au", "mcd"}) {
    json m = tiny_matching(root, v);
    CHECK_THROWS_AS(config_from_json(m).validate(), ConfigError);
  }
  json neg_lr = j;
  neg_lr["train"]["lr"] = -1.0;
  CHECK_THROWS_AS(config_from_json(neg_lr).validate(), ConfigError);

  json mcd = tiny_segmentation(root, "mcd");
  const auto c = config_from_json(mcd);
  CHECK(c.net.dropout > 0.0);
  CHECK(c.eval_method() == Method::mcd);
  CHECK(config_from_json(tiny_segmentation(root, "deterministic")).eval_method() == Method::rg);
}

TEST_CASE("point cloud CSV round trip at 9 significant digits") {
  Rng rng(1);
  Tensor x(Shape{50, 3});
  for (auto& v : x.values()) v = rng.normal() * std::pow(10.0, rng.uniform(-4.0, 3.0));
  std::vector<int> labels(50);
  for (auto& l : labels) l = static_cast<int>(rng.uniform_index(4));
  const PointCloud c(x, labels);
  const std::string text = cloud_to_csv(c);
  CHECK(text.rfind("x,y,z,label\n", 0) == 0);
  const PointCloud back = cloud_from_csv(text);
  REQUIRE(back.size() == 50);
  CHECK(back.labels == labels);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(std::abs(back.coords[i] - x[i]) <= 5e-9 * std::abs(x[i]));
  CHECK(cloud_to_csv(back) == text);

  const PointCloud unlabelled(x);
  CHECK(cloud_to_csv(unlabelled).rfind("x,y,z\n", 0) == 0);
  CHECK_FALSE(cloud_from_csv(cloud_to_csv(unlabelled)).has_labels());

  CHECK_THROWS_AS(cloud_from_csv("a,b,c\n1,2,3\n"), ConfigError);
  CHECK_THROWS_AS(cloud_from_csv("x,y,z\n1,2\n"), ConfigError);
  CHECK_THROWS_AS(cloud_from_csv("x,y,z\n1,2,zz\n"), ConfigError);
}

TEST_CASE("checkpoint round trip is bit-exact") {
  for (ModelKind kind : {ModelKind::deterministic, ModelKind::cue, ModelKind::cue_plus, ModelKind::au}) {
    NetConfig cfg;
    cfg.embed_dim = 4;
    cfg.hidden = {7, 5};
    cfg.classes = 3;
    cfg.kind = kind;
    NetParams p = init_params(cfg, 9);
    Rng rng(2);
    for (auto& t : p.tensors)
      for (auto& v : t.values()) v += rng.normal();
    p.tensors[0][0] = 1.0 / 3.0;
    p.tensors[0][1] = -0.0;
    const json meta = {{"seed", 9}, {"loss_history", {{{"total", 0.1 + 0.2}}}}};
    const std::string bytes = encode_checkpoint({p, meta});
    const Checkpoint back = decode_checkpoint(bytes);
    CHECK(encode_checkpoint(back) == bytes);
    CHECK(back.metadata == meta);
    CHECK(back.params.names == p.names);
    for (std::size_t i = 0; i < p.size(); ++i) CHECK(back.params.tensors[i].storage() == p.tensors[i].storage());
    CHECK(std::signbit(back.params.tensors[0][1]));

    CHECK_THROWS_AS(decode_checkpoint(bytes.substr(0, bytes.size() - 1)), ConfigError);
    CHECK_THROWS_AS(decode_checkpoint(bytes + "x"), ConfigError);
    std::string bad = bytes;
    bad[0] = 'X';
    CHECK_THROWS_AS(decode_checkpoint(bad), ConfigError);
  }
}

TEST_CASE("content hash ignores timing only") {
  json a = {{"kind", "x"}, {"value", 1.5}, {"timing", {{"wall_seconds", 1.0}}}};
  json b = a;
  b["timing"]["wall_seconds"] = 99.0;
  stamp_content_hash(a);
  stamp_content_hash(b);
  CHECK(a["content_hash"] == b["content_hash"]);
  json c = a;
  c["value"] = 1.25;
  stamp_content_hash(c);
  CHECK(c["content_hash"] != a["content_hash"]);
  json again = a;
  stamp_content_hash(again);
  CHECK(again == a);
  CHECK(fnv1a_hex("") == "cbf29ce484222325");
  CHECK(fnv1a_hex("a") == "af63dc4c8601ec8c");
}

TEST_CASE("gen is deterministic and writes valid labels") {
  const fs::path root = scratch("gen");
  json j = tiny_segmentation(root, "cue");
  j["data"] = (root / "a").string();
  const auto ma = cmd_gen(config_from_json(j));
  j["data"] = (root / "b").string();
  cmd_gen(config_from_json(j));
  for (const auto& e : fs::recursive_directory_iterator(root / "a")) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), root / "a");
    CHECK(read_file(e.path()) == read_file(root / "b" / rel));
  }
  const Dataset ds = read_dataset(root / "a");
  CHECK(ds.train_scenes.size() == 2);
  CHECK(ds.eval_scenes.size() == 1);
  for (const auto& s : ds.train_scenes)
    for (int l : s.cloud.labels) CHECK((l >= 0 && l < 4));
  const json manifest = json::parse(read_file(ma.manifest));
  CHECK(manifest["train"][0]["seed"].is_number_unsigned());

  j["seed"] = 6;
  j["data"] = (root / "c").string();
  cmd_gen(config_from_json(j));
  CHECK(read_file(root / "c" / "train" / "scene_0_0.csv") != read_file(root / "a" / "train" / "scene_0_0.csv"));
}

TEST_CASE("matching manifest transforms reproduce cloud_j up to jitter") {
  const fs::path root = scratch("gen_match");
  const auto cfg = config_from_json(tiny_matching(root, "cue"));
  cmd_gen(cfg);
  const Dataset ds = read_dataset(cfg.data_dir());
  REQUIRE(ds.train_pairs.size() == 2);
  double worst = 0.0;
  for (const auto* split : {&ds.train_pairs, &ds.eval_pairs})
    for (const auto& p : *split)
      for (std::size_t r = 0; r < p.cloud_j.size(); ++r) {
        const auto y = p.transform.apply(p.cloud_i.point(p.source[r]));
        for (int a = 0; a < 3; ++a) worst = std::max(worst, std::abs(y[a] - p.cloud_j.point(r)[a]));
      }
  CHECK(worst > 0.0);
  CHECK(worst <= 5.0 * cfg.pair.jitter + 1e-6);
}

TEST_CASE("train is deterministic and its report follows the variant") {
  const fs::path root = scratch("train");
  cmd_gen(config_from_json(tiny_segmentation(root, "cue")));
  std::size_t count_det = 0, count_cue = 0, count_plus = 0;
  for (const char* v : {"deterministic", "cue", "cue_plus", "au", "mcd"}) {
    const auto cfg = config_from_json(tiny_segmentation(root, v));
    const auto a = cmd_train(cfg);
    const std::string first = strip_timing(a.report), ck = read_file(a.checkpoint);
    const auto b = cmd_train(cfg);
    CHECK(strip_timing(b.report) == first);
    CHECK(read_file(b.checkpoint) == ck);
    const auto& series = a.report_json["series"];
    CHECK(series.contains("L_CE"));
    const bool metric = std::string(v) == "cue" || std::string(v) == "cue_plus";
    CHECK(series.contains("L_M") == metric);
    const std::size_t n = a.report_json["parameter_count"];
    if (std::string(v) == "deterministic") count_det = n;
    if (std::string(v) == "cue") count_cue = n;
    if (std::string(v) == "cue_plus") count_plus = n;
  }
  CHECK(count_plus > count_cue);
  CHECK(count_cue > count_det);
}

TEST_CASE("eval reports are deterministic and re-binning reproduces them") {
  const fs::path root = scratch("eval");
  cmd_gen(config_from_json(tiny_segmentation(root, "cue")));
  for (const char* v : {"deterministic", "cue", "mcd", "au"}) {
    auto cfg = config_from_json(tiny_segmentation(root, v));
    cmd_train(cfg);
    const auto a = cmd_eval(cfg);
    const auto b = cmd_eval(cfg);
    CHECK(strip_timing(a.report) == strip_timing(b.report));
    CHECK(read_file(a.reliability) == read_file(b.reliability));
    CHECK(a.report_json["predictive"].contains("miou"));
    const auto c = cmd_calib(a.dump, cfg.bins, root / (std::string(v) + "_calib"));
    CHECK(c.report_json["ece"] == a.report_json["ece"]);
    CHECK(read_file(c.reliability) == read_file(a.reliability));
    CHECK(read_file(a.reliability).rfind("bin_center,mean_level,count,accuracy,confidence\n", 0) == 0);
  }
  auto cfg = config_from_json(tiny_segmentation(root, "deterministic"));
  cfg.method = "se";
  CHECK(cmd_eval(cfg).report_json["method"] == "se");
  cfg.method = "cue";
  CHECK_THROWS_AS(cmd_eval(cfg), ConfigError);

  auto rebinned = cmd_calib(cmd_eval(config_from_json(tiny_segmentation(root, "cue"))).dump, 4, root / "b4");
  CHECK(rebinned.report_json["reliability"].size() == 4);
}

TEST_CASE("matching eval: cue and cue_plus share the predictive metric") {
  const fs::path root = scratch("eval_match");
  cmd_gen(config_from_json(tiny_matching(root, "cue")));
  json fmr, hits;
  for (const char* v : {"deterministic", "cue", "cue_plus"}) {
    const auto cfg = config_from_json(tiny_matching(root, v));
    cmd_train(cfg);
    const auto r = cmd_eval(cfg);
    CHECK(r.report_json["method"] == (std::string(v) == "deterministic" ? "rg" : v));
    if (fmr.is_null()) {
      fmr = r.report_json["predictive"]["fmr"];
      hits = r.report_json["predictive"]["hit_ratios"];
    }
    CHECK(r.report_json["predictive"]["fmr"] == fmr);
    CHECK(r.report_json["predictive"]["hit_ratios"] == hits);
  }
  // a segmentation checkpoint does not evaluate on a matching config
  const fs::path seg_root = scratch("eval_mismatch");
  const auto seg = config_from_json(tiny_segmentation(seg_root, "cue"));
  cmd_gen(seg);
  const auto trained = cmd_train(seg);
  CHECK_THROWS_AS(cmd_eval(config_from_json(tiny_matching(root, "cue")), trained.checkpoint), ConfigError);
}

TEST_CASE("oracle command writes its table") {
  const fs::path root = scratch("oracle");
  const auto r = cmd_oracle("covariance", 3, root);
  CHECK(r.pass);
  const std::string table = read_file(r.table);
  CHECK(table.rfind("item,quantity,analytic,oracle,std_error,error,tolerance,verdict\n", 0) == 0);
  CHECK(table.find(",fail\n") == std::string::npos);
  CHECK_THROWS_AS(cmd_oracle("nonsense", 0, root), ConfigError);
}
