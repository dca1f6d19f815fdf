#include "doctest.h"

#include "test_util.hpp"
#include "tmr/matrix_io.hpp"
#include "tmr/trainer.hpp"

#include "json.hpp"

#include <cstdio>
#include <sys/wait.h>

using namespace tmr;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out;
};

Run run(const std::string& args) {
  const std::string cmd = std::string("'") + TMR_CLI_PATH + "' " + args + " 2>/dev/null";
  Run r;
  FILE* p = popen(cmd.c_str(), "r");
  REQUIRE(p != nullptr);
  char buf[4096];
  std::size_t n;
  while ((n = fread(buf, 1, sizeof buf, p)) > 0) r.out.append(buf, n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

// Subset of JSON Schema: type, required, properties, additionalProperties
// (false only), items, enum, minimum, maximum and local $ref.
void validate(const json& v, const json& schema, const json& root, const std::string& where,
              std::vector<std::string>& errors) {
  if (schema.contains("$ref")) {
    const auto ref = schema["$ref"].get<std::string>();
    validate(v, root.at(json::json_pointer(ref.substr(1))), root, where, errors);
    return;
  }
  if (schema.contains("type")) {
    const auto t = schema["type"].get<std::string>();
    const bool ok = (t == "object" && v.is_object()) || (t == "array" && v.is_array()) ||
                    (t == "string" && v.is_string()) || (t == "number" && v.is_number()) ||
                    (t == "integer" && v.is_number_integer()) || (t == "boolean" && v.is_boolean());
    if (!ok) {
      errors.push_back(where + ": expected " + t);
      return;
    }
  }
  if (schema.contains("enum") && std::find(schema["enum"].begin(), schema["enum"].end(), v) == schema["enum"].end()) {
    errors.push_back(where + ": not in enum");
  }
  if (schema.contains("minimum") && v.get<double>() < schema["minimum"].get<double>()) {
    errors.push_back(where + ": below minimum");
  }
  if (schema.contains("maximum") && v.get<double>() > schema["maximum"].get<double>()) {
    errors.push_back(where + ": above maximum");
  }
  if (v.is_object()) {
    for (const auto& k : schema.value("required", json::array())) {
      if (!v.contains(k.get<std::string>())) errors.push_back(where + ": missing " + k.get<std::string>());
    }
    const auto props = schema.value("properties", json::object());
    for (const auto& [k, sub] : v.items()) {
      if (props.contains(k)) {
        validate(sub, props[k], root, where + "." + k, errors);
      } else if (schema.contains("additionalProperties") && schema["additionalProperties"] == false) {
        errors.push_back(where + ": unexpected " + k);
      }
    }
  }
  if (v.is_array() && schema.contains("items")) {
    for (std::size_t i = 0; i < v.size(); ++i) {
      validate(v[i], schema["items"], root, where + "[" + std::to_string(i) + "]", errors);
    }
  }
}

std::vector<std::string> schema_errors(const json& report) {
  const json schema = json::parse(io::read_text_file(fs::path(TMR_SCHEMA_DIR) / "report.schema.json"));
  std::vector<std::string> errors;
  validate(report, schema, schema, "$", errors);
  return errors;
}

// Synthetic dataset plus a short training run, shared by the cases below.
struct Workspace {
  tmr::testing::TempDir dir{"cli"};
  fs::path data = dir / "data", ckpt = dir / "ckpt", index = dir / "index";
  bool ready = false;

  Workspace() {
    auto sc = tmr::testing::small_synthetic(40, 11);
    sc.frames_min = 20;
    sc.frames_max = 30;
    io::write_text_file(dir / "synth.json", data::to_json(sc).dump());
    train::TrainConfig tc;
    tc.epochs = 2;
    tc.batch_size = 8;
    tc.model = tmr::testing::tiny_model_config(0);
    io::write_text_file(dir / "train.json", train::to_json(tc).dump());
    ready = run("synth --config " + q(dir / "synth.json") + " --out " + q(data)).code == 0 &&
            run("train --quiet --config " + q(dir / "train.json") + " --data " + q(data) + " --out " + q(ckpt))
                    .code == 0 &&
            run("index --ckpt " + q(ckpt) + " --data " + q(data) + " --out " + q(index)).code == 0;
  }
};

const Workspace& ws() {
  static Workspace w;
  return w;
}

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("synth, train and index produce loadable artifacts") {
  REQUIRE(ws().ready);
  auto ds = data::load_dataset(ws().data);
  CHECK(ds.items.size() == 40);
  auto m = model::TmrModel::load(ws().ckpt);
  CHECK(m.config().latent_dim == 4);
  CHECK(fs::exists(ws().ckpt / "train_log.jsonl"));
  json extra;
  auto g = retrieval::Gallery::load(ws().index, &extra);
  CHECK(g.size() == ds.indices(data::Split::Test).size());
  CHECK(extra["split"] == "test");
}

TEST_CASE("search prints k hits using the checkpoint recorded in the index") {
  REQUIRE(ws().ready);
  auto r = run("search --index " + q(ws().index) + " --query 'walk forward' --k 3");
  REQUIRE(r.code == 0);
  auto hits = json::parse(r.out);
  CHECK(hits.size() == 3);
  CHECK(hits[0].contains("id"));
  CHECK(hits[0]["score"].get<double>() >= hits[2]["score"].get<double>());
}

TEST_CASE("eval reports follow the schema and protocol b dominates a") {
  REQUIRE(ws().ready);
  auto a = run("eval --ckpt " + q(ws().ckpt) + " --data " + q(ws().data) + " --protocol a");
  auto b = run("eval --ckpt " + q(ws().ckpt) + " --data " + q(ws().data) + " --protocol b --threshold 0.9");
  REQUIRE(a.code == 0);
  REQUIRE(b.code == 0);
  auto ja = json::parse(a.out), jb = json::parse(b.out);
  for (const auto& j : {ja, jb}) {
    auto errors = schema_errors(j);
    for (const auto& e : errors) MESSAGE(e);
    CHECK(errors.empty());
  }
  for (const char* dir : {"t2m", "m2t"}) {
    for (const char* k : {"R@1", "R@2", "R@3", "R@5", "R@10"}) {
      CHECK(jb["results"][dir]["recall"][k].get<double>() >= ja["results"][dir]["recall"][k].get<double>());
    }
  }
  auto one = run("eval --ckpt " + q(ws().ckpt) + " --data " + q(ws().data) + " --protocol d --direction m2t --batch-size 4");
  REQUIRE(one.code == 0);
  auto jd = json::parse(one.out);
  CHECK(jd["results"].size() == 1);
  CHECK(jd["results"]["m2t"]["gallery_size"] == 4);
  CHECK(schema_errors(jd).empty());
}

TEST_CASE("eval on a one-item gallery gives R@1 100") {
  REQUIRE(ws().ready);
  auto r = run("eval --ckpt " + q(ws().ckpt) + " --data " + q(ws().data) + " --protocol c --subset-size 1");
  REQUIRE(r.code == 0);
  auto j = json::parse(r.out);
  CHECK(j["results"]["t2m"]["recall"]["R@1"] == 100.0);
  CHECK(j["results"]["m2t"]["medr"] == 1.0);
  CHECK(schema_errors(j).empty());
}

TEST_CASE("localize writes a curve, a best segment and an svg") {
  REQUIRE(ws().ready);
  auto ds = data::load_dataset(ws().data);
  const auto& a = ds.items[0].motion.data;
  const auto& b = ds.items[1].motion.data;
  Matrix joined(a.rows() + b.rows(), a.cols());
  joined << a, b;
  io::save_matrix(ws().dir / "long.mtx", joined);
  const std::string truth = std::to_string(a.rows()) + ":" + std::to_string(joined.rows());
  auto r = run("localize --ckpt " + q(ws().ckpt) + " --motion " + q(ws().dir / "long.mtx") + " --query '" +
               ds.items[1].texts[0].text + "' --window 10 --stride 2 --truth " + truth + " --svg " +
               q(ws().dir / "plot.svg"));
  REQUIRE(r.code == 0);
  auto j = json::parse(r.out);
  CHECK(j["frames"] == joined.rows());
  CHECK(j["curve"]["values"].size() == static_cast<std::size_t>((joined.rows() + 1) / 2));
  CHECK(j["best"]["end"].get<int>() > j["best"]["start"].get<int>());
  CHECK(j["iou"].get<double>() >= 0.0);
  CHECK(io::read_text_file(ws().dir / "plot.svg").rfind("<svg", 0) == 0);
}

TEST_CASE("bad inputs exit non-zero") {
  REQUIRE(ws().ready);
  CHECK(run("eval --ckpt /no/such/ckpt --data " + q(ws().data)).code != 0);
  CHECK(run("eval --ckpt " + q(ws().ckpt) + " --data " + q(ws().data) + " --protocol z").code != 0);
  CHECK(run("eval --ckpt " + q(ws().ckpt) + " --data " + q(ws().data) + " --protocol b --threshold 1.5").code != 0);
  CHECK(run("search --index /no/such/index --query walk").code != 0);
  CHECK(run("frobnicate").code != 0);
  CHECK(run("").code != 0);
}

}  // TEST_SUITE
