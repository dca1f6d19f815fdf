#include "doctest.h"

#include "test_util.hpp"
#include "tmr/dataio.hpp"
#include "tmr/matrix_io.hpp"

#include <cstring>
#include <limits>
#include <numeric>

using namespace tmr;
using tmr::testing::TempDir;
using tmr::testing::random_matrix;

namespace {

std::string bytes_of(const std::filesystem::path& p) { return io::read_text_file(p); }

}  // namespace

TEST_SUITE("dataio") {

TEST_CASE("matrix files round-trip f32 values exactly") {
  TempDir dir("mtx");
  Matrix m = io::round_to_f32(random_matrix(5, 3, 1));
  io::save_matrix(dir / "a.mtx", m);
  CHECK(io::load_matrix(dir / "a.mtx") == m);
  std::string raw = bytes_of(dir / "a.mtx");
  CHECK(raw.substr(0, 4) == "TMRM");
  CHECK(raw.size() == 4 + 1 + 4 + 4 + 5 * 3 * 4);
}

TEST_CASE("malformed matrix files are format errors naming the file") {
  TempDir dir("bad");
  io::write_text_file(dir / "magic.mtx", "XXXX");
  try {
    io::load_matrix(dir / "magic.mtx");
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("magic.mtx") != std::string::npos);
  }
  Matrix m = Matrix::Ones(2, 2);
  io::save_matrix(dir / "trunc.mtx", m);
  std::string raw = bytes_of(dir / "trunc.mtx");
  io::write_text_file(dir / "trunc.mtx", raw.substr(0, raw.size() - 3));
  CHECK_THROWS_AS(io::load_matrix(dir / "trunc.mtx"), FormatError);
  float nan = std::numeric_limits<float>::quiet_NaN();
  std::memcpy(raw.data() + 13, &nan, 4);
  io::write_text_file(dir / "nan.mtx", raw);
  CHECK_THROWS_AS(io::load_matrix(dir / "nan.mtx"), FormatError);
  Matrix inf = Matrix::Ones(1, 1);
  inf(0, 0) = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(io::save_matrix(dir / "inf.mtx", inf), FormatError);
}

TEST_CASE("empty dataset dir reports no items") {
  TempDir dir("empty");
  try {
    data::load_dataset(dir.path());
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("no items") != std::string::npos);
  }
}

TEST_CASE("hand-built dataset with one motion and two texts") {
  TempDir dir("one");
  data::Dataset ds;
  ds.feature_dim = 64;
  ds.sent_emb_dim = 3;
  data::Item item;
  item.id = "m0";
  item.split = data::Split::Test;
  item.motion.data = io::round_to_f32(random_matrix(30, 64, 2));
  for (int k = 0; k < 2; ++k) {
    data::TextEntry e;
    e.text = k ? "a person waves" : "someone walks forward";
    e.sent_emb = Vector::Unit(3, k);
    e.global_index = static_cast<std::size_t>(k);
    item.texts.push_back(e);
  }
  ds.items.push_back(item);
  data::save_dataset(ds, dir.path());
  auto back = data::load_dataset(dir.path());
  REQUIRE(back.items.size() == 1);
  CHECK(back.items[0].texts.size() == 2);
  CHECK(back.text_count() == 2);
  CHECK(back.items[0].motion.data == item.motion.data);
  CHECK(back.text_similarity(0, 1) == doctest::Approx(0.0));
}

TEST_CASE("synthetic generation is deterministic and round-trips byte for byte") {
  auto cfg = tmr::testing::small_synthetic(40, 7);
  auto a = data::generate_synthetic(cfg);
  auto b = data::generate_synthetic(cfg);
  REQUIRE(a.items.size() == b.items.size());
  for (std::size_t i = 0; i < a.items.size(); ++i) {
    CHECK(a.items[i].id == b.items[i].id);
    CHECK(a.items[i].motion.data == b.items[i].motion.data);
    CHECK(a.items[i].texts.size() == b.items[i].texts.size());
    CHECK(a.items[i].texts[0].text == b.items[i].texts[0].text);
  }
  TempDir d1("rt1"), d2("rt2");
  data::save_dataset(a, d1.path());
  data::save_dataset(data::load_dataset(d1.path()), d2.path());
  for (const auto& entry : std::filesystem::recursive_directory_iterator(d1.path())) {
    if (!entry.is_regular_file()) continue;
    auto rel = std::filesystem::relative(entry.path(), d1.path());
    CHECK_MESSAGE(bytes_of(entry.path()) == bytes_of(d2.path() / rel), rel.string());
  }
}

TEST_CASE("synthetic splits and shapes") {
  auto cfg = tmr::testing::small_synthetic(100, 3);
  auto ds = data::generate_synthetic(cfg);
  CHECK(ds.indices(data::Split::Train).size() == 70);
  CHECK(ds.indices(data::Split::Val).size() == 10);
  CHECK(ds.indices(data::Split::Test).size() == 20);
  for (const auto& it : ds.items) {
    CHECK(it.motion.frames() >= cfg.frames_min);
    CHECK(it.motion.frames() <= cfg.frames_max);
    CHECK(it.motion.data.cols() == cfg.motion_dim);
    REQUIRE(it.motion.joints);
    CHECK(it.motion.joints->cols() == 3 * cfg.joint_count);
    CHECK(!it.texts.empty());
    CHECK(static_cast<int>(it.texts.size()) <= cfg.texts_per_item);
  }
}

TEST_CASE("distinct synthetic factors stay below the dataset's max off-diagonal similarity") {
  auto ds = data::generate_synthetic(tmr::testing::small_synthetic(200, 5));
  std::vector<std::size_t> all(ds.items.size());
  std::iota(all.begin(), all.end(), 0);
  Matrix sim = ds.first_text_similarity(all);
  const double eps = 1.0 - data::max_offdiag(sim);
  CHECK(eps > 0.0);
  for (Eigen::Index i = 0; i < sim.rows(); ++i) {
    for (Eigen::Index j = 0; j < sim.cols(); ++j) {
      if (i != j) CHECK(sim(i, j) <= 1.0 - eps);
    }
  }
}

TEST_CASE("paraphrase rate 0.3 on 100 items yields at least 25 near-duplicates") {
  auto cfg = tmr::testing::small_synthetic(100, 9);
  cfg.paraphrase_rate = 0.3;
  auto ds = data::generate_synthetic(cfg);
  std::vector<std::size_t> all(ds.items.size());
  std::iota(all.begin(), all.end(), 0);
  Matrix sim = ds.first_text_similarity(all);
  int similar = 0;
  for (Eigen::Index i = 0; i < sim.rows(); ++i) {
    for (Eigen::Index j = 0; j < sim.cols(); ++j) {
      if (i != j && sim(i, j) > 0.95) {
        ++similar;
        break;
      }
    }
  }
  CHECK(similar >= 25);
}

TEST_CASE("items sharing factors have sentence similarity 1") {
  auto cfg = tmr::testing::small_synthetic(60, 2);
  cfg.paraphrase_rate = 0.5;
  auto ds = data::generate_synthetic(cfg);
  int shared = 0;
  for (std::size_t i = 0; i < ds.items.size(); ++i) {
    for (std::size_t j = i + 1; j < ds.items.size(); ++j) {
      const Vector& a = ds.items[i].texts[0].sent_emb;
      const Vector& b = ds.items[j].texts[0].sent_emb;
      if ((a - b).norm() == 0.0) {
        ++shared;
        CHECK(ds.text_similarity(ds.items[i].texts[0].global_index, ds.items[j].texts[0].global_index) ==
              doctest::Approx(1.0).epsilon(1e-12));
      }
    }
  }
  CHECK(shared > 0);
}

TEST_CASE("text_similarity_matrix examples and invariants") {
  Matrix e(3, 2);
  e << 1, 0, 0, 1, 1, 1;
  e.row(2).normalize();
  Matrix s = data::text_similarity_matrix(e);
  CHECK(s(0, 1) == doctest::Approx(0.0));
  CHECK(s(0, 2) == doctest::Approx(0.70710678).epsilon(1e-8));
  CHECK(data::text_similarity_matrix(Matrix::Ones(2, 3))(0, 1) == doctest::Approx(1.0));

  Matrix r = random_matrix(25, 6, 4);
  Matrix sr = data::text_similarity_matrix(r);
  for (Eigen::Index i = 0; i < 25; ++i) {
    CHECK(sr(i, i) == 1.0);
    for (Eigen::Index j = 0; j < 25; ++j) {
      CHECK(sr(i, j) == sr(j, i));
      CHECK(sr(i, j) >= -1.0);
      CHECK(sr(i, j) <= 1.0);
    }
  }
  Matrix zero = Matrix::Ones(2, 2);
  zero.row(1).setZero();
  CHECK_THROWS_AS(data::text_similarity_matrix(zero), Error);
}

TEST_CASE("pair counting and similarity statistics") {
  CHECK(data::unique_pair_count(830) == 344035);
  CHECK(data::unique_pair_count(4380) == 9590010);
  CHECK(data::unique_pair_count(1) == 0);

  auto stats = data::similarity_stats(Matrix::Ones(4, 4), std::vector<double>{0.95});
  CHECK(stats.pairs == 6);
  CHECK(stats.fractions[0] == doctest::Approx(1.0));

  auto ds = data::generate_synthetic(tmr::testing::small_synthetic(80, 1));
  std::vector<std::size_t> all(ds.items.size());
  std::iota(all.begin(), all.end(), 0);
  std::vector<double> th;
  for (int i = 0; i <= 8; ++i) th.push_back(0.55 + 0.05 * i);
  auto sweep = data::similarity_stats(ds.first_text_similarity(all), th);
  for (std::size_t i = 1; i < th.size(); ++i) CHECK(sweep.fractions[i] <= sweep.fractions[i - 1]);
}

TEST_CASE("vocabulary tokenization") {
  auto toks = data::Vocabulary::tokenize("A person, WALKS_fast!  then-stops");
  CHECK(toks == std::vector<std::string>{"a", "person", "walks_fast", "then", "stops"});
  auto ds = data::generate_synthetic(tmr::testing::small_synthetic(30, 4));
  auto v = data::Vocabulary::build(ds);
  CHECK(v.size() >= 2);
  CHECK(v.id("definitely-not-a-word") == 0);
  auto ids = v.encode(ds.items[ds.indices(data::Split::Train)[0]].texts[0].text);
  for (int id : ids) CHECK(id > 0);
}

TEST_CASE("synthetic config validation and JSON") {
  data::SyntheticConfig c;
  c.n_items = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  auto j = data::to_json(tmr::testing::small_synthetic(50, 3));
  auto back = data::synthetic_config_from_json(j);
  CHECK(back.n_items == 50);
  CHECK(back.seed == 3);
  CHECK_THROWS_AS(data::synthetic_config_from_json(nlohmann::json{{"n_items", "many"}}), ConfigError);
}

}  // TEST_SUITE
