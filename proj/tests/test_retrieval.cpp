#include "doctest.h"

#include "test_util.hpp"
#include "tmr/retrieval.hpp"

#include <algorithm>
#include <numeric>

using namespace tmr;
using namespace tmr::retrieval;
using tmr::testing::TempDir;
using tmr::testing::random_matrix;
using tmr::testing::random_unit_rows;

namespace {

Gallery toy_gallery(const Matrix& emb) {
  std::vector<std::string> ids, texts;
  for (Eigen::Index i = 0; i < emb.rows(); ++i) {
    ids.push_back("m" + std::to_string(100 + i));
    texts.push_back("text " + std::to_string(i));
  }
  return build_index(emb, ids, texts, Matrix(emb.rows(), 0));
}

Matrix random_sim(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Matrix s(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    s(i, i) = 1.0;
    for (Eigen::Index j = i + 1; j < s.cols(); ++j) s(i, j) = s(j, i) = u(rng);
  }
  return s;
}

double brute_force_min(const Matrix& sim, std::size_t m, std::vector<std::size_t>* best = nullptr) {
  const auto n = static_cast<std::size_t>(sim.rows());
  std::vector<char> pick(n, 0);
  std::fill(pick.begin(), pick.begin() + static_cast<long>(m), 1);
  double lo = std::numeric_limits<double>::infinity();
  do {
    std::vector<std::size_t> sub;
    for (std::size_t i = 0; i < n; ++i) {
      if (pick[i]) sub.push_back(i);
    }
    double v = subset_objective(sim, sub);
    if (v < lo) {
      lo = v;
      if (best) *best = sub;
    }
  } while (std::prev_permutation(pick.begin(), pick.end()));
  return lo;
}

RetrievalReport eval(const Matrix& t, const Matrix& m, const Matrix& sim, ProtocolKind k,
                     Direction d = Direction::TextToMotion) {
  ProtocolConfig pc;
  pc.kind = k;
  pc.subset_size = std::min<std::size_t>(pc.subset_size, static_cast<std::size_t>(t.rows()));
  return evaluate(t, m, sim, pc, d);
}

}  // namespace

TEST_SUITE("retrieval") {

TEST_CASE("build_index normalizes rows and names zero rows") {
  Matrix e(2, 2);
  e << 0.6, 0.8, 2, 0;
  auto g = toy_gallery(e);
  CHECK(g.embeddings(0, 0) == doctest::Approx(0.6));
  CHECK(g.embeddings(1, 0) == 1.0);
  e.row(1).setZero();
  try {
    toy_gallery(e);
    FAIL("expected an error");
  } catch (const Error& err) {
    CHECK(std::string(err.what()).find("m101") != std::string::npos);
  }
}

TEST_CASE("rank examples") {
  Matrix e = random_unit_rows(6, 4, 3);
  auto g = toy_gallery(e);
  auto hits = rank(g.embeddings.row(4).transpose(), g);
  CHECK(hits.front().index == 4);
  CHECK(hits.front().score == doctest::Approx(1.0));
  CHECK(hits.size() == 6);
  CHECK(rank(g.embeddings.row(4).transpose(), g, 100).size() == 6);
  CHECK(rank(g.embeddings.row(4).transpose(), g, 2).size() == 2);

  // Orthogonal query: all scores 0, order falls back to ids.
  Matrix flat(3, 3);
  flat << 1, 0, 0, 0, 1, 0, 1, 1, 0;
  auto fg = toy_gallery(flat);
  Vector q = Vector::Unit(3, 2);
  auto fh = rank(q, fg);
  for (std::size_t r = 0; r < 3; ++r) {
    CHECK(fh[r].score == 0.0);
    CHECK(fh[r].index == r);
  }

  // Hand-built angles: 10°, 50° and 170° away from the query.
  Matrix ang(3, 2);
  for (int i = 0; i < 3; ++i) {
    const double a = std::vector<double>{170, 10, 50}[static_cast<std::size_t>(i)] * M_PI / 180.0;
    ang(i, 0) = std::cos(a);
    ang(i, 1) = std::sin(a);
  }
  auto ah = rank(Vector::Unit(2, 0), toy_gallery(ang));
  CHECK(ah[0].index == 1);
  CHECK(ah[1].index == 2);
  CHECK(ah[2].index == 0);

  Gallery empty;
  CHECK_THROWS(rank(Vector::Ones(2), empty));
}

TEST_CASE("rank is invariant to positive query scaling") {
  auto g = toy_gallery(random_matrix(20, 5, 7));
  Vector q = random_matrix(5, 1, 8);
  auto a = rank(q, g), b = rank(3.7 * q, g);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].index == b[i].index);
}

TEST_CASE("index save/load keeps every rank") {
  auto g = toy_gallery(random_matrix(15, 6, 9));
  TempDir dir("idx");
  g.save(dir.path(), {{"split", "test"}});
  nlohmann::json extra;
  auto back = Gallery::load(dir.path(), &extra);
  CHECK(extra["split"] == "test");
  CHECK(back.ids == g.ids);
  CHECK(back.texts == g.texts);
  for (std::uint64_t s = 0; s < 5; ++s) {
    Vector q = random_matrix(6, 1, 100 + s);
    auto a = rank(q, g), b = rank(q, back);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].id == b[i].id);
  }
}

TEST_CASE("recall and median rank examples") {
  std::vector<int> ones{1, 1, 1};
  CHECK(recall_at_k(ones, 1) == 100.0);
  std::vector<int> r{1, 3, 10, 40};
  CHECK(recall_at_k(r, 3) == 50.0);
  CHECK(recall_at_k(r, 40) == 100.0);
  CHECK(median_rank(ones) == 1.0);
  std::vector<int> four{1, 2, 3, 4};
  CHECK(median_rank(four) == 2.5);
}

TEST_CASE("random embeddings: MedR near the middle of a 100-item gallery") {
  double total = 0.0;
  for (std::uint64_t s = 0; s < 20; ++s) {
    auto rep = eval(random_matrix(100, 16, s), random_matrix(100, 16, 1000 + s), Matrix(), ProtocolKind::All);
    total += rep.median_rank;
  }
  CHECK(std::abs(total / 20 - 50.5) <= 10.0);
}

TEST_CASE("report invariants") {
  Matrix t = random_matrix(40, 8, 1), m = t + 0.8 * random_matrix(40, 8, 2);
  auto rep = eval(t, m, Matrix(), ProtocolKind::All);
  double prev = 0.0;
  for (int k : kRecallKs) {
    CHECK(rep.r(k) >= prev);
    prev = rep.r(k);
  }
  CHECK(recall_at_k(rep.ranks, 40) == 100.0);
  CHECK(rep.median_rank >= 1.0);
  CHECK(rep.median_rank <= 40.0);
  for (int r : rep.ranks) CHECK((r >= 1 && r <= 40));
}

TEST_CASE("perfect model") {
  Matrix e = random_matrix(30, 6, 4);
  auto rep = eval(e, e, Matrix(), ProtocolKind::All);
  CHECK(rep.r(1) == 100.0);
  CHECK(rep.median_rank == 1.0);
}

TEST_CASE("swapping directions on a symmetric toy gallery gives identical reports") {
  Matrix e = random_matrix(25, 5, 5);
  auto a = eval(e, e, Matrix(), ProtocolKind::All, Direction::TextToMotion);
  auto b = eval(e, e, Matrix(), ProtocolKind::All, Direction::MotionToText);
  CHECK(a.ranks == b.ranks);
  CHECK(a.recall == b.recall);
  CHECK(a.median_rank == b.median_rank);
}

TEST_CASE("protocol (b) dominates (a) pointwise") {
  for (std::uint64_t s = 0; s < 10; ++s) {
    Matrix t = random_matrix(50, 6, s), m = t + random_matrix(50, 6, s + 50);
    // Sentence similarities with planted near-duplicates.
    Matrix sent = random_matrix(50, 4, s + 99);
    for (int i = 0; i < 10; ++i) sent.row(2 * i + 1) = sent.row(2 * i) * 1.01;
    Matrix sim = data::text_similarity_matrix(sent);
    for (auto dir : {Direction::TextToMotion, Direction::MotionToText}) {
      auto a = eval(t, m, sim, ProtocolKind::All, dir);
      auto b = eval(t, m, sim, ProtocolKind::AllWithThreshold, dir);
      for (std::size_t q = 0; q < a.ranks.size(); ++q) CHECK(b.ranks[q] <= a.ranks[q]);
      for (int k : kRecallKs) CHECK(b.r(k) >= a.r(k));
      CHECK(b.median_rank <= a.median_rank);
    }
  }
}

TEST_CASE("protocol (b) accepts the best-ranked similar item") {
  Matrix scores(2, 3);
  scores << 0.1, 0.9, 0.5, 0.2, 0.3, 0.8;
  Matrix accept = Matrix::Identity(2, 3);
  accept(0, 2) = 0.97;
  auto ranks = query_ranks(scores, &accept, 0.95);
  CHECK(ranks[0] == 2);  // item 2 at rank 2 beats the paired item at rank 3
  CHECK(ranks[1] == 2);
  auto plain = query_ranks(scores);
  CHECK(plain[0] == 3);
}

TEST_CASE("protocol (c) evaluates (a) on the dissimilar subset") {
  Matrix t = random_matrix(30, 6, 1), m = t + random_matrix(30, 6, 2);
  Matrix sim = random_sim(30, 3);
  ProtocolConfig pc;
  pc.kind = ProtocolKind::DissimilarSubset;
  pc.subset_size = 10;
  auto rep = evaluate(t, m, sim, pc, Direction::TextToMotion);
  CHECK(rep.gallery_size == 10);
  auto sub = dissimilar_subset(sim, 10);
  Matrix ts(10, 6), ms(10, 6);
  for (std::size_t i = 0; i < 10; ++i) {
    ts.row(static_cast<Eigen::Index>(i)) = t.row(static_cast<Eigen::Index>(sub[i]));
    ms.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(sub[i]));
  }
  CHECK(rep.ranks == eval(ts, ms, Matrix(), ProtocolKind::All).ranks);
  pc.subset_size = 31;
  CHECK_THROWS_AS(evaluate(t, m, sim, pc, Direction::TextToMotion), ConfigError);
}

TEST_CASE("protocol (d) on random embeddings: MedR near 16.5 for 32-item batches") {
  ProtocolConfig pc;
  pc.kind = ProtocolKind::SmallBatches;
  pc.batch_size = 32;
  pc.seed = 3;
  auto rep = evaluate(random_matrix(640, 16, 1), random_matrix(640, 16, 2), Matrix(), pc,
                      Direction::TextToMotion);
  CHECK(rep.batches == 20);
  CHECK(rep.gallery_size == 32);
  CHECK(rep.median_rank >= 14.0);
  CHECK(rep.median_rank <= 19.0);
  // Remainders are dropped.
  auto odd = evaluate(random_matrix(70, 4, 1), random_matrix(70, 4, 2), Matrix(), pc, Direction::TextToMotion);
  CHECK(odd.batches == 2);
  CHECK(odd.ranks.size() == 64);
}

TEST_CASE("dissimilar_subset matches brute force") {
  SUBCASE("m = n returns everything") {
    Matrix sim = random_sim(7, 1);
    auto all = dissimilar_subset(sim, 7);
    CHECK(all.size() == 7);
    std::vector<std::size_t> idx(7);
    std::iota(idx.begin(), idx.end(), 0);
    CHECK(subset_objective(sim, all) == doctest::Approx(subset_objective(sim, idx)));
  }
  SUBCASE("n = 5, m = 2 is the least similar pair") {
    for (std::uint64_t s = 0; s < 50; ++s) {
      Matrix sim = random_sim(5, s);
      std::vector<std::size_t> best;
      brute_force_min(sim, 2, &best);
      CHECK(dissimilar_subset(sim, 2) == best);
    }
  }
  SUBCASE("n = 12, m = 6 within 5% of the optimum on 100 matrices") {
    for (std::uint64_t s = 0; s < 100; ++s) {
      Matrix sim = random_sim(12, 1000 + s);
      const double opt = brute_force_min(sim, 6);
      const double got = subset_objective(sim, dissimilar_subset(sim, 6));
      CHECK(got <= opt * 1.05 + 1e-12);
    }
  }
}

TEST_CASE("dissimilar_subset local search never increases the objective") {
  for (std::uint64_t s = 0; s < 20; ++s) {
    Matrix sim = random_sim(40, 500 + s);
    std::vector<double> trace;
    auto sub = dissimilar_subset(sim, 12, &trace);
    REQUIRE(!trace.empty());
    for (std::size_t i = 1; i < trace.size(); ++i) CHECK(trace[i] <= trace[i - 1]);
    CHECK(trace.back() == doctest::Approx(subset_objective(sim, sub)).epsilon(1e-9));
  }
}

TEST_CASE("dissimilar_subset is invariant to relabeling") {
  for (std::uint64_t s = 0; s < 20; ++s) {
    Matrix sim = random_sim(20, 700 + s);
    std::vector<std::size_t> p(20);
    std::iota(p.begin(), p.end(), 0);
    std::mt19937_64 rng(s);
    std::shuffle(p.begin(), p.end(), rng);
    Matrix perm(20, 20);
    for (Eigen::Index i = 0; i < 20; ++i) {
      for (Eigen::Index j = 0; j < 20; ++j) {
        perm(i, j) = sim(static_cast<Eigen::Index>(p[static_cast<std::size_t>(i)]),
                         static_cast<Eigen::Index>(p[static_cast<std::size_t>(j)]));
      }
    }
    auto a = dissimilar_subset(sim, 7);
    std::vector<std::size_t> b;
    for (auto i : dissimilar_subset(perm, 7)) b.push_back(p[i]);
    std::sort(b.begin(), b.end());
    // Continuous random similarities make ties (and hence label dependence) vanishingly rare.
    CHECK(a == b);
  }
}

TEST_CASE("protocol names") {
  CHECK(parse_protocol("b") == ProtocolKind::AllWithThreshold);
  CHECK(parse_protocol("dissimilar_subset") == ProtocolKind::DissimilarSubset);
  CHECK_THROWS_AS(parse_protocol("e"), ConfigError);
  CHECK(parse_direction("m2t") == Direction::MotionToText);
  CHECK_THROWS_AS(parse_direction("x"), ConfigError);
}

}  // TEST_SUITE
