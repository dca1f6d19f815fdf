// Copyright (c) 2026 The TMR-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "tmr/retrieval.hpp"

#include "tmr/matrix_io.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <random>
#include <set>

namespace tmr::retrieval {

namespace fs = std::filesystem;
using nlohmann::json;

// ---- gallery ---------------------------------------------------------------------

Gallery build_index(Matrix embeddings, std::vector<std::string> ids, std::vector<std::string> texts,
                    Matrix sent_emb) {
  const auto n = static_cast<std::size_t>(embeddings.rows());
  if (ids.size() != n || texts.size() != n) {
    throw Error("build_index: " + std::to_string(n) + " embeddings but " +
                std::to_string(ids.size()) + " ids and " + std::to_string(texts.size()) + " texts");
  }
  if (sent_emb.rows() != embeddings.rows()) {
    if (sent_emb.size() != 0) throw Error("build_index: sentence embeddings are not aligned");
    sent_emb.resize(embeddings.rows(), 0);
  }
  if (std::set<std::string>(ids.begin(), ids.end()).size() != n) throw Error("build_index: ids are not unique");
  for (Eigen::Index i = 0; i < embeddings.rows(); ++i) {
    double norm = embeddings.row(i).norm();
    if (!(norm > 0.0) || !std::isfinite(norm)) {
      throw Error("build_index: zero-norm embedding for '" + ids[static_cast<std::size_t>(i)] + "'");
    }
    embeddings.row(i) /= norm;
  }
  // Stored as f32, so keep the in-memory copy identical to what a reload gives.
  Gallery g{std::move(ids), io::round_to_f32(embeddings), std::move(texts), io::round_to_f32(sent_emb)};
  return g;
}

void Gallery::save(const fs::path& dir, const json& extra) const {
  fs::create_directories(dir);
  json j;
  j["format"] = "tmr-index";
  j["count"] = size();
  j["d"] = dim();
  j["ids"] = ids;
  j["texts"] = texts;
  j["extra"] = extra.is_null() ? json::object() : extra;
  io::write_text_file(dir / "index.json", j.dump(2) + "\n");
  io::save_matrices(dir / "index.bin", {embeddings, sent_emb});
}

Gallery Gallery::load(const fs::path& dir, json* extra) {
  const fs::path jp = dir / "index.json";
  json j;
  try {
    j = json::parse(io::read_text_file(jp));
  } catch (const json::exception& e) {
    throw FormatError(jp.string() + ": " + e.what());
  }
  Gallery g;
  try {
    g.ids = j.at("ids").get<std::vector<std::string>>();
    g.texts = j.at("texts").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw FormatError(jp.string() + ": " + e.what());
  }
  auto ms = io::load_matrices(dir / "index.bin");
  if (ms.size() != 2) throw FormatError((dir / "index.bin").string() + ": expected 2 matrices");
  g.embeddings = std::move(ms[0]);
  g.sent_emb = std::move(ms[1]);
  const auto n = static_cast<Eigen::Index>(g.ids.size());
  if (g.embeddings.rows() != n || g.sent_emb.rows() != n || static_cast<Eigen::Index>(g.texts.size()) != n ||
      j.value("count", -1) != n || j.value("d", -1) != g.embeddings.cols()) {
    throw FormatError(dir.string() + ": index.json and index.bin disagree");
  }
  if (extra) *extra = j.value("extra", json::object());
  return g;
}

Gallery index_items(const model::TmrModel& m, const data::Dataset& ds, std::span<const std::size_t> items) {
  if (items.empty()) throw Error("index_items: no items");
  std::vector<Matrix> motions;
  std::vector<std::string> ids, texts;
  Matrix sent(static_cast<Eigen::Index>(items.size()), ds.sent_emb_dim);
  for (std::size_t r = 0; r < items.size(); ++r) {
    const auto& it = ds.items.at(items[r]);
    motions.push_back(it.motion.data);
    ids.push_back(it.id);
    texts.push_back(it.texts.front().text);
    sent.row(static_cast<Eigen::Index>(r)) = it.texts.front().sent_emb.transpose();
  }
  return build_index(m.embed_motions(motions), std::move(ids), std::move(texts), std::move(sent));
}

std::vector<Hit> rank(const Vector& query, const Gallery& gallery, std::size_t k) {
  if (gallery.size() == 0) throw Error("rank: empty gallery");
  if (query.size() != gallery.dim()) throw ShapeError("rank: query dimension does not match gallery");
  const double qn = query.norm();
  if (!(qn > 0.0)) throw Error("rank: zero query vector");
  Vector scores = gallery.embeddings * (query / qn);
  std::vector<std::size_t> order(gallery.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const double sa = scores(static_cast<Eigen::Index>(a)), sb = scores(static_cast<Eigen::Index>(b));
    if (sa != sb) return sa > sb;
    return gallery.ids[a] < gallery.ids[b];
  });
  k = std::min(k, order.size());
  std::vector<Hit> hits;
  hits.reserve(k);
  for (std::size_t r = 0; r < k; ++r) {
    hits.push_back({order[r], gallery.ids[order[r]], scores(static_cast<Eigen::Index>(order[r]))});
  }
  return hits;
}

// ---- metrics ------------------------------------------------------------------------

double recall_at_k(std::span<const int> ranks, int k) {
  if (ranks.empty()) return 0.0;
  auto hit = std::count_if(ranks.begin(), ranks.end(), [k](int r) { return r <= k; });
  return 100.0 * static_cast<double>(hit) / static_cast<double>(ranks.size());
}

double median_rank(std::span<const int> ranks) {
  if (ranks.empty()) throw Error("median_rank: no ranks");
  std::vector<int> v(ranks.begin(), ranks.end());
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  if (n % 2 == 1) return v[n / 2];
  return 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// ---- names ------------------------------------------------------------------------------

std::string protocol_letter(ProtocolKind k) {
  switch (k) {
    case ProtocolKind::All: return "a";
    case ProtocolKind::AllWithThreshold: return "b";
    case ProtocolKind::DissimilarSubset: return "c";
    case ProtocolKind::SmallBatches: return "d";
  }
  return "a";
}

std::string protocol_name(ProtocolKind k) {
  switch (k) {
    case ProtocolKind::All: return "all";
    case ProtocolKind::AllWithThreshold: return "all_with_threshold";
    case ProtocolKind::DissimilarSubset: return "dissimilar_subset";
    case ProtocolKind::SmallBatches: return "small_batches";
  }
  return "all";
}

ProtocolKind parse_protocol(const std::string& s) {
  for (auto k : {ProtocolKind::All, ProtocolKind::AllWithThreshold, ProtocolKind::DissimilarSubset,
                 ProtocolKind::SmallBatches}) {
    if (s == protocol_letter(k) || s == protocol_name(k)) return k;
  }
  throw ConfigError("unknown protocol '" + s + "' (expected a, b, c or d)");
}

std::string direction_name(Direction d) { return d == Direction::TextToMotion ? "t2m" : "m2t"; }

Direction parse_direction(const std::string& s) {
  if (s == "t2m") return Direction::TextToMotion;
  if (s == "m2t") return Direction::MotionToText;
  throw ConfigError("unknown direction '" + s + "' (expected t2m or m2t)");
}

json ProtocolConfig::to_json() const {
  return {{"kind", protocol_letter(kind)},
          {"name", protocol_name(kind)},
          {"correctness_threshold", correctness_threshold},
          {"subset_size", subset_size},
          {"batch_size", batch_size},
          {"seed", seed}};
}

json RetrievalReport::to_json() const {
  json rec = json::object();
  for (const auto& [k, v] : recall) rec["R@" + std::to_string(k)] = v;
  return {{"direction", direction_name(direction)},
          {"protocol", protocol.to_json()},
          {"gallery_size", gallery_size},
          {"queries", ranks.size()},
          {"batches", batches},
          {"recall", rec},
          {"medr", median_rank},
          {"ranks", ranks}};
}

// ---- evaluation ----------------------------------------------------------------------------

std::vector<int> query_ranks(const Matrix& scores, const Matrix* accept, double threshold) {
  const Eigen::Index n = scores.rows(), g = scores.cols();
  std::vector<int> ranks(static_cast<std::size_t>(n));
  std::vector<Eigen::Index> order(static_cast<std::size_t>(g));
  for (Eigen::Index i = 0; i < n; ++i) {
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
      if (scores(i, a) != scores(i, b)) return scores(i, a) > scores(i, b);
      return a < b;
    });
    int r = 0;
    for (std::size_t pos = 0; pos < order.size(); ++pos) {
      const Eigen::Index j = order[pos];
      const bool ok = j == i || (accept != nullptr && (*accept)(i, j) >= threshold);
      if (ok) {
        r = static_cast<int>(pos) + 1;
        break;
      }
    }
    ranks[static_cast<std::size_t>(i)] = r;
  }
  return ranks;
}

namespace {

Matrix normalized(const Matrix& m) {
  Vector n = m.rowwise().norm().cwiseMax(1e-12);
  return m.array().colwise() / n.array();
}

Matrix select(const Matrix& m, std::span<const std::size_t> rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) out.row(static_cast<Eigen::Index>(r)) = m.row(static_cast<Eigen::Index>(rows[r]));
  return out;
}

void fill_metrics(RetrievalReport& r) {
  for (int k : kRecallKs) r.recall[k] = recall_at_k(r.ranks, k);
  r.median_rank = median_rank(r.ranks);
}

std::vector<int> direction_ranks(const Matrix& text, const Matrix& motion, const Matrix* accept,
                                 double threshold, Direction dir) {
  Matrix scores = dir == Direction::TextToMotion ? Matrix(text * motion.transpose())
                                                 : Matrix(motion * text.transpose());
  return query_ranks(scores, accept, threshold);
}

}  // namespace

RetrievalReport evaluate(const Matrix& text_emb, const Matrix& motion_emb, const Matrix& text_sim,
                         const ProtocolConfig& cfg, Direction dir) {
  const auto n = static_cast<std::size_t>(text_emb.rows());
  if (motion_emb.rows() != text_emb.rows() || motion_emb.cols() != text_emb.cols()) {
    throw ShapeError("evaluate: text and motion embeddings are not paired");
  }
  if (n == 0) throw Error("evaluate: empty split");
  const bool needs_sim = cfg.kind == ProtocolKind::AllWithThreshold || cfg.kind == ProtocolKind::DissimilarSubset;
  if (needs_sim && (text_sim.rows() != text_emb.rows() || text_sim.cols() != text_emb.rows())) {
    throw ShapeError("evaluate: text similarity matrix does not match the split");
  }
  const Matrix text = normalized(text_emb);
  const Matrix motion = normalized(motion_emb);

  if (!(cfg.correctness_threshold >= 0.0 && cfg.correctness_threshold <= 1.0)) {
    throw ConfigError("correctness threshold must lie in [0, 1]");
  }
  if (cfg.kind == ProtocolKind::DissimilarSubset && cfg.subset_size == 0) {
    throw ConfigError("protocol (c): subset size must be positive");
  }

  RetrievalReport rep;
  rep.direction = dir;
  rep.protocol = cfg;
  switch (cfg.kind) {
    case ProtocolKind::All:
      rep.ranks = direction_ranks(text, motion, nullptr, 1.0, dir);
      rep.gallery_size = n;
      fill_metrics(rep);
      break;
    case ProtocolKind::AllWithThreshold:
      rep.ranks = direction_ranks(text, motion, &text_sim, cfg.correctness_threshold, dir);
      rep.gallery_size = n;
      fill_metrics(rep);
      break;
    case ProtocolKind::DissimilarSubset: {
      if (cfg.subset_size > n) {
        throw ConfigError("protocol (c): subset size " + std::to_string(cfg.subset_size) +
                          " exceeds gallery size " + std::to_string(n));
      }
      auto subset = dissimilar_subset(text_sim, cfg.subset_size);
      rep.ranks = direction_ranks(select(text, subset), select(motion, subset), nullptr, 1.0, dir);
      rep.gallery_size = subset.size();
      fill_metrics(rep);
      break;
    }
    case ProtocolKind::SmallBatches: {
      const std::size_t b = cfg.batch_size;
      if (b == 0 || n < b) {
        throw ConfigError("protocol (d): split of " + std::to_string(n) + " items has no full batch of " +
                          std::to_string(b));
      }
      std::vector<std::size_t> perm(n);
      std::iota(perm.begin(), perm.end(), 0);
      std::mt19937_64 rng(cfg.seed);
      std::shuffle(perm.begin(), perm.end(), rng);
      const std::size_t batches = n / b;
      rep.batches = batches;
      rep.gallery_size = b;
      for (int k : kRecallKs) rep.recall[k] = 0.0;
      rep.median_rank = 0.0;
      for (std::size_t bi = 0; bi < batches; ++bi) {
        std::span<const std::size_t> idx(perm.data() + bi * b, b);
        auto ranks = direction_ranks(select(text, idx), select(motion, idx), nullptr, 1.0, dir);
        for (int k : kRecallKs) rep.recall[k] += recall_at_k(ranks, k) / static_cast<double>(batches);
        rep.median_rank += median_rank(ranks) / static_cast<double>(batches);
        rep.ranks.insert(rep.ranks.end(), ranks.begin(), ranks.end());
      }
      break;
    }
  }
  return rep;
}

RetrievalReport evaluate(const SplitEmbeddings& e, const ProtocolConfig& cfg, Direction dir) {
  return evaluate(e.text, e.motion, e.text_sim, cfg, dir);
}

SplitEmbeddings embed_split(const model::TmrModel& m, const data::Dataset& ds, data::Split split) {
  SplitEmbeddings e;
  e.items = ds.indices(split);
  if (e.items.empty()) throw Error("split '" + std::string(data::split_name(split)) + "' is empty");
  std::vector<model::TextTokens> texts;
  std::vector<Matrix> motions;
  for (auto i : e.items) {
    texts.push_back(m.text_input(ds.items[i].texts.front()));
    motions.push_back(ds.items[i].motion.data);
  }
  e.text = m.embed_texts(texts);
  e.motion = m.embed_motions(motions);
  e.text_sim = ds.first_text_similarity(e.items);
  return e;
}

// ---- dissimilar subset --------------------------------------------------------------------

double subset_objective(const Matrix& sim, std::span<const std::size_t> subset) {
  double s = 0.0;
  for (std::size_t a = 0; a < subset.size(); ++a) {
    for (std::size_t b = a + 1; b < subset.size(); ++b) {
      s += sim(static_cast<Eigen::Index>(subset[a]), static_cast<Eigen::Index>(subset[b]));
    }
  }
  return s;
}

namespace {

struct SubsetSearch {
  std::vector<char> in;
  double objective = 0.0;
  std::vector<double> trace;
};

// Greedy growth from `seeds`, then best-improvement 1-swaps. Each accepted
// swap strictly lowers the objective, so the loop terminates.
SubsetSearch grow_and_swap(const Matrix& sim, std::size_t m, std::span<const std::size_t> seeds) {
  const auto n = static_cast<std::size_t>(sim.rows());
  auto s = [&sim](std::size_t i, std::size_t j) {
    return sim(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
  };
  SubsetSearch r;
  r.in.assign(n, 0);
  // cost[x] = sum over y in subset, y != x, of sim(x, y)
  std::vector<double> cost(n, 0.0);
  auto insert = [&](std::size_t x) {
    r.objective += cost[x];
    r.in[x] = 1;
    for (std::size_t y = 0; y < n; ++y) {
      if (y != x) cost[y] += s(x, y);
    }
  };
  auto remove = [&](std::size_t x) {
    r.in[x] = 0;
    for (std::size_t y = 0; y < n; ++y) {
      if (y != x) cost[y] -= s(x, y);
    }
    r.objective -= cost[x];
  };
  for (std::size_t x : seeds) insert(x);
  for (std::size_t size = seeds.size(); size < m; ++size) {
    std::size_t pick = n;
    for (std::size_t x = 0; x < n; ++x) {
      if (!r.in[x] && (pick == n || cost[x] < cost[pick])) pick = x;
    }
    insert(pick);
  }
  r.trace.push_back(r.objective);

  constexpr double kTol = 1e-12;
  for (std::size_t iter = 0; iter < 100 * n; ++iter) {
    double best_delta = -kTol;
    std::size_t out_i = n, in_j = n;
    for (std::size_t i = 0; i < n; ++i) {
      if (!r.in[i]) continue;
      for (std::size_t j = 0; j < n; ++j) {
        if (r.in[j]) continue;
        const double delta = cost[j] - s(i, j) - cost[i];
        if (delta < best_delta) {
          best_delta = delta;
          out_i = i;
          in_j = j;
        }
      }
    }
    if (out_i == n) break;
    remove(out_i);
    insert(in_j);
    r.trace.push_back(r.objective);
  }
  return r;
}

}  // namespace

std::vector<std::size_t> dissimilar_subset(const Matrix& sim, std::size_t m, std::vector<double>* trace) {
  const auto n = static_cast<std::size_t>(sim.rows());
  if (sim.rows() != sim.cols()) throw ShapeError("dissimilar_subset: matrix must be square");
  if (m > n) throw ConfigError("dissimilar_subset: m exceeds n");
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), 0);
  if (m == n) return all;
  if (m == 0) return {};

  // Restarts: the least similar pair, then every single item. The lowest
  // objective wins; earlier restarts win ties.
  std::vector<std::vector<std::size_t>> starts;
  if (m >= 2) {
    std::size_t bi = 0, bj = 1;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) {
        if (sim(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) <
            sim(static_cast<Eigen::Index>(bi), static_cast<Eigen::Index>(bj))) {
          bi = i;
          bj = j;
        }
      }
    }
    starts.push_back({bi, bj});
  }
  for (std::size_t i = 0; i < n; ++i) starts.push_back({i});

  std::optional<SubsetSearch> best;
  for (const auto& seeds : starts) {
    auto r = grow_and_swap(sim, m, seeds);
    if (!best || r.objective < best->objective - 1e-12) best = std::move(r);
  }
  if (trace) *trace = best->trace;
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < n; ++i) {
    if (best->in[i]) out.push_back(i);
  }
  return out;
}

}  // namespace tmr::retrieval
