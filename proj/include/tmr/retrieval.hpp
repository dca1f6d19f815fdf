// Copyright (c) 2026 The TMR-desk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Exact cosine search over an embedding gallery, recall/median-rank metrics
// and the four evaluation protocols:
//   (a) all          – full gallery, only the paired item is correct
//   (b) threshold    – full gallery, any item whose text is similar enough
//                      to the query text counts as correct
//   (c) dissimilar   – a maximally dissimilar subset of the gallery
//   (d) batches      – seeded disjoint small galleries, metrics averaged

#pragma once

#include "tmr/dataio.hpp"
#include "tmr/model.hpp"
#include "tmr/tensor.hpp"

#include "json.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace tmr::retrieval {

inline constexpr std::array<int, 5> kRecallKs = {1, 2, 3, 5, 10};

struct Gallery {
  std::vector<std::string> ids;
  Matrix embeddings;  // n × d, unit rows
  std::vector<std::string> texts;
  Matrix sent_emb;  // n × ds (may have zero columns)

  std::size_t size() const { return ids.size(); }
  int dim() const { return static_cast<int>(embeddings.cols()); }

  /// index.json + index.bin in dir.
  void save(const std::filesystem::path& dir, const nlohmann::json& extra = {}) const;
  static Gallery load(const std::filesystem::path& dir, nlohmann::json* extra = nullptr);
};

/// Normalizes rows; throws Error naming the id of a zero-norm row.
Gallery build_index(Matrix embeddings, std::vector<std::string> ids, std::vector<std::string> texts,
                    Matrix sent_emb);

struct Hit {
  std::size_t index = 0;
  std::string id;
  double score = 0.0;
};

/// Embeds the motions of the given dataset items; each entry keeps the
/// item's first text and its sentence embedding.
Gallery index_items(const model::TmrModel& m, const data::Dataset& ds, std::span<const std::size_t> items);

/// Gallery entries by descending cosine score, ties by ascending id.
/// At most k hits (k larger than the gallery is clamped).
std::vector<Hit> rank(const Vector& query, const Gallery& gallery,
                      std::size_t k = static_cast<std::size_t>(-1));

/// Percentage of ranks ≤ k.
double recall_at_k(std::span<const int> ranks, int k);
/// Median with midpoint averaging for even counts.
double median_rank(std::span<const int> ranks);

enum class ProtocolKind { All, AllWithThreshold, DissimilarSubset, SmallBatches };
enum class Direction { TextToMotion, MotionToText };

std::string protocol_letter(ProtocolKind k);
std::string protocol_name(ProtocolKind k);
ProtocolKind parse_protocol(const std::string& s);
std::string direction_name(Direction d);
Direction parse_direction(const std::string& s);

struct ProtocolConfig {
  ProtocolKind kind = ProtocolKind::All;
  double correctness_threshold = 0.95;
  std::size_t subset_size = 100;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
};

struct RetrievalReport {
  Direction direction = Direction::TextToMotion;
  ProtocolConfig protocol;
  std::vector<int> ranks;
  std::map<int, double> recall;
  double median_rank = 0.0;
  std::size_t gallery_size = 0;
  std::size_t batches = 1;

  double r(int k) const { return recall.at(k); }
  nlohmann::json to_json() const;
};

/// 1-based rank per query. scores is queries × gallery with query i paired
/// to gallery item i. When `accept` is given, the rank is that of the
/// best-ranked item j with accept(i, j) ≥ threshold. Ties go to the lower index.
std::vector<int> query_ranks(const Matrix& scores, const Matrix* accept = nullptr,
                             double threshold = 1.0);

/// Embeddings and sentence similarities of one split, first text per item.
struct SplitEmbeddings {
  std::vector<std::size_t> items;
  Matrix text;    // μ^T rows
  Matrix motion;  // μ^M rows
  Matrix text_sim;
};

SplitEmbeddings embed_split(const model::TmrModel& m, const data::Dataset& ds, data::Split split);

/// Runs a protocol on paired text/motion embeddings (row i of each paired).
RetrievalReport evaluate(const Matrix& text_emb, const Matrix& motion_emb, const Matrix& text_sim,
                         const ProtocolConfig& cfg, Direction dir);
RetrievalReport evaluate(const SplitEmbeddings& e, const ProtocolConfig& cfg, Direction dir);

/// Heuristic for the subset of size m minimizing the sum of pairwise
/// similarities: greedy growth followed by best-improvement single swaps,
/// restarted from the least similar pair and from every single item; the
/// best result is kept. Sorted indices. `trace` receives the objective of the
/// kept run after the greedy phase and after every swap.
std::vector<std::size_t> dissimilar_subset(const Matrix& sim, std::size_t m,
                                           std::vector<double>* trace = nullptr);
/// Σ_{i<j in subset} sim_ij.
double subset_objective(const Matrix& sim, std::span<const std::size_t> subset);

}  // namespace tmr::retrieval
