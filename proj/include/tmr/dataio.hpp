// Copyright (c) 2026 The TMR-desk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Paired text–motion datasets: in-memory representation, the on-disk
// directory layout, sentence-similarity utilities and a synthetic generator.

#pragma once

#include "tmr/tensor.hpp"

#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace tmr::data {

enum class Split { Train, Val, Test };

std::string_view split_name(Split s);
Split parse_split(std::string_view name);

struct MotionFeatureSequence {
  Matrix data;                  // frames × feature_dim
  std::optional<Matrix> joints;  // frames × (joint_count·3), xyz per joint

  int frames() const { return static_cast<int>(data.rows()); }
  int dim() const { return static_cast<int>(data.cols()); }
};

struct TextEntry {
  std::string text;
  std::optional<Matrix> token_feats;  // tokens × text_feat_dim (external featurizer)
  Vector sent_emb;                    // unit norm
  std::size_t global_index = 0;       // row in sent_emb.mtx / text_sim.mtx
};

struct Item {
  std::string id;
  Split split = Split::Train;
  MotionFeatureSequence motion;
  std::vector<TextEntry> texts;
};

struct Dataset {
  int feature_dim = 0;
  int joint_count = 0;
  int text_feat_dim = 0;
  int sent_emb_dim = 0;
  double fps = 20.0;
  std::vector<Item> items;
  std::optional<Matrix> text_sim;  // (total texts)², optional precomputed

  std::size_t text_count() const;
  std::vector<std::size_t> indices(Split s) const;
  const Item* find(std::string_view id) const;

  /// Sentence similarity between two texts addressed by global index.
  double text_similarity(std::size_t a, std::size_t b) const;
  /// Similarity between the first texts of the given items (test-time texts).
  Matrix first_text_similarity(std::span<const std::size_t> items) const;

  /// Throws FormatError when an invariant does not hold.
  void validate() const;
};

Dataset load_dataset(const std::filesystem::path& dir);
void save_dataset(const Dataset& ds, const std::filesystem::path& dir);

/// Word-level vocabulary for the built-in text path; id 0 is out-of-vocabulary.
class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> words);

  static Vocabulary build(const Dataset& ds, std::optional<Split> split = Split::Train);
  static std::vector<std::string> tokenize(std::string_view text);

  std::vector<int> encode(std::string_view text) const;
  int id(std::string_view word) const;
  std::size_t size() const { return words_.size() + 1; }
  const std::vector<std::string>& words() const { return words_; }

 private:
  std::vector<std::string> words_;  // sorted; word k has id k + 1
};

struct SyntheticConfig {
  int n_items = 1000;
  int latent_factors = 8;
  int motion_dim = 16;
  int vocab_size = 129;  // 1 + factors · levels · synonyms
  int synonyms = 2;
  int frames_min = 16;
  int frames_max = 32;
  int texts_per_item = 3;  // each item gets 1..texts_per_item texts
  int joint_count = 6;
  double paraphrase_rate = 0.0;
  double noise = 0.05;
  double val_fraction = 0.1;
  double test_fraction = 0.2;
  std::uint64_t seed = 0;

  int levels() const;
  void validate() const;
};

nlohmann::json to_json(const SyntheticConfig& c);
/// Missing keys keep their defaults.
SyntheticConfig synthetic_config_from_json(const nlohmann::json& j);

/// Items share a k-factor latent; motions are noisy factor-dependent
/// sinusoids, texts are factor-quantized codewords with random synonyms and
/// sent_emb is the normalized factor vector. A paraphrase_rate fraction of
/// items copies the factors of another item.
Dataset generate_synthetic(const SyntheticConfig& cfg);

/// Cosine similarities of the given embedding rows; exact ones on the
/// diagonal, symmetric. Throws Error on a zero-norm row.
Matrix text_similarity_matrix(const Matrix& embeddings);

std::uint64_t unique_pair_count(std::uint64_t n);

struct SimilarityStats {
  std::uint64_t n = 0;
  std::uint64_t pairs = 0;
  std::vector<double> thresholds;
  std::vector<std::uint64_t> above;  // pairs i<j with sim > threshold
  std::vector<double> fractions;     // above / pairs
};

SimilarityStats similarity_stats(const Matrix& sim, std::span<const double> thresholds);

/// Largest off-diagonal entry, or -1 for matrices smaller than 2×2.
double max_offdiag(const Matrix& sim);

}  // namespace tmr::data
