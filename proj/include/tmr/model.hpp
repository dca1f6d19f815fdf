// Copyright (c) 2026 The TMR-desk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dual probabilistic sequence encoders (text, motion) and the
// non-autoregressive motion decoder.
//
// Both encoders prepend two learned distribution tokens to the embedded
// input, add sinusoidal positions and run a pre-norm Transformer stack; the
// final states of the two tokens are projected to μ and log σ². The decoder
// adds a projection of z to every positional-encoding row of the requested
// duration and maps the mixed sequence to motion features.

#pragma once

#include "tmr/autodiff.hpp"
#include "tmr/dataio.hpp"

#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace tmr::model {

struct LatentDistribution {
  Vector mu;
  Vector log_var;
};

struct StackConfig {
  int width = 64;
  int depth = 2;
  int heads = 4;
  int ff_width = 128;
  int max_length = 1024;
};

enum class TextInput { Tokens, Features };

struct ModelConfig {
  int latent_dim = 256;
  int feature_dim = 0;
  TextInput text_input = TextInput::Tokens;
  int text_feat_dim = 0;  // Features path only
  StackConfig text;
  StackConfig motion;
  StackConfig decoder;
  double ln_eps = 1e-5;

  void validate() const;
};

nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

/// One text for the encoder: token ids (built-in path) or a tokens × dt
/// feature matrix (external featurizer path).
struct TextTokens {
  std::vector<int> ids;
  Matrix feats;

  std::size_t length(TextInput mode) const {
    return mode == TextInput::Tokens ? ids.size() : static_cast<std::size_t>(feats.rows());
  }
};

/// PE[t,2i] = sin(t / 10000^(2i/width)), PE[t,2i+1] = cos(same angle).
Matrix positional_encoding(int length, int width);

/// z = μ + exp(log σ² / 2) ⊙ ε.
Vector sample_latent(const LatentDistribution& dist, const Vector& eps);
ad::Var sample_latent(ad::Var mu, ad::Var log_var, const Matrix& eps);

inline const Vector& retrieval_embedding(const LatentDistribution& dist) { return dist.mu; }

class TmrModel {
 public:
  /// Batch encoder output: one row per input sequence, [B × d] each.
  struct Encoded {
    ad::Var mu;
    ad::Var log_var;
  };

  TmrModel(ModelConfig cfg, data::Vocabulary vocab, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  const data::Vocabulary& vocab() const { return vocab_; }
  std::uint64_t seed() const { return seed_; }
  ad::ParameterStore& params() { return params_; }
  const ad::ParameterStore& params() const { return params_; }

  // Differentiable batch passes; gradients flow into params().
  Encoded encode_text(ad::Tape& tape, std::span<const TextTokens> batch);
  Encoded encode_motion(ad::Tape& tape, std::span<const Matrix> batch);
  /// z is [B × d]; returns the stacked [Σ durations × feature_dim] output.
  ad::Var decode(ad::Tape& tape, ad::Var z, std::span<const int> durations);

  // Inference on the current weights.
  TextTokens tokenize(std::string_view text) const;
  TextTokens text_input(const data::TextEntry& entry) const;
  LatentDistribution encode_text(const TextTokens& text) const;
  LatentDistribution encode_text(std::string_view text) const;
  LatentDistribution encode_motion(const Matrix& motion) const;
  Matrix decode(const Vector& z, int duration) const;
  /// μ of every input, one row each, computed in chunks.
  Matrix embed_texts(std::span<const TextTokens> texts) const;
  Matrix embed_motions(std::span<const Matrix> motions) const;

  /// Writes manifest.json and weights.bin into dir.
  void save(const std::filesystem::path& dir, const nlohmann::json& training = {}) const;
  static TmrModel load(const std::filesystem::path& dir, nlohmann::json* training = nullptr);

 private:
  using Binder = std::function<ad::Var(const std::string&)>;

  Binder trainable(ad::Tape& tape);
  Binder frozen(ad::Tape& tape) const;

  Encoded encode_text_impl(ad::Tape& tape, const Binder& p, std::span<const TextTokens> batch) const;
  Encoded encode_motion_impl(ad::Tape& tape, const Binder& p, std::span<const Matrix> batch) const;
  Encoded encode_stacked(ad::Tape& tape, const Binder& p, const std::string& prefix,
                         const StackConfig& sc, ad::Var lifted, std::span<const int> lengths) const;
  ad::Var decode_impl(ad::Tape& tape, const Binder& p, ad::Var z,
                      std::span<const int> durations) const;
  ad::Var stack(ad::Tape& tape, const Binder& p, const std::string& prefix, const StackConfig& sc,
                ad::Var x, std::span<const int> lengths) const;

  void init_params();

  ModelConfig cfg_;
  data::Vocabulary vocab_;
  std::uint64_t seed_;
  ad::ParameterStore params_;
};

}  // namespace tmr::model
