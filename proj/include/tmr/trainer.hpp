// Copyright (c) 2026 The TMR-desk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Joint contrastive + synthesis training and the ablation runner.

#pragma once

#include "tmr/dataio.hpp"
#include "tmr/losses.hpp"
#include "tmr/model.hpp"
#include "tmr/retrieval.hpp"

#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace tmr::train {

struct TrainConfig {
  int batch_size = 32;
  double lr = 1e-4;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int epochs = 100;
  std::uint64_t seed = 0;
  bool lr_batch_scaling = false;  // lr ∝ batch_size / 32

  loss::LossWeights loss;
  loss::Contrastive contrastive = loss::Contrastive::InfoNCE;
  double margin = 0.2;
  bool reconstruction = true;  // motion decoder branch and L_R

  model::ModelConfig model;  // feature_dim / text_feat_dim filled from the dataset

  int eval_every = 5;        // epochs between validation passes (0: never)
  bool select_best = true;   // keep the weights with the best val (b) R@10

  double effective_lr() const;
  void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);
/// Missing keys keep their defaults; `base` supplies them.
TrainConfig train_config_from_json(const nlohmann::json& j, const TrainConfig& base = {});

/// Decoupled-weight-decay Adam.
class AdamW {
 public:
  AdamW(const ad::ParameterStore& params, double beta1, double beta2, double eps,
        double weight_decay);
  void step(ad::ParameterStore& params, double lr);
  long steps() const { return t_; }

 private:
  double beta1_, beta2_, eps_, wd_;
  long t_ = 0;
  std::vector<Matrix> m_, v_;
};

struct StepLog {
  int epoch = 0;
  long step = 0;
  double recon = 0.0;
  double kl = 0.0;
  double embed = 0.0;
  double contrastive = 0.0;
  double total = 0.0;
  double filtered_pct = 0.0;

  nlohmann::json to_json() const;
};

struct TrainResult {
  model::TmrModel model;
  std::vector<StepLog> log;
  int best_epoch = 0;
  double best_val = -1.0;   // val (b) R@10 of the returned weights, -1 if never evaluated
  bool aborted = false;     // non-finite loss; model holds the last good weights
  std::string abort_reason;

  nlohmann::json metadata(const TrainConfig& cfg) const;
};

using LogSink = std::function<void(const StepLog&)>;

/// One optimization step on a batch of item indices with fixed text choices
/// and noise; exposed for tests. Returns the loss terms before the update.
struct Batch {
  std::vector<std::size_t> items;
  std::vector<std::size_t> text_choice;  // index into items[i].texts
};

struct BatchLoss {
  loss::LossTerms terms;
  double filtered_fraction = 0.0;
};

/// Forward + backward on a batch; gradients accumulate into model.params().
BatchLoss batch_gradient(model::TmrModel& model, const data::Dataset& ds, const Batch& batch,
                         const TrainConfig& cfg, const Matrix& noise_text, const Matrix& noise_motion,
                         ad::Tape& tape);

/// Builds the model for the dataset (vocabulary from the train split).
model::TmrModel init_model(const data::Dataset& ds, const TrainConfig& cfg);

TrainResult train(const data::Dataset& ds, const TrainConfig& cfg, const LogSink& sink = {});

void write_log(const std::filesystem::path& path, const std::vector<StepLog>& log);

struct AblationRow {
  std::string name;
  nlohmann::json overrides;
  TrainConfig config;
  retrieval::RetrievalReport t2m;
  retrieval::RetrievalReport m2t;
  double seconds = 0.0;

  nlohmann::json to_json() const;
};

struct AblationVariant {
  std::string name;
  nlohmann::json overrides;  // partial TrainConfig JSON
};

/// joint, contrastive_only, margin, no_filter.
std::vector<AblationVariant> default_ablation_grid();

/// Trains one model per variant and evaluates it on `split` with `protocol`
/// (the threshold protocol by default).
std::vector<AblationRow> ablate(const data::Dataset& ds, const TrainConfig& base,
                                const std::vector<AblationVariant>& grid,
                                const retrieval::ProtocolConfig& protocol = {
                                    retrieval::ProtocolKind::AllWithThreshold},
                                data::Split split = data::Split::Test);

}  // namespace tmr::train
