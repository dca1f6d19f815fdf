// Copyright (c) 2026 The TMR-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "tmr/trainer.hpp"

#include "tmr/matrix_io.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

namespace tmr::train {

using nlohmann::json;

// ---- config ------------------------------------------------------------------------

double TrainConfig::effective_lr() const {
  return lr_batch_scaling ? lr * static_cast<double>(batch_size) / 32.0 : lr;
}

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(lr > 0.0)) throw ConfigError("lr must be > 0");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("betas must be in [0,1)");
  if (eval_every < 0) throw ConfigError("eval_every must be >= 0");
  if (!reconstruction && contrastive == loss::Contrastive::None) {
    throw ConfigError("at least one of reconstruction and a contrastive loss must be enabled");
  }
  loss.validate();
}

json to_json(const TrainConfig& c) {
  return {{"batch_size", c.batch_size},
          {"lr", c.lr},
          {"weight_decay", c.weight_decay},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"adam_eps", c.adam_eps},
          {"epochs", c.epochs},
          {"seed", c.seed},
          {"lr_batch_scaling", c.lr_batch_scaling},
          {"loss",
           {{"lambda_kl", c.loss.lambda_kl},
            {"lambda_e", c.loss.lambda_e},
            {"lambda_nce", c.loss.lambda_nce},
            {"temperature", c.loss.temperature},
            {"filter_threshold", c.loss.filter_threshold},
            {"smooth_l1_beta", c.loss.smooth_l1_beta}}},
          {"contrastive", loss::contrastive_name(c.contrastive)},
          {"margin", c.margin},
          {"reconstruction", c.reconstruction},
          {"model", model::to_json(c.model)},
          {"eval_every", c.eval_every},
          {"select_best", c.select_best}};
}

TrainConfig train_config_from_json(const json& j, const TrainConfig& base) {
  TrainConfig c = base;
  try {
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr = j.value("lr", c.lr);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.epochs = j.value("epochs", c.epochs);
    c.seed = j.value("seed", c.seed);
    c.lr_batch_scaling = j.value("lr_batch_scaling", c.lr_batch_scaling);
    if (j.contains("loss")) {
      const json& l = j["loss"];
      c.loss.lambda_kl = l.value("lambda_kl", c.loss.lambda_kl);
      c.loss.lambda_e = l.value("lambda_e", c.loss.lambda_e);
      c.loss.lambda_nce = l.value("lambda_nce", c.loss.lambda_nce);
      c.loss.temperature = l.value("temperature", c.loss.temperature);
      c.loss.smooth_l1_beta = l.value("smooth_l1_beta", c.loss.smooth_l1_beta);
      if (l.contains("filter_threshold")) {
        // null disables filtering: cosine similarities never exceed 1.
        c.loss.filter_threshold =
            l["filter_threshold"].is_null() ? 2.0 : l["filter_threshold"].get<double>();
      }
    }
    if (j.contains("contrastive")) c.contrastive = loss::parse_contrastive(j["contrastive"].get<std::string>());
    c.margin = j.value("margin", c.margin);
    c.reconstruction = j.value("reconstruction", c.reconstruction);
    if (j.contains("model")) {
      json merged = model::to_json(c.model);
      merged.merge_patch(j["model"]);
      c.model = model::model_config_from_json(merged);
    }
    c.eval_every = j.value("eval_every", c.eval_every);
    c.select_best = j.value("select_best", c.select_best);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  return c;
}

// ---- optimizer ----------------------------------------------------------------------------

AdamW::AdamW(const ad::ParameterStore& params, double beta1, double beta2, double eps,
             double weight_decay)
    : beta1_(beta1), beta2_(beta2), eps_(eps), wd_(weight_decay) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    m_.push_back(Matrix::Zero(params[i].value.rows(), params[i].value.cols()));
    v_.push_back(Matrix::Zero(params[i].value.rows(), params[i].value.cols()));
  }
}

void AdamW::step(ad::ParameterStore& params, double lr) {
  if (params.size() != m_.size()) throw Error("AdamW: parameter set changed");
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * p.grad;
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * p.grad.cwiseAbs2();
    if (wd_ != 0.0) p.value *= 1.0 - lr * wd_;
    p.value.array() -= lr * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + eps_);
  }
}

// ---- logging ------------------------------------------------------------------------------

json StepLog::to_json() const {
  return {{"epoch", epoch},       {"step", step},   {"L_R", recon},   {"L_KL", kl},
          {"L_E", embed},         {"L_NCE", contrastive}, {"total", total},
          {"filtered_pct", filtered_pct}};
}

json TrainResult::metadata(const TrainConfig& cfg) const {
  return {{"config", to_json(cfg)},
          {"steps", log.empty() ? 0 : log.back().step},
          {"best_epoch", best_epoch},
          {"best_val_r10", best_val},
          {"aborted", aborted},
          {"abort_reason", abort_reason}};
}

void write_log(const std::filesystem::path& path, const std::vector<StepLog>& log) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  for (const auto& s : log) out << s.to_json().dump() << "\n";
}

// ---- training -----------------------------------------------------------------------------

model::TmrModel init_model(const data::Dataset& ds, const TrainConfig& cfg) {
  model::ModelConfig mc = cfg.model;
  mc.feature_dim = ds.feature_dim;
  if (mc.text_input == model::TextInput::Features) mc.text_feat_dim = ds.text_feat_dim;
  data::Vocabulary vocab;
  if (mc.text_input == model::TextInput::Tokens) vocab = data::Vocabulary::build(ds, data::Split::Train);
  return model::TmrModel(mc, std::move(vocab), cfg.seed);
}

BatchLoss batch_gradient(model::TmrModel& m, const data::Dataset& ds, const Batch& batch,
                         const TrainConfig& cfg, const Matrix& noise_text, const Matrix& noise_motion,
                         ad::Tape& tape) {
  const std::size_t n = batch.items.size();
  if (n == 0 || batch.text_choice.size() != n) throw Error("batch_gradient: malformed batch");
  std::vector<model::TextTokens> texts;
  std::vector<Matrix> motions;
  std::vector<int> durations;
  std::vector<std::size_t> globals;
  Eigen::Index frames = 0;
  for (std::size_t b = 0; b < n; ++b) {
    const auto& item = ds.items[batch.items[b]];
    const auto& entry = item.texts[batch.text_choice[b]];
    texts.push_back(m.text_input(entry));
    motions.push_back(item.motion.data);
    durations.push_back(item.motion.frames());
    globals.push_back(entry.global_index);
    frames += item.motion.frames();
  }
  Matrix gt(frames, ds.feature_dim);
  Eigen::Index r = 0;
  for (const auto& mo : motions) {
    gt.middleRows(r, mo.rows()) = mo;
    r += mo.rows();
  }
  Matrix text_sim(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = 0; b < n; ++b) {
      text_sim(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) =
          a == b ? 1.0 : ds.text_similarity(globals[a], globals[b]);
    }
  }
  Matrix keep = loss::filter_mask(text_sim, cfg.loss.filter_threshold);

  auto te = m.encode_text(tape, texts);
  auto me = m.encode_motion(tape, motions);
  loss::BatchOutputs out;
  out.gt = tape.constant(std::move(gt));
  out.text_mu = te.mu;
  out.text_log_var = te.log_var;
  out.motion_mu = me.mu;
  out.motion_log_var = me.log_var;
  out.z_text = model::sample_latent(te.mu, te.log_var, noise_text);
  out.z_motion = model::sample_latent(me.mu, me.log_var, noise_motion);
  if (cfg.reconstruction) {
    out.from_text = m.decode(tape, out.z_text, durations);
    out.from_motion = m.decode(tape, out.z_motion, durations);
  }
  BatchLoss bl;
  bl.terms = loss::total_loss(out, cfg.loss, keep, cfg.contrastive, cfg.margin);
  bl.filtered_fraction = loss::filtered_fraction(keep);
  if (std::isfinite(bl.terms.value)) tape.backward(bl.terms.total);
  return bl;
}

namespace {

Matrix normal_matrix(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols) {
  std::normal_distribution<double> nd(0.0, 1.0);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = nd(rng);
  return m;
}

bool grads_finite(const ad::ParameterStore& ps) {
  for (std::size_t i = 0; i < ps.size(); ++i) {
    if (!ps[i].grad.allFinite()) return false;
  }
  return true;
}

/// Primary: (b) R@10; ties broken by the summed recall over all k.
std::pair<double, double> validation_score(const model::TmrModel& m, const data::Dataset& ds) {
  auto emb = retrieval::embed_split(m, ds, data::Split::Val);
  retrieval::ProtocolConfig pc;
  pc.kind = retrieval::ProtocolKind::AllWithThreshold;
  auto rep = retrieval::evaluate(emb, pc, retrieval::Direction::TextToMotion);
  double all = 0.0;
  for (const auto& [k, v] : rep.recall) all += v;
  return {rep.r(10), all};
}

}  // namespace

TrainResult train(const data::Dataset& ds, const TrainConfig& cfg, const LogSink& sink) {
  cfg.validate();
  const auto train_idx = ds.indices(data::Split::Train);
  if (train_idx.empty()) throw ConfigError("dataset has no train split");
  const bool validate = cfg.select_best && cfg.eval_every > 0 && !ds.indices(data::Split::Val).empty();

  TrainResult res{init_model(ds, cfg), {}, 0, -1.0, false, {}};
  model::TmrModel& m = res.model;
  AdamW opt(m.params(), cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
  std::mt19937_64 rng(cfg.seed * 0x9E3779B97F4A7C15ULL + 17);
  const double lr = cfg.effective_lr();
  const int d = m.config().latent_dim;

  ad::ParameterStore best = m.params();
  std::pair<double, double> best_score{-1.0, -1.0};
  long step = 0;
  std::vector<std::size_t> order = train_idx;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t off = 0; off < order.size(); off += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t n = std::min(static_cast<std::size_t>(cfg.batch_size), order.size() - off);
      Batch batch;
      for (std::size_t b = 0; b < n; ++b) {
        const auto idx = order[off + b];
        batch.items.push_back(idx);
        batch.text_choice.push_back(static_cast<std::size_t>(rng() % ds.items[idx].texts.size()));
      }
      Matrix eps_t = normal_matrix(rng, static_cast<Eigen::Index>(n), d);
      Matrix eps_m = normal_matrix(rng, static_cast<Eigen::Index>(n), d);

      m.params().zero_grad();
      ad::Tape tape;
      BatchLoss bl = batch_gradient(m, ds, batch, cfg, eps_t, eps_m, tape);
      ++step;
      StepLog sl{epoch, step, bl.terms.recon, bl.terms.kl, bl.terms.embed, bl.terms.contrastive,
                 bl.terms.value, 100.0 * bl.filtered_fraction};
      res.log.push_back(sl);
      if (sink) sink(sl);

      if (!std::isfinite(bl.terms.value) || !grads_finite(m.params())) {
        res.aborted = true;
        res.abort_reason = "non-finite loss at step " + std::to_string(step);
        return res;
      }
      ad::ParameterStore last_good = m.params();
      opt.step(m.params(), lr);
      if (!m.params().all_finite()) {
        m.params() = std::move(last_good);
        res.aborted = true;
        res.abort_reason = "non-finite parameters after step " + std::to_string(step);
        return res;
      }
    }
    if (validate && (epoch % cfg.eval_every == 0 || epoch == cfg.epochs)) {
      auto score = validation_score(m, ds);
      if (score >= best_score) {
        best_score = score;
        best = m.params();
        res.best_epoch = epoch;
        res.best_val = score.first;
      }
    }
  }
  if (validate && cfg.epochs > 0) m.params() = std::move(best);
  if (cfg.epochs == 0) res.best_epoch = 0;
  return res;
}

// ---- ablation ------------------------------------------------------------------------------

json AblationRow::to_json() const {
  return {{"name", name}, {"overrides", overrides},   {"t2m", t2m.to_json()},
          {"m2t", m2t.to_json()}, {"seconds", seconds}, {"config", train::to_json(config)}};
}

std::vector<AblationVariant> default_ablation_grid() {
  return {{"joint", json::object()},
          {"contrastive_only",
           {{"reconstruction", false}, {"loss", {{"lambda_kl", 0.0}, {"lambda_e", 0.0}}}}},
          {"margin", {{"contrastive", "margin"}}},
          {"no_filter", {{"loss", {{"filter_threshold", nullptr}}}}}};
}

std::vector<AblationRow> ablate(const data::Dataset& ds, const TrainConfig& base,
                                const std::vector<AblationVariant>& grid,
                                const retrieval::ProtocolConfig& protocol, data::Split split) {
  std::vector<AblationRow> rows;
  for (const auto& v : grid) {
    AblationRow row;
    row.name = v.name;
    row.overrides = v.overrides.is_null() ? json::object() : v.overrides;
    row.config = train_config_from_json(row.overrides, base);
    auto t0 = std::chrono::steady_clock::now();
    TrainResult tr = train(ds, row.config);
    if (tr.aborted) throw TrainingError("variant '" + v.name + "': " + tr.abort_reason);
    auto emb = retrieval::embed_split(tr.model, ds, split);
    row.t2m = retrieval::evaluate(emb, protocol, retrieval::Direction::TextToMotion);
    row.m2t = retrieval::evaluate(emb, protocol, retrieval::Direction::MotionToText);
    row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace tmr::train
