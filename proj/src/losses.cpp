// Copyright (c) 2026 The TMR-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "tmr/losses.hpp"

#include <cmath>

namespace tmr::loss {

void LossWeights::validate() const {
  if (!(temperature > 0.0)) throw ConfigError("temperature must be > 0");
  if (lambda_kl < 0 || lambda_e < 0 || lambda_nce < 0) throw ConfigError("loss weights must be >= 0");
  if (!(smooth_l1_beta > 0.0)) throw ConfigError("smooth_l1_beta must be > 0");
  if (filter_threshold < -1.0) throw ConfigError("filter_threshold must be >= -1");
}

std::string contrastive_name(Contrastive c) {
  switch (c) {
    case Contrastive::InfoNCE: return "infonce";
    case Contrastive::Margin: return "margin";
    case Contrastive::None: return "none";
  }
  return "infonce";
}

Contrastive parse_contrastive(const std::string& name) {
  if (name == "infonce") return Contrastive::InfoNCE;
  if (name == "margin") return Contrastive::Margin;
  if (name == "none") return Contrastive::None;
  throw ConfigError("contrastive must be one of infonce, margin, none");
}

Var kl_gaussian(Var mu_p, Var log_var_p, Var mu_q, Var log_var_q) {
  // 0.5 Σ [ lv_q − lv_p + (exp(lv_p) + (μ_p − μ_q)²) / exp(lv_q) − 1 ]
  Var inv_var_q = ad::exp(ad::scale(log_var_q, -1.0));
  Var ratio = ad::mul(ad::add(ad::exp(log_var_p), ad::square(ad::sub(mu_p, mu_q))), inv_var_q);
  Var terms = ad::add_scalar(ad::add(ad::sub(log_var_q, log_var_p), ratio), -1.0);
  return ad::scale(ad::sum(terms), 0.5 / static_cast<double>(mu_p.rows()));
}

Var kl_standard(Var mu, Var log_var) {
  Var terms = ad::add_scalar(ad::sub(ad::add(ad::exp(log_var), ad::square(mu)), log_var), -1.0);
  return ad::scale(ad::sum(terms), 0.5 / static_cast<double>(mu.rows()));
}

Matrix filter_mask(const Matrix& text_sim, double threshold) {
  if (text_sim.rows() != text_sim.cols()) throw ShapeError("filter_mask: text_sim must be square");
  Matrix keep(text_sim.rows(), text_sim.cols());
  for (Eigen::Index i = 0; i < keep.rows(); ++i) {
    for (Eigen::Index j = 0; j < keep.cols(); ++j) {
      keep(i, j) = (i == j || text_sim(i, j) <= threshold) ? 1.0 : 0.0;
    }
  }
  return keep;
}

double filtered_fraction(const Matrix& keep) {
  const double n = static_cast<double>(keep.rows());
  if (n < 2) return 0.0;
  const double off = n * (n - 1);
  double dropped = 0.0;
  for (Eigen::Index i = 0; i < keep.rows(); ++i) {
    for (Eigen::Index j = 0; j < keep.cols(); ++j) {
      if (i != j && keep(i, j) == 0.0) dropped += 1.0;
    }
  }
  return dropped / off;
}

Var cosine_similarity(Var a, Var b) {
  return ad::matmul(ad::normalize_rows(a, 1e-8), ad::transpose(ad::normalize_rows(b, 1e-8)));
}

Var info_nce(Var s, double temperature, const Matrix& keep) {
  if (s.rows() != s.cols()) throw ShapeError("info_nce: S must be square");
  if (!(temperature > 0.0)) throw ConfigError("info_nce: temperature must be > 0");
  const Eigen::Index n = s.rows();
  Matrix k = keep;
  k.diagonal().setOnes();
  Var logits = ad::scale(s, 1.0 / temperature);
  Var rows = ad::log_softmax_rows(logits, k);
  Var cols = ad::log_softmax_rows(ad::transpose(logits), k.transpose());
  Matrix diag = Matrix::Identity(n, n);
  Var both = ad::add(ad::masked_sum(rows, diag), ad::masked_sum(cols, diag));
  return ad::scale(both, -1.0 / (2.0 * static_cast<double>(n)));
}

double info_nce(const Matrix& s, double temperature, const Matrix& keep) {
  ad::Tape tape(false);
  return info_nce(tape.constant(s), temperature, keep).scalar();
}

LossTerms temos_loss(const BatchOutputs& out, const LossWeights& w) {
  ad::Tape& tape = *out.gt.tape();
  LossTerms t;
  Var total = tape.scalar(0.0);
  if (out.from_text || out.from_motion) {
    Var recon = tape.scalar(0.0);
    if (out.from_text) recon = ad::add(recon, ad::smooth_l1(*out.from_text, out.gt, w.smooth_l1_beta));
    if (out.from_motion) {
      recon = ad::add(recon, ad::smooth_l1(*out.from_motion, out.gt, w.smooth_l1_beta));
    }
    t.recon = recon.scalar();
    total = recon;
  }
  Var kl = ad::add(ad::add(kl_standard(out.text_mu, out.text_log_var),
                           kl_standard(out.motion_mu, out.motion_log_var)),
                   ad::add(kl_gaussian(out.text_mu, out.text_log_var, out.motion_mu,
                                       out.motion_log_var),
                           kl_gaussian(out.motion_mu, out.motion_log_var, out.text_mu,
                                       out.text_log_var)));
  Var embed = ad::smooth_l1(out.z_text, out.z_motion, w.smooth_l1_beta);
  t.kl = kl.scalar();
  t.embed = embed.scalar();
  total = ad::add(total, ad::add(ad::scale(kl, w.lambda_kl), ad::scale(embed, w.lambda_e)));
  t.total = total;
  t.value = total.scalar();
  return t;
}

LossTerms total_loss(const BatchOutputs& out, const LossWeights& w, const Matrix& keep,
                     Contrastive kind, double margin) {
  LossTerms t = temos_loss(out, w);
  if (kind == Contrastive::None) return t;
  Var s = cosine_similarity(out.z_text, out.z_motion);
  Var c = kind == Contrastive::InfoNCE ? info_nce(s, w.temperature, keep)
                                       : ad::margin_ranking(s, keep, margin);
  t.contrastive = c.scalar();
  t.total = ad::add(t.total, ad::scale(c, w.lambda_nce));
  t.value = t.total.scalar();
  return t;
}

}  // namespace tmr::loss
