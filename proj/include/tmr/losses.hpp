// Copyright (c) 2026 The TMR-desk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Training objectives: reconstruction, the four KL terms, the cross-modal
// embedding term, the filtered contrastive term and their weighted sum.

#pragma once

#include "tmr/autodiff.hpp"

#include <optional>
#include <string>

namespace tmr::loss {

using ad::Var;

struct LossWeights {
  double lambda_kl = 1e-5;
  double lambda_e = 1e-5;
  double lambda_nce = 0.1;
  double temperature = 0.1;
  double filter_threshold = 0.8;
  double smooth_l1_beta = 1.0;

  void validate() const;
};

enum class Contrastive { InfoNCE, Margin, None };

std::string contrastive_name(Contrastive c);
Contrastive parse_contrastive(const std::string& name);

/// KL(p ‖ q) between diagonal Gaussians given as [B×d] mean / log-variance
/// rows; summed over dimensions, averaged over rows.
Var kl_gaussian(Var mu_p, Var log_var_p, Var mu_q, Var log_var_q);
/// KL(p ‖ N(0, I)).
Var kl_standard(Var mu, Var log_var);

/// keep_ij = (i == j) || text_sim_ij <= threshold, as 0/1 entries.
Matrix filter_mask(const Matrix& text_sim, double threshold);
/// Fraction of off-diagonal entries dropped by the mask (0 for N = 1).
double filtered_fraction(const Matrix& keep);

/// S_ij = cos(a_i, b_j) with norms clamped at 1e-8.
Var cosine_similarity(Var a, Var b);

/// Symmetric InfoNCE over S/τ; dropped entries are excluded from both the
/// row and the column softmax denominators.
Var info_nce(Var s, double temperature, const Matrix& keep);
double info_nce(const Matrix& s, double temperature, const Matrix& keep);

/// Everything the objectives need from one forward pass over a batch.
struct BatchOutputs {
  Var gt;                          // stacked ground-truth motions
  std::optional<Var> from_text;    // decoded from z^T (same shape as gt)
  std::optional<Var> from_motion;  // decoded from z^M
  Var text_mu, text_log_var;
  Var motion_mu, motion_log_var;
  Var z_text, z_motion;
};

struct LossTerms {
  Var total;
  double recon = 0.0;
  double kl = 0.0;
  double embed = 0.0;
  double contrastive = 0.0;
  double value = 0.0;
};

/// L_R + λ_KL·L_KL + λ_E·L_E. L_R is skipped when no decoded output is given.
LossTerms temos_loss(const BatchOutputs& out, const LossWeights& w);

/// temos_loss + λ_NCE · (InfoNCE or margin loss on cos(z^T, z^M)).
LossTerms total_loss(const BatchOutputs& out, const LossWeights& w, const Matrix& keep,
                     Contrastive kind = Contrastive::InfoNCE, double margin = 0.2);

}  // namespace tmr::loss
