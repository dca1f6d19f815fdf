// Copyright (c) 2026 The TMR-desk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Moment retrieval: score crops of a long motion against a text embedding.

#pragma once

#include "tmr/model.hpp"
#include "tmr/tensor.hpp"

#include "json.hpp"

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace tmr::loc {

/// Frames [start, end).
struct Segment {
  int start = 0;
  int end = 0;

  int length() const { return end - start; }
  bool operator==(const Segment&) const = default;
};

struct SimilarityCurve {
  std::vector<double> values;  // one per placement, centered at placement * stride
  int window = 0;
  int stride = 1;
};

/// Maps a batch of crops to their embeddings (one row each, any scale).
using CropEncoder = std::function<Matrix(std::span<const Matrix>)>;
CropEncoder model_crop_encoder(const model::TmrModel& m);

/// Window [c - w/2, c - w/2 + w) around center c, shifted inward at the edges.
Segment centered_window(int center, int window, int length);

SimilarityCurve sliding_similarity(const Vector& text_emb, const Matrix& motion,
                                   const CropEncoder& encode, int window = 20, int stride = 1);

struct PyramidConfig {
  int min_window = 10;
  int max_window = 60;
  int size_step = 5;
  int stride = 5;
};

struct Localization {
  Segment segment;
  double score = 0.0;
};

/// Best crop over all window sizes and stride-aligned starts; ties go to the
/// earliest start, then the smallest window. Windows longer than the motion
/// are skipped; a motion shorter than min_window throws.
Localization localize_pyramid(const Vector& text_emb, const Matrix& motion, const CropEncoder& encode,
                              const PyramidConfig& cfg = {});

double temporal_iou(const Segment& a, const Segment& b);

/// Percentage of predictions whose IoU with the ground truth is ≥ threshold
/// (strictly positive overlap is required at threshold 0).
double localization_accuracy(std::span<const Segment> predicted, std::span<const Segment> truth,
                             double iou_threshold);

/// Line plot of the curve with an optional shaded span and a marked segment.
std::string curve_svg(const SimilarityCurve& curve, int length, const std::optional<Segment>& truth,
                      const std::optional<Segment>& best);

nlohmann::json to_json(const SimilarityCurve& c);

}  // namespace tmr::loc
