// Copyright (c) 2026 The TMR-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "tmr/localization.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace tmr::loc {

CropEncoder model_crop_encoder(const model::TmrModel& m) {
  return [&m](std::span<const Matrix> crops) { return m.embed_motions(crops); };
}

Segment centered_window(int center, int window, int length) {
  int start = center - window / 2;
  start = std::clamp(start, 0, length - window);
  return {start, start + window};
}

namespace {

std::vector<double> cosines(const Vector& text, const Matrix& emb) {
  const double tn = text.norm();
  if (!(tn > 0.0)) throw Error("localization: zero text embedding");
  if (emb.cols() != text.size()) throw ShapeError("localization: embedding width mismatch");
  std::vector<double> out(static_cast<std::size_t>(emb.rows()));
  for (Eigen::Index i = 0; i < emb.rows(); ++i) {
    const double n = emb.row(i).norm();
    double c = n > 0.0 ? emb.row(i).dot(text) / (n * tn) : 0.0;
    out[static_cast<std::size_t>(i)] = std::clamp(c, -1.0, 1.0);
  }
  return out;
}

std::vector<double> score_segments(const Vector& text, const Matrix& motion,
                                   const std::vector<Segment>& segs, const CropEncoder& encode) {
  std::vector<Matrix> crops;
  crops.reserve(segs.size());
  for (const auto& s : segs) crops.push_back(motion.middleRows(s.start, s.length()));
  Matrix emb = encode(crops);
  if (emb.rows() != static_cast<Eigen::Index>(segs.size())) {
    throw ShapeError("localization: encoder returned " + shape_str(emb) + " for " +
                     std::to_string(segs.size()) + " crops");
  }
  return cosines(text, emb);
}

}  // namespace

SimilarityCurve sliding_similarity(const Vector& text_emb, const Matrix& motion,
                                   const CropEncoder& encode, int window, int stride) {
  const int length = static_cast<int>(motion.rows());
  if (window < 1 || stride < 1) throw ConfigError("window and stride must be >= 1");
  if (window > length) {
    throw ConfigError("window " + std::to_string(window) + " exceeds motion length " +
                      std::to_string(length));
  }
  std::vector<Segment> segs;
  for (int c = 0; c < length; c += stride) segs.push_back(centered_window(c, window, length));
  return {score_segments(text_emb, motion, segs, encode), window, stride};
}

Localization localize_pyramid(const Vector& text_emb, const Matrix& motion, const CropEncoder& encode,
                              const PyramidConfig& cfg) {
  const int length = static_cast<int>(motion.rows());
  if (cfg.min_window < 1 || cfg.size_step < 1 || cfg.stride < 1 || cfg.max_window < cfg.min_window) {
    throw ConfigError("invalid pyramid configuration");
  }
  if (length < cfg.min_window) {
    throw ConfigError("motion of " + std::to_string(length) + " frames is shorter than the " +
                      std::to_string(cfg.min_window) + "-frame minimum window");
  }
  // Ordered by start, then size, so the first maximum wins the tie-break.
  std::vector<Segment> segs;
  for (int start = 0; start + cfg.min_window <= length; start += cfg.stride) {
    for (int w = cfg.min_window; w <= cfg.max_window && start + w <= length; w += cfg.size_step) {
      segs.push_back({start, start + w});
    }
  }
  const auto scores = score_segments(text_emb, motion, segs, encode);
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i) {
    if (scores[i] > scores[best]) best = i;
  }
  return {segs[best], scores[best]};
}

double temporal_iou(const Segment& a, const Segment& b) {
  if (a.start >= a.end || b.start >= b.end) throw ConfigError("temporal_iou: empty segment");
  const int inter = std::max(0, std::min(a.end, b.end) - std::max(a.start, b.start));
  const int uni = a.length() + b.length() - inter;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

double localization_accuracy(std::span<const Segment> predicted, std::span<const Segment> truth,
                             double iou_threshold) {
  if (predicted.size() != truth.size()) throw ShapeError("localization_accuracy: size mismatch");
  if (predicted.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    const double iou = temporal_iou(predicted[i], truth[i]);
    if (iou > 0.0 && iou >= iou_threshold) ++hits;
  }
  return 100.0 * static_cast<double>(hits) / static_cast<double>(predicted.size());
}

std::string curve_svg(const SimilarityCurve& curve, int length, const std::optional<Segment>& truth,
                      const std::optional<Segment>& best) {
  const double w = 640, h = 200, pad = 20;
  const double span = std::max(1, length);
  auto x = [&](double frame) { return pad + (w - 2 * pad) * frame / span; };
  auto y = [&](double v) { return h - pad - (h - 2 * pad) * (v + 1.0) / 2.0; };
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
    << "\" viewBox=\"0 0 " << w << " " << h << "\">\n";
  if (truth) {
    s << "<rect x=\"" << x(truth->start) << "\" y=\"" << pad << "\" width=\""
      << x(truth->end) - x(truth->start) << "\" height=\"" << h - 2 * pad
      << "\" fill=\"#7fc97f\" fill-opacity=\"0.4\"/>\n";
  }
  s << "<line x1=\"" << pad << "\" y1=\"" << y(0) << "\" x2=\"" << w - pad << "\" y2=\"" << y(0)
    << "\" stroke=\"#bbb\"/>\n<polyline fill=\"none\" stroke=\"#1f77b4\" points=\"";
  for (std::size_t i = 0; i < curve.values.size(); ++i) {
    if (i) s << ' ';
    s << x(static_cast<double>(i) * curve.stride) << ',' << y(curve.values[i]);
  }
  s << "\"/>\n";
  if (best) {
    for (int f : {best->start, best->end}) {
      s << "<line x1=\"" << x(f) << "\" y1=\"" << pad << "\" x2=\"" << x(f) << "\" y2=\"" << h - pad
        << "\" stroke=\"red\" stroke-dasharray=\"4 3\"/>\n";
    }
  }
  s << "</svg>\n";
  return s.str();
}

nlohmann::json to_json(const SimilarityCurve& c) {
  return {{"values", c.values}, {"window", c.window}, {"stride", c.stride}};
}

}  // namespace tmr::loc
