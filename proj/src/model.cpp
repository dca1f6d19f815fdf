// Copyright (c) 2026 The TMR-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "tmr/model.hpp"

#include "tmr/matrix_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

namespace tmr::model {

using ad::Var;
using nlohmann::json;
namespace fs = std::filesystem;

// ---- config ----------------------------------------------------------------------

namespace {

void validate_stack(const char* name, const StackConfig& s) {
  auto need = [name](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(std::string(name) + ": " + msg);
  };
  need(s.width >= 1, "width must be >= 1");
  need(s.depth >= 1, "depth must be >= 1");
  need(s.heads >= 1 && s.width % s.heads == 0, "width must be divisible by heads");
  need(s.ff_width >= 1, "ff_width must be >= 1");
  need(s.max_length >= 1, "max_length must be >= 1");
}

json stack_json(const StackConfig& s) {
  return {{"width", s.width}, {"depth", s.depth}, {"heads", s.heads}, {"ff_width", s.ff_width},
          {"max_length", s.max_length}};
}

StackConfig stack_from_json(const json& j, StackConfig s) {
  s.width = j.value("width", s.width);
  s.depth = j.value("depth", s.depth);
  s.heads = j.value("heads", s.heads);
  s.ff_width = j.value("ff_width", s.ff_width);
  s.max_length = j.value("max_length", s.max_length);
  return s;
}

}  // namespace

void ModelConfig::validate() const {
  if (latent_dim < 1) throw ConfigError("latent_dim must be >= 1");
  if (feature_dim < 1) throw ConfigError("feature_dim must be >= 1");
  if (text_input == TextInput::Features && text_feat_dim < 1) {
    throw ConfigError("text_feat_dim must be >= 1 for the features text path");
  }
  validate_stack("text encoder", text);
  validate_stack("motion encoder", motion);
  validate_stack("decoder", decoder);
}

json to_json(const ModelConfig& c) {
  return {{"latent_dim", c.latent_dim},
          {"feature_dim", c.feature_dim},
          {"text_input", c.text_input == TextInput::Tokens ? "tokens" : "features"},
          {"text_feat_dim", c.text_feat_dim},
          {"text_encoder", stack_json(c.text)},
          {"motion_encoder", stack_json(c.motion)},
          {"decoder", stack_json(c.decoder)},
          {"ln_eps", c.ln_eps}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  c.latent_dim = j.value("latent_dim", c.latent_dim);
  c.feature_dim = j.value("feature_dim", c.feature_dim);
  std::string ti = j.value("text_input", std::string("tokens"));
  if (ti == "tokens") {
    c.text_input = TextInput::Tokens;
  } else if (ti == "features") {
    c.text_input = TextInput::Features;
  } else {
    throw ConfigError("text_input must be 'tokens' or 'features'");
  }
  c.text_feat_dim = j.value("text_feat_dim", c.text_feat_dim);
  if (j.contains("text_encoder")) c.text = stack_from_json(j["text_encoder"], c.text);
  if (j.contains("motion_encoder")) c.motion = stack_from_json(j["motion_encoder"], c.motion);
  if (j.contains("decoder")) c.decoder = stack_from_json(j["decoder"], c.decoder);
  c.ln_eps = j.value("ln_eps", c.ln_eps);
  return c;
}

// ---- free functions --------------------------------------------------------------------

Matrix positional_encoding(int length, int width) {
  if (length < 1 || width < 1) throw ShapeError("positional_encoding: length and width must be >= 1");
  Matrix pe(length, width);
  for (int i = 0; 2 * i < width; ++i) {
    const double freq = std::pow(10000.0, -2.0 * i / static_cast<double>(width));
    for (int t = 0; t < length; ++t) {
      pe(t, 2 * i) = std::sin(t * freq);
      if (2 * i + 1 < width) pe(t, 2 * i + 1) = std::cos(t * freq);
    }
  }
  return pe;
}

Vector sample_latent(const LatentDistribution& dist, const Vector& eps) {
  if (eps.size() != dist.mu.size()) throw ShapeError("sample_latent: noise has wrong dimension");
  return dist.mu.array() + (0.5 * dist.log_var.array()).exp() * eps.array();
}

Var sample_latent(Var mu, Var log_var, const Matrix& eps) {
  ad::Tape& t = *mu.tape();
  return ad::add(mu, ad::mul(ad::exp(ad::scale(log_var, 0.5)), t.constant(eps)));
}

// ---- TmrModel ----------------------------------------------------------------------------

TmrModel::TmrModel(ModelConfig cfg, data::Vocabulary vocab, std::uint64_t seed)
    : cfg_(std::move(cfg)), vocab_(std::move(vocab)), seed_(seed) {
  cfg_.validate();
  init_params();
}

namespace {

struct Init {
  std::mt19937_64 rng;

  Matrix xavier(int in, int out) {
    const double a = std::sqrt(6.0 / (in + out));
    std::uniform_real_distribution<double> u(-a, a);
    Matrix m(in, out);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
    return io::round_to_f32(m);
  }
  Matrix normal(int rows, int cols, double stddev) {
    std::normal_distribution<double> n(0.0, stddev);
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
    return io::round_to_f32(m);
  }
};

}  // namespace

void TmrModel::init_params() {
  Init init{std::mt19937_64(seed_)};
  const int d = cfg_.latent_dim;

  const int tw = cfg_.text.width;
  if (cfg_.text_input == TextInput::Tokens) {
    params_.add("text.embed", init.normal(static_cast<int>(vocab_.size()), tw, 1.0));
  } else {
    params_.add("text.lift.w", init.xavier(cfg_.text_feat_dim, tw));
    params_.add("text.lift.b", Matrix::Zero(1, tw));
  }
  params_.add("text.dist_tokens", init.normal(2, tw, 0.1));
  params_.add("text.mu.w", init.xavier(tw, d));
  params_.add("text.mu.b", Matrix::Zero(1, d));
  params_.add("text.logvar.w", init.xavier(tw, d));
  params_.add("text.logvar.b", Matrix::Zero(1, d));

  const int mw = cfg_.motion.width;
  params_.add("motion.lift.w", init.xavier(cfg_.feature_dim, mw));
  params_.add("motion.lift.b", Matrix::Zero(1, mw));
  params_.add("motion.dist_tokens", init.normal(2, mw, 0.1));
  params_.add("motion.mu.w", init.xavier(mw, d));
  params_.add("motion.mu.b", Matrix::Zero(1, d));
  params_.add("motion.logvar.w", init.xavier(mw, d));
  params_.add("motion.logvar.b", Matrix::Zero(1, d));

  const int dw = cfg_.decoder.width;
  params_.add("decoder.z.w", init.xavier(d, dw));
  params_.add("decoder.z.b", Matrix::Zero(1, dw));
  params_.add("decoder.out.w", init.xavier(dw, cfg_.feature_dim));
  params_.add("decoder.out.b", Matrix::Zero(1, cfg_.feature_dim));

  // Per-stack weights draw from their own streams, seeded from seed_ and a
  // fixed per-stack salt.
  std::uint64_t salt = 0x9E3779B97F4A7C15ULL;
  auto stack_params = [&](const std::string& prefix, const StackConfig& sc) {
    salt = salt * 6364136223846793005ULL + 1442695040888963407ULL;
    Init s{std::mt19937_64(seed_ ^ salt)};
    const int w = sc.width;
    for (int b = 0; b < sc.depth; ++b) {
      const std::string blk = prefix + ".block" + std::to_string(b);
      params_.add(blk + ".ln1.g", Matrix::Ones(1, w));
      params_.add(blk + ".ln1.b", Matrix::Zero(1, w));
      params_.add(blk + ".qkv.w", s.xavier(w, 3 * w));
      params_.add(blk + ".qkv.b", Matrix::Zero(1, 3 * w));
      params_.add(blk + ".out.w", s.xavier(w, w));
      params_.add(blk + ".out.b", Matrix::Zero(1, w));
      params_.add(blk + ".ln2.g", Matrix::Ones(1, w));
      params_.add(blk + ".ln2.b", Matrix::Zero(1, w));
      params_.add(blk + ".ff1.w", s.xavier(w, sc.ff_width));
      params_.add(blk + ".ff1.b", Matrix::Zero(1, sc.ff_width));
      params_.add(blk + ".ff2.w", s.xavier(sc.ff_width, w));
      params_.add(blk + ".ff2.b", Matrix::Zero(1, w));
    }
    params_.add(prefix + ".final_ln.g", Matrix::Ones(1, w));
    params_.add(prefix + ".final_ln.b", Matrix::Zero(1, w));
  };
  stack_params("text", cfg_.text);
  stack_params("motion", cfg_.motion);
  stack_params("decoder", cfg_.decoder);
}

TmrModel::Binder TmrModel::trainable(ad::Tape& tape) {
  return [this, &tape](const std::string& id) { return tape.param(params_.get(id)); };
}

TmrModel::Binder TmrModel::frozen(ad::Tape& tape) const {
  return [this, &tape](const std::string& id) { return tape.constant(params_.get(id).value); };
}

Var TmrModel::stack(ad::Tape& tape, const Binder& p, const std::string& prefix,
                    const StackConfig& sc, Var x, std::span<const int> lengths) const {
  (void)tape;
  const double eps = cfg_.ln_eps;
  for (int b = 0; b < sc.depth; ++b) {
    const std::string blk = prefix + ".block" + std::to_string(b);
    Var h = ad::layer_norm(x, p(blk + ".ln1.g"), p(blk + ".ln1.b"), eps);
    Var qkv = ad::linear(h, p(blk + ".qkv.w"), p(blk + ".qkv.b"));
    Var att = ad::segment_attention(qkv, lengths, sc.heads);
    x = ad::add(x, ad::linear(att, p(blk + ".out.w"), p(blk + ".out.b")));
    Var h2 = ad::layer_norm(x, p(blk + ".ln2.g"), p(blk + ".ln2.b"), eps);
    Var ff = ad::linear(ad::relu(ad::linear(h2, p(blk + ".ff1.w"), p(blk + ".ff1.b"))),
                        p(blk + ".ff2.w"), p(blk + ".ff2.b"));
    x = ad::add(x, ff);
  }
  return ad::layer_norm(x, p(prefix + ".final_ln.g"), p(prefix + ".final_ln.b"), eps);
}

namespace {

Matrix stacked_positions(std::span<const int> lengths, int width) {
  int total = 0, longest = 0;
  for (int l : lengths) {
    total += l;
    longest = std::max(longest, l);
  }
  Matrix pe = positional_encoding(std::max(longest, 1), width);
  Matrix out(total, width);
  int r = 0;
  for (int l : lengths) {
    out.middleRows(r, l) = pe.topRows(l);
    r += l;
  }
  return out;
}

}  // namespace

TmrModel::Encoded TmrModel::encode_stacked(ad::Tape& tape, const Binder& p,
                                           const std::string& prefix, const StackConfig& sc,
                                           Var lifted, std::span<const int> lengths) const {
  std::vector<int> gather;
  std::vector<int> seq_lengths;
  std::vector<int> mu_rows, lv_rows;
  int in_off = 0, out_off = 0;
  for (int l : lengths) {
    mu_rows.push_back(out_off);
    lv_rows.push_back(out_off + 1);
    gather.push_back(0);
    gather.push_back(1);
    for (int t = 0; t < l; ++t) gather.push_back(2 + in_off + t);
    seq_lengths.push_back(l + 2);
    in_off += l;
    out_off += l + 2;
  }
  std::vector<Var> parts{p(prefix + ".dist_tokens"), lifted};
  Var x = ad::gather_rows(ad::concat_rows(parts), gather);
  x = ad::add(x, tape.constant(stacked_positions(seq_lengths, sc.width)));
  Var h = stack(tape, p, prefix, sc, x, seq_lengths);
  Encoded out;
  out.mu = ad::linear(ad::gather_rows(h, mu_rows), p(prefix + ".mu.w"), p(prefix + ".mu.b"));
  out.log_var =
      ad::linear(ad::gather_rows(h, lv_rows), p(prefix + ".logvar.w"), p(prefix + ".logvar.b"));
  return out;
}

TmrModel::Encoded TmrModel::encode_text_impl(ad::Tape& tape, const Binder& p,
                                             std::span<const TextTokens> batch) const {
  if (batch.empty()) throw ShapeError("encode_text: empty batch");
  std::vector<int> lengths;
  for (const auto& t : batch) {
    const auto len = static_cast<int>(t.length(cfg_.text_input));
    if (len < 1) throw ShapeError("encode_text: text has no tokens");
    if (len > cfg_.text.max_length) {
      throw ShapeError("encode_text: " + std::to_string(len) + " tokens exceed max_length " +
                       std::to_string(cfg_.text.max_length));
    }
    lengths.push_back(len);
  }
  Var lifted;
  if (cfg_.text_input == TextInput::Tokens) {
    std::vector<int> ids;
    for (const auto& t : batch) ids.insert(ids.end(), t.ids.begin(), t.ids.end());
    lifted = ad::gather_rows(p("text.embed"), ids);
  } else {
    int total = 0;
    for (int l : lengths) total += l;
    Matrix feats(total, cfg_.text_feat_dim);
    int r = 0;
    for (const auto& t : batch) {
      if (t.feats.cols() != cfg_.text_feat_dim) throw ShapeError("encode_text: feature width mismatch");
      feats.middleRows(r, t.feats.rows()) = t.feats;
      r += static_cast<int>(t.feats.rows());
    }
    lifted = ad::linear(tape.constant(std::move(feats)), p("text.lift.w"), p("text.lift.b"));
  }
  return encode_stacked(tape, p, "text", cfg_.text, lifted, lengths);
}

TmrModel::Encoded TmrModel::encode_motion_impl(ad::Tape& tape, const Binder& p,
                                               std::span<const Matrix> batch) const {
  if (batch.empty()) throw ShapeError("encode_motion: empty batch");
  std::vector<int> lengths;
  int total = 0;
  for (const auto& m : batch) {
    if (m.rows() < 1) throw ShapeError("encode_motion: motion has no frames");
    if (m.cols() != cfg_.feature_dim) {
      throw ShapeError("encode_motion: feature dim " + std::to_string(m.cols()) + ", expected " +
                       std::to_string(cfg_.feature_dim));
    }
    if (m.rows() > cfg_.motion.max_length) throw ShapeError("encode_motion: motion exceeds max_length");
    lengths.push_back(static_cast<int>(m.rows()));
    total += static_cast<int>(m.rows());
  }
  Matrix feats(total, cfg_.feature_dim);
  int r = 0;
  for (const auto& m : batch) {
    feats.middleRows(r, m.rows()) = m;
    r += static_cast<int>(m.rows());
  }
  Var lifted = ad::linear(tape.constant(std::move(feats)), p("motion.lift.w"), p("motion.lift.b"));
  return encode_stacked(tape, p, "motion", cfg_.motion, lifted, lengths);
}

Var TmrModel::decode_impl(ad::Tape& tape, const Binder& p, Var z,
                          std::span<const int> durations) const {
  if (z.cols() != cfg_.latent_dim || z.rows() != static_cast<Eigen::Index>(durations.size())) {
    throw ShapeError("decode: z is " + shape_str(z.value()) + " for " +
                     std::to_string(durations.size()) + " durations");
  }
  for (int d : durations) {
    if (d < 1) throw ShapeError("decode: duration must be >= 1");
    if (d > cfg_.decoder.max_length) throw ShapeError("decode: duration exceeds max_length");
  }
  Var zp = ad::linear(z, p("decoder.z.w"), p("decoder.z.b"));
  Var x = ad::add(ad::repeat_rows(zp, durations),
                  tape.constant(stacked_positions(durations, cfg_.decoder.width)));
  Var h = stack(tape, p, "decoder", cfg_.decoder, x, durations);
  return ad::linear(h, p("decoder.out.w"), p("decoder.out.b"));
}

TmrModel::Encoded TmrModel::encode_text(ad::Tape& tape, std::span<const TextTokens> batch) {
  return encode_text_impl(tape, trainable(tape), batch);
}

TmrModel::Encoded TmrModel::encode_motion(ad::Tape& tape, std::span<const Matrix> batch) {
  return encode_motion_impl(tape, trainable(tape), batch);
}

Var TmrModel::decode(ad::Tape& tape, Var z, std::span<const int> durations) {
  return decode_impl(tape, trainable(tape), z, durations);
}

TextTokens TmrModel::tokenize(std::string_view text) const {
  if (cfg_.text_input != TextInput::Tokens) {
    throw Error("this checkpoint reads external token features; free text cannot be encoded");
  }
  TextTokens t;
  t.ids = vocab_.encode(text);
  return t;
}

TextTokens TmrModel::text_input(const data::TextEntry& entry) const {
  if (cfg_.text_input == TextInput::Tokens) return tokenize(entry.text);
  if (!entry.token_feats) throw Error("text '" + entry.text + "' has no token features");
  TextTokens t;
  t.feats = *entry.token_feats;
  return t;
}

namespace {

LatentDistribution row_dist(const TmrModel::Encoded& e, Eigen::Index r) {
  return {e.mu.value().row(r).transpose(), e.log_var.value().row(r).transpose()};
}

}  // namespace

LatentDistribution TmrModel::encode_text(const TextTokens& text) const {
  ad::Tape tape(false);
  return row_dist(encode_text_impl(tape, frozen(tape), std::span(&text, 1)), 0);
}

LatentDistribution TmrModel::encode_text(std::string_view text) const {
  return encode_text(tokenize(text));
}

LatentDistribution TmrModel::encode_motion(const Matrix& motion) const {
  ad::Tape tape(false);
  return row_dist(encode_motion_impl(tape, frozen(tape), std::span(&motion, 1)), 0);
}

Matrix TmrModel::decode(const Vector& z, int duration) const {
  ad::Tape tape(false);
  Var zv = tape.constant(z.transpose());
  return decode_impl(tape, frozen(tape), zv, std::span(&duration, 1)).value();
}

namespace {

constexpr std::size_t kChunk = 64;

template <typename T, typename Fn>
Matrix embed_chunks(std::span<const T> items, int d, Fn&& encode) {
  Matrix out(static_cast<Eigen::Index>(items.size()), d);
  for (std::size_t off = 0; off < items.size(); off += kChunk) {
    const std::size_t n = std::min(kChunk, items.size() - off);
    out.middleRows(static_cast<Eigen::Index>(off), static_cast<Eigen::Index>(n)) =
        encode(items.subspan(off, n));
  }
  return out;
}

}  // namespace

Matrix TmrModel::embed_texts(std::span<const TextTokens> texts) const {
  return embed_chunks(texts, cfg_.latent_dim, [this](std::span<const TextTokens> chunk) {
    ad::Tape tape(false);
    return Matrix(encode_text_impl(tape, frozen(tape), chunk).mu.value());
  });
}

Matrix TmrModel::embed_motions(std::span<const Matrix> motions) const {
  return embed_chunks(motions, cfg_.latent_dim, [this](std::span<const Matrix> chunk) {
    ad::Tape tape(false);
    return Matrix(encode_motion_impl(tape, frozen(tape), chunk).mu.value());
  });
}

// ---- checkpoint -------------------------------------------------------------------------

void TmrModel::save(const fs::path& dir, const json& training) const {
  fs::create_directories(dir);
  json manifest;
  manifest["format"] = "tmr-checkpoint";
  manifest["version"] = 1;
  manifest["model"] = to_json(cfg_);
  manifest["seed"] = seed_;
  manifest["vocab"] = vocab_.words();
  json plist = json::array();
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& p = params_[i];
    plist.push_back({{"name", p.id}, {"shape", {p.value.rows(), p.value.cols()}}});
  }
  manifest["parameters"] = plist;
  manifest["training"] = training.is_null() ? json::object() : training;
  io::write_text_file(dir / "manifest.json", manifest.dump(2) + "\n");

  std::ofstream out(dir / "weights.bin", std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + (dir / "weights.bin").string());
  for (std::size_t i = 0; i < params_.size(); ++i) io::write_f32(out, params_[i].value);
}

TmrModel TmrModel::load(const fs::path& dir, json* training) {
  const fs::path mpath = dir / "manifest.json";
  json manifest;
  try {
    manifest = json::parse(io::read_text_file(mpath));
  } catch (const json::exception& e) {
    throw FormatError(mpath.string() + ": " + e.what());
  }
  if (manifest.value("format", std::string()) != "tmr-checkpoint") {
    throw FormatError(mpath.string() + ": not a checkpoint manifest");
  }
  TmrModel model(model_config_from_json(manifest.at("model")),
                 data::Vocabulary(manifest.value("vocab", std::vector<std::string>{})),
                 manifest.value("seed", std::uint64_t{0}));
  const auto& plist = manifest.at("parameters");
  if (plist.size() != model.params_.size()) {
    throw FormatError(mpath.string() + ": parameter count does not match the model config");
  }
  std::ifstream in(dir / "weights.bin", std::ios::binary);
  if (!in) throw FormatError((dir / "weights.bin").string() + ": cannot open");
  for (std::size_t i = 0; i < plist.size(); ++i) {
    auto& p = model.params_[i];
    const std::string name = plist[i].at("name").get<std::string>();
    const auto shape = plist[i].at("shape").get<std::vector<Eigen::Index>>();
    if (name != p.id || shape.size() != 2 || shape[0] != p.value.rows() || shape[1] != p.value.cols()) {
      throw FormatError(mpath.string() + ": parameter '" + name + "' does not match the model");
    }
    io::read_f32(in, p.value, (dir / "weights.bin").string());
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw FormatError((dir / "weights.bin").string() + ": trailing bytes");
  }
  if (training) *training = manifest.value("training", json::object());
  return model;
}

}  // namespace tmr::model
