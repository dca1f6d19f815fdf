// Copyright (c) 2026 The TMR-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "tmr/dataio.hpp"

#include "tmr/matrix_io.hpp"

#include "json.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

namespace tmr::data {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "train";
}

Split parse_split(std::string_view name) {
  if (name == "train") return Split::Train;
  if (name == "val") return Split::Val;
  if (name == "test") return Split::Test;
  throw FormatError("unknown split '" + std::string(name) + "'");
}

// ---- Dataset -------------------------------------------------------------------

std::size_t Dataset::text_count() const {
  std::size_t n = 0;
  for (const auto& it : items) n += it.texts.size();
  return n;
}

std::vector<std::size_t> Dataset::indices(Split s) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i].split == s) out.push_back(i);
  }
  return out;
}

const Item* Dataset::find(std::string_view id) const {
  for (const auto& it : items) {
    if (it.id == id) return &it;
  }
  return nullptr;
}

namespace {

const TextEntry& text_by_global(const Dataset& ds, std::size_t g) {
  // Global indices are assigned in item order, so a running scan suffices.
  for (const auto& it : ds.items) {
    if (!it.texts.empty() && g <= it.texts.back().global_index) {
      return it.texts[g - it.texts.front().global_index];
    }
  }
  throw Error("text index " + std::to_string(g) + " out of range");
}

double cosine(const Vector& a, const Vector& b) {
  double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0) throw Error("zero-norm sentence embedding");
  return std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
}

}  // namespace

double Dataset::text_similarity(std::size_t a, std::size_t b) const {
  if (text_sim) return (*text_sim)(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b));
  if (a == b) return 1.0;
  return cosine(text_by_global(*this, a).sent_emb, text_by_global(*this, b).sent_emb);
}

Matrix Dataset::first_text_similarity(std::span<const std::size_t> idx) const {
  const auto n = static_cast<Eigen::Index>(idx.size());
  Matrix sim(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    sim(i, i) = 1.0;
    const auto gi = items[idx[static_cast<std::size_t>(i)]].texts.front().global_index;
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const auto gj = items[idx[static_cast<std::size_t>(j)]].texts.front().global_index;
      double s;
      if (text_sim) {
        s = (*text_sim)(static_cast<Eigen::Index>(gi), static_cast<Eigen::Index>(gj));
      } else {
        s = cosine(items[idx[static_cast<std::size_t>(i)]].texts.front().sent_emb,
                   items[idx[static_cast<std::size_t>(j)]].texts.front().sent_emb);
      }
      sim(i, j) = sim(j, i) = s;
    }
  }
  return sim;
}

void Dataset::validate() const {
  if (items.empty()) throw FormatError("dataset has no items");
  if (feature_dim < 1) throw FormatError("feature_dim must be >= 1");
  std::set<std::string> ids;
  std::size_t g = 0;
  for (const auto& it : items) {
    if (!ids.insert(it.id).second) throw FormatError("duplicate item id '" + it.id + "'");
    const auto& m = it.motion;
    if (m.frames() < 1) throw FormatError("motion '" + it.id + "' has no frames");
    if (m.dim() != feature_dim) {
      throw FormatError("motion '" + it.id + "' has dim " + std::to_string(m.dim()) +
                        ", expected " + std::to_string(feature_dim));
    }
    if (!m.data.allFinite()) throw FormatError("motion '" + it.id + "' has non-finite values");
    if (m.joints) {
      if (m.joints->rows() != m.frames() || m.joints->cols() != 3 * joint_count) {
        throw FormatError("joints of '" + it.id + "' have shape " + shape_str(*m.joints));
      }
    }
    if (it.texts.empty()) throw FormatError("motion '" + it.id + "' has no text");
    for (const auto& t : it.texts) {
      if (t.global_index != g++) throw FormatError("text indices of '" + it.id + "' out of order");
      if (t.sent_emb.size() != sent_emb_dim) {
        throw FormatError("sentence embedding of '" + it.id + "' has wrong dimension");
      }
      if (std::abs(t.sent_emb.norm() - 1.0) > 1e-5) {
        throw FormatError("sentence embedding of '" + it.id + "' is not unit norm");
      }
      if (t.token_feats && t.token_feats->cols() != text_feat_dim) {
        throw FormatError("token features of '" + it.id + "' have wrong dimension");
      }
    }
  }
  if (text_sim) {
    const auto n = static_cast<Eigen::Index>(g);
    if (text_sim->rows() != n || text_sim->cols() != n) throw FormatError("text_sim has wrong shape");
    for (Eigen::Index i = 0; i < n; ++i) {
      if (std::abs((*text_sim)(i, i) - 1.0) > 1e-5) throw FormatError("text_sim diagonal is not 1");
      for (Eigen::Index j = i + 1; j < n; ++j) {
        if (std::abs((*text_sim)(i, j) - (*text_sim)(j, i)) > 1e-6) {
          throw FormatError("text_sim is not symmetric");
        }
      }
    }
  }
}

// ---- directory format ---------------------------------------------------------------

Dataset load_dataset(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw FormatError(dir.string() + ": not a directory");
  const fs::path texts_path = dir / "texts.jsonl";
  if (!fs::exists(texts_path) || fs::file_size(texts_path) == 0) {
    throw FormatError(dir.string() + ": no items");
  }
  const fs::path meta_path = dir / "meta.json";
  json meta;
  try {
    meta = json::parse(io::read_text_file(meta_path));
  } catch (const json::exception& e) {
    throw FormatError(meta_path.string() + ": " + e.what());
  }

  Dataset ds;
  try {
    ds.feature_dim = meta.at("feature_dim").get<int>();
    ds.joint_count = meta.value("joint_count", 0);
    ds.text_feat_dim = meta.value("text_feat_dim", 0);
    ds.sent_emb_dim = meta.at("sent_emb_dim").get<int>();
    ds.fps = meta.value("fps", 20.0);
  } catch (const json::exception& e) {
    throw FormatError(meta_path.string() + ": " + e.what());
  }

  std::ifstream in(texts_path);
  std::string line;
  std::size_t lineno = 0;
  std::size_t g = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    Item item;
    std::vector<std::string> texts;
    try {
      json j = json::parse(line);
      item.id = j.at("id").get<std::string>();
      item.split = parse_split(j.at("split").get<std::string>());
      texts = j.at("texts").get<std::vector<std::string>>();
    } catch (const json::exception& e) {
      throw FormatError(texts_path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    item.motion.data = io::load_matrix(dir / "motions" / (item.id + ".mtx"));
    if (fs::path jp = dir / "joints" / (item.id + ".mtx"); fs::exists(jp)) {
      item.motion.joints = io::load_matrix(jp);
    }
    for (std::size_t k = 0; k < texts.size(); ++k) {
      TextEntry te;
      te.text = texts[k];
      te.global_index = g++;
      fs::path fp = dir / "text_feats" / (item.id + "_" + std::to_string(k) + ".mtx");
      if (ds.text_feat_dim > 0 && fs::exists(fp)) te.token_feats = io::load_matrix(fp);
      item.texts.push_back(std::move(te));
    }
    ds.items.push_back(std::move(item));
  }
  if (ds.items.empty()) throw FormatError(dir.string() + ": no items");

  const fs::path emb_path = dir / "sent_emb.mtx";
  Matrix emb = io::load_matrix(emb_path);
  if (emb.rows() != static_cast<Eigen::Index>(g) || emb.cols() != ds.sent_emb_dim) {
    throw FormatError(emb_path.string() + ": shape " + shape_str(emb) + ", expected [" +
                      std::to_string(g) + "x" + std::to_string(ds.sent_emb_dim) + "]");
  }
  for (auto& it : ds.items) {
    for (auto& t : it.texts) {
      Vector v = emb.row(static_cast<Eigen::Index>(t.global_index)).transpose();
      double n = v.norm();
      if (n == 0.0) throw FormatError(emb_path.string() + ": zero-norm row for '" + it.id + "'");
      if (std::abs(n - 1.0) > 1e-6) v /= n;
      t.sent_emb = std::move(v);
    }
  }
  if (fs::path sp = dir / "text_sim.mtx"; fs::exists(sp)) ds.text_sim = io::load_matrix(sp);

  try {
    ds.validate();
  } catch (const FormatError& e) {
    throw FormatError(dir.string() + ": " + e.what());
  }
  return ds;
}

void save_dataset(const Dataset& ds, const fs::path& dir) {
  ds.validate();
  fs::create_directories(dir / "motions");
  json meta;
  meta["feature_dim"] = ds.feature_dim;
  meta["sent_emb_dim"] = ds.sent_emb_dim;
  meta["fps"] = ds.fps;
  if (ds.joint_count > 0) meta["joint_count"] = ds.joint_count;
  if (ds.text_feat_dim > 0) meta["text_feat_dim"] = ds.text_feat_dim;
  json splits = {{"train", 0}, {"val", 0}, {"test", 0}};
  for (const auto& it : ds.items) {
    auto key = std::string(split_name(it.split));
    splits[key] = splits[key].get<int>() + 1;
  }
  meta["splits"] = splits;
  io::write_text_file(dir / "meta.json", meta.dump(2) + "\n");

  std::ostringstream lines;
  Matrix emb(static_cast<Eigen::Index>(ds.text_count()), ds.sent_emb_dim);
  for (const auto& it : ds.items) {
    json j;
    j["id"] = it.id;
    j["split"] = split_name(it.split);
    json texts = json::array();
    for (std::size_t k = 0; k < it.texts.size(); ++k) {
      const auto& t = it.texts[k];
      texts.push_back(t.text);
      emb.row(static_cast<Eigen::Index>(t.global_index)) = t.sent_emb.transpose();
      if (t.token_feats) {
        fs::create_directories(dir / "text_feats");
        io::save_matrix(dir / "text_feats" / (it.id + "_" + std::to_string(k) + ".mtx"),
                        *t.token_feats);
      }
    }
    j["texts"] = texts;
    lines << j.dump() << "\n";
    io::save_matrix(dir / "motions" / (it.id + ".mtx"), it.motion.data);
    if (it.motion.joints) {
      fs::create_directories(dir / "joints");
      io::save_matrix(dir / "joints" / (it.id + ".mtx"), *it.motion.joints);
    }
  }
  io::write_text_file(dir / "texts.jsonl", lines.str());
  io::save_matrix(dir / "sent_emb.mtx", emb);
  if (ds.text_sim) io::save_matrix(dir / "text_sim.mtx", *ds.text_sim);
}

// ---- Vocabulary ----------------------------------------------------------------------

Vocabulary::Vocabulary(std::vector<std::string> words) : words_(std::move(words)) {
  std::sort(words_.begin(), words_.end());
  words_.erase(std::unique(words_.begin(), words_.end()), words_.end());
}

Vocabulary Vocabulary::build(const Dataset& ds, std::optional<Split> split) {
  std::vector<std::string> words;
  for (const auto& it : ds.items) {
    if (split && it.split != *split) continue;
    for (const auto& t : it.texts) {
      auto toks = tokenize(t.text);
      words.insert(words.end(), toks.begin(), toks.end());
    }
  }
  return Vocabulary(std::move(words));
}

std::vector<std::string> Vocabulary::tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c) || c == '_' || c >= 0x80) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

int Vocabulary::id(std::string_view word) const {
  auto it = std::lower_bound(words_.begin(), words_.end(), word);
  if (it == words_.end() || *it != word) return 0;
  return static_cast<int>(it - words_.begin()) + 1;
}

std::vector<int> Vocabulary::encode(std::string_view text) const {
  std::vector<int> ids;
  for (const auto& w : tokenize(text)) ids.push_back(id(w));
  return ids;
}

// ---- synthetic generator --------------------------------------------------------------

int SyntheticConfig::levels() const {
  return (vocab_size - 1) / std::max(1, latent_factors * synonyms);
}

nlohmann::json to_json(const SyntheticConfig& c) {
  return {{"n_items", c.n_items},         {"latent_factors", c.latent_factors},
          {"motion_dim", c.motion_dim},   {"vocab_size", c.vocab_size},
          {"synonyms", c.synonyms},       {"frames_min", c.frames_min},
          {"frames_max", c.frames_max},   {"texts_per_item", c.texts_per_item},
          {"joint_count", c.joint_count}, {"paraphrase_rate", c.paraphrase_rate},
          {"noise", c.noise},             {"val_fraction", c.val_fraction},
          {"test_fraction", c.test_fraction}, {"seed", c.seed}};
}

SyntheticConfig synthetic_config_from_json(const nlohmann::json& j) {
  SyntheticConfig c;
  if (!j.is_object()) throw ConfigError("synthetic config must be a JSON object");
  try {
    c.n_items = j.value("n_items", c.n_items);
    c.latent_factors = j.value("latent_factors", c.latent_factors);
    c.motion_dim = j.value("motion_dim", c.motion_dim);
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.synonyms = j.value("synonyms", c.synonyms);
    c.frames_min = j.value("frames_min", c.frames_min);
    c.frames_max = j.value("frames_max", c.frames_max);
    c.texts_per_item = j.value("texts_per_item", c.texts_per_item);
    c.joint_count = j.value("joint_count", c.joint_count);
    c.paraphrase_rate = j.value("paraphrase_rate", c.paraphrase_rate);
    c.noise = j.value("noise", c.noise);
    c.val_fraction = j.value("val_fraction", c.val_fraction);
    c.test_fraction = j.value("test_fraction", c.test_fraction);
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("synthetic config: ") + e.what());
  }
  c.validate();
  return c;
}

void SyntheticConfig::validate() const {
  auto need = [](bool ok, const char* msg) {
    if (!ok) throw ConfigError(std::string("synthetic config: ") + msg);
  };
  need(n_items >= 1, "n_items must be >= 1");
  need(latent_factors >= 1, "latent_factors must be >= 1");
  need(motion_dim >= 1, "motion_dim must be >= 1");
  need(synonyms >= 1, "synonyms must be >= 1");
  need(levels() >= 2, "vocab_size too small for factors x synonyms x 2 levels");
  need(frames_min >= 1 && frames_max >= frames_min, "frames range invalid");
  need(texts_per_item >= 1, "texts_per_item must be >= 1");
  need(joint_count >= 0, "joint_count must be >= 0");
  need(paraphrase_rate >= 0.0 && paraphrase_rate <= 1.0, "paraphrase_rate must be in [0,1]");
  need(noise >= 0.0, "noise must be >= 0");
  need(val_fraction >= 0.0 && test_fraction >= 0.0 && val_fraction + test_fraction <= 1.0,
       "split fractions invalid");
}

namespace {

std::string codeword(int factor, int level, int synonym) {
  std::string w = "f" + std::to_string(factor) + "l" + std::to_string(level);
  w.push_back(static_cast<char>('a' + synonym));
  return w;
}

}  // namespace

Dataset generate_synthetic(const SyntheticConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const int k = cfg.latent_factors;
  const int dim = cfg.motion_dim;
  const int levels = cfg.levels();

  // Fixed, dataset-wide maps from factors to per-feature amplitude,
  // frequency and offset.
  const double inv_sqrt_k = 1.0 / std::sqrt(static_cast<double>(k));
  Matrix amp_map(dim, k), freq_map(dim, k), off_map(dim, k);
  for (auto* m : {&amp_map, &freq_map, &off_map}) {
    for (Eigen::Index i = 0; i < m->size(); ++i) m->data()[i] = normal(rng) * inv_sqrt_k;
  }
  Vector base_freq(dim);
  for (int j = 0; j < dim; ++j) base_freq(j) = 0.5 + 1.0 * unif(rng);
  Matrix bone_dirs(std::max(cfg.joint_count, 1), 3);
  for (Eigen::Index i = 0; i < bone_dirs.size(); ++i) bone_dirs.data()[i] = normal(rng);

  const int n = cfg.n_items;
  const int n_para = static_cast<int>(std::lround(cfg.paraphrase_rate * n));
  // Items [n - n_para, n) copy the factors of an earlier, original item.
  std::vector<int> source(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) source[static_cast<std::size_t>(i)] = i;
  const int n_orig = std::max(1, n - n_para);
  std::vector<Vector> factors;
  factors.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    if (i >= n_orig) {
      int s = static_cast<int>(rng() % static_cast<std::uint64_t>(n_orig));
      source[static_cast<std::size_t>(i)] = s;
      factors.push_back(factors[static_cast<std::size_t>(s)]);
    } else {
      Vector f(k);
      for (int c = 0; c < k; ++c) f(c) = normal(rng);
      factors.push_back(std::move(f));
    }
  }

  // Interleave paraphrase items across the item order so every split sees them.
  std::vector<int> order(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  std::shuffle(order.begin(), order.end(), rng);

  Dataset ds;
  ds.feature_dim = dim;
  ds.joint_count = cfg.joint_count;
  ds.sent_emb_dim = k;
  ds.fps = 20.0;
  const int n_test = static_cast<int>(std::lround(cfg.test_fraction * n));
  const int n_val = static_cast<int>(std::lround(cfg.val_fraction * n));
  const int n_train = n - n_test - n_val;

  std::size_t g = 0;
  for (int pos = 0; pos < n; ++pos) {
    const Vector& f = factors[static_cast<std::size_t>(order[static_cast<std::size_t>(pos)])];
    Item item;
    char idbuf[32];
    std::snprintf(idbuf, sizeof idbuf, "s%06d", pos);
    item.id = idbuf;
    item.split = pos < n_train ? Split::Train : (pos < n_train + n_val ? Split::Val : Split::Test);

    const int frames =
        cfg.frames_min + static_cast<int>(rng() % static_cast<std::uint64_t>(cfg.frames_max - cfg.frames_min + 1));
    Vector amp = (0.25 + 0.25 * (amp_map * f).array().tanh()).matrix();
    Vector freq = (base_freq.array() * (1.0 + 0.5 * (freq_map * f).array().tanh())).matrix();
    Vector offset = (0.8 * (off_map * f).array().tanh()).matrix();
    Matrix motion(frames, dim);
    for (int j = 0; j < dim; ++j) {
      double phase = 2.0 * std::numbers::pi * unif(rng);
      for (int t = 0; t < frames; ++t) {
        motion(t, j) = offset(j) + amp(j) * std::sin(freq(j) * t + phase) + cfg.noise * normal(rng);
      }
    }
    item.motion.data = io::round_to_f32(motion);
    if (cfg.joint_count > 0) {
      Matrix joints(frames, 3 * cfg.joint_count);
      for (int t = 0; t < frames; ++t) {
        for (int jn = 0; jn < cfg.joint_count; ++jn) {
          for (int c = 0; c < 3; ++c) {
            double rest = c == 1 ? 0.3 * jn : 0.1 * bone_dirs(jn, c);
            joints(t, 3 * jn + c) = rest + 0.15 * motion(t, (3 * jn + c) % dim);
          }
        }
      }
      item.motion.joints = io::round_to_f32(joints);
    }

    Vector sent = f.normalized();
    for (int c = 0; c < k; ++c) sent(c) = static_cast<float>(sent(c));
    const int n_texts =
        1 + static_cast<int>(rng() % static_cast<std::uint64_t>(cfg.texts_per_item));
    for (int tx = 0; tx < n_texts; ++tx) {
      std::string text;
      for (int c = 0; c < k; ++c) {
        // Normal CDF gives equiprobable quantization levels.
        double u = 0.5 * std::erfc(-f(c) / std::numbers::sqrt2);
        int level = std::clamp(static_cast<int>(u * levels), 0, levels - 1);
        int syn = static_cast<int>(rng() % static_cast<std::uint64_t>(cfg.synonyms));
        if (c) text.push_back(' ');
        text += codeword(c, level, syn);
      }
      TextEntry te;
      te.text = std::move(text);
      te.sent_emb = sent;
      te.global_index = g++;
      item.texts.push_back(std::move(te));
    }
    ds.items.push_back(std::move(item));
  }
  ds.validate();
  return ds;
}

// ---- similarity ------------------------------------------------------------------------

Matrix text_similarity_matrix(const Matrix& embeddings) {
  const Eigen::Index n = embeddings.rows();
  Vector norms = embeddings.rowwise().norm();
  for (Eigen::Index i = 0; i < n; ++i) {
    if (norms(i) == 0.0) throw Error("zero-norm sentence embedding at row " + std::to_string(i));
  }
  Matrix unit = embeddings.array().colwise() / norms.array();
  Matrix sim = unit * unit.transpose();
  for (Eigen::Index i = 0; i < n; ++i) {
    sim(i, i) = 1.0;
    for (Eigen::Index j = i + 1; j < n; ++j) {
      double s = std::clamp(0.5 * (sim(i, j) + sim(j, i)), -1.0, 1.0);
      sim(i, j) = sim(j, i) = s;
    }
  }
  return sim;
}

std::uint64_t unique_pair_count(std::uint64_t n) { return n < 2 ? 0 : n * (n - 1) / 2; }

SimilarityStats similarity_stats(const Matrix& sim, std::span<const double> thresholds) {
  if (sim.rows() != sim.cols()) throw Error("similarity_stats: matrix must be square");
  SimilarityStats st;
  st.n = static_cast<std::uint64_t>(sim.rows());
  st.pairs = unique_pair_count(st.n);
  st.thresholds.assign(thresholds.begin(), thresholds.end());
  st.above.assign(thresholds.size(), 0);
  for (Eigen::Index i = 0; i < sim.rows(); ++i) {
    for (Eigen::Index j = i + 1; j < sim.cols(); ++j) {
      for (std::size_t t = 0; t < thresholds.size(); ++t) {
        if (sim(i, j) > thresholds[t]) ++st.above[t];
      }
    }
  }
  for (auto c : st.above) {
    st.fractions.push_back(st.pairs ? static_cast<double>(c) / static_cast<double>(st.pairs) : 0.0);
  }
  return st;
}

double max_offdiag(const Matrix& sim) {
  double best = -1.0;
  for (Eigen::Index i = 0; i < sim.rows(); ++i) {
    for (Eigen::Index j = 0; j < sim.cols(); ++j) {
      if (i != j) best = std::max(best, sim(i, j));
    }
  }
  return best;
}

}  // namespace tmr::data
