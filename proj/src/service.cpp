// Copyright (c) 2026 The TMR-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "tmr/service.hpp"

#include "httplib.h"

#include <algorithm>
#include <charconv>

namespace tmr::service {

using nlohmann::json;

std::shared_ptr<const Snapshot> Snapshot::load(const std::filesystem::path& index_dir,
                                               const std::filesystem::path& ckpt_dir,
                                               const std::optional<std::filesystem::path>& data_dir) {
  auto s = std::make_shared<Snapshot>();
  s->gallery = retrieval::Gallery::load(index_dir, &s->index_extra);
  s->model = std::make_unique<model::TmrModel>(model::TmrModel::load(ckpt_dir));
  if (s->gallery.dim() != s->model->config().latent_dim) {
    throw FormatError("index dimension " + std::to_string(s->gallery.dim()) +
                      " does not match checkpoint latent_dim " +
                      std::to_string(s->model->config().latent_dim));
  }
  if (data_dir) {
    s->dataset = data::load_dataset(*data_dir);
    for (std::size_t i = 0; i < s->dataset->items.size(); ++i) s->item_by_id[s->dataset->items[i].id] = i;
  }
  return s;
}

std::vector<retrieval::Hit> search(const Snapshot& s, const std::string& query, std::size_t k) {
  if (k == 0) return {};
  const auto dist = s.model->encode_text(std::string_view(query));
  return retrieval::rank(model::retrieval_embedding(dist), s.gallery, k);
}

json hits_json(const Snapshot& s, const std::vector<retrieval::Hit>& hits) {
  json out = json::array();
  for (const auto& h : hits) {
    out.push_back({{"id", h.id}, {"score", h.score}, {"text", s.gallery.texts[h.index]}});
  }
  return out;
}

namespace {

Response error(int status, const std::string& msg) { return {status, json{{"error", msg}}.dump()}; }
Response ok(const json& j) { return {200, j.dump()}; }

bool blank(const std::string& s) {
  return std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c) != 0; });
}

std::optional<long> parse_int(const std::string& s) {
  long v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) return std::nullopt;
  return v;
}

}  // namespace

Response Api::search(const std::optional<std::string>& q, const std::optional<std::string>& k) const {
  if (!q || blank(*q)) return error(400, "query parameter q must be non-empty");
  long kk = 10;
  if (k) {
    auto v = parse_int(*k);
    if (!v || *v < 0) return error(400, "k must be a non-negative integer");
    kk = *v;
  }
  const auto n = std::min<std::size_t>(static_cast<std::size_t>(kk), s_->gallery.size());
  return ok(hits_json(*s_, service::search(*s_, *q, n)));
}

Response Api::motion(const std::string& id) const {
  if (!s_->dataset) return error(404, "no dataset loaded; motions are unavailable");
  auto it = s_->item_by_id.find(id);
  if (it == s_->item_by_id.end()) return error(404, "unknown motion id '" + id + "'");
  const auto& item = s_->dataset->items[it->second];
  if (!item.motion.joints) return error(404, "motion '" + id + "' has no joint positions");
  const Matrix& jm = *item.motion.joints;
  const Eigen::Index joints = jm.cols() / 3;
  json frames = json::array();
  for (Eigen::Index f = 0; f < jm.rows(); ++f) {
    json frame = json::array();
    for (Eigen::Index j = 0; j < joints; ++j) {
      frame.push_back({jm(f, 3 * j), jm(f, 3 * j + 1), jm(f, 3 * j + 2)});
    }
    frames.push_back(std::move(frame));
  }
  return ok({{"id", id}, {"fps", s_->dataset->fps}, {"joints", std::move(frames)}});
}

Response Api::localize(const std::string& body) const {
  json req;
  try {
    req = json::parse(body);
  } catch (const json::exception&) {
    return error(400, "request body must be JSON");
  }
  if (!req.is_object() || !req.contains("motion_id") || !req["motion_id"].is_string() ||
      !req.contains("query") || !req["query"].is_string()) {
    return error(400, "motion_id and query strings are required");
  }
  const std::string query = req["query"];
  if (blank(query)) return error(400, "query must be non-empty");
  if (!s_->dataset) return error(404, "no dataset loaded; motions are unavailable");
  auto it = s_->item_by_id.find(req["motion_id"].get<std::string>());
  if (it == s_->item_by_id.end()) return error(404, "unknown motion id");
  int window = 20, stride = 1;
  try {
    window = req.value("window", window);
    stride = req.value("stride", stride);
  } catch (const json::exception&) {
    return error(400, "window and stride must be integers");
  }
  const Matrix& motion = s_->dataset->items[it->second].motion.data;
  const int length = static_cast<int>(motion.rows());
  if (window < 1 || stride < 1) return error(400, "window and stride must be >= 1");
  if (window > length) {
    return error(400, "window " + std::to_string(window) + " exceeds motion length " +
                           std::to_string(length));
  }
  const Vector text = model::retrieval_embedding(s_->model->encode_text(std::string_view(query)));
  const auto enc = loc::model_crop_encoder(*s_->model);
  const auto curve = loc::sliding_similarity(text, motion, enc, window, stride);
  const auto best_it = std::max_element(curve.values.begin(), curve.values.end());
  const int placement = static_cast<int>(best_it - curve.values.begin());
  const auto seg = loc::centered_window(placement * stride, window, length);
  json out = {{"motion_id", it->first},
              {"frames", length},
              {"curve", curve.values},
              {"window", window},
              {"stride", stride},
              {"best", {{"start", seg.start}, {"end", seg.end}, {"score", *best_it}, {"index", placement}}}};
  return ok(out);
}

Response Api::meta() const {
  const auto& g = s_->gallery;
  json m = {{"count", g.size()},
            {"d", g.dim()},
            {"latent_dim", s_->model->config().latent_dim},
            {"has_dataset", s_->dataset.has_value()}};
  if (s_->dataset) {
    const auto& ds = *s_->dataset;
    m["fps"] = ds.fps;
    m["joint_count"] = ds.joint_count;
    json bones = json::array();
    for (int j = 1; j < ds.joint_count; ++j) bones.push_back({j - 1, j});
    m["bones"] = bones;
  }
  if (!s_->index_extra.is_null()) m["index"] = s_->index_extra;
  return ok(m);
}

// ---- HTTP ----------------------------------------------------------------------------------

struct HttpServer::Impl {
  Api api;
  ServeOptions opt;
  httplib::Server server;
  int port = -1;
};

namespace {

void send(httplib::Response& res, const Response& r) {
  res.status = r.status;
  res.set_content(r.body, r.content_type);
}

template <typename F>
void guarded(httplib::Response& res, F&& f) {
  try {
    send(res, f());
  } catch (const std::exception& e) {
    send(res, error(500, e.what()));
  }
}

std::optional<std::string> param(const httplib::Request& req, const char* key) {
  if (!req.has_param(key)) return std::nullopt;
  return req.get_param_value(key);
}

}  // namespace

HttpServer::HttpServer(Api api, ServeOptions opt) : impl_(new Impl{std::move(api), std::move(opt), {}, -1}) {
  auto& srv = impl_->server;
  const Api* a = &impl_->api;
  srv.Get("/api/search", [a](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] { return a->search(param(req, "q"), param(req, "k")); });
  });
  srv.Get(R"(/api/motion/(.+))", [a](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] { return a->motion(req.matches[1]); });
  });
  srv.Post("/api/localize", [a](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] { return a->localize(req.body); });
  });
  srv.Get("/api/meta", [a](const httplib::Request&, httplib::Response& res) {
    guarded(res, [&] { return a->meta(); });
  });
  if (impl_->opt.static_dir) {
    if (!srv.set_mount_point("/", impl_->opt.static_dir->string())) {
      throw ConfigError("static directory not found: " + impl_->opt.static_dir->string());
    }
  }
}

HttpServer::~HttpServer() = default;

int HttpServer::bind() {
  auto& o = impl_->opt;
  impl_->port = o.port == 0 ? impl_->server.bind_to_any_port(o.host)
                            : (impl_->server.bind_to_port(o.host, o.port) ? o.port : -1);
  if (impl_->port < 0) throw Error("cannot bind " + o.host + ":" + std::to_string(o.port));
  return impl_->port;
}

void HttpServer::run() {
  if (impl_->port < 0) throw Error("HttpServer::run before bind");
  impl_->server.listen_after_bind();
}

void HttpServer::stop() { impl_->server.stop(); }

}  // namespace tmr::service
