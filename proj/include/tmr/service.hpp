// Copyright (c) 2026 The TMR-desk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Read-only search service over an index + checkpoint snapshot.
//
//   GET  /api/search?q=<text>&k=<int>   [{id, score, text}]
//   GET  /api/motion/<id>               {id, fps, joints: frames × J × 3}
//   POST /api/localize                  {motion_id, query, window?, stride?}
//   GET  /api/meta                      index statistics

#pragma once

#include "tmr/dataio.hpp"
#include "tmr/localization.hpp"
#include "tmr/model.hpp"
#include "tmr/retrieval.hpp"

#include "json.hpp"

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>

namespace tmr::service {

struct Snapshot {
  retrieval::Gallery gallery;
  nlohmann::json index_extra;
  std::unique_ptr<model::TmrModel> model;
  std::optional<data::Dataset> dataset;  // source of /api/motion and /api/localize
  std::unordered_map<std::string, std::size_t> item_by_id;

  static std::shared_ptr<const Snapshot> load(const std::filesystem::path& index_dir,
                                              const std::filesystem::path& ckpt_dir,
                                              const std::optional<std::filesystem::path>& data_dir);
};

struct Response {
  int status = 200;
  std::string body;
  std::string content_type = "application/json";
};

/// Top-k hits for a free-text query; shared by the CLI and the HTTP handler.
std::vector<retrieval::Hit> search(const Snapshot& s, const std::string& query, std::size_t k);
nlohmann::json hits_json(const Snapshot& s, const std::vector<retrieval::Hit>& hits);

class Api {
 public:
  explicit Api(std::shared_ptr<const Snapshot> snapshot) : s_(std::move(snapshot)) {}

  Response search(const std::optional<std::string>& q, const std::optional<std::string>& k) const;
  Response motion(const std::string& id) const;
  Response localize(const std::string& body) const;
  Response meta() const;

  const Snapshot& snapshot() const { return *s_; }

 private:
  std::shared_ptr<const Snapshot> s_;
};

struct ServeOptions {
  std::string host = "127.0.0.1";
  int port = 8080;  // 0 binds any free port
  std::optional<std::filesystem::path> static_dir;
};

class HttpServer {
 public:
  HttpServer(Api api, ServeOptions opt);
  ~HttpServer();
  HttpServer(const HttpServer&) = delete;
  HttpServer& operator=(const HttpServer&) = delete;

  /// Binds the socket; returns the bound port.
  int bind();
  /// Serves until stop(); bind() must have succeeded.
  void run();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace tmr::service
