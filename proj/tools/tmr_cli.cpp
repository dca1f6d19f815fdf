// Copyright (c) 2026 The TMR-desk Authors
// SPDX-License-Identifier: Apache-2.0
//
// tmr: train, evaluate, index, search, localize and serve.

#include "tmr/dataio.hpp"
#include "tmr/localization.hpp"
#include "tmr/matrix_io.hpp"
#include "tmr/retrieval.hpp"
#include "tmr/service.hpp"
#include "tmr/trainer.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace tmr;

namespace {

json read_json(const fs::path& p) {
  try {
    return json::parse(io::read_text_file(p));
  } catch (const json::exception& e) {
    throw ConfigError(p.string() + ": " + e.what());
  }
}

void emit(const json& j, const std::string& out) {
  if (out.empty() || out == "-") {
    std::cout << j.dump(2) << "\n";
  } else {
    io::write_text_file(out, j.dump(2) + "\n");
  }
}

std::pair<std::string, int> parse_addr(const std::string& addr) {
  const auto colon = addr.rfind(':');
  if (colon == std::string::npos) throw ConfigError("--addr must be HOST:PORT");
  try {
    return {addr.substr(0, colon), std::stoi(addr.substr(colon + 1))};
  } catch (const std::exception&) {
    throw ConfigError("bad port in --addr " + addr);
  }
}

service::HttpServer* g_server = nullptr;
extern "C" void on_signal(int) {
  if (g_server) g_server->stop();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Text-to-motion retrieval"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset");
  std::string synth_cfg, synth_out;
  std::optional<std::uint64_t> synth_seed;
  synth->add_option("--config", synth_cfg, "Synthetic config JSON")->check(CLI::ExistingFile);
  synth->add_option("--out", synth_out, "Output dataset directory")->required();
  synth->add_option("--seed", synth_seed, "Override the config seed");

  // train
  auto* train = app.add_subcommand("train", "Train a model");
  std::string train_cfg, train_data, train_out, train_log;
  std::optional<int> train_epochs;
  std::optional<std::uint64_t> train_seed;
  bool train_quiet = false;
  train->add_option("--config", train_cfg, "Training config JSON")->check(CLI::ExistingFile);
  train->add_option("--data", train_data, "Dataset directory")->required();
  train->add_option("--out", train_out, "Checkpoint directory")->required();
  train->add_option("--log", train_log, "Per-step JSONL loss log (default CKPT/train_log.jsonl)");
  train->add_option("--epochs", train_epochs);
  train->add_option("--seed", train_seed);
  train->add_flag("--quiet", train_quiet);

  // eval
  auto* eval = app.add_subcommand("eval", "Retrieval metrics on a split");
  std::string eval_ckpt, eval_data, eval_out, eval_split = "test", eval_protocol = "a", eval_dir = "both";
  retrieval::ProtocolConfig eval_pc;
  eval->add_option("--ckpt", eval_ckpt)->required();
  eval->add_option("--data", eval_data)->required();
  eval->add_option("--split", eval_split)->capture_default_str();
  eval->add_option("--protocol", eval_protocol, "a, b, c or d")->capture_default_str();
  eval->add_option("--direction", eval_dir, "t2m, m2t or both")->capture_default_str();
  eval->add_option("--seed", eval_pc.seed)->capture_default_str();
  eval->add_option("--threshold", eval_pc.correctness_threshold)->capture_default_str();
  eval->add_option("--subset-size", eval_pc.subset_size)->capture_default_str();
  eval->add_option("--batch-size", eval_pc.batch_size)->capture_default_str();
  eval->add_option("--out", eval_out, "Report path (default stdout)");

  // index
  auto* index = app.add_subcommand("index", "Embed a split into a search index");
  std::string index_ckpt, index_data, index_split = "test", index_out;
  index->add_option("--ckpt", index_ckpt)->required();
  index->add_option("--data", index_data)->required();
  index->add_option("--split", index_split, "train, val, test or all")->capture_default_str();
  index->add_option("--out", index_out)->required();

  // search
  auto* search = app.add_subcommand("search", "Query an index with free text");
  std::string search_index, search_ckpt, search_query;
  std::size_t search_k = 10;
  search->add_option("--index", search_index)->required();
  search->add_option("--ckpt", search_ckpt, "Checkpoint (default: the one the index was built from)");
  search->add_option("--query", search_query)->required();
  search->add_option("--k", search_k)->capture_default_str();

  // localize
  auto* localize = app.add_subcommand("localize", "Find a text query inside a long motion");
  std::string loc_ckpt, loc_motion, loc_query, loc_svg, loc_truth, loc_out;
  int loc_window = 20, loc_stride = 1;
  localize->add_option("--ckpt", loc_ckpt)->required();
  localize->add_option("--motion", loc_motion, "Motion feature matrix (.mtx)")->required()->check(CLI::ExistingFile);
  localize->add_option("--query", loc_query)->required();
  localize->add_option("--window", loc_window, "Sliding-curve window")->capture_default_str();
  localize->add_option("--stride", loc_stride, "Sliding-curve stride")->capture_default_str();
  localize->add_option("--truth", loc_truth, "Ground-truth span START:END for IoU and the plot");
  localize->add_option("--svg", loc_svg, "Write a similarity plot");
  localize->add_option("--out", loc_out, "Result path (default stdout)");

  // ablate
  auto* ablate = app.add_subcommand("ablate", "Train and evaluate a grid of config variants");
  std::string abl_cfg, abl_grid, abl_data, abl_out, abl_protocol = "b", abl_split = "test";
  ablate->add_option("--config", abl_cfg, "Base training config")->check(CLI::ExistingFile);
  ablate->add_option("--grid", abl_grid, "JSON list of {name, overrides}")->check(CLI::ExistingFile);
  ablate->add_option("--data", abl_data)->required();
  ablate->add_option("--protocol", abl_protocol)->capture_default_str();
  ablate->add_option("--split", abl_split)->capture_default_str();
  ablate->add_option("--out", abl_out, "Result path (default stdout)");

  // serve
  auto* serve = app.add_subcommand("serve", "HTTP search service");
  std::string srv_index, srv_ckpt, srv_data, srv_addr = "127.0.0.1:8080", srv_static;
  serve->add_option("--index", srv_index)->required();
  serve->add_option("--ckpt", srv_ckpt, "Checkpoint (default: the one the index was built from)");
  serve->add_option("--data", srv_data, "Dataset for /api/motion and /api/localize");
  serve->add_option("--addr", srv_addr, "HOST:PORT (port 0 picks a free port)")->capture_default_str();
  serve->add_option("--static", srv_static, "Directory served at /");

  CLI11_PARSE(app, argc, argv);

  auto index_ckpt_path = [](const std::string& index_dir, const std::string& given) -> fs::path {
    if (!given.empty()) return given;
    json extra;
    retrieval::Gallery::load(index_dir, &extra);
    if (!extra.is_object() || !extra.contains("checkpoint")) {
      throw ConfigError("index does not record its checkpoint; pass --ckpt");
    }
    return extra["checkpoint"].get<std::string>();
  };

  try {
    if (*synth) {
      data::SyntheticConfig sc = synth_cfg.empty() ? data::SyntheticConfig{}
                                                   : data::synthetic_config_from_json(read_json(synth_cfg));
      if (synth_seed) sc.seed = *synth_seed;
      auto ds = data::generate_synthetic(sc);
      data::save_dataset(ds, synth_out);
      std::cerr << "wrote " << ds.items.size() << " items to " << synth_out << "\n";
    } else if (*train) {
      train::TrainConfig tc = train_cfg.empty() ? train::TrainConfig{}
                                                : train::train_config_from_json(read_json(train_cfg));
      if (train_epochs) tc.epochs = *train_epochs;
      if (train_seed) tc.seed = *train_seed;
      auto ds = data::load_dataset(train_data);
      int last_epoch = 0;
      auto res = train::train(ds, tc, [&](const train::StepLog& s) {
        if (!train_quiet && s.epoch != last_epoch) {
          last_epoch = s.epoch;
          std::cerr << "epoch " << s.epoch << " step " << s.step << " loss " << s.total << "\n";
        }
      });
      res.model.save(train_out, res.metadata(tc));
      train::write_log(train_log.empty() ? fs::path(train_out) / "train_log.jsonl" : fs::path(train_log),
                       res.log);
      if (res.aborted) {
        std::cerr << "training aborted: " << res.abort_reason << " (last good weights saved)\n";
        return 3;
      }
      std::cerr << "saved checkpoint to " << train_out << " (best epoch " << res.best_epoch << ")\n";
    } else if (*eval) {
      auto model = model::TmrModel::load(eval_ckpt);
      auto ds = data::load_dataset(eval_data);
      eval_pc.kind = retrieval::parse_protocol(eval_protocol);
      auto emb = retrieval::embed_split(model, ds, data::parse_split(eval_split));
      json report = {{"checkpoint", eval_ckpt},
                     {"data", eval_data},
                     {"split", eval_split},
                     {"protocol", eval_pc.to_json()},
                     {"seed", eval_pc.seed},
                     {"results", json::object()}};
      for (auto dir : {retrieval::Direction::TextToMotion, retrieval::Direction::MotionToText}) {
        const auto name = retrieval::direction_name(dir);
        if (eval_dir != "both" && retrieval::parse_direction(eval_dir) != dir) continue;
        report["results"][name] = retrieval::evaluate(emb, eval_pc, dir).to_json();
      }
      emit(report, eval_out);
    } else if (*index) {
      auto model = model::TmrModel::load(index_ckpt);
      auto ds = data::load_dataset(index_data);
      std::vector<std::size_t> items;
      if (index_split == "all") {
        for (std::size_t i = 0; i < ds.items.size(); ++i) items.push_back(i);
      } else {
        items = ds.indices(data::parse_split(index_split));
      }
      if (items.empty()) throw ConfigError("split '" + index_split + "' is empty");
      auto g = retrieval::index_items(model, ds, items);
      g.save(index_out, {{"checkpoint", fs::absolute(index_ckpt).lexically_normal().string()},
                         {"split", index_split}});
      std::cerr << "indexed " << g.size() << " motions into " << index_out << "\n";
    } else if (*search) {
      auto snap = service::Snapshot::load(search_index, index_ckpt_path(search_index, search_ckpt),
                                          std::nullopt);
      const auto k = std::min(search_k, snap->gallery.size());
      std::cout << service::hits_json(*snap, service::search(*snap, search_query, k)).dump(2) << "\n";
    } else if (*localize) {
      auto model = model::TmrModel::load(loc_ckpt);
      Matrix motion = io::load_matrix(loc_motion);
      const Vector text = model::retrieval_embedding(model.encode_text(std::string_view(loc_query)));
      const auto enc = loc::model_crop_encoder(model);
      auto curve = loc::sliding_similarity(text, motion, enc, loc_window, loc_stride);
      auto best = loc::localize_pyramid(text, motion, enc);
      json out = {{"query", loc_query},
                  {"frames", motion.rows()},
                  {"curve", loc::to_json(curve)},
                  {"best", {{"start", best.segment.start}, {"end", best.segment.end}, {"score", best.score}}}};
      std::optional<loc::Segment> truth;
      if (!loc_truth.empty()) {
        const auto c = loc_truth.find(':');
        if (c == std::string::npos) throw ConfigError("--truth must be START:END");
        truth = loc::Segment{std::stoi(loc_truth.substr(0, c)), std::stoi(loc_truth.substr(c + 1))};
        out["truth"] = {{"start", truth->start}, {"end", truth->end}};
        out["iou"] = loc::temporal_iou(best.segment, *truth);
      }
      if (!loc_svg.empty()) {
        io::write_text_file(loc_svg, loc::curve_svg(curve, static_cast<int>(motion.rows()), truth,
                                                    best.segment));
      }
      emit(out, loc_out);
    } else if (*ablate) {
      train::TrainConfig base = abl_cfg.empty() ? train::TrainConfig{}
                                                : train::train_config_from_json(read_json(abl_cfg));
      std::vector<train::AblationVariant> grid = train::default_ablation_grid();
      if (!abl_grid.empty()) {
        grid.clear();
        for (const auto& v : read_json(abl_grid)) {
          grid.push_back({v.at("name").get<std::string>(), v.value("overrides", json::object())});
        }
      }
      auto ds = data::load_dataset(abl_data);
      retrieval::ProtocolConfig pc;
      pc.kind = retrieval::parse_protocol(abl_protocol);
      json rows = json::array();
      for (const auto& r : train::ablate(ds, base, grid, pc, data::parse_split(abl_split))) {
        rows.push_back(r.to_json());
      }
      emit({{"protocol", pc.to_json()}, {"split", abl_split}, {"variants", rows}}, abl_out);
    } else if (*serve) {
      auto [host, port] = parse_addr(srv_addr);
      std::optional<fs::path> data_dir;
      if (!srv_data.empty()) data_dir = srv_data;
      auto snap = service::Snapshot::load(srv_index, index_ckpt_path(srv_index, srv_ckpt), data_dir);
      service::ServeOptions opt{host, port, std::nullopt};
      if (!srv_static.empty()) opt.static_dir = srv_static;
      service::HttpServer server(service::Api(snap), opt);
      const int bound = server.bind();
      g_server = &server;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      std::cout << "listening on " << host << ":" << bound << std::endl;
      server.run();
      g_server = nullptr;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
