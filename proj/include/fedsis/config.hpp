// Copyright 2026 The fedsis Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedsis/server.hpp"

namespace fedsis {

struct DataConfig {
  std::uint64_t seed = 2024;
  std::size_t img_size = 32;
  std::vector<std::size_t> train_sizes{256, 256, 512};
  std::size_t test_size = 64;
  std::string cache_dir;  // empty: always regenerate
};

struct ExperimentConfig {
  Mode mode = Mode::PFedSIS;
  Ablation ablation;
  std::size_t sites = 3;
  std::size_t rounds = 40;
  std::size_t local_iters = 20;
  std::size_t batch_size = 8;
  double lr = 5e-3;
  double hn_lr = 1e-2;
  double sge_temperature = 1.0;
  std::size_t sens_cap = 64;
  bool sens_abs = true;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::size_t eval_interval = 5;
  LossWeights loss_weights;
  DistortPer distort_per = DistortPer::Batch;
  bool clamp_distort = true;
  OptimizerKind optimizer = OptimizerKind::Sgd;
  HypernetConfig hypernet;
  ModelConfig model;
  DataConfig data;
  std::string output_dir = "runs/default";
  bool trace = false;
  bool sequential = false;
  bool checkpoints = true;

  /// Ablation switches that actually apply in this mode.
  Ablation effective_ablation() const {
    if (mode == Mode::PFedSIS) return ablation;
    return {false, false, false};
  }

  SiteConfig site_config() const {
    const auto ab = effective_ablation();
    SiteConfig s;
    s.local_iters = local_iters;
    s.batch_size = batch_size;
    s.lr = lr;
    s.weights = loss_weights;
    s.use_ar = ab.gpd && ab.ape;
    s.use_csc = ab.sge;
    s.sens_abs = sens_abs;
    s.sens_cap = sens_cap;
    s.distort_per = distort_per;
    s.clamp_distort = clamp_distort;
    s.optimizer = optimizer;
    return s;
  }

  ServerConfig server_config() const { return {mode, effective_ablation(), hn_lr, sge_temperature, hypernet}; }

  void validate() const {
    auto fail = [](const std::string& m) { throw Error("config", m); };
    model.validate();
    if (mode == Mode::PFedSIS && ablation.ape && !ablation.gpd) fail("APE needs GPD (no personalized parameters without it)");
    if (sites == 0) fail("sites must be positive");
    if (rounds == 0) fail("rounds must be positive");
    if (local_iters == 0 || batch_size == 0) fail("local_iters and batch_size must be positive");
    if (!(lr >= 0.0) || !(hn_lr >= 0.0)) fail("learning rates must be non-negative");
    if (!(sge_temperature > 0.0)) fail("sge_temperature must be positive");
    if (seeds.empty()) fail("at least one seed is required");
    if (eval_interval == 0) fail("eval_interval must be positive");
    if (data.train_sizes.size() != sites) fail("data.train_sizes needs one entry per site");
    for (auto n : data.train_sizes)
      if (n == 0) fail("every site needs training samples");
    if (data.test_size == 0) fail("data.test_size must be positive");
    if (data.img_size != model.img_size) fail("data.img_size must equal model.img_size");
    if (model.in_channels != 3) fail("the synthetic data is RGB; model.in_channels must be 3");
    if (model.num_classes != kNumClasses) fail("the synthetic data has 4 classes");
    if (output_dir.empty()) fail("output_dir must not be empty");
  }
};

namespace detail {

// Reads known keys of a JSON object and rejects anything else.
class KeyReader {
 public:
  KeyReader(const nlohmann::json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j.is_object()) throw Error("config", where_ + " must be an object");
  }

  template <class V>
  void get(const char* key, V& out) {
    seen_.push_back(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<V>();
    } catch (const nlohmann::json::exception& e) {
      throw Error("config", where_ + key + ": " + e.what());
    }
  }

  void object(const char* key, const std::function<void(const nlohmann::json&, const std::string&)>& f) {
    seen_.push_back(key);
    if (j_.contains(key)) f(j_.at(key), where_ + key + ".");
  }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (std::find(seen_.begin(), seen_.end(), k) == seen_.end()) throw Error("config", "unknown key " + where_ + k);
    }
  }

 private:
  const nlohmann::json& j_;
  std::string where_;
  std::vector<std::string> seen_;
};

}  // namespace detail

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  detail::KeyReader r(j, "");
  std::string mode = mode_name(c.mode), distort_per = "batch", optimizer = "sgd";
  r.get("mode", mode);
  c.mode = parse_mode(mode);
  r.object("ablation", [&](const nlohmann::json& a, const std::string& w) {
    detail::KeyReader ar(a, w);
    ar.get("gpd", c.ablation.gpd);
    ar.get("ape", c.ablation.ape);
    ar.get("sge", c.ablation.sge);
    ar.finish();
  });
  r.get("sites", c.sites);
  r.get("rounds", c.rounds);
  r.get("local_iters", c.local_iters);
  r.get("batch_size", c.batch_size);
  r.get("lr", c.lr);
  r.get("hn_lr", c.hn_lr);
  r.get("sge_temperature", c.sge_temperature);
  r.get("sens_cap", c.sens_cap);
  r.get("sens_abs", c.sens_abs);
  r.get("seeds", c.seeds);
  r.get("eval_interval", c.eval_interval);
  r.object("loss_weights", [&](const nlohmann::json& a, const std::string& w) {
    detail::KeyReader lr(a, w);
    lr.get("seg", c.loss_weights.seg);
    lr.get("ar", c.loss_weights.ar);
    lr.get("csc", c.loss_weights.csc);
    lr.finish();
  });
  r.get("distort_per", distort_per);
  if (distort_per == "batch") c.distort_per = DistortPer::Batch;
  else if (distort_per == "round") c.distort_per = DistortPer::Round;
  else throw Error("config", "distort_per must be batch or round");
  r.get("clamp_distort", c.clamp_distort);
  r.get("optimizer", optimizer);
  if (optimizer == "sgd") c.optimizer = OptimizerKind::Sgd;
  else if (optimizer == "adamw") c.optimizer = OptimizerKind::AdamW;
  else throw Error("config", "optimizer must be sgd or adamw");
  r.object("hypernet", [&](const nlohmann::json& a, const std::string& w) {
    detail::KeyReader hr(a, w);
    hr.get("embed_dim", c.hypernet.embed_dim);
    hr.get("hidden", c.hypernet.hidden);
    hr.get("softmax_rows", c.hypernet.softmax_rows);
    hr.get("self_bias", c.hypernet.self_bias);
    hr.finish();
  });
  r.object("model", [&](const nlohmann::json& a, const std::string& w) {
    detail::KeyReader mr(a, w);
    mr.get("in_channels", c.model.in_channels);
    mr.get("img_size", c.model.img_size);
    mr.get("patch_size", c.model.patch_size);
    mr.get("embed_dim", c.model.embed_dim);
    mr.get("heads", c.model.heads);
    mr.get("encoder_blocks", c.model.encoder_blocks);
    mr.get("mlp_hidden", c.model.mlp_hidden);
    mr.get("decoder_channels", c.model.decoder_channels);
    mr.get("num_classes", c.model.num_classes);
    mr.finish();
  });
  r.object("data", [&](const nlohmann::json& a, const std::string& w) {
    detail::KeyReader dr(a, w);
    dr.get("seed", c.data.seed);
    dr.get("img_size", c.data.img_size);
    dr.get("train_sizes", c.data.train_sizes);
    dr.get("test_size", c.data.test_size);
    dr.get("cache_dir", c.data.cache_dir);
    dr.finish();
  });
  r.get("output_dir", c.output_dir);
  r.get("trace", c.trace);
  r.get("sequential", c.sequential);
  r.get("checkpoints", c.checkpoints);
  r.finish();
  return c;
}

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
  const auto& m = c.model;
  return {
      {"mode", mode_name(c.mode)},
      {"ablation", {{"gpd", c.ablation.gpd}, {"ape", c.ablation.ape}, {"sge", c.ablation.sge}}},
      {"sites", c.sites},
      {"rounds", c.rounds},
      {"local_iters", c.local_iters},
      {"batch_size", c.batch_size},
      {"lr", c.lr},
      {"hn_lr", c.hn_lr},
      {"sge_temperature", c.sge_temperature},
      {"sens_cap", c.sens_cap},
      {"sens_abs", c.sens_abs},
      {"seeds", c.seeds},
      {"eval_interval", c.eval_interval},
      {"loss_weights", {{"seg", c.loss_weights.seg}, {"ar", c.loss_weights.ar}, {"csc", c.loss_weights.csc}}},
      {"distort_per", c.distort_per == DistortPer::Batch ? "batch" : "round"},
      {"clamp_distort", c.clamp_distort},
      {"optimizer", c.optimizer == OptimizerKind::Sgd ? "sgd" : "adamw"},
      {"hypernet",
       {{"embed_dim", c.hypernet.embed_dim},
        {"hidden", c.hypernet.hidden},
        {"softmax_rows", c.hypernet.softmax_rows},
        {"self_bias", c.hypernet.self_bias}}},
      {"model",
       {{"in_channels", m.in_channels},
        {"img_size", m.img_size},
        {"patch_size", m.patch_size},
        {"embed_dim", m.embed_dim},
        {"heads", m.heads},
        {"encoder_blocks", m.encoder_blocks},
        {"mlp_hidden", m.mlp_hidden},
        {"decoder_channels", m.decoder_channels},
        {"num_classes", m.num_classes}}},
      {"data",
       {{"seed", c.data.seed},
        {"img_size", c.data.img_size},
        {"train_sizes", c.data.train_sizes},
        {"test_size", c.data.test_size},
        {"cache_dir", c.data.cache_dir}}},
      {"output_dir", c.output_dir},
      {"trace", c.trace},
      {"sequential", c.sequential},
      {"checkpoints", c.checkpoints},
  };
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error("config", "cannot read " + path.string());
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error("config", path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

}  // namespace fedsis
