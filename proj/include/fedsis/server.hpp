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

// Server side of a federated round: global aggregation (sensitivity softmax
// or sample-count weighting) and hypernetwork-driven personalization.

#pragma once

#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "fedsis/hypernet.hpp"
#include "fedsis/site.hpp"

namespace fedsis {

enum class Mode : std::uint8_t { PFedSIS, FedAvg, Local };

inline const char* mode_name(Mode m) {
  switch (m) {
    case Mode::PFedSIS: return "pfedsis";
    case Mode::FedAvg: return "fedavg";
    case Mode::Local: return "local";
  }
  return "?";
}

inline Mode parse_mode(const std::string& s) {
  if (s == "pfedsis") return Mode::PFedSIS;
  if (s == "fedavg") return Mode::FedAvg;
  if (s == "local") return Mode::Local;
  throw Error("config", "unknown mode '" + s + "'");
}

/// Component switches; only meaningful in pfedsis mode.
struct Ablation {
  bool gpd = true;
  bool ape = true;
  bool sge = true;

  bool operator==(const Ablation&) const = default;
};

/// FedAvg weights |D^m| / sum |D^m|.
inline std::vector<double> fedavg_weights(std::span<const std::size_t> counts) {
  double total = 0.0;
  for (auto c : counts) total += static_cast<double>(c);
  if (!(total > 0.0)) throw Error("empty", "total sample count is zero");
  std::vector<double> w(counts.size());
  for (std::size_t i = 0; i < counts.size(); ++i) w[i] = static_cast<double>(counts[i]) / total;
  return w;
}

/// sum_i k_i * theta_i over every scalar.
inline ParamVector fedavg_aggregate(std::span<const ParamVector> all, std::span<const std::size_t> counts) {
  if (all.empty() || all.size() != counts.size()) throw Error("incomplete-round", "fedavg needs one count per upload");
  detail::require_complete(all, counts.size(), "fedavg");
  const auto k = fedavg_weights(counts);
  ParamVector out = all[0];
  for (std::size_t l = 0; l < out.size(); ++l)
    for (std::size_t j = 0; j < out[l].values.size(); ++j) {
      double acc = 0.0;
      for (std::size_t i = 0; i < all.size(); ++i) acc += k[i] * static_cast<double>(all[i][l].values[j]);
      out[l].values[j] = static_cast<float>(acc);
    }
  return out;
}

/// Per-scalar softmax across sites of sens / temperature.
inline std::vector<double> sge_weights(std::span<const double> sens, double temperature) {
  double hi = -std::numeric_limits<double>::infinity();
  for (double s : sens) hi = std::max(hi, s / temperature);
  std::vector<double> w(sens.size());
  double total = 0.0;
  for (std::size_t i = 0; i < sens.size(); ++i) {
    w[i] = std::exp(sens[i] / temperature - hi);
    total += w[i];
  }
  for (auto& v : w) v /= total;
  return w;
}

/// theta_G(p) = sum_i softmax_i(sens_i(p) / temperature) * theta_G^i(p).
inline ParamVector sge_aggregate(std::span<const ParamVector> all_G, std::span<const ParamVector> all_sens,
                                 double temperature) {
  if (all_G.empty()) throw Error("incomplete-round", "sge_aggregate without uploads");
  if (!(temperature > 0.0)) throw Error("config", "SGE temperature must be positive");
  detail::require_complete(all_G, all_G.size(), "sge theta_G");
  detail::require_complete(all_sens, all_G.size(), "sge sensitivity");
  require_same_layout(all_G[0], all_sens[0], "sensitivity layout differs from theta_G");
  const std::size_t m = all_G.size();
  ParamVector out = all_G[0];
  std::vector<double> s(m);
  for (std::size_t l = 0; l < out.size(); ++l)
    for (std::size_t j = 0; j < out[l].values.size(); ++j) {
      for (std::size_t i = 0; i < m; ++i) s[i] = all_sens[i][l].values[j];
      const auto w = sge_weights(s, temperature);
      double acc = 0.0;
      for (std::size_t i = 0; i < m; ++i) acc += w[i] * static_cast<double>(all_G[i][l].values[j]);
      out[l].values[j] = static_cast<float>(acc);
    }
  return out;
}

struct ServerConfig {
  Mode mode = Mode::PFedSIS;
  Ablation ablation;
  double hn_lr = 1e-2;
  double sge_temperature = 1.0;
  HypernetConfig hn;
};

struct Download {
  ParamVector theta_G;
  ParamVector theta_P;
};

/// Everything the server saw and produced in one round.
struct RoundLog {
  std::size_t round = 0;
  std::vector<Download> downloads;
  std::vector<AggregationMatrix> omega;     // per site, APE only
  std::vector<ParamVector> hn_before;       // per site, APE only
  std::vector<ParamVector> hn_after;        // per site, APE only
};

class Server {
 public:
  Server(ServerConfig cfg, std::size_t num_sites, ParamVector theta_G, ParamVector theta_P, std::uint64_t seed)
      : cfg_(cfg), sites_(num_sites), theta_G_(std::move(theta_G)), theta_P_(num_sites, theta_P) {
    if (num_sites == 0) throw Error("config", "server needs at least one site");
    if (ape_active()) {
      std::vector<std::string> layers;
      for (const auto& e : theta_P) layers.push_back(e.name);
      for (std::size_t m = 0; m < num_sites; ++m) hns_.emplace_back(m, layers, num_sites, cfg.hn, seed);
    }
  }

  const ServerConfig& config() const { return cfg_; }
  std::size_t num_sites() const { return sites_; }
  std::size_t round() const { return round_; }
  const ParamVector& theta_G() const { return theta_G_; }
  const ParamVector& theta_P(std::size_t m) const { return theta_P_.at(m); }
  const std::vector<Hypernetwork>& hypernetworks() const { return hns_; }
  std::vector<Hypernetwork>& hypernetworks() { return hns_; }

  bool ape_active() const { return cfg_.mode == Mode::PFedSIS && cfg_.ablation.gpd && cfg_.ablation.ape; }
  bool sge_active() const { return cfg_.mode == Mode::PFedSIS && cfg_.ablation.sge; }

  /// Initial downloads (round 0, before any training).
  Download initial_download(std::size_t m) const { return {theta_G_, theta_P_.at(m)}; }

  RoundLog run_round(std::span<const SiteUpload> uploads) {
    if (uploads.size() != sites_) {
      throw Error("incomplete-round", std::to_string(uploads.size()) + " of " + std::to_string(sites_) + " uploads");
    }
    for (std::size_t m = 0; m < sites_; ++m)
      if (uploads[m].site != m) throw Error("incomplete-round", "uploads out of site order");
    RoundLog log;
    log.round = round_;

    std::vector<ParamVector> all_G, all_P;
    std::vector<std::size_t> counts;
    for (const auto& u : uploads) {
      all_G.push_back(u.theta_G);
      all_P.push_back(u.theta_P);
      counts.push_back(u.num_samples);
    }

    if (cfg_.mode == Mode::Local) {
      for (std::size_t m = 0; m < sites_; ++m) {
        theta_P_[m] = all_P[m];
        log.downloads.push_back({all_G[m], all_P[m]});
      }
      ++round_;
      return log;
    }

    if (ape_active()) {
      for (std::size_t m = 0; m < sites_; ++m) {
        log.hn_before.push_back(hns_[m].params().snapshot());
        hn_update(hns_[m], all_P, uploads[m].delta_P, cfg_.hn_lr);
        log.hn_after.push_back(hns_[m].params().snapshot());
        log.omega.push_back(hn_forward(hns_[m]));
        theta_P_[m] = personalize(all_P, log.omega.back());
      }
    } else {
      for (std::size_t m = 0; m < sites_; ++m) theta_P_[m] = all_P[m];
    }

    if (sge_active()) {
      std::vector<ParamVector> all_sens;
      for (const auto& u : uploads) all_sens.push_back(u.sens);
      theta_G_ = sge_aggregate(all_G, all_sens, cfg_.sge_temperature);
    } else {
      theta_G_ = fedavg_aggregate(all_G, counts);
    }

    for (std::size_t m = 0; m < sites_; ++m) log.downloads.push_back({theta_G_, theta_P_[m]});
    ++round_;
    return log;
  }

 private:
  ServerConfig cfg_;
  std::size_t sites_;
  ParamVector theta_G_;
  std::vector<ParamVector> theta_P_;
  std::vector<Hypernetwork> hns_;
  std::size_t round_ = 0;
};

}  // namespace fedsis
