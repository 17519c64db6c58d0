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

// On-disk message trace of a federated run and its offline re-verification.
//
// trace/init.pfsis             initial theta_G / theta_P
// trace/round_NNNN.pfsis       uploads, downloads, omega, hypernetwork states
// trace/round_NNNN.json        round metadata (sample counts, server config)
//
// Record names are "<group>/<site>/<part>/<parameter>", e.g. "up/0/G/seg_head.bias".

#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedsis/config.hpp"
#include "fedsis/serialize.hpp"
#include "fedsis/server.hpp"

namespace fedsis {

namespace detail {

inline void append_prefixed(ParamVector& frame, const std::string& prefix, const ParamVector& pv) {
  for (const auto& e : pv) frame.push_back({prefix + e.name, e.tag, e.shape, e.values});
}

inline ParamVector extract_prefixed(const ParamVector& frame, const std::string& prefix) {
  ParamVector out;
  for (const auto& e : frame)
    if (e.name.compare(0, prefix.size(), prefix) == 0) out.push_back({e.name.substr(prefix.size()), e.tag, e.shape, e.values});
  return out;
}

inline std::string round_stem(std::size_t round) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "round_%04zu", round);
  return buf;
}

}  // namespace detail

inline void write_trace_init(const std::filesystem::path& dir, const ParamVector& theta_G, const ParamVector& theta_P) {
  std::filesystem::create_directories(dir);
  ParamVector frame;
  detail::append_prefixed(frame, "init/G/", theta_G);
  detail::append_prefixed(frame, "init/P/", theta_P);
  save_frame(dir / "init.pfsis", frame);
}

inline void write_trace_round(const std::filesystem::path& dir, const ExperimentConfig& cfg,
                              std::span<const SiteUpload> uploads, const RoundLog& log) {
  std::filesystem::create_directories(dir);
  ParamVector frame;
  nlohmann::json counts = nlohmann::json::array();
  for (const auto& u : uploads) {
    const std::string p = "up/" + std::to_string(u.site) + "/";
    detail::append_prefixed(frame, p + "G/", u.theta_G);
    detail::append_prefixed(frame, p + "P/", u.theta_P);
    detail::append_prefixed(frame, p + "dP/", u.delta_P);
    detail::append_prefixed(frame, p + "S/", u.sens);
    counts.push_back(u.num_samples);
  }
  for (std::size_t m = 0; m < log.downloads.size(); ++m) {
    const std::string p = "down/" + std::to_string(m) + "/";
    detail::append_prefixed(frame, p + "G/", log.downloads[m].theta_G);
    detail::append_prefixed(frame, p + "P/", log.downloads[m].theta_P);
  }
  nlohmann::json omega = nlohmann::json::array();
  for (std::size_t m = 0; m < log.omega.size(); ++m) {
    omega.push_back(log.omega[m].weights);
    detail::append_prefixed(frame, "hn/" + std::to_string(m) + "/before/", log.hn_before[m]);
    detail::append_prefixed(frame, "hn/" + std::to_string(m) + "/after/", log.hn_after[m]);
  }
  const auto stem = detail::round_stem(log.round);
  save_frame(dir / (stem + ".pfsis"), frame);
  const auto sc = cfg.server_config();
  nlohmann::json meta = {
      {"round", log.round},
      {"mode", mode_name(sc.mode)},
      {"ablation", {{"gpd", sc.ablation.gpd}, {"ape", sc.ablation.ape}, {"sge", sc.ablation.sge}}},
      {"sites", uploads.size()},
      {"uploads", uploads.size()},
      {"downloads", log.downloads.size()},
      {"counts", counts},
      {"hn_lr", sc.hn_lr},
      {"sge_temperature", sc.sge_temperature},
      {"hypernet",
       {{"embed_dim", sc.hn.embed_dim}, {"hidden", sc.hn.hidden}, {"softmax_rows", sc.hn.softmax_rows},
        {"self_bias", sc.hn.self_bias}}},
      {"omega", omega},
  };
  std::ofstream js(dir / (stem + ".json"));
  if (!js) throw Error("io", "cannot write trace metadata in " + dir.string());
  js << meta.dump() << "\n";
}

struct VerifyReport {
  std::size_t rounds_checked = 0;
  double max_error = 0.0;
  std::vector<std::string> failures;

  bool ok() const { return failures.empty() && rounds_checked > 0; }
};

namespace detail {

inline double max_abs_diff(const ParamVector& a, const ParamVector& b) {
  if (!a.same_layout(b)) return std::numeric_limits<double>::infinity();
  double m = 0.0;
  for (std::size_t l = 0; l < a.size(); ++l)
    for (std::size_t j = 0; j < a[l].values.size(); ++j) {
      const double d = std::fabs(static_cast<double>(a[l].values[j]) - static_cast<double>(b[l].values[j]));
      if (!(d <= m)) m = std::isnan(d) ? std::numeric_limits<double>::infinity() : d;
    }
  return m;
}

}  // namespace detail

/// Re-derives every round's aggregation from the traced messages in `dir`.
inline VerifyReport verify_trace(const std::filesystem::path& dir, double tol = 1e-6) {
  VerifyReport rep;
  auto check = [&](double err, const std::string& what) {
    rep.max_error = std::max(rep.max_error, err);
    if (!(err <= tol)) rep.failures.push_back(what + " (error " + std::to_string(err) + ")");
  };
  if (!std::filesystem::exists(dir / "init.pfsis")) {
    rep.failures.push_back("no trace in " + dir.string());
    return rep;
  }
  const auto init = load_frame(dir / "init.pfsis");
  const ParamVector init_P = detail::extract_prefixed(init, "init/P/");
  std::vector<ParamVector> prev_P;  // what each site was last sent
  for (std::size_t t = 0;; ++t) {
    const auto stem = detail::round_stem(t);
    if (!std::filesystem::exists(dir / (stem + ".pfsis"))) break;
    const std::string tag = dir.string() + " round " + std::to_string(t) + ": ";
    nlohmann::json meta;
    {
      std::ifstream js(dir / (stem + ".json"));
      if (!js) {
        rep.failures.push_back(tag + "missing metadata");
        break;
      }
      js >> meta;
    }
    const auto frame = load_frame(dir / (stem + ".pfsis"));
    const std::size_t m_sites = meta.at("sites");
    if (meta.at("uploads") != m_sites || meta.at("downloads") != m_sites) {
      rep.failures.push_back(tag + "message count differs from the number of sites");
    }
    const Ablation ab{meta.at("ablation").at("gpd"), meta.at("ablation").at("ape"), meta.at("ablation").at("sge")};
    const bool pfedsis = meta.at("mode") == "pfedsis";
    const std::vector<std::size_t> counts = meta.at("counts");

    if (prev_P.empty()) prev_P.assign(m_sites, init_P);
    std::vector<ParamVector> up_G, up_P, up_dP, up_S, down_G, down_P;
    for (std::size_t m = 0; m < m_sites; ++m) {
      const std::string u = "up/" + std::to_string(m) + "/", d = "down/" + std::to_string(m) + "/";
      up_G.push_back(detail::extract_prefixed(frame, u + "G/"));
      up_P.push_back(detail::extract_prefixed(frame, u + "P/"));
      up_dP.push_back(detail::extract_prefixed(frame, u + "dP/"));
      up_S.push_back(detail::extract_prefixed(frame, u + "S/"));
      down_G.push_back(detail::extract_prefixed(frame, d + "G/"));
      down_P.push_back(detail::extract_prefixed(frame, d + "P/"));
    }

    try {
      // Personalized deltas against what each site was sent last round.
      for (std::size_t m = 0; m < m_sites; ++m) {
        check(detail::max_abs_diff(up_dP[m], subtract(up_P[m], prev_P.at(m))),
              tag + "site " + std::to_string(m) + " delta_P");
      }

      const ParamVector expect_G = pfedsis && ab.sge ? sge_aggregate(up_G, up_S, meta.at("sge_temperature"))
                                                     : fedavg_aggregate(up_G, counts);
      for (std::size_t m = 0; m < m_sites; ++m) check(detail::max_abs_diff(down_G[m], expect_G), tag + "theta_G download");

      if (pfedsis && ab.gpd && ab.ape) {
        HypernetConfig hc;
        const auto& hj = meta.at("hypernet");
        hc.embed_dim = hj.at("embed_dim");
        hc.hidden = hj.at("hidden");
        hc.softmax_rows = hj.at("softmax_rows");
        hc.self_bias = hj.at("self_bias");
        std::vector<std::string> layers;
        for (const auto& e : up_P[0]) layers.push_back(e.name);
        for (std::size_t m = 0; m < m_sites; ++m) {
          const std::string h = "hn/" + std::to_string(m) + "/";
          Hypernetwork hn(m, layers, m_sites, hc, 0);
          hn.params().load(detail::extract_prefixed(frame, h + "before/"));
          hn_update(hn, up_P, up_dP[m], meta.at("hn_lr"));
          check(detail::max_abs_diff(hn.params().snapshot(), detail::extract_prefixed(frame, h + "after/")),
                tag + "site " + std::to_string(m) + " hypernetwork update");
          const auto omega = hn_forward(hn);
          const std::vector<double> traced = meta.at("omega").at(m);
          double werr = traced.size() == omega.weights.size() ? 0.0 : std::numeric_limits<double>::infinity();
          for (std::size_t i = 0; i < traced.size() && i < omega.weights.size(); ++i)
            werr = std::max(werr, std::fabs(traced[i] - omega.weights[i]));
          check(werr, tag + "site " + std::to_string(m) + " aggregation matrix");
          for (std::size_t l = 0; l < omega.rows(); ++l) {
            double s = 0.0;
            for (double w : omega.row(l)) s += w;
            check(std::fabs(s - 1.0), tag + "site " + std::to_string(m) + " row " + omega.layers[l] + " sum");
          }
          AggregationMatrix traced_omega{layers, m_sites, traced};
          check(detail::max_abs_diff(down_P[m], personalize(up_P, traced_omega)),
                tag + "site " + std::to_string(m) + " personalized download");
        }
      } else {
        for (std::size_t m = 0; m < m_sites; ++m)
          check(detail::max_abs_diff(down_P[m], up_P[m]), tag + "site " + std::to_string(m) + " kept theta_P");
      }
    } catch (const Error& e) {
      rep.failures.push_back(tag + e.what());
    }
    prev_P = down_P;
    ++rep.rounds_checked;
  }
  if (rep.rounds_checked == 0) rep.failures.push_back("no traced rounds in " + dir.string());
  return rep;
}

}  // namespace fedsis
