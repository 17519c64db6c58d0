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

// Experiment driver: data, round loop, evaluation and the output directory.
//
// <output_dir>/config.json     resolved configuration
// <output_dir>/metrics.csv     one row per (seed, round, site)
// <output_dir>/timing.csv      wall-clock seconds per (seed, round)
// <output_dir>/summary.json    final mean +- std over seeds, per site and average
// <output_dir>/heatmap.csv     final aggregation-matrix rows per (seed, site, layer)
// <output_dir>/seed_<s>/checkpoints/site<m>.pfsis
// <output_dir>/seed_<s>/trace/ (with --trace)

#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "fedsis/config.hpp"
#include "fedsis/metrics.hpp"
#include "fedsis/trace.hpp"

namespace fedsis {

/// Argmax predictions scored against every sample of a split.
template <class T>
MetricReport evaluate(const BasicModel<T>& model, std::span<const Sample> split) {
  NoGradGuard guard;
  std::vector<MetricReport> per_sample;
  per_sample.reserve(split.size());
  for (const auto& s : split) {
    const auto logits = model.forward(s.image).logits;
    per_sample.push_back(score_sample(argmax_mask(logits), s.mask, model.config().num_classes));
  }
  return average_reports(per_sample);
}

inline MetricReport evaluate(const Model& model, const SiteDataset& split) {
  return evaluate(model, std::span<const Sample>(split.samples));
}

struct RoundRecord {
  std::uint64_t seed = 0;
  std::size_t round = 0;
  std::vector<LossSummary> losses;           // per site
  std::vector<std::optional<MetricReport>> eval;  // per site, on evaluation rounds
  double wall_seconds = 0.0;
};

struct SeedResult {
  std::uint64_t seed = 0;
  std::vector<RoundRecord> rounds;
  std::vector<MetricReport> final_reports;  // per site, last evaluation
  std::vector<AggregationMatrix> final_omega;
  std::size_t uploads = 0;
  std::size_t downloads = 0;
  std::size_t style_broadcasts = 0;
  bool diverged = false;
  std::string divergence;
};

struct ExperimentResult {
  std::vector<SeedResult> seeds;
  bool diverged() const {
    for (const auto& s : seeds)
      if (s.diverged) return true;
    return false;
  }
};

using RoundObserver = std::function<void(const RoundRecord&)>;

struct SiteData {
  std::vector<SiteDataset> train, test;
};

/// Datasets depend only on the data config, never on the run seed.
inline SiteData build_site_data(const ExperimentConfig& cfg) {
  SiteData d;
  for (std::size_t m = 0; m < cfg.sites; ++m) {
    for (Split split : {Split::Train, Split::Test}) {
      const std::size_t n = split == Split::Train ? cfg.data.train_sizes[m] : cfg.data.test_size;
      SiteDataset ds;
      bool loaded = false;
      std::filesystem::path stem;
      if (!cfg.data.cache_dir.empty()) {
        char name[96];
        std::snprintf(name, sizeof(name), "site%zu_%s_seed%llu_n%zu_s%zu", m, split_name(split),
                      static_cast<unsigned long long>(cfg.data.seed), n, cfg.data.img_size);
        stem = std::filesystem::path(cfg.data.cache_dir) / name;
        if (std::filesystem::exists(stem.string() + ".json") && std::filesystem::exists(stem.string() + ".pfsis")) {
          ds = load_dataset(stem);
          loaded = ds.size() == n;
        }
      }
      if (!loaded) {
        ds = generate_site(m, n, cfg.data.seed, split, cfg.data.img_size);
        if (!stem.empty()) {
          std::filesystem::create_directories(stem.parent_path());
          save_dataset(stem, ds, cfg.data.seed);
        }
      }
      (split == Split::Train ? d.train : d.test).push_back(std::move(ds));
    }
  }
  return d;
}

namespace detail {

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t salt) {
  auto rng = seeded_rng(seed, salt, 0xfed5);
  return rng();
}

template <class F>
void for_each_site(std::size_t n, bool sequential, F&& f) {
  if (sequential || n == 1) {
    for (std::size_t m = 0; m < n; ++m) f(m);
    return;
  }
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> workers;
  workers.reserve(n);
  for (std::size_t m = 0; m < n; ++m) {
    workers.emplace_back([&, m] {
      try {
        f(m);
      } catch (...) {
        errors[m] = std::current_exception();
      }
    });
  }
  for (auto& w : workers) w.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

inline std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

}  // namespace detail

inline const char* kMetricsHeader = "seed,round,site,dice,iou,assd,hd95,loss_seg,loss_ar,loss_csc";

inline std::string metrics_rows(const RoundRecord& r) {
  std::ostringstream os;
  for (std::size_t m = 0; m < r.losses.size(); ++m) {
    os << r.seed << ',' << r.round << ',' << m << ',';
    if (r.eval[m]) {
      const auto& e = *r.eval[m];
      os << detail::fmt(e.mean_dice) << ',' << detail::fmt(e.mean_iou) << ',' << detail::fmt(e.mean_assd) << ','
         << detail::fmt(e.mean_hd95) << ',';
    } else {
      os << ",,,,";
    }
    os << detail::fmt(r.losses[m].seg) << ',' << detail::fmt(r.losses[m].ar) << ',' << detail::fmt(r.losses[m].csc)
       << '\n';
  }
  return os.str();
}

/// One seed of an experiment. Writes checkpoints and traces under `seed_dir`
/// (if non-empty) and reports each finished round to `observer`.
inline SeedResult run_seed(const ExperimentConfig& cfg, const SiteData& data, std::uint64_t seed,
                           const std::filesystem::path& seed_dir = {}, const RoundObserver& observer = {}) {
  cfg.validate();
  SeedResult res;
  res.seed = seed;
  const auto ab = cfg.effective_ablation();
  const SiteConfig scfg = cfg.site_config();
  const std::uint64_t init_seed = detail::derive_seed(seed, 1);

  std::vector<Site> sites;
  sites.reserve(cfg.sites);
  for (std::size_t m = 0; m < cfg.sites; ++m)
    sites.emplace_back(m, data.train[m], cfg.model, ab.gpd, init_seed, seed, scfg);

  // Step one: every site uploads its statistics once and receives the memory once.
  StyleMemory memory;
  for (const auto& s : sites) memory.push_back(s.own_stats());
  const bool federated = cfg.mode != Mode::Local;
  for (auto& s : sites) s.set_style_memory(memory);
  if (federated) res.style_broadcasts = 1;

  const Model reference(cfg.model, ab.gpd, init_seed);
  auto [theta_G0, theta_P0] = reference.partition();
  Server server(cfg.server_config(), cfg.sites, theta_G0, theta_P0, detail::derive_seed(seed, 2));
  const std::filesystem::path trace_dir = seed_dir.empty() ? std::filesystem::path{} : seed_dir / "trace";
  const bool tracing = cfg.trace && federated && !trace_dir.empty();
  if (tracing) write_trace_init(trace_dir, theta_G0, theta_P0);

  for (std::size_t t = 0; t < cfg.rounds; ++t) {
    const auto start = std::chrono::steady_clock::now();
    std::vector<SiteUpload> uploads(cfg.sites);
    try {
      detail::for_each_site(cfg.sites, cfg.sequential, [&](std::size_t m) { uploads[m] = sites[m].local_train(); });
    } catch (const DivergenceError& e) {
      res.diverged = true;
      res.divergence = "round " + std::to_string(t) + ": " + e.what();
      break;
    }
    if (federated) {
      res.uploads += uploads.size();
      RoundLog log;
      try {
        log = server.run_round(uploads);
      } catch (const Error& e) {
        if (e.kind() != "hn-diverged") throw;
        res.diverged = true;
        res.divergence = "round " + std::to_string(t) + ": " + e.what();
        break;
      }
      for (std::size_t m = 0; m < cfg.sites; ++m) sites[m].apply_download(log.downloads[m].theta_G, log.downloads[m].theta_P);
      res.downloads += log.downloads.size();
      if (tracing) write_trace_round(trace_dir, cfg, uploads, log);
      if (!log.omega.empty()) res.final_omega = log.omega;
    }

    RoundRecord rec;
    rec.seed = seed;
    rec.round = t;
    rec.eval.resize(cfg.sites);
    for (const auto& u : uploads) rec.losses.push_back(u.losses);
    const bool eval_now = (t + 1) % cfg.eval_interval == 0 || t + 1 == cfg.rounds;
    if (eval_now) {
      std::vector<MetricReport> reports(cfg.sites);
      detail::for_each_site(cfg.sites, cfg.sequential,
                            [&](std::size_t m) { reports[m] = evaluate(sites[m].model(), data.test[m]); });
      for (std::size_t m = 0; m < cfg.sites; ++m) rec.eval[m] = reports[m];
      res.final_reports = reports;
    }
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (observer) observer(rec);
    res.rounds.push_back(std::move(rec));
  }

  if (cfg.checkpoints && !seed_dir.empty()) {
    const auto dir = seed_dir / "checkpoints";
    std::filesystem::create_directories(dir);
    for (std::size_t m = 0; m < cfg.sites; ++m)
      save_frame(dir / ("site" + std::to_string(m) + ".pfsis"), sites[m].model().params().snapshot());
  }
  return res;
}

inline void write_heatmap(const std::filesystem::path& path, const ExperimentResult& result) {
  std::ofstream os(path);
  if (!os) throw Error("io", "cannot write " + path.string());
  std::size_t sites = 0;
  for (const auto& s : result.seeds)
    for (const auto& o : s.final_omega) sites = std::max(sites, o.sites);
  os << "seed,site,layer";
  for (std::size_t i = 0; i < sites; ++i) os << ",w" << i;
  os << '\n';
  for (const auto& s : result.seeds)
    for (std::size_t m = 0; m < s.final_omega.size(); ++m) {
      const auto& o = s.final_omega[m];
      for (std::size_t l = 0; l < o.rows(); ++l) {
        os << s.seed << ',' << m << ',' << o.layers[l];
        for (double w : o.row(l)) os << ',' << detail::fmt(w);
        os << '\n';
      }
    }
}

namespace detail {

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
};

// Sample standard deviation (n - 1); zero for a single value. NaNs are skipped.
inline MeanStd mean_std(const std::vector<double>& v) {
  std::vector<double> x;
  for (double d : v)
    if (!std::isnan(d)) x.push_back(d);
  if (x.empty()) return {std::nan(""), std::nan("")};
  double s = 0.0;
  for (double d : x) s += d;
  const double mean = s / static_cast<double>(x.size());
  if (x.size() == 1) return {mean, 0.0};
  double q = 0.0;
  for (double d : x) q += (d - mean) * (d - mean);
  return {mean, std::sqrt(q / static_cast<double>(x.size() - 1))};
}

inline nlohmann::json ms_json(const MeanStd& m) {
  auto num = [](double v) { return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v); };
  return {{"mean", num(m.mean)}, {"std", num(m.std)}};
}

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace detail

inline constexpr const char* kMetricNames[] = {"dice", "iou", "assd", "hd95"};

/// Rebuilds summary.json from metrics.csv: for every seed the last evaluated
/// round gives the final per-site metrics.
inline nlohmann::json summarize_metrics(const std::filesystem::path& metrics_csv) {
  std::ifstream is(metrics_csv);
  if (!is) throw Error("io", "cannot read " + metrics_csv.string());
  std::string line;
  std::getline(is, line);
  if (line != kMetricsHeader) throw Error("format", "unexpected metrics.csv header");
  // seed -> site -> (round, metrics)
  std::map<std::uint64_t, std::map<std::size_t, std::pair<std::size_t, std::array<double, 4>>>> finals;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto f = detail::split_csv(line);
    if (f.size() != 10) throw Error("format", "bad metrics.csv row: " + line);
    if (f[3].empty()) continue;
    const std::uint64_t seed = std::stoull(f[0]);
    const std::size_t round = std::stoul(f[1]), site = std::stoul(f[2]);
    std::array<double, 4> v;
    for (int k = 0; k < 4; ++k) v[k] = f[3 + k] == "nan" ? std::nan("") : std::stod(f[3 + k]);
    auto& per_site = finals[seed];
    auto it = per_site.find(site);
    if (it == per_site.end() || it->second.first <= round) per_site[site] = {round, v};
  }
  nlohmann::json out;
  std::size_t n_sites = 0;
  for (const auto& [seed, sites] : finals) n_sites = std::max(n_sites, sites.size());
  nlohmann::json per_seed = nlohmann::json::array();
  std::vector<std::array<std::vector<double>, 4>> site_vals(n_sites);
  std::array<std::vector<double>, 4> avg_vals;
  for (const auto& [seed, sites] : finals) {
    nlohmann::json sj = {{"seed", seed}, {"sites", nlohmann::json::array()}};
    std::array<double, 4> acc{};
    std::array<std::size_t, 4> cnt{};
    for (const auto& [site, rv] : sites) {
      nlohmann::json one = {{"site", site}, {"round", rv.first}};
      for (int k = 0; k < 4; ++k) {
        const double v = rv.second[k];
        one[kMetricNames[k]] = std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v);
        site_vals[site][k].push_back(v);
        if (!std::isnan(v)) {
          acc[k] += v;
          ++cnt[k];
        }
      }
      sj["sites"].push_back(one);
    }
    nlohmann::json avg;
    for (int k = 0; k < 4; ++k) {
      const double a = cnt[k] ? acc[k] / static_cast<double>(cnt[k]) : std::nan("");
      avg[kMetricNames[k]] = std::isnan(a) ? nlohmann::json(nullptr) : nlohmann::json(a);
      avg_vals[k].push_back(a);
    }
    sj["average"] = avg;
    per_seed.push_back(sj);
  }
  nlohmann::json sites_json = nlohmann::json::array();
  std::array<std::vector<double>, 4> site_means;
  for (std::size_t m = 0; m < n_sites; ++m) {
    nlohmann::json one = {{"site", m}};
    for (int k = 0; k < 4; ++k) {
      const auto ms = detail::mean_std(site_vals[m][k]);
      one[kMetricNames[k]] = detail::ms_json(ms);
      site_means[k].push_back(ms.mean);
    }
    sites_json.push_back(one);
  }
  nlohmann::json average;
  for (int k = 0; k < 4; ++k) {
    // Mean of the per-site means; the spread is across seeds of the per-seed averages.
    double s = 0.0;
    std::size_t c = 0;
    for (double v : site_means[k])
      if (!std::isnan(v)) {
        s += v;
        ++c;
      }
    const double mean = c ? s / static_cast<double>(c) : std::nan("");
    average[kMetricNames[k]] = detail::ms_json({mean, detail::mean_std(avg_vals[k]).std});
  }
  out["seeds"] = finals.size();
  out["sites"] = sites_json;
  out["average"] = average;
  out["per_seed"] = per_seed;
  return out;
}

/// Regenerates summary.json in `dir` from its metrics.csv.
inline nlohmann::json report(const std::filesystem::path& dir) {
  auto summary = summarize_metrics(dir / "metrics.csv");
  if (std::filesystem::exists(dir / "config.json")) {
    std::ifstream is(dir / "config.json");
    nlohmann::json cfg;
    is >> cfg;
    summary["mode"] = cfg.value("mode", "");
    if (cfg.contains("ablation")) summary["ablation"] = cfg["ablation"];
  }
  std::ofstream os(dir / "summary.json");
  if (!os) throw Error("io", "cannot write " + (dir / "summary.json").string());
  os << summary.dump(2) << "\n";
  return summary;
}

/// Runs every seed in order, writing all outputs under cfg.output_dir.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg, const RoundObserver& observer = {}) {
  cfg.validate();
  const std::filesystem::path dir(cfg.output_dir);
  std::filesystem::create_directories(dir);
  {
    std::ofstream os(dir / "config.json");
    if (!os) throw Error("io", "cannot write " + (dir / "config.json").string());
    os << config_to_json(cfg).dump(2) << "\n";
  }
  std::ofstream metrics(dir / "metrics.csv");
  std::ofstream timing(dir / "timing.csv");
  if (!metrics || !timing) throw Error("io", "cannot write outputs in " + dir.string());
  metrics << kMetricsHeader << '\n';
  timing << "seed,round,seconds\n";

  const SiteData data = build_site_data(cfg);
  ExperimentResult result;
  for (auto seed : cfg.seeds) {
    const auto seed_dir = dir / ("seed_" + std::to_string(seed));
    if (cfg.trace) std::filesystem::remove_all(seed_dir / "trace");
    auto res = run_seed(cfg, data, seed, seed_dir, [&](const RoundRecord& r) {
      metrics << metrics_rows(r);
      metrics.flush();
      timing << r.seed << ',' << r.round << ',' << detail::fmt(r.wall_seconds) << '\n';
      if (observer) observer(r);
    });
    const bool stop = res.diverged;
    result.seeds.push_back(std::move(res));
    if (stop) break;
  }
  metrics.close();
  write_heatmap(dir / "heatmap.csv", result);
  auto summary = report(dir);
  if (result.diverged()) {
    for (const auto& s : result.seeds)
      if (s.diverged) summary["diverged"] = s.divergence;
    std::ofstream os(dir / "summary.json");
    os << summary.dump(2) << "\n";
  }
  return result;
}

/// Verifies every traced seed under an experiment directory.
inline VerifyReport verify(const std::filesystem::path& dir, double tol = 1e-6) {
  VerifyReport total;
  if (!std::filesystem::is_directory(dir)) {
    total.failures.push_back("not a directory: " + dir.string());
    return total;
  }
  std::vector<std::filesystem::path> traces;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_directory() && std::filesystem::exists(e.path() / "trace")) traces.push_back(e.path() / "trace");
  if (std::filesystem::exists(dir / "init.pfsis")) traces.push_back(dir);
  std::sort(traces.begin(), traces.end());
  if (traces.empty()) total.failures.push_back("no traces under " + dir.string());
  for (const auto& t : traces) {
    const auto r = verify_trace(t, tol);
    total.rounds_checked += r.rounds_checked;
    total.max_error = std::max(total.max_error, r.max_error);
    total.failures.insert(total.failures.end(), r.failures.begin(), r.failures.end());
  }
  return total;
}

}  // namespace fedsis
