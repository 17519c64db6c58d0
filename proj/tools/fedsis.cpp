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

// fedsis run --config <path> [--seed N] [--mode M] [--ablate gpd|ape|sge]... [--trace] [--sequential] [--out DIR]
// fedsis report <dir>
// fedsis verify <dir>
//
// Exit codes: 0 ok, 1 verification failed, 2 configuration error, 3 divergence.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fedsis/harness.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitVerify = 1;
constexpr int kExitConfig = 2;
constexpr int kExitDiverged = 3;

void print_summary(const nlohmann::json& s) {
  if (!s.contains("average")) return;
  const auto& a = s["average"];
  auto show = [](const nlohmann::json& ms) {
    if (ms["mean"].is_null()) return std::string("n/a");
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.2f +- %.2f", ms["mean"].get<double>(), ms["std"].get<double>());
    return std::string(buf);
  };
  std::cout << "average  dice " << show(a["dice"]) << "  iou " << show(a["iou"]) << "  assd " << show(a["assd"])
            << "  hd95 " << show(a["hd95"]) << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Personalized federated segmentation simulator"};
  app.require_subcommand(1);

  auto* run = app.add_subcommand("run", "Run an experiment");
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string mode;
  std::vector<std::string> ablate;
  bool trace = false, sequential = false, quiet = false;
  std::string out;
  run->add_option("--config", config_path, "JSON experiment config")->required();
  run->add_option("--seed", seed, "Run a single seed instead of the configured list");
  run->add_option("--mode", mode, "pfedsis | fedavg | local")->check(CLI::IsMember({"pfedsis", "fedavg", "local"}));
  run->add_option("--ablate", ablate, "Disable a component (repeatable)")->check(CLI::IsMember({"gpd", "ape", "sge"}));
  run->add_flag("--trace", trace, "Write per-round message traces");
  run->add_flag("--sequential", sequential, "Train sites one after another");
  run->add_option("--out", out, "Output directory (overrides the config)");
  run->add_flag("-q,--quiet", quiet, "Only print the final summary");

  auto* rep = app.add_subcommand("report", "Rebuild summary.json from metrics.csv");
  std::string report_dir;
  rep->add_option("dir", report_dir, "Experiment output directory")->required();

  auto* ver = app.add_subcommand("verify", "Re-check aggregation arithmetic from traces");
  std::string verify_dir;
  double tol = 1e-6;
  ver->add_option("dir", verify_dir, "Experiment output directory")->required();
  ver->add_option("--tol", tol, "Absolute tolerance");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*run) {
      fedsis::ExperimentConfig cfg;
      try {
        cfg = fedsis::load_config(config_path);
        if (seed) cfg.seeds = {*seed};
        if (!mode.empty()) cfg.mode = fedsis::parse_mode(mode);
        for (const auto& a : ablate) {
          if (a == "gpd") cfg.ablation.gpd = false;
          if (a == "ape") cfg.ablation.ape = false;
          if (a == "sge") cfg.ablation.sge = false;
        }
        if (trace) cfg.trace = true;
        if (sequential) cfg.sequential = true;
        if (!out.empty()) cfg.output_dir = out;
        cfg.validate();
      } catch (const fedsis::Error& e) {
        std::cerr << "fedsis: " << e.what() << "\n";
        return kExitConfig;
      }
      const auto result = fedsis::run_experiment(cfg, [&](const fedsis::RoundRecord& r) {
        if (quiet) return;
        std::cout << "seed " << r.seed << " round " << r.round;
        for (std::size_t m = 0; m < r.losses.size(); ++m) {
          std::cout << " | site " << m << " seg " << fedsis::detail::fmt(r.losses[m].seg);
          if (r.eval[m]) std::cout << " dice " << fedsis::detail::fmt(r.eval[m]->mean_dice);
        }
        std::cout << std::endl;
      });
      std::ifstream is(std::filesystem::path(cfg.output_dir) / "summary.json");
      nlohmann::json s;
      is >> s;
      print_summary(s);
      if (result.diverged()) {
        for (const auto& sr : result.seeds)
          if (sr.diverged) std::cerr << "fedsis: diverged: " << sr.divergence << "\n";
        return kExitDiverged;
      }
      return kExitOk;
    }
    if (*rep) {
      print_summary(fedsis::report(report_dir));
      return kExitOk;
    }
    if (*ver) {
      const auto r = fedsis::verify(verify_dir, tol);
      for (const auto& f : r.failures) std::cerr << "FAIL " << f << "\n";
      std::cout << "checked " << r.rounds_checked << " rounds, max error " << r.max_error << "\n";
      return r.ok() ? kExitOk : kExitVerify;
    }
  } catch (const fedsis::Error& e) {
    std::cerr << "fedsis: " << e.what() << "\n";
    return e.kind() == "config" ? kExitConfig : kExitVerify;
  }
  return kExitOk;
}
