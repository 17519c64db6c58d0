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

// Client side of a federated round: local training with per-tag gradient
// routing, personalized deltas and global-parameter sensitivity.

#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "fedsis/data.hpp"
#include "fedsis/losses.hpp"
#include "fedsis/model.hpp"

namespace fedsis {

enum class DistortPer : std::uint8_t { Batch, Round };
enum class OptimizerKind : std::uint8_t { Sgd, AdamW };

struct LossWeights {
  double seg = 1.0;
  double ar = 1e-3;  // L_ar is a sum over C*H*W values
  double csc = 1.0;
};

struct SiteConfig {
  std::size_t local_iters = 20;
  std::size_t batch_size = 8;
  double lr = 5e-3;
  LossWeights weights;
  bool use_ar = true;   // L_ar on the personalized branch
  bool use_csc = true;  // L_csc on distorted inputs, plus sensitivity upload
  bool sens_abs = true;
  std::size_t sens_cap = 64;
  DistortPer distort_per = DistortPer::Batch;
  bool clamp_distort = true;
  OptimizerKind optimizer = OptimizerKind::Sgd;
  double weight_decay = 1e-2;  // AdamW only
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
};

/// Mean per-sample losses over one round of local training.
struct LossSummary {
  double seg = 0.0;
  double ar = 0.0;
  double csc = 0.0;
};

struct SiteUpload {
  std::size_t site = 0;
  ParamVector delta_P;  // theta_P after - before
  ParamVector sens;     // same layout as theta_G; empty when L_csc is off
  ParamVector theta_G;
  ParamVector theta_P;
  std::size_t num_samples = 0;
  LossSummary losses;
};

/// Epoch-wise shuffled mini-batch indices.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::size_t batch) : order_(n), batch_(std::min(batch, n)) {
    if (n == 0 || batch == 0) throw Error("config", "batch sampler needs n > 0 and batch > 0");
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    cursor_ = n;
  }

  template <class Rng>
  std::vector<std::size_t> next(Rng& rng) {
    std::vector<std::size_t> out;
    out.reserve(batch_);
    while (out.size() < batch_) {
      if (cursor_ == order_.size()) {
        std::shuffle(order_.begin(), order_.end(), rng);
        cursor_ = 0;
      }
      out.push_back(order_[cursor_++]);
    }
    return out;
  }

 private:
  std::vector<std::size_t> order_;
  std::size_t batch_;
  std::size_t cursor_;
};

inline ParamVector subtract(const ParamVector& a, const ParamVector& b) {
  require_same_layout(a, b, "subtract");
  ParamVector out = a;
  for (std::size_t i = 0; i < out.size(); ++i)
    for (std::size_t j = 0; j < out[i].values.size(); ++j) out[i].values[j] -= b[i].values[j];
  return out;
}

class Site {
 public:
  Site(std::size_t id, SiteDataset train, const ModelConfig& model_cfg, bool gpd, std::uint64_t init_seed,
       std::uint64_t run_seed, SiteConfig cfg)
      : id_(id),
        data_(std::move(train)),
        model_(model_cfg, gpd, init_seed),
        cfg_(cfg),
        rng_(detail::seeded_rng(run_seed, id, 0x517e)),
        sampler_(data_.size(), cfg.batch_size) {
    if (data_.samples.empty()) throw Error("config", "site " + std::to_string(id) + " has no training data");
    if (cfg_.use_ar && !gpd) throw Error("config", "L_ar needs the personalized branch");
    own_stats_ = compute_stats(data_);
    p_tensors_ = model_.params().tensors(ParamTag::Personalized);
    g_tensors_ = model_.params().tensors(ParamTag::Global);
  }

  std::size_t id() const { return id_; }
  const SiteDataset& data() const { return data_; }
  const SiteConfig& config() const { return cfg_; }
  const StyleStats& own_stats() const { return own_stats_; }
  Model& model() { return model_; }
  const Model& model() const { return model_; }

  /// Received once, before the first round.
  void set_style_memory(StyleMemory memory) { memory_ = std::move(memory); }
  const StyleMemory& style_memory() const { return memory_; }

  void apply_download(const ParamVector& theta_G, const ParamVector& theta_P) {
    auto& p = model_.params();
    const auto g_ref = p.snapshot(ParamTag::Global);
    const auto p_ref = p.snapshot(ParamTag::Personalized);
    require_same_layout(g_ref, theta_G, "download theta_G does not match the global subset");
    require_same_layout(p_ref, theta_P, "download theta_P does not match the personalized subset");
    p.load(theta_G, ParamTag::Global);
    p.load(theta_P, ParamTag::Personalized);
    adam_m_.clear();
    adam_v_.clear();
    adam_t_ = 0;
  }

  SiteUpload local_train() {
    auto& params = model_.params();
    const ParamVector p_before = params.snapshot(ParamTag::Personalized);
    const float inv_b = 1.0f / static_cast<float>(std::min(cfg_.batch_size, data_.size()));

    std::vector<Tensor> round_distorted;
    if (cfg_.use_csc && cfg_.distort_per == DistortPer::Round) {
      round_distorted.reserve(data_.size());
      for (const auto& s : data_.samples) round_distorted.push_back(distort(s.image, own_stats_, draw_target(), cfg_.clamp_distort));
    }

    LossSummary sums;
    std::size_t seen = 0;
    for (std::size_t step = 0; step < cfg_.local_iters; ++step) {
      const auto batch = sampler_.next(rng_);
      std::optional<StyleTarget> target;
      if (cfg_.use_csc && cfg_.distort_per == DistortPer::Batch) target = draw_target();
      params.zero_grad();
      for (std::size_t idx : batch) {
        const auto& s = data_.samples[idx];
        const auto out = model_.forward(s.image);
        const auto seg = seg_loss(out.logits, s.mask);
        check_finite(seg.item(), step, "L_seg");
        sums.seg += seg.item();
        backward(scale(seg, static_cast<float>(cfg_.weights.seg) * inv_b));
        if (cfg_.use_ar) {
          const auto ar = ar_loss(out.recon, s.image);
          check_finite(ar.item(), step, "L_ar");
          sums.ar += ar.item();
          backward(scale(ar, static_cast<float>(cfg_.weights.ar) * inv_b), p_tensors_);
        }
        if (cfg_.use_csc) {
          const Tensor distorted =
              target ? distort(s.image, own_stats_, *target, cfg_.clamp_distort) : round_distorted[idx];
          const auto csc = csc_loss(model_.forward(distorted).logits, s.mask);
          check_finite(csc.item(), step, "L_csc");
          sums.csc += csc.item();
          backward(scale(csc, static_cast<float>(cfg_.weights.csc) * inv_b), g_tensors_);
        }
        ++seen;
      }
      optimizer_step();
    }

    SiteUpload up;
    up.site = id_;
    up.theta_G = params.snapshot(ParamTag::Global);
    up.theta_P = params.snapshot(ParamTag::Personalized);
    up.delta_P = subtract(up.theta_P, p_before);
    if (cfg_.use_csc) up.sens = sensitivity();
    up.num_samples = data_.size();
    if (seen) {
      up.losses = {sums.seg / static_cast<double>(seen), sums.ar / static_cast<double>(seen),
                   sums.csc / static_cast<double>(seen)};
    }
    return up;
  }

  /// Mean over the first min(N, cap) training images of the (absolute)
  /// gradient of the per-pixel squared logit norm with respect to every
  /// global scalar.
  ParamVector sensitivity() {
    auto& params = model_.params();
    ParamVector out = params.snapshot(ParamTag::Global);
    std::vector<std::vector<double>> acc(out.size());
    for (std::size_t i = 0; i < out.size(); ++i) acc[i].assign(out[i].values.size(), 0.0);
    const std::size_t n = std::min(cfg_.sens_cap ? cfg_.sens_cap : data_.size(), data_.size());
    for (std::size_t k = 0; k < n; ++k) {
      params.zero_grad();
      const auto logits = model_.forward(data_.samples[k].image).logits;
      backward(scale(sq_l2_norm(logits), 1.0f / static_cast<float>(logits.extent(1) * logits.extent(2))), g_tensors_);
      for (std::size_t i = 0; i < g_tensors_.size(); ++i) {
        const auto g = g_tensors_[i].grad();
        for (std::size_t j = 0; j < g.size(); ++j) acc[i][j] += cfg_.sens_abs ? std::fabs(g[j]) : g[j];
      }
    }
    params.zero_grad();
    for (std::size_t i = 0; i < out.size(); ++i)
      for (std::size_t j = 0; j < acc[i].size(); ++j)
        out[i].values[j] = static_cast<float>(acc[i][j] / static_cast<double>(n));
    return out;
  }

 private:
  StyleTarget draw_target() {
    if (memory_.empty()) throw Error("config", "style memory not received");
    const auto lambdas = sample_lambdas(memory_.size(), rng_);
    return mix_style(memory_, lambdas);
  }

  void check_finite(float v, std::size_t step, const char* what) const {
    if (!std::isfinite(v)) {
      throw DivergenceError(static_cast<int>(id_), static_cast<int>(step), std::string(what) + " is not finite");
    }
  }

  void optimizer_step() {
    auto& entries = model_.params().entries();
    const float lr = static_cast<float>(cfg_.lr);
    if (cfg_.optimizer == OptimizerKind::Sgd) {
      for (auto& e : entries) {
        auto w = e.tensor.mutable_data();
        const auto g = e.tensor.grad();
        for (std::size_t j = 0; j < w.size(); ++j) w[j] -= lr * g[j];
      }
      return;
    }
    if (adam_m_.empty()) {
      for (auto& e : entries) {
        adam_m_.emplace_back(e.tensor.numel(), 0.0);
        adam_v_.emplace_back(e.tensor.numel(), 0.0);
      }
    }
    ++adam_t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(adam_t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(adam_t_));
    for (std::size_t i = 0; i < entries.size(); ++i) {
      auto w = entries[i].tensor.mutable_data();
      const auto g = entries[i].tensor.grad();
      for (std::size_t j = 0; j < w.size(); ++j) {
        auto& m = adam_m_[i][j];
        auto& v = adam_v_[i][j];
        m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * g[j];
        v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * g[j] * g[j];
        const double upd = (m / c1) / (std::sqrt(v / c2) + cfg_.adam_eps) + cfg_.weight_decay * w[j];
        w[j] = static_cast<float>(w[j] - cfg_.lr * upd);
      }
    }
  }

  std::size_t id_;
  SiteDataset data_;
  Model model_;
  SiteConfig cfg_;
  std::mt19937_64 rng_;
  BatchSampler sampler_;
  StyleStats own_stats_;
  StyleMemory memory_;
  std::vector<Tensor> p_tensors_, g_tensors_;
  std::vector<std::vector<double>> adam_m_, adam_v_;
  std::size_t adam_t_ = 0;
};

}  // namespace fedsis
