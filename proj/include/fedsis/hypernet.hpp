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

// Per-site hypernetwork emitting layer-wise cross-site mixing weights for the
// personalized parameters, and the personalized aggregation it drives.

#pragma once

#include <cmath>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "fedsis/ops.hpp"
#include "fedsis/params.hpp"

namespace fedsis {

/// Row-major n x M mixing weights, one row per personalized layer.
struct AggregationMatrix {
  std::vector<std::string> layers;
  std::size_t sites = 0;
  std::vector<double> weights;

  double at(std::size_t layer, std::size_t site) const { return weights[layer * sites + site]; }
  std::span<const double> row(std::size_t layer) const { return {weights.data() + layer * sites, sites}; }
  std::size_t rows() const { return layers.size(); }
};

struct HypernetConfig {
  std::size_t embed_dim = 8;
  std::size_t hidden = 32;
  bool softmax_rows = true;
  double self_bias = 0.0;  // initial output logit added to the site's own column
};

template <class T>
class BasicHypernetwork {
 public:
  BasicHypernetwork(std::size_t site, std::vector<std::string> layers, std::size_t num_sites, HypernetConfig cfg,
                    std::uint64_t seed)
      : site_(site), layers_(std::move(layers)), sites_(num_sites), cfg_(cfg) {
    if (num_sites == 0 || site >= num_sites) throw Error("config", "hypernetwork site id out of range");
    if (cfg.embed_dim == 0 || cfg.hidden == 0) throw Error("config", "hypernetwork dimensions must be positive");
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(site), 0x4e7u};
    std::mt19937_64 rng(seq);
    std::normal_distribution<double> normal(0.0, 1.0);
    const double a = 1.0 / std::sqrt(static_cast<double>(cfg.embed_dim));
    std::uniform_real_distribution<double> uni(-a, a);

    std::vector<T> nu(cfg.embed_dim), w1(cfg.embed_dim * cfg.hidden);
    for (auto& v : nu) v = static_cast<T>(normal(rng));
    for (auto& v : w1) v = static_cast<T>(uni(rng));
    const std::size_t outputs = std::max<std::size_t>(layers_.size(), 1) * sites_;
    std::vector<T> b2(outputs, T(0));
    for (std::size_t l = 0; l < layers_.size(); ++l) b2[l * sites_ + site_] = static_cast<T>(cfg.self_bias);

    params_.add("nu", ParamTag::Global, BasicTensor<T>::from({1, cfg.embed_dim}, std::move(nu), true));
    params_.add("fc1.weight", ParamTag::Global, BasicTensor<T>::from({cfg.embed_dim, cfg.hidden}, std::move(w1), true));
    params_.add("fc1.bias", ParamTag::Global, BasicTensor<T>::zeros({cfg.hidden}, true));
    params_.add("fc2.weight", ParamTag::Global, BasicTensor<T>::zeros({cfg.hidden, outputs}, true));
    params_.add("fc2.bias", ParamTag::Global, BasicTensor<T>::from({outputs}, std::move(b2), true));
  }

  std::size_t site() const { return site_; }
  std::size_t num_sites() const { return sites_; }
  const std::vector<std::string>& layers() const { return layers_; }
  const HypernetConfig& config() const { return cfg_; }
  ParameterStore<T>& params() { return params_; }
  const ParameterStore<T>& params() const { return params_; }

  /// n x M mixing weights as a differentiable tensor.
  BasicTensor<T> omega_tensor() const {
    const auto& p = params_;
    const auto hidden = tanh(linear(p.get("nu"), p.get("fc1.weight"), p.get("fc1.bias")));
    const auto logits = reshape(linear(hidden, p.get("fc2.weight"), p.get("fc2.bias")),
                                {std::max<std::size_t>(layers_.size(), 1), sites_});
    return cfg_.softmax_rows ? softmax(logits, 1) : logits;
  }

 private:
  std::size_t site_;
  std::vector<std::string> layers_;
  std::size_t sites_;
  HypernetConfig cfg_;
  ParameterStore<T> params_;
};

using Hypernetwork = BasicHypernetwork<float>;

template <class T>
AggregationMatrix hn_forward(const BasicHypernetwork<T>& hn) {
  NoGradGuard guard;
  const auto omega = hn.omega_tensor();
  AggregationMatrix out{hn.layers(), hn.num_sites(), {}};
  const auto d = omega.data();
  out.weights.assign(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(hn.layers().size() * hn.num_sites()));
  return out;
}

namespace detail {

inline void require_complete(std::span<const ParamVector> all, std::size_t expected, const char* what) {
  if (all.size() != expected) {
    throw Error("incomplete-round",
                std::string(what) + ": " + std::to_string(all.size()) + " of " + std::to_string(expected) + " uploads");
  }
  for (std::size_t i = 1; i < all.size(); ++i) require_same_layout(all[0], all[i], std::string(what) + " upload layout");
}

}  // namespace detail

/// theta^l = sum_i omega(l, i) * theta_i^l for every personalized layer l.
inline ParamVector personalize(std::span<const ParamVector> all_P, const AggregationMatrix& omega) {
  detail::require_complete(all_P, omega.sites, "personalize");
  ParamVector out = all_P[0];
  if (out.size() != omega.rows()) throw Error("layout", "aggregation matrix rows do not match personalized layers");
  for (std::size_t l = 0; l < out.size(); ++l) {
    if (out[l].name != omega.layers[l]) throw Error("layout", "aggregation row " + omega.layers[l] + " vs " + out[l].name);
    for (std::size_t j = 0; j < out[l].values.size(); ++j) {
      double acc = 0.0;
      for (std::size_t i = 0; i < omega.sites; ++i) acc += omega.at(l, i) * static_cast<double>(all_P[i][l].values[j]);
      out[l].values[j] = static_cast<float>(acc);
    }
  }
  return out;
}

/// c(l, i) = <theta_i^l, delta^l>: the surrogate's coefficient of omega(l, i).
inline std::vector<double> surrogate_coefficients(std::span<const ParamVector> all_P, const ParamVector& delta) {
  const std::size_t m = all_P.size();
  std::vector<double> c(delta.size() * m, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    require_same_layout(all_P[i], delta, "delta_P layout");
    for (std::size_t l = 0; l < delta.size(); ++l) {
      double acc = 0.0;
      for (std::size_t j = 0; j < delta[l].values.size(); ++j)
        acc += static_cast<double>(all_P[i][l].values[j]) * static_cast<double>(delta[l].values[j]);
      c[l * m + i] = acc;
    }
  }
  return c;
}

/// Surrogate S = sum_{l,i} omega(l, i) * c(l, i); its gradient with respect to
/// the hypernetwork is (d theta_P / d (nu, phi))^T delta_P.
template <class T>
BasicTensor<T> hn_surrogate(const BasicHypernetwork<T>& hn, std::span<const double> coeffs) {
  const std::size_t n = hn.layers().size(), m = hn.num_sites();
  if (coeffs.size() != n * m) throw Error("layout", "surrogate coefficient count");
  std::vector<T> c(coeffs.begin(), coeffs.end());
  const auto omega = hn.omega_tensor();
  return sum(mul(omega, BasicTensor<T>::from({n, m}, std::move(c))));
}

/// Moves nu and phi along the surrogate gradient, so that the aggregated
/// theta_P^m follows the site's own update delta = after - before.
template <class T>
void hn_update(BasicHypernetwork<T>& hn, std::span<const ParamVector> all_P, const ParamVector& delta, double hn_lr) {
  detail::require_complete(all_P, hn.num_sites(), "hn_update");
  if (hn.layers().empty()) return;
  const auto coeffs = surrogate_coefficients(all_P, delta);
  auto& p = hn.params();
  p.zero_grad();
  backward(hn_surrogate(hn, coeffs));
  for (auto& e : p.entries()) {
    const auto g = e.tensor.grad();
    for (T v : g)
      if (!std::isfinite(static_cast<double>(v))) throw Error("hn-diverged", "site " + std::to_string(hn.site()) + " " + e.name);
  }
  const T lr = static_cast<T>(hn_lr);
  for (auto& e : p.entries()) {
    auto w = e.tensor.mutable_data();
    const auto g = e.tensor.grad();
    for (std::size_t j = 0; j < w.size(); ++j) w[j] += lr * g[j];
  }
  p.zero_grad();
}

}  // namespace fedsis
