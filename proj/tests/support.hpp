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

// Shared helpers for the test suites: random tensors and central
// finite-difference gradient checks.

#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "fedsis/ops.hpp"
#include "fedsis/params.hpp"

namespace fedsis::testing {

inline TensorD random_tensor(std::mt19937_64& rng, Shape shape, double lo = -1.0, double hi = 1.0,
                             bool requires_grad = true) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = u(rng);
  return TensorD::from(std::move(shape), std::move(v), requires_grad);
}

/// Uniform values with |x| >= margin (away from kinks at zero).
inline TensorD random_away_from_zero(std::mt19937_64& rng, Shape shape, double margin = 0.05) {
  std::uniform_real_distribution<double> u(margin, 1.0);
  std::bernoulli_distribution sign(0.5);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = sign(rng) ? u(rng) : -u(rng);
  return TensorD::from(std::move(shape), std::move(v), true);
}

/// Relative error with a floor tied to the gradient's overall scale, so that
/// entries that are zero analytically compare on an absolute footing.
inline double grad_rel_error(std::span<const double> analytic, std::span<const double> numeric) {
  double scale = 0.0;
  for (double v : numeric) scale = std::max(scale, std::fabs(v));
  const double floor = std::max(1e-3 * scale, 1e-10);
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double e = std::fabs(analytic[i] - numeric[i]) / std::max(std::fabs(numeric[i]), floor);
    worst = std::max(worst, e);
  }
  return worst;
}

/// Worst relative error between backward() and central differences of the
/// scalar function `f` over every scalar of every input.
inline double fd_check(const std::function<TensorD(const std::vector<TensorD>&)>& f, std::vector<TensorD> inputs,
                       double h = 1e-6) {
  for (auto& x : inputs) x.zero_grad();
  backward(f(inputs));
  double worst = 0.0;
  for (auto& x : inputs) {
    std::vector<double> numeric(x.numel());
    auto v = x.mutable_data();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double keep = v[i];
      double plus, minus;
      {
        NoGradGuard g;
        v[i] = keep + h;
        plus = f(inputs).item();
        v[i] = keep - h;
        minus = f(inputs).item();
      }
      v[i] = keep;
      numeric[i] = (plus - minus) / (2.0 * h);
    }
    worst = std::max(worst, grad_rel_error(x.grad(), numeric));
  }
  return worst;
}

/// Contracts a tensor-valued op with fixed random weights into a scalar so
/// every output element receives a distinct adjoint.
inline std::function<TensorD(const std::vector<TensorD>&)> contracted(
    std::mt19937_64& rng, Shape out_shape, std::function<TensorD(const std::vector<TensorD>&)> op) {
  const TensorD w = random_tensor(rng, std::move(out_shape), -1.0, 1.0, false);
  return [w, op](const std::vector<TensorD>& in) { return sum(mul(op(in), w)); };
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("fedsis_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

inline ParamVector random_params(std::mt19937_64& rng, const std::vector<std::pair<std::string, Shape>>& layout,
                                 double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  ParamVector pv;
  for (const auto& [name, shape] : layout) {
    NamedTensor t{name, ParamTag::Global, shape, std::vector<float>(shape_numel(shape))};
    for (auto& v : t.values) v = static_cast<float>(u(rng));
    pv.push_back(std::move(t));
  }
  return pv;
}

}  // namespace fedsis::testing
