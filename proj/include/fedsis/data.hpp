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

// Synthetic multi-site instrument segmentation data and style statistics.
//
// Every site renders the same articulated instrument vocabulary (shaft,
// wrist, jaws) but with its own palette. The default styles rotate the part
// hues between sites, so a colour that means "shaft" at one site means
// "wrist" at another and only the shape is shared.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedsis/losses.hpp"
#include "fedsis/serialize.hpp"

namespace fedsis {

using Rgb = std::array<float, 3>;

struct StyleStats {
  Rgb mu{0.f, 0.f, 0.f};
  Rgb sigma{1.f, 1.f, 1.f};

  static constexpr float kMinSigma = 1e-3f;
  bool operator==(const StyleStats&) const = default;
};

/// Style statistics of every site, indexed by site id.
using StyleMemory = std::vector<StyleStats>;

/// Target statistics of a cross-style distortion.
struct StyleTarget {
  Rgb beta{0.f, 0.f, 0.f};
  Rgb gamma{1.f, 1.f, 1.f};
};

struct SiteStyle {
  float base_hue = 0.f;  // degrees; part hues are base_hue + {0, 120, 240}
  float saturation = 0.7f;
  Rgb part_value{0.85f, 0.65f, 0.95f};  // shaft, wrist, jaws
  float contrast = 1.f;
  float texture_amp = 0.15f;
  float texture_freq = 0.6f;  // radians per pixel at 32x32
  float noise = 0.02f;
  Rgb bg_a{0.3f, 0.3f, 0.3f};
  Rgb bg_b{0.5f, 0.5f, 0.5f};
};

struct Sample {
  Tensor image;  // 3 x H x W in [0, 1]
  Mask mask;
};

enum class Split : std::uint8_t { Train = 0, Test = 1 };

inline const char* split_name(Split s) { return s == Split::Train ? "train" : "test"; }

struct SiteDataset {
  std::size_t site = 0;
  Split split = Split::Train;
  SiteStyle style;
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }
};

inline constexpr std::size_t kNumClasses = 4;  // 0 bg, 1 shaft, 2 wrist, 3 jaws

namespace detail {

inline Rgb hsv_to_rgb(float h_deg, float s, float v) {
  float h = std::fmod(h_deg, 360.f);
  if (h < 0) h += 360.f;
  const float c = v * s;
  const float x = c * (1.f - std::fabs(std::fmod(h / 60.f, 2.f) - 1.f));
  const float m = v - c;
  Rgb rgb;
  if (h < 60) rgb = {c, x, 0};
  else if (h < 120) rgb = {x, c, 0};
  else if (h < 180) rgb = {0, c, x};
  else if (h < 240) rgb = {0, x, c};
  else if (h < 300) rgb = {x, 0, c};
  else rgb = {c, 0, x};
  for (auto& ch : rgb) ch += m;
  return rgb;
}

inline std::mt19937_64 seeded_rng(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(b)};
  return std::mt19937_64(seq);
}

struct Vec2 {
  double x, y;
};

inline double seg_dist(Vec2 p, Vec2 a, Vec2 b, double* t_out = nullptr) {
  const double dx = b.x - a.x, dy = b.y - a.y;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0 ? ((p.x - a.x) * dx + (p.y - a.y) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  if (t_out) *t_out = t;
  const double ex = p.x - (a.x + t * dx), ey = p.y - (a.y + t * dy);
  return std::sqrt(ex * ex + ey * ey);
}

// Rasterizes one randomly posed instrument. Returns false if any part class
// ended up with no pixel.
inline bool render_pose(std::mt19937_64& rng, std::size_t size, Mask& mask) {
  const double s = static_cast<double>(size);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const Vec2 w{s * (0.3 + 0.4 * u(rng)), s * (0.3 + 0.4 * u(rng))};
  const double theta = 2.0 * std::numbers::pi * u(rng);
  const Vec2 d{std::cos(theta), std::sin(theta)};
  const Vec2 n{-d.y, d.x};
  const double half_width = s * (0.07 + 0.03 * u(rng));
  const double wrist_half = s * (0.04 + 0.04 * u(rng));
  const double wrist_r = half_width * 1.15;
  const double jaw_len = s * (0.15 + 0.1 * u(rng));
  const double opening = 0.15 + 0.35 * u(rng);
  const double jaw_w = s * 0.045;

  const Vec2 wa{w.x - d.x * wrist_half, w.y - d.y * wrist_half};
  const Vec2 wb{w.x + d.x * wrist_half, w.y + d.y * wrist_half};
  const Vec2 base{wb.x + d.x * wrist_r * 0.5, wb.y + d.y * wrist_r * 0.5};
  std::array<Vec2, 2> jaw_a, jaw_b;
  for (int side = 0; side < 2; ++side) {
    const double sg = side == 0 ? 1.0 : -1.0;
    const double c = std::cos(sg * opening), sn = std::sin(sg * opening);
    const Vec2 dir{c * d.x - sn * d.y, sn * d.x + c * d.y};
    jaw_a[side] = {base.x + sg * n.x * half_width * 0.5, base.y + sg * n.y * half_width * 0.5};
    jaw_b[side] = {jaw_a[side].x + dir.x * jaw_len, jaw_a[side].y + dir.y * jaw_len};
  }

  std::array<std::size_t, kNumClasses> counts{};
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const Vec2 p{static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5};
      const double along = (p.x - w.x) * d.x + (p.y - w.y) * d.y;
      const double across = std::fabs((p.x - w.x) * n.x + (p.y - w.y) * n.y);
      std::uint8_t label = 0;
      if (along <= 0.0 && across <= half_width) label = 1;
      if (seg_dist(p, wa, wb) <= wrist_r) label = 2;
      for (int side = 0; side < 2; ++side) {
        double t;
        const double dist = seg_dist(p, jaw_a[side], jaw_b[side], &t);
        if (dist <= jaw_w * (1.0 - 0.6 * t)) label = 3;
      }
      mask.at(y, x) = label;
      ++counts[label];
    }
  return counts[1] > 0 && counts[2] > 0 && counts[3] > 0;
}

}  // namespace detail

/// Built-in styles for sites 0..2; higher ids get a random style from the seed.
inline SiteStyle default_style(std::size_t m, std::uint64_t seed = 0) {
  SiteStyle st;
  switch (m) {
    case 0:
      st.base_hue = 0.f;
      st.bg_a = {0.30f, 0.12f, 0.10f};
      st.bg_b = {0.55f, 0.30f, 0.25f};
      break;
    case 1:
      st.base_hue = 20.f;
      st.contrast = 0.85f;
      st.texture_amp = 0.1f;
      st.bg_a = {0.20f, 0.18f, 0.22f};
      st.bg_b = {0.40f, 0.35f, 0.42f};
      break;
    case 2:
      st.base_hue = 40.f;
      st.contrast = 1.2f;
      st.texture_amp = 0.25f;
      st.texture_freq = 0.9f;
      st.saturation = 0.8f;
      st.bg_a = {0.55f, 0.50f, 0.35f};
      st.bg_b = {0.80f, 0.75f, 0.55f};
      break;
    default: {
      auto rng = detail::seeded_rng(seed, m, 0x5717e);
      std::uniform_real_distribution<float> u(0.f, 1.f);
      st.base_hue = 360.f * u(rng);
      st.saturation = 0.5f + 0.4f * u(rng);
      st.contrast = 0.7f + 0.6f * u(rng);
      st.texture_amp = 0.05f + 0.25f * u(rng);
      st.texture_freq = 0.4f + 0.6f * u(rng);
      for (std::size_t c = 0; c < 3; ++c) {
        st.bg_a[c] = 0.1f + 0.5f * u(rng);
        st.bg_b[c] = std::min(1.f, st.bg_a[c] + 0.1f + 0.3f * u(rng));
      }
    }
  }
  return st;
}

/// Renders one sample in the given style.
inline Sample render_sample(std::mt19937_64& rng, const SiteStyle& st, std::size_t size) {
  Mask mask(size, size);
  bool ok = false;
  for (int attempt = 0; attempt < 64 && !ok; ++attempt) ok = detail::render_pose(rng, size, mask);
  if (!ok) throw Error("generator", "could not place an instrument with every part visible");

  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, st.noise);
  const double scale = 32.0 / static_cast<double>(size);
  std::array<double, 3> ang, phase, freq;
  for (int j = 0; j < 3; ++j) {
    ang[j] = 2.0 * std::numbers::pi * u(rng);
    phase[j] = 2.0 * std::numbers::pi * u(rng);
    freq[j] = st.texture_freq * scale * (0.5 + u(rng));
  }
  std::array<Rgb, 3> part;
  for (std::size_t k = 0; k < 3; ++k) {
    part[k] = detail::hsv_to_rgb(st.base_hue + 120.f * static_cast<float>(k), st.saturation, st.part_value[k]);
  }

  std::vector<float> img(3 * size * size);
  const std::size_t plane = size * size;
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      double tex = 0.0;
      for (int j = 0; j < 3; ++j) {
        tex += std::sin(freq[j] * (static_cast<double>(x) * std::cos(ang[j]) + static_cast<double>(y) * std::sin(ang[j])) +
                        phase[j]);
      }
      tex /= 3.0;
      const std::uint8_t label = mask.at(y, x);
      for (std::size_t c = 0; c < 3; ++c) {
        double v;
        if (label == 0) {
          const double mix = std::clamp(0.5 + 0.5 * tex * (0.5 + 2.0 * st.texture_amp), 0.0, 1.0);
          v = st.bg_a[c] + mix * (st.bg_b[c] - st.bg_a[c]);
        } else {
          v = 0.5 + st.contrast * (part[label - 1][c] - 0.5) + 0.3 * st.texture_amp * tex;
        }
        v += noise(rng);
        img[c * plane + y * size + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  return {Tensor::from(Shape{3, size, size}, std::move(img)), std::move(mask)};
}

/// Deterministic per (seed, m, split).
inline SiteDataset generate_site(std::size_t m, std::size_t n_samples, std::uint64_t seed, Split split = Split::Train,
                                 std::size_t img_size = 32, const SiteStyle* style = nullptr) {
  if (n_samples == 0) throw Error("config", "generate_site needs at least one sample");
  if (img_size < 8) throw Error("config", "image size must be at least 8");
  SiteDataset ds;
  ds.site = m;
  ds.split = split;
  ds.style = style ? *style : default_style(m, seed);
  auto rng = detail::seeded_rng(seed, m, static_cast<std::uint64_t>(split) + 1);
  ds.samples.reserve(n_samples);
  for (std::size_t i = 0; i < n_samples; ++i) ds.samples.push_back(render_sample(rng, ds.style, img_size));
  return ds;
}

/// Per-channel population mean/std over all pixels of all images.
inline StyleStats compute_stats(std::span<const Sample> samples) {
  if (samples.empty()) throw Error("empty", "compute_stats on an empty dataset");
  std::array<double, 3> sum{}, sq{};
  std::size_t count = 0;
  for (const auto& s : samples) {
    const auto d = s.image.data();
    const std::size_t plane = d.size() / 3;
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < plane; ++i) sum[c] += d[c * plane + i];
    count += plane;
  }
  std::array<double, 3> mean;
  for (std::size_t c = 0; c < 3; ++c) mean[c] = sum[c] / static_cast<double>(count);
  for (const auto& s : samples) {
    const auto d = s.image.data();
    const std::size_t plane = d.size() / 3;
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < plane; ++i) {
        const double e = d[c * plane + i] - mean[c];
        sq[c] += e * e;
      }
  }
  StyleStats st;
  for (std::size_t c = 0; c < 3; ++c) {
    st.mu[c] = static_cast<float>(mean[c]);
    st.sigma[c] = std::max(StyleStats::kMinSigma, static_cast<float>(std::sqrt(sq[c] / static_cast<double>(count))));
  }
  return st;
}

inline StyleStats compute_stats(const SiteDataset& ds) { return compute_stats(std::span<const Sample>(ds.samples)); }

/// Convex mix of every site's statistics.
inline StyleTarget mix_style(const StyleMemory& memory, std::span<const double> lambdas) {
  if (lambdas.size() != memory.size()) {
    throw Error("lambda", std::to_string(lambdas.size()) + " weights for " + std::to_string(memory.size()) + " sites");
  }
  double total = 0.0;
  for (double l : lambdas) {
    if (!(l >= 0.0)) throw Error("lambda", "negative or NaN weight");
    total += l;
  }
  if (std::fabs(total - 1.0) > 1e-6) throw Error("lambda", "weights sum to " + std::to_string(total));
  StyleTarget t;
  for (std::size_t c = 0; c < 3; ++c) {
    double b = 0.0, g = 0.0;
    for (std::size_t i = 0; i < memory.size(); ++i) {
      b += lambdas[i] * memory[i].mu[c];
      g += lambdas[i] * memory[i].sigma[c];
    }
    t.beta[c] = static_cast<float>(b);
    t.gamma[c] = static_cast<float>(g);
  }
  return t;
}

/// One Beta(a, a) variate as a ratio of gamma draws.
template <class Rng>
double beta_variate(Rng& rng, double a) {
  std::gamma_distribution<double> gamma(a, 1.0);
  double x = 0.0, y = 0.0;
  do {
    x = gamma(rng);
    y = gamma(rng);
  } while (!(x + y > 0.0));
  return x / (x + y);
}

/// M i.i.d. Beta(a, a) draws normalized by their sum.
template <class Rng>
std::vector<double> sample_lambdas(std::size_t m, Rng& rng, double a = 0.1) {
  if (m == 0) throw Error("config", "sample_lambdas needs M >= 1");
  std::vector<double> out(m);
  while (true) {
    double total = 0.0;
    for (auto& v : out) {
      v = beta_variate(rng, a);
      total += v;
    }
    if (total > 0.0 && std::isfinite(total)) {
      for (auto& v : out) v /= total;
      return out;
    }
  }
}

/// Renormalizes `image` from its own statistics to `target`, per channel.
/// Own statistics as the target reproduce the input exactly.
inline Tensor distort(const Tensor& image, const StyleStats& own, const StyleTarget& target, bool clamp = true) {
  if (image.rank() != 3 || image.extent(0) != 3) throw Error("shape", "distort needs a 3 x H x W image");
  const std::size_t plane = image.extent(1) * image.extent(2);
  const auto src = image.data();
  std::vector<float> out(src.size());
  for (std::size_t c = 0; c < 3; ++c) {
    if (!(own.sigma[c] > 0.f)) throw Error("config", "own sigma must be positive");
    const double mu = own.mu[c];
    const double ratio = static_cast<double>(target.gamma[c]) / static_cast<double>(own.sigma[c]);
    const double beta = target.beta[c];
    for (std::size_t i = 0; i < plane; ++i) {
      double v = (static_cast<double>(src[c * plane + i]) - mu) * ratio + beta;
      if (clamp) v = std::clamp(v, 0.0, 1.0);
      out[c * plane + i] = static_cast<float>(v);
    }
  }
  return Tensor::from(image.shape(), std::move(out));
}

// ---------------------------------------------------------------------------
// Dataset cache: <stem>.pfsis (image{i} as 3xHxW, mask{i} as HxW) + <stem>.json

inline nlohmann::json style_to_json(const SiteStyle& s) {
  return {{"base_hue", s.base_hue},       {"saturation", s.saturation}, {"part_value", s.part_value},
          {"contrast", s.contrast},       {"texture_amp", s.texture_amp}, {"texture_freq", s.texture_freq},
          {"noise", s.noise},             {"bg_a", s.bg_a},             {"bg_b", s.bg_b}};
}

inline SiteStyle style_from_json(const nlohmann::json& j) {
  SiteStyle s;
  s.base_hue = j.at("base_hue");
  s.saturation = j.at("saturation");
  s.part_value = j.at("part_value");
  s.contrast = j.at("contrast");
  s.texture_amp = j.at("texture_amp");
  s.texture_freq = j.at("texture_freq");
  s.noise = j.at("noise");
  s.bg_a = j.at("bg_a");
  s.bg_b = j.at("bg_b");
  return s;
}

inline void save_dataset(const std::filesystem::path& stem, const SiteDataset& ds, std::uint64_t seed) {
  ParamVector frame;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto& s = ds.samples[i];
    const auto d = s.image.data();
    frame.push_back({"image" + std::to_string(i), ParamTag::Global, s.image.shape(), {d.begin(), d.end()}});
    frame.push_back({"mask" + std::to_string(i), ParamTag::Global, Shape{s.mask.height, s.mask.width},
                     std::vector<float>(s.mask.labels.begin(), s.mask.labels.end())});
  }
  save_frame(stem.string() + ".pfsis", frame);
  const auto st = compute_stats(ds);
  nlohmann::json meta = {{"site", ds.site},
                         {"split", split_name(ds.split)},
                         {"seed", seed},
                         {"samples", ds.size()},
                         {"style", style_to_json(ds.style)},
                         {"stats", {{"mu", st.mu}, {"sigma", st.sigma}}}};
  std::ofstream js(stem.string() + ".json");
  if (!js) throw Error("io", "cannot write " + stem.string() + ".json");
  js << meta.dump(2) << "\n";
}

inline SiteDataset load_dataset(const std::filesystem::path& stem) {
  std::ifstream js(stem.string() + ".json");
  if (!js) throw Error("io", "cannot read " + stem.string() + ".json");
  nlohmann::json meta;
  try {
    js >> meta;
  } catch (const nlohmann::json::exception& e) {
    throw Error("format", e.what());
  }
  SiteDataset ds;
  ds.site = meta.at("site");
  ds.split = meta.at("split") == "test" ? Split::Test : Split::Train;
  ds.style = style_from_json(meta.at("style"));
  const auto frame = load_frame(stem.string() + ".pfsis");
  if (frame.size() % 2 != 0) throw Error("format", "dataset frame has an odd record count");
  for (std::size_t i = 0; i < frame.size(); i += 2) {
    const auto& img = frame[i];
    const auto& msk = frame[i + 1];
    if (img.shape.size() != 3 || msk.shape.size() != 2) throw Error("format", "bad sample record " + img.name);
    std::vector<std::uint8_t> labels(msk.values.begin(), msk.values.end());
    ds.samples.push_back({Tensor::from(img.shape, img.values), Mask(msk.shape[0], msk.shape[1], std::move(labels))});
  }
  return ds;
}

}  // namespace fedsis
