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

// Region (Dice, IoU) and boundary (ASSD, HD95) segmentation metrics.
//
// Boundary pixels of a class are its pixels with at least one 4-neighbour
// outside the class; neighbours beyond the image edge count as outside.
// Boundary distances come from an exact Euclidean distance transform.

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "fedsis/losses.hpp"

namespace fedsis {

struct RegionScores {
  std::vector<double> dice;  // percent, per class
  std::vector<double> iou;   // percent, per class
  std::vector<bool> both_empty;
};

struct SurfaceScores {
  std::vector<double> assd;  // pixels, per class
  std::vector<double> hd95;  // pixels, per class
  std::vector<bool> defined;  // false when either side has no boundary
};

namespace detail {

inline void check_same_extents(const Mask& a, const Mask& b) {
  if (a.height != b.height || a.width != b.width) throw Error("shape", "mask extents differ");
}

}  // namespace detail

inline RegionScores region_metrics(const Mask& pred, const Mask& gt, std::size_t num_classes) {
  detail::check_same_extents(pred, gt);
  RegionScores r{std::vector<double>(num_classes), std::vector<double>(num_classes),
                 std::vector<bool>(num_classes, false)};
  for (std::size_t c = 0; c < num_classes; ++c) {
    std::size_t p = 0, g = 0, both = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const bool in_p = pred.labels[i] == c;
      const bool in_g = gt.labels[i] == c;
      p += in_p;
      g += in_g;
      both += in_p && in_g;
    }
    if (p + g == 0) {
      r.dice[c] = r.iou[c] = 100.0;
      r.both_empty[c] = true;
      continue;
    }
    r.dice[c] = 100.0 * 2.0 * static_cast<double>(both) / static_cast<double>(p + g);
    r.iou[c] = 100.0 * static_cast<double>(both) / static_cast<double>(p + g - both);
  }
  return r;
}

/// Boundary pixels of class `c` as a 0/1 grid.
inline std::vector<std::uint8_t> class_boundary(const Mask& m, std::size_t c) {
  std::vector<std::uint8_t> b(m.size(), 0);
  const auto h = static_cast<std::ptrdiff_t>(m.height);
  const auto w = static_cast<std::ptrdiff_t>(m.width);
  auto inside = [&](std::ptrdiff_t y, std::ptrdiff_t x) {
    return y >= 0 && y < h && x >= 0 && x < w && m.labels[static_cast<std::size_t>(y * w + x)] == c;
  };
  for (std::ptrdiff_t y = 0; y < h; ++y)
    for (std::ptrdiff_t x = 0; x < w; ++x) {
      if (!inside(y, x)) continue;
      if (!inside(y - 1, x) || !inside(y + 1, x) || !inside(y, x - 1) || !inside(y, x + 1))
        b[static_cast<std::size_t>(y * w + x)] = 1;
    }
  return b;
}

namespace detail {

// 1-D squared distance transform (lower envelope of parabolas).
inline void edt_1d(const double* f, double* d, std::size_t n, std::vector<std::size_t>& v, std::vector<double>& z) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  v.assign(n, 0);
  z.assign(n + 1, 0.0);
  std::size_t k = 0;
  std::size_t first = n;
  for (std::size_t q = 0; q < n; ++q)
    if (f[q] < inf) {
      first = q;
      break;
    }
  if (first == n) {
    for (std::size_t q = 0; q < n; ++q) d[q] = inf;
    return;
  }
  v[0] = first;
  z[0] = -inf;
  z[1] = inf;
  for (std::size_t q = first + 1; q < n; ++q) {
    if (!(f[q] < inf)) continue;
    double s;
    while (true) {
      const double vq = static_cast<double>(v[k]);
      const double qd = static_cast<double>(q);
      s = ((f[q] + qd * qd) - (f[v[k]] + vq * vq)) / (2.0 * qd - 2.0 * vq);
      if (s <= z[k] && k > 0) {
        --k;
        continue;
      }
      break;
    }
    if (s <= z[k]) {  // k == 0: new parabola dominates everywhere
      v[0] = q;
      z[0] = -inf;
      z[1] = inf;
      continue;
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = inf;
  }
  k = 0;
  for (std::size_t q = 0; q < n; ++q) {
    while (z[k + 1] < static_cast<double>(q)) ++k;
    const double dq = static_cast<double>(q) - static_cast<double>(v[k]);
    d[q] = dq * dq + f[v[k]];
  }
}

}  // namespace detail

/// Euclidean distance from every pixel to the nearest set pixel of `sites`
/// (infinity everywhere when `sites` is empty).
inline std::vector<double> distance_transform(std::span<const std::uint8_t> sites, std::size_t h, std::size_t w) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> grid(h * w), tmp(std::max(h, w)), out(std::max(h, w));
  for (std::size_t i = 0; i < h * w; ++i) grid[i] = sites[i] ? 0.0 : inf;
  std::vector<std::size_t> v;
  std::vector<double> z;
  for (std::size_t x = 0; x < w; ++x) {
    for (std::size_t y = 0; y < h; ++y) tmp[y] = grid[y * w + x];
    detail::edt_1d(tmp.data(), out.data(), h, v, z);
    for (std::size_t y = 0; y < h; ++y) grid[y * w + x] = out[y];
  }
  for (std::size_t y = 0; y < h; ++y) {
    detail::edt_1d(grid.data() + y * w, out.data(), w, v, z);
    for (std::size_t x = 0; x < w; ++x) grid[y * w + x] = std::sqrt(out[x]);
  }
  return grid;
}

/// Linear-interpolated percentile (q in [0, 1]) of an unsorted sample.
inline double percentile_linear(std::vector<double> values, double q) {
  if (values.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

inline SurfaceScores surface_metrics(const Mask& pred, const Mask& gt, std::size_t num_classes) {
  detail::check_same_extents(pred, gt);
  constexpr double nan = std::numeric_limits<double>::quiet_NaN();
  SurfaceScores s{std::vector<double>(num_classes, nan), std::vector<double>(num_classes, nan),
                  std::vector<bool>(num_classes, false)};
  const std::size_t h = gt.height, w = gt.width;
  for (std::size_t c = 0; c < num_classes; ++c) {
    const auto bp = class_boundary(pred, c);
    const auto bg = class_boundary(gt, c);
    const bool has_p = std::find(bp.begin(), bp.end(), 1) != bp.end();
    const bool has_g = std::find(bg.begin(), bg.end(), 1) != bg.end();
    if (!has_p || !has_g) continue;
    const auto dist_to_g = distance_transform(bg, h, w);
    const auto dist_to_p = distance_transform(bp, h, w);
    std::vector<double> pooled;
    double sum_pg = 0.0, sum_gp = 0.0;
    std::size_t n_p = 0, n_g = 0;
    for (std::size_t i = 0; i < h * w; ++i) {
      if (bp[i]) {
        sum_pg += dist_to_g[i];
        ++n_p;
        pooled.push_back(dist_to_g[i]);
      }
      if (bg[i]) {
        sum_gp += dist_to_p[i];
        ++n_g;
        pooled.push_back(dist_to_p[i]);
      }
    }
    s.assd[c] = 0.5 * (sum_pg / static_cast<double>(n_p) + sum_gp / static_cast<double>(n_g));
    s.hd95[c] = percentile_linear(std::move(pooled), 0.95);
    s.defined[c] = true;
  }
  return s;
}

/// Metrics for one sample or averaged over a split. Means run over the
/// non-background classes; surface means skip undefined entries.
struct MetricReport {
  std::vector<double> dice, iou, assd, hd95;  // per class
  std::vector<std::size_t> surface_count;    // samples contributing to assd/hd95 per class
  std::vector<std::size_t> empty_count;      // samples where the class was absent from both masks
  double mean_dice = 0.0;
  double mean_iou = 0.0;
  double mean_assd = std::numeric_limits<double>::quiet_NaN();
  double mean_hd95 = std::numeric_limits<double>::quiet_NaN();
  std::size_t surface_samples = 0;  // samples with a defined surface mean
  std::size_t samples = 0;

  bool surface_defined() const { return surface_samples > 0; }
};

inline MetricReport score_sample(const Mask& pred, const Mask& gt, std::size_t num_classes) {
  const auto r = region_metrics(pred, gt, num_classes);
  const auto s = surface_metrics(pred, gt, num_classes);
  MetricReport m;
  m.dice = r.dice;
  m.iou = r.iou;
  m.assd = s.assd;
  m.hd95 = s.hd95;
  m.surface_count.resize(num_classes);
  m.empty_count.resize(num_classes);
  double sd = 0, si = 0, sa = 0, sh = 0;
  std::size_t defined = 0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    m.surface_count[c] = s.defined[c] ? 1 : 0;
    m.empty_count[c] = r.both_empty[c] ? 1 : 0;
    if (c == 0) continue;
    sd += r.dice[c];
    si += r.iou[c];
    if (s.defined[c]) {
      sa += s.assd[c];
      sh += s.hd95[c];
      ++defined;
    }
  }
  const double fg = static_cast<double>(num_classes - 1);
  m.mean_dice = sd / fg;
  m.mean_iou = si / fg;
  if (defined) {
    m.mean_assd = sa / static_cast<double>(defined);
    m.mean_hd95 = sh / static_cast<double>(defined);
    m.surface_samples = 1;
  }
  m.samples = 1;
  return m;
}

/// Sample-weighted average of per-sample reports.
inline MetricReport average_reports(std::span<const MetricReport> reports) {
  MetricReport out;
  if (reports.empty()) return out;
  const std::size_t k = reports[0].dice.size();
  out.dice.assign(k, 0.0);
  out.iou.assign(k, 0.0);
  out.assd.assign(k, 0.0);
  out.hd95.assign(k, 0.0);
  out.surface_count.assign(k, 0);
  out.empty_count.assign(k, 0);
  double md = 0, mi = 0, ma = 0, mh = 0;
  for (const auto& r : reports) {
    for (std::size_t c = 0; c < k; ++c) {
      out.dice[c] += r.dice[c] * static_cast<double>(r.samples);
      out.iou[c] += r.iou[c] * static_cast<double>(r.samples);
      if (r.surface_count[c]) {
        out.assd[c] += r.assd[c] * static_cast<double>(r.surface_count[c]);
        out.hd95[c] += r.hd95[c] * static_cast<double>(r.surface_count[c]);
      }
      out.surface_count[c] += r.surface_count[c];
      out.empty_count[c] += r.empty_count[c];
    }
    md += r.mean_dice * static_cast<double>(r.samples);
    mi += r.mean_iou * static_cast<double>(r.samples);
    if (r.surface_samples) {
      ma += r.mean_assd * static_cast<double>(r.surface_samples);
      mh += r.mean_hd95 * static_cast<double>(r.surface_samples);
    }
    out.samples += r.samples;
    out.surface_samples += r.surface_samples;
  }
  const double n = static_cast<double>(out.samples);
  for (std::size_t c = 0; c < k; ++c) {
    out.dice[c] /= n;
    out.iou[c] /= n;
    if (out.surface_count[c]) {
      out.assd[c] /= static_cast<double>(out.surface_count[c]);
      out.hd95[c] /= static_cast<double>(out.surface_count[c]);
    } else {
      out.assd[c] = out.hd95[c] = std::numeric_limits<double>::quiet_NaN();
    }
  }
  out.mean_dice = md / n;
  out.mean_iou = mi / n;
  if (out.surface_samples) {
    out.mean_assd = ma / static_cast<double>(out.surface_samples);
    out.mean_hd95 = mh / static_cast<double>(out.surface_samples);
  }
  return out;
}

}  // namespace fedsis
