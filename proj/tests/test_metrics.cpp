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

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "fedsis/metrics.hpp"
#include "oracles.hpp"

namespace fedsis {
namespace {

constexpr std::size_t K = 4;
using testing::oracle_surface;
using testing::random_blobs;

TEST(Metrics, AgreeWithBruteForceOnRandomBlobs) {
  std::mt19937_64 rng(808);
  int surface_checked = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const auto pred = random_blobs(rng), gt = random_blobs(rng);
    const auto r = region_metrics(pred, gt, K);
    const auto s = surface_metrics(pred, gt, K);
    for (std::uint8_t c = 0; c < K; ++c) {
      double p = 0, g = 0, both = 0;
      for (std::size_t i = 0; i < 256; ++i) {
        p += pred.labels[i] == c;
        g += gt.labels[i] == c;
        both += pred.labels[i] == c && gt.labels[i] == c;
      }
      if (p + g == 0) {
        EXPECT_TRUE(r.both_empty[c]);
        EXPECT_EQ(r.dice[c], 100.0);
      } else {
        EXPECT_NEAR(r.dice[c], 200 * both / (p + g), 1e-6);
        EXPECT_NEAR(r.iou[c], 100 * both / (p + g - both), 1e-6);
      }
      EXPECT_GE(r.dice[c] + 1e-12, r.iou[c]);
      const auto o = oracle_surface(pred, gt, c);
      ASSERT_EQ(s.defined[c], o.defined) << "trial " << trial << " class " << int(c);
      if (o.defined) {
        EXPECT_NEAR(s.assd[c], o.assd, 1e-6);
        EXPECT_NEAR(s.hd95[c], o.hd95, 1e-6);
        ++surface_checked;
      } else {
        EXPECT_TRUE(std::isnan(s.assd[c]));
      }
    }
  }
  EXPECT_GT(surface_checked, 300);
}

TEST(Metrics, SymmetricInPredictionAndTruth) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    const auto a = random_blobs(rng), b = random_blobs(rng);
    const auto ab = surface_metrics(a, b, K), ba = surface_metrics(b, a, K);
    const auto rab = region_metrics(a, b, K), rba = region_metrics(b, a, K);
    for (std::size_t c = 0; c < K; ++c) {
      EXPECT_EQ(rab.dice[c], rba.dice[c]);
      EXPECT_EQ(rab.iou[c], rba.iou[c]);
      if (!ab.defined[c]) continue;
      EXPECT_NEAR(ab.assd[c], ba.assd[c], 1e-12);
      EXPECT_NEAR(ab.hd95[c], ba.hd95[c], 1e-12);
    }
  }
}

TEST(Metrics, IdenticalMasks) {
  std::mt19937_64 rng(10);
  const auto m = random_blobs(rng);
  const auto r = region_metrics(m, m, K);
  const auto s = surface_metrics(m, m, K);
  for (std::size_t c = 0; c < K; ++c) {
    EXPECT_EQ(r.dice[c], 100.0);
    EXPECT_EQ(r.iou[c], 100.0);
    if (s.defined[c]) {
      EXPECT_EQ(s.assd[c], 0.0);
      EXPECT_EQ(s.hd95[c], 0.0);
    }
  }
}

TEST(Metrics, DisjointMasksScoreZero) {
  Mask a(4, 4), b(4, 4);
  a.at(0, 0) = 1;
  b.at(3, 3) = 1;
  const auto r = region_metrics(a, b, 2);
  EXPECT_EQ(r.dice[1], 0.0);
  EXPECT_EQ(r.iou[1], 0.0);
}

TEST(Metrics, HalfOverlap) {
  Mask p(2, 4), g(2, 4);
  for (std::size_t x = 0; x < 4; ++x) p.at(0, x) = 1;
  g.at(0, 0) = g.at(0, 1) = g.at(1, 0) = g.at(1, 1) = 1;
  const auto r = region_metrics(p, g, 2);
  EXPECT_DOUBLE_EQ(r.dice[1], 50.0);
  EXPECT_NEAR(r.iou[1], 100.0 / 3.0, 1e-12);
}

TEST(Metrics, SinglePixelsThreeApart) {
  Mask p(5, 8), g(5, 8);
  p.at(2, 1) = 1;
  g.at(2, 4) = 1;
  const auto s = surface_metrics(p, g, 2);
  ASSERT_TRUE(s.defined[1]);
  EXPECT_DOUBLE_EQ(s.assd[1], 3.0);
  EXPECT_DOUBLE_EQ(s.hd95[1], 3.0);
}

TEST(Metrics, EmptySideIsUndefined) {
  Mask p(4, 4), g(4, 4);
  g.at(1, 1) = 1;
  const auto s = surface_metrics(p, g, 2);
  EXPECT_FALSE(s.defined[1]);
  const auto rep = score_sample(p, g, 2);
  EXPECT_FALSE(rep.surface_defined());
  EXPECT_EQ(rep.mean_dice, 0.0);
}

TEST(Metrics, BoundaryIncludesImageBorder) {
  Mask m(3, 3, 1);
  const auto b = class_boundary(m, 1);
  EXPECT_EQ(std::count(b.begin(), b.end(), 1), 8);
  EXPECT_EQ(b[4], 0);
}

TEST(Metrics, DistanceTransformMatchesBruteForce) {
  std::mt19937_64 rng(11);
  std::bernoulli_distribution site(0.08);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t h = 7 + trial % 5, w = 5 + trial % 9;
    std::vector<std::uint8_t> s(h * w);
    for (auto& v : s) v = site(rng);
    s[(trial * 7) % (h * w)] = 1;
    const auto d = distance_transform(s, h, w);
    for (std::size_t i = 0; i < h * w; ++i) {
      double best = INFINITY;
      for (std::size_t j = 0; j < h * w; ++j)
        if (s[j])
          best = std::min(best, std::hypot(double(i / w) - double(j / w), double(i % w) - double(j % w)));
      EXPECT_NEAR(d[i], best, 1e-12);
    }
  }
}

TEST(Metrics, PercentileLinearInterpolates) {
  EXPECT_DOUBLE_EQ(percentile_linear({0, 10}, 0.95), 9.5);
  EXPECT_DOUBLE_EQ(percentile_linear({3}, 0.95), 3.0);
  EXPECT_DOUBLE_EQ(percentile_linear({4, 1, 2, 3, 0}, 0.5), 2.0);
  EXPECT_TRUE(std::isnan(percentile_linear({}, 0.95)));
}

TEST(Metrics, AverageIsSampleWeighted) {
  Mask a(2, 2), b(2, 2);
  a.at(0, 0) = 1;
  b.at(0, 0) = 1;
  Mask c(2, 2);
  c.at(1, 1) = 1;
  const std::vector<MetricReport> reps{score_sample(a, b, 2), score_sample(a, c, 2), score_sample(a, c, 2)};
  const auto avg = average_reports(reps);
  EXPECT_EQ(avg.samples, 3u);
  EXPECT_NEAR(avg.mean_dice, 100.0 / 3.0, 1e-12);
  EXPECT_NEAR(avg.mean_assd, (0.0 + 2 * std::sqrt(2.0)) / 3.0, 1e-12);
}

TEST(Metrics, ExtentMismatchThrows) { EXPECT_THROW(region_metrics(Mask(2, 2), Mask(2, 3), 2), Error); }

}  // namespace
}  // namespace fedsis
