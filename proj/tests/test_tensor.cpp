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

#include <bit>
#include <cstring>
#include <sstream>

#include "fedsis/ops.hpp"
#include "fedsis/params.hpp"
#include "fedsis/serialize.hpp"
#include "support.hpp"

namespace fedsis {
namespace {

template <class F>
std::string error_kind(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  return "";
}

TEST(Tensor, FromChecksLengthAndExtents) {
  EXPECT_EQ(error_kind([] { Tensor::from({2, 3}, std::vector<float>(5)); }), "shape");
  EXPECT_EQ(error_kind([] { Tensor::from({2, 0}, {}); }), "shape");
  const auto t = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_EQ(t.rank(), 2u);
  EXPECT_EQ(t[4], 5.f);
}

TEST(Tensor, GradBufferOnlyWhenRequested) {
  EXPECT_TRUE(Tensor::zeros({3}).grad().empty());
  const auto g = Tensor::zeros({3}, true);
  EXPECT_EQ(g.grad().size(), 3u);
}

TEST(Tensor, ItemNeedsOneElement) {
  EXPECT_EQ(Tensor::scalar(2.5f).item(), 2.5f);
  EXPECT_EQ(error_kind([] { (void)Tensor::zeros({2}).item(); }), "shape");
}

TEST(Backward, RejectsNonScalarRoot) {
  const auto x = Tensor::zeros({2}, true);
  EXPECT_EQ(error_kind([&] { backward(scale(x, 2.f)); }), "non-scalar-root");
}

TEST(Backward, SharedSubexpressionAccumulates) {
  // f = sum(x*x + x*x) uses x four times; df/dx = 4x.
  const auto x = TensorD::from({3}, {1.0, -2.0, 0.5}, true);
  const auto sq = mul(x, x);
  backward(sum(add(sq, sq)));
  EXPECT_DOUBLE_EQ(x.grad()[0], 4.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], -8.0);
  EXPECT_DOUBLE_EQ(x.grad()[2], 2.0);
}

TEST(Backward, GradientsAccumulateAcrossCalls) {
  const auto x = TensorD::from({2}, {1.0, 2.0}, true);
  backward(sum(x));
  backward(sum(scale(x, 3.0)));
  EXPECT_DOUBLE_EQ(x.grad()[0], 4.0);
  x.node()->grad.assign(2, 0.0);
  backward(sum(x));
  EXPECT_DOUBLE_EQ(x.grad()[1], 1.0);
}

TEST(Backward, FilteredPassTouchesOnlyRequestedLeaves) {
  const auto a = TensorD::from({2}, {1.0, 2.0}, true);
  const auto b = TensorD::from({2}, {3.0, 4.0}, true);
  const auto loss = sum(mul(a, b));
  backward(loss, std::vector<TensorD>{a});
  EXPECT_DOUBLE_EQ(a.grad()[0], 3.0);
  EXPECT_DOUBLE_EQ(a.grad()[1], 4.0);
  EXPECT_DOUBLE_EQ(b.grad()[0], 0.0);
  EXPECT_DOUBLE_EQ(b.grad()[1], 0.0);
  // The same graph can be walked again for the other leaf.
  backward(loss, std::vector<TensorD>{b});
  EXPECT_DOUBLE_EQ(b.grad()[0], 1.0);
  EXPECT_DOUBLE_EQ(a.grad()[0], 3.0);
}

TEST(Backward, NoGradGuardDropsGraph) {
  const auto x = Tensor::zeros({2}, true);
  Tensor y;
  {
    NoGradGuard g;
    EXPECT_FALSE(grad_mode_enabled());
    y = sum(mul(x, x));
  }
  EXPECT_TRUE(grad_mode_enabled());
  EXPECT_FALSE(y.requires_grad());
  EXPECT_TRUE(y.node()->inputs.empty());
}

TEST(Backward, DetachStopsGradient) {
  const auto x = TensorD::from({1}, {2.0}, true);
  backward(sum(mul(x, x.detach())));
  EXPECT_DOUBLE_EQ(x.grad()[0], 2.0);
}

TEST(Backward, ConstantsReceiveNoGradient) {
  const auto c = TensorD::from({2}, {1.0, 1.0});
  const auto x = TensorD::from({2}, {2.0, 3.0}, true);
  backward(sum(mul(c, x)));
  EXPECT_TRUE(c.grad().empty());
  EXPECT_DOUBLE_EQ(x.grad()[1], 1.0);
}

// ---------------------------------------------------------------------------

ParameterStore<float> small_store() {
  ParameterStore<float> s;
  s.add("a.weight", ParamTag::Global, Tensor::from({2, 2}, {1, 2, 3, 4}, true));
  s.add("a.head", ParamTag::Personalized, Tensor::from({3}, {5, 6, 7}, true));
  s.add("b.bias", ParamTag::Global, Tensor::from({1}, {8}, true));
  return s;
}

TEST(ParameterStore, DuplicateNamesRejected) {
  auto s = small_store();
  EXPECT_EQ(error_kind([&] { s.add("a.head", ParamTag::Global, Tensor::zeros({1}, true)); }), "layout");
}

TEST(ParameterStore, TagsPartitionTheStore) {
  const auto s = small_store();
  EXPECT_EQ(s.scalar_count(), 8u);
  EXPECT_EQ(s.scalar_count(ParamTag::Global), 5u);
  EXPECT_EQ(s.scalar_count(ParamTag::Personalized), 3u);
  EXPECT_TRUE(s.find("a.head", ParamTag::Personalized).has_value());
  EXPECT_FALSE(s.find("a.head", ParamTag::Global).has_value());
  EXPECT_FALSE(s.find("missing", ParamTag::Global).has_value());
  const auto g = s.snapshot(ParamTag::Global);
  ASSERT_EQ(g.size(), 2u);
  EXPECT_EQ(g[0].name, "a.weight");
  EXPECT_EQ(g[1].name, "b.bias");
}

TEST(ParameterStore, SnapshotLoadRoundTrip) {
  auto s = small_store();
  auto p = s.snapshot(ParamTag::Personalized);
  p[0].values = {-1, -2, -3};
  s.load(p, ParamTag::Personalized);
  EXPECT_EQ(s.get("a.head")[2], -3.f);
  EXPECT_EQ(s.get("a.weight")[0], 1.f);
}

TEST(ParameterStore, LoadRejectsMismatchedLayout) {
  auto s = small_store();
  auto g = s.snapshot(ParamTag::Global);
  g[1].name = "c.bias";
  EXPECT_EQ(error_kind([&] { s.load(g, ParamTag::Global); }), "layout");
  auto short_g = s.snapshot(ParamTag::Global);
  short_g.entries().pop_back();
  EXPECT_EQ(error_kind([&] { s.load(short_g, ParamTag::Global); }), "layout");
  auto bad_shape = s.snapshot(ParamTag::Global);
  bad_shape[0].shape = {4};
  EXPECT_EQ(error_kind([&] { s.load(bad_shape, ParamTag::Global); }), "layout");
}

TEST(ParameterStore, FlattenUnflatten) {
  auto s = small_store();
  auto flat = s.flatten();
  EXPECT_EQ(flat, (std::vector<float>{1, 2, 3, 4, 5, 6, 7, 8}));
  for (auto& v : flat) v *= 2;
  s.unflatten(std::span<const float>(flat));
  EXPECT_EQ(s.get("b.bias")[0], 16.f);
  auto pv = s.snapshot();
  pv.unflatten(std::vector<float>(8, 1.f));
  EXPECT_EQ(pv.flatten(), std::vector<float>(8, 1.f));
  EXPECT_EQ(error_kind([&] { pv.unflatten(std::vector<float>(7, 1.f)); }), "layout");
}

// ---------------------------------------------------------------------------

TEST(Serialize, FrameLayoutIsExact) {
  ParamVector pv;
  pv.push_back({"w", ParamTag::Personalized, {2}, {1.5f, -2.f}});
  std::ostringstream os;
  write_frame(os, pv);
  const std::string bytes = os.str();
  ASSERT_EQ(bytes.size(), 7u + 2 + 1 + 1 + 1 + 4 + 8);
  EXPECT_EQ(bytes.substr(0, 7), "PFSIS1\n");
  EXPECT_EQ(static_cast<unsigned char>(bytes[7]), 1u);  // name length, LE
  EXPECT_EQ(static_cast<unsigned char>(bytes[8]), 0u);
  EXPECT_EQ(bytes[9], 'w');
  EXPECT_EQ(static_cast<unsigned char>(bytes[10]), 1u);  // tag P
  EXPECT_EQ(static_cast<unsigned char>(bytes[11]), 1u);  // rank
  EXPECT_EQ(static_cast<unsigned char>(bytes[12]), 2u);  // extent
  float v;
  std::memcpy(&v, bytes.data() + 16, 4);
  EXPECT_EQ(v, 1.5f);
}

TEST(Serialize, RoundTripIsBitExact) {
  std::mt19937_64 rng(3);
  auto pv = testing::random_params(rng, {{"x", {3, 4}}, {"y.bias", {5}}, {"z", {2, 1, 3, 3}}});
  pv[1].tag = ParamTag::Personalized;
  pv[0].values[0] = -0.0f;
  pv[0].values[1] = std::numeric_limits<float>::denorm_min();
  std::stringstream ss;
  write_frame(ss, pv);
  const auto back = read_frame(ss);
  ASSERT_EQ(back.size(), pv.size());
  for (std::size_t i = 0; i < pv.size(); ++i) {
    EXPECT_EQ(back[i].name, pv[i].name);
    EXPECT_EQ(back[i].tag, pv[i].tag);
    EXPECT_EQ(back[i].shape, pv[i].shape);
    for (std::size_t j = 0; j < pv[i].values.size(); ++j)
      EXPECT_EQ(std::bit_cast<std::uint32_t>(back[i].values[j]), std::bit_cast<std::uint32_t>(pv[i].values[j]));
  }
}

TEST(Serialize, FileRoundTrip) {
  const auto dir = testing::temp_dir("serialize");
  std::mt19937_64 rng(4);
  const auto pv = testing::random_params(rng, {{"a", {7}}, {"b", {2, 2}}});
  save_frame(dir / "x.pfsis", pv);
  EXPECT_EQ(load_frame(dir / "x.pfsis"), pv);
  EXPECT_EQ(error_kind([&] { load_frame(dir / "missing.pfsis"); }), "io");
}

TEST(Serialize, RejectsBadHeaderAndTruncation) {
  std::stringstream bad("PFSIS2\n");
  EXPECT_EQ(error_kind([&] { read_frame(bad); }), "format");
  ParamVector pv;
  pv.push_back({"abc", ParamTag::Global, {4}, {1, 2, 3, 4}});
  std::ostringstream os;
  write_frame(os, pv);
  std::stringstream cut(os.str().substr(0, os.str().size() - 3));
  EXPECT_EQ(error_kind([&] { read_frame(cut); }), "format");
}

}  // namespace
}  // namespace fedsis
