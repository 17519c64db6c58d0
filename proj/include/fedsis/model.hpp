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

// Toy segmentation network with a global/personalized parameter split.
//
// Layout:
//   patch embedding (linear over p x p patches)           global
//   N transformer blocks, each run on two token streams:
//     layer norm, MLP                                     global, shared
//     attention heads 1..h/2 and their output projection  personalized
//     attention heads h/2+1..h and their projection       global
//   decoder per stream: conv3x3 -> up x2 -> conv3x3 -> up  (P half / G half)
//   segmentation head 1x1 over concat(f_P, f_G)           global
//   appearance head 1x1 + sigmoid over f_P                personalized
//
// The personalized stream never reads global head outputs and vice versa, so
// reconstruction from f_P is blind to the global attention heads.

#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "fedsis/ops.hpp"
#include "fedsis/params.hpp"

namespace fedsis {

struct ModelConfig {
  std::size_t in_channels = 3;
  std::size_t img_size = 32;
  std::size_t patch_size = 4;
  std::size_t embed_dim = 32;
  std::size_t heads = 4;
  std::size_t encoder_blocks = 2;
  std::size_t mlp_hidden = 32;
  std::size_t decoder_channels = 16;
  std::size_t num_classes = 4;

  std::size_t grid() const { return img_size / patch_size; }
  std::size_t tokens() const { return grid() * grid(); }
  std::size_t head_dim() const { return embed_dim / heads; }

  void validate() const {
    auto fail = [](const std::string& m) { throw Error("config", m); };
    if (heads == 0 || heads % 2 != 0) fail("heads must be even and positive");
    if (embed_dim % heads != 0) fail("embed_dim must be divisible by heads");
    if (decoder_channels == 0 || decoder_channels % 2 != 0) fail("decoder_channels must be even");
    if (patch_size == 0 || img_size % patch_size != 0) fail("img_size must be a multiple of patch_size");
    if (img_size % (2 * grid()) != 0) fail("img_size must be a multiple of 2 * (img_size / patch_size)");
    if (num_classes < 2) fail("num_classes must be at least 2");
    if (in_channels == 0 || encoder_blocks == 0 || mlp_hidden == 0) fail("zero-sized model dimension");
  }
};

template <class T>
struct ForwardOutput {
  BasicTensor<T> logits;  // K x H x W
  BasicTensor<T> f_p;     // C/2 x H x W
  BasicTensor<T> f_g;     // C/2 x H x W
  BasicTensor<T> recon;   // in_channels x H x W
};

/// Q/K/V projections for one half of the heads, each L x (L/2) with the
/// half's heads laid out as consecutive column blocks of width d_head.
template <class T>
struct HeadProjections {
  BasicTensor<T> q, k, v;
};

/// Runs `n_heads` heads of scaled dot-product attention on z[T x L] and
/// concatenates their outputs into T x (n_heads * d_head). When `attn` is
/// non-null the per-head attention matrices are appended to it.
template <class T>
BasicTensor<T> attention_heads(const BasicTensor<T>& z, const HeadProjections<T>& proj, std::size_t n_heads,
                               std::vector<BasicTensor<T>>* attn = nullptr) {
  const std::size_t width = proj.q.extent(1);
  if (n_heads == 0 || width % n_heads != 0) throw Error("config", "projection width not divisible by heads");
  const std::size_t d = width / n_heads;
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(d));
  const auto q = matmul(z, proj.q);
  const auto k = matmul(z, proj.k);
  const auto v = matmul(z, proj.v);
  std::vector<BasicTensor<T>> outs;
  for (std::size_t i = 0; i < n_heads; ++i) {
    const auto qi = slice(q, 1, i * d, (i + 1) * d);
    const auto ki = slice(k, 1, i * d, (i + 1) * d);
    const auto vi = slice(v, 1, i * d, (i + 1) * d);
    const auto a = softmax(scale(matmul(qi, transpose(ki)), inv_sqrt), 1);
    if (attn) attn->push_back(a);
    outs.push_back(matmul(a, vi));
  }
  return outs.size() == 1 ? outs[0] : concat(outs, 1);
}

/// Head-split multi-head self-attention. Heads 1..h/2 read `z_p_in` through
/// the personalized projections, heads h/2+1..h read `z_g_in` through the
/// global ones; returns (z_P, z_G), each T x L/2.
template <class T>
std::pair<BasicTensor<T>, BasicTensor<T>> gpd_msa(const BasicTensor<T>& z_p_in, const BasicTensor<T>& z_g_in,
                                                  const HeadProjections<T>& personal,
                                                  const HeadProjections<T>& global, std::size_t heads,
                                                  std::vector<BasicTensor<T>>* attn = nullptr) {
  if (heads == 0 || heads % 2 != 0) throw Error("config", "gpd_msa needs an even number of heads");
  auto zp = attention_heads(z_p_in, personal, heads / 2, attn);
  auto zg = attention_heads(z_g_in, global, heads / 2, attn);
  return {std::move(zp), std::move(zg)};
}

/// Single-input form: both halves attend over the same tokens.
template <class T>
std::pair<BasicTensor<T>, BasicTensor<T>> gpd_msa(const BasicTensor<T>& z, const HeadProjections<T>& personal,
                                                  const HeadProjections<T>& global, std::size_t heads,
                                                  std::vector<BasicTensor<T>>* attn = nullptr) {
  return gpd_msa(z, z, personal, global, heads, attn);
}

template <class T>
class BasicModel {
 public:
  struct Encoded {
    BasicTensor<T> stream_p, stream_g;       // final token streams, T x L
    std::vector<BasicTensor<T>> msa_p, msa_g;  // per-block gpd_msa outputs
    std::vector<BasicTensor<T>> attention;     // per block: h matrices
  };

  /// Builds and initializes parameters: uniform(-a, a) with a = 1/sqrt(fan_in);
  /// layer-norm gains 1 and shifts 0. With `gpd` false every tag is Global.
  BasicModel(ModelConfig cfg, bool gpd, std::uint64_t seed) : cfg_(cfg), gpd_(gpd) {
    cfg_.validate();
    std::mt19937_64 rng(seed);
    const ParamTag P = gpd ? ParamTag::Personalized : ParamTag::Global;
    const ParamTag G = ParamTag::Global;
    const std::size_t L = cfg_.embed_dim, half = L / 2, p = cfg_.patch_size;
    const std::size_t patch_features = cfg_.in_channels * p * p;
    const std::size_t c_half = cfg_.decoder_channels / 2;

    add_uniform(rng, "patch_embed.weight", G, {patch_features, L}, patch_features);
    add_uniform(rng, "patch_embed.bias", G, {L}, patch_features);
    for (std::size_t b = 0; b < cfg_.encoder_blocks; ++b) {
      const std::string pre = "block" + std::to_string(b) + ".";
      params_.add(pre + "ln1.gain", G, BasicTensor<T>::full({L}, T(1), true));
      params_.add(pre + "ln1.shift", G, BasicTensor<T>::zeros({L}, true));
      for (const char* m : {"q", "k", "v"}) add_uniform(rng, pre + "attn." + m + "_p", P, {L, half}, L);
      for (const char* m : {"q", "k", "v"}) add_uniform(rng, pre + "attn." + m + "_g", G, {L, half}, L);
      add_uniform(rng, pre + "attn.out_p", P, {half, L}, half);
      add_uniform(rng, pre + "attn.out_g", G, {half, L}, half);
      params_.add(pre + "ln2.gain", G, BasicTensor<T>::full({L}, T(1), true));
      params_.add(pre + "ln2.shift", G, BasicTensor<T>::zeros({L}, true));
      add_uniform(rng, pre + "mlp.fc1.weight", G, {L, cfg_.mlp_hidden}, L);
      add_uniform(rng, pre + "mlp.fc1.bias", G, {cfg_.mlp_hidden}, L);
      add_uniform(rng, pre + "mlp.fc2.weight", G, {cfg_.mlp_hidden, L}, cfg_.mlp_hidden);
      add_uniform(rng, pre + "mlp.fc2.bias", G, {L}, cfg_.mlp_hidden);
    }
    for (const auto& [suffix, tag] : {std::pair{"p", P}, std::pair{"g", G}}) {
      const std::string pre = std::string("decoder.");
      add_uniform(rng, pre + "conv1_" + suffix + ".weight", tag, {c_half, L, 3, 3}, L * 9);
      add_uniform(rng, pre + "conv1_" + suffix + ".bias", tag, {c_half}, L * 9);
      add_uniform(rng, pre + "conv2_" + suffix + ".weight", tag, {c_half, c_half, 3, 3}, c_half * 9);
      add_uniform(rng, pre + "conv2_" + suffix + ".bias", tag, {c_half}, c_half * 9);
    }
    add_uniform(rng, "seg_head.weight", G, {cfg_.num_classes, cfg_.decoder_channels, 1, 1}, cfg_.decoder_channels);
    add_uniform(rng, "seg_head.bias", G, {cfg_.num_classes}, cfg_.decoder_channels);
    add_uniform(rng, "ar_head.weight", P, {cfg_.in_channels, c_half, 1, 1}, c_half);
    add_uniform(rng, "ar_head.bias", P, {cfg_.in_channels}, c_half);
  }

  const ModelConfig& config() const { return cfg_; }
  bool gpd() const { return gpd_; }
  ParameterStore<T>& params() { return params_; }
  const ParameterStore<T>& params() const { return params_; }

  Encoded encode(const BasicTensor<T>& image) const {
    check_image(image);
    const auto& P = params_;
    const auto tokens = patchify(image, cfg_.patch_size);
    const auto x = linear(tokens, P.get("patch_embed.weight"), P.get("patch_embed.bias"));
    Encoded enc{x, x, {}, {}, {}};
    for (std::size_t b = 0; b < cfg_.encoder_blocks; ++b) {
      const std::string pre = "block" + std::to_string(b) + ".";
      const auto& g1 = P.get(pre + "ln1.gain");
      const auto& s1 = P.get(pre + "ln1.shift");
      const HeadProjections<T> personal{P.get(pre + "attn.q_p"), P.get(pre + "attn.k_p"), P.get(pre + "attn.v_p")};
      const HeadProjections<T> global{P.get(pre + "attn.q_g"), P.get(pre + "attn.k_g"), P.get(pre + "attn.v_g")};
      auto [zp, zg] = gpd_msa(layer_norm(enc.stream_p, g1, s1), layer_norm(enc.stream_g, g1, s1), personal, global,
                              cfg_.heads, &enc.attention);
      enc.stream_p = add(enc.stream_p, matmul(zp, P.get(pre + "attn.out_p")));
      enc.stream_g = add(enc.stream_g, matmul(zg, P.get(pre + "attn.out_g")));
      enc.msa_p.push_back(std::move(zp));
      enc.msa_g.push_back(std::move(zg));
      enc.stream_p = add(enc.stream_p, mlp(enc.stream_p, pre));
      enc.stream_g = add(enc.stream_g, mlp(enc.stream_g, pre));
    }
    return enc;
  }

  ForwardOutput<T> forward(const BasicTensor<T>& image) const {
    const auto enc = encode(image);
    ForwardOutput<T> out;
    out.f_p = decode(enc.stream_p, "p");
    out.f_g = decode(enc.stream_g, "g");
    out.logits = add_channel_bias(conv2d(concat<T>({out.f_p, out.f_g}, 0), params_.get("seg_head.weight")),
                                  params_.get("seg_head.bias"));
    out.recon = sigmoid(add_channel_bias(conv2d(out.f_p, params_.get("ar_head.weight")), params_.get("ar_head.bias")));
    return out;
  }

  /// (theta_G, theta_P) as named float snapshots.
  std::pair<ParamVector, ParamVector> partition() const {
    return {params_.snapshot(ParamTag::Global), params_.snapshot(ParamTag::Personalized)};
  }

 private:
  void add_uniform(std::mt19937_64& rng, const std::string& name, ParamTag tag, Shape shape, std::size_t fan_in) {
    const double a = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-a, a);
    std::vector<T> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<T>(dist(rng));
    params_.add(name, tag, BasicTensor<T>::from(std::move(shape), std::move(v), true));
  }

  void check_image(const BasicTensor<T>& image) const {
    const Shape want{cfg_.in_channels, cfg_.img_size, cfg_.img_size};
    if (image.shape() != want) {
      throw Error("shape", "image " + shape_str(image.shape()) + ", model expects " + shape_str(want));
    }
  }

  BasicTensor<T> mlp(const BasicTensor<T>& s, const std::string& pre) const {
    const auto& P = params_;
    const auto n = layer_norm(s, P.get(pre + "ln2.gain"), P.get(pre + "ln2.shift"));
    const auto h = relu(linear(n, P.get(pre + "mlp.fc1.weight"), P.get(pre + "mlp.fc1.bias")));
    return linear(h, P.get(pre + "mlp.fc2.weight"), P.get(pre + "mlp.fc2.bias"));
  }

  BasicTensor<T> decode(const BasicTensor<T>& stream, const std::string& suffix) const {
    const auto& P = params_;
    const std::size_t g = cfg_.grid();
    const auto map = reshape(transpose(stream), Shape{cfg_.embed_dim, g, g});
    const std::string pre = "decoder.";
    auto c1 = relu(add_channel_bias(conv2d(map, P.get(pre + "conv1_" + suffix + ".weight"), 1, 1),
                                    P.get(pre + "conv1_" + suffix + ".bias")));
    auto c2 = relu(add_channel_bias(conv2d(upsample_nearest(c1, 2), P.get(pre + "conv2_" + suffix + ".weight"), 1, 1),
                                    P.get(pre + "conv2_" + suffix + ".bias")));
    return upsample_nearest(c2, cfg_.img_size / (2 * g));
  }

  ModelConfig cfg_;
  bool gpd_;
  ParameterStore<T> params_;
};

using Model = BasicModel<float>;
using ModelD = BasicModel<double>;

}  // namespace fedsis
