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

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fedsis/ops.hpp"

namespace fedsis {

/// Per-pixel class ids on an H x W grid.
struct Mask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> labels;

  Mask() = default;
  Mask(std::size_t h, std::size_t w, std::uint8_t fill = 0) : height(h), width(w), labels(h * w, fill) {}
  Mask(std::size_t h, std::size_t w, std::vector<std::uint8_t> l) : height(h), width(w), labels(std::move(l)) {
    if (labels.size() != h * w) throw Error("shape", "mask label count does not match extents");
  }

  std::uint8_t at(std::size_t y, std::size_t x) const { return labels[y * width + x]; }
  std::uint8_t& at(std::size_t y, std::size_t x) { return labels[y * width + x]; }
  std::size_t size() const { return labels.size(); }

  bool operator==(const Mask&) const = default;

  /// One-hot K x H x W view.
  template <class T = float>
  BasicTensor<T> one_hot(std::size_t num_classes) const {
    std::vector<T> y(num_classes * labels.size(), T(0));
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] >= num_classes) {
        throw Error("label-range", "class id " + std::to_string(labels[i]) + " with K=" + std::to_string(num_classes));
      }
      y[labels[i] * labels.size() + i] = T(1);
    }
    return BasicTensor<T>::from(Shape{num_classes, height, width}, std::move(y));
  }
};

namespace detail {

template <class T>
void check_logits_vs_mask(const BasicTensor<T>& logits, const Mask& mask) {
  if (logits.rank() != 3 || logits.extent(1) != mask.height || logits.extent(2) != mask.width) {
    throw Error("shape", "logits " + shape_str(logits.shape()) + " vs mask " + std::to_string(mask.height) + "x" +
                             std::to_string(mask.width));
  }
}

}  // namespace detail

/// Mean over pixels of -log softmax(logits)[true class].
template <class T>
BasicTensor<T> seg_loss(const BasicTensor<T>& logits, const Mask& mask) {
  detail::check_logits_vs_mask(logits, mask);
  const auto y = mask.one_hot<T>(logits.extent(0));
  const T inv_pixels = T(1) / static_cast<T>(mask.size());
  return scale(sum(mul(log_softmax(logits, 0), y)), -inv_pixels);
}

/// Squared L2 distance between the reconstruction and the input image.
template <class T>
BasicTensor<T> ar_loss(const BasicTensor<T>& recon, const BasicTensor<T>& image) {
  return sq_l2_norm(sub(recon, image));
}

/// Squared L2 distance between softmax class probabilities and the one-hot
/// target, summed over classes and averaged over pixels.
template <class T>
BasicTensor<T> csc_loss(const BasicTensor<T>& logits, const Mask& mask) {
  detail::check_logits_vs_mask(logits, mask);
  const auto y = mask.one_hot<T>(logits.extent(0));
  const T inv_pixels = T(1) / static_cast<T>(mask.size());
  return scale(sq_l2_norm(sub(softmax(logits, 0), y)), inv_pixels);
}

/// Arg-max over the class axis; ties resolve to the lowest class id.
template <class T>
Mask argmax_mask(const BasicTensor<T>& logits) {
  if (logits.rank() != 3) throw Error("shape", "argmax_mask needs K x H x W");
  const std::size_t k = logits.extent(0), h = logits.extent(1), w = logits.extent(2);
  Mask out(h, w);
  const auto v = logits.data();
  for (std::size_t i = 0; i < h * w; ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < k; ++c)
      if (v[c * h * w + i] > v[best * h * w + i]) best = c;
    out.labels[i] = static_cast<std::uint8_t>(best);
  }
  return out;
}

}  // namespace fedsis
