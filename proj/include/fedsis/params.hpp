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
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "fedsis/error.hpp"
#include "fedsis/tensor.hpp"

namespace fedsis {

enum class ParamTag : std::uint8_t { Global = 0, Personalized = 1 };

inline const char* tag_name(ParamTag t) { return t == ParamTag::Global ? "G" : "P"; }

/// One named parameter snapshot: plain floats, safe to hand across threads.
struct NamedTensor {
  std::string name;
  ParamTag tag = ParamTag::Global;
  Shape shape;
  std::vector<float> values;

  bool operator==(const NamedTensor&) const = default;
};

/// Ordered named tensors. Entry order is the canonical layer order shared by
/// every site; aggregation mixes same-position entries.
class ParamVector {
 public:
  ParamVector() = default;
  explicit ParamVector(std::vector<NamedTensor> entries) : entries_(std::move(entries)) {}

  std::vector<NamedTensor>& entries() { return entries_; }
  const std::vector<NamedTensor>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  NamedTensor& operator[](std::size_t i) { return entries_[i]; }
  const NamedTensor& operator[](std::size_t i) const { return entries_[i]; }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  void push_back(NamedTensor t) { entries_.push_back(std::move(t)); }

  const NamedTensor* find(const std::string& name) const {
    for (const auto& e : entries_)
      if (e.name == name) return &e;
    return nullptr;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.values.size();
    return n;
  }

  std::vector<float> flatten() const {
    std::vector<float> out;
    out.reserve(scalar_count());
    for (const auto& e : entries_) out.insert(out.end(), e.values.begin(), e.values.end());
    return out;
  }

  /// Inverse of flatten() for a vector with this layout.
  void unflatten(std::span<const float> flat) {
    if (flat.size() != scalar_count()) {
      throw Error("layout", "flat length " + std::to_string(flat.size()) + " vs " +
                                std::to_string(scalar_count()));
    }
    std::size_t off = 0;
    for (auto& e : entries_) {
      std::copy(flat.begin() + static_cast<std::ptrdiff_t>(off),
                flat.begin() + static_cast<std::ptrdiff_t>(off + e.values.size()), e.values.begin());
      off += e.values.size();
    }
  }

  /// Same names, order and shapes (values ignored).
  bool same_layout(const ParamVector& other) const {
    if (entries_.size() != other.entries_.size()) return false;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      if (entries_[i].name != other.entries_[i].name || entries_[i].shape != other.entries_[i].shape)
        return false;
    }
    return true;
  }

  bool operator==(const ParamVector&) const = default;

 private:
  std::vector<NamedTensor> entries_;
};

inline void require_same_layout(const ParamVector& a, const ParamVector& b, const std::string& what) {
  if (!a.same_layout(b)) throw Error("layout", what);
}

/// Live, trainable parameters of a model, each with exactly one tag.
template <class T>
class ParameterStore {
 public:
  struct Entry {
    std::string name;
    ParamTag tag;
    BasicTensor<T> tensor;
  };

  BasicTensor<T>& add(const std::string& name, ParamTag tag, BasicTensor<T> tensor) {
    if (index_.contains(name)) throw Error("layout", "duplicate parameter " + name);
    index_.emplace(name, entries_.size());
    entries_.push_back({name, tag, std::move(tensor)});
    return entries_.back().tensor;
  }

  std::size_t size() const { return entries_.size(); }
  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }

  bool contains(const std::string& name) const { return index_.contains(name); }

  const BasicTensor<T>& get(const std::string& name) const { return entries_.at(position(name)).tensor; }
  BasicTensor<T>& get(const std::string& name) { return entries_.at(position(name)).tensor; }
  ParamTag tag(const std::string& name) const { return entries_.at(position(name)).tag; }

  /// Lookup restricted to one tag; nullopt when absent or tagged otherwise.
  std::optional<BasicTensor<T>> find(const std::string& name, ParamTag tag) const {
    auto it = index_.find(name);
    if (it == index_.end() || entries_[it->second].tag != tag) return std::nullopt;
    return entries_[it->second].tensor;
  }

  std::size_t position(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error("layout", "unknown parameter " + name);
    return it->second;
  }

  void set_tag(const std::string& name, ParamTag tag) { entries_.at(position(name)).tag = tag; }
  void set_all_tags(ParamTag tag) {
    for (auto& e : entries_) e.tag = tag;
  }

  std::vector<BasicTensor<T>> tensors(std::optional<ParamTag> tag = std::nullopt) const {
    std::vector<BasicTensor<T>> out;
    for (const auto& e : entries_)
      if (!tag || e.tag == *tag) out.push_back(e.tensor);
    return out;
  }

  std::size_t scalar_count(std::optional<ParamTag> tag = std::nullopt) const {
    std::size_t n = 0;
    for (const auto& e : entries_)
      if (!tag || e.tag == *tag) n += e.tensor.numel();
    return n;
  }

  void zero_grad() {
    for (auto& e : entries_) e.tensor.zero_grad();
  }

  /// Float snapshot of the selected subset (all entries when tag is empty).
  ParamVector snapshot(std::optional<ParamTag> tag = std::nullopt) const {
    ParamVector out;
    for (const auto& e : entries_) {
      if (tag && e.tag != *tag) continue;
      const auto d = e.tensor.data();
      out.push_back({e.name, e.tag, e.tensor.shape(), std::vector<float>(d.begin(), d.end())});
    }
    return out;
  }

  /// Overwrites the selected subset from a snapshot with exactly its layout.
  void load(const ParamVector& src, std::optional<ParamTag> tag = std::nullopt) {
    std::size_t k = 0;
    for (auto& e : entries_) {
      if (tag && e.tag != *tag) continue;
      if (k >= src.size()) throw Error("layout", "snapshot too short at " + e.name);
      const auto& s = src[k++];
      if (s.name != e.name || s.shape != e.tensor.shape()) {
        throw Error("layout", "expected " + e.name + shape_str(e.tensor.shape()) + ", got " + s.name +
                                  shape_str(s.shape));
      }
      auto d = e.tensor.mutable_data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<T>(s.values[i]);
    }
    if (k != src.size()) throw Error("layout", "snapshot has " + std::to_string(src.size() - k) + " extra entries");
  }

  std::vector<T> flatten(std::optional<ParamTag> tag = std::nullopt) const {
    std::vector<T> out;
    for (const auto& e : entries_) {
      if (tag && e.tag != *tag) continue;
      const auto d = e.tensor.data();
      out.insert(out.end(), d.begin(), d.end());
    }
    return out;
  }

  void unflatten(std::span<const T> flat, std::optional<ParamTag> tag = std::nullopt) {
    if (flat.size() != scalar_count(tag)) throw Error("layout", "flat vector length mismatch");
    std::size_t off = 0;
    for (auto& e : entries_) {
      if (tag && e.tag != *tag) continue;
      auto d = e.tensor.mutable_data();
      std::copy(flat.begin() + static_cast<std::ptrdiff_t>(off),
                flat.begin() + static_cast<std::ptrdiff_t>(off + d.size()), d.begin());
      off += d.size();
    }
  }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace fedsis
