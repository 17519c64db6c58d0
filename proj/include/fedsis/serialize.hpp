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

// Binary tensor framing shared by checkpoints, dataset caches and round
// traces:
//
//   "PFSIS1\n"
//   repeated until EOF:
//     u16 LE name length, name bytes, u8 tag (0=G, 1=P), u8 rank,
//     rank x u32 LE extents, numel x f32 LE values

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>

#include "fedsis/params.hpp"

namespace fedsis {

inline constexpr char kFrameMagic[] = "PFSIS1\n";
inline constexpr std::size_t kFrameMagicLen = 7;

namespace detail {

inline void put_u8(std::ostream& os, std::uint8_t v) { os.put(static_cast<char>(v)); }

inline void put_u16(std::ostream& os, std::uint16_t v) {
  put_u8(os, static_cast<std::uint8_t>(v & 0xff));
  put_u8(os, static_cast<std::uint8_t>(v >> 8));
}

inline void put_u32(std::ostream& os, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) put_u8(os, static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

inline bool get_u8(std::istream& is, std::uint8_t& v) {
  char c;
  if (!is.get(c)) return false;
  v = static_cast<std::uint8_t>(c);
  return true;
}

inline std::uint8_t need_u8(std::istream& is) {
  std::uint8_t v;
  if (!get_u8(is, v)) throw Error("format", "truncated tensor frame");
  return v;
}

inline std::uint32_t need_u32(std::istream& is) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(need_u8(is)) << (8 * i);
  return v;
}

}  // namespace detail

inline void write_record(std::ostream& os, const NamedTensor& t) {
  if (t.name.size() > 0xffff) throw Error("format", "name too long: " + t.name);
  if (t.shape.size() > 0xff) throw Error("format", "rank too large for " + t.name);
  if (shape_numel(t.shape) != t.values.size()) throw Error("format", "shape/data mismatch for " + t.name);
  detail::put_u16(os, static_cast<std::uint16_t>(t.name.size()));
  os.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
  detail::put_u8(os, static_cast<std::uint8_t>(t.tag));
  detail::put_u8(os, static_cast<std::uint8_t>(t.shape.size()));
  for (std::size_t e : t.shape) detail::put_u32(os, static_cast<std::uint32_t>(e));
  for (float v : t.values) detail::put_u32(os, std::bit_cast<std::uint32_t>(v));
}

inline void write_frame(std::ostream& os, const ParamVector& tensors) {
  os.write(kFrameMagic, kFrameMagicLen);
  for (const auto& t : tensors) write_record(os, t);
}

inline ParamVector read_frame(std::istream& is) {
  char magic[kFrameMagicLen];
  if (!is.read(magic, kFrameMagicLen) || std::memcmp(magic, kFrameMagic, kFrameMagicLen) != 0) {
    throw Error("format", "missing PFSIS1 header");
  }
  ParamVector out;
  while (true) {
    std::uint8_t lo;
    if (!detail::get_u8(is, lo)) break;  // clean EOF between records
    const std::uint16_t len = static_cast<std::uint16_t>(lo | (detail::need_u8(is) << 8));
    NamedTensor t;
    t.name.resize(len);
    if (len && !is.read(t.name.data(), len)) throw Error("format", "truncated name");
    const std::uint8_t tag = detail::need_u8(is);
    if (tag > 1) throw Error("format", "bad tag byte for " + t.name);
    t.tag = static_cast<ParamTag>(tag);
    const std::uint8_t rank = detail::need_u8(is);
    t.shape.resize(rank);
    for (auto& e : t.shape) e = detail::need_u32(is);
    t.values.resize(shape_numel(t.shape));
    for (auto& v : t.values) v = std::bit_cast<float>(detail::need_u32(is));
    out.push_back(std::move(t));
  }
  return out;
}

inline void save_frame(const std::filesystem::path& path, const ParamVector& tensors) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("io", "cannot write " + path.string());
  write_frame(os, tensors);
  if (!os) throw Error("io", "write failed for " + path.string());
}

inline ParamVector load_frame(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("io", "cannot read " + path.string());
  return read_frame(is);
}

}  // namespace fedsis
