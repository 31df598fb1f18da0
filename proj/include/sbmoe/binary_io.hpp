// Copyright 2026 The SB-MoE Retrieval Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace sbmoe::binary {

/// Appends little-endian encodings to a byte buffer.
class Writer {
 public:
  void bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }

  template <typename U>
  void uint(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      buf_.push_back(static_cast<unsigned char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF));
    }
  }

  void f32(float v) { uint(std::bit_cast<std::uint32_t>(v)); }

  void f32s(std::span<const float> vs) {
    for (float v : vs) f32(v);
  }

  std::vector<unsigned char>& buffer() { return buf_; }

 private:
  std::vector<unsigned char> buf_;
};

class TruncatedError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bounds-checked little-endian reader over a byte span.
class Reader {
 public:
  explicit Reader(std::span<const unsigned char> data) : data_(data) {}

  std::string bytes(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(data_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  template <typename U>
  U uint() {
    need(sizeof(U));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      v |= static_cast<std::uint64_t>(data_[pos_ + i]) << (8 * i);
    }
    pos_ += sizeof(U);
    return static_cast<U>(v);
  }

  float f32() { return std::bit_cast<float>(uint<std::uint32_t>()); }

  void f32s(std::span<float> out) {
    need(out.size() * 4);
    for (auto& v : out) v = f32();
  }

  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) throw TruncatedError("unexpected end of data");
  }

  std::span<const unsigned char> data_;
  std::size_t pos_ = 0;
};

std::vector<unsigned char> read_file(const std::string& path);
void write_file(const std::string& path, std::span<const unsigned char> bytes);

}  // namespace sbmoe::binary
