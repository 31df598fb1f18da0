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

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace sbmoe {

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

template <typename T>
using Vector = std::vector<T>;

/// Dense row-major matrix. Storage type is a template parameter so the same
/// code runs in float (production) and double (gradient checking).
template <typename T>
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<T> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, T{0}) {}
  Matrix(std::size_t r, std::size_t c, std::vector<T> values)
      : rows(r), cols(c), data(std::move(values)) {
    if (data.size() != r * c) {
      throw DimensionError("matrix data length does not match rows*cols");
    }
  }

  T& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::span<T> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const T> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  bool empty() const { return rows == 0; }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = T{1};
    return m;
  }

  template <typename U>
  Matrix<U> cast() const {
    Matrix<U> out(rows, cols);
    for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;
};

template <typename T>
bool all_finite(std::span<const T> v) {
  for (T x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

template <typename A, typename B>
double dot(std::span<const A> a, std::span<const B> b) {
  if (a.size() != b.size()) throw DimensionError("dot: length mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  }
  return acc;
}

/// M·v with 64-bit accumulation.
template <typename T, typename U>
Vector<T> matvec(const Matrix<T>& m, std::span<const U> v) {
  if (m.cols != v.size()) {
    throw DimensionError("matvec: matrix has " + std::to_string(m.cols) +
                         " columns but vector has length " + std::to_string(v.size()));
  }
  Vector<T> out(m.rows);
  for (std::size_t r = 0; r < m.rows; ++r) {
    out[r] = static_cast<T>(dot(m.row(r), v));
  }
  return out;
}

template <typename T, typename U>
Vector<T> matvec(const Matrix<T>& m, const std::vector<U>& v) {
  return matvec(m, std::span<const U>(v));
}

/// Mᵀ·v with 64-bit accumulation; returns doubles since it only feeds
/// gradient computations.
template <typename T>
Vector<double> matvec_transposed(const Matrix<T>& m, std::span<const double> v) {
  if (m.rows != v.size()) throw DimensionError("matvec_transposed: length mismatch");
  Vector<double> out(m.cols, 0.0);
  for (std::size_t r = 0; r < m.rows; ++r) {
    const double vr = v[r];
    if (vr == 0.0) continue;
    auto row = m.row(r);
    for (std::size_t c = 0; c < m.cols; ++c) out[c] += static_cast<double>(row[c]) * vr;
  }
  return out;
}

/// Max-subtracted softmax; result sums to 1 up to rounding.
template <typename T>
Vector<double> softmax(std::span<const T> v) {
  if (v.empty()) throw std::invalid_argument("softmax: empty input");
  double mx = static_cast<double>(v[0]);
  for (T x : v) mx = std::max(mx, static_cast<double>(x));
  Vector<double> out(v.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp(static_cast<double>(v[i]) - mx);
    sum += out[i];
  }
  for (double& x : out) x /= sum;
  return out;
}

template <typename T>
Vector<double> softmax(const std::vector<T>& v) {
  return softmax(std::span<const T>(v));
}

/// Index of the maximum; ties resolve to the smallest index.
template <typename T>
std::size_t argmax_tiebreak(std::span<const T> v) {
  if (v.empty()) throw std::invalid_argument("argmax_tiebreak: empty input");
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

template <typename T>
std::size_t argmax_tiebreak(const std::vector<T>& v) {
  return argmax_tiebreak(std::span<const T>(v));
}

inline double softplus(double x) {
  // log1p(exp(x)) without overflow for large x
  return x > 30.0 ? x : std::log1p(std::exp(x));
}

/// SplitMix64 finalizer; used for seeding and stream derivation.
constexpr std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t s = seed ^ (0xD1B54A32D192ED03ULL * (stream + 1));
  return splitmix64(s);
}

/// Deterministic generator: xoshiro256** seeded through SplitMix64.
/// Uniform doubles use the top 53 bits; normals use Box-Muller with the
/// second variate cached. The algorithm is part of the reproducibility
/// contract: changing it changes every seeded artifact.
class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed) : seed_(seed) {
    std::uint64_t sm = seed;
    for (auto& s : state_) s = splitmix64(sm);
  }

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n) by rejection; n must be >= 1.
  std::uint64_t uniform_index(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("uniform_index: n must be >= 1");
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  double normal() {
    if (has_cached_) {
      has_cached_ = false;
      return cached_;
    }
    double u1;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    cached_ = r * std::sin(theta);
    has_cached_ = true;
    return r * std::cos(theta);
  }

  /// Independent generator for sub-stream `stream`; does not advance *this.
  SeededRng fork(std::uint64_t stream) const { return SeededRng(mix_seed(seed_, stream)); }

  template <typename It>
  void shuffle(It first, It last) {
    const auto n = static_cast<std::uint64_t>(last - first);
    for (std::uint64_t i = n; i > 1; --i) {
      const std::uint64_t j = uniform_index(i);
      std::swap(first[i - 1], first[j]);
    }
  }

 private:
  static constexpr std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  std::uint64_t seed_;
  std::uint64_t state_[4]{};
  double cached_ = 0.0;
  bool has_cached_ = false;
};

inline Vector<double> gaussian(SeededRng& rng, std::size_t count) {
  Vector<double> out(count);
  for (auto& x : out) x = rng.normal();
  return out;
}

/// FNV-1a 64-bit, used for checkpoint fingerprints.
inline std::uint64_t fnv1a64(std::span<const unsigned char> bytes,
                             std::uint64_t h = 0xCBF29CE484222325ULL) {
  for (unsigned char b : bytes) {
    h ^= b;
    h *= 0x100000001B3ULL;
  }
  return h;
}

}  // namespace sbmoe
