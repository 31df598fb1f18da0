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

#include <cstddef>
#include <string>
#include <vector>

#include "sbmoe/numerics.hpp"

namespace sbmoe {

/// Fixed-dimension vectors with row-aligned string identifiers.
struct EmbeddingMatrix {
  std::vector<std::string> ids;
  Matrix<float> values;

  EmbeddingMatrix() = default;
  EmbeddingMatrix(std::vector<std::string> row_ids, Matrix<float> rows)
      : ids(std::move(row_ids)), values(std::move(rows)) {
    if (ids.size() != values.rows) throw DimensionError("embedding ids/rows length mismatch");
  }

  std::size_t size() const { return values.rows; }
  std::size_t dim() const { return values.cols; }
  std::span<const float> row(std::size_t i) const { return values.row(i); }

  friend bool operator==(const EmbeddingMatrix&, const EmbeddingMatrix&) = default;
};

}  // namespace sbmoe
