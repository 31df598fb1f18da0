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
#include <cstdint>
#include <string>

#include "sbmoe/embedding.hpp"
#include "sbmoe/evaluation.hpp"

namespace sbmoe {

/// Multi-domain retrieval surrogate.
///
/// Each domain k has a unit center c_k (centers mutually orthogonal) and a
/// distortion A_k = I + (transform_scale - 1)·U_kU_kᵀ, where U_k spans
/// `distortion_rank` random directions orthogonal to every center.
/// Documents are c_k + doc_spread·z with z standard normal projected off
/// the centers and scaled by 1/sqrt(d). A query is A_k applied to the mean
/// of its source documents plus noise·ε/sqrt(d). Since the U_k differ per
/// domain, no single linear map undoes every A_k, while one map per domain
/// (A_k^{-1/2} on both sides) does. Everything is finally multiplied by
/// embedding_scale.
struct SyntheticSpec {
  std::size_t num_domains = 3;
  std::size_t dim = 32;
  std::size_t docs_per_domain = 1000;
  std::size_t queries_per_domain = 100;
  std::size_t train_queries_per_domain = 1000;
  std::size_t positives_per_query = 1;
  std::size_t distortion_rank = 4;
  double transform_scale = 20.0;
  double doc_spread = 1.0;
  double noise = 0.3;
  /// Multiplies every generated vector; sets the dynamic range of raw
  /// dot products relative to the contrastive temperature.
  double embedding_scale = 4.0;
  std::uint64_t seed = 42;

  void validate() const;
};

struct SyntheticDataset {
  EmbeddingMatrix corpus;
  EmbeddingMatrix queries;
  Qrels qrels;
  EmbeddingMatrix train_queries;
  Qrels train_qrels;
  /// Domain of each corpus row.
  std::vector<std::uint32_t> doc_domain;
};

SyntheticDataset gen_synthetic(const SyntheticSpec& spec);

/// File names used inside a dataset directory.
struct DatasetPaths {
  std::string corpus;
  std::string queries;
  std::string qrels;
  std::string train_queries;
  std::string train_qrels;

  static DatasetPaths in(const std::string& dir);
};

void write_dataset(const std::string& dir, const SyntheticDataset& data);
SyntheticDataset read_dataset(const std::string& dir);

}  // namespace sbmoe
