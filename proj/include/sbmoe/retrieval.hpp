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
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "sbmoe/embedding.hpp"
#include "sbmoe/moe_block.hpp"

namespace sbmoe {

class FingerprintError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// How embeddings are refined before scoring: a block plus pooling mode,
/// or the identity (no block) when `block` is null. `seed` only matters for
/// random-gate modes.
struct Refiner {
  const MoEBlock* block = nullptr;
  Pooling mode = Pooling::kTop1;
  std::uint64_t seed = 0;

  static Refiner identity() { return {}; }
  bool is_identity() const { return block == nullptr; }
  std::uint64_t fingerprint() const;
};

struct RefinedIndex {
  EmbeddingMatrix docs;
  Routing routing;
  /// Pooling used for the documents; nullopt for the identity index.
  std::optional<Pooling> mode;
  std::size_t num_experts = 0;
  std::uint64_t fingerprint = 0;

  std::size_t size() const { return docs.size(); }

  friend bool operator==(const RefinedIndex&, const RefinedIndex&) = default;
};

struct RefinedQuery {
  std::string id;
  Vector<float> values;
  std::uint64_t fingerprint = 0;
};

struct ScoredDoc {
  std::string doc_id;
  double score = 0.0;

  friend bool operator==(const ScoredDoc&, const ScoredDoc&) = default;
};

/// Documents ordered by descending score, ties by ascending doc id.
struct RankedList {
  std::string query_id;
  std::vector<ScoredDoc> entries;

  friend bool operator==(const RankedList&, const RankedList&) = default;
};

using RunFile = std::vector<RankedList>;

/// Rounds a 64-bit score to a 32-bit float and then to 6 significant
/// digits. Ranking uses the rounded value so that the run file text fully
/// determines the order.
double round_score(double score);

/// Refines every document; threads > 1 shards rows with order-preserving
/// assembly (the result is identical for any thread count).
RefinedIndex build_index(const EmbeddingMatrix& corpus, const Refiner& refiner,
                         unsigned threads = 1);

/// Refined query matrix plus routing, using the query-side random stream.
RefineResult refine_query_matrix(const EmbeddingMatrix& queries, const Refiner& refiner);

/// Refines query rows with the same refiner used for an index.
std::vector<RefinedQuery> refine_queries(const EmbeddingMatrix& queries, const Refiner& refiner);

RankedList search_topk(const RefinedQuery& query, const RefinedIndex& index, std::size_t k);

/// Refines and searches every query, in input order.
RunFile run_queries(const EmbeddingMatrix& queries, const Refiner& refiner,
                    const RefinedIndex& index, std::size_t k);

}  // namespace sbmoe
