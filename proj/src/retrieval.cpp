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

#include "sbmoe/retrieval.hpp"

#include <algorithm>
#include <charconv>
#include <numeric>
#include <system_error>

namespace sbmoe {

namespace {
// Random-gate streams, kept apart so a query and a document at the same
// row index never share draws.
constexpr std::uint64_t kDocStream = 0xD0C;
constexpr std::uint64_t kQueryStream = 0x9E7;
}  // namespace

std::uint64_t Refiner::fingerprint() const {
  if (block == nullptr) return identity_fingerprint();
  std::uint64_t fp = block_fingerprint(*block, mode);
  if (is_random(mode)) {
    unsigned char bytes[8];
    for (int i = 0; i < 8; ++i) bytes[i] = static_cast<unsigned char>(seed >> (8 * i));
    fp = fnv1a64(bytes, fp);
  }
  return fp;
}

double round_score(double score) {
  const auto f = static_cast<float>(score);
  char buf[48];
  auto res = std::to_chars(buf, buf + sizeof buf, static_cast<double>(f),
                           std::chars_format::general, 6);
  double out = 0.0;
  std::from_chars(buf, res.ptr, out);
  return out;
}

RefinedIndex build_index(const EmbeddingMatrix& corpus, const Refiner& refiner, unsigned threads) {
  RefinedIndex index;
  index.fingerprint = refiner.fingerprint();
  if (refiner.is_identity()) {
    index.docs = corpus;
    index.routing.selected.assign(corpus.size(), 0);
    return index;
  }
  auto res = refine_batch(corpus, *refiner.block, refiner.mode, mix_seed(refiner.seed, kDocStream),
                          threads);
  index.docs = std::move(res.refined);
  index.routing = std::move(res.routing);
  index.mode = refiner.mode;
  index.num_experts = refiner.block->num_experts();
  return index;
}

RefineResult refine_query_matrix(const EmbeddingMatrix& queries, const Refiner& refiner) {
  if (refiner.is_identity()) {
    RefineResult res;
    res.refined = queries;
    res.routing.selected.assign(queries.size(), 0);
    return res;
  }
  return refine_batch(queries, *refiner.block, refiner.mode, mix_seed(refiner.seed, kQueryStream));
}

std::vector<RefinedQuery> refine_queries(const EmbeddingMatrix& queries, const Refiner& refiner) {
  const std::uint64_t fp = refiner.fingerprint();
  std::vector<RefinedQuery> out;
  out.reserve(queries.size());
  const auto res = refine_query_matrix(queries, refiner);
  for (std::size_t i = 0; i < queries.size(); ++i) {
    const auto r = res.refined.row(i);
    out.push_back({queries.ids[i], {r.begin(), r.end()}, fp});
  }
  return out;
}

RankedList search_topk(const RefinedQuery& query, const RefinedIndex& index, std::size_t k) {
  if (k == 0) throw std::invalid_argument("search_topk: k must be >= 1");
  if (query.fingerprint != index.fingerprint) {
    throw FingerprintError("query '" + query.id +
                           "' was refined with a different block or mode than the index");
  }
  if (index.size() > 0 && query.values.size() != index.docs.dim()) {
    throw DimensionError("search_topk: query dimension does not match index");
  }
  const std::size_t n = index.size();
  std::vector<double> scores(n);
  const std::span<const float> q(query.values);
  for (std::size_t i = 0; i < n; ++i) scores[i] = round_score(dot(q, index.docs.row(i)));

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  const auto& ids = index.docs.ids;
  auto better = [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return ids[a] < ids[b];
  };
  const std::size_t take = std::min(k, n);
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(take), order.end(),
                    better);
  RankedList list;
  list.query_id = query.id;
  list.entries.reserve(take);
  for (std::size_t i = 0; i < take; ++i) list.entries.push_back({ids[order[i]], scores[order[i]]});
  return list;
}

RunFile run_queries(const EmbeddingMatrix& queries, const Refiner& refiner,
                    const RefinedIndex& index, std::size_t k) {
  RunFile run;
  const auto refined = refine_queries(queries, refiner);
  run.reserve(refined.size());
  for (const auto& q : refined) run.push_back(search_topk(q, index, k));
  return run;
}

}  // namespace sbmoe
