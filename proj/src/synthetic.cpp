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

#include "sbmoe/synthetic.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numeric>
#include <stdexcept>

#include "sbmoe/data_io.hpp"

namespace sbmoe {

void SyntheticSpec::validate() const {
  if (num_domains < 1) throw std::invalid_argument("synthetic: need at least one domain");
  if (docs_per_domain < 1 || queries_per_domain < 1 || train_queries_per_domain < 1 ||
      positives_per_query < 1) {
    throw std::invalid_argument("synthetic: all counts must be >= 1");
  }
  if (dim < num_domains) {
    throw std::invalid_argument("synthetic: dim must be >= number of domains");
  }
  if (num_domains + distortion_rank > dim) {
    throw std::invalid_argument("synthetic: dim must be >= domains + distortion_rank");
  }
  if (positives_per_query > docs_per_domain) {
    throw std::invalid_argument("synthetic: positives_per_query exceeds docs_per_domain");
  }
  if (!(transform_scale > 0.0)) throw std::invalid_argument("synthetic: transform_scale must be > 0");
  if (!(doc_spread >= 0.0 && noise >= 0.0)) throw std::invalid_argument("synthetic: negative spread");
  if (!(embedding_scale > 0.0)) throw std::invalid_argument("synthetic: embedding_scale must be > 0");
}

namespace {

using Basis = std::vector<std::vector<double>>;

/// Gram-Schmidt a fresh Gaussian draw against `basis`; redraws on
/// (improbable) degeneracy.
std::vector<double> orthonormal_draw(const Basis& basis, std::size_t d, SeededRng& rng) {
  for (;;) {
    auto v = gaussian(rng, d);
    for (int pass = 0; pass < 2; ++pass) {
      for (const auto& b : basis) {
        const double p = dot(std::span<const double>(v), std::span<const double>(b));
        for (std::size_t i = 0; i < d; ++i) v[i] -= p * b[i];
      }
    }
    const double norm = std::sqrt(dot(std::span<const double>(v), std::span<const double>(v)));
    if (norm > 1e-6) {
      for (auto& x : v) x /= norm;
      return v;
    }
  }
}

void project_off(std::vector<double>& v, const Basis& basis) {
  for (const auto& b : basis) {
    const double p = dot(std::span<const double>(v), std::span<const double>(b));
    for (std::size_t i = 0; i < v.size(); ++i) v[i] -= p * b[i];
  }
}

std::string make_id(char prefix, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%c%06zu", prefix, i);
  return buf;
}

struct QuerySet {
  EmbeddingMatrix queries;
  Qrels qrels;
};

QuerySet make_queries(const SyntheticSpec& spec, char prefix, std::size_t per_domain,
                      const std::vector<Basis>& distortions,
                      const EmbeddingMatrix& corpus, SeededRng& rng) {
  const std::size_t d = spec.dim;
  const std::size_t total = per_domain * spec.num_domains;
  QuerySet out;
  std::vector<std::string> ids;
  Matrix<float> values(total, d);
  std::size_t row = 0;
  for (std::size_t k = 0; k < spec.num_domains; ++k) {
    const std::size_t first_doc = k * spec.docs_per_domain;
    for (std::size_t qi = 0; qi < per_domain; ++qi, ++row) {
      ids.push_back(make_id(prefix, row));
      // distinct source documents by partial Fisher-Yates over the domain
      std::vector<std::size_t> pool(spec.docs_per_domain);
      std::iota(pool.begin(), pool.end(), first_doc);
      std::vector<double> source(d, 0.0);
      for (std::size_t p = 0; p < spec.positives_per_query; ++p) {
        const std::size_t j = p + rng.uniform_index(pool.size() - p);
        std::swap(pool[p], pool[j]);
        const auto doc = corpus.row(pool[p]);
        for (std::size_t i = 0; i < d; ++i) source[i] += doc[i] / spec.embedding_scale;
        out.qrels.add(ids.back(), corpus.ids[pool[p]], 1);
      }
      for (auto& x : source) x /= static_cast<double>(spec.positives_per_query);
      // A_k x = x + (scale - 1) Σ u (u·x)
      std::vector<double> q = source;
      for (const auto& u : distortions[k]) {
        const double p = dot(std::span<const double>(source), std::span<const double>(u));
        for (std::size_t i = 0; i < d; ++i) q[i] += (spec.transform_scale - 1.0) * p * u[i];
      }
      const auto eps = gaussian(rng, d);
      const double noise_scale = spec.noise / std::sqrt(static_cast<double>(d));
      for (std::size_t i = 0; i < d; ++i) values(row, i) =
          static_cast<float>(spec.embedding_scale * (q[i] + noise_scale * eps[i]));
    }
  }
  out.queries = EmbeddingMatrix(std::move(ids), std::move(values));
  return out;
}

}  // namespace

SyntheticDataset gen_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  const std::size_t d = spec.dim;
  SeededRng rng(spec.seed);

  Basis centers;
  for (std::size_t k = 0; k < spec.num_domains; ++k) centers.push_back(orthonormal_draw(centers, d, rng));
  std::vector<Basis> distortions(spec.num_domains);
  for (std::size_t k = 0; k < spec.num_domains; ++k) {
    Basis within = centers;
    for (std::size_t r = 0; r < spec.distortion_rank; ++r) {
      within.push_back(orthonormal_draw(within, d, rng));
      distortions[k].push_back(within.back());
    }
  }

  SyntheticDataset data;
  const std::size_t n_docs = spec.docs_per_domain * spec.num_domains;
  std::vector<std::string> doc_ids;
  Matrix<float> docs(n_docs, d);
  const double spread = spec.doc_spread / std::sqrt(static_cast<double>(d));
  for (std::size_t k = 0, row = 0; k < spec.num_domains; ++k) {
    for (std::size_t i = 0; i < spec.docs_per_domain; ++i, ++row) {
      doc_ids.push_back(make_id('d', row));
      data.doc_domain.push_back(static_cast<std::uint32_t>(k));
      auto z = gaussian(rng, d);
      project_off(z, centers);
      for (std::size_t j = 0; j < d; ++j) {
        docs(row, j) = static_cast<float>(spec.embedding_scale * (centers[k][j] + spread * z[j]));
      }
    }
  }
  data.corpus = EmbeddingMatrix(std::move(doc_ids), std::move(docs));

  auto test = make_queries(spec, 'q', spec.queries_per_domain, distortions, data.corpus, rng);
  auto train = make_queries(spec, 't', spec.train_queries_per_domain, distortions,
                            data.corpus, rng);
  data.queries = std::move(test.queries);
  data.qrels = std::move(test.qrels);
  data.train_queries = std::move(train.queries);
  data.train_qrels = std::move(train.qrels);
  return data;
}

DatasetPaths DatasetPaths::in(const std::string& dir) {
  const std::filesystem::path p(dir);
  return {(p / "corpus.sbme").string(), (p / "queries.sbme").string(), (p / "qrels.txt").string(),
          (p / "train_queries.sbme").string(), (p / "train_qrels.txt").string()};
}

void write_dataset(const std::string& dir, const SyntheticDataset& data) {
  std::filesystem::create_directories(dir);
  const auto paths = DatasetPaths::in(dir);
  write_embeddings(paths.corpus, data.corpus);
  write_embeddings(paths.queries, data.queries);
  write_qrels(paths.qrels, data.qrels);
  write_embeddings(paths.train_queries, data.train_queries);
  write_qrels(paths.train_qrels, data.train_qrels);
}

SyntheticDataset read_dataset(const std::string& dir) {
  const auto paths = DatasetPaths::in(dir);
  SyntheticDataset data;
  data.corpus = read_embeddings(paths.corpus);
  data.queries = read_embeddings(paths.queries);
  data.qrels = read_qrels(paths.qrels);
  data.train_queries = read_embeddings(paths.train_queries);
  data.train_qrels = read_qrels(paths.train_qrels);
  return data;
}

}  // namespace sbmoe
