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
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sbmoe/retrieval.hpp"

namespace sbmoe {

/// Graded relevance judgments, query id → (doc id → grade).
struct Qrels {
  std::map<std::string, std::map<std::string, int>> judgments;

  /// Throws on a negative grade or a repeated (query, doc) pair.
  void add(const std::string& query_id, const std::string& doc_id, int grade);
  const std::map<std::string, int>* find(const std::string& query_id) const;
  std::size_t size() const;
  /// Number of documents with grade > 0 for the query.
  std::size_t relevant_count(const std::string& query_id) const;

  friend bool operator==(const Qrels&, const Qrels&) = default;
};

struct MetricReport {
  std::string metric;
  std::size_t cutoff = 0;
  /// (query id, value) in run order, only for evaluated queries.
  std::vector<std::pair<std::string, double>> per_query;
  double mean = 0.0;
  /// Run queries skipped: absent from the qrels or without relevant docs.
  std::size_t skipped = 0;

  std::optional<double> value_for(const std::string& query_id) const;
};

enum class Gain { kLinear, kExponential };

/// nDCG@k with DCG = Σ gain(rel_i)/log2(i+1) and IDCG from the judged
/// grades sorted descending. Linear gain is rel, exponential is 2^rel - 1.
MetricReport ndcg_at_k(const RunFile& run, const Qrels& qrels, std::size_t k = 10,
                       Gain gain = Gain::kLinear);

/// Fraction of the query's relevant (grade > 0) documents in the top k.
MetricReport recall_at_k(const RunFile& run, const Qrels& qrels, std::size_t k = 100);

struct TTestResult {
  double t = 0.0;
  double p_raw = 1.0;
  double p_corrected = 1.0;
  bool significant = false;
  /// Set when every difference is the same nonzero value (zero variance).
  bool degenerate = false;
};

/// Two-sided paired Student's t-test on a - b with Bonferroni correction
/// p_corrected = min(1, p · num_comparisons).
TTestResult paired_ttest(std::span<const double> a, std::span<const double> b,
                         std::size_t num_comparisons = 1, double alpha = 0.05);

/// "ndcg@10", "recall@100", ...
struct MetricSpec {
  std::string name;
  std::size_t cutoff = 0;

  static MetricSpec parse(const std::string& text);
  std::string label() const;
  MetricReport evaluate(const RunFile& run, const Qrels& qrels) const;
};

struct NamedRun {
  std::string name;
  RunFile run;
};

struct ComparisonRow {
  std::string run;
  std::string metric;
  double mean = 0.0;
  /// Empty for the baseline's own rows.
  std::optional<TTestResult> test;
};

struct ComparisonTable {
  std::string baseline;
  std::size_t num_comparisons = 0;
  std::vector<ComparisonRow> rows;
};

/// Per-run means plus paired tests of every non-baseline run against the
/// baseline on queries evaluated in both. num_comparisons defaults to the
/// number of (run, metric) tests emitted.
ComparisonTable compare_runs(const std::vector<NamedRun>& runs, const Qrels& qrels,
                             const std::vector<MetricSpec>& metrics, const std::string& baseline,
                             std::optional<std::size_t> num_comparisons = std::nullopt,
                             double alpha = 0.05);

/// TSV with columns run, metric, mean, p_raw, p_corrected, significant.
void write_comparison_tsv(std::ostream& out, const ComparisonTable& table);

}  // namespace sbmoe
