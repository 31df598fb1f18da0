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
#include <istream>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "sbmoe/evaluation.hpp"
#include "sbmoe/moe_block.hpp"
#include "sbmoe/retrieval.hpp"
#include "sbmoe/synthetic.hpp"
#include "sbmoe/training.hpp"

namespace sbmoe {

/// Minimum routed-document count for an expert to count as activated,
/// either absolute or as a fraction of the corpus.
struct ThresholdSpec {
  enum class Kind { kAbsolute, kFraction };
  Kind kind = Kind::kAbsolute;
  double value = 100000;

  static ThresholdSpec absolute(std::size_t count);
  static ThresholdSpec fraction(double f);
  /// "0.01" → fraction, "100000" → absolute (values >= 1 are counts).
  static ThresholdSpec parse(const std::string& text);
  /// Smallest integer count meeting the threshold; always >= 1.
  std::size_t resolve(std::size_t corpus_size) const;
};

struct ActivationReport {
  std::vector<std::size_t> counts;
  std::size_t corpus_size = 0;
  std::size_t threshold = 0;
  std::size_t activated = 0;
  std::size_t employed = 0;
  double activation_percent = 0.0;
};

/// Expert i is activated iff counts[i] >= threshold.
ActivationReport activation_report(std::span<const std::uint32_t> routing, std::size_t num_experts,
                                   const ThresholdSpec& threshold);

void write_activation_tsv(std::ostream& out, const ActivationReport& report);

struct SweepConfig {
  TrainingConfig training;
  std::vector<std::size_t> expert_counts{3, 6, 9, 12};
  std::vector<Pooling> variants{Pooling::kTop1, Pooling::kAll};
  Activation activation = Activation::kRelu;
  ThresholdSpec threshold = ThresholdSpec::fraction(0.01);
  /// Retrieval depth; must cover the recall cutoff.
  std::size_t depth = 100;
};

struct SweepRow {
  /// 0 for the identity baseline.
  std::size_t experts = 0;
  std::string variant;
  double ndcg10 = 0.0;
  double recall100 = 0.0;
  std::optional<std::size_t> activated;
  double wall_seconds = 0.0;
};

struct SweepResult {
  std::vector<SweepRow> rows;
};

/// Trains one block per expert count (init seed derived from the training
/// seed and the count) on the dataset's training queries, then evaluates
/// every variant plus the identity baseline on the test queries.
SweepResult sweep(const SweepConfig& config, const SyntheticDataset& data);

/// Columns: experts, variant, ndcg@10, recall@100, activated. Wall time is
/// left out so equal seeds give byte-identical tables.
void write_sweep_tsv(std::ostream& out, const SweepResult& result);
/// Columns: experts, variant, wall_seconds.
void write_sweep_timing(std::ostream& out, const SweepResult& result);

struct VizInputs {
  const RunFile& run;
  const EmbeddingMatrix& raw_queries;
  const EmbeddingMatrix& raw_corpus;
  const EmbeddingMatrix& refined_queries;
  const Routing& query_routing;
  const RefinedIndex& index;
};

/// TSV for one query and its top_k retrieved documents. Columns: id,
/// kind (query|doc), expert (NA for the identity), rank (0 for the query),
/// raw_0..raw_{d-1}, refined_0..refined_{d-1}. Floats use 9 significant
/// digits so they parse back exactly.
void export_viz(std::ostream& out, const std::string& query_id, const VizInputs& in,
                std::size_t top_k = 1000);

struct VizRow {
  std::string id;
  std::string kind;
  std::optional<std::uint32_t> expert;
  std::size_t rank = 0;
  std::vector<float> raw;
  std::vector<float> refined;
};

std::vector<VizRow> read_viz(std::istream& in);

}  // namespace sbmoe
