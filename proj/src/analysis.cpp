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

#include "sbmoe/analysis.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

namespace sbmoe {

ThresholdSpec ThresholdSpec::absolute(std::size_t count) {
  if (count < 1) throw std::invalid_argument("activation threshold must be >= 1 document");
  return {Kind::kAbsolute, static_cast<double>(count)};
}

ThresholdSpec ThresholdSpec::fraction(double f) {
  if (!(f > 0.0 && f <= 1.0)) throw std::invalid_argument("activation fraction must lie in (0, 1]");
  return {Kind::kFraction, f};
}

ThresholdSpec ThresholdSpec::parse(const std::string& text) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(text, &used);
  } catch (const std::exception&) {
    throw std::invalid_argument("bad activation threshold '" + text + "'");
  }
  if (used != text.size()) throw std::invalid_argument("bad activation threshold '" + text + "'");
  if (v < 1.0) return fraction(v);
  if (v != std::floor(v)) throw std::invalid_argument("absolute threshold must be an integer");
  return absolute(static_cast<std::size_t>(v));
}

std::size_t ThresholdSpec::resolve(std::size_t corpus_size) const {
  if (kind == Kind::kAbsolute) return static_cast<std::size_t>(value);
  const double raw = value * static_cast<double>(corpus_size);
  // guard against 0.01 * 300 evaluating to 3.0000000000000004
  const double rounded = std::round(raw);
  const double needed = std::abs(raw - rounded) < 1e-9 ? rounded : std::ceil(raw);
  return std::max<std::size_t>(1, static_cast<std::size_t>(needed));
}

ActivationReport activation_report(std::span<const std::uint32_t> routing, std::size_t num_experts,
                                   const ThresholdSpec& threshold) {
  if (num_experts < 1) throw std::invalid_argument("activation_report: need at least one expert");
  ActivationReport r;
  r.counts.assign(num_experts, 0);
  for (auto e : routing) {
    if (e >= num_experts) {
      throw std::out_of_range("activation_report: routed expert " + std::to_string(e) +
                              " outside [0, " + std::to_string(num_experts) + ")");
    }
    ++r.counts[e];
  }
  r.corpus_size = routing.size();
  r.threshold = threshold.resolve(r.corpus_size);
  r.employed = num_experts;
  r.activated = static_cast<std::size_t>(
      std::count_if(r.counts.begin(), r.counts.end(), [&](std::size_t c) { return c >= r.threshold; }));
  r.activation_percent = 100.0 * static_cast<double>(r.activated) / static_cast<double>(num_experts);
  return r;
}

void write_activation_tsv(std::ostream& out, const ActivationReport& report) {
  out << "expert\tdocuments\tactivated\n";
  for (std::size_t i = 0; i < report.counts.size(); ++i) {
    out << i << '\t' << report.counts[i] << '\t' << (report.counts[i] >= report.threshold ? 1 : 0)
        << '\n';
  }
  char pct[32];
  std::snprintf(pct, sizeof pct, "%.2f", report.activation_percent);
  out << "# corpus=" << report.corpus_size << " threshold=" << report.threshold
      << " activated=" << report.activated << '/' << report.employed << " (" << pct << "%)\n";
}

// ---------------------------------------------------------------------------

namespace {

struct Scores {
  double ndcg10;
  double recall100;
};

Scores score_run(const RunFile& run, const Qrels& qrels) {
  return {ndcg_at_k(run, qrels, 10).mean, recall_at_k(run, qrels, 100).mean};
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

SweepResult sweep(const SweepConfig& config, const SyntheticDataset& data) {
  if (config.expert_counts.empty()) throw std::invalid_argument("sweep: no expert counts given");
  if (config.depth < 100) throw std::invalid_argument("sweep: depth must be >= 100 for recall@100");
  SweepResult result;

  {
    const auto t0 = std::chrono::steady_clock::now();
    const auto refiner = Refiner::identity();
    const auto index = build_index(data.corpus, refiner);
    const auto s = score_run(run_queries(data.queries, refiner, index, config.depth), data.qrels);
    result.rows.push_back({0, "baseline", s.ndcg10, s.recall100, std::nullopt, seconds_since(t0)});
  }

  const auto pairs = make_pairs(data.train_queries, data.corpus, data.train_qrels);
  const auto split = split_validation(pairs, config.training.val_fraction, config.training.seed);
  for (std::size_t n : config.expert_counts) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto init = init_block(data.corpus.dim(), n, mix_seed(config.training.seed, n),
                                 InitScheme::kNearIdentity, config.activation);
    const auto trained = train(config.training, split.train, split.val, init);
    const double train_seconds = seconds_since(t0);
    for (Pooling variant : config.variants) {
      const auto t1 = std::chrono::steady_clock::now();
      const Refiner refiner{&trained.best.block, variant, config.training.seed};
      const auto index = build_index(data.corpus, refiner);
      const auto s = score_run(run_queries(data.queries, refiner, index, config.depth), data.qrels);
      const auto act = activation_report(index.routing.selected, n, config.threshold);
      result.rows.push_back({n, std::string(to_string(variant)), s.ndcg10, s.recall100, act.activated,
                             train_seconds + seconds_since(t1)});
    }
  }
  return result;
}

void write_sweep_tsv(std::ostream& out, const SweepResult& result) {
  out << "experts\tvariant\tndcg@10\trecall@100\tactivated\n";
  char buf[64];
  for (const auto& r : result.rows) {
    std::snprintf(buf, sizeof buf, "%.6f\t%.6f", r.ndcg10, r.recall100);
    out << r.experts << '\t' << r.variant << '\t' << buf << '\t';
    if (r.activated) {
      out << *r.activated;
    } else {
      out << "NA";
    }
    out << '\n';
  }
}

void write_sweep_timing(std::ostream& out, const SweepResult& result) {
  out << "experts\tvariant\twall_seconds\n";
  char buf[32];
  for (const auto& r : result.rows) {
    std::snprintf(buf, sizeof buf, "%.3f", r.wall_seconds);
    out << r.experts << '\t' << r.variant << '\t' << buf << '\n';
  }
}

// ---------------------------------------------------------------------------

namespace {

void write_floats(std::ostream& out, std::span<const float> v) {
  char buf[32];
  for (float x : v) {
    std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(x));
    out << '\t' << buf;
  }
}

std::unordered_map<std::string, std::size_t> row_lookup(const EmbeddingMatrix& m) {
  std::unordered_map<std::string, std::size_t> rows;
  rows.reserve(m.size());
  for (std::size_t i = 0; i < m.size(); ++i) rows.emplace(m.ids[i], i);
  return rows;
}

std::size_t require_row(const std::unordered_map<std::string, std::size_t>& rows,
                        const std::string& id, const char* what) {
  auto it = rows.find(id);
  if (it == rows.end()) throw std::invalid_argument(std::string(what) + " has no row for '" + id + "'");
  return it->second;
}

}  // namespace

void export_viz(std::ostream& out, const std::string& query_id, const VizInputs& in,
                std::size_t top_k) {
  const auto list_it = std::find_if(in.run.begin(), in.run.end(),
                                    [&](const RankedList& l) { return l.query_id == query_id; });
  if (list_it == in.run.end()) throw std::invalid_argument("export_viz: unknown query id '" + query_id + "'");
  const bool identity = !in.index.mode.has_value();
  const std::size_t d = in.raw_queries.dim();

  out << "id\tkind\texpert\trank";
  for (std::size_t i = 0; i < d; ++i) out << "\traw_" << i;
  for (std::size_t i = 0; i < d; ++i) out << "\trefined_" << i;
  out << '\n';

  const auto q_rows = row_lookup(in.raw_queries);
  const auto rq_rows = row_lookup(in.refined_queries);
  const std::size_t qr = require_row(q_rows, query_id, "raw queries");
  const std::size_t rqr = require_row(rq_rows, query_id, "refined queries");
  out << query_id << "\tquery\t";
  if (identity) {
    out << "NA";
  } else {
    out << in.query_routing.selected.at(rqr);
  }
  out << "\t0";
  write_floats(out, in.raw_queries.row(qr));
  write_floats(out, in.refined_queries.row(rqr));
  out << '\n';

  const auto doc_rows = row_lookup(in.raw_corpus);
  const auto idx_rows = row_lookup(in.index.docs);
  const std::size_t take = std::min(top_k, list_it->entries.size());
  for (std::size_t r = 0; r < take; ++r) {
    const auto& id = list_it->entries[r].doc_id;
    const std::size_t raw = require_row(doc_rows, id, "raw corpus");
    const std::size_t ref = require_row(idx_rows, id, "index");
    out << id << "\tdoc\t";
    if (identity) {
      out << "NA";
    } else {
      out << in.index.routing.selected[ref];
    }
    out << '\t' << (r + 1);
    write_floats(out, in.raw_corpus.row(raw));
    write_floats(out, in.index.docs.row(ref));
    out << '\n';
  }
}

std::vector<VizRow> read_viz(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw std::invalid_argument("read_viz: empty input");
  std::size_t columns = 0;
  {
    std::istringstream header(line);
    std::string col;
    while (std::getline(header, col, '\t')) ++columns;
  }
  if (columns < 4 || (columns - 4) % 2 != 0) throw std::invalid_argument("read_viz: bad header");
  const std::size_t d = (columns - 4) / 2;
  std::vector<VizRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream fields(line);
    VizRow row;
    std::string expert, rank;
    std::getline(fields, row.id, '\t');
    std::getline(fields, row.kind, '\t');
    std::getline(fields, expert, '\t');
    std::getline(fields, rank, '\t');
    if (expert != "NA") row.expert = static_cast<std::uint32_t>(std::stoul(expert));
    row.rank = std::stoul(rank);
    std::string value;
    for (std::size_t i = 0; i < 2 * d; ++i) {
      if (!std::getline(fields, value, '\t')) throw std::invalid_argument("read_viz: short row");
      (i < d ? row.raw : row.refined).push_back(std::stof(value));
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace sbmoe
