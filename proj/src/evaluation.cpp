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

#include "sbmoe/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <stdexcept>
#include <unordered_map>

#include <boost/math/distributions/students_t.hpp>

namespace sbmoe {

void Qrels::add(const std::string& query_id, const std::string& doc_id, int grade) {
  if (grade < 0) {
    throw std::invalid_argument("negative relevance grade for " + query_id + "/" + doc_id);
  }
  if (!judgments[query_id].emplace(doc_id, grade).second) {
    throw std::invalid_argument("duplicate judgment for " + query_id + "/" + doc_id);
  }
}

const std::map<std::string, int>* Qrels::find(const std::string& query_id) const {
  auto it = judgments.find(query_id);
  return it == judgments.end() ? nullptr : &it->second;
}

std::size_t Qrels::size() const {
  std::size_t n = 0;
  for (const auto& [q, docs] : judgments) n += docs.size();
  return n;
}

std::size_t Qrels::relevant_count(const std::string& query_id) const {
  const auto* docs = find(query_id);
  if (docs == nullptr) return 0;
  return static_cast<std::size_t>(
      std::count_if(docs->begin(), docs->end(), [](const auto& kv) { return kv.second > 0; }));
}

std::optional<double> MetricReport::value_for(const std::string& query_id) const {
  for (const auto& [q, v] : per_query) {
    if (q == query_id) return v;
  }
  return std::nullopt;
}

namespace {

double gain_of(int grade, Gain gain) {
  if (grade <= 0) return 0.0;
  return gain == Gain::kLinear ? static_cast<double>(grade) : std::exp2(grade) - 1.0;
}

void finish(MetricReport& r) {
  double sum = 0.0;
  for (const auto& [q, v] : r.per_query) sum += v;
  r.mean = r.per_query.empty() ? 0.0 : sum / static_cast<double>(r.per_query.size());
}

}  // namespace

MetricReport ndcg_at_k(const RunFile& run, const Qrels& qrels, std::size_t k, Gain gain) {
  if (k == 0) throw std::invalid_argument("ndcg_at_k: k must be >= 1");
  MetricReport report{"ndcg", k, {}, 0.0, 0};
  for (const auto& list : run) {
    const auto* judged = qrels.find(list.query_id);
    if (judged == nullptr || qrels.relevant_count(list.query_id) == 0) {
      ++report.skipped;
      continue;
    }
    double dcg = 0.0;
    const std::size_t depth = std::min(k, list.entries.size());
    for (std::size_t i = 0; i < depth; ++i) {
      auto it = judged->find(list.entries[i].doc_id);
      if (it == judged->end()) continue;
      dcg += gain_of(it->second, gain) / std::log2(static_cast<double>(i) + 2.0);
    }
    std::vector<int> grades;
    for (const auto& [doc, g] : *judged) grades.push_back(g);
    std::sort(grades.begin(), grades.end(), std::greater<>());
    double idcg = 0.0;
    for (std::size_t i = 0; i < std::min(k, grades.size()); ++i) {
      idcg += gain_of(grades[i], gain) / std::log2(static_cast<double>(i) + 2.0);
    }
    report.per_query.emplace_back(list.query_id, dcg / idcg);
  }
  finish(report);
  return report;
}

MetricReport recall_at_k(const RunFile& run, const Qrels& qrels, std::size_t k) {
  if (k == 0) throw std::invalid_argument("recall_at_k: k must be >= 1");
  MetricReport report{"recall", k, {}, 0.0, 0};
  for (const auto& list : run) {
    const std::size_t relevant = qrels.relevant_count(list.query_id);
    if (relevant == 0) {
      ++report.skipped;
      continue;
    }
    const auto* judged = qrels.find(list.query_id);
    std::size_t hits = 0;
    const std::size_t depth = std::min(k, list.entries.size());
    for (std::size_t i = 0; i < depth; ++i) {
      auto it = judged->find(list.entries[i].doc_id);
      if (it != judged->end() && it->second > 0) ++hits;
    }
    report.per_query.emplace_back(list.query_id,
                                  static_cast<double>(hits) / static_cast<double>(relevant));
  }
  finish(report);
  return report;
}

TTestResult paired_ttest(std::span<const double> a, std::span<const double> b,
                         std::size_t num_comparisons, double alpha) {
  if (a.size() != b.size()) throw std::invalid_argument("paired_ttest: length mismatch");
  if (a.size() < 2) throw std::invalid_argument("paired_ttest: need at least 2 paired values");
  if (num_comparisons < 1) throw std::invalid_argument("paired_ttest: num_comparisons must be >= 1");
  const std::size_t n = a.size();
  std::vector<double> diff(n);
  for (std::size_t i = 0; i < n; ++i) diff[i] = a[i] - b[i];
  double mean = 0.0;
  for (double d : diff) mean += d;
  mean /= static_cast<double>(n);
  double ss = 0.0;
  for (double d : diff) ss += (d - mean) * (d - mean);
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));

  TTestResult r;
  const bool all_zero = std::all_of(diff.begin(), diff.end(), [](double d) { return d == 0.0; });
  if (all_zero) {
    r.t = 0.0;
    r.p_raw = 1.0;
  } else if (sd == 0.0 || sd <= 1e-12 * std::abs(mean)) {
    r.degenerate = true;
    r.t = std::copysign(std::numeric_limits<double>::infinity(), mean);
    r.p_raw = 0.0;
  } else {
    r.t = mean / (sd / std::sqrt(static_cast<double>(n)));
    const boost::math::students_t dist(static_cast<double>(n - 1));
    r.p_raw = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(r.t)));
  }
  r.p_corrected = std::min(1.0, r.p_raw * static_cast<double>(num_comparisons));
  r.significant = r.p_corrected < alpha;
  return r;
}

MetricSpec MetricSpec::parse(const std::string& text) {
  const auto at = text.find('@');
  if (at == std::string::npos) throw std::invalid_argument("metric must look like name@k: " + text);
  MetricSpec spec;
  spec.name = text.substr(0, at);
  if (spec.name != "ndcg" && spec.name != "recall") {
    throw std::invalid_argument("unknown metric '" + spec.name + "'");
  }
  try {
    std::size_t used = 0;
    const auto k = std::stoul(text.substr(at + 1), &used);
    if (used != text.size() - at - 1 || k == 0) throw std::invalid_argument("bad cutoff");
    spec.cutoff = k;
  } catch (const std::exception&) {
    throw std::invalid_argument("bad metric cutoff in '" + text + "'");
  }
  return spec;
}

std::string MetricSpec::label() const { return name + "@" + std::to_string(cutoff); }

MetricReport MetricSpec::evaluate(const RunFile& run, const Qrels& qrels) const {
  return name == "ndcg" ? ndcg_at_k(run, qrels, cutoff) : recall_at_k(run, qrels, cutoff);
}

ComparisonTable compare_runs(const std::vector<NamedRun>& runs, const Qrels& qrels,
                             const std::vector<MetricSpec>& metrics, const std::string& baseline,
                             std::optional<std::size_t> num_comparisons, double alpha) {
  if (runs.size() < 2) throw std::invalid_argument("compare_runs: need at least 2 runs");
  if (metrics.empty()) throw std::invalid_argument("compare_runs: no metrics requested");
  const auto base_it = std::find_if(runs.begin(), runs.end(),
                                    [&](const NamedRun& r) { return r.name == baseline; });
  if (base_it == runs.end()) {
    throw std::invalid_argument("compare_runs: baseline '" + baseline + "' not among runs");
  }
  ComparisonTable table;
  table.baseline = baseline;
  table.num_comparisons = num_comparisons.value_or((runs.size() - 1) * metrics.size());

  for (const auto& metric : metrics) {
    const auto base_report = metric.evaluate(base_it->run, qrels);
    std::unordered_map<std::string, double> base_values(base_report.per_query.begin(),
                                                        base_report.per_query.end());
    for (const auto& r : runs) {
      const auto report = metric.evaluate(r.run, qrels);
      ComparisonRow row{r.name, metric.label(), report.mean, std::nullopt};
      if (r.name != baseline) {
        std::vector<double> a, b;
        for (const auto& [q, v] : report.per_query) {
          auto it = base_values.find(q);
          if (it == base_values.end()) continue;
          a.push_back(v);
          b.push_back(it->second);
        }
        row.test = paired_ttest(a, b, table.num_comparisons, alpha);
      }
      table.rows.push_back(std::move(row));
    }
  }
  return table;
}

void write_comparison_tsv(std::ostream& out, const ComparisonTable& table) {
  out << "run\tmetric\tmean\tp_raw\tp_corrected\tsignificant\n";
  char buf[64];
  for (const auto& row : table.rows) {
    std::snprintf(buf, sizeof buf, "%.6f", row.mean);
    out << row.run << '\t' << row.metric << '\t' << buf << '\t';
    if (!row.test) {
      out << "NA\tNA\t-\n";
      continue;
    }
    std::snprintf(buf, sizeof buf, "%.6g", row.test->p_raw);
    out << buf << '\t';
    std::snprintf(buf, sizeof buf, "%.6g", row.test->p_corrected);
    out << buf << '\t' << (row.test->significant ? "yes" : "no") << '\n';
  }
}

}  // namespace sbmoe
