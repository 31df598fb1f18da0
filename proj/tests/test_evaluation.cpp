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

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "sbmoe/evaluation.hpp"
#include "metric_oracle.hpp"

namespace sbmoe {
namespace {

using testing::brute_idcg;
using testing::dcg_of;
using testing::ranked;

TEST(Ndcg, SingleRelevantAtRankTwo) {
  Qrels qrels;
  qrels.add("q", "rel", 1);
  const auto r = ndcg_at_k({ranked("q", {"x", "rel", "y"})}, qrels, 10);
  EXPECT_NEAR(r.mean, 1.0 / std::log2(3.0), 1e-12);
  EXPECT_NEAR(r.mean, 0.630930, 1e-6);
}

TEST(Ndcg, GradedHandCase) {
  Qrels qrels;
  qrels.add("q", "a", 3);
  qrels.add("q", "b", 2);
  const auto lin = ndcg_at_k({ranked("q", {"b", "a"})}, qrels, 10);
  EXPECT_NEAR(lin.mean, (2 + 3 / std::log2(3.0)) / (3 + 2 / std::log2(3.0)), 1e-12);
  const auto exp = ndcg_at_k({ranked("q", {"b", "a"})}, qrels, 10, Gain::kExponential);
  EXPECT_NEAR(exp.mean, (3 + 7 / std::log2(3.0)) / (7 + 3 / std::log2(3.0)), 1e-12);
}

TEST(Ndcg, PerfectRankingScoresOneAndCutoffApplies) {
  Qrels qrels;
  qrels.add("q", "a", 2);
  qrels.add("q", "b", 1);
  EXPECT_DOUBLE_EQ(ndcg_at_k({ranked("q", {"a", "b", "c"})}, qrels, 10).mean, 1.0);
  EXPECT_DOUBLE_EQ(ndcg_at_k({ranked("q", {"c", "a", "b"})}, qrels, 1).mean, 0.0);
  EXPECT_THROW(ndcg_at_k({}, qrels, 0), std::invalid_argument);
}

TEST(Recall, HalfOfRelevantRetrieved) {
  Qrels qrels;
  qrels.add("q", "a", 1);
  qrels.add("q", "b", 1);
  qrels.add("q", "c", 0);
  EXPECT_DOUBLE_EQ(recall_at_k({ranked("q", {"a", "c", "b"})}, qrels, 2).mean, 0.5);
  EXPECT_DOUBLE_EQ(recall_at_k({ranked("q", {"a", "c", "b"})}, qrels, 3).mean, 1.0);
}

TEST(Metrics, SkipsQueriesWithoutRelevantDocuments) {
  Qrels qrels;
  qrels.add("q1", "a", 1);
  qrels.add("q2", "a", 0);
  qrels.add("unrun", "a", 1);
  const RunFile run{ranked("q1", {"a"}), ranked("q2", {"a"}), ranked("q3", {"a"})};
  for (const auto& r : {ndcg_at_k(run, qrels, 10), recall_at_k(run, qrels, 10)}) {
    EXPECT_EQ(r.skipped, 2u);
    ASSERT_EQ(r.per_query.size(), 1u);
    EXPECT_EQ(r.per_query[0].first, "q1");
    EXPECT_DOUBLE_EQ(r.mean, 1.0);
    EXPECT_FALSE(r.value_for("q2").has_value());
  }
  EXPECT_DOUBLE_EQ(ndcg_at_k({}, qrels, 10).mean, 0.0);
}

TEST(Metrics, MatchBruteForceOracleOnRandomCases) {
  SeededRng rng(77);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t k = 1 + rng.uniform_index(12);
    const Gain gain = trial % 2 ? Gain::kExponential : Gain::kLinear;
    const auto inst = testing::random_metric_instance(rng, k, gain);
    const auto n = ndcg_at_k(inst.run, inst.qrels, k, gain);
    const auto r = recall_at_k(inst.run, inst.qrels, k);
    if (!inst.has_relevant) {
      EXPECT_EQ(n.skipped, 1u);
      EXPECT_EQ(r.skipped, 1u);
      continue;
    }
    EXPECT_NEAR(n.mean, inst.ndcg, 1e-12);
    EXPECT_NEAR(r.mean, inst.recall, 1e-15);
    EXPECT_GE(n.mean, 0.0);
    EXPECT_LE(n.mean, 1.0 + 1e-12);
  }
}

TEST(Qrels, RejectsNegativeAndDuplicateJudgments) {
  Qrels q;
  EXPECT_THROW(q.add("q", "d", -1), std::invalid_argument);
  q.add("q", "d", 1);
  EXPECT_THROW(q.add("q", "d", 2), std::invalid_argument);
  EXPECT_EQ(q.size(), 1u);
}

// Closed-form two-sided p-values of Student's t for small df.
double p_df1(double t) { return 1.0 - 2.0 / std::numbers::pi * std::atan(std::abs(t)); }
double p_df2(double t) { return 1.0 - std::abs(t) / std::sqrt(2.0 + t * t); }
double p_df3(double t) {
  const double x = std::abs(t) / std::sqrt(3.0);
  const double cdf = 0.5 + (x / (1.0 + x * x) + std::atan(x)) / std::numbers::pi;
  return 2.0 * (1.0 - cdf);
}

TEST(TTest, UnitStatisticWithFourPairs) {
  const std::vector<double> a{1, -1, 1, 1};
  const std::vector<double> b{0, 0, 0, 0};
  const auto r = paired_ttest(a, b);
  EXPECT_NEAR(r.t, 1.0, 1e-12);
  const double expected = 2.0 * (1.0 - (0.5 + (std::numbers::pi / 6.0 + std::sqrt(3.0) / 3.0 * 0.75) /
                                                  std::numbers::pi));
  EXPECT_NEAR(r.p_raw, expected, 1e-6);
  EXPECT_NEAR(r.p_raw, 0.391002, 1e-6);
  EXPECT_FALSE(r.significant);
}

TEST(TTest, MatchesClosedFormsForSmallDegreesOfFreedom) {
  SeededRng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    for (std::size_t n : {2u, 3u, 4u}) {
      std::vector<double> a(n), b(n);
      for (std::size_t i = 0; i < n; ++i) {
        a[i] = rng.normal();
        b[i] = rng.normal();
      }
      const auto r = paired_ttest(a, b);
      const double expected = n == 2 ? p_df1(r.t) : n == 3 ? p_df2(r.t) : p_df3(r.t);
      EXPECT_NEAR(r.p_raw, expected, 1e-6) << "n=" << n << " t=" << r.t;
      double mean = 0.0, ss = 0.0;
      for (std::size_t i = 0; i < n; ++i) mean += (a[i] - b[i]) / n;
      for (std::size_t i = 0; i < n; ++i) ss += std::pow(a[i] - b[i] - mean, 2);
      EXPECT_NEAR(r.t, mean / std::sqrt(ss / (n - 1) / n), 1e-9 * std::max(1.0, std::abs(r.t)));
    }
  }
}

TEST(TTest, SwappingRunsFlipsStatistic) {
  const std::vector<double> a{0.3, 0.9, 0.4, 0.8, 0.7};
  const std::vector<double> b{0.2, 0.5, 0.6, 0.1, 0.4};
  const auto ab = paired_ttest(a, b);
  const auto ba = paired_ttest(b, a);
  EXPECT_DOUBLE_EQ(ab.t, -ba.t);
  EXPECT_DOUBLE_EQ(ab.p_raw, ba.p_raw);
}

TEST(TTest, BonferroniCorrection) {
  const std::vector<double> a{0.3, 0.9, 0.4, 0.8, 0.7, 0.9};
  const std::vector<double> b{0.2, 0.5, 0.3, 0.1, 0.4, 0.6};
  const auto one = paired_ttest(a, b, 1);
  const auto three = paired_ttest(a, b, 3);
  EXPECT_DOUBLE_EQ(three.p_corrected, std::min(1.0, 3 * one.p_raw));
  EXPECT_DOUBLE_EQ(paired_ttest(a, b, 1000).p_corrected, 1.0);
  EXPECT_EQ(one.significant, one.p_raw < 0.05);
  EXPECT_EQ(paired_ttest(a, b, 1, 0.5).significant, one.p_raw < 0.5);
}

TEST(TTest, DegenerateInputs) {
  const std::vector<double> x{0.5, 0.25, 0.75};
  const auto same = paired_ttest(x, x);
  EXPECT_EQ(same.t, 0.0);
  EXPECT_EQ(same.p_raw, 1.0);
  EXPECT_FALSE(same.degenerate);
  EXPECT_FALSE(same.significant);

  const std::vector<double> shifted{0.6, 0.35, 0.85};
  const auto constant = paired_ttest(shifted, x);
  EXPECT_TRUE(constant.degenerate);
  EXPECT_EQ(constant.p_raw, 0.0);
  EXPECT_TRUE(std::isinf(constant.t) && constant.t > 0);

  EXPECT_THROW(paired_ttest(std::vector<double>{1.0}, std::vector<double>{0.0}), std::invalid_argument);
  EXPECT_THROW(paired_ttest(x, std::vector<double>{1.0, 2.0}), std::invalid_argument);
  EXPECT_THROW(paired_ttest(x, shifted, 0), std::invalid_argument);
}

TEST(MetricSpec, Parse) {
  const auto m = MetricSpec::parse("ndcg@10");
  EXPECT_EQ(m.name, "ndcg");
  EXPECT_EQ(m.cutoff, 10u);
  EXPECT_EQ(MetricSpec::parse("recall@100").label(), "recall@100");
  for (const char* bad : {"ndcg", "map@10", "ndcg@0", "ndcg@x", "ndcg@10x", "recall@"}) {
    EXPECT_THROW(MetricSpec::parse(bad), std::invalid_argument) << bad;
  }
}

TEST(Compare, TableAndTsv) {
  Qrels qrels;
  for (int i = 0; i < 6; ++i) qrels.add("q" + std::to_string(i), "rel", 1);
  RunFile good, bad, partial;
  for (int i = 0; i < 6; ++i) {
    const std::string q = "q" + std::to_string(i);
    good.push_back(ranked(q, {"rel", "x"}));
    bad.push_back(ranked(q, i % 2 ? std::vector<std::string>{"x", "rel"} : std::vector<std::string>{"x", "y", "rel"}));
    if (i < 3) partial.push_back(ranked(q, {"rel"}));
  }
  const auto table = compare_runs({{"base", bad}, {"good", good}, {"part", partial}}, qrels,
                                  {MetricSpec::parse("ndcg@10")}, "base");
  EXPECT_EQ(table.num_comparisons, 2u);
  ASSERT_EQ(table.rows.size(), 3u);
  EXPECT_FALSE(table.rows[0].test.has_value());
  ASSERT_TRUE(table.rows[1].test.has_value());
  const auto direct = ndcg_at_k(good, qrels, 10);
  EXPECT_DOUBLE_EQ(table.rows[1].mean, direct.mean);
  std::vector<double> a, b;
  for (int i = 0; i < 6; ++i) {
    a.push_back(1.0);
    b.push_back(*ndcg_at_k(bad, qrels, 10).value_for("q" + std::to_string(i)));
  }
  EXPECT_DOUBLE_EQ(table.rows[1].test->p_raw, paired_ttest(a, b, 2).p_raw);
  EXPECT_DOUBLE_EQ(table.rows[2].test->p_raw,
                   paired_ttest(std::vector<double>(3, 1.0), std::vector<double>(b.begin(), b.begin() + 3), 2).p_raw);

  std::ostringstream out;
  write_comparison_tsv(out, table);
  std::istringstream lines(out.str());
  std::string line;
  std::getline(lines, line);
  EXPECT_EQ(line, "run\tmetric\tmean\tp_raw\tp_corrected\tsignificant");
  std::getline(lines, line);
  EXPECT_EQ(line.substr(0, 14), "base\tndcg@10\t0");
  EXPECT_NE(line.find("\tNA\tNA\t-"), std::string::npos);

  EXPECT_THROW(compare_runs({{"a", good}}, qrels, {MetricSpec::parse("ndcg@10")}, "a"), std::invalid_argument);
  EXPECT_THROW(compare_runs({{"a", good}, {"b", bad}}, qrels, {MetricSpec::parse("ndcg@10")}, "c"),
               std::invalid_argument);
}

TEST(Compare, OnlyDominatingRunIsFlagged) {
  Qrels qrels;
  RunFile base, copy, better;
  for (int i = 0; i < 20; ++i) {
    const std::string q = "q" + std::to_string(i);
    qrels.add(q, "rel", 1);
    std::vector<std::string> docs{"a", "b", "c"};
    docs.insert(docs.begin() + 1 + i % 3, "rel");
    base.push_back(ranked(q, docs));
    copy.push_back(ranked(q, docs));
    better.push_back(ranked(q, {"rel", "a", "b", "c"}));
  }
  const auto table = compare_runs({{"base", base}, {"copy", copy}, {"better", better}}, qrels,
                                  {MetricSpec::parse("ndcg@10")}, "base");
  EXPECT_FALSE(table.rows[1].test->significant);
  EXPECT_EQ(table.rows[1].test->p_raw, 1.0);
  EXPECT_TRUE(table.rows[2].test->significant);
  EXPECT_GT(table.rows[2].mean, table.rows[0].mean);
}

}  // namespace
}  // namespace sbmoe
