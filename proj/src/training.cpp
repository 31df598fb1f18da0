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

#include "sbmoe/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <unordered_map>

#include "sbmoe/evaluation.hpp"

namespace sbmoe {

std::string_view to_string(TrainRouting r) {
  return r == TrainRouting::kNoisyTop1 ? "noisy-top1" : "random";
}

TrainRouting parse_train_routing(std::string_view s) {
  if (s == "noisy-top1") return TrainRouting::kNoisyTop1;
  if (s == "random") return TrainRouting::kRandom;
  throw std::invalid_argument("unknown training routing '" + std::string(s) + "'");
}

void TrainingConfig::validate() const {
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("learning rate must be > 0");
  if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be > 0");
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) {
    throw std::invalid_argument("val_fraction must lie in (0, 1)");
  }
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) {
    throw std::invalid_argument("Adam betas must lie in [0, 1)");
  }
  if (!(adam_eps > 0.0)) throw std::invalid_argument("Adam epsilon must be > 0");
}

std::vector<TrainPair> make_pairs(const EmbeddingMatrix& queries, const EmbeddingMatrix& corpus,
                                  const Qrels& qrels) {
  if (queries.size() > 0 && corpus.size() > 0 && queries.dim() != corpus.dim()) {
    throw DimensionError("query and corpus embeddings differ in dimension");
  }
  std::unordered_map<std::string, std::size_t> doc_row;
  doc_row.reserve(corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i) doc_row.emplace(corpus.ids[i], i);

  std::vector<TrainPair> pairs;
  for (std::size_t qi = 0; qi < queries.size(); ++qi) {
    const auto* judged = qrels.find(queries.ids[qi]);
    if (judged == nullptr) continue;
    for (const auto& [doc_id, grade] : *judged) {
      if (grade <= 0) continue;
      auto it = doc_row.find(doc_id);
      if (it == doc_row.end()) {
        throw std::invalid_argument("qrels reference document '" + doc_id + "' absent from corpus");
      }
      const auto q = queries.row(qi);
      const auto d = corpus.row(it->second);
      pairs.push_back({queries.ids[qi], doc_id, {q.begin(), q.end()}, {d.begin(), d.end()}});
    }
  }
  return pairs;
}

// ---------------------------------------------------------------------------

void adam_step(std::span<float> params, std::span<const double> grads, AdamState& state,
               const AdamParams& hp) {
  if (params.size() != grads.size()) throw DimensionError("adam_step: parameter/gradient mismatch");
  if (state.m.empty() && state.v.empty()) {
    state.m.assign(params.size(), 0.0);
    state.v.assign(params.size(), 0.0);
  }
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw DimensionError("adam_step: optimizer state does not match parameters");
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(hp.beta1, t);
  const double c2 = 1.0 - std::pow(hp.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    state.m[i] = hp.beta1 * state.m[i] + (1.0 - hp.beta1) * g;
    state.v[i] = hp.beta2 * state.v[i] + (1.0 - hp.beta2) * g * g;
    const double m_hat = state.m[i] / c1;
    const double v_hat = state.v[i] / c2;
    params[i] = static_cast<float>(static_cast<double>(params[i]) -
                                   hp.learning_rate * m_hat / (std::sqrt(v_hat) + hp.eps));
  }
}

void adam_step(MoEBlock& block, const BlockGradient& grad, AdamState& state, const AdamParams& hp) {
  std::vector<float> flat_p;
  std::vector<double> flat_g;
  flat_p.reserve(block.parameter_count());
  flat_g.reserve(block.parameter_count());
  for (auto p : std::as_const(block).parameters()) flat_p.insert(flat_p.end(), p.begin(), p.end());
  for (auto g : grad.parameters()) flat_g.insert(flat_g.end(), g.begin(), g.end());
  adam_step(std::span<float>(flat_p), std::span<const double>(flat_g), state, hp);
  std::size_t offset = 0;
  for (auto p : block.parameters()) {
    std::copy_n(flat_p.begin() + static_cast<std::ptrdiff_t>(offset), p.size(), p.begin());
    offset += p.size();
  }
}

// ---------------------------------------------------------------------------

Split split_validation(const std::vector<TrainPair>& pairs, double val_fraction,
                       std::uint64_t seed) {
  if (pairs.size() < 2) throw std::invalid_argument("split_validation: need at least 2 pairs");
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) {
    throw std::invalid_argument("split_validation: val_fraction must lie in (0, 1)");
  }
  std::vector<std::string> query_order;
  std::unordered_map<std::string, std::size_t> seen;
  for (const auto& p : pairs) {
    if (seen.emplace(p.query_id, query_order.size()).second) query_order.push_back(p.query_id);
  }
  const std::size_t nq = query_order.size();
  if (nq < 2) throw std::invalid_argument("split_validation: need at least 2 distinct queries");

  SeededRng rng = SeededRng(seed).fork(0x5e1);
  rng.shuffle(query_order.begin(), query_order.end());
  auto n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(nq)));
  n_val = std::clamp<std::size_t>(n_val, 1, nq - 1);

  std::unordered_map<std::string, bool> is_val;
  for (std::size_t i = 0; i < nq; ++i) is_val[query_order[i]] = i < n_val;
  Split split;
  for (const auto& p : pairs) (is_val[p.query_id] ? split.val : split.train).push_back(p);
  return split;
}

namespace {

struct Batch {
  Matrix<float> queries;
  Matrix<float> docs;
};

Batch gather(const std::vector<TrainPair>& pairs, std::span<const std::size_t> rows,
             std::size_t dim) {
  Batch b{Matrix<float>(rows.size(), dim), Matrix<float>(rows.size(), dim)};
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto& p = pairs[rows[r]];
    if (p.query.size() != dim || p.doc.size() != dim) {
      throw DimensionError("training pair dimension does not match block dimension " +
                           std::to_string(dim));
    }
    std::copy(p.query.begin(), p.query.end(), b.queries.row(r).begin());
    std::copy(p.doc.begin(), p.doc.end(), b.docs.row(r).begin());
  }
  return b;
}

std::vector<RowRoute> draw_routes(std::size_t rows, std::size_t n, const TrainingConfig& cfg,
                                  SeededRng& rng) {
  std::vector<RowRoute> routes(rows);
  for (auto& r : routes) {
    if (cfg.routing == TrainRouting::kRandom) {
      r.fixed_expert = static_cast<std::size_t>(rng.uniform_index(n));
    } else {
      r.noise = gaussian(rng, n);
    }
  }
  return routes;
}

constexpr std::uint64_t kValidationStream = 0x7a1;

}  // namespace

double validation_loss(const MoEBlock& block, const std::vector<TrainPair>& pairs,
                       const TrainingConfig& config) {
  if (pairs.empty()) throw std::invalid_argument("validation_loss: no validation pairs");
  const std::size_t n = block.num_experts();
  SeededRng rng = SeededRng(config.seed).fork(kValidationStream);
  std::vector<std::size_t> order(pairs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  double total = 0.0;
  for (std::size_t start = 0; start < pairs.size(); start += config.batch_size) {
    const std::size_t len = std::min(config.batch_size, pairs.size() - start);
    auto batch = gather(pairs, std::span<const std::size_t>(order).subspan(start, len), block.dim);
    std::vector<RowRoute> q_routes(len), d_routes(len);
    if (config.routing == TrainRouting::kRandom) {
      q_routes = draw_routes(len, n, config, rng);
      d_routes = draw_routes(len, n, config, rng);
    } else {
      for (auto& r : q_routes) r.noise.assign(n, 0.0);
      for (auto& r : d_routes) r.noise.assign(n, 0.0);
    }
    auto res = batch_loss_and_gradient(block, batch.queries, batch.docs,
                                       std::span<const RowRoute>(q_routes),
                                       std::span<const RowRoute>(d_routes), config.temperature,
                                       config.scale_by_gate, /*with_gradient=*/false);
    total += res.loss * static_cast<double>(len);
  }
  return total / static_cast<double>(pairs.size());
}

TrainResult train(const TrainingConfig& config, const std::vector<TrainPair>& train_pairs,
                  const std::vector<TrainPair>& val_pairs, const MoEBlock& initial) {
  config.validate();
  initial.validate();
  if (train_pairs.empty()) throw std::invalid_argument("train: no training pairs");
  for (const auto* set : {&train_pairs, &val_pairs}) {
    for (const auto& p : *set) {
      if (p.query.size() != initial.dim || p.doc.size() != initial.dim) {
        throw DimensionError("train: pair dimension does not match block dimension " +
                             std::to_string(initial.dim));
      }
    }
  }

  const AdamParams hp{config.learning_rate, config.beta1, config.beta2, config.adam_eps};
  const std::size_t n = initial.num_experts();
  MoEBlock block = initial;
  AdamState adam;
  SeededRng rng(config.seed);

  TrainResult result;
  result.batches_per_epoch = (train_pairs.size() + config.batch_size - 1) / config.batch_size;
  const double initial_val = validation_loss(block, val_pairs, config);
  result.best = {block, 0, initial_val};
  result.epochs.push_back({0, std::numeric_limits<double>::quiet_NaN(), initial_val});

  std::vector<std::size_t> order(train_pairs.size());
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order.begin(), order.end());
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t len = std::min(config.batch_size, order.size() - start);
      auto batch = gather(train_pairs, std::span<const std::size_t>(order).subspan(start, len),
                          block.dim);
      const auto q_routes = draw_routes(len, n, config, rng);
      const auto d_routes = draw_routes(len, n, config, rng);
      auto res = batch_loss_and_gradient(block, batch.queries, batch.docs,
                                         std::span<const RowRoute>(q_routes),
                                         std::span<const RowRoute>(d_routes), config.temperature,
                                         config.scale_by_gate);
      adam_step(block, res.grad, adam, hp);
      result.batch_losses.push_back(res.loss);
      epoch_loss += res.loss * static_cast<double>(len);
    }
    for (auto p : std::as_const(block).parameters()) {
      if (!all_finite(p)) throw std::runtime_error("training diverged: non-finite parameters");
    }
    const double val = validation_loss(block, val_pairs, config);
    result.epochs.push_back({epoch, epoch_loss / static_cast<double>(order.size()), val});
    if (val < result.best.val_loss) result.best = {block, epoch, val};
  }
  return result;
}

TrainResult train(const TrainingConfig& config, const std::vector<TrainPair>& pairs,
                  const MoEBlock& initial) {
  config.validate();
  auto split = split_validation(pairs, config.val_fraction, config.seed);
  return train(config, split.train, split.val, initial);
}

void write_loss_log(const std::string& path, const std::vector<EpochLog>& log) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "epoch\ttrain_loss\tval_loss\n";
  char buf[64];
  for (const auto& e : log) {
    out << e.epoch << '\t';
    if (std::isnan(e.train_loss)) {
      out << "NA";
    } else {
      std::snprintf(buf, sizeof buf, "%.9g", e.train_loss);
      out << buf;
    }
    std::snprintf(buf, sizeof buf, "%.9g", e.val_loss);
    out << '\t' << buf << '\n';
  }
}

}  // namespace sbmoe
