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

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "sbmoe/embedding.hpp"
#include "sbmoe/moe_block.hpp"
#include "sbmoe/numerics.hpp"

namespace sbmoe {

struct Qrels;

/// How training routes each row through the block.
enum class TrainRouting {
  /// Noisy Top-1 gating (the SB-MoE training mode).
  kNoisyTop1,
  /// Uniformly random expert per row, gate untouched (random-gate ablation).
  kRandom,
};

std::string_view to_string(TrainRouting r);
TrainRouting parse_train_routing(std::string_view s);

struct TrainingConfig {
  std::size_t batch_size = 64;
  double learning_rate = 1e-4;
  std::size_t epochs = 20;
  double temperature = 1.0;
  std::uint64_t seed = 42;
  double val_fraction = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  TrainRouting routing = TrainRouting::kNoisyTop1;
  /// When false the training output is f_m(x) instead of p_m·f_m(x).
  bool scale_by_gate = true;

  /// Throws std::invalid_argument on out-of-range values.
  void validate() const;
};

struct TrainPair {
  std::string query_id;
  std::string doc_id;
  Vector<float> query;
  Vector<float> doc;
};

/// One pair per (query, positive document) judged with grade > 0, in
/// query order of `queries` then ascending doc id. Queries without
/// judgments are skipped; judged ids missing from the matrices throw.
std::vector<TrainPair> make_pairs(const EmbeddingMatrix& queries, const EmbeddingMatrix& corpus,
                                  const Qrels& qrels);

// ---------------------------------------------------------------------------
// Contrastive loss

struct ContrastiveResult {
  double loss = 0.0;
  Matrix<double> grad_queries;
  Matrix<double> grad_docs;
};

/// InfoNCE with in-batch negatives:
///   loss = -(1/B) Σ_b log softmax_j(q_b·d_j / τ)_b
template <typename T>
ContrastiveResult contrastive_loss(const Matrix<T>& queries, const Matrix<T>& docs,
                                   double temperature) {
  if (queries.rows == 0) throw std::invalid_argument("contrastive_loss: empty batch");
  if (queries.rows != docs.rows || queries.cols != docs.cols) {
    throw DimensionError("contrastive_loss: query and document batches differ in shape");
  }
  if (!(temperature > 0.0)) throw std::invalid_argument("contrastive_loss: temperature must be > 0");
  const std::size_t b = queries.rows;
  const std::size_t d = queries.cols;
  ContrastiveResult out;
  out.grad_queries = Matrix<double>(b, d);
  out.grad_docs = Matrix<double>(b, d);
  const double inv_b = 1.0 / static_cast<double>(b);
  std::vector<double> scores(b);
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < b; ++j) scores[j] = dot(queries.row(i), docs.row(j)) / temperature;
    const auto probs = softmax(scores);
    double mx = scores[0];
    for (double s : scores) mx = std::max(mx, s);
    double sum = 0.0;
    for (double s : scores) sum += std::exp(s - mx);
    out.loss += (mx + std::log(sum) - scores[i]) * inv_b;
    for (std::size_t j = 0; j < b; ++j) {
      const double ds = (probs[j] - (i == j ? 1.0 : 0.0)) * inv_b / temperature;
      if (ds == 0.0) continue;
      auto gq = out.grad_queries.row(i);
      auto gd = out.grad_docs.row(j);
      const auto q = queries.row(i);
      const auto dj = docs.row(j);
      for (std::size_t k = 0; k < d; ++k) {
        gq[k] += ds * static_cast<double>(dj[k]);
        gd[k] += ds * static_cast<double>(q[k]);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Backpropagation

using BlockGradient = BasicBlock<double>;

template <typename T>
BlockGradient zero_gradient(const BasicBlock<T>& block) {
  return BlockGradient::zeros(block.dim, block.num_experts(), block.activation, block.pooling);
}

/// Accumulates dLoss/dθ for one row given upstream dLoss/dy. Only the
/// routed expert (and the gate, when gate-scaled) receive gradient.
template <typename T>
void backward_sample(const TrainForward<T>& rec, std::span<const T> x,
                     std::span<const double> upstream, const BasicBlock<T>& block,
                     BlockGradient& grad) {
  const std::size_t d = block.dim;
  if (x.size() != d || upstream.size() != d) throw DimensionError("backward: row length mismatch");
  if (rec.expert_out.size() != d || rec.selected >= block.num_experts()) {
    throw std::invalid_argument("backward: forward record is missing or inconsistent");
  }
  const std::size_t m = rec.selected;
  const auto& e = block.experts[m];
  auto& ge = grad.experts[m];
  const std::size_t h = block.hidden();

  std::vector<double> g_f(upstream.begin(), upstream.end());
  double d_p = 0.0;
  if (rec.gate_scaled) {
    d_p = dot(upstream, std::span<const T>(rec.expert_out));
    for (auto& g : g_f) g *= rec.p_selected;
  }

  // f = x + w_up·act(pre) + b_up
  std::vector<double> hid(h);
  for (std::size_t j = 0; j < h; ++j) hid[j] = activate(block.activation, rec.expert_pre[j]);
  for (std::size_t i = 0; i < d; ++i) {
    if (g_f[i] == 0.0) continue;
    auto row = ge.w_up.row(i);
    for (std::size_t j = 0; j < h; ++j) row[j] += g_f[i] * hid[j];
    ge.b_up[i] += g_f[i];
  }
  auto g_hid = matvec_transposed(e.w_up, std::span<const double>(g_f));
  for (std::size_t j = 0; j < h; ++j) {
    const double g_pre = g_hid[j] * activate_derivative(block.activation, rec.expert_pre[j]);
    if (g_pre == 0.0) continue;
    auto row = ge.w_down.row(j);
    for (std::size_t k = 0; k < d; ++k) row[k] += g_pre * static_cast<double>(x[k]);
    ge.b_down[j] += g_pre;
  }

  if (!rec.gate_scaled || d_p == 0.0) return;
  // p_m = softmax(logits)_m; dp_m/dlogit_j = p_m (δ_mj - p_j)
  const std::size_t n = block.num_experts();
  std::vector<double> g_logit(n);
  for (std::size_t j = 0; j < n; ++j) {
    g_logit[j] = d_p * rec.p_selected * ((j == m ? 1.0 : 0.0) - rec.probs[j]);
  }
  auto& gg = grad.gate;
  std::vector<double> gate_hid(h);
  for (std::size_t j = 0; j < h; ++j) {
    gate_hid[j] = rec.gate_hidden_pre[j] > T{0} ? static_cast<double>(rec.gate_hidden_pre[j]) : 0.0;
  }
  for (std::size_t i = 0; i < n; ++i) {
    auto row = gg.w_out.row(i);
    for (std::size_t j = 0; j < h; ++j) row[j] += g_logit[i] * gate_hid[j];
    gg.b_out[i] += g_logit[i];
  }
  auto g_gate_hid = matvec_transposed(block.gate.w_out, std::span<const double>(g_logit));
  for (std::size_t j = 0; j < h; ++j) {
    if (!(rec.gate_hidden_pre[j] > T{0})) continue;
    const double g_pre = g_gate_hid[j];
    auto row = gg.w_hidden.row(j);
    for (std::size_t k = 0; k < d; ++k) row[k] += g_pre * static_cast<double>(x[k]);
    gg.b_hidden[j] += g_pre;
  }
}

/// Gradient of a batch of rows given the forward records of every row.
template <typename T>
BlockGradient backward_block(const Matrix<T>& inputs, const Matrix<double>& upstream,
                             const BasicBlock<T>& block,
                             std::span<const TrainForward<T>> records) {
  if (records.size() != inputs.rows) {
    throw std::invalid_argument("backward_block: missing forward record for some rows");
  }
  if (upstream.rows != inputs.rows) throw DimensionError("backward_block: upstream row mismatch");
  auto grad = zero_gradient(block);
  for (std::size_t r = 0; r < inputs.rows; ++r) {
    backward_sample(records[r], inputs.row(r), upstream.row(r), block, grad);
  }
  return grad;
}

/// Routing decision for one training row: either noise draws for noisy
/// Top-1 (all-zero noise gives clean Top-1) or a fixed expert.
struct RowRoute {
  std::vector<double> noise;
  std::optional<std::size_t> fixed_expert;
};

template <typename T>
TrainForward<T> forward_route(std::span<const T> x, const BasicBlock<T>& block,
                              const RowRoute& route, bool scale_by_gate) {
  if (route.fixed_expert) return forward_fixed_expert(x, block, *route.fixed_expert);
  return forward_noisy_top1(x, block, std::span<const double>(route.noise), scale_by_gate);
}

struct BatchResult {
  double loss = 0.0;
  BlockGradient grad;
};

/// Full training pipeline for one batch: both sides through the block,
/// contrastive loss, gradient w.r.t. every block parameter.
template <typename T>
BatchResult batch_loss_and_gradient(const BasicBlock<T>& block, const Matrix<T>& queries,
                                    const Matrix<T>& docs, std::span<const RowRoute> query_routes,
                                    std::span<const RowRoute> doc_routes, double temperature,
                                    bool scale_by_gate, bool with_gradient = true) {
  if (query_routes.size() != queries.rows || doc_routes.size() != docs.rows) {
    throw std::invalid_argument("batch: one route per row is required");
  }
  const std::size_t b = queries.rows;
  std::vector<TrainForward<T>> q_rec, d_rec;
  q_rec.reserve(b);
  d_rec.reserve(b);
  Matrix<T> q_out(b, block.dim), d_out(b, block.dim);
  for (std::size_t r = 0; r < b; ++r) {
    q_rec.push_back(forward_route(queries.row(r), block, query_routes[r], scale_by_gate));
    d_rec.push_back(forward_route(docs.row(r), block, doc_routes[r], scale_by_gate));
    std::copy(q_rec.back().y.begin(), q_rec.back().y.end(), q_out.row(r).begin());
    std::copy(d_rec.back().y.begin(), d_rec.back().y.end(), d_out.row(r).begin());
  }
  auto cl = contrastive_loss(q_out, d_out, temperature);
  BatchResult out;
  out.loss = cl.loss;
  if (!with_gradient) return out;
  out.grad = backward_block(queries, cl.grad_queries, block, std::span<const TrainForward<T>>(q_rec));
  auto g_docs = backward_block(docs, cl.grad_docs, block, std::span<const TrainForward<T>>(d_rec));
  auto dst = out.grad.parameters();
  auto src = g_docs.parameters();
  for (std::size_t t = 0; t < dst.size(); ++t) {
    for (std::size_t i = 0; i < dst[t].size(); ++i) dst[t][i] += src[t][i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Adam

struct AdamParams {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::uint64_t step = 0;
  std::vector<double> m;
  std::vector<double> v;

  friend bool operator==(const AdamState&, const AdamState&) = default;
};

/// One bias-corrected Adam update over a flat parameter vector. A fresh
/// (empty) state is sized on first use.
void adam_step(std::span<float> params, std::span<const double> grads, AdamState& state,
               const AdamParams& hp);

/// Adam over every block tensor, in parameters() order.
void adam_step(MoEBlock& block, const BlockGradient& grad, AdamState& state, const AdamParams& hp);

// ---------------------------------------------------------------------------
// Data split and training loop

struct Split {
  std::vector<TrainPair> train;
  std::vector<TrainPair> val;
};

/// Seeded shuffle of distinct queries; round(val_fraction · #queries)
/// queries (at least one, never all) go to validation with all their pairs.
Split split_validation(const std::vector<TrainPair>& pairs, double val_fraction,
                       std::uint64_t seed);

struct Checkpoint {
  MoEBlock block;
  std::size_t epoch = 0;
  double val_loss = 0.0;
};

struct EpochLog {
  std::size_t epoch = 0;
  /// NaN for epoch 0 (the initial block, before any update).
  double train_loss = 0.0;
  double val_loss = 0.0;
};

struct TrainResult {
  Checkpoint best;
  std::vector<EpochLog> epochs;
  /// Loss of every minibatch in order, across all epochs.
  std::vector<double> batch_losses;
  std::size_t batches_per_epoch = 0;
};

/// Mean contrastive loss over `pairs` in fixed order and batch_size chunks,
/// with deterministic routing: clean Top-1 for noisy training, seeded
/// fixed experts for random routing.
double validation_loss(const MoEBlock& block, const std::vector<TrainPair>& pairs,
                       const TrainingConfig& config);

/// Trains `initial` on `train_pairs`, evaluating `val_pairs` after every
/// epoch (and before the first), returning the lowest-validation-loss
/// checkpoint. Deterministic given config.seed.
TrainResult train(const TrainingConfig& config, const std::vector<TrainPair>& train_pairs,
                  const std::vector<TrainPair>& val_pairs, const MoEBlock& initial);

/// Convenience overload: splits `pairs` with config.val_fraction first.
TrainResult train(const TrainingConfig& config, const std::vector<TrainPair>& pairs,
                  const MoEBlock& initial);

/// Writes "epoch\ttrain_loss\tval_loss" rows.
void write_loss_log(const std::string& path, const std::vector<EpochLog>& log);

}  // namespace sbmoe
