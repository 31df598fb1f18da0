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
#include <string_view>
#include <vector>

#include "sbmoe/embedding.hpp"
#include "sbmoe/numerics.hpp"

namespace sbmoe {

enum class Activation : std::uint32_t { kRelu = 0, kGelu = 1 };

/// Inference-time pooling. The random variants are the random-gate
/// ablation: kRandomTop1 applies a uniformly drawn expert, kRandomAll
/// weights experts by the softmax of standard-normal draws.
enum class Pooling : std::uint32_t { kTop1 = 0, kAll = 1, kRandomTop1 = 2, kRandomAll = 3 };

std::string_view to_string(Activation a);
std::string_view to_string(Pooling p);
Activation parse_activation(std::string_view s);
Pooling parse_pooling(std::string_view s);

inline bool uses_weights(Pooling p) { return p == Pooling::kAll || p == Pooling::kRandomAll; }
inline bool is_random(Pooling p) { return p == Pooling::kRandomTop1 || p == Pooling::kRandomAll; }

/// Bottleneck width for an embedding of dimension d; odd d rounds up.
constexpr std::size_t hidden_width(std::size_t d) { return (d + 1) / 2; }

/// Bottleneck feed-forward expert with residual connection:
/// f(x) = x + w_up·act(w_down·x + b_down) + b_up.
/// w_down is stored hidden×d and w_up d×hidden, both row-major.
template <typename T>
struct ExpertParams {
  Matrix<T> w_down;
  Vector<T> b_down;
  Matrix<T> w_up;
  Vector<T> b_up;

  friend bool operator==(const ExpertParams&, const ExpertParams&) = default;
};

/// Gate: one ReLU hidden layer of width ⌈d/2⌉, then a linear layer with one
/// logit per expert. noise_scale_logits parameterizes the per-expert
/// training noise scale through softplus.
template <typename T>
struct GateParams {
  Matrix<T> w_hidden;
  Vector<T> b_hidden;
  Matrix<T> w_out;
  Vector<T> b_out;
  Vector<T> noise_scale_logits;

  friend bool operator==(const GateParams&, const GateParams&) = default;
};

/// The single MoE block shared by queries and documents.
template <typename T>
struct BasicBlock {
  std::size_t dim = 0;
  Activation activation = Activation::kRelu;
  Pooling pooling = Pooling::kTop1;
  std::vector<ExpertParams<T>> experts;
  GateParams<T> gate;

  std::size_t num_experts() const { return experts.size(); }
  std::size_t hidden() const { return hidden_width(dim); }

  /// All-zero parameters with correct shapes.
  static BasicBlock zeros(std::size_t d, std::size_t n, Activation act = Activation::kRelu,
                          Pooling pool = Pooling::kTop1) {
    if (d < 1 || n < 1) throw std::invalid_argument("block needs d >= 1 and n >= 1");
    const std::size_t h = hidden_width(d);
    BasicBlock b;
    b.dim = d;
    b.activation = act;
    b.pooling = pool;
    b.experts.resize(n);
    for (auto& e : b.experts) {
      e.w_down = Matrix<T>(h, d);
      e.b_down.assign(h, T{0});
      e.w_up = Matrix<T>(d, h);
      e.b_up.assign(d, T{0});
    }
    b.gate.w_hidden = Matrix<T>(h, d);
    b.gate.b_hidden.assign(h, T{0});
    b.gate.w_out = Matrix<T>(n, h);
    b.gate.b_out.assign(n, T{0});
    b.gate.noise_scale_logits.assign(n, T{0});
    return b;
  }

  /// Every parameter tensor in checkpoint order: per expert
  /// (w_down, b_down, w_up, b_up), then gate (w_hidden, b_hidden, w_out,
  /// b_out, noise_scale_logits).
  std::vector<std::span<T>> parameters() {
    std::vector<std::span<T>> out;
    for (auto& e : experts) {
      out.emplace_back(e.w_down.data);
      out.emplace_back(e.b_down);
      out.emplace_back(e.w_up.data);
      out.emplace_back(e.b_up);
    }
    out.emplace_back(gate.w_hidden.data);
    out.emplace_back(gate.b_hidden);
    out.emplace_back(gate.w_out.data);
    out.emplace_back(gate.b_out);
    out.emplace_back(gate.noise_scale_logits);
    return out;
  }

  std::vector<std::span<const T>> parameters() const {
    auto views = const_cast<BasicBlock*>(this)->parameters();
    return {views.begin(), views.end()};
  }

  std::size_t parameter_count() const {
    std::size_t total = 0;
    for (auto v : parameters()) total += v.size();
    return total;
  }

  template <typename U>
  BasicBlock<U> cast() const {
    auto out = BasicBlock<U>::zeros(dim, num_experts(), activation, pooling);
    auto src = parameters();
    auto dst = out.parameters();
    for (std::size_t t = 0; t < src.size(); ++t) {
      for (std::size_t i = 0; i < src[t].size(); ++i) dst[t][i] = static_cast<U>(src[t][i]);
    }
    return out;
  }

  /// Throws if shapes are inconsistent or any parameter is non-finite.
  void validate() const {
    if (experts.empty()) throw std::invalid_argument("block has no experts");
    const std::size_t h = hidden();
    const std::size_t n = num_experts();
    for (const auto& e : experts) {
      if (e.w_down.rows != h || e.w_down.cols != dim || e.b_down.size() != h ||
          e.w_up.rows != dim || e.w_up.cols != h || e.b_up.size() != dim) {
        throw DimensionError("expert parameter shapes do not match block dimension");
      }
    }
    if (gate.w_hidden.rows != h || gate.w_hidden.cols != dim || gate.b_hidden.size() != h ||
        gate.w_out.rows != n || gate.w_out.cols != h || gate.b_out.size() != n ||
        gate.noise_scale_logits.size() != n) {
      throw DimensionError("gate parameter shapes do not match block");
    }
    for (auto v : parameters()) {
      if (!all_finite(v)) throw std::domain_error("block contains non-finite parameters");
    }
  }

  friend bool operator==(const BasicBlock&, const BasicBlock&) = default;
};

using MoEBlock = BasicBlock<float>;

// ---------------------------------------------------------------------------
// Activations

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

inline double gelu_derivative(double x) {
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  return 0.5 * (1.0 + std::erf(x / std::sqrt(2.0))) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
}

inline double activate(Activation a, double x) {
  return a == Activation::kRelu ? (x > 0.0 ? x : 0.0) : gelu(x);
}

inline double activate_derivative(Activation a, double x) {
  return a == Activation::kRelu ? (x > 0.0 ? 1.0 : 0.0) : gelu_derivative(x);
}

namespace detail {

template <typename T>
void require_dim(std::span<const T> x, std::size_t d, const char* what) {
  if (x.size() != d) {
    throw DimensionError(std::string(what) + ": expected length " + std::to_string(d) +
                         ", got " + std::to_string(x.size()));
  }
}

template <typename T>
Vector<T> affine(const Matrix<T>& w, std::span<const T> x, const Vector<T>& b) {
  Vector<T> out(w.rows);
  for (std::size_t r = 0; r < w.rows; ++r) {
    out[r] = static_cast<T>(dot(w.row(r), x) + static_cast<double>(b[r]));
  }
  return out;
}

}  // namespace detail

/// Residual update δ(x) = w_up·act(w_down·x + b_down) + b_up, with the
/// hidden pre-activation optionally returned for backpropagation.
template <typename T>
Vector<T> expert_delta(std::span<const T> x, const ExpertParams<T>& e, Activation act,
                       Vector<T>* pre_activation = nullptr) {
  detail::require_dim(x, e.w_down.cols, "expert_forward");
  Vector<T> pre = detail::affine(e.w_down, x, e.b_down);
  Vector<T> hid(pre.size());
  for (std::size_t i = 0; i < pre.size(); ++i) hid[i] = static_cast<T>(activate(act, pre[i]));
  Vector<T> delta = detail::affine(e.w_up, std::span<const T>(hid), e.b_up);
  if (pre_activation) *pre_activation = std::move(pre);
  return delta;
}

/// x + δ. Components with δ == 0 are copied, so a zero up-projection
/// reproduces x bit for bit (including signed zeros).
template <typename T>
Vector<T> add_residual(std::span<const T> x, const Vector<T>& delta) {
  Vector<T> y(x.begin(), x.end());
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (delta[i] != T{0}) y[i] = x[i] + delta[i];
  }
  return y;
}

template <typename T>
Vector<T> expert_forward(std::span<const T> x, const ExpertParams<T>& e,
                         Activation act = Activation::kRelu) {
  return add_residual(x, expert_delta(x, e, act));
}

/// Gate logits w_out·relu(w_hidden·x + b_hidden) + b_out.
template <typename T>
Vector<T> gate_logits(std::span<const T> x, const GateParams<T>& g,
                      Vector<T>* hidden_pre = nullptr) {
  detail::require_dim(x, g.w_hidden.cols, "gate_logits");
  Vector<T> pre = detail::affine(g.w_hidden, x, g.b_hidden);
  Vector<T> hid(pre.size());
  for (std::size_t i = 0; i < pre.size(); ++i) hid[i] = pre[i] > T{0} ? pre[i] : T{0};
  Vector<T> logits = detail::affine(g.w_out, std::span<const T>(hid), g.b_out);
  if (hidden_pre) *hidden_pre = std::move(pre);
  return logits;
}

template <typename T>
struct Top1Output {
  Vector<T> y;
  std::size_t selected = 0;
};

template <typename T>
struct AllOutput {
  Vector<T> y;
  Vector<double> weights;
};

/// Inference Top-1: y = f_m(x) with m the gate argmax; no gate scaling.
template <typename T>
Top1Output<T> pool_top1(std::span<const T> x, const BasicBlock<T>& block) {
  detail::require_dim(x, block.dim, "pool_top1");
  const auto logits = gate_logits(x, block.gate);
  const std::size_t m = argmax_tiebreak(logits);
  return {expert_forward(x, block.experts[m], block.activation), m};
}

/// Residual mixture x + Σ wᵢ·δᵢ(x), which equals Σ wᵢ·fᵢ(x) for a
/// probability vector w.
template <typename T>
Vector<T> mix_experts(std::span<const T> x, const BasicBlock<T>& block,
                      std::span<const double> weights) {
  std::vector<double> acc(block.dim, 0.0);
  for (std::size_t i = 0; i < block.num_experts(); ++i) {
    if (weights[i] == 0.0) continue;
    const auto delta = expert_delta(x, block.experts[i], block.activation);
    for (std::size_t j = 0; j < block.dim; ++j) acc[j] += weights[i] * static_cast<double>(delta[j]);
  }
  Vector<T> delta(block.dim);
  for (std::size_t j = 0; j < block.dim; ++j) delta[j] = static_cast<T>(acc[j]);
  return add_residual(x, delta);
}

/// Inference ALL pooling: y = Σ softmax(logits)ᵢ·fᵢ(x).
template <typename T>
AllOutput<T> pool_all(std::span<const T> x, const BasicBlock<T>& block) {
  detail::require_dim(x, block.dim, "pool_all");
  auto w = softmax(gate_logits(x, block.gate));
  auto y = mix_experts(x, block, w);
  return {std::move(y), std::move(w)};
}

/// Training-time forward pass with everything backpropagation needs.
template <typename T>
struct TrainForward {
  Vector<T> y;
  std::size_t selected = 0;
  double p_selected = 1.0;
  /// True when y = p_m·f_m(x) and the gate receives gradient.
  bool gate_scaled = false;
  Vector<double> probs;       // clean softmax over experts
  Vector<T> gate_hidden_pre;  // gate hidden pre-activation
  Vector<T> expert_pre;       // selected expert hidden pre-activation
  Vector<T> expert_out;       // f_m(x)
};

/// Noisy Top-1 with explicit noise draws: Hᵢ = logitᵢ + εᵢ·softplus(sᵢ),
/// m = argmax H, p_m from the clean logits. With `scale_by_gate`,
/// y = p_m·f_m(x); otherwise y = f_m(x) and the gate gets no gradient.
template <typename T>
TrainForward<T> forward_noisy_top1(std::span<const T> x, const BasicBlock<T>& block,
                                   std::span<const double> noise, bool scale_by_gate = true) {
  detail::require_dim(x, block.dim, "noisy_top1");
  const std::size_t n = block.num_experts();
  if (noise.size() != n) throw DimensionError("noisy_top1: noise length must equal expert count");
  TrainForward<T> rec;
  const auto logits = gate_logits(x, block.gate, &rec.gate_hidden_pre);
  std::vector<double> noisy(n);
  for (std::size_t i = 0; i < n; ++i) {
    noisy[i] = static_cast<double>(logits[i]) +
               noise[i] * softplus(static_cast<double>(block.gate.noise_scale_logits[i]));
  }
  rec.selected = argmax_tiebreak(noisy);
  rec.probs = softmax(logits);
  rec.p_selected = rec.probs[rec.selected];
  rec.gate_scaled = scale_by_gate;
  const auto delta = expert_delta(x, block.experts[rec.selected], block.activation, &rec.expert_pre);
  rec.expert_out = add_residual(x, delta);
  rec.y = rec.expert_out;
  if (scale_by_gate) {
    for (auto& v : rec.y) v = static_cast<T>(rec.p_selected * static_cast<double>(v));
  }
  return rec;
}

/// Forward through a fixed expert, unscaled; used for random-routing
/// training and for deterministic evaluation of fixed routes.
template <typename T>
TrainForward<T> forward_fixed_expert(std::span<const T> x, const BasicBlock<T>& block,
                                     std::size_t expert) {
  detail::require_dim(x, block.dim, "forward_fixed_expert");
  if (expert >= block.num_experts()) throw std::out_of_range("expert index out of range");
  TrainForward<T> rec;
  rec.selected = expert;
  rec.gate_scaled = false;
  const auto delta = expert_delta(x, block.experts[expert], block.activation, &rec.expert_pre);
  rec.expert_out = add_residual(x, delta);
  rec.y = rec.expert_out;
  return rec;
}

template <typename T>
TrainForward<T> noisy_top1_train(std::span<const T> x, const BasicBlock<T>& block, SeededRng& rng,
                                 bool scale_by_gate = true) {
  const auto noise = gaussian(rng, block.num_experts());
  return forward_noisy_top1(x, block, std::span<const double>(noise), scale_by_gate);
}

struct RandomGateChoice {
  std::size_t selected = 0;
  Vector<double> weights;  // empty for kRandomTop1
};

/// Draws the random-gate routing for one input.
inline RandomGateChoice draw_random_gate(std::size_t n, Pooling mode, SeededRng& rng) {
  RandomGateChoice c;
  if (mode == Pooling::kRandomAll) {
    c.weights = softmax(gaussian(rng, n));
    c.selected = argmax_tiebreak(c.weights);
  } else if (mode == Pooling::kRandomTop1) {
    c.selected = static_cast<std::size_t>(rng.uniform_index(n));
  } else {
    throw std::invalid_argument("draw_random_gate: pooling is not a random-gate mode");
  }
  return c;
}

template <typename T>
Vector<T> random_gate(std::span<const T> x, const BasicBlock<T>& block, Pooling mode,
                      SeededRng& rng, RandomGateChoice* choice = nullptr) {
  detail::require_dim(x, block.dim, "random_gate");
  auto c = draw_random_gate(block.num_experts(), mode, rng);
  Vector<T> y = mode == Pooling::kRandomAll
                    ? mix_experts(x, block, std::span<const double>(c.weights))
                    : expert_forward(x, block.experts[c.selected], block.activation);
  if (choice) *choice = std::move(c);
  return y;
}

enum class InitScheme {
  /// Zero up-projection and biases: the block starts as the identity.
  kNearIdentity,
  /// Also draws w_up and biases; used for gradient checks and tests.
  kRandom,
};

/// Gaussian weights scaled by 1/sqrt(fan_in); noise scale logits set so
/// softplus gives 1.
MoEBlock init_block(std::size_t d, std::size_t n, std::uint64_t seed,
                    InitScheme scheme = InitScheme::kNearIdentity,
                    Activation act = Activation::kRelu, Pooling pooling = Pooling::kTop1);

template <typename T>
BasicBlock<T> init_block_as(std::size_t d, std::size_t n, std::uint64_t seed, InitScheme scheme,
                            Activation act = Activation::kRelu) {
  return init_block(d, n, seed, scheme, act).template cast<T>();
}

/// Per-row routing telemetry.
struct Routing {
  /// Expert index per row: the routed expert for Top-1 modes, the largest
  /// weight for mixture modes.
  std::vector<std::uint32_t> selected;
  /// rows × n mixture weights; empty for Top-1 modes.
  Matrix<float> weights;

  friend bool operator==(const Routing&, const Routing&) = default;
};

struct RefineResult {
  EmbeddingMatrix refined;
  Routing routing;
};

/// Applies `mode` row by row. Random modes draw row r from stream
/// (random_seed, r), so output is independent of thread count.
/// threads == 0 picks hardware concurrency.
RefineResult refine_batch(const EmbeddingMatrix& x, const MoEBlock& block, Pooling mode,
                          std::uint64_t random_seed = 0, unsigned threads = 1);

// ---------------------------------------------------------------------------
// Checkpoints
//
// Layout (all integers and floats little-endian):
//   "SBMO"  magic, 4 bytes
//   u32     format version (1)
//   u32     d
//   u32     n
//   u32     activation id
//   u32     pooling id
//   f32[]   parameters in BasicBlock::parameters() order

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::vector<unsigned char> serialize_block(const MoEBlock& block);
MoEBlock deserialize_block(std::span<const unsigned char> bytes);
void save_checkpoint(const std::string& path, const MoEBlock& block);
MoEBlock load_checkpoint(const std::string& path);

/// Hash of the checkpoint bytes, mixed with the inference mode.
std::uint64_t block_fingerprint(const MoEBlock& block, Pooling mode);
/// Fingerprint used for unrefined (no-block) embeddings.
std::uint64_t identity_fingerprint();

}  // namespace sbmoe
