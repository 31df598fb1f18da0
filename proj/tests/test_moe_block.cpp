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

#include <cmath>
#include <cstring>

#include "sbmoe/moe_block.hpp"
#include "test_util.hpp"

namespace sbmoe {
namespace {

using testing::random_embeddings;

bool bitwise_equal(std::span<const float> a, std::span<const float> b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

/// Block with random weights everywhere, including the up-projection.
MoEBlock random_block(std::size_t d, std::size_t n, std::uint64_t seed) {
  return init_block(d, n, seed, InitScheme::kRandom);
}

TEST(Expert, ZeroUpProjectionIsBitwiseIdentity) {
  auto block = random_block(6, 1, 5);
  auto& e = block.experts[0];
  std::fill(e.w_up.data.begin(), e.w_up.data.end(), 0.0f);
  std::fill(e.b_up.begin(), e.b_up.end(), 0.0f);
  const std::vector<float> x{1.5f, -0.0f, 3e-39f, -7.25f, 1e30f, 0.1f};
  const auto y = expert_forward(std::span<const float>(x), e, block.activation);
  EXPECT_TRUE(bitwise_equal(y, x));
}

TEST(Expert, HandCase) {
  ExpertParams<float> e;
  e.w_down = Matrix<float>(1, 2);
  e.w_down.data = {1, 0};
  e.b_down = {0};
  e.w_up = Matrix<float>(2, 1);
  e.w_up.data = {1, 0};
  e.b_up = {0, 0};
  const std::vector<float> x{2, 5};
  std::vector<float> pre;
  const auto delta = expert_delta(std::span<const float>(x), e, Activation::kRelu, &pre);
  EXPECT_EQ(pre, (std::vector<float>{2}));
  EXPECT_EQ(expert_forward(std::span<const float>(x), e, Activation::kRelu), (std::vector<float>{4, 5}));
  EXPECT_EQ(delta, (std::vector<float>{2, 0}));
}

TEST(Expert, WrongLengthThrows) {
  const auto block = random_block(4, 2, 1);
  const std::vector<float> x(3, 1.0f);
  EXPECT_THROW(expert_forward(std::span<const float>(x), block.experts[0], block.activation), DimensionError);
  EXPECT_THROW(gate_logits(std::span<const float>(x), block.gate), DimensionError);
  EXPECT_THROW(pool_top1(std::span<const float>(x), block), DimensionError);
  EXPECT_THROW(pool_all(std::span<const float>(x), block), DimensionError);
}

TEST(Expert, HiddenWidthRoundsUp) {
  EXPECT_EQ(hidden_width(32), 16u);
  EXPECT_EQ(hidden_width(7), 4u);
  const auto block = init_block(7, 2, 1);
  EXPECT_EQ(block.experts[0].w_down.rows, 4u);
  EXPECT_EQ(block.gate.w_hidden.rows, 4u);
}

TEST(Activation, GeluDerivativeMatchesFiniteDifference) {
  for (double x : {-3.0, -1.0, -0.2, 0.0, 0.4, 2.5}) {
    const double h = 1e-6;
    const double fd = (gelu(x + h) - gelu(x - h)) / (2 * h);
    EXPECT_NEAR(gelu_derivative(x), fd, 1e-8);
  }
  EXPECT_NEAR(gelu(1.0), 0.8413447460685429, 1e-12);
}

TEST(Gate, ZeroParametersGiveZeroLogits) {
  const auto block = MoEBlock::zeros(5, 3);
  const std::vector<float> x{1, 2, 3, 4, 5};
  EXPECT_EQ(gate_logits(std::span<const float>(x), block.gate), (std::vector<float>(3, 0.0f)));
}

TEST(Gate, CraftedLogitsComposeWithSoftmax) {
  auto block = MoEBlock::zeros(2, 2);
  block.gate.b_out = {static_cast<float>(std::log(2.0)), 0.0f};
  const std::vector<float> x{0.3f, -0.7f};
  const auto logits = gate_logits(std::span<const float>(x), block.gate);
  const auto p = softmax(logits);
  EXPECT_NEAR(p[0], 2.0 / 3.0, 1e-7);
  EXPECT_NEAR(p[1], 1.0 / 3.0, 1e-7);
  EXPECT_EQ(logits, gate_logits(std::span<const float>(x), block.gate));
}

TEST(PoolTop1, SingleExpertEqualsExpertForward) {
  const auto block = random_block(6, 1, 9);
  const auto x = random_embeddings(1, 6, 2).values.data;
  const auto out = pool_top1(std::span<const float>(x), block);
  EXPECT_EQ(out.selected, 0u);
  EXPECT_EQ(out.y, expert_forward(std::span<const float>(x), block.experts[0], block.activation));
}

TEST(PoolTop1, DominantLogitSelectsThatExpert) {
  auto block = random_block(4, 3, 3);
  block.gate.b_out = {0.0f, 0.0f, 1000.0f};
  const std::vector<float> x{0.1f, 0.2f, 0.3f, 0.4f};
  const auto out = pool_top1(std::span<const float>(x), block);
  EXPECT_EQ(out.selected, 2u);
  EXPECT_EQ(out.y, expert_forward(std::span<const float>(x), block.experts[2], block.activation));
}

TEST(PoolTop1, TiedLogitsSelectFirstExpert) {
  auto block = random_block(4, 3, 4);
  std::fill(block.gate.w_out.data.begin(), block.gate.w_out.data.end(), 0.0f);
  block.gate.b_out = {0.5f, 0.5f, 0.5f};
  const std::vector<float> x{1, 2, 3, 4};
  EXPECT_EQ(pool_top1(std::span<const float>(x), block).selected, 0u);
}

TEST(PoolTop1, MatchesArgmaxExpertAndIsShiftInvariant) {
  const auto block = random_block(8, 4, 21);
  const auto xs = random_embeddings(50, 8, 22);
  auto shifted = block;
  for (auto& b : shifted.gate.b_out) b += 3.0f;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const auto x = xs.row(i);
    const auto logits = gate_logits(x, block.gate);
    const auto m = argmax_tiebreak(logits);
    const auto out = pool_top1(x, block);
    EXPECT_EQ(out.selected, m);
    EXPECT_EQ(out.y, expert_forward(x, block.experts[m], block.activation));
    EXPECT_EQ(pool_top1(x, shifted).selected, m);
  }
}

TEST(PoolAll, SingleExpertHasUnitWeight) {
  const auto block = random_block(6, 1, 31);
  const auto x = random_embeddings(1, 6, 32).values.data;
  const auto out = pool_all(std::span<const float>(x), block);
  EXPECT_EQ(out.weights, (std::vector<double>{1.0}));
  EXPECT_EQ(out.y, expert_forward(std::span<const float>(x), block.experts[0], block.activation));
}

TEST(PoolAll, HandCaseWeightedSum) {
  // x = 0 so f_1 = b_up1 = [3,0] and f_2 = b_up2 = [0,3]; weights [2/3, 1/3].
  auto block = MoEBlock::zeros(2, 2);
  block.experts[0].b_up = {3.0f, 0.0f};
  block.experts[1].b_up = {0.0f, 3.0f};
  block.gate.b_out = {static_cast<float>(std::log(2.0)), 0.0f};
  const std::vector<float> x{0.0f, 0.0f};
  const auto out = pool_all(std::span<const float>(x), block);
  EXPECT_NEAR(out.weights[0], 2.0 / 3.0, 1e-7);
  EXPECT_NEAR(out.y[0], 2.0, 1e-6);
  EXPECT_NEAR(out.y[1], 1.0, 1e-6);
}

TEST(PoolAll, WeightsFormProbabilityVector) {
  const auto block = random_block(8, 5, 41);
  const auto xs = random_embeddings(40, 8, 42);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const auto out = pool_all(xs.row(i), block);
    double sum = 0.0;
    for (double w : out.weights) {
      EXPECT_GE(w, 0.0);
      sum += w;
    }
    EXPECT_NEAR(sum, 1.0, 1e-6);
  }
}

TEST(PoolAll, SaturatedGateMatchesTop1) {
  auto block = random_block(6, 3, 51);
  block.gate.b_out = {0.0f, 200.0f, 0.0f};
  const auto xs = random_embeddings(10, 6, 52);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const auto all = pool_all(xs.row(i), block).y;
    const auto top = pool_top1(xs.row(i), block).y;
    for (std::size_t j = 0; j < all.size(); ++j) EXPECT_NEAR(all[j], top[j], 1e-5);
  }
}

// Scaling logits by s drives ALL pooling to TOP-1. The residual gap is
// bounded by (1 - p_m)·max_i |δ_i - δ_m|, with 1 - p_m <= (n-1)·exp(-s·margin).
TEST(PoolAll, ScaledLogitsConvergeToTop1) {
  const float s = 50.0f;
  std::size_t checked_tight = 0;
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    auto block = random_block(6, 3, 100 + seed);
    for (auto& w : block.gate.w_out.data) w *= s;
    for (auto& b : block.gate.b_out) b *= s;
    const auto xs = random_embeddings(20, 6, 200 + seed);
    for (std::size_t i = 0; i < xs.size(); ++i) {
      const auto x = xs.row(i);
      const auto logits = gate_logits(x, block.gate);
      auto sorted = logits;
      std::sort(sorted.begin(), sorted.end(), std::greater<>());
      const double margin = (sorted[0] - sorted[1]) / s;
      if (margin < 0.1) continue;
      const auto all = pool_all(x, block).y;
      const auto top = pool_top1(x, block);
      double spread = 0.0;
      const auto dm = expert_delta(x, block.experts[top.selected], block.activation);
      for (const auto& e : block.experts) {
        const auto di = expert_delta(x, e, block.activation);
        for (std::size_t j = 0; j < di.size(); ++j) spread = std::max(spread, std::abs(double(di[j]) - dm[j]));
      }
      const double bound = 2.0 * std::exp(-s * margin) * spread + 1e-5;
      double gap = 0.0;
      for (std::size_t j = 0; j < all.size(); ++j) gap = std::max(gap, std::abs(double(all[j]) - top.y[j]));
      EXPECT_LE(gap, bound);
      if (margin >= 0.25) {
        EXPECT_LE(gap, 1e-4);
        ++checked_tight;
      }
    }
  }
  EXPECT_GT(checked_tight, 50u);
}

TEST(NoisyTop1, VanishingNoiseMatchesInferenceSelection) {
  auto block = random_block(8, 4, 61);
  block.gate.noise_scale_logits.assign(4, -1000.0f);
  const auto xs = random_embeddings(30, 8, 62);
  SeededRng rng(63);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const auto rec = noisy_top1_train(xs.row(i), block, rng);
    EXPECT_EQ(rec.selected, pool_top1(xs.row(i), block).selected);
  }
}

TEST(NoisyTop1, SingleExpertHasUnitProbability) {
  const auto block = random_block(5, 1, 71);
  const auto x = random_embeddings(1, 5, 72).values.data;
  SeededRng rng(1);
  const auto rec = noisy_top1_train(std::span<const float>(x), block, rng);
  EXPECT_EQ(rec.selected, 0u);
  EXPECT_EQ(rec.p_selected, 1.0);
  EXPECT_EQ(rec.y, expert_forward(std::span<const float>(x), block.experts[0], block.activation));
}

TEST(NoisyTop1, DeterministicAndGateScaled) {
  const auto block = random_block(8, 4, 81);
  const auto x = random_embeddings(1, 8, 82).values.data;
  SeededRng a(5), b(5);
  const auto r1 = noisy_top1_train(std::span<const float>(x), block, a);
  const auto r2 = noisy_top1_train(std::span<const float>(x), block, b);
  EXPECT_EQ(r1.selected, r2.selected);
  EXPECT_EQ(r1.y, r2.y);
  const auto f = expert_forward(std::span<const float>(x), block.experts[r1.selected], block.activation);
  for (std::size_t j = 0; j < f.size(); ++j) {
    EXPECT_FLOAT_EQ(r1.y[j], static_cast<float>(r1.p_selected * f[j]));
  }
  SeededRng c(5);
  const auto unscaled = noisy_top1_train(std::span<const float>(x), block, c, false);
  EXPECT_EQ(unscaled.y, f);
}

TEST(NoisyTop1, NoiseExploresEveryExpert) {
  const auto block = init_block(8, 4, 91);
  const auto x = random_embeddings(1, 8, 92).values.data;
  SeededRng rng(93);
  std::vector<int> counts(4, 0);
  for (int i = 0; i < 2000; ++i) ++counts[noisy_top1_train(std::span<const float>(x), block, rng).selected];
  for (int c : counts) EXPECT_GT(c, 0);
}

TEST(RandomGate, SingleExpertMatchesPoolAll) {
  const auto block = random_block(6, 1, 101);
  const auto x = random_embeddings(1, 6, 102).values.data;
  const auto expected = pool_all(std::span<const float>(x), block).y;
  for (auto mode : {Pooling::kRandomTop1, Pooling::kRandomAll}) {
    SeededRng rng(3);
    EXPECT_EQ(random_gate(std::span<const float>(x), block, mode, rng), expected);
  }
}

TEST(RandomGate, UniformSelectionFrequency) {
  const auto block = random_block(4, 4, 111);
  const std::vector<float> x{1, 2, 3, 4};
  SeededRng rng(112);
  std::vector<int> counts(4, 0);
  for (int i = 0; i < 10000; ++i) {
    RandomGateChoice c;
    random_gate(std::span<const float>(x), block, Pooling::kRandomTop1, rng, &c);
    ++counts[c.selected];
  }
  for (int c : counts) EXPECT_NEAR(c / 10000.0, 0.25, 0.02);
}

TEST(RandomGate, SameSeedSameOutput) {
  const auto block = random_block(6, 3, 121);
  const auto x = random_embeddings(1, 6, 122).values.data;
  for (auto mode : {Pooling::kRandomTop1, Pooling::kRandomAll}) {
    SeededRng a(9), b(9);
    EXPECT_EQ(random_gate(std::span<const float>(x), block, mode, a),
              random_gate(std::span<const float>(x), block, mode, b));
  }
  SeededRng rng(1);
  EXPECT_THROW(random_gate(std::span<const float>(x), block, Pooling::kTop1, rng), std::invalid_argument);
}

TEST(Init, FreshBlockRefinesToInputBitwise) {
  const auto block = init_block(16, 4, 7);
  auto xs = random_embeddings(64, 16, 8);
  xs.values(0, 0) = -0.0f;
  for (auto mode : {Pooling::kTop1, Pooling::kAll}) {
    const auto out = refine_batch(xs, block, mode);
    EXPECT_TRUE(bitwise_equal(out.refined.values.data, xs.values.data));
    EXPECT_EQ(out.refined.ids, xs.ids);
  }
}

TEST(Init, SeedControlsWeights) {
  const auto a = init_block(8, 3, 42);
  const auto b = init_block(8, 3, 42);
  const auto c = init_block(8, 3, 43);
  EXPECT_EQ(a, b);
  EXPECT_NE(a.experts[0].w_down, c.experts[0].w_down);
}

TEST(Init, NearIdentityShape) {
  const auto block = init_block(10, 3, 1);
  for (const auto& e : block.experts) {
    for (float w : e.w_up.data) EXPECT_EQ(w, 0.0f);
    for (float b : e.b_up) EXPECT_EQ(b, 0.0f);
    for (float b : e.b_down) EXPECT_EQ(b, 0.0f);
  }
  for (float s : block.gate.noise_scale_logits) EXPECT_NEAR(softplus(s), 1.0, 1e-6);
  EXPECT_THROW(init_block(1, 3, 1), std::invalid_argument);
  EXPECT_THROW(init_block(4, 0, 1), std::invalid_argument);
}

TEST(RefineBatch, EmptyInput) {
  const auto block = random_block(4, 2, 1);
  EmbeddingMatrix empty({}, Matrix<float>(0, 4));
  const auto out = refine_batch(empty, block, Pooling::kAll);
  EXPECT_EQ(out.refined.size(), 0u);
  EXPECT_TRUE(out.routing.selected.empty());
}

TEST(RefineBatch, RowsMatchSingleCalls) {
  const auto block = random_block(8, 3, 131);
  const auto xs = random_embeddings(16, 8, 132);
  const auto top = refine_batch(xs, block, Pooling::kTop1);
  const auto all = refine_batch(xs, block, Pooling::kAll);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const auto t = pool_top1(xs.row(i), block);
    EXPECT_TRUE(bitwise_equal(top.refined.row(i), t.y));
    EXPECT_EQ(top.routing.selected[i], t.selected);
    const auto a = pool_all(xs.row(i), block);
    EXPECT_TRUE(bitwise_equal(all.refined.row(i), a.y));
    for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(all.routing.weights(i, k), static_cast<float>(a.weights[k]));
  }
  const auto one = refine_batch(EmbeddingMatrix({xs.ids[0]}, Matrix<float>(1, 8, {xs.row(0).begin(), xs.row(0).end()})),
                                block, Pooling::kTop1);
  EXPECT_TRUE(bitwise_equal(one.refined.row(0), top.refined.row(0)));
}

TEST(RefineBatch, ThreadCountDoesNotChangeOutput) {
  const auto block = random_block(8, 4, 141);
  const auto xs = random_embeddings(101, 8, 142);
  for (auto mode : {Pooling::kTop1, Pooling::kAll, Pooling::kRandomTop1, Pooling::kRandomAll}) {
    const auto serial = refine_batch(xs, block, mode, 77, 1);
    const auto parallel = refine_batch(xs, block, mode, 77, 4);
    EXPECT_EQ(serial.refined, parallel.refined);
    EXPECT_EQ(serial.routing, parallel.routing);
  }
}

TEST(RefineBatch, WrongDimensionThrows) {
  const auto block = random_block(8, 2, 1);
  EXPECT_THROW(refine_batch(random_embeddings(3, 7, 1), block, Pooling::kTop1), DimensionError);
}

TEST(Checkpoint, RoundTripIsByteIdentical) {
  testing::TempDir dir("ckpt");
  auto block = init_block(9, 3, 5, InitScheme::kRandom, Activation::kGelu, Pooling::kAll);
  save_checkpoint(dir.file("a.ckpt"), block);
  const auto loaded = load_checkpoint(dir.file("a.ckpt"));
  EXPECT_EQ(loaded, block);
  save_checkpoint(dir.file("b.ckpt"), loaded);
  EXPECT_EQ(testing::read_bytes(dir.file("a.ckpt")), testing::read_bytes(dir.file("b.ckpt")));
  const auto bytes = serialize_block(block);
  EXPECT_EQ(bytes.size(), 24 + 4 * block.parameter_count());
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "SBMO");
}

TEST(Checkpoint, CorruptInputsAreRejected) {
  const auto bytes = serialize_block(init_block(4, 2, 1));
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(deserialize_block(bad_magic), CheckpointError);
  auto bad_version = bytes;
  bad_version[4] = 9;
  EXPECT_THROW(deserialize_block(bad_version), CheckpointError);
  EXPECT_THROW(deserialize_block(std::span<const unsigned char>(bytes).first(bytes.size() - 1)), CheckpointError);
  auto trailing = bytes;
  trailing.push_back(0);
  EXPECT_THROW(deserialize_block(trailing), CheckpointError);
  auto bad_pooling = bytes;
  bad_pooling[20] = 7;
  EXPECT_THROW(deserialize_block(bad_pooling), CheckpointError);
  EXPECT_THROW(load_checkpoint("/nonexistent/dir/x.ckpt"), std::exception);
}

TEST(Checkpoint, FingerprintSeparatesBlocksAndModes) {
  const auto a = init_block(4, 2, 1);
  const auto b = init_block(4, 2, 2);
  EXPECT_EQ(block_fingerprint(a, Pooling::kTop1), block_fingerprint(init_block(4, 2, 1), Pooling::kTop1));
  EXPECT_NE(block_fingerprint(a, Pooling::kTop1), block_fingerprint(b, Pooling::kTop1));
  EXPECT_NE(block_fingerprint(a, Pooling::kTop1), block_fingerprint(a, Pooling::kAll));
  EXPECT_NE(block_fingerprint(a, Pooling::kTop1), identity_fingerprint());
}

TEST(Names, ParseAndPrintRoundTrip) {
  for (auto p : {Pooling::kTop1, Pooling::kAll, Pooling::kRandomTop1, Pooling::kRandomAll}) {
    EXPECT_EQ(parse_pooling(to_string(p)), p);
  }
  for (auto a : {Activation::kRelu, Activation::kGelu}) EXPECT_EQ(parse_activation(to_string(a)), a);
  EXPECT_THROW(parse_pooling("top2"), std::invalid_argument);
  EXPECT_THROW(parse_activation("tanh"), std::invalid_argument);
}

}  // namespace
}  // namespace sbmoe
