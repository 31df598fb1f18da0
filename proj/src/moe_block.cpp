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

#include "sbmoe/moe_block.hpp"

#include <algorithm>
#include <cmath>
#include <thread>

#include "sbmoe/binary_io.hpp"

namespace sbmoe {

std::string_view to_string(Activation a) { return a == Activation::kRelu ? "relu" : "gelu"; }

std::string_view to_string(Pooling p) {
  switch (p) {
    case Pooling::kTop1:
      return "top1";
    case Pooling::kAll:
      return "all";
    case Pooling::kRandomTop1:
      return "random-top1";
    case Pooling::kRandomAll:
      return "random-all";
  }
  return "unknown";
}

Activation parse_activation(std::string_view s) {
  if (s == "relu") return Activation::kRelu;
  if (s == "gelu") return Activation::kGelu;
  throw std::invalid_argument("unknown activation '" + std::string(s) + "'");
}

Pooling parse_pooling(std::string_view s) {
  for (auto p : {Pooling::kTop1, Pooling::kAll, Pooling::kRandomTop1, Pooling::kRandomAll}) {
    if (to_string(p) == s) return p;
  }
  throw std::invalid_argument("unknown pooling mode '" + std::string(s) + "'");
}

namespace {

void fill_gaussian(std::span<float> v, SeededRng& rng, double scale) {
  for (auto& x : v) x = static_cast<float>(rng.normal() * scale);
}

}  // namespace

MoEBlock init_block(std::size_t d, std::size_t n, std::uint64_t seed, InitScheme scheme,
                    Activation act, Pooling pooling) {
  if (d < 2) throw std::invalid_argument("init_block: dimension must be >= 2");
  if (n < 1) throw std::invalid_argument("init_block: need at least one expert");
  auto block = MoEBlock::zeros(d, n, act, pooling);
  const std::size_t h = block.hidden();
  const double down_scale = 1.0 / std::sqrt(static_cast<double>(d));
  const double up_scale = 1.0 / std::sqrt(static_cast<double>(h));
  const bool random = scheme == InitScheme::kRandom;
  SeededRng rng(seed);

  for (auto& e : block.experts) {
    fill_gaussian(e.w_down.data, rng, down_scale);
    if (random) {
      fill_gaussian(e.b_down, rng, 0.1);
      fill_gaussian(e.w_up.data, rng, up_scale);
      fill_gaussian(e.b_up, rng, 0.1);
    }
  }
  fill_gaussian(block.gate.w_hidden.data, rng, down_scale);
  fill_gaussian(block.gate.w_out.data, rng, up_scale);
  if (random) {
    fill_gaussian(block.gate.b_hidden, rng, 0.1);
    fill_gaussian(block.gate.b_out, rng, 0.1);
  }
  // softplus(log(e - 1)) == 1
  const auto unit_noise = static_cast<float>(std::log(std::exp(1.0) - 1.0));
  std::fill(block.gate.noise_scale_logits.begin(), block.gate.noise_scale_logits.end(), unit_noise);
  return block;
}

namespace {

void refine_rows(const EmbeddingMatrix& x, const MoEBlock& block, Pooling mode,
                 std::uint64_t random_seed, std::size_t begin, std::size_t end,
                 RefineResult& out) {
  const std::size_t n = block.num_experts();
  for (std::size_t r = begin; r < end; ++r) {
    const auto row = x.row(r);
    Vector<float> y;
    switch (mode) {
      case Pooling::kTop1: {
        auto res = pool_top1(row, block);
        y = std::move(res.y);
        out.routing.selected[r] = static_cast<std::uint32_t>(res.selected);
        break;
      }
      case Pooling::kAll: {
        auto res = pool_all(row, block);
        y = std::move(res.y);
        out.routing.selected[r] = static_cast<std::uint32_t>(argmax_tiebreak(res.weights));
        for (std::size_t i = 0; i < n; ++i) {
          out.routing.weights(r, i) = static_cast<float>(res.weights[i]);
        }
        break;
      }
      case Pooling::kRandomTop1:
      case Pooling::kRandomAll: {
        SeededRng rng(mix_seed(random_seed, r));
        RandomGateChoice choice;
        y = random_gate(row, block, mode, rng, &choice);
        out.routing.selected[r] = static_cast<std::uint32_t>(choice.selected);
        for (std::size_t i = 0; i < choice.weights.size(); ++i) {
          out.routing.weights(r, i) = static_cast<float>(choice.weights[i]);
        }
        break;
      }
    }
    std::copy(y.begin(), y.end(), out.refined.values.row(r).begin());
  }
}

}  // namespace

RefineResult refine_batch(const EmbeddingMatrix& x, const MoEBlock& block, Pooling mode,
                          std::uint64_t random_seed, unsigned threads) {
  if (x.size() > 0 && x.dim() != block.dim) {
    throw DimensionError("refine_batch: embeddings have dimension " + std::to_string(x.dim()) +
                         " but block expects " + std::to_string(block.dim));
  }
  RefineResult out;
  out.refined = EmbeddingMatrix(x.ids, Matrix<float>(x.size(), block.dim));
  out.routing.selected.assign(x.size(), 0);
  if (uses_weights(mode)) out.routing.weights = Matrix<float>(x.size(), block.num_experts());

  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  const std::size_t rows = x.size();
  if (threads <= 1 || rows < 2 * threads) {
    refine_rows(x, block, mode, random_seed, 0, rows, out);
    return out;
  }
  std::vector<std::thread> workers;
  const std::size_t chunk = (rows + threads - 1) / threads;
  for (std::size_t begin = 0; begin < rows; begin += chunk) {
    const std::size_t end = std::min(rows, begin + chunk);
    workers.emplace_back([&, begin, end] { refine_rows(x, block, mode, random_seed, begin, end, out); });
  }
  for (auto& w : workers) w.join();
  return out;
}

// ---------------------------------------------------------------------------

namespace {
constexpr std::string_view kCheckpointMagic = "SBMO";
}

std::vector<unsigned char> serialize_block(const MoEBlock& block) {
  block.validate();
  binary::Writer w;
  w.bytes(kCheckpointMagic);
  w.uint<std::uint32_t>(kCheckpointVersion);
  w.uint<std::uint32_t>(static_cast<std::uint32_t>(block.dim));
  w.uint<std::uint32_t>(static_cast<std::uint32_t>(block.num_experts()));
  w.uint<std::uint32_t>(static_cast<std::uint32_t>(block.activation));
  w.uint<std::uint32_t>(static_cast<std::uint32_t>(block.pooling));
  for (auto p : block.parameters()) w.f32s(p);
  return std::move(w.buffer());
}

MoEBlock deserialize_block(std::span<const unsigned char> bytes) {
  binary::Reader r(bytes);
  try {
    if (r.bytes(4) != kCheckpointMagic) throw CheckpointError("not a checkpoint: bad magic");
    const auto version = r.uint<std::uint32_t>();
    if (version != kCheckpointVersion) {
      throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
    }
    const auto d = r.uint<std::uint32_t>();
    const auto n = r.uint<std::uint32_t>();
    const auto act = r.uint<std::uint32_t>();
    const auto pool = r.uint<std::uint32_t>();
    if (d < 1 || n < 1 || d > (1u << 20) || n > (1u << 16)) {
      throw CheckpointError("checkpoint has implausible shape");
    }
    if (act > 1) throw CheckpointError("checkpoint has unknown activation id");
    if (pool > 3) throw CheckpointError("checkpoint has unknown pooling id");
    auto block = MoEBlock::zeros(d, n, static_cast<Activation>(act), static_cast<Pooling>(pool));
    for (auto p : block.parameters()) r.f32s(p);
    if (r.remaining() != 0) throw CheckpointError("trailing bytes after checkpoint parameters");
    block.validate();
    return block;
  } catch (const binary::TruncatedError&) {
    throw CheckpointError("checkpoint is truncated");
  }
}

void save_checkpoint(const std::string& path, const MoEBlock& block) {
  binary::write_file(path, serialize_block(block));
}

MoEBlock load_checkpoint(const std::string& path) {
  return deserialize_block(binary::read_file(path));
}

std::uint64_t block_fingerprint(const MoEBlock& block, Pooling mode) {
  const auto bytes = serialize_block(block);
  std::uint64_t h = fnv1a64(bytes);
  const auto m = static_cast<unsigned char>(mode);
  return fnv1a64(std::span<const unsigned char>(&m, 1), h);
}

std::uint64_t identity_fingerprint() {
  constexpr std::string_view tag = "identity";
  return fnv1a64({reinterpret_cast<const unsigned char*>(tag.data()), tag.size()});
}

}  // namespace sbmoe
