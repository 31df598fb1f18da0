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

#include <algorithm>
#include <cmath>
#include <string>

#include "sbmoe/training.hpp"

namespace sbmoe::testing {

struct GradientCheck {
  double worst_relative_error = 0.0;
  std::size_t parameters = 0;
  std::size_t nonzero = 0;
  std::string worst_location;
};

/// Relative error with an absolute floor so that gradients that are zero
/// up to rounding do not dominate.
inline double relative_error(double analytic, double numeric) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), 1e-7});
  return std::abs(analytic - numeric) / scale;
}

/// Compares every analytic parameter gradient of one batch against central
/// finite differences, with routing (noise draws) held fixed.
inline GradientCheck check_batch_gradient(BasicBlock<double> block, const Matrix<double>& queries,
                                          const Matrix<double>& docs,
                                          const std::vector<RowRoute>& q_routes,
                                          const std::vector<RowRoute>& d_routes, double temperature,
                                          bool scale_by_gate, double h = 1e-5) {
  const auto analytic = batch_loss_and_gradient(block, queries, docs, std::span<const RowRoute>(q_routes),
                                                std::span<const RowRoute>(d_routes), temperature,
                                                scale_by_gate);
  auto params = block.parameters();
  const auto grads = analytic.grad.parameters();
  GradientCheck out;
  for (std::size_t t = 0; t < params.size(); ++t) {
    for (std::size_t i = 0; i < params[t].size(); ++i) {
      const double saved = params[t][i];
      params[t][i] = saved + h;
      const double up = batch_loss_and_gradient(block, queries, docs, std::span<const RowRoute>(q_routes),
                                                std::span<const RowRoute>(d_routes), temperature,
                                                scale_by_gate, false)
                            .loss;
      params[t][i] = saved - h;
      const double down = batch_loss_and_gradient(block, queries, docs, std::span<const RowRoute>(q_routes),
                                                  std::span<const RowRoute>(d_routes), temperature,
                                                  scale_by_gate, false)
                              .loss;
      params[t][i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double err = relative_error(grads[t][i], numeric);
      ++out.parameters;
      if (grads[t][i] != 0.0) ++out.nonzero;
      if (err > out.worst_relative_error) {
        out.worst_relative_error = err;
        out.worst_location = "tensor " + std::to_string(t) + " index " + std::to_string(i);
      }
    }
  }
  return out;
}

struct OracleCase {
  std::size_t dim = 4;
  std::size_t experts = 2;
  std::size_t batch = 4;
  std::uint64_t seed = 0;
};

/// The seeded configurations of the full-pipeline gradient oracle.
inline std::vector<OracleCase> oracle_cases() {
  std::vector<OracleCase> cases;
  SeededRng rng(20240);
  for (std::uint64_t i = 0; i < 20; ++i) {
    OracleCase c;
    c.dim = (i % 2 == 0) ? 4 : 8;
    c.experts = (i / 2 % 2 == 0) ? 2 : 4;
    c.batch = 1 + rng.uniform_index(8);
    c.seed = 1000 + i;
    cases.push_back(c);
  }
  return cases;
}

/// Random block, random batch and drawn noise for one oracle case.
inline GradientCheck run_oracle_case(const OracleCase& c, double temperature = 1.0) {
  const auto block = init_block_as<double>(c.dim, c.experts, c.seed, InitScheme::kRandom);
  SeededRng rng(mix_seed(c.seed, 1));
  Matrix<double> q(c.batch, c.dim), d(c.batch, c.dim);
  for (auto& v : q.data) v = rng.normal();
  for (auto& v : d.data) v = rng.normal();
  std::vector<RowRoute> qr(c.batch), dr(c.batch);
  for (auto& r : qr) r.noise = gaussian(rng, c.experts);
  for (auto& r : dr) r.noise = gaussian(rng, c.experts);
  return check_batch_gradient(block, q, d, qr, dr, temperature, true);
}

}  // namespace sbmoe::testing
