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
#include <istream>
#include <optional>
#include <string>

#include "sbmoe/moe_block.hpp"
#include "sbmoe/training.hpp"

namespace sbmoe {

/// Environment variable naming a config file; used when no --config flag is given.
inline constexpr const char* kConfigEnvVar = "SBMOE_CONFIG";

/// Settings loadable from a key=value file. Lines are `key = value`;
/// `#` starts a comment; blank lines are ignored. Keys:
///   batch_size, learning_rate, epochs, temperature, seed, val_fraction,
///   beta1, beta2, adam_eps, routing (noisy-top1|random),
///   scale_by_gate (true|false), experts, activation (relu|gelu)
struct RunConfig {
  TrainingConfig training;
  std::size_t experts = 3;
  Activation activation = Activation::kRelu;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Applies every assignment in `in` on top of `base`. Unknown keys,
/// malformed values and repeated keys throw ConfigError.
RunConfig parse_config(std::istream& in, RunConfig base = {});
RunConfig load_config(const std::string& path, RunConfig base = {});

/// Explicit path if given, else the environment variable if set and non-empty.
std::optional<std::string> resolve_config_path(const std::optional<std::string>& flag);

}  // namespace sbmoe
