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

#include "sbmoe/config.hpp"

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <set>

namespace sbmoe {

namespace {

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T value{};
  auto res = std::from_chars(text.data(), text.data() + text.size(), value);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size()) {
    throw ConfigError("config: bad value '" + text + "' for " + key);
  }
  return value;
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw ConfigError("config: " + key + " must be true or false");
}

using Setter = std::function<void(RunConfig&, const std::string&, const std::string&)>;

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"batch_size", [](RunConfig& c, const auto& k, const auto& v) {
         c.training.batch_size = parse_number<std::size_t>(k, v);
       }},
      {"learning_rate", [](RunConfig& c, const auto& k, const auto& v) {
         c.training.learning_rate = parse_number<double>(k, v);
       }},
      {"epochs", [](RunConfig& c, const auto& k, const auto& v) {
         c.training.epochs = parse_number<std::size_t>(k, v);
       }},
      {"temperature", [](RunConfig& c, const auto& k, const auto& v) {
         c.training.temperature = parse_number<double>(k, v);
       }},
      {"seed", [](RunConfig& c, const auto& k, const auto& v) {
         c.training.seed = parse_number<std::uint64_t>(k, v);
       }},
      {"val_fraction", [](RunConfig& c, const auto& k, const auto& v) {
         c.training.val_fraction = parse_number<double>(k, v);
       }},
      {"beta1", [](RunConfig& c, const auto& k, const auto& v) {
         c.training.beta1 = parse_number<double>(k, v);
       }},
      {"beta2", [](RunConfig& c, const auto& k, const auto& v) {
         c.training.beta2 = parse_number<double>(k, v);
       }},
      {"adam_eps", [](RunConfig& c, const auto& k, const auto& v) {
         c.training.adam_eps = parse_number<double>(k, v);
       }},
      {"routing", [](RunConfig& c, const auto&, const auto& v) {
         try {
           c.training.routing = parse_train_routing(v);
         } catch (const std::invalid_argument& e) {
           throw ConfigError(std::string("config: ") + e.what());
         }
       }},
      {"scale_by_gate", [](RunConfig& c, const auto& k, const auto& v) {
         c.training.scale_by_gate = parse_bool(k, v);
       }},
      {"experts", [](RunConfig& c, const auto& k, const auto& v) {
         c.experts = parse_number<std::size_t>(k, v);
       }},
      {"activation", [](RunConfig& c, const auto&, const auto& v) {
         try {
           c.activation = parse_activation(v);
         } catch (const std::invalid_argument& e) {
           throw ConfigError(std::string("config: ") + e.what());
         }
       }},
  };
  return table;
}

}  // namespace

RunConfig parse_config(std::istream& in, RunConfig base) {
  std::set<std::string> seen;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
    }
    const auto key = trim(line.substr(0, eq));
    const auto value = trim(line.substr(eq + 1));
    const auto it = setters().find(key);
    if (it == setters().end()) {
      throw ConfigError("config line " + std::to_string(line_no) + ": unknown key '" + key + "'");
    }
    if (!seen.insert(key).second) {
      throw ConfigError("config line " + std::to_string(line_no) + ": repeated key '" + key + "'");
    }
    it->second(base, key, value);
  }
  if (base.experts < 1) throw ConfigError("config: experts must be >= 1");
  try {
    base.training.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return base;
}

RunConfig load_config(const std::string& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  return parse_config(in, std::move(base));
}

std::optional<std::string> resolve_config_path(const std::optional<std::string>& flag) {
  if (flag) return flag;
  if (const char* env = std::getenv(kConfigEnvVar); env != nullptr && *env != '\0') {
    return std::string(env);
  }
  return std::nullopt;
}

}  // namespace sbmoe
