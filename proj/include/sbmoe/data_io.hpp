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

#include <cstdint>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>

#include "sbmoe/embedding.hpp"
#include "sbmoe/evaluation.hpp"
#include "sbmoe/retrieval.hpp"

namespace sbmoe {

enum class IoErrorKind {
  kOpen,
  kBadMagic,
  kBadVersion,
  kTruncated,
  kTrailingData,
  kIdCountMismatch,
  kDuplicateId,
  kBadId,
  kParse,
};

class IoError : public std::runtime_error {
 public:
  IoError(IoErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  IoErrorKind kind() const { return kind_; }

 private:
  IoErrorKind kind_;
};

// Embedding files
//
//   "SBME"  magic
//   u32     version (1)
//   u64     count
//   u32     dim
//   f32[]   count*dim values, row-major, little-endian
//
// Identifiers live in the sibling text file "<path>.ids", one per line, in
// row order. Ids must be unique and free of whitespace.

inline constexpr std::uint32_t kEmbeddingVersion = 1;

std::string ids_path_for(const std::string& embedding_path);
void write_embeddings(const std::string& path, const EmbeddingMatrix& m);
EmbeddingMatrix read_embeddings(const std::string& path);

// Run files: "qid Q0 docid rank score tag", rank from 1, score with 6
// significant digits.

void write_run(std::ostream& out, const RunFile& run, const std::string& tag = "sbmoe");
void write_run(const std::string& path, const RunFile& run, const std::string& tag = "sbmoe");
/// Queries keep first-appearance order; entries are ordered by score
/// descending then doc id ascending (the trec_eval convention).
RunFile read_run(std::istream& in);
RunFile read_run(const std::string& path);

// Qrels files: "qid 0 docid grade".

void write_qrels(std::ostream& out, const Qrels& qrels);
void write_qrels(const std::string& path, const Qrels& qrels);
Qrels read_qrels(std::istream& in);
Qrels read_qrels(const std::string& path);

// Refined index files
//
//   "SBMI"  magic
//   u32     version (1)
//   u64     fingerprint
//   u32     pooling id, 0xFFFFFFFF for the identity index
//   u32     expert count (0 for identity)
//   u64     count
//   u32     dim
//   f32[]   refined embeddings, count*dim
//   u32[]   selected expert per row, count
//   f32[]   mixture weights, count*experts (mixture modes only)
//   ids     count × (u32 byte length, bytes)

void write_index(const std::string& path, const RefinedIndex& index);
RefinedIndex read_index(const std::string& path);

}  // namespace sbmoe
