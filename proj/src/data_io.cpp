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

#include "sbmoe/data_io.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "sbmoe/binary_io.hpp"

namespace sbmoe {

namespace {

constexpr std::string_view kEmbeddingMagic = "SBME";
constexpr std::string_view kIndexMagic = "SBMI";
constexpr std::uint32_t kIndexVersion = 1;
constexpr std::uint32_t kIdentityMode = 0xFFFFFFFFu;

std::vector<unsigned char> slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(IoErrorKind::kOpen, "cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void check_id(const std::string& id) {
  if (id.empty()) throw IoError(IoErrorKind::kBadId, "empty identifier");
  for (char c : id) {
    if (c == ' ' || c == '\t' || c == '\n' || c == '\r') {
      throw IoError(IoErrorKind::kBadId, "identifier contains whitespace: '" + id + "'");
    }
  }
}

void check_unique(const std::vector<std::string>& ids) {
  std::unordered_set<std::string> seen;
  seen.reserve(ids.size());
  for (const auto& id : ids) {
    check_id(id);
    if (!seen.insert(id).second) throw IoError(IoErrorKind::kDuplicateId, "duplicate id '" + id + "'");
  }
}

std::string format_score(double score) {
  char buf[48];
  auto res = std::to_chars(buf, buf + sizeof buf, score, std::chars_format::general, 6);
  return {buf, res.ptr};
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError(IoErrorKind::kOpen, "cannot write " + path);
  return out;
}

std::ifstream open_in(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError(IoErrorKind::kOpen, "cannot open " + path);
  return in;
}

}  // namespace

std::string ids_path_for(const std::string& embedding_path) { return embedding_path + ".ids"; }

void write_embeddings(const std::string& path, const EmbeddingMatrix& m) {
  if (m.ids.size() != m.size()) {
    throw IoError(IoErrorKind::kIdCountMismatch, "embedding ids do not match row count");
  }
  check_unique(m.ids);
  binary::Writer w;
  w.bytes(kEmbeddingMagic);
  w.uint<std::uint32_t>(kEmbeddingVersion);
  w.uint<std::uint64_t>(m.size());
  w.uint<std::uint32_t>(static_cast<std::uint32_t>(m.dim()));
  w.f32s(m.values.data);
  binary::write_file(path, w.buffer());

  auto out = open_out(ids_path_for(path));
  for (const auto& id : m.ids) out << id << '\n';
}

EmbeddingMatrix read_embeddings(const std::string& path) {
  const auto bytes = slurp(path);
  binary::Reader r(bytes);
  EmbeddingMatrix m;
  try {
    if (r.bytes(4) != kEmbeddingMagic) {
      throw IoError(IoErrorKind::kBadMagic, path + ": not an embedding file");
    }
    const auto version = r.uint<std::uint32_t>();
    if (version != kEmbeddingVersion) {
      throw IoError(IoErrorKind::kBadVersion,
                    path + ": unsupported embedding file version " + std::to_string(version));
    }
    const auto count = r.uint<std::uint64_t>();
    const auto dim = r.uint<std::uint32_t>();
    if (dim != 0 && count > r.remaining() / 4 / dim) {
      throw IoError(IoErrorKind::kTruncated, path + ": payload shorter than header declares");
    }
    m.values = Matrix<float>(count, dim);
    r.f32s(m.values.data);
    if (r.remaining() != 0) {
      throw IoError(IoErrorKind::kTrailingData, path + ": bytes after declared payload");
    }
  } catch (const binary::TruncatedError&) {
    throw IoError(IoErrorKind::kTruncated, path + ": file is truncated");
  }

  auto in = open_in(ids_path_for(path));
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    m.ids.push_back(line);
  }
  if (m.ids.size() != m.size()) {
    throw IoError(IoErrorKind::kIdCountMismatch,
                  path + ": header declares " + std::to_string(m.size()) + " rows but id file has " +
                      std::to_string(m.ids.size()));
  }
  check_unique(m.ids);
  if (!all_finite(std::span<const float>(m.values.data))) {
    throw IoError(IoErrorKind::kParse, path + ": embeddings contain non-finite values");
  }
  return m;
}

// ---------------------------------------------------------------------------

void write_run(std::ostream& out, const RunFile& run, const std::string& tag) {
  check_id(tag);
  for (const auto& list : run) {
    std::size_t rank = 1;
    for (const auto& e : list.entries) {
      out << list.query_id << " Q0 " << e.doc_id << ' ' << rank++ << ' ' << format_score(e.score)
          << ' ' << tag << '\n';
    }
  }
}

void write_run(const std::string& path, const RunFile& run, const std::string& tag) {
  auto out = open_out(path);
  write_run(out, run, tag);
}

RunFile read_run(std::istream& in) {
  RunFile run;
  std::unordered_map<std::string, std::size_t> slot;
  std::vector<std::unordered_set<std::string>> seen;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream fields(line);
    std::string qid, q0, docid, rank, score, tag;
    if (!(fields >> qid)) continue;  // blank line
    if (!(fields >> q0 >> docid >> rank >> score >> tag)) {
      throw IoError(IoErrorKind::kParse, "run line " + std::to_string(line_no) + ": expected 6 fields");
    }
    double value = 0.0;
    auto res = std::from_chars(score.data(), score.data() + score.size(), value);
    if (res.ec != std::errc() || res.ptr != score.data() + score.size()) {
      throw IoError(IoErrorKind::kParse, "run line " + std::to_string(line_no) + ": bad score");
    }
    auto [it, inserted] = slot.emplace(qid, run.size());
    if (inserted) {
      run.push_back({qid, {}});
      seen.emplace_back();
    }
    if (!seen[it->second].insert(docid).second) {
      throw IoError(IoErrorKind::kDuplicateId,
                    "run line " + std::to_string(line_no) + ": duplicate document for query");
    }
    run[it->second].entries.push_back({docid, value});
  }
  for (auto& list : run) {
    std::stable_sort(list.entries.begin(), list.entries.end(),
                     [](const ScoredDoc& a, const ScoredDoc& b) {
                       if (a.score != b.score) return a.score > b.score;
                       return a.doc_id < b.doc_id;
                     });
  }
  return run;
}

RunFile read_run(const std::string& path) {
  auto in = open_in(path);
  return read_run(in);
}

void write_qrels(std::ostream& out, const Qrels& qrels) {
  for (const auto& [q, docs] : qrels.judgments) {
    for (const auto& [d, g] : docs) out << q << " 0 " << d << ' ' << g << '\n';
  }
}

void write_qrels(const std::string& path, const Qrels& qrels) {
  auto out = open_out(path);
  write_qrels(out, qrels);
}

Qrels read_qrels(std::istream& in) {
  Qrels qrels;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream fields(line);
    std::string qid, iter, docid, grade_text;
    if (!(fields >> qid)) continue;
    if (!(fields >> iter >> docid >> grade_text)) {
      throw IoError(IoErrorKind::kParse, "qrels line " + std::to_string(line_no) + ": expected 4 fields");
    }
    int grade = 0;
    auto res = std::from_chars(grade_text.data(), grade_text.data() + grade_text.size(), grade);
    if (res.ec != std::errc() || res.ptr != grade_text.data() + grade_text.size() || grade < 0) {
      throw IoError(IoErrorKind::kParse,
                    "qrels line " + std::to_string(line_no) + ": grade must be a nonnegative integer");
    }
    try {
      qrels.add(qid, docid, grade);
    } catch (const std::invalid_argument& e) {
      throw IoError(IoErrorKind::kParse, "qrels line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return qrels;
}

Qrels read_qrels(const std::string& path) {
  auto in = open_in(path);
  return read_qrels(in);
}

// ---------------------------------------------------------------------------

void write_index(const std::string& path, const RefinedIndex& index) {
  const std::size_t count = index.size();
  if (index.routing.selected.size() != count) {
    throw IoError(IoErrorKind::kIdCountMismatch, "index routing does not match row count");
  }
  binary::Writer w;
  w.bytes(kIndexMagic);
  w.uint<std::uint32_t>(kIndexVersion);
  w.uint<std::uint64_t>(index.fingerprint);
  w.uint<std::uint32_t>(index.mode ? static_cast<std::uint32_t>(*index.mode) : kIdentityMode);
  w.uint<std::uint32_t>(static_cast<std::uint32_t>(index.num_experts));
  w.uint<std::uint64_t>(count);
  w.uint<std::uint32_t>(static_cast<std::uint32_t>(index.docs.dim()));
  w.f32s(index.docs.values.data);
  for (auto s : index.routing.selected) w.uint<std::uint32_t>(s);
  if (index.mode && uses_weights(*index.mode)) w.f32s(index.routing.weights.data);
  for (const auto& id : index.docs.ids) {
    w.uint<std::uint32_t>(static_cast<std::uint32_t>(id.size()));
    w.bytes(id);
  }
  binary::write_file(path, w.buffer());
}

RefinedIndex read_index(const std::string& path) {
  const auto bytes = slurp(path);
  binary::Reader r(bytes);
  RefinedIndex index;
  try {
    if (r.bytes(4) != kIndexMagic) throw IoError(IoErrorKind::kBadMagic, path + ": not an index file");
    const auto version = r.uint<std::uint32_t>();
    if (version != kIndexVersion) {
      throw IoError(IoErrorKind::kBadVersion, path + ": unsupported index version");
    }
    index.fingerprint = r.uint<std::uint64_t>();
    const auto mode = r.uint<std::uint32_t>();
    if (mode != kIdentityMode) {
      if (mode > 3) throw IoError(IoErrorKind::kParse, path + ": unknown pooling id");
      index.mode = static_cast<Pooling>(mode);
    }
    index.num_experts = r.uint<std::uint32_t>();
    const auto count = r.uint<std::uint64_t>();
    const auto dim = r.uint<std::uint32_t>();
    if (dim != 0 && count > r.remaining() / 4 / dim) {
      throw IoError(IoErrorKind::kTruncated, path + ": payload shorter than header declares");
    }
    Matrix<float> values(count, dim);
    r.f32s(values.data);
    index.routing.selected.resize(count);
    for (auto& s : index.routing.selected) s = r.uint<std::uint32_t>();
    if (index.mode && uses_weights(*index.mode)) {
      index.routing.weights = Matrix<float>(count, index.num_experts);
      r.f32s(index.routing.weights.data);
    }
    std::vector<std::string> ids(count);
    for (auto& id : ids) id = r.bytes(r.uint<std::uint32_t>());
    if (r.remaining() != 0) throw IoError(IoErrorKind::kTrailingData, path + ": trailing bytes");
    check_unique(ids);
    index.docs = EmbeddingMatrix(std::move(ids), std::move(values));
  } catch (const binary::TruncatedError&) {
    throw IoError(IoErrorKind::kTruncated, path + ": file is truncated");
  }
  return index;
}

}  // namespace sbmoe
