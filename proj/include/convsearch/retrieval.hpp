#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <istream>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "convsearch/error.hpp"
#include "convsearch/text.hpp"

namespace convsearch {

struct Passage {
  std::string id;
  std::string title;
  std::string text;

  friend bool operator==(const Passage&, const Passage&) = default;
};

struct RankedEntry {
  std::string passage_id;
  double score = 0.0;
  std::size_t rank = 0;  // 1-based

  friend bool operator==(const RankedEntry&, const RankedEntry&) = default;
};

struct RankedList {
  std::vector<RankedEntry> entries;

  bool empty() const { return entries.empty(); }
  std::size_t size() const { return entries.size(); }

  friend bool operator==(const RankedList&, const RankedList&) = default;
};

struct Bm25Params {
  double k1 = 0.9;
  double b = 0.4;
};

// Lucene-style BM25 idf; strictly positive for every df in [1, N].
inline double bm25_idf(std::size_t doc_count, std::size_t doc_freq) {
  const double n = static_cast<double>(doc_count);
  const double df = static_cast<double>(doc_freq);
  return std::log(1.0 + (n - df + 0.5) / (df + 0.5));
}

// Immutable lexical index over a passage collection. Title and text are
// indexed as a single field.
class Index {
 public:
  static Index build(std::vector<Passage> passages, Bm25Params params = {}) {
    if (passages.empty()) throw RetrievalError("EMPTY_CORPUS", "corpus contains no passages");
    Index idx;
    idx.params_ = params;
    idx.passages_ = std::move(passages);
    idx.doc_lengths_.reserve(idx.passages_.size());
    std::uint64_t hash = text::fnv1a("");
    double total_len = 0.0;
    for (std::size_t d = 0; d < idx.passages_.size(); ++d) {
      const auto& p = idx.passages_[d];
      if (p.id.empty()) throw RetrievalError("INVALID_PASSAGE", "passage without id");
      if (text::trim(p.text).empty()) {
        throw RetrievalError("INVALID_PASSAGE", "passage '" + p.id + "' has empty text");
      }
      if (!idx.by_id_.emplace(p.id, d).second) {
        throw RetrievalError("DUPLICATE_ID", "duplicate passage id '" + p.id + "'");
      }
      hash = text::fnv1a(p.id + '\t' + p.title + '\t' + p.text + '\n', hash);
      const auto tokens = text::index_tokens(p.title + " " + p.text);
      std::unordered_map<std::string, std::uint32_t> tf;
      for (const auto& t : tokens) ++tf[t];
      for (auto& [term, count] : tf) idx.postings_[term].push_back({d, count});
      idx.doc_lengths_.push_back(tokens.size());
      total_len += static_cast<double>(tokens.size());
    }
    idx.avg_doc_length_ = total_len / static_cast<double>(idx.passages_.size());
    idx.fingerprint_ = text::hex64(hash);
    return idx;
  }

  // BM25 top-k; ties broken by passage id ascending. Query terms are summed
  // with multiplicity. Passages sharing no term with the query are not returned.
  RankedList search(std::string_view query, std::size_t k = 3) const {
    if (text::trim(query).empty()) throw RetrievalError("EMPTY_QUERY", "query is blank");
    if (k == 0) throw RetrievalError("INVALID_K", "k must be positive");
    std::vector<double> scores(passages_.size(), 0.0);
    std::vector<char> touched(passages_.size(), 0);
    for (const auto& term : text::index_tokens(query)) {
      const auto it = postings_.find(term);
      if (it == postings_.end()) continue;
      const double idf = bm25_idf(passages_.size(), it->second.size());
      for (const auto& [doc, tf] : it->second) {
        const double f = tf;
        const double norm = 1.0 - params_.b +
                            params_.b * static_cast<double>(doc_lengths_[doc]) / avg_doc_length_;
        scores[doc] += idf * f * (params_.k1 + 1.0) / (f + params_.k1 * norm);
        touched[doc] = 1;
      }
    }
    std::vector<std::size_t> hits;
    for (std::size_t d = 0; d < passages_.size(); ++d) {
      if (touched[d]) hits.push_back(d);
    }
    auto better = [&](std::size_t a, std::size_t b) {
      if (scores[a] != scores[b]) return scores[a] > scores[b];
      return passages_[a].id < passages_[b].id;
    };
    const std::size_t keep = std::min(k, hits.size());
    std::partial_sort(hits.begin(), hits.begin() + static_cast<std::ptrdiff_t>(keep), hits.end(),
                      better);
    RankedList out;
    for (std::size_t r = 0; r < keep; ++r) {
      out.entries.push_back({passages_[hits[r]].id, scores[hits[r]], r + 1});
    }
    return out;
  }

  const Passage* find(std::string_view id) const {
    const auto it = by_id_.find(std::string(id));
    return it == by_id_.end() ? nullptr : &passages_[it->second];
  }

  std::size_t size() const { return passages_.size(); }
  std::size_t vocabulary_size() const { return postings_.size(); }
  double average_doc_length() const { return avg_doc_length_; }
  const Bm25Params& params() const { return params_; }
  const std::vector<Passage>& passages() const { return passages_; }
  // Stable content hash of (id, title, text) in corpus order.
  const std::string& fingerprint() const { return fingerprint_; }

 private:
  struct Posting {
    std::size_t doc;
    std::uint32_t tf;
  };

  Index() = default;

  Bm25Params params_;
  std::vector<Passage> passages_;
  std::unordered_map<std::string, std::size_t> by_id_;
  std::unordered_map<std::string, std::vector<Posting>> postings_;
  std::vector<std::size_t> doc_lengths_;
  double avg_doc_length_ = 0.0;
  std::string fingerprint_;
};

// Corpus file: one JSON object {id, title, text} per line; blank lines skipped.
inline std::vector<Passage> read_corpus_jsonl(std::istream& in) {
  std::vector<Passage> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (text::trim(line).empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw RetrievalError("SCHEMA_ERROR",
                           "corpus line " + std::to_string(line_no) + ": " + e.what());
    }
    if (!j.is_object() || !j.contains("id") || !j.contains("text") || !j["text"].is_string()) {
      throw RetrievalError("SCHEMA_ERROR",
                           "corpus line " + std::to_string(line_no) + ": expected {id, title, text}");
    }
    Passage p;
    p.id = j["id"].is_string() ? j["id"].get<std::string>() : j["id"].dump();
    p.title = j.value("title", std::string{});
    p.text = j["text"].get<std::string>();
    out.push_back(std::move(p));
  }
  return out;
}

// Binary-relevance NDCG@k. Returns 0 when gold_ids is empty.
inline double ndcg_at_k(const RankedList& ranked, const std::set<std::string>& gold_ids,
                        std::size_t k = 3) {
  if (gold_ids.empty() || k == 0) return 0.0;
  double dcg = 0.0;
  const std::size_t depth = std::min(k, ranked.entries.size());
  for (std::size_t i = 0; i < depth; ++i) {
    if (gold_ids.count(ranked.entries[i].passage_id)) {
      dcg += 1.0 / std::log2(static_cast<double>(i) + 2.0);
    }
  }
  double ideal = 0.0;
  const std::size_t ideal_hits = std::min(k, gold_ids.size());
  for (std::size_t i = 0; i < ideal_hits; ++i) ideal += 1.0 / std::log2(static_cast<double>(i) + 2.0);
  return dcg / ideal;
}

}  // namespace convsearch
