#pragma once

#include <algorithm>
#include <concepts>
#include <cstddef>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "convsearch/error.hpp"
#include "convsearch/retrieval.hpp"
#include "convsearch/text.hpp"

namespace convsearch::metrics {

using text::normalize_text;

enum class AnswerType { Short, Long };

// Bag-of-token F1 over normalized tokens.
inline double token_f1(std::string_view prediction, std::string_view gold) {
  const auto pred = text::normalized_tokens(prediction);
  const auto ref = text::normalized_tokens(gold);
  if (pred.empty() && ref.empty()) return 1.0;
  if (pred.empty() || ref.empty()) return 0.0;
  std::map<std::string, std::size_t> counts;
  for (const auto& t : ref) ++counts[t];
  std::size_t common = 0;
  for (const auto& t : pred) {
    auto it = counts.find(t);
    if (it != counts.end() && it->second > 0) {
      --it->second;
      ++common;
    }
  }
  if (common == 0) return 0.0;
  const double precision = static_cast<double>(common) / static_cast<double>(pred.size());
  const double recall = static_cast<double>(common) / static_cast<double>(ref.size());
  return 2.0 * precision * recall / (precision + recall);
}

inline int exact_match(std::string_view prediction, std::string_view gold) {
  return normalize_text(prediction) == normalize_text(gold) ? 1 : 0;
}

inline int contains_answer(std::string_view passages_text, std::string_view gold) {
  const std::string g = normalize_text(gold);
  if (g.empty()) throw MetricError("EMPTY_GOLD", "gold answer normalizes to empty");
  return normalize_text(passages_text).find(g) != std::string::npos ? 1 : 0;
}

inline AnswerType classify_answer_type(std::string_view gold, std::size_t short_max_tokens = 5) {
  return text::normalized_tokens(gold).size() <= short_max_tokens ? AnswerType::Short
                                                                   : AnswerType::Long;
}

// How retrieved passages are scored against the gold answer.
struct InfoGainOptions {
  std::size_t short_max_tokens = 5;
  // Long answers: F1 against the concatenated top-k texts, or the best
  // single passage when true.
  bool long_per_passage_max = false;
  // Short answers: max over calls, or substring test over the union of all
  // calls' passages when true.
  bool short_cumulative_union = false;
};

// Anything exposing `const Passage* find(std::string_view) const`.
template <typename Corpus>
concept PassageLookup = requires(const Corpus& c, std::string_view id) {
  { c.find(id) } -> std::convertible_to<const Passage*>;
};

template <PassageLookup Corpus>
std::vector<std::string> passage_texts(const RankedList& ranked, const Corpus& corpus) {
  std::vector<std::string> out;
  out.reserve(ranked.entries.size());
  for (const auto& e : ranked.entries) {
    if (const Passage* p = corpus.find(e.passage_id)) out.push_back(p->text);
  }
  return out;
}

inline std::string join_texts(const std::vector<std::string>& texts) {
  std::string out;
  for (const auto& t : texts) {
    if (!out.empty()) out.push_back(' ');
    out += t;
  }
  return out;
}

// Information overlap between the passages retrieved by a turn's search calls
// and the gold answer. This is the single implementation behind both the
// information-gain reward and the InfoGain evaluation metric.
template <PassageLookup Corpus>
double info_gain(const std::vector<RankedList>& calls, std::string_view gold, const Corpus& corpus,
                 const InfoGainOptions& opts = {}) {
  if (normalize_text(gold).empty()) throw MetricError("EMPTY_GOLD", "gold answer normalizes to empty");
  if (calls.empty()) return 0.0;
  const AnswerType type = classify_answer_type(gold, opts.short_max_tokens);
  double best = 0.0;
  if (type == AnswerType::Short && opts.short_cumulative_union) {
    std::vector<std::string> all;
    for (const auto& call : calls) {
      auto texts = passage_texts(call, corpus);
      all.insert(all.end(), texts.begin(), texts.end());
    }
    return static_cast<double>(contains_answer(join_texts(all), gold));
  }
  for (const auto& call : calls) {
    const auto texts = passage_texts(call, corpus);
    double score = 0.0;
    if (type == AnswerType::Short) {
      score = contains_answer(join_texts(texts), gold);
    } else if (opts.long_per_passage_max) {
      for (const auto& t : texts) score = std::max(score, token_f1(t, gold));
    } else {
      score = token_f1(join_texts(texts), gold);
    }
    best = std::max(best, score);
  }
  return best;
}

}  // namespace convsearch::metrics
