#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "convsearch/error.hpp"
#include "convsearch/retrieval.hpp"
#include "convsearch/text.hpp"

namespace convsearch {

// Stable error codes for transcript parsing.
namespace protocol_codes {
inline constexpr std::string_view kUnclosedTag = "UNCLOSED_TAG";
inline constexpr std::string_view kUnknownTag = "UNKNOWN_TAG";
inline constexpr std::string_view kEmptySearch = "EMPTY_SEARCH";
inline constexpr std::string_view kMissingTerminal = "MISSING_TERMINAL";
inline constexpr std::string_view kStepAfterTerminal = "STEP_AFTER_TERMINAL";
inline constexpr std::string_view kInterleavingViolation = "INTERLEAVING_VIOLATION";
}  // namespace protocol_codes

enum class StepKind { Think, Search, Information, Answer, Clarify, NoAnswer };

// Terminal reactions. The enumerator order is the serialization order.
enum class ActionKind { Answer = 0, Clarify = 1, NoAnswer = 2 };

inline constexpr std::array<ActionKind, 3> kAllActions = {ActionKind::Answer, ActionKind::Clarify,
                                                          ActionKind::NoAnswer};

inline bool is_terminal(StepKind k) {
  return k == StepKind::Answer || k == StepKind::Clarify || k == StepKind::NoAnswer;
}

inline std::optional<ActionKind> action_of(StepKind k) {
  switch (k) {
    case StepKind::Answer: return ActionKind::Answer;
    case StepKind::Clarify: return ActionKind::Clarify;
    case StepKind::NoAnswer: return ActionKind::NoAnswer;
    default: return std::nullopt;
  }
}

inline std::string_view tag_name(StepKind k) {
  switch (k) {
    case StepKind::Think: return "think";
    case StepKind::Search: return "search";
    case StepKind::Information: return "information";
    case StepKind::Answer: return "answer";
    case StepKind::Clarify: return "clarify";
    case StepKind::NoAnswer: return "noanswer";
  }
  return "";
}

inline std::string_view to_string(ActionKind a) {
  switch (a) {
    case ActionKind::Answer: return "answer";
    case ActionKind::Clarify: return "clarify";
    case ActionKind::NoAnswer: return "noanswer";
  }
  return "";
}

// Accepts "answer", "clarify", "noanswer" and the spellings "no_answer" / "no answer".
inline std::optional<ActionKind> parse_action(std::string_view s) {
  std::string lowered;
  for (const char c : s) {
    if (c == '_' || c == '-' || c == ' ') continue;
    lowered.push_back(static_cast<char>(c >= 'A' && c <= 'Z' ? c + 32 : c));
  }
  if (lowered == "answer") return ActionKind::Answer;
  if (lowered == "clarify" || lowered == "clarification") return ActionKind::Clarify;
  if (lowered == "noanswer") return ActionKind::NoAnswer;
  return std::nullopt;
}

struct TrajectoryStep {
  StepKind kind = StepKind::Think;
  std::string text;

  friend bool operator==(const TrajectoryStep&, const TrajectoryStep&) = default;
};

struct Trajectory {
  std::vector<TrajectoryStep> steps;
  std::size_t token_count = 0;

  const TrajectoryStep* terminal() const {
    if (steps.empty() || !is_terminal(steps.back().kind)) return nullptr;
    return &steps.back();
  }

  std::size_t count(StepKind k) const {
    return static_cast<std::size_t>(
        std::count_if(steps.begin(), steps.end(), [k](const auto& s) { return s.kind == k; }));
  }

  friend bool operator==(const Trajectory&, const Trajectory&) = default;
};

// Answer payloads that count as a refusal. Matching is a substring test on
// normalized text so punctuation and casing do not matter.
struct RefusalPatterns {
  std::vector<std::string> patterns = {
      "i did not find any useful information",
      "i cannot find any information",
      "i could not find any information",
  };

  bool matches(std::string_view payload) const {
    const std::string norm = text::normalize_text(payload);
    if (norm.empty()) return false;
    return std::any_of(patterns.begin(), patterns.end(), [&](const std::string& p) {
      const std::string np = text::normalize_text(p);
      return !np.empty() && norm.find(np) != std::string::npos;
    });
  }
};

namespace detail {

struct RawTag {
  std::string name;
  bool closing = false;
  std::size_t begin = 0;  // position of '<'
  std::size_t end = 0;    // one past '>'
};

inline bool is_tag_char(char c, bool first) {
  const bool alpha = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c == '_';
  return first ? alpha : (alpha || (c >= '0' && c <= '9') || c == '-');
}

// Recognizes "<name>" or "</name>" exactly at `pos`.
inline std::optional<RawTag> tag_at(std::string_view s, std::size_t pos) {
  if (pos >= s.size() || s[pos] != '<') return std::nullopt;
  RawTag tag;
  tag.begin = pos;
  std::size_t i = pos + 1;
  if (i < s.size() && s[i] == '/') {
    tag.closing = true;
    ++i;
  }
  const std::size_t name_start = i;
  while (i < s.size() && is_tag_char(s[i], i == name_start)) ++i;
  if (i == name_start || i >= s.size() || s[i] != '>') return std::nullopt;
  tag.name = std::string(s.substr(name_start, i - name_start));
  for (auto& c : tag.name) c = static_cast<char>(c >= 'A' && c <= 'Z' ? c + 32 : c);
  tag.end = i + 1;
  return tag;
}

inline std::optional<StepKind> kind_for_tag(std::string_view name, bool allow_information) {
  if (name == "think") return StepKind::Think;
  if (name == "search") return StepKind::Search;
  if (name == "answer") return StepKind::Answer;
  if (name == "clarify") return StepKind::Clarify;
  if (name == "noanswer") return StepKind::NoAnswer;
  if (name == "information" && allow_information) return StepKind::Information;
  return std::nullopt;
}

inline std::string lowercase_ascii(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(c >= 'A' && c <= 'Z' ? c + 32 : c);
  return out;
}

// Scanner over a transcript. Free text between steps is skipped; a tag at a
// step boundary must be a known opening tag whose payload runs to the first
// matching closing tag (anything inside a payload is literal text).
class StepScanner {
 public:
  StepScanner(std::string_view raw, bool allow_information, const RefusalPatterns& refusals)
      : raw_(raw),
        lowered_(lowercase_ascii(raw)),
        allow_information_(allow_information),
        refusals_(refusals) {}

  // Position after the last consumed step.
  std::size_t position() const { return pos_; }

  // Returns the next step, or nullopt when only free text remains.
  std::optional<TrajectoryStep> next() {
    while (true) {
      const std::size_t lt = raw_.find('<', pos_);
      if (lt == std::string_view::npos) {
        pos_ = raw_.size();
        return std::nullopt;
      }
      const auto tag = tag_at(raw_, lt);
      if (!tag) {
        pos_ = lt + 1;
        continue;
      }
      if (tag->closing) {
        throw ProtocolError(std::string(protocol_codes::kUnknownTag),
                            "unexpected closing tag </" + tag->name + ">");
      }
      const auto kind = kind_for_tag(tag->name, allow_information_);
      if (!kind) {
        throw ProtocolError(std::string(protocol_codes::kUnknownTag),
                            "tag <" + tag->name + "> is not part of the protocol");
      }
      const std::string closing = "</" + tag->name + ">";
      const std::size_t close = lowered_.find(closing, tag->end);
      if (close == std::string::npos) {
        throw ProtocolError(std::string(protocol_codes::kUnclosedTag),
                            "<" + tag->name + "> has no closing tag");
      }
      TrajectoryStep step{*kind, std::string(text::trim(raw_.substr(tag->end, close - tag->end)))};
      pos_ = close + closing.size();
      if (step.kind == StepKind::Search && step.text.empty()) {
        throw ProtocolError(std::string(protocol_codes::kEmptySearch), "search payload is blank");
      }
      if (step.kind == StepKind::Answer && refusals_.matches(step.text)) {
        step.kind = StepKind::NoAnswer;
      }
      return step;
    }
  }

  bool only_whitespace_remains() const { return text::trim(raw_.substr(pos_)).empty(); }

 private:
  std::string_view raw_;
  std::string lowered_;
  std::size_t pos_ = 0;
  bool allow_information_;
  const RefusalPatterns& refusals_;
};

// Protocol-looking tags inside free text are neutralized ("<answer>" ->
// "&lt;answer>") so embedded text can never open or close a step.
inline std::string escape_tags(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '<' && tag_at(s, i)) {
      out += "&lt;";
    } else {
      out.push_back(s[i]);
    }
  }
  return out;
}

inline const RefusalPatterns& default_refusals() {
  static const RefusalPatterns patterns;
  return patterns;
}

}  // namespace detail

// Parses the first complete tagged step of one policy emission. Policies may
// not emit <information>; that tag is reported as UNKNOWN_TAG.
inline TrajectoryStep parse_step(std::string_view raw,
                                 const RefusalPatterns& refusals = detail::default_refusals()) {
  detail::StepScanner scanner(raw, /*allow_information=*/false, refusals);
  if (auto step = scanner.next()) return *step;
  throw ProtocolError(std::string(protocol_codes::kMissingTerminal), "no tagged step found");
}

// Parses every step of one policy emission (e.g. "<think>..</think><search>..</search>").
inline std::vector<TrajectoryStep> parse_segment(
    std::string_view raw, const RefusalPatterns& refusals = detail::default_refusals()) {
  detail::StepScanner scanner(raw, /*allow_information=*/false, refusals);
  std::vector<TrajectoryStep> steps;
  while (auto step = scanner.next()) steps.push_back(std::move(*step));
  return steps;
}

// Checks the Trajectory invariants on an already-split step list; throws the
// first violated rule's code.
inline void validate_steps(const std::vector<TrajectoryStep>& steps) {
  using namespace protocol_codes;
  for (std::size_t i = 0; i < steps.size(); ++i) {
    const auto& step = steps[i];
    if (i > 0 && is_terminal(steps[i - 1].kind)) {
      throw ProtocolError(std::string(kStepAfterTerminal), "step follows the terminal step");
    }
    if (step.kind == StepKind::Information &&
        (i == 0 || steps[i - 1].kind != StepKind::Search)) {
      throw ProtocolError(std::string(kInterleavingViolation),
                          "information block is not preceded by a search");
    }
    if (step.kind == StepKind::Search && i + 1 < steps.size() &&
        steps[i + 1].kind != StepKind::Information) {
      throw ProtocolError(std::string(kInterleavingViolation),
                          "search is not followed by an information block");
    }
    if (step.kind == StepKind::Search && step.text.empty()) {
      throw ProtocolError(std::string(kEmptySearch), "search payload is blank");
    }
  }
  if (steps.empty() || !is_terminal(steps.back().kind)) {
    throw ProtocolError(std::string(kMissingTerminal), "transcript has no terminal step");
  }
}

// Parses a full rollout transcript (policy steps plus injected information
// blocks). token_count is the whitespace token count of policy-authored payloads.
inline Trajectory parse_trajectory(std::string_view raw,
                                   const RefusalPatterns& refusals = detail::default_refusals()) {
  detail::StepScanner scanner(raw, /*allow_information=*/true, refusals);
  Trajectory t;
  while (auto step = scanner.next()) {
    if (!t.steps.empty() && is_terminal(t.steps.back().kind)) {
      throw ProtocolError(std::string(protocol_codes::kStepAfterTerminal),
                          "step follows the terminal step");
    }
    t.steps.push_back(std::move(*step));
    if (is_terminal(t.steps.back().kind) && !scanner.only_whitespace_remains()) {
      // Validate what precedes the terminal first so the error reported is
      // the earliest violation.
      validate_steps(t.steps);
      throw ProtocolError(std::string(protocol_codes::kStepAfterTerminal),
                          "text follows the terminal step");
    }
  }
  validate_steps(t.steps);
  for (const auto& s : t.steps) {
    if (s.kind != StepKind::Information) t.token_count += text::count_whitespace_tokens(s.text);
  }
  return t;
}

inline std::string render_step(const TrajectoryStep& step) {
  const auto tag = tag_name(step.kind);
  std::string out;
  out.reserve(step.text.size() + 2 * tag.size() + 5);
  out.append("<").append(tag).append(">").append(step.text).append("</").append(tag).append(">");
  return out;
}

// Canonical transcript rendering: one tagged step per line.
inline std::string serialize(const Trajectory& t) {
  std::string out;
  for (std::size_t i = 0; i < t.steps.size(); ++i) {
    if (i > 0) out.push_back('\n');
    out += render_step(t.steps[i]);
  }
  return out;
}

// One "[rank] title: text" line per passage, each text cut to its first
// `tokens_per_passage` whitespace tokens.
template <typename Corpus>
std::string render_passages(const RankedList& passages, const Corpus& corpus,
                            std::size_t tokens_per_passage) {
  std::string body;
  for (const auto& entry : passages.entries) {
    const Passage* p = corpus.find(entry.passage_id);
    if (p == nullptr) continue;
    std::string passage_text;
    const auto tokens = text::split_whitespace(p->text);
    if (tokens.size() <= tokens_per_passage) {
      passage_text = std::string(text::trim(p->text));
    } else {
      for (std::size_t i = 0; i < tokens_per_passage; ++i) {
        if (i > 0) passage_text.push_back(' ');
        passage_text += tokens[i];
      }
    }
    body += "[" + std::to_string(entry.rank) + "] " + detail::escape_tags(p->title) + ": " +
            detail::escape_tags(passage_text) + "\n";
  }
  return body;
}

template <typename Corpus>
std::string render_information(const RankedList& passages, const Corpus& corpus,
                               std::size_t tokens_per_passage) {
  return "<information>\n" + render_passages(passages, corpus, tokens_per_passage) + "</information>";
}

}  // namespace convsearch
