#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <spdlog/spdlog.h>

#include "phenocnn/corpus.hpp"
#include "phenocnn/errors.hpp"

namespace phenocnn {

struct ConceptEntry {
  std::string concept_id;
  TokenSequence phrase;
  std::set<std::string> phenotypes;

  bool operator==(const ConceptEntry&) const = default;
};

/// Phrase -> concept map. Phrases are stored tokenized with `tokenize`.
class ConceptDictionary {
 public:
  ConceptDictionary() = default;
  explicit ConceptDictionary(std::vector<ConceptEntry> entries) {
    for (auto& e : entries) add(std::move(e));
  }

  void add(ConceptEntry entry) {
    if (entry.concept_id.empty()) throw DataError("concept entry with empty id");
    if (entry.phrase.empty()) throw DataError("concept " + entry.concept_id + " has an empty phrase");
    const auto key = std::make_pair(entry.concept_id, join_tokens(entry.phrase));
    if (!keys_.insert(key).second) {
      throw DataError("duplicate dictionary entry " + entry.concept_id + " / " + key.second);
    }
    const std::size_t idx = entries_.size();
    by_first_token_[entry.phrase.front()].push_back(idx);
    max_phrase_length_ = std::max(max_phrase_length_, entry.phrase.size());
    entries_.push_back(std::move(entry));
    auto& bucket = by_first_token_[entries_.back().phrase.front()];
    std::stable_sort(bucket.begin(), bucket.end(), [this](std::size_t a, std::size_t b) {
      return entries_[a].phrase.size() > entries_[b].phrase.size();
    });
  }

  const std::vector<ConceptEntry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

  /// Entry indices whose phrase starts with `token`, longest phrase first.
  const std::vector<std::size_t>& candidates(const std::string& token) const {
    static const std::vector<std::size_t> kNone;
    auto it = by_first_token_.find(token);
    return it == by_first_token_.end() ? kNone : it->second;
  }

  std::set<std::string> all_phenotypes() const {
    std::set<std::string> out;
    for (const auto& e : entries_) out.insert(e.phenotypes.begin(), e.phenotypes.end());
    return out;
  }

  bool operator==(const ConceptDictionary& other) const { return entries_ == other.entries_; }

 private:
  std::vector<ConceptEntry> entries_;
  std::unordered_map<std::string, std::vector<std::size_t>> by_first_token_;
  std::set<std::pair<std::string, std::string>> keys_;
  std::size_t max_phrase_length_ = 0;
};

struct TokenSpan {
  std::size_t start = 0;
  std::size_t end = 0;  // exclusive

  bool operator==(const TokenSpan&) const = default;
};

struct ConceptMention {
  std::string concept_id;
  TokenSpan span;
  bool negated = false;

  bool operator==(const ConceptMention&) const = default;
};

/// (concept_id, negated) -> count.
using ConceptCountVector = std::map<std::pair<std::string, bool>, int>;

struct NegationRules {
  std::vector<TokenSequence> triggers;
  std::set<std::string> scope_breakers;
  std::size_t window = 5;

  static const NegationRules& defaults() {
    static const NegationRules rules = [] {
      NegationRules r;
      for (const char* t : {"no", "not", "denies", "denied", "without", "negative for", "ruled out", "r/o"}) {
        r.triggers.push_back(tokenize(t));
      }
      r.scope_breakers = {".", ",", "but", "however"};
      return r;
    }();
    return rules;
  }
};

/// True iff a trigger lies entirely within the `window` tokens before
/// span.start with no scope-breaking token between its end and the span.
inline bool detect_negation(std::span<const std::string> tokens, TokenSpan span,
                            const NegationRules& rules = NegationRules::defaults()) {
  if (span.start >= span.end || span.end > tokens.size()) throw std::invalid_argument("detect_negation: invalid span");
  const std::size_t lo = span.start > rules.window ? span.start - rules.window : 0;
  // Scan right to left so the first scope breaker ends the search.
  for (std::size_t end = span.start; end > lo; --end) {
    // `end` is one past the last trigger token; tokens[end..span.start) must be breaker-free.
    if (end < span.start && rules.scope_breakers.contains(tokens[end])) break;
    for (const auto& trig : rules.triggers) {
      if (trig.size() > end - lo) continue;
      const std::size_t begin = end - trig.size();
      if (std::equal(trig.begin(), trig.end(), tokens.begin() + static_cast<std::ptrdiff_t>(begin))) return true;
    }
  }
  return false;
}

/// Left-to-right scan; at each position the longest phrase wins and the scan
/// resumes after it, so mentions never overlap. Every concept id sharing the
/// winning phrase gets a mention.
inline std::vector<ConceptMention> match_concepts(std::span<const std::string> tokens, const ConceptDictionary& dict,
                                                  const NegationRules& rules = NegationRules::defaults()) {
  std::vector<ConceptMention> mentions;
  std::size_t i = 0;
  while (i < tokens.size()) {
    std::size_t matched_len = 0;
    for (std::size_t idx : dict.candidates(tokens[i])) {
      const auto& phrase = dict.entries()[idx].phrase;
      if (matched_len && phrase.size() < matched_len) break;
      if (i + phrase.size() > tokens.size()) continue;
      if (!std::equal(phrase.begin(), phrase.end(), tokens.begin() + static_cast<std::ptrdiff_t>(i))) continue;
      matched_len = phrase.size();
      const TokenSpan span{i, i + phrase.size()};
      mentions.push_back({dict.entries()[idx].concept_id, span, detect_negation(tokens, span, rules)});
    }
    i += matched_len ? matched_len : 1;
  }
  return mentions;
}

inline ConceptCountVector count_concepts(std::span<const ConceptMention> mentions) {
  ConceptCountVector counts;
  for (const auto& m : mentions) ++counts[{m.concept_id, m.negated}];
  return counts;
}

/// Entries tagged with `phenotype`.
inline ConceptDictionary filter_dictionary(const ConceptDictionary& dict, const std::string& phenotype) {
  if (phenotype.empty()) throw std::invalid_argument("filter_dictionary: empty phenotype");
  ConceptDictionary out;
  for (const auto& e : dict.entries()) {
    if (e.phenotypes.contains(phenotype)) out.add(e);
  }
  if (out.empty()) spdlog::warn("filter_dictionary: no entries tagged '{}'", phenotype);
  return out;
}

// ---------------------------------------------------------------------------
// Dictionary file: concept_id <TAB> phrase <TAB> comma-separated tags.

inline ConceptDictionary parse_dictionary(std::istream& in, const std::string& source = "<stream>") {
  ConceptDictionary dict;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.front() == '#') continue;
    const std::string where = source + ":" + std::to_string(line_no);
    std::vector<std::string> cols;
    std::size_t pos = 0;
    while (true) {
      const auto tab = line.find('\t', pos);
      cols.push_back(line.substr(pos, tab == std::string::npos ? std::string::npos : tab - pos));
      if (tab == std::string::npos) break;
      pos = tab + 1;
    }
    if (cols.size() < 2 || cols.size() > 3) throw DataError(where + ": expected 2 or 3 tab-separated columns");
    ConceptEntry e;
    e.concept_id = cols[0];
    e.phrase = tokenize(cols[1]);
    if (cols.size() == 3) {
      std::stringstream tags(cols[2]);
      std::string tag;
      while (std::getline(tags, tag, ',')) {
        tag.erase(0, tag.find_first_not_of(' '));
        tag.erase(tag.find_last_not_of(' ') + 1);
        if (!tag.empty()) e.phenotypes.insert(tag);
      }
    }
    try {
      dict.add(std::move(e));
    } catch (const DataError& err) {
      throw DataError(where + ": " + err.what());
    }
  }
  return dict;
}

inline ConceptDictionary read_dictionary(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open dictionary " + path.string());
  return parse_dictionary(in, path.string());
}

inline void write_dictionary(std::ostream& out, const ConceptDictionary& dict) {
  for (const auto& e : dict.entries()) {
    out << e.concept_id << '\t' << join_tokens(e.phrase) << '\t';
    bool first = true;
    for (const auto& p : e.phenotypes) {
      if (!first) out << ',';
      out << p;
      first = false;
    }
    out << '\n';
  }
}

inline void write_dictionary(const std::filesystem::path& path, const ConceptDictionary& dict) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write dictionary " + path.string());
  write_dictionary(out, dict);
}

}  // namespace phenocnn
