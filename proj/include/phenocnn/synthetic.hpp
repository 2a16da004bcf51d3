#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <filesystem>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "phenocnn/concepts.hpp"
#include "phenocnn/corpus.hpp"
#include "phenocnn/errors.hpp"
#include "phenocnn/rng.hpp"

namespace phenocnn {

/// A phrase template planted for one phenotype. "*" is a wildcard slot filled
/// with a random background token. `synonyms[i]` lists alternatives for slot i
/// in addition to the canonical token.
struct PlantedPhrase {
  std::string phenotype;
  TokenSequence tokens;
  std::map<std::size_t, TokenSequence> synonyms;
};

struct SyntheticSpec {
  std::size_t n_notes = 1000;
  std::size_t n_unlabeled = 1000;
  std::size_t vocab_size = 500;  // background tokens w0..w{vocab_size-1}
  std::size_t min_length = 20;   // background tokens per note
  std::size_t max_length = 40;
  std::vector<PlantedPhrase> phrases;
  double positive_rate = 0.35;       // chance a note gets a realization, per phenotype
  double hard_negative_rate = 0.5;   // chance of each hard-negative fragment
  int hard_negatives = 2;            // fragments that miss one non-wildcard slot
  double period_rate = 0.05;         // chance of a "." after a background token
  double noise_rate = 0.0;
  std::size_t filler_concepts = 20;  // untagged background concepts in the dictionary
  std::uint64_t seed = 0;

  void validate() const {
    if (n_notes == 0) throw ConfigError("synthetic: n_notes must be positive");
    if (vocab_size == 0) throw ConfigError("synthetic: vocab_size must be positive");
    if (min_length == 0 || max_length < min_length) throw ConfigError("synthetic: need 0 < min_length <= max_length");
    if (phrases.empty()) throw ConfigError("synthetic: at least one planted phrase is required");
    if (!(noise_rate >= 0.0 && noise_rate < 0.5)) throw ConfigError("synthetic: noise_rate must be in [0, 0.5)");
    for (double p : {positive_rate, hard_negative_rate, period_rate}) {
      if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("synthetic: rates must be in [0, 1]");
    }
    if (hard_negatives < 0) throw ConfigError("synthetic: hard_negatives must be >= 0");
    for (const auto& ph : phrases) {
      if (ph.phenotype.empty()) throw ConfigError("synthetic: planted phrase without phenotype");
      if (ph.tokens.empty()) throw ConfigError("synthetic: empty planted phrase");
      bool literal = false;
      for (const auto& t : ph.tokens) {
        if (t != "*") literal = true;
        if (t != "*" && tokenize(t) != TokenSequence{t}) throw ConfigError("synthetic: phrase token '" + t + "' is not a single token");
      }
      if (!literal) throw ConfigError("synthetic: planted phrase needs at least one literal token");
      for (const auto& [slot, alts] : ph.synonyms) {
        if (slot >= ph.tokens.size() || ph.tokens[slot] == "*") throw ConfigError("synthetic: synonym slot out of range");
        for (const auto& a : alts) {
          if (tokenize(a) != TokenSequence{a}) throw ConfigError("synthetic: synonym '" + a + "' is not a single token");
        }
      }
    }
  }

  std::vector<std::string> phenotypes() const {
    std::vector<std::string> out;
    for (const auto& ph : phrases) {
      if (std::find(out.begin(), out.end(), ph.phenotype) == out.end()) out.push_back(ph.phenotype);
    }
    return out;
  }
};

inline nlohmann::json to_json(const SyntheticSpec& s) {
  nlohmann::json phrases = nlohmann::json::array();
  for (const auto& p : s.phrases) {
    nlohmann::json syn = nlohmann::json::object();
    for (const auto& [slot, alts] : p.synonyms) syn[std::to_string(slot)] = alts;
    phrases.push_back({{"phenotype", p.phenotype}, {"tokens", p.tokens}, {"synonyms", syn}});
  }
  return {{"n_notes", s.n_notes}, {"n_unlabeled", s.n_unlabeled}, {"vocab_size", s.vocab_size},
          {"min_length", s.min_length}, {"max_length", s.max_length}, {"phrases", phrases},
          {"positive_rate", s.positive_rate}, {"hard_negative_rate", s.hard_negative_rate},
          {"hard_negatives", s.hard_negatives}, {"period_rate", s.period_rate}, {"noise_rate", s.noise_rate},
          {"filler_concepts", s.filler_concepts}, {"seed", s.seed}};
}

inline SyntheticSpec synthetic_spec_from_json(const nlohmann::json& j) {
  SyntheticSpec s;
  try {
    s.n_notes = j.value("n_notes", s.n_notes);
    s.n_unlabeled = j.value("n_unlabeled", s.n_unlabeled);
    s.vocab_size = j.value("vocab_size", s.vocab_size);
    s.min_length = j.value("min_length", s.min_length);
    s.max_length = j.value("max_length", s.max_length);
    s.positive_rate = j.value("positive_rate", s.positive_rate);
    s.hard_negative_rate = j.value("hard_negative_rate", s.hard_negative_rate);
    s.hard_negatives = j.value("hard_negatives", s.hard_negatives);
    s.period_rate = j.value("period_rate", s.period_rate);
    s.noise_rate = j.value("noise_rate", s.noise_rate);
    s.filler_concepts = j.value("filler_concepts", s.filler_concepts);
    s.seed = j.value("seed", s.seed);
    for (const auto& jp : j.at("phrases")) {
      PlantedPhrase p;
      p.phenotype = jp.at("phenotype").get<std::string>();
      p.tokens = jp.at("tokens").get<TokenSequence>();
      if (jp.contains("synonyms")) {
        for (const auto& [slot, alts] : jp.at("synonyms").items()) {
          p.synonyms[static_cast<std::size_t>(std::stoul(slot))] = alts.get<TokenSequence>();
        }
      }
      s.phrases.push_back(std::move(p));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid synthetic spec: ") + e.what());
  } catch (const std::logic_error& e) {
    throw ConfigError(std::string("invalid synthetic spec: ") + e.what());
  }
  s.validate();
  return s;
}

inline std::string background_token(std::size_t i) { return "w" + std::to_string(i); }

/// True iff `tokens` contains a realization of the phrase: literal slots
/// match the canonical token or a synonym, wildcard slots match anything.
inline bool contains_phrase(std::span<const std::string> tokens, const PlantedPhrase& p) {
  const std::size_t n = p.tokens.size();
  if (tokens.size() < n) return false;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
    bool ok = true;
    for (std::size_t s = 0; s < n && ok; ++s) {
      const auto& want = p.tokens[s];
      if (want == "*") continue;
      const auto& got = tokens[i + s];
      if (got == want) continue;
      auto it = p.synonyms.find(s);
      ok = it != p.synonyms.end() && std::find(it->second.begin(), it->second.end(), got) != it->second.end();
    }
    if (ok) return true;
  }
  return false;
}

struct SyntheticCorpus {
  std::vector<Note> labeled;
  std::vector<Note> unlabeled;
  ConceptDictionary dictionary;
  std::size_t flipped_labels = 0;  // labels changed by noise, over all phenotypes
};

namespace detail {

inline TokenSequence realize(const PlantedPhrase& p, const SyntheticSpec& spec, Rng& rng, int drop_slot) {
  TokenSequence out;
  for (std::size_t s = 0; s < p.tokens.size(); ++s) {
    const auto& t = p.tokens[s];
    if (t == "*" || static_cast<int>(s) == drop_slot) {
      out.push_back(background_token(rng.below(spec.vocab_size)));
      continue;
    }
    auto it = p.synonyms.find(s);
    if (it == p.synonyms.end() || it->second.empty()) {
      out.push_back(t);
    } else {
      const auto k = rng.below(it->second.size() + 1);
      out.push_back(k == 0 ? t : it->second[k - 1]);
    }
  }
  return out;
}

inline TokenSequence synthesize_note(const SyntheticSpec& spec, Rng& rng) {
  const std::size_t length = spec.min_length + rng.below(spec.max_length - spec.min_length + 1);
  std::vector<TokenSequence> segments;
  for (std::size_t i = 0; i < length; ++i) segments.push_back({background_token(rng.below(spec.vocab_size))});
  std::vector<TokenSequence> fragments;
  for (const auto& p : spec.phrases) {
    if (rng.bernoulli(spec.positive_rate)) fragments.push_back(realize(p, spec, rng, -1));
    std::vector<int> literal_slots;
    for (std::size_t s = 0; s < p.tokens.size(); ++s) {
      if (p.tokens[s] != "*") literal_slots.push_back(static_cast<int>(s));
    }
    for (int h = 0; h < spec.hard_negatives; ++h) {
      if (p.tokens.size() < 2 || !rng.bernoulli(spec.hard_negative_rate)) continue;
      fragments.push_back(realize(p, spec, rng, literal_slots[rng.below(literal_slots.size())]));
    }
  }
  for (auto& f : fragments) {
    const auto pos = rng.below(segments.size() + 1);
    segments.insert(segments.begin() + static_cast<std::ptrdiff_t>(pos), std::move(f));
  }
  TokenSequence tokens;
  for (const auto& seg : segments) {
    tokens.insert(tokens.end(), seg.begin(), seg.end());
    if (rng.bernoulli(spec.period_rate)) tokens.push_back(".");
  }
  return tokens;
}

inline std::string note_id(const char* prefix, std::size_t i) {
  std::string digits = std::to_string(i);
  if (digits.size() < 6) digits.insert(0, 6 - digits.size(), '0');
  return std::string(prefix) + digits;
}

}  // namespace detail

/// Labeled notes, unlabeled notes and a concept dictionary. A note is
/// positive for a phenotype iff it contains one of its planted phrases
/// (checked after assembly), then each label flips with `noise_rate`.
/// The dictionary holds each canonical phrase split at wildcards, tagged
/// with its phenotype, plus untagged background concepts.
inline SyntheticCorpus generate_synthetic_corpus(const SyntheticSpec& spec) {
  spec.validate();
  SyntheticCorpus out;
  Rng rng(derive_seed(spec.seed, "synthetic.notes"));
  Rng noise(derive_seed(spec.seed, "synthetic.noise"));
  const auto phenotypes = spec.phenotypes();
  for (std::size_t i = 0; i < spec.n_notes; ++i) {
    const auto tokens = detail::synthesize_note(spec, rng);
    std::map<std::string, int> labels;
    for (const auto& name : phenotypes) labels[name] = 0;
    for (const auto& p : spec.phrases) {
      if (contains_phrase(tokens, p)) labels[p.phenotype] = 1;
    }
    for (auto& [name, y] : labels) {
      if (noise.bernoulli(spec.noise_rate)) {
        y = 1 - y;
        ++out.flipped_labels;
      }
    }
    out.labeled.push_back({detail::note_id("note-", i), join_tokens(tokens), labels});
  }
  Rng unlabeled_rng(derive_seed(spec.seed, "synthetic.unlabeled"));
  for (std::size_t i = 0; i < spec.n_unlabeled; ++i) {
    out.unlabeled.push_back({detail::note_id("unl-", i), join_tokens(detail::synthesize_note(spec, unlabeled_rng)), std::nullopt});
  }

  std::size_t counter = 0;
  for (std::size_t pi = 0; pi < spec.phrases.size(); ++pi) {
    const auto& p = spec.phrases[pi];
    TokenSequence segment;
    auto flush = [&] {
      if (segment.empty()) return;
      const std::string id = "C" + std::to_string(++counter);
      out.dictionary.add({id, segment, {p.phenotype}});
      segment.clear();
    };
    for (const auto& t : p.tokens) {
      if (t == "*") {
        flush();
      } else {
        segment.push_back(t);
      }
    }
    flush();
  }
  Rng dict_rng(derive_seed(spec.seed, "synthetic.dictionary"));
  std::set<std::string> used;
  for (std::size_t f = 0; f < spec.filler_concepts && used.size() < spec.vocab_size; ++f) {
    std::string token;
    do {
      token = background_token(dict_rng.below(spec.vocab_size));
    } while (used.contains(token));
    used.insert(token);
    out.dictionary.add({"F" + std::to_string(f + 1), {token}, {}});
  }
  return out;
}

/// Writes labeled.jsonl, unlabeled.jsonl and dictionary.tsv into `dir`.
inline void write_synthetic_corpus(const std::filesystem::path& dir, const SyntheticCorpus& c) {
  std::filesystem::create_directories(dir);
  write_corpus(dir / "labeled.jsonl", c.labeled);
  write_corpus(dir / "unlabeled.jsonl", c.unlabeled);
  write_dictionary(dir / "dictionary.tsv", c.dictionary);
}

}  // namespace phenocnn
