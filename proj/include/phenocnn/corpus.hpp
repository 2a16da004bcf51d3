#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>
#include <spdlog/spdlog.h>

#include "phenocnn/errors.hpp"
#include "phenocnn/rng.hpp"

namespace phenocnn {

using TokenId = std::int32_t;
using TokenSequence = std::vector<std::string>;

/// One clinical note. Unlabeled notes (pretraining corpus) carry no label map.
struct Note {
  std::string note_id;
  std::string text;
  std::optional<std::map<std::string, int>> labels;

  bool operator==(const Note&) const = default;
};

inline std::string to_hex(std::uint64_t value) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = kDigits[value & 0xf];
    value >>= 4;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Tokenization

/// Lowercases, keeps maximal runs of letters/digits as one token, emits every
/// other non-space character as its own token. Bytes >= 0x80 are treated as
/// letters so multi-byte UTF-8 sequences stay inside their word.
inline TokenSequence tokenize(std::string_view text) {
  TokenSequence tokens;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) {
      tokens.push_back(std::move(current));
      current.clear();
    }
  };
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (c >= 0x80 || std::isalnum(c)) {
      current.push_back(static_cast<char>(std::tolower(c)));
    } else if (std::isspace(c)) {
      flush();
    } else {
      flush();
      tokens.emplace_back(1, ch);
    }
  }
  flush();
  return tokens;
}

inline std::string join_tokens(std::span<const std::string> tokens, std::string_view sep = " ") {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += sep;
    out += tokens[i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Vocabulary

class Vocabulary {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kUnk = 1;
  static constexpr std::string_view kPadToken = "<pad>";
  static constexpr std::string_view kUnkToken = "<unk>";

  Vocabulary() : Vocabulary(1) {}
  explicit Vocabulary(int min_count) : min_count_(min_count) {
    id_to_token_ = {std::string(kPadToken), std::string(kUnkToken)};
    token_to_id_.emplace(std::string(kPadToken), kPad);
    token_to_id_.emplace(std::string(kUnkToken), kUnk);
  }

  /// Rebuilds a vocabulary from its id-ordered token list (as persisted).
  static Vocabulary from_tokens(std::vector<std::string> tokens, int min_count) {
    if (tokens.size() < 2 || tokens[0] != kPadToken || tokens[1] != kUnkToken) {
      throw DataError("vocabulary token list must start with <pad>, <unk>");
    }
    Vocabulary vocab(min_count);
    for (std::size_t i = 2; i < tokens.size(); ++i) {
      if (!vocab.add(tokens[i])) throw DataError("duplicate vocabulary token: " + tokens[i]);
    }
    return vocab;
  }

  /// Appends a token with the next free id. Returns false if already present.
  bool add(const std::string& token) {
    auto [it, inserted] = token_to_id_.emplace(token, static_cast<TokenId>(id_to_token_.size()));
    if (inserted) id_to_token_.push_back(token);
    return inserted;
  }

  TokenId lookup(const std::string& token) const {
    auto it = token_to_id_.find(token);
    return it == token_to_id_.end() ? kUnk : it->second;
  }

  bool contains(const std::string& token) const { return token_to_id_.contains(token); }

  const std::string& token(TokenId id) const { return id_to_token_.at(static_cast<std::size_t>(id)); }

  std::vector<TokenId> encode(std::span<const std::string> tokens) const {
    std::vector<TokenId> ids;
    ids.reserve(tokens.size());
    for (const auto& t : tokens) ids.push_back(lookup(t));
    return ids;
  }

  std::size_t size() const { return id_to_token_.size(); }
  int min_count() const { return min_count_; }
  const std::vector<std::string>& tokens() const { return id_to_token_; }

  /// FNV-1a over the id-ordered token list; identifies a vocabulary in checkpoints.
  std::string hash() const {
    std::string joined;
    for (const auto& t : id_to_token_) {
      joined += t;
      joined.push_back('\n');
    }
    return to_hex(fnv1a64(joined));
  }

  bool operator==(const Vocabulary& other) const {
    return min_count_ == other.min_count_ && id_to_token_ == other.id_to_token_;
  }

 private:
  int min_count_;
  std::unordered_map<std::string, TokenId> token_to_id_;
  std::vector<std::string> id_to_token_;
};

/// Tokens with frequency >= min_count get ids >= 2, most frequent first,
/// ties broken lexicographically.
inline Vocabulary build_vocabulary(std::span<const TokenSequence> corpus, int min_count) {
  if (min_count < 1) throw ConfigError("min_count must be >= 1");
  std::unordered_map<std::string, std::int64_t> freq;
  for (const auto& seq : corpus) {
    for (const auto& t : seq) ++freq[t];
  }
  std::vector<std::pair<std::string, std::int64_t>> kept;
  for (auto& [tok, n] : freq) {
    if (n >= min_count) kept.emplace_back(tok, n);
  }
  std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  Vocabulary vocab(min_count);
  for (const auto& [tok, n] : kept) vocab.add(tok);
  return vocab;
}

// ---------------------------------------------------------------------------
// Splitting

struct SplitSpec {
  double train_fraction = 0.7;
  double val_fraction = 0.1;
  double test_fraction = 0.2;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(train_fraction > 0 && val_fraction > 0 && test_fraction > 0)) {
      throw ConfigError("split fractions must be positive");
    }
    if (std::abs(train_fraction + val_fraction + test_fraction - 1.0) > 1e-9) {
      throw ConfigError("split fractions must sum to 1");
    }
  }
};

struct DatasetSplit {
  std::vector<Note> train;
  std::vector<Note> val;
  std::vector<Note> test;
  bool degenerate = false;  // some partition ended up empty

  /// Hash of the three id lists; recorded in every report.
  std::string manifest_hash() const {
    std::string joined;
    for (const auto* part : {&train, &val, &test}) {
      for (const auto& n : *part) {
        joined += n.note_id;
        joined.push_back('\n');
      }
      joined.push_back('\x1e');
    }
    return to_hex(fnv1a64(joined));
  }
};

/// Partition sizes floor(N*f) for val and test; train also takes the
/// remainder. The 1e-9 slack keeps products like 1610*0.7 from flooring to
/// one less than intended.
inline std::array<std::size_t, 3> split_sizes(std::size_t n, const SplitSpec& spec) {
  auto part = [n](double f) {
    return static_cast<std::size_t>(std::floor(static_cast<double>(n) * f + 1e-9));
  };
  const std::size_t val = part(spec.val_fraction);
  const std::size_t test = part(spec.test_fraction);
  return {n - val - test, val, test};
}

inline DatasetSplit split_dataset(std::span<const Note> notes, const SplitSpec& spec) {
  spec.validate();
  if (notes.empty()) throw DataError("cannot split an empty corpus");

  std::vector<std::size_t> order(notes.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(spec.seed);
  rng.shuffle(order);

  const auto [n_train, n_val, n_test] = split_sizes(notes.size(), spec);
  DatasetSplit out;
  for (std::size_t i = 0; i < order.size(); ++i) {
    const Note& note = notes[order[i]];
    if (i < n_train) {
      out.train.push_back(note);
    } else if (i < n_train + n_val) {
      out.val.push_back(note);
    } else {
      out.test.push_back(note);
    }
  }
  out.degenerate = n_train == 0 || n_val == 0 || n_test == 0;
  if (out.degenerate) {
    spdlog::warn("degenerate split of {} notes: train={} val={} test={}", notes.size(), n_train,
                 n_val, n_test);
  }
  return out;
}

// ---------------------------------------------------------------------------
// File formats

/// Reads newline-delimited note records: {"note_id", "text", "labels"?}.
inline std::vector<Note> parse_corpus(std::istream& in, const std::string& source = "<stream>") {
  std::vector<Note> notes;
  std::unordered_set<std::string> seen;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (std::all_of(line.begin(), line.end(), [](unsigned char c) { return std::isspace(c); })) {
      continue;
    }
    const std::string where = source + ":" + std::to_string(line_no);
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw DataError(where + ": invalid JSON: " + e.what());
    }
    if (!rec.is_object() || !rec.contains("note_id") || !rec["note_id"].is_string() ||
        !rec.contains("text") || !rec["text"].is_string()) {
      throw DataError(where + ": record needs string fields note_id and text");
    }
    Note note;
    note.note_id = rec["note_id"].get<std::string>();
    note.text = rec["text"].get<std::string>();
    if (note.note_id.empty()) throw DataError(where + ": empty note_id");
    if (!seen.insert(note.note_id).second) throw DataError(where + ": duplicate note_id " + note.note_id);
    if (rec.contains("labels") && !rec["labels"].is_null()) {
      if (!rec["labels"].is_object()) throw DataError(where + ": labels must be an object");
      std::map<std::string, int> labels;
      for (auto& [name, value] : rec["labels"].items()) {
        int v = -1;
        if (value.is_number_integer()) v = value.get<int>();
        if (value.is_boolean()) v = value.get<bool>() ? 1 : 0;
        if (v != 0 && v != 1) throw DataError(where + ": label " + name + " must be 0 or 1");
        labels.emplace(name, v);
      }
      note.labels = std::move(labels);
    }
    notes.push_back(std::move(note));
  }
  return notes;
}

inline std::vector<Note> read_corpus(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open corpus file " + path.string());
  return parse_corpus(in, path.string());
}

inline void write_corpus(std::ostream& out, std::span<const Note> notes) {
  for (const auto& note : notes) {
    nlohmann::ordered_json rec;
    rec["note_id"] = note.note_id;
    rec["text"] = note.text;
    if (note.labels) {
      nlohmann::ordered_json labels = nlohmann::ordered_json::object();
      for (const auto& [k, v] : *note.labels) labels[k] = v;
      rec["labels"] = labels;
    }
    out << rec.dump() << '\n';
  }
}

inline void write_corpus(const std::filesystem::path& path, std::span<const Note> notes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write corpus file " + path.string());
  write_corpus(out, notes);
}

/// Writes train.ids / val.ids / test.ids (one note id per line) into dir.
inline void write_split_manifest(const std::filesystem::path& dir, const DatasetSplit& split) {
  std::filesystem::create_directories(dir);
  auto dump = [&](const char* name, const std::vector<Note>& part) {
    std::ofstream out(dir / name, std::ios::binary);
    if (!out) throw DataError("cannot write split manifest in " + dir.string());
    for (const auto& n : part) out << n.note_id << '\n';
  };
  dump("train.ids", split.train);
  dump("val.ids", split.val);
  dump("test.ids", split.test);
}

inline std::vector<std::string> read_id_list(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open id list " + path.string());
  std::vector<std::string> ids;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) ids.push_back(line);
  }
  return ids;
}

inline std::vector<TokenSequence> tokenize_notes(std::span<const Note> notes) {
  std::vector<TokenSequence> out;
  out.reserve(notes.size());
  for (const auto& n : notes) out.push_back(tokenize(n.text));
  return out;
}

}  // namespace phenocnn
