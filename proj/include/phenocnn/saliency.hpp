#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>
#include <spdlog/spdlog.h>

#include "phenocnn/cnn.hpp"
#include "phenocnn/corpus.hpp"
#include "phenocnn/errors.hpp"

namespace phenocnn {

/// Norm: L2 norm of the same-width filter bank's post-activation outputs at a
/// window. Weighted: sum over filters whose argmax is the window of
/// activation * output weight for the head, floored at 0.
enum class SaliencyMethod { Norm, Weighted };

inline std::string to_string(SaliencyMethod m) { return m == SaliencyMethod::Norm ? "norm" : "weighted"; }

inline SaliencyMethod saliency_method_from_string(const std::string& name) {
  if (name == "norm") return SaliencyMethod::Norm;
  if (name == "weighted") return SaliencyMethod::Weighted;
  throw ConfigError("unknown saliency method '" + name + "' (expected norm or weighted)");
}

struct PhraseScore {
  TokenSequence phrase;
  int width = 0;
  int position = 0;
  double score = 0.0;
  std::string note_id;

  std::string text() const { return join_tokens(phrase); }
  bool operator==(const PhraseScore&) const = default;
};

/// Descending score, then ascending (width, position, note_id).
inline bool saliency_order(const PhraseScore& a, const PhraseScore& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.width != b.width) return a.width < b.width;
  if (a.position != b.position) return a.position < b.position;
  return a.note_id < b.note_id;
}

enum class SaliencyScope { Global, Local };

inline std::string to_string(SaliencyScope s) { return s == SaliencyScope::Global ? "global" : "local"; }

inline SaliencyScope saliency_scope_from_string(const std::string& name) {
  if (name == "global") return SaliencyScope::Global;
  if (name == "local") return SaliencyScope::Local;
  throw ConfigError("unknown scope '" + name + "' (expected global or local)");
}

struct SaliencyReport {
  SaliencyScope scope = SaliencyScope::Global;
  std::string phenotype;
  SaliencyMethod method = SaliencyMethod::Norm;
  std::vector<PhraseScore> entries;
  std::vector<std::string> warnings;
  std::size_t documents_scored = 0;
  std::optional<double> probability;  // local scope only
  bool negative_prediction = false;   // local scope: the document itself is predicted negative
};

/// One score per (width, window position) over the padded input. Phrase
/// tokens are the input tokens; padding positions read "<pad>". When `tokens`
/// is empty the vocabulary strings of `ids` are used instead.
inline std::vector<PhraseScore> phrase_scores(const CnnModel& model, std::span<const std::string> tokens,
                                              std::span<const TokenId> ids, const std::string& note_id = "",
                                              SaliencyMethod method = SaliencyMethod::Norm, int head = 0) {
  const auto act = forward(model, ids, false);
  std::vector<std::string> surface(act.ids.size());
  for (std::size_t i = 0; i < act.ids.size(); ++i) {
    if (i < tokens.size()) {
      surface[i] = tokens[i];
    } else {
      surface[i] = model.vocab.token(act.ids[i]);
    }
  }
  std::vector<PhraseScore> out;
  Eigen::Index offset = 0;
  for (std::size_t b = 0; b < model.banks.size(); ++b) {
    const auto& grid = act.grids[b];
    const int width = model.banks[b].width;
    std::vector<double> weighted;
    if (method == SaliencyMethod::Weighted) {
      weighted.assign(static_cast<std::size_t>(grid.rows()), 0.0);
      for (Eigen::Index f = 0; f < grid.cols(); ++f) {
        const int p = act.argmax[b][static_cast<std::size_t>(f)];
        weighted[static_cast<std::size_t>(p)] += grid(p, f) * model.output_weights(head, offset + f);
      }
    }
    for (Eigen::Index p = 0; p < grid.rows(); ++p) {
      PhraseScore s;
      s.phrase.assign(surface.begin() + p, surface.begin() + p + width);
      s.width = width;
      s.position = static_cast<int>(p);
      s.score = method == SaliencyMethod::Norm ? grid.row(p).norm() : std::max(0.0, weighted[static_cast<std::size_t>(p)]);
      s.note_id = note_id;
      out.push_back(std::move(s));
    }
    offset += grid.cols();
  }
  return out;
}

inline std::vector<PhraseScore> phrase_scores(const CnnModel& model, const TokenSequence& tokens,
                                              const std::string& note_id = "",
                                              SaliencyMethod method = SaliencyMethod::Norm, int head = 0) {
  const auto ids = model.vocab.encode(tokens);
  return phrase_scores(model, tokens, ids, note_id, method, head);
}

/// Keeps the best-ordered entry per phrase string, sorted, truncated to k.
inline std::vector<PhraseScore> dedup_top_k(std::vector<PhraseScore> scores, std::size_t k) {
  std::sort(scores.begin(), scores.end(), saliency_order);
  std::vector<PhraseScore> out;
  std::set<std::string> seen;
  for (auto& s : scores) {
    if (out.size() >= k) break;
    if (seen.insert(s.text()).second) out.push_back(std::move(s));
  }
  return out;
}

/// Drops windows that start inside the padding; they are not document phrases.
inline std::vector<PhraseScore> document_windows(std::vector<PhraseScore> scores, std::size_t length) {
  std::erase_if(scores, [&](const PhraseScore& s) { return static_cast<std::size_t>(s.position) >= length; });
  return scores;
}

/// A tokenized document for saliency scoring.
struct ScoredDocument {
  std::string note_id;
  TokenSequence tokens;
};

inline std::vector<ScoredDocument> to_documents(std::span<const Note> notes) {
  std::vector<ScoredDocument> docs;
  for (const auto& n : notes) docs.push_back({n.note_id, tokenize(n.text)});
  return docs;
}

/// Pools phrase scores over documents predicted positive for `phenotype`.
inline SaliencyReport global_top_phrases(const CnnModel& model, std::span<const ScoredDocument> docs,
                                         const std::string& phenotype, int k,
                                         SaliencyMethod method = SaliencyMethod::Norm) {
  if (k < 1) throw std::invalid_argument("global_top_phrases: k must be >= 1");
  const int head = model.head_index(phenotype);
  SaliencyReport report;
  report.scope = SaliencyScope::Global;
  report.phenotype = phenotype;
  report.method = method;
  // Best entry per phrase so far; memory stays proportional to distinct phrases.
  std::map<std::string, PhraseScore> best;
  for (const auto& d : docs) {
    if (d.tokens.empty()) continue;
    const auto ids = model.vocab.encode(d.tokens);
    const auto pred = predict(model, ids, model.config.threshold);
    if (pred[static_cast<std::size_t>(head)].label != 1) continue;
    ++report.documents_scored;
    for (auto& s : document_windows(phrase_scores(model, d.tokens, ids, d.note_id, method, head), d.tokens.size())) {
      auto key = s.text();
      auto it = best.find(key);
      if (it == best.end()) {
        best.emplace(std::move(key), std::move(s));
      } else if (saliency_order(s, it->second)) {
        it->second = std::move(s);
      }
    }
  }
  if (report.documents_scored == 0) {
    report.warnings.push_back("no document is predicted positive for " + phenotype);
    spdlog::warn("global_top_phrases: no document is predicted positive for '{}'", phenotype);
    return report;
  }
  std::vector<PhraseScore> pooled;
  pooled.reserve(best.size());
  for (auto& [key, s] : best) pooled.push_back(std::move(s));
  report.entries = dedup_top_k(std::move(pooled), static_cast<std::size_t>(k));
  if (!report.entries.empty() && report.entries.front().score == 0.0) {
    report.warnings.push_back("all phrase scores are zero");
    spdlog::warn("global_top_phrases: all phrase scores are zero for '{}'", phenotype);
  }
  return report;
}

inline SaliencyReport global_top_phrases(const CnnModel& model, std::span<const Note> notes, const std::string& phenotype,
                                         int k, SaliencyMethod method = SaliencyMethod::Norm) {
  const auto docs = to_documents(notes);
  return global_top_phrases(model, std::span<const ScoredDocument>(docs), phenotype, k, method);
}

/// Top-k phrases of one document whatever its predicted label.
inline SaliencyReport local_salient_phrases(const CnnModel& model, const ScoredDocument& doc, const std::string& phenotype,
                                            int k, SaliencyMethod method = SaliencyMethod::Norm) {
  if (k < 1) throw std::invalid_argument("local_salient_phrases: k must be >= 1");
  const int head = model.head_index(phenotype);
  SaliencyReport report;
  report.scope = SaliencyScope::Local;
  report.phenotype = phenotype;
  report.method = method;
  report.documents_scored = 1;
  const auto ids = model.vocab.encode(doc.tokens);
  const auto pred = predict(model, ids, model.config.threshold);
  report.probability = pred[static_cast<std::size_t>(head)].probability;
  if (pred[static_cast<std::size_t>(head)].label != 1) {
    report.negative_prediction = true;
    report.warnings.push_back("document " + doc.note_id + " is predicted negative for " + phenotype);
  }
  report.entries = dedup_top_k(document_windows(phrase_scores(model, doc.tokens, ids, doc.note_id, method, head), doc.tokens.size()),
                               static_cast<std::size_t>(k));
  if (!report.entries.empty() && report.entries.front().score == 0.0) {
    report.warnings.push_back("all phrase scores are zero");
    spdlog::warn("local_salient_phrases: all phrase scores are zero for note '{}'", doc.note_id);
  }
  return report;
}

inline SaliencyReport local_salient_phrases(const CnnModel& model, const Note& note, const std::string& phenotype, int k,
                                            SaliencyMethod method = SaliencyMethod::Norm) {
  return local_salient_phrases(model, ScoredDocument{note.note_id, tokenize(note.text)}, phenotype, k, method);
}

// ---------------------------------------------------------------------------
// Report files

inline constexpr int kSaliencyReportVersion = 1;

inline std::string format_score(double v) {
  std::ostringstream os;
  os << std::setprecision(std::numeric_limits<double>::max_digits10) << v;
  return os.str();
}

inline void write_saliency_tsv(std::ostream& out, const SaliencyReport& r) {
  out << "# format_version: " << kSaliencyReportVersion << '\n';
  out << "# scope: " << to_string(r.scope) << '\n';
  out << "# phenotype: " << r.phenotype << '\n';
  out << "# method: " << to_string(r.method) << '\n';
  for (const auto& w : r.warnings) out << "# warning: " << w << '\n';
  out << "rank\tphrase\twidth\tscore\tnote_id\tposition\n";
  for (std::size_t i = 0; i < r.entries.size(); ++i) {
    const auto& e = r.entries[i];
    out << (i + 1) << '\t' << e.text() << '\t' << e.width << '\t' << format_score(e.score) << '\t' << e.note_id << '\t'
        << e.position << '\n';
  }
}

inline nlohmann::ordered_json saliency_to_json(const SaliencyReport& r) {
  nlohmann::ordered_json j;
  j["format"] = "phenocnn.saliency";
  j["format_version"] = kSaliencyReportVersion;
  j["scope"] = to_string(r.scope);
  j["phenotype"] = r.phenotype;
  j["method"] = to_string(r.method);
  j["documents_scored"] = r.documents_scored;
  if (r.probability) {
    j["probability"] = *r.probability;
    j["negative_prediction"] = r.negative_prediction;
  }
  j["warnings"] = r.warnings;
  auto entries = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < r.entries.size(); ++i) {
    const auto& e = r.entries[i];
    entries.push_back({{"rank", i + 1}, {"phrase", e.text()}, {"width", e.width}, {"score", e.score},
                       {"note_id", e.note_id}, {"position", e.position}});
  }
  j["entries"] = entries;
  return j;
}

/// Writes <stem>.tsv and <stem>.json.
inline void write_saliency_report(const std::filesystem::path& stem, const SaliencyReport& r) {
  if (stem.has_parent_path()) std::filesystem::create_directories(stem.parent_path());
  auto tsv_path = stem;
  tsv_path += ".tsv";
  auto json_path = stem;
  json_path += ".json";
  std::ofstream tsv(tsv_path, std::ios::binary);
  std::ofstream js(json_path, std::ios::binary);
  if (!tsv || !js) throw DataError("cannot write saliency report " + stem.string());
  write_saliency_tsv(tsv, r);
  js << saliency_to_json(r).dump(2) << '\n';
}

}  // namespace phenocnn
