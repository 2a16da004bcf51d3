#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <json.hpp>

#include "phenocnn/concepts.hpp"
#include "phenocnn/corpus.hpp"
#include "phenocnn/errors.hpp"

namespace phenocnn {

/// Sparse feature counts keyed by a canonical string, kept in first-seen order.
/// N-gram keys are the tokens joined by a space; concept keys are
/// "<concept_id>|neg" or "<concept_id>|pos".
class CountMap {
 public:
  void add(const std::string& key, double amount = 1.0) {
    auto [it, inserted] = index_.emplace(key, entries_.size());
    if (inserted) {
      entries_.emplace_back(key, amount);
    } else {
      entries_[it->second].second += amount;
    }
  }

  double get(const std::string& key) const {
    auto it = index_.find(key);
    return it == index_.end() ? 0.0 : entries_[it->second].second;
  }

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

 private:
  std::vector<std::pair<std::string, double>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

inline CountMap extract_ngrams(std::span<const std::string> tokens, int n) {
  if (n < 1) throw std::invalid_argument("extract_ngrams: n must be >= 1");
  CountMap counts;
  const auto width = static_cast<std::size_t>(n);
  if (tokens.size() < width) return counts;
  for (std::size_t i = 0; i + width <= tokens.size(); ++i) counts.add(join_tokens(tokens.subspan(i, width)));
  return counts;
}

inline std::string concept_feature_key(const std::string& concept_id, bool negated) {
  return concept_id + (negated ? "|neg" : "|pos");
}

inline CountMap concept_count_map(const ConceptCountVector& counts) {
  CountMap out;
  for (const auto& [key, n] : counts) out.add(concept_feature_key(key.first, key.second), n);
  return out;
}

/// Sorted sparse vector; explicit zeros are never stored.
struct FeatureVector {
  std::vector<std::pair<int, double>> entries;

  double get(int index) const {
    auto it = std::lower_bound(entries.begin(), entries.end(), index,
                               [](const auto& e, int i) { return e.first < i; });
    return it != entries.end() && it->first == index ? it->second : 0.0;
  }

  double norm() const {
    double s = 0.0;
    for (const auto& [i, v] : entries) s += v * v;
    return std::sqrt(s);
  }

  bool operator==(const FeatureVector&) const = default;
};

struct FeatureSpace {
  static constexpr const char* kIdfVariant = "smooth: ln((1+N)/(1+df))+1, l2-normalized";

  std::vector<std::string> keys;  // column -> key
  std::unordered_map<std::string, int> index;
  std::vector<double> idf;        // empty until fitted
  std::size_t n_documents = 0;

  std::size_t dim() const { return keys.size(); }

  int column(const std::string& key) const {
    auto it = index.find(key);
    return it == index.end() ? -1 : it->second;
  }

  bool operator==(const FeatureSpace& o) const {
    return keys == o.keys && idf == o.idf && n_documents == o.n_documents;
  }
};

/// Columns in first-seen order over the corpus; idf(t) = ln((1+N)/(1+df(t))) + 1.
inline FeatureSpace fit_feature_space(std::span<const CountMap> corpus) {
  if (corpus.empty()) throw std::invalid_argument("fit_feature_space: empty corpus");
  FeatureSpace space;
  std::vector<std::size_t> df;
  for (const auto& doc : corpus) {
    for (const auto& [key, count] : doc) {
      if (count == 0.0) continue;
      auto [it, inserted] = space.index.emplace(key, static_cast<int>(space.keys.size()));
      if (inserted) {
        space.keys.push_back(key);
        df.push_back(0);
      }
      ++df[static_cast<std::size_t>(it->second)];
    }
  }
  space.n_documents = corpus.size();
  const double n = static_cast<double>(corpus.size());
  space.idf.resize(df.size());
  for (std::size_t c = 0; c < df.size(); ++c) {
    space.idf[c] = std::log((1.0 + n) / (1.0 + static_cast<double>(df[c]))) + 1.0;
  }
  return space;
}

/// Raw counts in the fitted columns; unseen features are dropped.
inline FeatureVector count_transform(const CountMap& counts, const FeatureSpace& space) {
  FeatureVector v;
  for (const auto& [key, count] : counts) {
    const int c = space.column(key);
    if (c >= 0 && count != 0.0) v.entries.emplace_back(c, count);
  }
  std::sort(v.entries.begin(), v.entries.end());
  return v;
}

/// count * idf, then L2-normalized (an all-zero vector stays empty).
inline FeatureVector tfidf_transform(const CountMap& counts, const FeatureSpace& space) {
  if (space.idf.size() != space.keys.size()) throw std::invalid_argument("tfidf_transform: feature space not fitted");
  FeatureVector v = count_transform(counts, space);
  for (auto& [c, val] : v.entries) val *= space.idf[static_cast<std::size_t>(c)];
  const double norm = v.norm();
  if (norm > 0.0) {
    for (auto& e : v.entries) e.second /= norm;
  }
  return v;
}

inline nlohmann::json to_json(const FeatureSpace& s) {
  return {{"keys", s.keys}, {"idf", s.idf}, {"n_documents", s.n_documents}, {"idf_variant", FeatureSpace::kIdfVariant}};
}

inline FeatureSpace feature_space_from_json(const nlohmann::json& j) {
  FeatureSpace s;
  s.keys = j.at("keys").get<std::vector<std::string>>();
  s.idf = j.at("idf").get<std::vector<double>>();
  s.n_documents = j.at("n_documents").get<std::size_t>();
  for (std::size_t i = 0; i < s.keys.size(); ++i) {
    if (!s.index.emplace(s.keys[i], static_cast<int>(i)).second) throw ModelLoadError("duplicate feature key " + s.keys[i]);
  }
  if (!s.idf.empty() && s.idf.size() != s.keys.size()) throw ModelLoadError("idf length does not match feature count");
  return s;
}

}  // namespace phenocnn
