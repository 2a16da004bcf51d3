#pragma once
// Shared fixtures and independent oracles for the unit tests and the
// acceptance runner.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "phenocnn/phenocnn.hpp"

namespace phenocnn::testing {

// ---------------------------------------------------------------------------
// Published per-phenotype results: (PPV, sensitivity, F1) in percent for
// CNN, 2-gram, 3-gram, cTAKES RF, cTAKES LR, filter RF, filter LR.

struct PublishedTriple {
  const char* phenotype;
  const char* model;
  int ppv;
  int sensitivity;
  int f1;
};

inline std::vector<PublishedTriple> published_results() {
  static const char* kModels[7] = {"CNN", "2-gram", "3-gram", "cT RF", "cT LR", "Filter RF", "Filter LR"};
  struct Row {
    const char* phenotype;
    std::array<int, 7> ppv, s, f;
  };
  static const Row kRows[] = {
      {"Adv. Cancer", {90, 91, 100, 94, 94, 68, 78}, {61, 31, 25, 48, 48, 42, 45}, {73, 46, 40, 64, 64, 52, 57}},
      {"Adv. Heart Disease", {73, 69, 71, 56, 65, 58, 74}, {68, 43, 34, 46, 44, 47, 47}, {70, 53, 46, 50, 53, 52, 58}},
      {"Adv. Lung Disease", {67, 57, 67, 36, 67, 38, 46}, {57, 14, 14, 46, 43, 43, 46}, {62, 23, 24, 41, 52, 40, 46}},
      {"Chronic Neurological", {81, 56, 55, 58, 66, 70, 87}, {61, 27, 23, 49, 49, 49, 51}, {69, 36, 32, 53, 56, 57, 64}},
      {"Chronic Pain", {78, 49, 44, 61, 53, 62, 68}, {45, 33, 26, 48, 48, 46, 46}, {57, 40, 33, 54, 50, 53, 55}},
      {"Alcohol Abuse", {85, 100, 100, 94, 76, 100, 100}, {79, 39, 39, 54, 57, 61, 46}, {81, 56, 56, 68, 65, 76, 63}},
      {"Substance Abuse", {83, 80, 88, 79, 64, 87, 95}, {80, 27, 23, 50, 47, 43, 67}, {81, 40, 37, 61, 54, 58, 78}},
      {"Obesity", {100, 50, 50, 60, 80, 67, 90}, {95, 10, 5, 45, 40, 40, 45}, {97, 17, 9, 51, 53, 50, 60}},
      {"Psychiatric Disorders", {87, 61, 67, 62, 62, 88, 79}, {80, 29, 24, 49, 47, 51, 46}, {83, 39, 35, 55, 54, 65, 58}},
      {"Depression", {91, 67, 67, 82, 77, 74, 82}, {76, 40, 34, 49, 50, 49, 49}, {83, 50, 45, 61, 61, 59, 61}},
  };
  std::vector<PublishedTriple> out;
  for (const auto& r : kRows) {
    for (int m = 0; m < 7; ++m) out.push_back({r.phenotype, kModels[m], r.ppv[m], r.s[m], r.f[m]});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Brute-force metric recount.

struct Recount {
  long tp = 0, fp = 0, tn = 0, fn = 0;
};

inline Recount brute_force_recount(const std::vector<int>& preds, const std::vector<int>& labels) {
  Recount r;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    r.tp += preds[i] == 1 && labels[i] == 1;
    r.fp += preds[i] == 1 && labels[i] == 0;
    r.tn += preds[i] == 0 && labels[i] == 0;
    r.fn += preds[i] == 0 && labels[i] == 1;
  }
  return r;
}

// ---------------------------------------------------------------------------
// Gradient checks by central differences.

struct GradCheck {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

inline double relative_error(double a, double b) {
  const double scale = std::max(std::abs(a), std::abs(b));
  return scale == 0.0 ? 0.0 : std::abs(a - b) / scale;
}

/// A random model small enough to finite-difference every parameter. Larger
/// init than training uses, so that gradients sit well above roundoff.
inline CnnModel random_small_cnn(Rng& rng, int vocab_size, int dim, std::vector<int> widths, int filters, int heads,
                                 double dropout = 0.0) {
  Vocabulary vocab;
  for (int i = 2; i < vocab_size; ++i) vocab.add("t" + std::to_string(i));
  CnnConfig cfg;
  cfg.filter_widths = std::move(widths);
  cfg.filters_per_width = filters;
  cfg.dropout_p = dropout;
  cfg.n_heads = heads;
  cfg.seed = rng.next();
  EmbeddingMatrix emb(vocab.size(), dim);
  for (std::size_t r = 1; r < vocab.size(); ++r) {
    for (int c = 0; c < dim; ++c) emb.vectors(static_cast<Eigen::Index>(r), c) = rng.uniform(-0.8, 0.8);
  }
  std::vector<std::string> names;
  for (int h = 0; h < heads; ++h) names.push_back("p" + std::to_string(h));
  auto m = init_model(cfg, vocab, emb, names);
  for (auto& b : m.banks) {
    for (Eigen::Index i = 0; i < b.weights.size(); ++i) b.weights.data()[i] = rng.uniform(-0.7, 0.7);
    for (Eigen::Index i = 0; i < b.biases.size(); ++i) b.biases(i) = rng.uniform(-0.3, 0.3);
  }
  for (Eigen::Index i = 0; i < m.output_weights.size(); ++i) m.output_weights.data()[i] = rng.uniform(-1.0, 1.0);
  for (Eigen::Index i = 0; i < m.output_bias.size(); ++i) m.output_bias(i) = rng.uniform(-0.3, 0.3);
  return m;
}

/// Compares backward() with central differences of the loss over every
/// parameter except the frozen PAD row. A fixed dropout seed reproduces the
/// same mask in every evaluation.
inline GradCheck cnn_gradient_check(CnnModel model, const std::vector<TokenId>& ids, const std::vector<int>& labels,
                                    double h = 1e-4, double min_grad = 1e-8, std::uint64_t dropout_seed = 99) {
  auto eval = [&](const CnnModel& m) {
    Rng r(dropout_seed);
    const auto act = forward(m, ids, m.config.dropout_p > 0.0, &r);
    return loss(act, labels);
  };
  Rng r(dropout_seed);
  const auto act = forward(model, ids, model.config.dropout_p > 0.0, &r);
  auto grads = backward(model, act, labels);
  auto params = parameter_views(model);
  auto gviews = gradient_views(grads);
  const auto pad_cols = static_cast<std::size_t>(model.dim());
  GradCheck out;
  for (std::size_t t = 0; t < params.size(); ++t) {
    const std::size_t start = t == 0 ? pad_cols : 0;  // tensor 0 is the embedding table
    for (std::size_t i = start; i < params[t].size(); ++i) {
      const double saved = params[t][i];
      params[t][i] = saved + h;
      const double up = eval(model);
      params[t][i] = saved - h;
      const double down = eval(model);
      params[t][i] = saved;
      const double numeric = (up - down) / (2 * h);
      const double analytic = gviews[t][i];
      if (std::max(std::abs(analytic), std::abs(numeric)) <= min_grad) continue;
      out.max_rel_error = std::max(out.max_rel_error, relative_error(analytic, numeric));
      ++out.checked;
    }
  }
  return out;
}

struct LogregInstance {
  std::vector<FeatureVector> X;
  std::vector<int> y;
  std::size_t dim = 0;
  LinearModel model;
};

inline LogregInstance random_logreg_instance(Rng& rng) {
  LogregInstance inst;
  inst.dim = 2 + rng.below(7);
  const std::size_t n = 3 + rng.below(15);
  for (std::size_t i = 0; i < n; ++i) {
    FeatureVector v;
    for (std::size_t c = 0; c < inst.dim; ++c) {
      if (rng.bernoulli(0.6)) v.entries.emplace_back(static_cast<int>(c), rng.uniform(-2.0, 2.0));
    }
    inst.X.push_back(std::move(v));
    inst.y.push_back(rng.bernoulli(0.5) ? 1 : 0);
  }
  inst.model.weights.resize(inst.dim);
  for (auto& w : inst.model.weights) w = rng.uniform(-1.5, 1.5);
  inst.model.bias = rng.uniform(-1.0, 1.0);
  inst.model.l2_lambda = rng.uniform(0.0, 0.5);
  return inst;
}

inline GradCheck logreg_gradient_check(const LogregInstance& inst, double h = 1e-4, double min_grad = 1e-8) {
  std::vector<double> gw;
  const double gb = logreg_gradient(inst.model, inst.X, inst.y, gw);
  GradCheck out;
  LinearModel m = inst.model;
  auto check = [&](double& slot, double analytic) {
    const double saved = slot;
    slot = saved + h;
    const double up = logreg_objective(m, inst.X, inst.y);
    slot = saved - h;
    const double down = logreg_objective(m, inst.X, inst.y);
    slot = saved;
    const double numeric = (up - down) / (2 * h);
    if (std::max(std::abs(analytic), std::abs(numeric)) <= min_grad) return;
    out.max_rel_error = std::max(out.max_rel_error, relative_error(analytic, numeric));
    ++out.checked;
  };
  for (std::size_t k = 0; k < m.weights.size(); ++k) check(m.weights[k], gw[k]);
  check(m.bias, gb);
  return out;
}

// ---------------------------------------------------------------------------
// Reference negation rule, written independently of detect_negation: a
// mention is negated iff some trigger occurrence ends at or before the
// mention start, begins no earlier than start - window, and no scope breaker
// sits strictly between the trigger's end and the mention start.

inline bool reference_negated(const std::vector<std::string>& tokens, std::size_t start, const NegationRules& rules) {
  for (const auto& trig : rules.triggers) {
    const std::size_t len = trig.size();
    for (std::size_t b = 0; b + len <= start; ++b) {
      if (start - b > rules.window) continue;
      bool match = true;
      for (std::size_t k = 0; k < len; ++k) match = match && tokens[b + k] == trig[k];
      if (!match) continue;
      bool broken = false;
      for (std::size_t k = b + len; k < start; ++k) broken = broken || rules.scope_breakers.contains(tokens[k]);
      if (!broken) return true;
    }
  }
  return false;
}

// ---------------------------------------------------------------------------
// Synthetic corpora.

inline SyntheticSpec planted_spec(std::uint64_t seed, std::size_t n_notes = 1000) {
  SyntheticSpec s;
  s.n_notes = n_notes;
  s.n_unlabeled = 1000;
  s.vocab_size = 500;
  s.phrases.push_back({"alcohol_abuse", {"heavy", "alcohol", "abuse"}, {}});
  s.noise_rate = 0.0;
  s.seed = seed;
  return s;
}

/// Four phrasings of slot 0 (one is in the dictionary) around a wildcard.
inline SyntheticSpec synonym_spec(std::uint64_t seed) {
  SyntheticSpec s;
  s.n_notes = 1000;
  s.n_unlabeled = 2000;
  s.vocab_size = 500;
  s.phrases.push_back({"alcohol_abuse", {"alcohol", "*", "abuse"}, {{0, {"etoh", "ethanol", "booze"}}}});
  s.noise_rate = 0.0;
  s.seed = seed;
  return s;
}

inline std::filesystem::path fresh_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("phenocnn_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

/// True iff some entry among the first k contains `phrase` as a contiguous run.
inline bool top_k_contains(const SaliencyReport& r, const TokenSequence& phrase, std::size_t k, bool exact = false) {
  for (std::size_t i = 0; i < std::min(k, r.entries.size()); ++i) {
    const auto& p = r.entries[i].phrase;
    if (exact) {
      if (p == phrase) return true;
      continue;
    }
    if (std::search(p.begin(), p.end(), phrase.begin(), phrase.end()) != p.end()) return true;
  }
  return false;
}

/// Experiment config over a generated corpus directory.
inline ExperimentConfig synthetic_experiment(const std::filesystem::path& data, const std::filesystem::path& out,
                                             std::vector<std::string> models, std::uint64_t seed) {
  ExperimentConfig c;
  c.labeled_corpus = data / "labeled.jsonl";
  c.unlabeled_corpus = data / "unlabeled.jsonl";
  c.dictionary = data / "dictionary.tsv";
  c.output_dir = out;
  c.phenotypes = {"alcohol_abuse"};
  c.vocab_min_count = 1;
  c.pretrain_config.dim = 50;
  c.models = std::move(models);
  c.seed = seed;
  return c;
}

}  // namespace phenocnn::testing
