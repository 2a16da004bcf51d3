#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>
#include <spdlog/spdlog.h>

#include "phenocnn/baselines.hpp"
#include "phenocnn/cnn.hpp"
#include "phenocnn/concepts.hpp"
#include "phenocnn/corpus.hpp"
#include "phenocnn/embeddings.hpp"
#include "phenocnn/errors.hpp"
#include "phenocnn/featurize.hpp"
#include "phenocnn/metrics.hpp"
#include "phenocnn/rng.hpp"
#include "phenocnn/saliency.hpp"

namespace phenocnn {

/// The closed model menu, in report order.
inline const std::vector<std::string>& known_models() {
  static const std::vector<std::string> kModels{"cnn", "2gram-lr", "3gram-lr", "ctakes-rf", "ctakes-lr", "filter-rf", "filter-lr"};
  return kModels;
}

inline bool is_known_model(const std::string& name) {
  const auto& m = known_models();
  return std::find(m.begin(), m.end(), name) != m.end();
}

inline bool uses_dictionary(const std::string& model) { return model.starts_with("ctakes-") || model.starts_with("filter-"); }

struct BaselineConfig {
  std::optional<double> lr_lambda;  // unset: 1 / n_train
  int lr_max_iterations = 2000;
  double lr_tolerance = 1e-5;
  int rf_trees = 100;
  int rf_max_depth = 0;
  int rf_features_per_split = 0;
  bool rf_bootstrap = true;
  bool ngram_tfidf = false;
  bool concept_tfidf = true;
};

struct ExperimentConfig {
  std::filesystem::path labeled_corpus;
  std::optional<std::filesystem::path> unlabeled_corpus;
  std::optional<std::filesystem::path> dictionary;
  std::filesystem::path output_dir;
  std::vector<std::string> phenotypes;
  SplitSpec split;
  int vocab_min_count = 2;
  bool pretrain = true;
  PretrainConfig pretrain_config;
  CnnConfig cnn;
  BaselineConfig baselines;
  std::vector<std::string> models = known_models();
  bool multilabel = false;
  int saliency_top_k = 19;
  SaliencyMethod saliency_method = SaliencyMethod::Norm;
  unsigned threads = 1;
  std::uint64_t seed = 0;

  /// Structural checks; paths are checked by check_inputs().
  void validate() const {
    if (labeled_corpus.empty()) throw ConfigError("paths.labeled is required");
    if (output_dir.empty()) throw ConfigError("paths.output is required");
    if (phenotypes.empty()) throw ConfigError("phenotypes must be non-empty");
    if (std::set<std::string>(phenotypes.begin(), phenotypes.end()).size() != phenotypes.size()) {
      throw ConfigError("phenotypes must be distinct");
    }
    for (const auto& p : phenotypes) {
      if (p.empty() || p.find_first_of(",/\\ \t") != std::string::npos) throw ConfigError("invalid phenotype name '" + p + "'");
    }
    split.validate();
    if (vocab_min_count < 1) throw ConfigError("vocab_min_count must be >= 1");
    pretrain_config.validate();
    CnnConfig c = cnn;
    c.n_heads = 1;
    c.validate();
    if (models.empty()) throw ConfigError("models must be non-empty");
    for (const auto& m : models) {
      if (!is_known_model(m)) throw ConfigError("unknown model '" + m + "'");
    }
    if (std::set<std::string>(models.begin(), models.end()).size() != models.size()) throw ConfigError("models must be distinct");
    const bool needs_dict = std::any_of(models.begin(), models.end(), uses_dictionary);
    if (needs_dict && !dictionary) throw ConfigError("paths.dictionary is required for concept-based models");
    if (baselines.lr_lambda && !(*baselines.lr_lambda >= 0)) throw ConfigError("baselines.lr_lambda must be >= 0");
    if (baselines.lr_max_iterations < 1) throw ConfigError("baselines.lr_max_iterations must be >= 1");
    if (!(baselines.lr_tolerance > 0)) throw ConfigError("baselines.lr_tolerance must be positive");
    if (baselines.rf_trees < 1) throw ConfigError("baselines.rf_trees must be >= 1");
    if (baselines.rf_max_depth < 0 || baselines.rf_features_per_split < 0) throw ConfigError("baselines.rf_* must be >= 0");
    if (saliency_top_k < 1) throw ConfigError("saliency.top_k must be >= 1");
    if (threads < 1) throw ConfigError("threads must be >= 1");
  }

  void check_inputs() const {
    auto need = [](const std::filesystem::path& p, const char* what) {
      if (!std::filesystem::is_regular_file(p)) throw ConfigError(std::string(what) + " not found: " + p.string());
    };
    need(labeled_corpus, "labeled corpus");
    if (unlabeled_corpus) need(*unlabeled_corpus, "unlabeled corpus");
    if (dictionary && std::any_of(models.begin(), models.end(), uses_dictionary)) need(*dictionary, "dictionary");
  }
};

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [key, value] : j.items()) {
    if (!allowed.contains(key)) throw ConfigError("unknown key '" + key + "' in " + where);
  }
}

}  // namespace detail

/// Parses a config document. Relative paths resolve against `base_dir`.
inline ExperimentConfig experiment_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {}) {
  ExperimentConfig c;
  try {
    detail::reject_unknown_keys(j, {"paths", "phenotypes", "split", "vocab_min_count", "pretrain", "cnn", "baselines", "models",
                                    "multilabel", "saliency", "threads", "seed"},
                                "config");
    auto resolve = [&](const std::string& p) {
      std::filesystem::path path(p);
      return path.is_absolute() || base_dir.empty() ? path : base_dir / path;
    };
    const auto& paths = j.at("paths");
    detail::reject_unknown_keys(paths, {"labeled", "unlabeled", "dictionary", "output"}, "paths");
    c.labeled_corpus = resolve(paths.at("labeled").get<std::string>());
    if (paths.contains("unlabeled") && !paths["unlabeled"].is_null()) c.unlabeled_corpus = resolve(paths["unlabeled"].get<std::string>());
    if (paths.contains("dictionary") && !paths["dictionary"].is_null()) c.dictionary = resolve(paths["dictionary"].get<std::string>());
    c.output_dir = resolve(paths.value("output", std::string("out")));
    c.phenotypes = j.at("phenotypes").get<std::vector<std::string>>();
    if (j.contains("split")) {
      const auto& s = j["split"];
      detail::reject_unknown_keys(s, {"train", "val", "test"}, "split");
      c.split.train_fraction = s.value("train", c.split.train_fraction);
      c.split.val_fraction = s.value("val", c.split.val_fraction);
      c.split.test_fraction = s.value("test", c.split.test_fraction);
    }
    c.vocab_min_count = j.value("vocab_min_count", c.vocab_min_count);
    if (j.contains("pretrain")) {
      const auto& p = j["pretrain"];
      detail::reject_unknown_keys(p, {"enabled", "dim", "window", "negatives", "epochs", "learning_rate"}, "pretrain");
      c.pretrain = p.value("enabled", c.pretrain);
      c.pretrain_config.dim = p.value("dim", c.pretrain_config.dim);
      c.pretrain_config.window = p.value("window", c.pretrain_config.window);
      c.pretrain_config.negatives = p.value("negatives", c.pretrain_config.negatives);
      c.pretrain_config.epochs = p.value("epochs", c.pretrain_config.epochs);
      c.pretrain_config.learning_rate = p.value("learning_rate", c.pretrain_config.learning_rate);
    }
    if (j.contains("cnn")) {
      detail::reject_unknown_keys(j["cnn"], {"filter_widths", "filters_per_width", "dropout_p", "max_norm", "epochs", "batch_size",
                                             "adadelta_rho", "adadelta_eps", "threshold", "activation"},
                                  "cnn");
      c.cnn = cnn_config_from_json(j["cnn"]);
    }
    if (j.contains("baselines")) {
      const auto& b = j["baselines"];
      detail::reject_unknown_keys(b, {"lr_lambda", "lr_max_iterations", "lr_tolerance", "rf_trees", "rf_max_depth",
                                      "rf_features_per_split", "rf_bootstrap", "ngram_tfidf", "concept_tfidf"},
                                  "baselines");
      if (b.contains("lr_lambda") && !b["lr_lambda"].is_null()) {
        if (b["lr_lambda"].is_string()) {
          if (b["lr_lambda"].get<std::string>() != "auto") throw ConfigError("baselines.lr_lambda must be a number or \"auto\"");
        } else {
          c.baselines.lr_lambda = b["lr_lambda"].get<double>();
        }
      }
      c.baselines.lr_max_iterations = b.value("lr_max_iterations", c.baselines.lr_max_iterations);
      c.baselines.lr_tolerance = b.value("lr_tolerance", c.baselines.lr_tolerance);
      c.baselines.rf_trees = b.value("rf_trees", c.baselines.rf_trees);
      c.baselines.rf_max_depth = b.value("rf_max_depth", c.baselines.rf_max_depth);
      c.baselines.rf_features_per_split = b.value("rf_features_per_split", c.baselines.rf_features_per_split);
      c.baselines.rf_bootstrap = b.value("rf_bootstrap", c.baselines.rf_bootstrap);
      c.baselines.ngram_tfidf = b.value("ngram_tfidf", c.baselines.ngram_tfidf);
      c.baselines.concept_tfidf = b.value("concept_tfidf", c.baselines.concept_tfidf);
    }
    if (j.contains("models")) c.models = j["models"].get<std::vector<std::string>>();
    c.multilabel = j.value("multilabel", c.multilabel);
    if (j.contains("saliency")) {
      const auto& s = j["saliency"];
      detail::reject_unknown_keys(s, {"top_k", "method"}, "saliency");
      c.saliency_top_k = s.value("top_k", c.saliency_top_k);
      if (s.contains("method")) c.saliency_method = saliency_method_from_string(s["method"].get<std::string>());
    }
    c.threads = j.value("threads", c.threads);
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid config: ") + e.what());
  }
  c.validate();
  return c;
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return experiment_config_from_json(j, path.parent_path());
}

/// The resolved config. Without `include_output` the output directory is
/// left out, so reports do not depend on where they are written.
inline nlohmann::ordered_json to_json(const ExperimentConfig& c, bool include_output = true) {
  nlohmann::ordered_json j;
  j["paths"]["labeled"] = c.labeled_corpus.generic_string();
  j["paths"]["unlabeled"] = c.unlabeled_corpus ? nlohmann::ordered_json(c.unlabeled_corpus->generic_string()) : nullptr;
  j["paths"]["dictionary"] = c.dictionary ? nlohmann::ordered_json(c.dictionary->generic_string()) : nullptr;
  if (include_output) j["paths"]["output"] = c.output_dir.generic_string();
  j["phenotypes"] = c.phenotypes;
  j["split"] = {{"train", c.split.train_fraction}, {"val", c.split.val_fraction}, {"test", c.split.test_fraction}};
  j["vocab_min_count"] = c.vocab_min_count;
  j["pretrain"] = {{"enabled", c.pretrain},
                   {"dim", c.pretrain_config.dim},
                   {"window", c.pretrain_config.window},
                   {"negatives", c.pretrain_config.negatives},
                   {"epochs", c.pretrain_config.epochs},
                   {"learning_rate", c.pretrain_config.learning_rate}};
  auto cnn = nlohmann::ordered_json(to_json(c.cnn));
  cnn.erase("seed");
  cnn.erase("n_heads");
  j["cnn"] = cnn;
  j["baselines"] = {{"lr_lambda", c.baselines.lr_lambda ? nlohmann::ordered_json(*c.baselines.lr_lambda) : "auto"},
                    {"lr_max_iterations", c.baselines.lr_max_iterations},
                    {"lr_tolerance", c.baselines.lr_tolerance},
                    {"rf_trees", c.baselines.rf_trees},
                    {"rf_max_depth", c.baselines.rf_max_depth},
                    {"rf_features_per_split", c.baselines.rf_features_per_split},
                    {"rf_bootstrap", c.baselines.rf_bootstrap},
                    {"ngram_tfidf", c.baselines.ngram_tfidf},
                    {"concept_tfidf", c.baselines.concept_tfidf}};
  j["models"] = c.models;
  j["multilabel"] = c.multilabel;
  j["saliency"] = {{"top_k", c.saliency_top_k}, {"method", to_string(c.saliency_method)}};
  j["threads"] = c.threads;
  j["seed"] = c.seed;
  return j;
}

// ---------------------------------------------------------------------------
// Seeds: every component seeds from derive_seed(root, name), so adding or
// removing a model never shifts another model's random stream.

inline std::uint64_t split_seed(std::uint64_t root) { return derive_seed(root, "split"); }
inline std::uint64_t pretrain_seed(std::uint64_t root) { return derive_seed(root, "pretrain"); }
inline std::uint64_t model_seed(std::uint64_t root, const std::string& model, const std::string& phenotype) {
  return derive_seed(root, model + "/" + phenotype);
}

inline std::string model_file_stem(const std::string& model, const std::string& phenotype) { return model + "__" + phenotype; }

// ---------------------------------------------------------------------------
// Baseline construction

inline FeatureRecipe baseline_recipe(const std::string& model, const std::string& phenotype, const BaselineConfig& b,
                                     const ConceptDictionary* dictionary) {
  FeatureRecipe r;
  if (model == "2gram-lr" || model == "3gram-lr") {
    r.source = FeatureRecipe::Source::Ngrams;
    r.ngram = model == "2gram-lr" ? 2 : 3;
    r.tfidf = b.ngram_tfidf;
    return r;
  }
  if (!dictionary) throw ConfigError("model " + model + " needs a concept dictionary");
  r.source = FeatureRecipe::Source::Concepts;
  r.tfidf = b.concept_tfidf;
  r.dictionary = model.starts_with("filter-") ? filter_dictionary(*dictionary, phenotype) : *dictionary;
  return r;
}

/// Trains one baseline on tokenized training notes.
inline BaselineModel train_baseline(const std::string& model, const std::string& phenotype, std::span<const TokenSequence> docs,
                                    std::span<const int> labels, const BaselineConfig& b, const ConceptDictionary* dictionary,
                                    std::uint64_t seed, unsigned threads = 1) {
  if (model == "cnn" || !is_known_model(model)) throw ConfigError("not a baseline model: " + model);
  if (docs.empty()) throw DataError("no training notes for " + model + "/" + phenotype);
  BaselineModel m;
  m.kind = model;
  m.phenotype = phenotype;
  m.recipe = baseline_recipe(model, phenotype, b, dictionary);
  std::vector<CountMap> counts;
  counts.reserve(docs.size());
  for (const auto& d : docs) counts.push_back(m.recipe.counts(d));
  if (std::all_of(counts.begin(), counts.end(), [](const CountMap& c) { return c.empty(); })) {
    spdlog::warn("{}/{}: no training note has any feature", model, phenotype);
    m.space.n_documents = counts.size();
  } else {
    m.space = fit_feature_space(counts);
  }
  std::vector<FeatureVector> X;
  X.reserve(counts.size());
  for (const auto& c : counts) X.push_back(m.recipe.transform(c, m.space));

  if (model.ends_with("-lr")) {
    const double lambda = b.lr_lambda ? *b.lr_lambda : 1.0 / static_cast<double>(docs.size());
    LogregOptions opt;
    opt.max_iterations = b.lr_max_iterations;
    opt.tolerance = b.lr_tolerance;
    const auto fit = train_logreg(X, labels, m.space.dim(), lambda, opt);
    m.learner = fit.model;
    m.hyperparameters = {{"l2_lambda", lambda},       {"max_iterations", opt.max_iterations}, {"tolerance", opt.tolerance},
                         {"adadelta_rho", opt.rho},   {"adadelta_eps", opt.eps},              {"iterations", fit.iterations},
                         {"converged", fit.converged}};
  } else {
    ForestOptions opt;
    opt.n_trees = b.rf_trees;
    opt.max_depth = b.rf_max_depth;
    opt.features_per_split = b.rf_features_per_split;
    opt.bootstrap = b.rf_bootstrap;
    opt.seed = seed;
    opt.threads = threads;
    // train_rf needs at least one column; an empty space yields single-leaf trees.
    const std::size_t dim = std::max<std::size_t>(1, m.space.dim());
    m.learner = train_rf(X, labels, dim, opt);
    const auto& forest = std::get<Forest>(m.learner);
    m.hyperparameters = {{"n_trees", opt.n_trees},
                         {"max_depth", opt.max_depth},
                         {"features_per_split", forest.n_features_per_split},
                         {"bootstrap", opt.bootstrap},
                         {"seed", seed}};
  }
  m.hyperparameters["tfidf"] = m.recipe.tfidf;
  return m;
}

// ---------------------------------------------------------------------------
// Pipeline

/// Labels of `notes` for one phenotype; every note must carry that label.
inline std::vector<int> phenotype_labels(std::span<const Note> notes, const std::string& phenotype) {
  std::vector<int> y;
  y.reserve(notes.size());
  for (const auto& n : notes) {
    if (!n.labels || !n.labels->contains(phenotype)) throw DataError("note " + n.note_id + " has no label for phenotype " + phenotype);
    y.push_back(n.labels->at(phenotype));
  }
  return y;
}

/// Shared state of one experiment: the split, vocabulary and embeddings are
/// computed once and reused by every model.
class ExperimentPipeline {
 public:
  explicit ExperimentPipeline(ExperimentConfig config) : config_(std::move(config)) {
    config_.validate();
    config_.check_inputs();
    notes_ = read_corpus(config_.labeled_corpus);
    if (notes_.empty()) throw DataError("labeled corpus " + config_.labeled_corpus.string() + " is empty");
    for (const auto& p : config_.phenotypes) phenotype_labels(notes_, p);
    split_ = split_dataset(notes_, SplitSpec{config_.split.train_fraction, config_.split.val_fraction,
                                             config_.split.test_fraction, split_seed(config_.seed)});
    if (split_.train.empty()) throw DataError("training split is empty");
    if (split_.test.empty()) spdlog::warn("test split is empty; metrics will be undefined");
    train_tokens_ = tokenize_notes(split_.train);
    test_tokens_ = tokenize_notes(split_.test);
    if (config_.dictionary && std::any_of(config_.models.begin(), config_.models.end(), uses_dictionary)) {
      dictionary_ = read_dictionary(*config_.dictionary);
    }
  }

  const ExperimentConfig& config() const { return config_; }
  const DatasetSplit& split() const { return split_; }
  const std::vector<TokenSequence>& train_tokens() const { return train_tokens_; }
  const std::vector<TokenSequence>& test_tokens() const { return test_tokens_; }

  /// Built from the unlabeled corpus plus the training split only.
  const Vocabulary& vocabulary() {
    if (!vocab_) {
      std::vector<TokenSequence> docs = unlabeled_tokens();
      docs.insert(docs.end(), train_tokens_.begin(), train_tokens_.end());
      vocab_ = build_vocabulary(docs, config_.vocab_min_count);
    }
    return *vocab_;
  }

  const EmbeddingMatrix& embeddings() {
    if (!embeddings_) {
      const auto& vocab = vocabulary();
      PretrainConfig pc = config_.pretrain_config;
      pc.seed = pretrain_seed(config_.seed);
      if (!config_.pretrain) pc.epochs = 0;
      const auto& unl = unlabeled_tokens();
      const auto& corpus = unl.empty() ? train_tokens_ : unl;
      embeddings_ = pretrain_embeddings(corpus, vocab, pc);
    }
    return *embeddings_;
  }

  /// Per-phenotype CNN, or the joint model when `phenotype` is empty.
  CnnModel train_cnn(const std::string& phenotype, const StepHook& hook = {}) {
    const std::vector<std::string> heads = phenotype.empty() ? config_.phenotypes : std::vector<std::string>{phenotype};
    CnnConfig cc = config_.cnn;
    cc.n_heads = static_cast<int>(heads.size());
    cc.seed = model_seed(config_.seed, "cnn", phenotype.empty() ? "multilabel" : phenotype);
    auto model = init_model(cc, vocabulary(), embeddings(), heads);
    const auto train_set = make_examples(split_.train, model.vocab, heads);
    const auto val_set = make_examples(split_.val, model.vocab, heads);
    train(model, train_set, val_set, hook);
    return model;
  }

  BaselineModel train_baseline_model(const std::string& model, const std::string& phenotype) {
    const auto y = phenotype_labels(split_.train, phenotype);
    return train_baseline(model, phenotype, train_tokens_, y, config_.baselines, dictionary_ ? &*dictionary_ : nullptr,
                          model_seed(config_.seed, model, phenotype), config_.threads);
  }

  ConfusionMatrix evaluate_cnn(const CnnModel& model, const std::string& phenotype) const {
    const int head = model.head_index(phenotype);
    const auto y = phenotype_labels(split_.test, phenotype);
    if (y.empty()) return {};
    std::vector<std::vector<TokenId>> docs;
    for (const auto& t : test_tokens_) docs.push_back(model.vocab.encode(t));
    const auto preds = predict_batch(model, docs, model.config.threshold, config_.threads);
    std::vector<int> p;
    for (const auto& pr : preds) p.push_back(pr[static_cast<std::size_t>(head)].label);
    return confusion(p, y);
  }

  ConfusionMatrix evaluate_baseline(const BaselineModel& model) const {
    const auto y = phenotype_labels(split_.test, model.phenotype);
    if (y.empty()) return {};
    std::vector<int> p;
    for (const auto& t : test_tokens_) p.push_back(model.predict_probability(t) >= 0.5 ? 1 : 0);
    return confusion(p, y);
  }

  SaliencyReport explain_test(const CnnModel& model, const std::string& phenotype) const {
    std::vector<ScoredDocument> docs;
    for (std::size_t i = 0; i < split_.test.size(); ++i) docs.push_back({split_.test[i].note_id, test_tokens_[i]});
    return global_top_phrases(model, std::span<const ScoredDocument>(docs), phenotype, config_.saliency_top_k,
                              config_.saliency_method);
  }

 private:
  const std::vector<TokenSequence>& unlabeled_tokens() {
    if (!unlabeled_tokens_) {
      unlabeled_tokens_.emplace();
      if (config_.unlabeled_corpus) {
        const auto unl = read_corpus(*config_.unlabeled_corpus);
        *unlabeled_tokens_ = tokenize_notes(unl);
      }
    }
    return *unlabeled_tokens_;
  }

  ExperimentConfig config_;
  std::vector<Note> notes_;
  DatasetSplit split_;
  std::vector<TokenSequence> train_tokens_;
  std::vector<TokenSequence> test_tokens_;
  std::optional<std::vector<TokenSequence>> unlabeled_tokens_;
  std::optional<ConceptDictionary> dictionary_;
  std::optional<Vocabulary> vocab_;
  std::optional<EmbeddingMatrix> embeddings_;
};

// ---------------------------------------------------------------------------
// Reports

inline constexpr int kReportFormatVersion = 1;

inline std::string report_preamble(const ExperimentConfig& c, const std::string& split_hash) {
  std::ostringstream os;
  os << "# format_version: " << kReportFormatVersion << '\n';
  os << "# split_hash: " << split_hash << '\n';
  os << "# config: " << to_json(c, false).dump() << '\n';
  return os.str();
}

inline void write_text_file(const std::filesystem::path& path, const std::string& content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << content;
}

inline std::string metrics_csv(std::span<const MetricRow> rows, const std::string& preamble) {
  std::ostringstream os;
  os << preamble << MetricRow::kHeader << '\n';
  for (const auto& r : rows) os << r.to_csv() << '\n';
  return os.str();
}

/// phenotype x model grid of F1 percentages.
inline std::string f1_table_csv(std::span<const MetricRow> rows, std::span<const std::string> phenotypes,
                                std::span<const std::string> models, const std::string& preamble) {
  std::ostringstream os;
  os << preamble << "phenotype";
  for (const auto& m : models) os << ',' << m;
  os << '\n';
  for (const auto& p : phenotypes) {
    os << p;
    for (const auto& m : models) {
      auto it = std::find_if(rows.begin(), rows.end(), [&](const MetricRow& r) { return r.phenotype == p && r.model == m; });
      os << ',' << (it == rows.end() ? std::string("NA") : format_percent(f1(it->cm)));
    }
    os << '\n';
  }
  return os.str();
}

struct ExperimentResult {
  std::vector<MetricRow> rows;
  std::string split_hash;
  std::filesystem::path metrics_path;
  std::filesystem::path f1_table_path;
  std::vector<std::filesystem::path> checkpoints;
};

/// Runs the requested models on one split and writes every artifact under
/// config.output_dir:
///   resolved_config.json, split/{train,val,test}.ids, vocab/embeddings.txt,
///   models/<model>__<phenotype>.json, reports/{metrics,f1_table}.csv,
///   saliency/<phenotype>.{tsv,json}
inline ExperimentResult run_experiment(const ExperimentConfig& config, const StepHook& cnn_hook = {}) {
  ExperimentPipeline pipe(config);
  const auto& cfg = pipe.config();
  const auto& out = cfg.output_dir;
  std::filesystem::create_directories(out);
  write_text_file(out / "resolved_config.json", to_json(cfg).dump(2) + "\n");
  write_split_manifest(out / "split", pipe.split());

  ExperimentResult result;
  result.split_hash = pipe.split().manifest_hash();
  std::vector<std::string> models;
  for (const auto& m : known_models()) {
    if (std::find(cfg.models.begin(), cfg.models.end(), m) != cfg.models.end()) models.push_back(m);
  }

  std::map<std::pair<std::string, std::string>, ConfusionMatrix> cms;
  auto save = [&](const std::string& stem, const auto& model) {
    const auto path = out / "models" / (stem + ".json");
    std::filesystem::create_directories(path.parent_path());
    if constexpr (std::is_same_v<std::decay_t<decltype(model)>, CnnModel>) {
      save_cnn_checkpoint(path, model);
    } else {
      save_baseline_checkpoint(path, model);
    }
    result.checkpoints.push_back(path);
  };

  for (const auto& m : models) {
    if (m == "cnn") {
      std::filesystem::create_directories(out / "vocab");
      write_embeddings(out / "vocab" / "embeddings.txt", pipe.embeddings(), pipe.vocabulary());
      if (cfg.multilabel) {
        spdlog::info("training joint cnn over {} phenotypes", cfg.phenotypes.size());
        const auto model = pipe.train_cnn("", cnn_hook);
        save(model_file_stem("cnn", "multilabel"), model);
        for (const auto& p : cfg.phenotypes) {
          cms[{p, m}] = pipe.evaluate_cnn(model, p);
          write_saliency_report(out / "saliency" / p, pipe.explain_test(model, p));
        }
      } else {
        for (const auto& p : cfg.phenotypes) {
          spdlog::info("training cnn for {}", p);
          const auto model = pipe.train_cnn(p, cnn_hook);
          save(model_file_stem("cnn", p), model);
          cms[{p, m}] = pipe.evaluate_cnn(model, p);
          write_saliency_report(out / "saliency" / p, pipe.explain_test(model, p));
        }
      }
      continue;
    }
    for (const auto& p : cfg.phenotypes) {
      spdlog::info("training {} for {}", m, p);
      const auto model = pipe.train_baseline_model(m, p);
      save(model_file_stem(m, p), model);
      cms[{p, m}] = pipe.evaluate_baseline(model);
    }
  }

  for (const auto& p : cfg.phenotypes) {
    for (const auto& m : models) result.rows.push_back({p, m, cms.at({p, m})});
  }
  const auto preamble = report_preamble(cfg, result.split_hash);
  result.metrics_path = out / "reports" / "metrics.csv";
  result.f1_table_path = out / "reports" / "f1_table.csv";
  write_text_file(result.metrics_path, metrics_csv(result.rows, preamble));
  write_text_file(result.f1_table_path, f1_table_csv(result.rows, cfg.phenotypes, models, preamble));
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoint-level helpers for the individual subcommands

using AnyModel = std::variant<CnnModel, BaselineModel>;

inline AnyModel load_any_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ModelLoadError("cannot open checkpoint " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception&) {
    throw ModelLoadError("checkpoint " + path.string() + " is not valid JSON");
  }
  const auto format = j.is_object() ? j.value("format", std::string()) : std::string();
  if (format == "phenocnn.cnn") return cnn_from_json(j);
  if (format == "phenocnn.baseline") return baseline_from_json(j);
  throw ModelLoadError("unrecognized checkpoint format in " + path.string());
}

/// Rejects corpora that the checkpoint's vocabulary barely covers, the
/// symptom of pairing a model with the wrong corpus.
inline void check_vocabulary_coverage(const Vocabulary& vocab, std::span<const TokenSequence> docs, double max_unk_rate = 0.5) {
  std::size_t total = 0, unk = 0;
  for (const auto& d : docs) {
    for (const auto& t : d) {
      ++total;
      if (!vocab.contains(t)) ++unk;
    }
  }
  if (total == 0) throw DataError("corpus has no tokens");
  const double rate = static_cast<double>(unk) / static_cast<double>(total);
  if (rate > max_unk_rate) {
    throw DataError("corpus does not match the checkpoint vocabulary (hash " + vocab.hash() + "): " +
                    std::to_string(static_cast<int>(rate * 100)) + "% of tokens are unknown");
  }
}

/// Metric rows of a checkpoint on labeled notes (one row per phenotype it covers).
inline std::vector<MetricRow> evaluate_checkpoint(const AnyModel& model, std::span<const Note> notes, const std::string& only_phenotype = "") {
  if (notes.empty()) throw DataError("no notes to evaluate");
  std::vector<MetricRow> rows;
  const auto tokens = tokenize_notes(notes);
  if (const auto* cnn = std::get_if<CnnModel>(&model)) {
    check_vocabulary_coverage(cnn->vocab, tokens);
    const std::string kind = cnn->phenotypes.size() > 1 ? "cnn-multilabel" : "cnn";
    std::vector<std::vector<int>> preds(cnn->phenotypes.size());
    for (const auto& t : tokens) {
      const auto pr = predict(*cnn, t, cnn->config.threshold);
      for (std::size_t h = 0; h < pr.size(); ++h) preds[h].push_back(pr[h].label);
    }
    for (std::size_t h = 0; h < cnn->phenotypes.size(); ++h) {
      const auto& p = cnn->phenotypes[h];
      if (!only_phenotype.empty() && p != only_phenotype) continue;
      rows.push_back({p, kind, confusion(preds[h], phenotype_labels(notes, p))});
    }
  } else {
    const auto& b = std::get<BaselineModel>(model);
    if (only_phenotype.empty() || b.phenotype == only_phenotype) {
      std::vector<int> p;
      for (const auto& t : tokens) p.push_back(b.predict_probability(t) >= 0.5 ? 1 : 0);
      rows.push_back({b.phenotype, b.kind, confusion(p, phenotype_labels(notes, b.phenotype))});
    }
  }
  if (rows.empty()) throw ConfigError("checkpoint has no model for phenotype " + only_phenotype);
  return rows;
}

}  // namespace phenocnn
