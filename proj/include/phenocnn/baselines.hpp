#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <variant>
#include <vector>

#include <json.hpp>
#include <spdlog/spdlog.h>

#include "phenocnn/cnn.hpp"
#include "phenocnn/concepts.hpp"
#include "phenocnn/errors.hpp"
#include "phenocnn/featurize.hpp"
#include "phenocnn/rng.hpp"

namespace phenocnn {

// ---------------------------------------------------------------------------
// L2-regularized logistic regression

struct LinearModel {
  std::vector<double> weights;
  double bias = 0.0;
  double l2_lambda = 0.0;

  bool operator==(const LinearModel&) const = default;
};

inline double linear_score(const LinearModel& m, const FeatureVector& x) {
  double z = m.bias;
  for (const auto& [c, v] : x.entries) {
    if (static_cast<std::size_t>(c) < m.weights.size()) z += m.weights[static_cast<std::size_t>(c)] * v;
  }
  return z;
}

inline double predict_logreg(const LinearModel& m, const FeatureVector& x) { return sigmoid(linear_score(m, x)); }

/// mean_i BCE(sigmoid(w.x_i + b), y_i) + (lambda/2) ||w||^2; the bias is not penalized.
inline double logreg_objective(const LinearModel& m, std::span<const FeatureVector> X, std::span<const int> y) {
  double total = 0.0;
  for (std::size_t i = 0; i < X.size(); ++i) {
    const double z = linear_score(m, X[i]);
    total += y[i] ? neg_log_sigmoid(z) : neg_log_sigmoid(-z);
  }
  double sq = 0.0;
  for (double w : m.weights) sq += w * w;
  return total / static_cast<double>(X.size()) + 0.5 * m.l2_lambda * sq;
}

/// Gradient of logreg_objective; returns the bias component, fills grad_w.
inline double logreg_gradient(const LinearModel& m, std::span<const FeatureVector> X, std::span<const int> y,
                              std::vector<double>& grad_w) {
  grad_w.assign(m.weights.size(), 0.0);
  double grad_b = 0.0;
  const double inv_n = 1.0 / static_cast<double>(X.size());
  for (std::size_t i = 0; i < X.size(); ++i) {
    const double r = (sigmoid(linear_score(m, X[i])) - y[i]) * inv_n;
    grad_b += r;
    for (const auto& [c, v] : X[i].entries) grad_w[static_cast<std::size_t>(c)] += r * v;
  }
  for (std::size_t k = 0; k < grad_w.size(); ++k) grad_w[k] += m.l2_lambda * m.weights[k];
  return grad_b;
}

struct LogregOptions {
  int max_iterations = 2000;
  double tolerance = 1e-5;  // on the gradient infinity-norm
  double rho = 0.95;
  double eps = 1e-6;
  int max_halvings = 30;
};

struct LogregFit {
  LinearModel model;
  int iterations = 0;
  bool converged = false;
  std::vector<double> objective_history;  // objective before each iteration, then the final value
};

namespace detail {

/// Adadelta split in two so the step can be shortened before it is recorded.
inline double adadelta_delta(double g, AdadeltaSlot& slot, std::size_t k, const LogregOptions& opt) {
  slot.sq_grad[k] = opt.rho * slot.sq_grad[k] + (1.0 - opt.rho) * g * g;
  return -std::sqrt(slot.sq_update[k] + opt.eps) / std::sqrt(slot.sq_grad[k] + opt.eps) * g;
}

inline void adadelta_commit(double dx, AdadeltaSlot& slot, std::size_t k, const LogregOptions& opt) {
  slot.sq_update[k] = opt.rho * slot.sq_update[k] + (1.0 - opt.rho) * dx * dx;
}

}  // namespace detail

/// Full-batch gradient descent with adadelta updates from a zero start. A
/// step that would raise the objective is halved (up to max_halvings times).
inline LogregFit train_logreg(std::span<const FeatureVector> X, std::span<const int> y, std::size_t dim, double lambda,
                              const LogregOptions& opt = {}) {
  if (X.empty() || X.size() != y.size()) throw std::invalid_argument("train_logreg: need |X| = |y| > 0");
  if (!(lambda >= 0)) throw std::invalid_argument("train_logreg: lambda must be >= 0");
  for (const auto& x : X) {
    for (const auto& e : x.entries) {
      if (e.first < 0 || static_cast<std::size_t>(e.first) >= dim) throw std::invalid_argument("train_logreg: feature index out of range");
    }
  }
  LogregFit fit;
  fit.model.weights.assign(dim, 0.0);
  fit.model.l2_lambda = lambda;

  AdadeltaSlot w_slot, b_slot;
  w_slot.sq_grad.assign(dim, 0.0);
  w_slot.sq_update.assign(dim, 0.0);
  b_slot.sq_grad.assign(1, 0.0);
  b_slot.sq_update.assign(1, 0.0);
  std::vector<double> grad_w;
  for (int it = 0; it < opt.max_iterations; ++it) {
    fit.objective_history.push_back(logreg_objective(fit.model, X, y));
    double grad_b = logreg_gradient(fit.model, X, y, grad_w);
    double inf_norm = std::abs(grad_b);
    for (double g : grad_w) inf_norm = std::max(inf_norm, std::abs(g));
    if (inf_norm < opt.tolerance) {
      fit.converged = true;
      break;
    }
    // Adadelta proposes the step; halve it until the objective does not go up.
    const LinearModel before = fit.model;
    const double f0 = fit.objective_history.back();
    std::vector<double> step_w(grad_w.size());
    double step_b = 0.0;
    for (std::size_t k = 0; k < grad_w.size(); ++k) step_w[k] = detail::adadelta_delta(grad_w[k], w_slot, k, opt);
    step_b = detail::adadelta_delta(grad_b, b_slot, 0, opt);
    double scale = 1.0;
    for (int halving = 0; halving <= opt.max_halvings; ++halving, scale *= 0.5) {
      for (std::size_t k = 0; k < step_w.size(); ++k) fit.model.weights[k] = before.weights[k] + scale * step_w[k];
      fit.model.bias = before.bias + scale * step_b;
      if (logreg_objective(fit.model, X, y) <= f0) break;
      if (halving == opt.max_halvings) {
        fit.model = before;
        scale = 0.0;
      }
    }
    for (std::size_t k = 0; k < step_w.size(); ++k) detail::adadelta_commit(scale * step_w[k], w_slot, k, opt);
    detail::adadelta_commit(scale * step_b, b_slot, 0, opt);
    fit.iterations = it + 1;
  }
  fit.objective_history.push_back(logreg_objective(fit.model, X, y));
  const bool single_class = std::all_of(y.begin(), y.end(), [&](int v) { return v == y.front(); });
  if (!fit.converged && single_class && lambda == 0.0) {
    spdlog::warn("train_logreg: single-class labels without regularization; weights grow without bound, stopped at {} iterations",
                 fit.iterations);
  }
  return fit;
}

// ---------------------------------------------------------------------------
// Random forest (Gini impurity)

struct TreeNode {
  int feature = -1;  // -1 for leaves
  double threshold = 0.0;
  int left = -1;
  int right = -1;
  double value = 0.0;  // positive fraction at a leaf

  bool is_leaf() const { return feature < 0; }
  bool operator==(const TreeNode&) const = default;
};

struct DecisionTree {
  std::vector<TreeNode> nodes;  // nodes[0] is the root

  /// Goes left when x[feature] <= threshold.
  double predict(const FeatureVector& x) const {
    int n = 0;
    while (!nodes[static_cast<std::size_t>(n)].is_leaf()) {
      const auto& node = nodes[static_cast<std::size_t>(n)];
      n = x.get(node.feature) <= node.threshold ? node.left : node.right;
    }
    return nodes[static_cast<std::size_t>(n)].value;
  }

  bool operator==(const DecisionTree&) const = default;
};

struct ForestOptions {
  int n_trees = 100;
  int max_depth = 0;           // 0 = unlimited
  int features_per_split = 0;  // 0 = ceil(sqrt(D))
  bool bootstrap = true;
  std::uint64_t seed = 0;
  unsigned threads = 1;
};

struct Forest {
  std::vector<DecisionTree> trees;
  int n_features_per_split = 0;
  int max_depth = 0;
  bool bootstrap = true;
  std::uint64_t seed = 0;

  bool operator==(const Forest&) const = default;
};

namespace detail {

/// Column-major dense copy of the training matrix.
struct DenseColumns {
  std::size_t n_rows = 0;
  std::size_t n_cols = 0;
  std::vector<double> values;

  DenseColumns(std::span<const FeatureVector> X, std::size_t dim) : n_rows(X.size()), n_cols(dim), values(X.size() * dim, 0.0) {
    for (std::size_t i = 0; i < X.size(); ++i) {
      for (const auto& [c, v] : X[i].entries) values[static_cast<std::size_t>(c) * n_rows + i] = v;
    }
  }

  double at(std::size_t row, std::size_t col) const { return values[col * n_rows + row]; }
};

/// Gini impurity of a binary node, weighted by its size: n * 2p(1-p).
inline double weighted_gini(double positives, double n) { return n > 0 ? 2.0 * positives * (n - positives) / n : 0.0; }

inline DecisionTree grow_tree(const DenseColumns& data, std::span<const int> y, std::vector<std::size_t> samples,
                              int max_depth, int features_per_split, Rng& rng) {
  struct Pending {
    int node;
    std::vector<std::size_t> samples;
    int depth;
  };
  DecisionTree tree;
  tree.nodes.emplace_back();
  std::vector<Pending> stack;
  stack.push_back({0, std::move(samples), 0});
  std::vector<std::size_t> features(data.n_cols);
  std::vector<std::pair<double, int>> column;

  while (!stack.empty()) {
    Pending job = std::move(stack.back());
    stack.pop_back();
    const double n = static_cast<double>(job.samples.size());
    double positives = 0;
    for (auto s : job.samples) positives += y[s];
    auto& leaf = tree.nodes[static_cast<std::size_t>(job.node)];
    leaf.value = n > 0 ? positives / n : 0.0;
    if (job.samples.size() < 2 || positives == 0 || positives == n || (max_depth > 0 && job.depth >= max_depth)) {
      continue;
    }

    // Draw features without replacement until `features_per_split` non-constant ones were examined.
    for (std::size_t f = 0; f < features.size(); ++f) features[f] = f;
    const double parent = weighted_gini(positives, n);
    double best_gain = -1.0;
    int best_feature = -1;
    double best_threshold = 0.0;
    int inspected = 0;
    for (std::size_t drawn = 0; drawn < features.size() && inspected < features_per_split; ++drawn) {
      const std::size_t pick = drawn + rng.below(features.size() - drawn);
      std::swap(features[drawn], features[pick]);
      const std::size_t f = features[drawn];
      column.clear();
      for (auto s : job.samples) column.emplace_back(data.at(s, f), y[s]);
      std::sort(column.begin(), column.end());
      if (column.front().first == column.back().first) continue;
      ++inspected;
      double left_pos = 0;
      for (std::size_t k = 1; k < column.size(); ++k) {
        left_pos += column[k - 1].second;
        if (column[k - 1].first == column[k].first) continue;
        const double nl = static_cast<double>(k);
        const double gain = parent - weighted_gini(left_pos, nl) - weighted_gini(positives - left_pos, n - nl);
        if (gain > best_gain) {
          best_gain = gain;
          best_feature = static_cast<int>(f);
          const double lo = column[k - 1].first, hi = column[k].first;
          double mid = lo + (hi - lo) / 2.0;
          if (!(mid < hi)) mid = lo;
          best_threshold = mid;
        }
      }
    }
    if (best_feature < 0) continue;

    std::vector<std::size_t> left, right;
    for (auto s : job.samples) {
      (data.at(s, static_cast<std::size_t>(best_feature)) <= best_threshold ? left : right).push_back(s);
    }
    const int left_id = static_cast<int>(tree.nodes.size());
    tree.nodes.emplace_back();
    tree.nodes.emplace_back();
    auto& node = tree.nodes[static_cast<std::size_t>(job.node)];
    node.feature = best_feature;
    node.threshold = best_threshold;
    node.left = left_id;
    node.right = left_id + 1;
    stack.push_back({left_id + 1, std::move(right), job.depth + 1});
    stack.push_back({left_id, std::move(left), job.depth + 1});
  }
  return tree;
}

}  // namespace detail

/// Bagged Gini trees. Tree t uses its own stream derived from (seed, t), so
/// the result does not depend on how trees are scheduled across threads.
inline Forest train_rf(std::span<const FeatureVector> X, std::span<const int> y, std::size_t dim, const ForestOptions& opt = {}) {
  if (X.empty() || X.size() != y.size()) throw std::invalid_argument("train_rf: need |X| = |y| > 0");
  if (opt.n_trees < 1) throw std::invalid_argument("train_rf: n_trees must be >= 1");
  Forest forest;
  forest.n_features_per_split =
      opt.features_per_split > 0 ? opt.features_per_split
                                 : std::max(1, static_cast<int>(std::ceil(std::sqrt(static_cast<double>(dim)))));
  forest.max_depth = opt.max_depth;
  forest.bootstrap = opt.bootstrap;
  forest.seed = opt.seed;
  forest.trees.resize(static_cast<std::size_t>(opt.n_trees));
  const detail::DenseColumns data(X, dim);

  auto grow = [&](std::size_t t) {
    Rng rng(derive_seed(opt.seed, "tree/" + std::to_string(t)));
    std::vector<std::size_t> samples(X.size());
    for (std::size_t i = 0; i < samples.size(); ++i) samples[i] = opt.bootstrap ? rng.below(X.size()) : i;
    forest.trees[t] = detail::grow_tree(data, y, std::move(samples), opt.max_depth, forest.n_features_per_split, rng);
  };
  const unsigned threads = std::max(1u, std::min<unsigned>(opt.threads, static_cast<unsigned>(opt.n_trees)));
  if (threads == 1) {
    for (std::size_t t = 0; t < forest.trees.size(); ++t) grow(t);
  } else {
    std::vector<std::jthread> pool;
    for (unsigned w = 0; w < threads; ++w) {
      pool.emplace_back([&, w] {
        for (std::size_t t = w; t < forest.trees.size(); t += threads) grow(t);
      });
    }
  }
  return forest;
}

/// Mean of the leaf positive-fractions reached in every tree.
inline double predict_rf(const Forest& forest, const FeatureVector& x) {
  if (forest.trees.empty()) throw std::invalid_argument("predict_rf: empty forest");
  double sum = 0.0;
  for (const auto& t : forest.trees) sum += t.predict(x);
  return sum / static_cast<double>(forest.trees.size());
}

// ---------------------------------------------------------------------------
// Feature pipelines and baseline checkpoints

/// How a note becomes a feature vector for one baseline.
struct FeatureRecipe {
  enum class Source { Ngrams, Concepts };
  Source source = Source::Ngrams;
  int ngram = 2;
  bool tfidf = false;
  ConceptDictionary dictionary;  // Concepts only

  CountMap counts(std::span<const std::string> tokens) const {
    if (source == Source::Ngrams) return extract_ngrams(tokens, ngram);
    return concept_count_map(count_concepts(match_concepts(tokens, dictionary)));
  }

  FeatureVector transform(const CountMap& c, const FeatureSpace& space) const {
    return tfidf ? tfidf_transform(c, space) : count_transform(c, space);
  }
};

struct BaselineModel {
  std::string kind;  // e.g. "2gram-lr", "filter-rf"
  std::string phenotype;
  FeatureRecipe recipe;
  FeatureSpace space;
  std::variant<LinearModel, Forest> learner;
  nlohmann::json hyperparameters = nlohmann::json::object();

  double predict_probability(std::span<const std::string> tokens) const {
    const FeatureVector x = recipe.transform(recipe.counts(tokens), space);
    if (const auto* lr = std::get_if<LinearModel>(&learner)) return predict_logreg(*lr, x);
    return predict_rf(std::get<Forest>(learner), x);
  }
};

inline constexpr int kBaselineCheckpointVersion = 1;

inline nlohmann::json to_json(const Forest& f) {
  nlohmann::json trees = nlohmann::json::array();
  for (const auto& t : f.trees) {
    std::vector<int> feature, left, right;
    std::vector<double> threshold, value;
    for (const auto& n : t.nodes) {
      feature.push_back(n.feature);
      left.push_back(n.left);
      right.push_back(n.right);
      threshold.push_back(n.threshold);
      value.push_back(n.value);
    }
    trees.push_back({{"feature", feature}, {"threshold", threshold}, {"left", left}, {"right", right}, {"value", value}});
  }
  return {{"trees", trees}, {"n_features_per_split", f.n_features_per_split}, {"max_depth", f.max_depth},
          {"bootstrap", f.bootstrap}, {"seed", f.seed}};
}

inline Forest forest_from_json(const nlohmann::json& j) {
  Forest f;
  f.n_features_per_split = j.at("n_features_per_split").get<int>();
  f.max_depth = j.at("max_depth").get<int>();
  f.bootstrap = j.at("bootstrap").get<bool>();
  f.seed = j.at("seed").get<std::uint64_t>();
  for (const auto& jt : j.at("trees")) {
    const auto feature = jt.at("feature").get<std::vector<int>>();
    const auto left = jt.at("left").get<std::vector<int>>();
    const auto right = jt.at("right").get<std::vector<int>>();
    const auto threshold = jt.at("threshold").get<std::vector<double>>();
    const auto value = jt.at("value").get<std::vector<double>>();
    const std::size_t n = feature.size();
    if (n == 0 || left.size() != n || right.size() != n || threshold.size() != n || value.size() != n) {
      throw ModelLoadError("malformed tree in checkpoint");
    }
    DecisionTree t;
    for (std::size_t i = 0; i < n; ++i) {
      TreeNode node{feature[i], threshold[i], left[i], right[i], value[i]};
      if (!node.is_leaf() && (node.left <= static_cast<int>(i) || node.right <= static_cast<int>(i) ||
                              node.left >= static_cast<int>(n) || node.right >= static_cast<int>(n))) {
        throw ModelLoadError("tree child index out of range");
      }
      t.nodes.push_back(node);
    }
    f.trees.push_back(std::move(t));
  }
  return f;
}

inline nlohmann::json to_json(const BaselineModel& m) {
  nlohmann::json j;
  j["format"] = "phenocnn.baseline";
  j["format_version"] = kBaselineCheckpointVersion;
  j["kind"] = m.kind;
  j["phenotype"] = m.phenotype;
  j["hyperparameters"] = m.hyperparameters;
  nlohmann::json recipe;
  recipe["source"] = m.recipe.source == FeatureRecipe::Source::Ngrams ? "ngrams" : "concepts";
  recipe["ngram"] = m.recipe.ngram;
  recipe["tfidf"] = m.recipe.tfidf;
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : m.recipe.dictionary.entries()) {
    entries.push_back({{"concept_id", e.concept_id}, {"phrase", e.phrase}, {"phenotypes", e.phenotypes}});
  }
  recipe["dictionary"] = entries;
  j["features"] = recipe;
  j["feature_space"] = to_json(m.space);
  if (const auto* lr = std::get_if<LinearModel>(&m.learner)) {
    j["learner"] = {{"type", "logistic_regression"}, {"weights", lr->weights}, {"bias", lr->bias}, {"l2_lambda", lr->l2_lambda}};
  } else {
    j["learner"] = {{"type", "random_forest"}, {"forest", to_json(std::get<Forest>(m.learner))}};
  }
  return j;
}

inline BaselineModel baseline_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format").get<std::string>() != "phenocnn.baseline") throw ModelLoadError("not a baseline checkpoint");
    if (j.at("format_version").get<int>() != kBaselineCheckpointVersion) throw ModelLoadError("unsupported baseline checkpoint version");
    BaselineModel m;
    m.kind = j.at("kind").get<std::string>();
    m.phenotype = j.at("phenotype").get<std::string>();
    m.hyperparameters = j.at("hyperparameters");
    const auto& r = j.at("features");
    m.recipe.source = r.at("source").get<std::string>() == "ngrams" ? FeatureRecipe::Source::Ngrams : FeatureRecipe::Source::Concepts;
    m.recipe.ngram = r.at("ngram").get<int>();
    m.recipe.tfidf = r.at("tfidf").get<bool>();
    for (const auto& e : r.at("dictionary")) {
      m.recipe.dictionary.add({e.at("concept_id").get<std::string>(), e.at("phrase").get<TokenSequence>(),
                               e.at("phenotypes").get<std::set<std::string>>()});
    }
    m.space = feature_space_from_json(j.at("feature_space"));
    const auto& l = j.at("learner");
    const auto type = l.at("type").get<std::string>();
    if (type == "logistic_regression") {
      LinearModel lr;
      lr.weights = l.at("weights").get<std::vector<double>>();
      lr.bias = l.at("bias").get<double>();
      lr.l2_lambda = l.at("l2_lambda").get<double>();
      if (lr.weights.size() != m.space.dim()) throw ModelLoadError("weight count does not match feature space");
      m.learner = std::move(lr);
    } else if (type == "random_forest") {
      m.learner = forest_from_json(l.at("forest"));
    } else {
      throw ModelLoadError("unknown learner type " + type);
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw ModelLoadError(std::string("malformed baseline checkpoint: ") + e.what());
  } catch (const DataError& e) {
    throw ModelLoadError(std::string("malformed baseline checkpoint: ") + e.what());
  }
}

inline void save_baseline_checkpoint(const std::filesystem::path& path, const BaselineModel& m) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint " + path.string());
  out << to_json(m).dump() << '\n';
}

inline BaselineModel load_baseline_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ModelLoadError("cannot open checkpoint " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception&) {
    throw ModelLoadError("checkpoint " + path.string() + " is not valid JSON");
  }
  return baseline_from_json(j);
}

}  // namespace phenocnn
