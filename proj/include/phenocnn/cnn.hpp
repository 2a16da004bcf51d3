#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>
#include <spdlog/spdlog.h>

#include "phenocnn/corpus.hpp"
#include "phenocnn/embeddings.hpp"
#include "phenocnn/errors.hpp"
#include "phenocnn/metrics.hpp"
#include "phenocnn/rng.hpp"
#include "phenocnn/tensor.hpp"

namespace phenocnn {

enum class Activation { Tanh, Relu };

inline std::string to_string(Activation a) { return a == Activation::Tanh ? "tanh" : "relu"; }

inline Activation activation_from_string(const std::string& name) {
  if (name == "tanh") return Activation::Tanh;
  if (name == "relu") return Activation::Relu;
  throw ConfigError("unknown activation: " + name);
}

struct CnnConfig {
  std::vector<int> filter_widths{2, 3, 4, 5};
  int filters_per_width = 100;
  double dropout_p = 0.5;
  double max_norm = 3.0;
  int epochs = 20;
  int batch_size = 50;
  double adadelta_rho = 0.95;
  double adadelta_eps = 1e-6;
  double threshold = 0.5;
  int n_heads = 1;
  Activation activation = Activation::Tanh;
  std::uint64_t seed = 0;

  int max_width() const { return *std::max_element(filter_widths.begin(), filter_widths.end()); }
  int total_filters() const { return static_cast<int>(filter_widths.size()) * filters_per_width; }

  void validate() const {
    if (filter_widths.empty()) throw ConfigError("filter_widths must be non-empty");
    if (std::set<int>(filter_widths.begin(), filter_widths.end()).size() != filter_widths.size()) {
      throw ConfigError("filter_widths must be distinct");
    }
    for (int w : filter_widths) {
      if (w < 1) throw ConfigError("filter widths must be >= 1");
    }
    if (filters_per_width < 1) throw ConfigError("filters_per_width must be >= 1");
    if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw ConfigError("dropout_p must be in [0, 1)");
    if (!(max_norm > 0.0)) throw ConfigError("max_norm must be positive");
    if (epochs < 0) throw ConfigError("epochs must be >= 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(adadelta_rho > 0.0 && adadelta_rho < 1.0)) throw ConfigError("adadelta_rho must be in (0, 1)");
    if (!(adadelta_eps > 0.0)) throw ConfigError("adadelta_eps must be positive");
    if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("threshold must be in (0, 1)");
    if (n_heads < 1) throw ConfigError("n_heads must be >= 1");
  }
};

inline nlohmann::json to_json(const CnnConfig& c) {
  return {{"filter_widths", c.filter_widths}, {"filters_per_width", c.filters_per_width},
          {"dropout_p", c.dropout_p},         {"max_norm", c.max_norm},
          {"epochs", c.epochs},               {"batch_size", c.batch_size},
          {"adadelta_rho", c.adadelta_rho},   {"adadelta_eps", c.adadelta_eps},
          {"threshold", c.threshold},         {"n_heads", c.n_heads},
          {"activation", to_string(c.activation)}, {"seed", c.seed}};
}

/// Missing keys keep their defaults.
inline CnnConfig cnn_config_from_json(const nlohmann::json& j, CnnConfig c = {}) {
  try {
    if (j.contains("filter_widths")) c.filter_widths = j.at("filter_widths").get<std::vector<int>>();
    if (j.contains("filters_per_width")) c.filters_per_width = j.at("filters_per_width").get<int>();
    if (j.contains("dropout_p")) c.dropout_p = j.at("dropout_p").get<double>();
    if (j.contains("max_norm")) c.max_norm = j.at("max_norm").get<double>();
    if (j.contains("epochs")) c.epochs = j.at("epochs").get<int>();
    if (j.contains("batch_size")) c.batch_size = j.at("batch_size").get<int>();
    if (j.contains("adadelta_rho")) c.adadelta_rho = j.at("adadelta_rho").get<double>();
    if (j.contains("adadelta_eps")) c.adadelta_eps = j.at("adadelta_eps").get<double>();
    if (j.contains("threshold")) c.threshold = j.at("threshold").get<double>();
    if (j.contains("n_heads")) c.n_heads = j.at("n_heads").get<int>();
    if (j.contains("activation")) c.activation = activation_from_string(j.at("activation").get<std::string>());
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid cnn config: ") + e.what());
  }
  return c;
}

/// Filters of one width. Row f of `weights` is filter f flattened over
/// (offset, dim), matching a contiguous window of the stacked embeddings.
struct FilterBank {
  int width = 0;
  RowMatrix weights;
  Vector biases;

  int n_filters() const { return static_cast<int>(weights.rows()); }
};

struct CnnModel {
  CnnConfig config;
  Vocabulary vocab;
  std::vector<std::string> phenotypes;  // one name per output head
  EmbeddingMatrix embeddings;
  std::vector<FilterBank> banks;        // same order as config.filter_widths
  RowMatrix output_weights;             // n_heads x total_filters
  Vector output_bias;

  int dim() const { return embeddings.dim(); }

  int head_index(const std::string& phenotype) const {
    for (std::size_t i = 0; i < phenotypes.size(); ++i) {
      if (phenotypes[i] == phenotype) return static_cast<int>(i);
    }
    throw std::invalid_argument("model has no head for phenotype " + phenotype);
  }
};

inline void apply_max_norm(EmbeddingMatrix& emb, double max_norm) {
  if (!(max_norm > 0)) throw std::invalid_argument("max_norm must be positive");
  for (Eigen::Index r = 0; r < emb.vectors.rows(); ++r) {
    if (r == Vocabulary::kPad) continue;
    const double norm = emb.vectors.row(r).norm();
    if (norm > max_norm) emb.vectors.row(r) *= max_norm / norm;
  }
}

inline EmbeddingMatrix apply_max_norm(const EmbeddingMatrix& emb, double max_norm) {
  EmbeddingMatrix out = emb;
  apply_max_norm(out, max_norm);
  return out;
}

/// Filters and output weights uniform in [-0.01, 0.01], biases zero. The
/// embedding table is copied (it is fine-tuned) and max-norm constrained.
inline CnnModel init_model(const CnnConfig& config, Vocabulary vocab, EmbeddingMatrix embeddings,
                           std::vector<std::string> phenotypes) {
  config.validate();
  if (static_cast<int>(phenotypes.size()) != config.n_heads) {
    throw ConfigError("number of phenotypes must equal n_heads");
  }
  if (embeddings.rows() != vocab.size()) throw ConfigError("embedding rows must match vocabulary size");
  CnnModel m;
  m.config = config;
  m.vocab = std::move(vocab);
  m.phenotypes = std::move(phenotypes);
  m.embeddings = std::move(embeddings);
  m.embeddings.vectors.row(Vocabulary::kPad).setZero();
  apply_max_norm(m.embeddings, config.max_norm);

  Rng rng(derive_seed(config.seed, "cnn.init"));
  const int dim = m.dim();
  for (int w : config.filter_widths) {
    FilterBank bank;
    bank.width = w;
    bank.weights.resize(config.filters_per_width, w * dim);
    for (Eigen::Index i = 0; i < bank.weights.size(); ++i) bank.weights.data()[i] = rng.uniform(-0.01, 0.01);
    bank.biases = Vector::Zero(config.filters_per_width);
    m.banks.push_back(std::move(bank));
  }
  m.output_weights.resize(config.n_heads, config.total_filters());
  for (Eigen::Index i = 0; i < m.output_weights.size(); ++i) m.output_weights.data()[i] = rng.uniform(-0.01, 0.01);
  m.output_bias = Vector::Zero(config.n_heads);
  return m;
}

/// Cached forward pass.
struct Activations {
  std::vector<TokenId> ids;              // padded input
  std::vector<RowMatrix> grids;          // per bank: positions x filters, post-activation
  std::vector<std::vector<int>> argmax;  // per bank, per filter: winning position
  Vector pooled;                         // max over positions, concatenated over banks
  Vector mask;                           // dropout multipliers (0 or 1/(1-p)); empty when not training
  Vector features;                       // pooled after dropout
  Vector logits;
  Vector probabilities;
};

inline std::vector<TokenId> pad_ids(std::span<const TokenId> ids, int min_length) {
  std::vector<TokenId> out(ids.begin(), ids.end());
  if (static_cast<int>(out.size()) < min_length) out.resize(static_cast<std::size_t>(min_length), Vocabulary::kPad);
  return out;
}

/// Embedding lookup, one convolution per width, max-over-time pooling
/// (first position wins ties), inverted dropout when training, sigmoid heads.
inline Activations forward(const CnnModel& model, std::span<const TokenId> ids, bool train_mode,
                           Rng* dropout_rng = nullptr) {
  if (ids.empty()) throw std::invalid_argument("forward: empty token sequence");
  const auto& cfg = model.config;
  const int dim = model.dim();
  Activations act;
  act.ids = pad_ids(ids, cfg.max_width());
  const auto length = static_cast<Eigen::Index>(act.ids.size());

  RowMatrix x(length, dim);
  for (Eigen::Index i = 0; i < length; ++i) x.row(i) = model.embeddings.vectors.row(act.ids[static_cast<std::size_t>(i)]);

  act.pooled.resize(cfg.total_filters());
  Eigen::Index offset = 0;
  for (const auto& bank : model.banks) {
    const Eigen::Index positions = length - bank.width + 1;
    Eigen::Map<const RowMatrix, 0, Eigen::OuterStride<>> windows(x.data(), positions, bank.width * dim,
                                                                  Eigen::OuterStride<>(dim));
    RowMatrix grid = windows * bank.weights.transpose();
    grid.rowwise() += bank.biases.transpose();
    if (cfg.activation == Activation::Tanh) {
      grid = grid.array().tanh();
    } else {
      grid = grid.array().max(0.0);
    }
    std::vector<int> winners(static_cast<std::size_t>(bank.n_filters()), 0);
    for (int f = 0; f < bank.n_filters(); ++f) {
      Eigen::Index best = 0;
      for (Eigen::Index p = 1; p < positions; ++p) {
        if (grid(p, f) > grid(best, f)) best = p;
      }
      winners[static_cast<std::size_t>(f)] = static_cast<int>(best);
      act.pooled(offset + f) = grid(best, f);
    }
    offset += bank.n_filters();
    act.grids.push_back(std::move(grid));
    act.argmax.push_back(std::move(winners));
  }

  act.features = act.pooled;
  if (train_mode && cfg.dropout_p > 0.0) {
    if (!dropout_rng) throw std::invalid_argument("forward: training with dropout needs a random source");
    const double keep = 1.0 - cfg.dropout_p;
    act.mask.resize(act.pooled.size());
    for (Eigen::Index j = 0; j < act.mask.size(); ++j) act.mask(j) = dropout_rng->bernoulli(keep) ? 1.0 / keep : 0.0;
    act.features = act.pooled.cwiseProduct(act.mask);
  }
  act.logits = model.output_weights * act.features + model.output_bias;
  act.probabilities = act.logits.unaryExpr([](double z) { return sigmoid(z); });
  return act;
}

inline Activations forward(const CnnModel& model, const TokenSequence& tokens, bool train_mode,
                           Rng* dropout_rng = nullptr) {
  const auto ids = model.vocab.encode(tokens);
  return forward(model, std::span<const TokenId>(ids), train_mode, dropout_rng);
}

inline constexpr double kProbabilityClamp = 1e-7;

/// Mean over heads of binary cross-entropy, probabilities clamped to [1e-7, 1-1e-7].
inline double loss(std::span<const double> probabilities, std::span<const int> labels) {
  if (probabilities.size() != labels.size() || probabilities.empty()) {
    throw std::invalid_argument("loss: need one label per head");
  }
  double total = 0.0;
  for (std::size_t h = 0; h < probabilities.size(); ++h) {
    const double p = std::clamp(probabilities[h], kProbabilityClamp, 1.0 - kProbabilityClamp);
    total += labels[h] ? -std::log(p) : -std::log(1.0 - p);
  }
  return total / static_cast<double>(probabilities.size());
}

inline double loss(const Activations& act, std::span<const int> labels) {
  return loss(std::span<const double>(act.probabilities.data(), static_cast<std::size_t>(act.probabilities.size())),
              labels);
}

/// Gradients with the same shapes as the trainable parameters.
struct CnnGradients {
  RowMatrix embeddings;
  std::vector<RowMatrix> bank_weights;
  std::vector<Vector> bank_biases;
  RowMatrix output_weights;
  Vector output_bias;

  static CnnGradients zeros_like(const CnnModel& m) {
    CnnGradients g;
    g.embeddings = RowMatrix::Zero(m.embeddings.vectors.rows(), m.embeddings.vectors.cols());
    for (const auto& b : m.banks) {
      g.bank_weights.push_back(RowMatrix::Zero(b.weights.rows(), b.weights.cols()));
      g.bank_biases.push_back(Vector::Zero(b.biases.size()));
    }
    g.output_weights = RowMatrix::Zero(m.output_weights.rows(), m.output_weights.cols());
    g.output_bias = Vector::Zero(m.output_bias.size());
    return g;
  }

  void set_zero() {
    embeddings.setZero();
    for (auto& w : bank_weights) w.setZero();
    for (auto& b : bank_biases) b.setZero();
    output_weights.setZero();
    output_bias.setZero();
  }
};

/// Adds scale * dLoss/dParams for one cached example into grads. Gradient
/// reaches a convolution only through each filter's argmax window; the PAD
/// embedding row never receives gradient.
inline void accumulate_gradients(const CnnModel& model, const Activations& act, std::span<const int> labels,
                                 CnnGradients& grads, double scale = 1.0) {
  const auto heads = model.output_weights.rows();
  if (static_cast<Eigen::Index>(labels.size()) != heads) throw std::invalid_argument("backward: need one label per head");
  const int dim = model.dim();

  Vector dlogit(heads);
  for (Eigen::Index h = 0; h < heads; ++h) {
    const double p = act.probabilities(h);
    const bool clamped = p < kProbabilityClamp || p > 1.0 - kProbabilityClamp;
    dlogit(h) = clamped ? 0.0 : (p - labels[static_cast<std::size_t>(h)]) / static_cast<double>(heads);
  }
  dlogit *= scale;
  grads.output_weights.noalias() += dlogit * act.features.transpose();
  grads.output_bias += dlogit;

  Vector dpooled = model.output_weights.transpose() * dlogit;
  if (act.mask.size() > 0) dpooled = dpooled.cwiseProduct(act.mask);

  Eigen::Index offset = 0;
  for (std::size_t b = 0; b < model.banks.size(); ++b) {
    const auto& bank = model.banks[b];
    const auto& grid = act.grids[b];
    for (int f = 0; f < bank.n_filters(); ++f) {
      const double upstream = dpooled(offset + f);
      if (upstream == 0.0) continue;
      const int pos = act.argmax[b][static_cast<std::size_t>(f)];
      const double a = grid(pos, f);
      const double local = model.config.activation == Activation::Tanh ? 1.0 - a * a : (a > 0.0 ? 1.0 : 0.0);
      const double dpre = upstream * local;
      if (dpre == 0.0) continue;
      grads.bank_biases[b](f) += dpre;
      for (int k = 0; k < bank.width; ++k) {
        const TokenId id = act.ids[static_cast<std::size_t>(pos + k)];
        const auto x_row = model.embeddings.vectors.row(id);
        grads.bank_weights[b].row(f).segment(k * dim, dim) += dpre * x_row;
        if (id != Vocabulary::kPad) {
          grads.embeddings.row(id) += dpre * bank.weights.row(f).segment(k * dim, dim);
        }
      }
    }
    offset += bank.n_filters();
  }
}

inline CnnGradients backward(const CnnModel& model, const Activations& act, std::span<const int> labels) {
  auto g = CnnGradients::zeros_like(model);
  accumulate_gradients(model, act, labels, g);
  return g;
}

/// Flat views over every trainable tensor, in a fixed order shared with
/// gradient_views: embeddings, (weights, biases) per bank, output weights, output bias.
inline std::vector<std::span<double>> parameter_views(CnnModel& m) {
  std::vector<std::span<double>> v{as_span(m.embeddings.vectors)};
  for (auto& b : m.banks) {
    v.push_back(as_span(b.weights));
    v.push_back(as_span(b.biases));
  }
  v.push_back(as_span(m.output_weights));
  v.push_back(as_span(m.output_bias));
  return v;
}

inline std::vector<std::span<double>> gradient_views(CnnGradients& g) {
  std::vector<std::span<double>> v{as_span(g.embeddings)};
  for (std::size_t i = 0; i < g.bank_weights.size(); ++i) {
    v.push_back(as_span(g.bank_weights[i]));
    v.push_back(as_span(g.bank_biases[i]));
  }
  v.push_back(as_span(g.output_weights));
  v.push_back(as_span(g.output_bias));
  return v;
}

/// Running averages E[g^2] and E[dx^2] for one tensor.
struct AdadeltaSlot {
  std::vector<double> sq_grad;
  std::vector<double> sq_update;
};

/// Zeiler's rule without a global learning-rate factor:
///   E[g^2] <- rho E[g^2] + (1-rho) g^2
///   dx     <- -sqrt(E[dx^2] + eps) / sqrt(E[g^2] + eps) * g
///   E[dx^2] <- rho E[dx^2] + (1-rho) dx^2
///   x      <- x + dx
inline void adadelta_step(std::span<double> params, std::span<const double> grads, AdadeltaSlot& slot, double rho,
                          double eps) {
  if (params.size() != grads.size()) throw std::invalid_argument("adadelta_step: shape mismatch");
  if (slot.sq_grad.empty()) {
    slot.sq_grad.assign(params.size(), 0.0);
    slot.sq_update.assign(params.size(), 0.0);
  }
  if (slot.sq_grad.size() != params.size()) throw std::invalid_argument("adadelta_step: state shape mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    double& eg = slot.sq_grad[i];
    double& ed = slot.sq_update[i];
    eg = rho * eg + (1.0 - rho) * g * g;
    const double dx = -std::sqrt(ed + eps) / std::sqrt(eg + eps) * g;
    ed = rho * ed + (1.0 - rho) * dx * dx;
    params[i] += dx;
  }
}

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  std::vector<Metric> val_f1;  // per head; undefined when the validation set is empty or has no positives
};

struct TrainState {
  std::vector<AdadeltaSlot> slots;  // mirrors parameter_views
  int epoch = 0;
  int step = 0;
  std::vector<EpochRecord> history;
};

/// A tokenized note with one 0/1 label per head.
struct LabeledExample {
  std::string note_id;
  std::vector<TokenId> ids;
  std::vector<int> labels;
};

inline std::vector<LabeledExample> make_examples(std::span<const Note> notes, const Vocabulary& vocab,
                                                 std::span<const std::string> phenotypes) {
  std::vector<LabeledExample> out;
  out.reserve(notes.size());
  for (const auto& n : notes) {
    LabeledExample ex;
    ex.note_id = n.note_id;
    ex.ids = vocab.encode(tokenize(n.text));
    if (ex.ids.empty()) throw DataError("note " + n.note_id + " has no tokens");
    for (const auto& p : phenotypes) {
      if (!n.labels || !n.labels->contains(p)) throw DataError("note " + n.note_id + " has no label for " + p);
      ex.labels.push_back(n.labels->at(p));
    }
    out.push_back(std::move(ex));
  }
  return out;
}

struct HeadPrediction {
  double probability = 0.0;
  int label = 0;
};

/// Inference (no dropout). The probability is clamped like the loss, so it
/// never reaches 0 or 1; label = 1 iff probability >= threshold.
inline std::vector<HeadPrediction> predict(const CnnModel& model, std::span<const TokenId> ids, double threshold) {
  const auto act = forward(model, ids, false);
  std::vector<HeadPrediction> out;
  for (Eigen::Index h = 0; h < act.probabilities.size(); ++h) {
    const double p = std::clamp(act.probabilities(h), kProbabilityClamp, 1.0 - kProbabilityClamp);
    out.push_back({p, p >= threshold ? 1 : 0});
  }
  return out;
}

inline std::vector<HeadPrediction> predict(const CnnModel& model, const TokenSequence& tokens, double threshold) {
  const auto ids = model.vocab.encode(tokens);
  return predict(model, std::span<const TokenId>(ids), threshold);
}

/// Predicts many documents, optionally across threads. The model is only
/// read, so the result equals the sequential run.
inline std::vector<std::vector<HeadPrediction>> predict_batch(const CnnModel& model,
                                                              std::span<const std::vector<TokenId>> docs,
                                                              double threshold, unsigned threads = 1) {
  std::vector<std::vector<HeadPrediction>> out(docs.size());
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(docs.size())));
  if (threads <= 1) {
    for (std::size_t i = 0; i < docs.size(); ++i) out[i] = predict(model, docs[i], threshold);
    return out;
  }
  std::vector<std::jthread> pool;
  for (unsigned t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      for (std::size_t i = t; i < docs.size(); i += threads) out[i] = predict(model, docs[i], threshold);
    });
  }
  return out;
}

/// Per-head F1 of thresholded predictions.
inline std::vector<Metric> evaluate_f1(const CnnModel& model, std::span<const LabeledExample> examples) {
  const auto heads = static_cast<std::size_t>(model.config.n_heads);
  std::vector<Metric> out(heads);
  if (examples.empty()) return out;
  std::vector<std::vector<int>> preds(heads), labels(heads);
  for (const auto& ex : examples) {
    const auto p = predict(model, ex.ids, model.config.threshold);
    for (std::size_t h = 0; h < heads; ++h) {
      preds[h].push_back(p[h].label);
      labels[h].push_back(ex.labels[h]);
    }
  }
  for (std::size_t h = 0; h < heads; ++h) out[h] = f1(confusion(preds[h], labels[h]));
  return out;
}

/// Called after every optimizer step (after the max-norm projection).
using StepHook = std::function<void(const CnnModel&, const TrainState&)>;

/// Mini-batch training: per epoch a seeded shuffle; per batch forward with
/// dropout, backward (batch mean), adadelta step, max-norm projection.
/// The final-epoch model is kept; validation F1 is recorded per epoch.
inline TrainState train(CnnModel& model, std::span<const LabeledExample> train_set,
                        std::span<const LabeledExample> val_set, const StepHook& hook = {}) {
  const auto& cfg = model.config;
  cfg.validate();
  for (const auto* set : {&train_set, &val_set}) {
    for (const auto& ex : *set) {
      if (static_cast<int>(ex.labels.size()) != cfg.n_heads) {
        throw DataError("example " + ex.note_id + " does not carry one label per head");
      }
    }
  }
  TrainState state;
  if (cfg.epochs == 0 || train_set.empty()) return state;

  Rng shuffle_rng(derive_seed(cfg.seed, "cnn.shuffle"));
  Rng dropout_rng(derive_seed(cfg.seed, "cnn.dropout"));
  auto grads = CnnGradients::zeros_like(model);
  auto params = parameter_views(model);
  auto gviews = gradient_views(grads);
  state.slots.resize(params.size());

  std::vector<std::size_t> order(train_set.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  const auto batch = static_cast<std::size_t>(cfg.batch_size);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    state.epoch = epoch;
    shuffle_rng.shuffle(order);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t end = std::min(order.size(), start + batch);
      const double scale = 1.0 / static_cast<double>(end - start);
      grads.set_zero();
      for (std::size_t i = start; i < end; ++i) {
        const auto& ex = train_set[order[i]];
        const auto act = forward(model, ex.ids, true, &dropout_rng);
        epoch_loss += loss(act, ex.labels);
        accumulate_gradients(model, act, ex.labels, grads, scale);
      }
      for (std::size_t t = 0; t < params.size(); ++t) {
        adadelta_step(params[t], gviews[t], state.slots[t], cfg.adadelta_rho, cfg.adadelta_eps);
      }
      apply_max_norm(model.embeddings, cfg.max_norm);
      ++state.step;
      if (hook) hook(model, state);
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = epoch_loss / static_cast<double>(order.size());
    rec.val_f1 = evaluate_f1(model, val_set);
    state.history.push_back(std::move(rec));
  }
  return state;
}

// ---------------------------------------------------------------------------
// Checkpoint: one JSON document. Doubles are written in shortest round-trip
// form so save -> load reproduces predictions bit-exactly.

inline constexpr int kCnnCheckpointVersion = 1;

inline nlohmann::json matrix_to_json(const RowMatrix& m) {
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::vector<double>(m.data(), m.data() + m.size())}};
}

inline RowMatrix matrix_from_json(const nlohmann::json& j) {
  const auto rows = j.at("rows").get<Eigen::Index>();
  const auto cols = j.at("cols").get<Eigen::Index>();
  const auto data = j.at("data").get<std::vector<double>>();
  if (static_cast<Eigen::Index>(data.size()) != rows * cols) throw ModelLoadError("matrix size mismatch in checkpoint");
  RowMatrix m(rows, cols);
  std::copy(data.begin(), data.end(), m.data());
  return m;
}

inline nlohmann::json vector_to_json(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

inline Vector vector_from_json(const nlohmann::json& j) {
  const auto data = j.get<std::vector<double>>();
  return Eigen::Map<const Vector>(data.data(), static_cast<Eigen::Index>(data.size()));
}

inline nlohmann::json to_json(const CnnModel& m) {
  nlohmann::json j;
  j["format"] = "phenocnn.cnn";
  j["format_version"] = kCnnCheckpointVersion;
  j["config"] = to_json(m.config);
  j["phenotypes"] = m.phenotypes;
  j["vocabulary"] = {{"min_count", m.vocab.min_count()}, {"tokens", m.vocab.tokens()}};
  j["vocab_hash"] = m.vocab.hash();
  j["embeddings"] = matrix_to_json(m.embeddings.vectors);
  nlohmann::json banks = nlohmann::json::array();
  for (const auto& b : m.banks) {
    banks.push_back({{"width", b.width}, {"weights", matrix_to_json(b.weights)}, {"biases", vector_to_json(b.biases)}});
  }
  j["banks"] = banks;
  j["output_weights"] = matrix_to_json(m.output_weights);
  j["output_bias"] = vector_to_json(m.output_bias);
  return j;
}

inline CnnModel cnn_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format").get<std::string>() != "phenocnn.cnn") throw ModelLoadError("not a CNN checkpoint");
    if (j.at("format_version").get<int>() != kCnnCheckpointVersion) throw ModelLoadError("unsupported CNN checkpoint version");
    CnnModel m;
    m.config = cnn_config_from_json(j.at("config"));
    m.config.validate();
    m.phenotypes = j.at("phenotypes").get<std::vector<std::string>>();
    m.vocab = Vocabulary::from_tokens(j.at("vocabulary").at("tokens").get<std::vector<std::string>>(),
                                      j.at("vocabulary").at("min_count").get<int>());
    if (m.vocab.hash() != j.at("vocab_hash").get<std::string>()) throw ModelLoadError("vocabulary hash mismatch");
    m.embeddings.vectors = matrix_from_json(j.at("embeddings"));
    for (const auto& jb : j.at("banks")) {
      FilterBank b;
      b.width = jb.at("width").get<int>();
      b.weights = matrix_from_json(jb.at("weights"));
      b.biases = vector_from_json(jb.at("biases"));
      m.banks.push_back(std::move(b));
    }
    m.output_weights = matrix_from_json(j.at("output_weights"));
    m.output_bias = vector_from_json(j.at("output_bias"));

    const int dim = m.dim();
    bool ok = m.embeddings.rows() == m.vocab.size() && static_cast<int>(m.phenotypes.size()) == m.config.n_heads &&
              m.banks.size() == m.config.filter_widths.size() && m.output_weights.rows() == m.config.n_heads &&
              m.output_weights.cols() == m.config.total_filters() && m.output_bias.size() == m.config.n_heads;
    for (std::size_t i = 0; ok && i < m.banks.size(); ++i) {
      const auto& b = m.banks[i];
      ok = b.width == m.config.filter_widths[i] && b.weights.rows() == m.config.filters_per_width &&
           b.weights.cols() == b.width * dim && b.biases.size() == m.config.filters_per_width;
    }
    if (!ok) throw ModelLoadError("CNN checkpoint shapes are inconsistent with its config");
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw ModelLoadError(std::string("malformed CNN checkpoint: ") + e.what());
  } catch (const DataError& e) {
    throw ModelLoadError(std::string("malformed CNN checkpoint: ") + e.what());
  } catch (const ConfigError& e) {
    throw ModelLoadError(std::string("malformed CNN checkpoint: ") + e.what());
  }
}

inline void save_cnn_checkpoint(const std::filesystem::path& path, const CnnModel& m) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint " + path.string());
  out << to_json(m).dump() << '\n';
}

inline CnnModel load_cnn_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ModelLoadError("cannot open checkpoint " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ModelLoadError("checkpoint " + path.string() + " is not valid JSON");
  }
  return cnn_from_json(j);
}

}  // namespace phenocnn
