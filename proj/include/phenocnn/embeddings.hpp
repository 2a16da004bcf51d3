#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <spdlog/spdlog.h>

#include "phenocnn/corpus.hpp"
#include "phenocnn/errors.hpp"
#include "phenocnn/rng.hpp"
#include "phenocnn/tensor.hpp"

namespace phenocnn {

/// One row per vocabulary id. Row Vocabulary::kPad is all-zero and never updated.
struct EmbeddingMatrix {
  RowMatrix vectors;

  EmbeddingMatrix() = default;
  EmbeddingMatrix(std::size_t rows, int dim) : vectors(RowMatrix::Zero(static_cast<Eigen::Index>(rows), dim)) {}

  int dim() const { return static_cast<int>(vectors.cols()); }
  std::size_t rows() const { return static_cast<std::size_t>(vectors.rows()); }
  auto row(TokenId id) { return vectors.row(id); }
  auto row(TokenId id) const { return vectors.row(id); }

  bool operator==(const EmbeddingMatrix& other) const {
    return vectors.rows() == other.vectors.rows() && vectors.cols() == other.vectors.cols() &&
           vectors == other.vectors;
  }
};

/// Uniform in [-0.5/dim, 0.5/dim] per component, PAD row zero.
inline EmbeddingMatrix random_embeddings(std::size_t rows, int dim, std::uint64_t seed) {
  EmbeddingMatrix emb(rows, dim);
  Rng rng(seed);
  const double half = 0.5 / dim;
  for (std::size_t r = 0; r < rows; ++r) {
    for (int c = 0; c < dim; ++c) {
      const double v = rng.uniform(-half, half);
      if (r != static_cast<std::size_t>(Vocabulary::kPad)) emb.vectors(static_cast<Eigen::Index>(r), c) = v;
    }
  }
  return emb;
}

struct PretrainConfig {
  int dim = 100;
  int window = 5;
  int negatives = 5;
  int epochs = 5;
  double learning_rate = 0.025;
  std::uint64_t seed = 1;

  void validate() const {
    if (dim < 1) throw ConfigError("embedding dim must be >= 1");
    if (window < 1) throw ConfigError("window must be >= 1");
    if (negatives < 1) throw ConfigError("negatives must be >= 1");
    if (epochs < 0) throw ConfigError("epochs must be >= 0");
    if (!(learning_rate > 0)) throw ConfigError("learning_rate must be positive");
  }
};

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// -log(sigmoid(x)), stable for large |x|.
inline double neg_log_sigmoid(double x) {
  return x >= 0 ? std::log1p(std::exp(-x)) : -x + std::log1p(std::exp(x));
}

/// Negative-sampling loss of one center word against a set of output rows:
///   sum_j -log sigmoid(s_j * <u, v_j>),  s_j = +1 for the true context, -1 for noise.
/// Gradients are written into grad_center (length dim) and grad_targets
/// (one row per target, same order).
inline double sgns_loss(std::span<const double> center, std::span<const std::span<const double>> targets,
                        std::span<const int> is_positive, std::span<double> grad_center,
                        std::span<std::vector<double>> grad_targets) {
  const std::size_t dim = center.size();
  std::fill(grad_center.begin(), grad_center.end(), 0.0);
  double loss = 0.0;
  for (std::size_t j = 0; j < targets.size(); ++j) {
    double dot = 0.0;
    for (std::size_t d = 0; d < dim; ++d) dot += center[d] * targets[j][d];
    const double y = is_positive[j] ? 1.0 : 0.0;
    loss += neg_log_sigmoid(is_positive[j] ? dot : -dot);
    const double g = sigmoid(dot) - y;
    auto& gt = grad_targets[j];
    gt.assign(dim, 0.0);
    for (std::size_t d = 0; d < dim; ++d) {
      grad_center[d] += g * targets[j][d];
      gt[d] = g * center[d];
    }
  }
  return loss;
}

namespace detail {

/// Cumulative unigram^0.75 table over ids >= 2 that occur in the corpus.
class NoiseDistribution {
 public:
  NoiseDistribution(std::span<const std::int64_t> counts) {
    double total = 0.0;
    for (std::size_t id = 2; id < counts.size(); ++id) {
      if (counts[id] <= 0) continue;
      total += std::pow(static_cast<double>(counts[id]), 0.75);
      ids_.push_back(static_cast<TokenId>(id));
      cumulative_.push_back(total);
    }
    for (auto& c : cumulative_) c /= total;
  }

  bool empty() const { return ids_.empty(); }

  TokenId sample(Rng& rng) const {
    const double u = rng.uniform();
    auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), u);
    if (it == cumulative_.end()) --it;
    return ids_[static_cast<std::size_t>(it - cumulative_.begin())];
  }

 private:
  std::vector<TokenId> ids_;
  std::vector<double> cumulative_;
};

}  // namespace detail

/// Skip-gram with negative sampling. Each center word predicts every
/// context word within a window of random size in [1, window]; the learning
/// rate decays linearly to 1e-4 of its initial value. UNK and PAD tokens are
/// dropped from the training stream. If loss_history is given, it receives
/// the mean per-pair loss of every epoch.
inline EmbeddingMatrix pretrain_embeddings(std::span<const TokenSequence> corpus, const Vocabulary& vocab,
                                           const PretrainConfig& cfg,
                                           std::vector<double>* loss_history = nullptr) {
  cfg.validate();
  Rng rng(cfg.seed);
  EmbeddingMatrix input = random_embeddings(vocab.size(), cfg.dim, derive_seed(cfg.seed, "embeddings.init"));
  if (loss_history) loss_history->clear();
  if (cfg.epochs == 0) return input;

  std::vector<std::vector<TokenId>> stream;
  std::vector<std::int64_t> counts(vocab.size(), 0);
  std::int64_t total_tokens = 0;
  for (const auto& seq : corpus) {
    std::vector<TokenId> ids;
    for (const auto& t : seq) {
      const TokenId id = vocab.lookup(t);
      if (id < 2) continue;
      ids.push_back(id);
      ++counts[static_cast<std::size_t>(id)];
    }
    total_tokens += static_cast<std::int64_t>(ids.size());
    if (ids.size() > 1) stream.push_back(std::move(ids));
  }
  detail::NoiseDistribution noise(counts);
  if (noise.empty() || total_tokens == 0) {
    spdlog::warn("pretraining corpus has no in-vocabulary tokens; returning initialization");
    for (int e = 0; e < cfg.epochs; ++e) {
      if (loss_history) loss_history->push_back(0.0);
    }
    return input;
  }

  const int dim = cfg.dim;
  RowMatrix output = RowMatrix::Zero(input.vectors.rows(), dim);
  const double total_steps = static_cast<double>(total_tokens) * cfg.epochs;
  double step = 0.0;
  std::vector<double> grad_center(static_cast<std::size_t>(dim));
  std::vector<std::vector<double>> grad_targets(static_cast<std::size_t>(cfg.negatives) + 1);
  std::vector<std::span<const double>> targets;
  std::vector<TokenId> target_ids;
  std::vector<int> positive;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double epoch_loss = 0.0;
    std::int64_t pairs = 0;
    for (const auto& ids : stream) {
      const auto n = static_cast<std::ptrdiff_t>(ids.size());
      for (std::ptrdiff_t i = 0; i < n; ++i, step += 1.0) {
        const double lr = cfg.learning_rate * std::max(1e-4, 1.0 - step / total_steps);
        const auto reach = static_cast<std::ptrdiff_t>(rng.below(static_cast<std::size_t>(cfg.window))) + 1;
        const TokenId center = ids[static_cast<std::size_t>(i)];
        for (std::ptrdiff_t j = std::max<std::ptrdiff_t>(0, i - reach); j <= std::min(n - 1, i + reach); ++j) {
          if (j == i) continue;
          const TokenId context = ids[static_cast<std::size_t>(j)];
          target_ids.assign(1, context);
          positive.assign(1, 1);
          for (int k = 0; k < cfg.negatives; ++k) {
            const TokenId neg = noise.sample(rng);
            if (neg == context) continue;
            target_ids.push_back(neg);
            positive.push_back(0);
          }
          targets.clear();
          for (TokenId t : target_ids) {
            targets.emplace_back(output.data() + static_cast<std::ptrdiff_t>(t) * dim, static_cast<std::size_t>(dim));
          }
          std::span<const double> u(input.vectors.data() + static_cast<std::ptrdiff_t>(center) * dim,
                                    static_cast<std::size_t>(dim));
          epoch_loss += sgns_loss(u, targets, positive, grad_center,
                                  std::span(grad_targets.data(), target_ids.size()));
          ++pairs;
          for (std::size_t t = 0; t < target_ids.size(); ++t) {
            double* v = output.data() + static_cast<std::ptrdiff_t>(target_ids[t]) * dim;
            for (int d = 0; d < dim; ++d) v[d] -= lr * grad_targets[t][static_cast<std::size_t>(d)];
          }
          double* uc = input.vectors.data() + static_cast<std::ptrdiff_t>(center) * dim;
          for (int d = 0; d < dim; ++d) uc[d] -= lr * grad_center[static_cast<std::size_t>(d)];
        }
      }
    }
    if (loss_history) loss_history->push_back(pairs ? epoch_loss / static_cast<double>(pairs) : 0.0);
  }
  return input;
}

inline double cosine(std::span<const double> a, std::span<const double> b) {
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0 || nb == 0) return std::numeric_limits<double>::quiet_NaN();
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

inline std::span<const double> row_span(const EmbeddingMatrix& emb, TokenId id) {
  return {emb.vectors.data() + static_cast<std::ptrdiff_t>(id) * emb.dim(), static_cast<std::size_t>(emb.dim())};
}

/// Up to k tokens ranked by cosine similarity to `token` (descending, ties by
/// id). PAD, UNK, the query and zero rows are never returned.
inline std::vector<std::pair<std::string, double>> nearest_neighbors(const EmbeddingMatrix& emb,
                                                                     const Vocabulary& vocab,
                                                                     const std::string& token, int k) {
  if (k < 1) throw std::invalid_argument("k must be >= 1");
  const TokenId query = vocab.lookup(token);
  const auto q = row_span(emb, query);
  if (std::all_of(q.begin(), q.end(), [](double x) { return x == 0.0; })) {
    spdlog::warn("nearest_neighbors: query '{}' has a zero vector; cosine undefined", token);
    return {};
  }
  std::vector<std::pair<double, TokenId>> scored;
  for (std::size_t id = 2; id < emb.rows(); ++id) {
    const auto tid = static_cast<TokenId>(id);
    if (tid == query) continue;
    const double c = cosine(q, row_span(emb, tid));
    if (std::isnan(c)) continue;
    scored.emplace_back(c, tid);
  }
  std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  if (scored.size() > static_cast<std::size_t>(k)) scored.resize(static_cast<std::size_t>(k));
  std::vector<std::pair<std::string, double>> out;
  for (const auto& [c, id] : scored) out.emplace_back(vocab.token(id), c);
  return out;
}

// ---------------------------------------------------------------------------
// Embedding file: "dim N" header, then "token v1 ... vN" per vocabulary id.

inline void write_embeddings(std::ostream& out, const EmbeddingMatrix& emb, const Vocabulary& vocab) {
  out << "dim " << emb.dim() << '\n';
  out << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (std::size_t id = 0; id < emb.rows(); ++id) {
    out << vocab.token(static_cast<TokenId>(id));
    for (int d = 0; d < emb.dim(); ++d) out << ' ' << emb.vectors(static_cast<Eigen::Index>(id), d);
    out << '\n';
  }
}

inline void write_embeddings(const std::filesystem::path& path, const EmbeddingMatrix& emb, const Vocabulary& vocab) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write embedding file " + path.string());
  write_embeddings(out, emb, vocab);
}

/// Reads an embedding file. Files that do not start with <pad>, <unk> rows get
/// them prepended (PAD zero, UNK zero).
inline std::pair<Vocabulary, EmbeddingMatrix> read_embeddings(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw DataError("empty embedding file");
  std::istringstream header(line);
  std::string tag;
  int dim = 0;
  if (!(header >> tag >> dim) || tag != "dim" || dim < 1) throw DataError("embedding header must be 'dim N'");

  std::vector<std::string> tokens;
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream fields(line);
    std::string token;
    fields >> token;
    std::vector<double> values;
    double v;
    while (fields >> v) values.push_back(v);
    if (static_cast<int>(values.size()) != dim) {
      throw DataError("embedding row for '" + token + "' has " + std::to_string(values.size()) + " values");
    }
    for (double x : values) {
      if (!std::isfinite(x)) throw DataError("non-finite embedding value for '" + token + "'");
    }
    tokens.push_back(std::move(token));
    rows.push_back(std::move(values));
  }
  if (tokens.size() < 2 || tokens[0] != Vocabulary::kPadToken || tokens[1] != Vocabulary::kUnkToken) {
    tokens.insert(tokens.begin(), {std::string(Vocabulary::kPadToken), std::string(Vocabulary::kUnkToken)});
    rows.insert(rows.begin(), 2, std::vector<double>(static_cast<std::size_t>(dim), 0.0));
  }
  Vocabulary vocab = Vocabulary::from_tokens(tokens, 1);
  EmbeddingMatrix emb(rows.size(), dim);
  for (std::size_t r = 1; r < rows.size(); ++r) {
    for (int d = 0; d < dim; ++d) emb.vectors(static_cast<Eigen::Index>(r), d) = rows[r][static_cast<std::size_t>(d)];
  }
  return {std::move(vocab), std::move(emb)};
}

inline std::pair<Vocabulary, EmbeddingMatrix> read_embeddings(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open embedding file " + path.string());
  return read_embeddings(in);
}

}  // namespace phenocnn
