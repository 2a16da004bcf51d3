#include <gtest/gtest.h>

#include <cmath>
#include <sstream>
#include <utility>

#include "phenocnn/cnn.hpp"
#include "support.hpp"

using namespace phenocnn;
using phenocnn::testing::cnn_gradient_check;
using phenocnn::testing::random_small_cnn;

namespace {

CnnModel zero_model(const Vocabulary& vocab, int dim, std::vector<int> widths, int filters) {
  CnnConfig cfg;
  cfg.filter_widths = std::move(widths);
  cfg.filters_per_width = filters;
  auto m = init_model(cfg, vocab, random_embeddings(vocab.size(), dim, 3), {"p"});
  for (auto& b : m.banks) {
    b.weights.setZero();
    b.biases.setZero();
  }
  m.output_weights.setZero();
  return m;
}

Vocabulary words(std::initializer_list<const char*> tokens) {
  Vocabulary v;
  for (const char* t : tokens) v.add(t);
  return v;
}

/// Examples labeled 1 iff they contain the planted trigram.
std::vector<LabeledExample> planted_examples(const Vocabulary& vocab, std::size_t n, std::uint64_t seed) {
  const auto corpus = generate_synthetic_corpus(phenocnn::testing::planted_spec(seed, n));
  return make_examples(corpus.labeled, vocab, std::vector<std::string>{"alcohol_abuse"});
}

Vocabulary planted_vocabulary() {
  Vocabulary v;
  for (int i = 0; i < 500; ++i) v.add(background_token(static_cast<std::size_t>(i)));
  for (const char* t : {"heavy", "alcohol", "abuse", "."}) v.add(t);
  return v;
}

CnnConfig small_train_config() {
  CnnConfig cfg;
  cfg.filter_widths = {2, 3, 4};
  cfg.filters_per_width = 20;
  cfg.epochs = 20;
  cfg.batch_size = 10;
  cfg.seed = 5;
  return cfg;
}

}  // namespace

TEST(Forward, ZeroModelPredictsHalf) {
  const auto vocab = words({"a", "b", "c"});
  const auto m = zero_model(vocab, 4, {2, 3}, 3);
  const auto act = forward(m, TokenSequence{"a", "b", "c", "a"}, false);
  EXPECT_EQ(act.probabilities(0), 0.5);
  const auto p = predict(m, TokenSequence{"a"}, 0.5);
  EXPECT_EQ(p[0].probability, 0.5);
  EXPECT_EQ(p[0].label, 1);
}

TEST(Forward, ShortInputIsPaddedToWidestFilter) {
  const auto vocab = words({"a"});
  const auto m = zero_model(vocab, 3, {2, 3, 4, 5}, 2);
  const auto act = forward(m, TokenSequence{"a"}, false);
  ASSERT_EQ(act.ids.size(), 5u);
  EXPECT_EQ(act.ids[0], vocab.lookup("a"));
  for (std::size_t i = 1; i < 5; ++i) EXPECT_EQ(act.ids[i], Vocabulary::kPad);
  EXPECT_EQ(act.grids[3].rows(), 1);
  EXPECT_EQ(act.grids[0].rows(), 4);
  EXPECT_THROW(forward(m, std::vector<TokenId>{}, false), std::invalid_argument);
}

TEST(Forward, PlantedFilterPrefersItsPhrase) {
  const auto vocab = words({"alcohol", "abuse", "heavy", "denies", "use", "daily"});
  auto m = zero_model(vocab, 4, {2}, 1);
  Rng rng(11);
  for (std::size_t r = 2; r < vocab.size(); ++r) {
    for (int c = 0; c < 4; ++c) m.embeddings.vectors(static_cast<Eigen::Index>(r), c) = rng.uniform(-1, 1);
    m.embeddings.vectors.row(static_cast<Eigen::Index>(r)).normalize();
  }
  m.embeddings.vectors.row(Vocabulary::kUnk).setZero();
  const TokenId a = vocab.lookup("alcohol"), b = vocab.lookup("abuse");
  m.banks[0].weights.row(0) << m.embeddings.vectors.row(a), m.embeddings.vectors.row(b);

  // Every length-4 input over the 6 real words, by brute force.
  const int V = 6, L = 4;
  double best_without = -1.0;
  double worst_with = 2.0;
  std::vector<TokenId> ids(L);
  for (int code = 0; code < 1296; ++code) {
    int c = code;
    bool has = false;
    for (int i = 0; i < L; ++i) {
      ids[static_cast<std::size_t>(i)] = static_cast<TokenId>(2 + c % V);
      c /= V;
    }
    for (int i = 0; i + 1 < L; ++i) has = has || (ids[static_cast<std::size_t>(i)] == a && ids[static_cast<std::size_t>(i) + 1] == b);
    const double pooled = forward(m, ids, false).pooled(0);
    if (has) {
      worst_with = std::min(worst_with, pooled);
    } else {
      best_without = std::max(best_without, pooled);
    }
  }
  EXPECT_GT(worst_with, best_without);
}

TEST(Forward, PoolingIsMaxOverIndividualWindows) {
  Rng rng(2);
  auto m = random_small_cnn(rng, 8, 4, {2}, 3, 1);
  const std::vector<TokenId> ids{2, 3, 4, 5, 6, 7, 2};
  const auto act = forward(m, ids, false);
  for (int f = 0; f < 3; ++f) {
    double best = -2.0;
    int best_pos = -1;
    for (std::size_t i = 0; i + 1 < ids.size(); ++i) {
      const double v = forward(m, std::vector<TokenId>{ids[i], ids[i + 1]}, false).pooled(f);
      if (v > best) {
        best = v;
        best_pos = static_cast<int>(i);
      }
    }
    EXPECT_DOUBLE_EQ(act.pooled(f), best);
    EXPECT_EQ(act.argmax[0][static_cast<std::size_t>(f)], best_pos);
  }
  // Appending a copy of the document after a PAD separator cannot change
  // which values are maximal.
  auto doubled = ids;
  doubled.push_back(Vocabulary::kPad);
  doubled.insert(doubled.end(), ids.begin(), ids.end());
  const auto act2 = forward(m, doubled, false);
  for (int f = 0; f < 3; ++f) EXPECT_GE(act2.pooled(f), act.pooled(f));
}

TEST(Loss, AnalyticValues) {
  EXPECT_NEAR(loss(std::vector<double>{0.5}, std::vector<int>{1}), 0.693147, 1e-6);
  EXPECT_NEAR(loss(std::vector<double>{1.0 - 1e-7}, std::vector<int>{1}), 1e-7, 1e-12);
  EXPECT_NEAR(loss(std::vector<double>{0.5, 0.5}, std::vector<int>{1, 0}), 0.693147, 1e-6);
  EXPECT_TRUE(std::isfinite(loss(std::vector<double>{0.0}, std::vector<int>{1})));
}

TEST(Backward, SaturatedLossHasNoOutputGradient) {
  Rng rng(3);
  auto m = random_small_cnn(rng, 7, 4, {2, 3}, 3, 1);
  m.output_bias(0) = 40.0;
  const std::vector<TokenId> ids{2, 3, 4};
  const auto g = backward(m, forward(m, ids, false), std::vector<int>{1});
  EXPECT_LE(g.output_weights.cwiseAbs().maxCoeff(), 1e-6);
  EXPECT_LE(std::abs(g.output_bias(0)), 1e-6);
}

TEST(Backward, MatchesFiniteDifferencesOnRandomModel) {
  Rng rng(4);
  for (int trial = 0; trial < 5; ++trial) {
    auto m = random_small_cnn(rng, 7, 4, {2, 3}, 3, 1);
    std::vector<TokenId> ids;
    const auto len = 1 + rng.below(7);
    for (std::size_t i = 0; i < len; ++i) ids.push_back(static_cast<TokenId>(1 + rng.below(6)));
    const auto r = cnn_gradient_check(m, ids, {static_cast<int>(rng.below(2))});
    EXPECT_GT(r.checked, 0u);
    EXPECT_LT(r.max_rel_error, 1e-4);
  }
}

TEST(Backward, MatchesFiniteDifferencesWithDropoutAndTwoHeads) {
  Rng rng(6);
  auto m = random_small_cnn(rng, 9, 3, {2, 3}, 4, 2, 0.5);
  const auto r = cnn_gradient_check(m, {2, 5, 3, 7, 8, 2}, {1, 0});
  EXPECT_GT(r.checked, 0u);
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(Backward, DroppedFeatureGetsNoFilterGradient) {
  Rng rng(7);
  auto m = random_small_cnn(rng, 9, 3, {2, 3}, 4, 1, 0.5);
  Rng drop(12);
  const std::vector<TokenId> ids{2, 5, 3, 7, 8};
  const auto act = forward(m, ids, true, &drop);
  const auto g = backward(m, act, std::vector<int>{1});
  int dropped = 0;
  for (int j = 0; j < static_cast<int>(act.mask.size()); ++j) {
    if (act.mask(j) != 0.0) continue;
    ++dropped;
    const int b = j / 4, f = j % 4;
    EXPECT_TRUE(g.bank_weights[static_cast<std::size_t>(b)].row(f).isZero(0.0));
    EXPECT_EQ(g.bank_biases[static_cast<std::size_t>(b)](f), 0.0);
  }
  EXPECT_GT(dropped, 0);
}

TEST(Adadelta, FirstStepMatchesHandEvaluation) {
  std::vector<double> x{0.0};
  AdadeltaSlot slot;
  const std::vector<double> g{1.0};
  adadelta_step(x, g, slot, 0.95, 1e-6);
  EXPECT_NEAR(x[0], -std::sqrt(1e-6 / (0.05 + 1e-6)), 1e-12);
  EXPECT_NEAR(x[0], -0.004472, 1e-6);
}

TEST(Adadelta, ZeroGradientOnlyDecaysAccumulators) {
  std::vector<double> x{1.0, -2.0};
  AdadeltaSlot slot;
  adadelta_step(x, std::vector<double>{0.5, -0.25}, slot, 0.95, 1e-6);
  const auto before = x;
  const auto sq = slot.sq_grad, su = slot.sq_update;
  adadelta_step(x, std::vector<double>{0.0, 0.0}, slot, 0.95, 1e-6);
  EXPECT_EQ(x, before);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_DOUBLE_EQ(slot.sq_grad[i], 0.95 * sq[i]);
    EXPECT_DOUBLE_EQ(slot.sq_update[i], 0.95 * su[i]);
  }
}

TEST(Adadelta, StepOpposesGradientSign) {
  Rng rng(8);
  std::vector<double> x(50, 0.0), g(50);
  AdadeltaSlot slot;
  for (int step = 0; step < 5; ++step) {
    for (auto& v : g) v = rng.uniform(-1, 1);
    const auto before = x;
    adadelta_step(x, g, slot, 0.95, 1e-6);
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(std::signbit(x[i] - before[i]), !std::signbit(g[i]));
  }
}

TEST(MaxNorm, RescalesOnlyLongRows) {
  EmbeddingMatrix e(4, 3);
  e.vectors.row(2) << 6, 0, 0;
  e.vectors.row(3) << 1, 1, 1;
  const auto out = apply_max_norm(std::as_const(e), 3.0);
  EXPECT_TRUE(out.vectors.row(2) == Eigen::RowVector3d(3, 0, 0));
  EXPECT_TRUE(out.vectors.row(3) == Eigen::RowVector3d(1, 1, 1));
  EXPECT_TRUE(e.vectors.row(2) == Eigen::RowVector3d(6, 0, 0));
  EXPECT_TRUE(out.vectors.row(0).isZero(0.0));
}

TEST(Train, ZeroEpochsKeepsInitialization) {
  const auto vocab = planted_vocabulary();
  auto cfg = small_train_config();
  cfg.epochs = 0;
  const auto init = init_model(cfg, vocab, random_embeddings(vocab.size(), 8, 1), {"alcohol_abuse"});
  auto m = init;
  const auto ex = planted_examples(vocab, 30, 1);
  const auto state = train(m, ex, {});
  EXPECT_TRUE(state.history.empty());
  EXPECT_EQ(m.embeddings, init.embeddings);
  EXPECT_TRUE(m.output_weights == init.output_weights);
}

TEST(Train, LearnsPlantedPhraseUnderConstraints) {
  const auto vocab = planted_vocabulary();
  const auto cfg = small_train_config();
  auto m = init_model(cfg, vocab, random_embeddings(vocab.size(), 16, 2), {"alcohol_abuse"});
  const auto ex = planted_examples(vocab, 200, 3);
  double worst_norm = 0.0;
  bool pad_zero = true;
  const auto state = train(m, ex, ex, [&](const CnnModel& model, const TrainState&) {
    for (Eigen::Index r = 1; r < model.embeddings.vectors.rows(); ++r) {
      worst_norm = std::max(worst_norm, model.embeddings.vectors.row(r).norm());
    }
    pad_zero = pad_zero && model.embeddings.vectors.row(Vocabulary::kPad).isZero(0.0);
  });
  ASSERT_EQ(state.history.size(), 20u);
  EXPECT_EQ(state.step, 20 * 20);
  EXPECT_LT(state.history.back().train_loss, state.history.front().train_loss);
  EXPECT_LE(worst_norm, 3.0 + 1e-9);
  EXPECT_TRUE(pad_zero);
  const auto f = evaluate_f1(m, ex);
  ASSERT_TRUE(f[0].has_value());
  EXPECT_EQ(*f[0], 1.0);
  ASSERT_TRUE(state.history.back().val_f1[0].has_value());

  // A held-out note containing the phrase is labeled positive.
  const auto p = predict(m, tokenize("w1 w2 w3 heavy alcohol abuse w4 w5 w6 w7"), 0.5);
  EXPECT_EQ(p[0].label, 1);
}

TEST(Train, DeterministicUnderSeed) {
  const auto vocab = planted_vocabulary();
  auto cfg = small_train_config();
  cfg.epochs = 3;
  const auto ex = planted_examples(vocab, 60, 4);
  auto run = [&] {
    auto m = init_model(cfg, vocab, random_embeddings(vocab.size(), 8, 9), {"alcohol_abuse"});
    const auto state = train(m, ex, ex);
    return std::make_pair(to_json(m).dump(), state.history.back().train_loss);
  };
  const auto a = run();
  const auto b = run();
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
}

TEST(Predict, ThresholdConventions) {
  const auto vocab = words({"a"});
  auto m = zero_model(vocab, 3, {2}, 1);
  m.output_bias(0) = 60.0;  // sigmoid rounds to 1.0 in double precision
  const auto p = predict(m, TokenSequence{"a"}, 1.0);
  EXPECT_LE(p[0].probability, 1.0 - 1e-7);
  EXPECT_EQ(p[0].label, 0);
  EXPECT_EQ(predict(m, TokenSequence{"a"}, 0.5)[0].label, 1);
}

TEST(Checkpoint, RoundTripReproducesPredictionsExactly) {
  Rng rng(10);
  auto m = random_small_cnn(rng, 12, 5, {2, 3}, 4, 2);
  const auto j = to_json(m);
  std::stringstream ss;
  ss << j.dump();
  const auto back = cnn_from_json(nlohmann::json::parse(ss.str()));
  EXPECT_EQ(back.embeddings, m.embeddings);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<TokenId> ids;
    for (std::size_t i = 0, n = 1 + rng.below(9); i < n; ++i) ids.push_back(static_cast<TokenId>(rng.below(12)));
    EXPECT_TRUE(forward(m, ids, false).probabilities == forward(back, ids, false).probabilities);
  }
  EXPECT_EQ(to_json(back).dump(), j.dump());
}

TEST(Checkpoint, RejectsTamperedDocuments) {
  Rng rng(11);
  const auto j = to_json(random_small_cnn(rng, 8, 3, {2}, 2, 1));
  auto bad_hash = j;
  bad_hash["vocab_hash"] = "0000000000000000";
  EXPECT_THROW(cnn_from_json(bad_hash), ModelLoadError);
  auto bad_shape = j;
  bad_shape["output_weights"]["cols"] = 99;
  EXPECT_THROW(cnn_from_json(bad_shape), ModelLoadError);
  auto wrong_format = j;
  wrong_format["format"] = "something";
  EXPECT_THROW(cnn_from_json(wrong_format), ModelLoadError);
  EXPECT_THROW(load_cnn_checkpoint("/nonexistent/model.json"), ModelLoadError);
}

TEST(Config, Validation) {
  CnnConfig c;
  EXPECT_NO_THROW(c.validate());
  c.threshold = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.filter_widths = {2, 2};
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.dropout_p = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  const auto parsed = cnn_config_from_json(nlohmann::json{{"epochs", 3}, {"activation", "relu"}});
  EXPECT_EQ(parsed.epochs, 3);
  EXPECT_EQ(parsed.activation, Activation::Relu);
  EXPECT_EQ(parsed.filters_per_width, 100);
  EXPECT_THROW(cnn_config_from_json(nlohmann::json{{"activation", "sigmoid"}}), ConfigError);
}
