#include <gtest/gtest.h>

#include <cmath>

#include "phenocnn/baselines.hpp"
#include "support.hpp"

using namespace phenocnn;

namespace {

FeatureVector dense(std::initializer_list<double> values) {
  FeatureVector v;
  int c = 0;
  for (double x : values) {
    if (x != 0.0) v.entries.emplace_back(c, x);
    ++c;
  }
  return v;
}

/// 25 copies of each XOR corner.
void xor_data(std::vector<FeatureVector>& X, std::vector<int>& y) {
  for (int rep = 0; rep < 25; ++rep) {
    for (int a = 0; a < 2; ++a) {
      for (int b = 0; b < 2; ++b) {
        X.push_back(dense({static_cast<double>(a), static_cast<double>(b)}));
        y.push_back(a ^ b);
      }
    }
  }
}

}  // namespace

TEST(Logreg, ZeroModelAndKnownScores) {
  LinearModel m{{0.0, 0.0}, 0.0, 0.0};
  EXPECT_EQ(predict_logreg(m, dense({1.0, -3.0})), 0.5);
  m.bias = std::log(3.0);
  EXPECT_NEAR(predict_logreg(m, dense({1.0, 1.0})), 0.75, 1e-15);
}

TEST(Logreg, ProbabilityIsMonotoneInScore) {
  LinearModel m{{1.5}, -0.2, 0.0};
  double last = 0.0;
  for (int i = -20; i <= 20; ++i) {
    const double p = predict_logreg(m, dense({i / 4.0}));
    EXPECT_GT(p, last);
    last = p;
  }
}

TEST(Logreg, GradientMatchesFiniteDifferences) {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const auto inst = phenocnn::testing::random_logreg_instance(rng);
    const auto r = phenocnn::testing::logreg_gradient_check(inst);
    EXPECT_GT(r.checked, 0u);
    EXPECT_LT(r.max_rel_error, 1e-6);
  }
}

TEST(Logreg, SeparableOneDimensionalData) {
  std::vector<FeatureVector> X;
  std::vector<int> y;
  for (int i = 1; i <= 10; ++i) {
    X.push_back(dense({-static_cast<double>(i) / 5.0}));
    y.push_back(0);
    X.push_back(dense({static_cast<double>(i) / 5.0}));
    y.push_back(1);
  }
  const auto fit = train_logreg(X, y, 1, 1e-3);
  ASSERT_EQ(fit.model.weights.size(), 1u);
  EXPECT_GT(fit.model.weights[0], 0.0);
  for (std::size_t i = 0; i < X.size(); ++i) EXPECT_EQ(predict_logreg(fit.model, X[i]) >= 0.5, y[i] == 1);
}

TEST(Logreg, HeavyRegularizationShrinksWeights) {
  Rng rng(6);
  const auto inst = phenocnn::testing::random_logreg_instance(rng);
  const auto fit = train_logreg(inst.X, inst.y, inst.dim, 1e6);
  double sq = 0.0;
  for (double w : fit.model.weights) sq += w * w;
  EXPECT_LT(std::sqrt(sq), 1e-2);
}

TEST(Logreg, ObjectiveIsNonIncreasingWithRegularization) {
  Rng rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    auto inst = phenocnn::testing::random_logreg_instance(rng);
    const auto fit = train_logreg(inst.X, inst.y, inst.dim, 0.1);
    ASSERT_GE(fit.objective_history.size(), 2u);
    EXPECT_LT(fit.objective_history.back(), fit.objective_history.front());
    for (std::size_t i = 1; i < fit.objective_history.size(); ++i) {
      ASSERT_LE(fit.objective_history[i], fit.objective_history[i - 1]);
    }
    std::vector<double> gw;
    const double gb = logreg_gradient(fit.model, inst.X, inst.y, gw);
    double gmax = std::abs(gb);
    for (double g : gw) gmax = std::max(gmax, std::abs(g));
    EXPECT_LT(gmax, 1e-2);
  }
}

TEST(Logreg, InvalidInputs) {
  EXPECT_THROW(train_logreg(std::vector<FeatureVector>{}, std::vector<int>{}, 1, 1.0), std::invalid_argument);
  EXPECT_THROW(train_logreg(std::vector<FeatureVector>{dense({1})}, std::vector<int>{1}, 1, -1.0), std::invalid_argument);
}

TEST(RandomForest, IdenticalLabelsGiveSingleLeaves) {
  std::vector<FeatureVector> X{dense({1, 2}), dense({3, 0}), dense({0, 5})};
  const std::vector<int> y{1, 1, 1};
  ForestOptions opt;
  opt.n_trees = 5;
  const auto f = train_rf(X, y, 2, opt);
  for (const auto& t : f.trees) {
    ASSERT_EQ(t.nodes.size(), 1u);
    EXPECT_TRUE(t.nodes[0].is_leaf());
  }
  EXPECT_EQ(predict_rf(f, dense({9, 9})), 1.0);
}

TEST(RandomForest, LearnsXorWithoutBootstrap) {
  std::vector<FeatureVector> X;
  std::vector<int> y;
  xor_data(X, y);
  ForestOptions opt;
  opt.n_trees = 10;
  opt.max_depth = 4;
  opt.bootstrap = false;
  opt.seed = 3;
  const auto f = train_rf(X, y, 2, opt);
  for (std::size_t i = 0; i < X.size(); ++i) EXPECT_EQ(predict_rf(f, X[i]) >= 0.5, y[i] == 1);
}

TEST(RandomForest, SingleUnbootstrappedTreeFitsTrainingData) {
  Rng rng(8);
  std::vector<FeatureVector> X;
  std::vector<int> y;
  for (int i = 0; i < 60; ++i) {
    X.push_back(dense({rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)}));
    y.push_back(rng.bernoulli(0.5) ? 1 : 0);
  }
  ForestOptions opt;
  opt.n_trees = 1;
  opt.bootstrap = false;
  opt.features_per_split = 3;
  const auto f = train_rf(X, y, 3, opt);
  for (std::size_t i = 0; i < X.size(); ++i) EXPECT_EQ(predict_rf(f, X[i]), static_cast<double>(y[i]));
}

TEST(RandomForest, SeedDeterminesForestAndThreadsDoNot) {
  std::vector<FeatureVector> X;
  std::vector<int> y;
  xor_data(X, y);
  ForestOptions opt;
  opt.n_trees = 12;
  opt.seed = 4;
  const auto a = train_rf(X, y, 2, opt);
  const auto b = train_rf(X, y, 2, opt);
  EXPECT_EQ(a, b);
  opt.threads = 3;
  EXPECT_EQ(train_rf(X, y, 2, opt), a);
  opt.seed = 5;
  EXPECT_NE(train_rf(X, y, 2, opt), a);
}

TEST(RandomForest, AggregationIsTreeMean) {
  std::vector<FeatureVector> X;
  std::vector<int> y;
  xor_data(X, y);
  ForestOptions opt;
  opt.n_trees = 6;
  opt.max_depth = 1;
  opt.seed = 9;
  auto f = train_rf(X, y, 2, opt);
  const auto x = dense({1, 0});
  const double base = predict_rf(f, x);

  auto reversed = f;
  std::reverse(reversed.trees.begin(), reversed.trees.end());
  EXPECT_NEAR(predict_rf(reversed, x), base, 1e-12);

  // Adding a copy of one tree pulls the mean toward that tree's vote.
  const double vote = f.trees[0].predict(x);
  auto dup = f;
  dup.trees.push_back(f.trees[0]);
  const double moved = predict_rf(dup, x);
  EXPECT_LE(std::abs(moved - vote), std::abs(base - vote) + 1e-12);
  EXPECT_NEAR(moved, (base * 6 + vote) / 7, 1e-12);
}

TEST(BaselineCheckpoint, LogregRoundTrip) {
  BaselineModel m;
  m.kind = "2gram-lr";
  m.phenotype = "obesity";
  m.recipe.source = FeatureRecipe::Source::Ngrams;
  std::vector<CountMap> docs{extract_ngrams(tokenize("morbid obesity noted"), 2), extract_ngrams(tokenize("no obesity"), 2)};
  m.space = fit_feature_space(docs);
  m.learner = LinearModel{{0.5, -1.25, 2.0}, 0.125, 0.01};
  const auto dir = phenocnn::testing::fresh_dir("baseline_ckpt");
  save_baseline_checkpoint(dir / "m.json", m);
  const auto back = load_baseline_checkpoint(dir / "m.json");
  EXPECT_EQ(to_json(back).dump(), to_json(m).dump());
  const auto t = tokenize("morbid obesity");
  EXPECT_EQ(back.predict_probability(t), m.predict_probability(t));
}

TEST(BaselineCheckpoint, ForestRoundTripAndCorruption) {
  std::vector<FeatureVector> X;
  std::vector<int> y;
  xor_data(X, y);
  ForestOptions opt;
  opt.n_trees = 4;
  BaselineModel m;
  m.kind = "ctakes-rf";
  m.phenotype = "p";
  m.recipe.source = FeatureRecipe::Source::Concepts;
  m.recipe.tfidf = true;
  m.recipe.dictionary.add({"C1", tokenize("alcohol abuse"), {"p"}});
  m.space.keys = {"C1|pos", "C1|neg"};
  m.space.index = {{"C1|pos", 0}, {"C1|neg", 1}};
  m.space.idf = {1.0, 1.5};
  m.space.n_documents = 3;
  m.learner = train_rf(X, y, 2, opt);
  const auto j = to_json(m);
  const auto back = baseline_from_json(nlohmann::json::parse(j.dump()));
  EXPECT_EQ(std::get<Forest>(back.learner), std::get<Forest>(m.learner));
  EXPECT_EQ(back.recipe.dictionary, m.recipe.dictionary);

  auto bad = j;
  bad["learner"]["forest"]["trees"][0]["left"][0] = 0;
  bad["learner"]["forest"]["trees"][0]["feature"][0] = 0;
  EXPECT_THROW(baseline_from_json(bad), ModelLoadError);
  auto wrong = j;
  wrong["format"] = "phenocnn.cnn";
  EXPECT_THROW(baseline_from_json(wrong), ModelLoadError);
  auto truncated = j;
  truncated.erase("feature_space");
  EXPECT_THROW(baseline_from_json(truncated), ModelLoadError);
}
