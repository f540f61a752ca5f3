#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "cimdd/error.hpp"
#include "cimdd/gradcheck.hpp"
#include "cimdd/head.hpp"

using namespace cimdd;
using namespace cimdd::head;

namespace {

std::vector<double> loop_gate(const Gate& g, const std::vector<std::vector<double>>& feats) {
  const std::size_t d = feats[0].size();
  std::vector<double> s(feats.size());
  for (std::size_t m = 0; m < feats.size(); ++m) {
    double score = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      double pre = 0.0;
      for (std::size_t i = 0; i < d; ++i) pre += feats[m][i] * g.w_g.value.at(i, j);
      score += std::tanh(pre) * g.u.value[j];
    }
    s[m] = score;
  }
  double mx = *std::max_element(s.begin(), s.end()), z = 0.0;
  for (auto& v : s) z += (v = std::exp(v - mx));
  for (auto& v : s) v /= z;
  return s;
}

}  // namespace

TEST(Gate, IdenticalFeaturesGiveUniformWeights) {
  std::mt19937_64 rng(1);
  Gate g(6, rng);
  Tensor f = Tensor::randn({2, 6}, rng);
  Tape t;
  auto out = g(t, {t.constant(f), t.constant(f), t.constant(f)});
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(out.weights.value()[i], 1.0 / 3.0);
}

TEST(Gate, SaturatedScoreTakesAllWeight) {
  std::mt19937_64 rng(2);
  Gate g(2, rng);
  // W_g = I, u = (25, 0): score = 25 tanh(f_0).
  g.w_g.value = Tensor::matrix({{1, 0}, {0, 1}});
  g.u.value = Tensor::matrix({{25}, {0}});
  Tape t;
  auto out = g(t, {t.constant(Tensor::matrix({{100, 0}})), t.constant(Tensor::matrix({{-100, 0}}))});
  EXPECT_GE(out.weights.value()[0], 1.0 - 1e-20);
  EXPECT_LE(out.weights.value()[1], 1e-20);
}

TEST(Gate, WeightsMatchLoopOracle) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    Gate g(5, rng);
    std::vector<Tensor> f{Tensor::randn({3, 5}, rng), Tensor::randn({3, 5}, rng), Tensor::randn({3, 5}, rng)};
    Tape t;
    auto out = g(t, {t.constant(f[0]), t.constant(f[1]), t.constant(f[2])});
    for (std::size_t b = 0; b < 3; ++b) {
      std::vector<std::vector<double>> rows;
      for (const auto& x : f) rows.emplace_back(x.row_span(b).begin(), x.row_span(b).end());
      auto ref = loop_gate(g, rows);
      double s = 0.0;
      for (std::size_t m = 0; m < 3; ++m) {
        EXPECT_NEAR(out.weights.value().at(b, m), ref[m], 1e-12);
        s += out.weights.value().at(b, m);
        for (std::size_t j = 0; j < 5; ++j)
          EXPECT_NEAR(out.tokens.value().at(b * 3 + m, j), ref[m] * f[m].at(b, j), 1e-12);
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Gate, SingleModalityIsConfigError) {
  std::mt19937_64 rng(4);
  Gate g(3, rng);
  Tape t;
  EXPECT_THROW(g(t, {t.constant(Tensor::zeros({1, 3}))}), ConfigError);
}

TEST(TransformerBlock, PreservesShape) {
  std::mt19937_64 rng(5);
  TransformerBlock blk(8, 4, 4, rng);
  for (std::size_t n : {1, 3, 7}) {
    Tape t;
    EXPECT_EQ(blk(t, t.constant(Tensor::randn({2 * n, 8}, rng)), 2).shape(), (Shape{2 * n, 8}));
  }
}

TEST(TransformerBlock, PermutingTokensPermutesOutput) {
  std::mt19937_64 rng(6);
  TransformerBlock blk(8, 4, 4, rng);
  Tensor x = Tensor::randn({3, 8}, rng);
  Tensor p({3, 8});
  const std::size_t perm[3] = {2, 0, 1};
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 8; ++c) p.at(r, c) = x.at(perm[r], c);
  Tape t1, t2;
  auto y = blk(t1, t1.constant(x), 1).value();
  auto yp = blk(t2, t2.constant(p), 1).value();
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(yp.at(r, c), y.at(perm[r], c), 1e-12);
}

TEST(TransformerBlock, IndivisibleWidthIsConfigError) {
  std::mt19937_64 rng(7);
  EXPECT_THROW(TransformerBlock(6, 4, 4, rng), ConfigError);
}

TEST(TransformerBlock, GradCheck) {
  std::mt19937_64 rng(8);
  TransformerBlock blk(4, 2, 2, rng);
  // Non-trivial norms so every parameter matters.
  for (auto* p : {&blk.ln1_g, &blk.ln1_b, &blk.ln2_g, &blk.ln2_b}) p->value = Tensor::randn({4}, rng, 0.5);
  Tensor x = Tensor::randn({6, 4}, rng), r = Tensor::randn({6, 4}, rng);
  std::vector<Parameter*> params;
  blk.collect(params);
  auto rep = grad_check([&](Tape& t) { return sum(mul(blk(t, t.constant(x), 2), t.constant(r))); }, params);
  EXPECT_LE(rep.max_error(), 1e-4);
}

TEST(Classifier, ZeroLogitsGiveLogTwo) {
  Tape t;
  auto l = cross_entropy(t.constant(Tensor::matrix({{0, 0}})), {1});
  EXPECT_NEAR(l.value()[0], std::log(2.0), 1e-15);
}

TEST(Classifier, LargeMarginGivesNegligibleLoss) {
  Tape t;
  auto l = cross_entropy(t.constant(Tensor::matrix({{0, 50}})), {1});
  EXPECT_LE(l.value()[0], 1e-20);
}

TEST(Classifier, InvalidLabelIsDataError) {
  Tape t;
  EXPECT_THROW(cross_entropy(t.constant(Tensor::matrix({{0, 0}})), {2}), DataError);
}

TEST(FusionHead, LossGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(9);
  FusionHead h({4, 2, 2, 2}, rng);
  std::vector<Tensor> f{Tensor::randn({2, 4}, rng), Tensor::randn({2, 4}, rng), Tensor::randn({2, 4}, rng)};
  std::vector<Parameter*> params;
  h.collect(params);
  auto rep = grad_check(
      [&](Tape& t) {
        return cross_entropy(h.logits(t, {t.constant(f[0]), t.constant(f[1]), t.constant(f[2])}), {0, 1});
      },
      params);
  EXPECT_LE(rep.max_error(), 1e-6);
}

TEST(FusionHead, DeterministicUnderSeed) {
  auto run = [] {
    std::mt19937_64 rng(10);
    FusionHead h({8, 4, 4, 2}, rng);
    Tensor f = Tensor::randn({3, 8}, rng);
    Tape t;
    return h.logits(t, {t.constant(f), t.constant(f), t.constant(f)}).value();
  };
  EXPECT_EQ(run(), run());
}
