#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "cimdd/error.hpp"
#include "cimdd/gradcheck.hpp"
#include "cimdd/optim.hpp"
#include "cimdd/tape.hpp"

using namespace cimdd;

namespace {

// Explicit per-row attention, independent of the vectorized kernel.
Tensor loop_attention(const Tensor& q, const Tensor& k, const Tensor& v, double scale) {
  Tensor out({q.rows(), v.cols()});
  for (std::size_t i = 0; i < q.rows(); ++i) {
    std::vector<double> s(k.rows());
    double mx = -INFINITY;
    for (std::size_t j = 0; j < k.rows(); ++j) {
      double dot = 0.0;
      for (std::size_t c = 0; c < q.cols(); ++c) dot += q.at(i, c) * k.at(j, c);
      s[j] = dot * scale;
      mx = std::max(mx, s[j]);
    }
    double z = 0.0;
    for (auto& x : s) z += (x = std::exp(x - mx));
    for (std::size_t j = 0; j < k.rows(); ++j)
      for (std::size_t c = 0; c < v.cols(); ++c) out.at(i, c) += s[j] / z * v.at(j, c);
  }
  return out;
}

}  // namespace

TEST(Matmul, IdentityLeavesOperandUnchanged) {
  Tape t;
  auto id = t.constant(Tensor::matrix({{1, 0}, {0, 1}}));
  auto b = t.constant(Tensor::matrix({{1, 2, 3}, {4, 5, 6}}));
  EXPECT_EQ(matmul(id, b).value(), b.value());
}

TEST(Matmul, HandArithmetic) {
  Tape t;
  auto r = matmul(t.constant(Tensor::matrix({{1, 2}, {3, 4}})), t.constant(Tensor::matrix({{1}, {1}})));
  EXPECT_EQ(r.value(), Tensor::matrix({{3}, {7}}));
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Tape t;
  auto a = t.constant(Tensor::zeros({2, 3}));
  auto b = t.constant(Tensor::zeros({2, 3}));
  try {
    matmul(a, b);
    FAIL();
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("[2x3] x [2x3]"), std::string::npos);
  }
}

TEST(Matmul, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(7);
  Parameter a("A", Tensor::randn({3, 4}, rng));
  Tensor b = Tensor::randn({4, 5}, rng);
  auto rep = grad_check([&](Tape& t) { return sum(matmul(t.param(a), t.constant(b))); }, {&a});
  EXPECT_LE(rep.max_error(), 1e-6);
}

TEST(Softmax, Examples) {
  Tape t;
  auto s1 = softmax_rows(t.constant(Tensor::matrix({{0, 0}})));
  EXPECT_DOUBLE_EQ(s1.value()[0], 0.5);
  EXPECT_DOUBLE_EQ(s1.value()[1], 0.5);
  auto s2 = softmax_rows(t.constant(Tensor::matrix({{0, std::log(2.0), std::log(3.0)}})));
  EXPECT_NEAR(s2.value()[0], 1.0 / 6.0, 1e-15);
  EXPECT_NEAR(s2.value()[1], 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(s2.value()[2], 1.0 / 2.0, 1e-15);
  auto s3 = softmax_rows(t.constant(Tensor::matrix({{1000, 1000}})));
  EXPECT_DOUBLE_EQ(s3.value()[0], 0.5);
  EXPECT_DOUBLE_EQ(s3.value()[1], 0.5);
}

TEST(Softmax, SumsToOneAndShiftInvariant) {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> nd(0.0, 5.0);
  for (int trial = 0; trial < 200; ++trial) {
    Tensor x = Tensor::randn({3, std::size_t(1 + trial % 9)}, rng, 4.0);
    const double c = nd(rng);
    Tensor shifted = x;
    for (auto& v : shifted.data()) v += c;
    Tensor a = softmax_rows(x), b = softmax_rows(shifted);
    for (std::size_t r = 0; r < a.rows(); ++r) {
      double s = 0.0;
      for (double v : a.row_span(r)) {
        EXPECT_GT(v, 0.0);
        s += v;
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
    EXPECT_LE(max_abs_diff(a, b), 1e-12);
  }
}

TEST(Attention, SingleKeyReturnsThatValue) {
  std::mt19937_64 rng(3);
  Tape t;
  auto q = t.constant(Tensor::randn({4, 3}, rng));
  auto k = t.constant(Tensor::randn({1, 3}, rng));
  auto v = t.constant(Tensor::randn({1, 5}, rng));
  auto o = attention(q, k, v, 1.0 / std::sqrt(3.0));
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 5; ++c) EXPECT_DOUBLE_EQ(o.value().at(r, c), v.value().at(0, c));
}

TEST(Attention, OrthogonalQueryGivesColumnMean) {
  Tape t;
  auto q = t.constant(Tensor::matrix({{0, 0, 1}}));
  auto k = t.constant(Tensor::matrix({{1, 0, 0}, {0, 1, 0}, {2, -1, 0}}));
  auto v = t.constant(Tensor::matrix({{1, 2}, {3, 4}, {5, 9}}));
  auto o = attention(q, k, v, 1.0);
  EXPECT_NEAR(o.value()[0], 3.0, 1e-15);
  EXPECT_NEAR(o.value()[1], 5.0, 1e-15);
}

TEST(Attention, MatchesLoopOracleAndStaysInConvexHull) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t nq = 1 + trial % 4, nk = 1 + trial % 7, d = 2 + trial % 5, dv = 1 + trial % 3;
    Tensor q = Tensor::randn({nq, d}, rng), k = Tensor::randn({nk, d}, rng), v = Tensor::randn({nk, dv}, rng);
    Tape t;
    auto o = attention(t.constant(q), t.constant(k), t.constant(v), 1.0 / std::sqrt(double(d)));
    EXPECT_LE(max_abs_diff(o.value(), loop_attention(q, k, v, 1.0 / std::sqrt(double(d)))), 1e-12);
    for (std::size_t c = 0; c < dv; ++c) {
      double lo = INFINITY, hi = -INFINITY;
      for (std::size_t j = 0; j < nk; ++j) lo = std::min(lo, v.at(j, c)), hi = std::max(hi, v.at(j, c));
      for (std::size_t i = 0; i < nq; ++i) {
        EXPECT_GE(o.value().at(i, c), lo - 1e-12);
        EXPECT_LE(o.value().at(i, c), hi + 1e-12);
      }
    }
  }
}

TEST(Attention, GroupedEqualsPerGroupAttention) {
  std::mt19937_64 rng(9);
  Tensor q = Tensor::randn({6, 4}, rng), k = Tensor::randn({9, 4}, rng), v = Tensor::randn({9, 2}, rng);
  Tape t;
  auto o = grouped_attention(t.constant(q), t.constant(k), t.constant(v), 3, 0.5);
  for (std::size_t g = 0; g < 3; ++g) {
    Tensor qg({2, 4}), kg({3, 4}), vg({3, 2});
    for (std::size_t i = 0; i < 8; ++i) qg[i] = q[g * 8 + i];
    for (std::size_t i = 0; i < 12; ++i) kg[i] = k[g * 12 + i];
    for (std::size_t i = 0; i < 6; ++i) vg[i] = v[g * 6 + i];
    Tensor ref = loop_attention(qg, kg, vg, 0.5);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(o.value()[g * 4 + i], ref[i], 1e-12);
  }
}

TEST(Backward, SumGivesOnes) {
  Parameter p("p", Tensor::matrix({{1, -2, 3}}));
  Tape t;
  t.backward(sum(t.param(p)));
  EXPECT_EQ(p.grad, Tensor::filled({1, 3}, 1.0));
}

TEST(Backward, SquareGivesTwiceValue) {
  Parameter p("p", Tensor::matrix({{1, -2, 3}}));
  Tape t;
  auto v = t.param(p);
  t.backward(sum(mul(v, v)));
  EXPECT_EQ(p.grad, Tensor::matrix({{2, -4, 6}}));
}

TEST(Backward, AccumulatesAcrossUses) {
  Parameter p("p", Tensor::matrix({{1.5}}));
  Tape t;
  auto a = t.param(p);
  auto b = t.param(p);
  t.backward(sum(add(a, add(b, b))));
  EXPECT_DOUBLE_EQ(p.grad[0], 3.0);
}

TEST(Backward, NonScalarLossIsContractError) {
  Parameter p("p", Tensor::matrix({{1, 2}}));
  Tape t;
  EXPECT_THROW(t.backward(t.param(p)), ContractError);
}

TEST(Tape, ReplayIsBitIdentical) {
  std::mt19937_64 rng(1);
  Tensor x = Tensor::randn({4, 8}, rng), w = Tensor::randn({8, 8}, rng);
  auto run = [&] {
    Tape t;
    auto h = gelu(matmul(t.constant(x), t.constant(w)));
    return softmax_rows(attention(h, h, h, 0.3)).value();
  };
  EXPECT_EQ(run(), run());
}

TEST(Tape, CheckFiniteFlagsOverflow) {
  Tape t;
  t.set_check_finite(true);
  auto a = t.constant(Tensor::matrix({{1e200}}));
  EXPECT_THROW(mul(a, a), NumericError);
}

TEST(Tensor, RejectsNonFiniteData) {
  EXPECT_THROW(Tensor({2}, {1.0, NAN}), NumericError);
  EXPECT_THROW(Tensor({2}, {1.0, INFINITY}), NumericError);
  EXPECT_THROW(Tensor({3}, {1.0, 2.0}), DimensionError);
}

TEST(GradCheck, LinearLayer) {
  std::mt19937_64 rng(2);
  Parameter w("W", Tensor::randn({3, 4}, rng)), b("b", Tensor::randn({4}, rng));
  Tensor x = Tensor::randn({5, 3}, rng), r = Tensor::randn({5, 4}, rng);
  auto rep = grad_check(
      [&](Tape& t) { return sum(mul(add_bias(matmul(t.constant(x), t.param(w)), t.param(b)), t.constant(r))); },
      {&w, &b});
  EXPECT_LE(rep.max_error(), 1e-7);
}

TEST(GradCheck, SoftmaxCrossEntropy) {
  std::mt19937_64 rng(4);
  Parameter w("W", Tensor::randn({3, 2}, rng, 0.5));
  Tensor x = Tensor::randn({6, 3}, rng);
  std::vector<int> y{0, 1, 1, 0, 1, 0};
  auto rep = grad_check([&](Tape& t) { return cross_entropy(matmul(t.constant(x), t.param(w)), y); }, {&w});
  EXPECT_LE(rep.max_error(), 1e-6);
}

TEST(GradCheck, ConstantFunctionHasZeroError) {
  Parameter w("W", Tensor::matrix({{1, 2}}));
  auto rep = grad_check([&](Tape& t) {
    t.param(w);
    return t.constant(Tensor({1}, {4.0}));
  }, {&w});
  EXPECT_EQ(rep.max_error(), 0.0);
  EXPECT_EQ(w.grad, Tensor::zeros({1, 2}));
}

TEST(GradCheck, NonDeterministicClosureIsRejected) {
  Parameter w("W", Tensor::matrix({{1}}));
  int calls = 0;
  EXPECT_THROW(grad_check([&](Tape& t) { return scale(sum(t.param(w)), 1.0 + ++calls); }, {&w}),
               DeterminismError);
}

// Every differentiable primitive, checked through a random scalar projection.
TEST(GradCheck, EveryOpWithinTolerance) {
  std::mt19937_64 rng(21);
  Parameter a("a", Tensor::randn({4, 6}, rng)), b("b", Tensor::randn({4, 6}, rng));
  Parameter m("m", Tensor::randn({6, 3}, rng)), g("gamma", Tensor::randn({6}, rng)),
      be("beta", Tensor::randn({6}, rng)), s("s", Tensor::randn({4, 1}, rng));
  Tensor r46 = Tensor::randn({4, 6}, rng);
  using Build = std::function<Var(Tape&)>;
  std::vector<std::pair<std::string, Build>> cases = {
      {"matmul", [&](Tape& t) { return sum(mul(matmul(t.param(a), t.param(m)), matmul(t.param(b), t.param(m)))); }},
      {"matmul_nt", [&](Tape& t) { return sum(mul(matmul_nt(t.param(a), t.param(b)), matmul_nt(t.param(b), t.param(a)))); }},
      {"transpose", [&](Tape& t) { return sum(mul(transpose(t.param(a)), transpose(t.constant(r46)))); }},
      {"add_sub_mul", [&](Tape& t) { return sum(mul(sub(t.param(a), t.param(b)), add(t.param(a), t.constant(r46)))); }},
      {"add_bias", [&](Tape& t) { return sum(mul(add_bias(t.param(a), t.param(g)), t.param(a))); }},
      {"scale_rows", [&](Tape& t) { return sum(mul(scale_rows(t.param(a), t.param(s)), t.param(b))); }},
      {"tanh", [&](Tape& t) { return sum(mul(tanh(t.param(a)), t.constant(r46))); }},
      {"gelu", [&](Tape& t) { return sum(mul(gelu(t.param(a)), t.constant(r46))); }},
      {"softmax", [&](Tape& t) { return sum(mul(softmax_rows(t.param(a)), t.constant(r46))); }},
      {"normalize_rows", [&](Tape& t) {
         auto sq = mul(t.param(a), t.param(a));
         return sum(mul(normalize_rows(sq), t.constant(r46)));
       }},
      {"layer_norm", [&](Tape& t) { return sum(mul(layer_norm_rows(t.param(a), t.param(g), t.param(be)), t.constant(r46))); }},
      {"concat_slice", [&](Tape& t) {
         auto c = concat_cols({t.param(a), t.param(b)});
         return sum(mul(slice_cols(c, 3, 6), t.constant(r46)));
       }},
      {"reshape_mean_groups", [&](Tape& t) {
         auto r = reshape(t.param(a), {8, 3});
         return sum(mul(mean_groups(r, 4), mean_groups(r, 4)));
       }},
      {"attention", [&](Tape& t) {
         auto o = attention(t.param(a), t.param(b), matmul(t.param(b), t.param(m)), 0.4);
         return sum(mul(o, o));
       }},
      {"grouped_attention", [&](Tape& t) {
         auto o = grouped_attention(t.param(a), t.param(b), matmul(t.param(b), t.param(m)), 2, 0.4);
         return sum(mul(o, o));
       }},
      {"cross_entropy", [&](Tape& t) { return cross_entropy(reshape(t.param(m), {9, 2}), {0, 1, 1, 0, 0, 1, 1, 1, 0}); }},
  };
  for (const auto& [name, fn] : cases) {
    auto rep = grad_check(fn, {&a, &b, &m, &g, &be, &s});
    EXPECT_LE(rep.max_error(), 1e-4) << name;
  }
}

TEST(AdamW, ZeroGradientNoDecayLeavesValue) {
  Parameter p("p", Tensor::matrix({{1, -2}}));
  AdamW opt({&p}, {.lr = 0.1, .weight_decay = 0.0});
  opt.step();
  EXPECT_EQ(p.value, Tensor::matrix({{1, -2}}));
}

TEST(AdamW, FirstStepMagnitudeIsLearningRate) {
  Parameter p("p", Tensor::matrix({{0.0, 0.0}}));
  p.grad = Tensor::matrix({{0.3, -7.0}});
  AdamW opt({&p}, {.lr = 0.01, .weight_decay = 0.0});
  opt.step();
  EXPECT_NEAR(p.value[0], -0.01, 1e-9);
  EXPECT_NEAR(p.value[1], 0.01, 1e-9);
}

TEST(AdamW, QuadraticDecreasesMonotonically) {
  Parameter w("w", Tensor::matrix({{0.0}}));
  AdamW opt({&w}, {.lr = 0.1});
  auto f = [&] { return (w.value[0] - 3.0) * (w.value[0] - 3.0); };
  double prev = f();
  for (int i = 0; i < 10; ++i) {
    opt.zero_grad();
    Tape t;
    auto d = sub(t.param(w), t.constant(Tensor::matrix({{3.0}})));
    t.backward(sum(mul(d, d)));
    opt.step();
    EXPECT_LT(f(), prev);
    prev = f();
  }
}

TEST(AdamW, NonPositiveLearningRateIsConfigError) {
  Parameter p("p", Tensor::matrix({{1.0}}));
  EXPECT_THROW(AdamW({&p}, {.lr = 0.0}), ConfigError);
  EXPECT_THROW(AdamW({&p}, {.lr = -1e-3}), ConfigError);
}
