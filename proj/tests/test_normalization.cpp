#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "dsg/grad_check.hpp"
#include "dsg/normalization.hpp"

using namespace dsg;

namespace {

Tensor random_tensor(std::mt19937_64& rng, Shape s, float lo = -1, float hi = 1) {
  std::uniform_real_distribution<float> u(lo, hi);
  Tensor t(std::move(s));
  for (auto& v : t.data()) v = u(rng);
  return t;
}

// The normalization formula evaluated per element in double, straight from its
// definition: mean and population variance over N*H*W, then the affine.
std::vector<double> formula_oracle(const Tensor& x, const std::vector<double>& g, const std::vector<double>& b,
                                   double eps, const std::vector<double>* mean_in = nullptr,
                                   const std::vector<double>* var_in = nullptr) {
  const int N = x.dim(0), C = x.dim(1), P = x.dim(2) * x.dim(3);
  std::vector<double> out(x.numel());
  for (int c = 0; c < C; ++c) {
    double mu = 0, var = 0;
    if (mean_in) {
      mu = (*mean_in)[c];
      var = (*var_in)[c];
    } else {
      for (int n = 0; n < N; ++n)
        for (int p = 0; p < P; ++p) mu += x[(n * C + c) * P + p];
      mu /= N * P;
      for (int n = 0; n < N; ++n)
        for (int p = 0; p < P; ++p) var += std::pow(x[(n * C + c) * P + p] - mu, 2);
      var /= N * P;
    }
    for (int n = 0; n < N; ++n)
      for (int p = 0; p < P; ++p) {
        const std::size_t i = (n * C + c) * P + p;
        out[i] = g[c] * (x[i] - mu) / std::sqrt(var + eps) + b[c];
      }
  }
  return out;
}

Tensor bn_train(const Tensor& x, const Tensor& g, const Tensor& b, float eps = 1e-5f) {
  Tape<float> t;
  return t.value(bn_forward_train(t, t.constant(x), t.constant(g), t.constant(b), eps));
}

}  // namespace

TEST(Dbn, ConstantInputGivesBeta) {
  DbnLayer<float> layer(2, 3);
  layer.beta = Tensor({2}, 3.0f);
  const Tensor y = layer.train(Tensor({2, 2, 3, 3}, 5.0f), 1);
  for (float v : y.data()) EXPECT_EQ(v, 3.0f);
}

TEST(Dbn, WorkedExampleOneToFour) {
  const Tensor x({1, 1, 2, 2}, std::vector<float>{1, 2, 3, 4});
  DbnLayer<float> layer(1, 1);
  Tape<float> t;
  Tensor mean, var;
  const Tensor y = t.value(bn_forward_train(t, t.constant(x), t.constant(layer.gamma), t.constant(layer.beta), 1e-5f,
                                            &mean, &var));
  EXPECT_FLOAT_EQ(mean[0], 2.5f);
  EXPECT_FLOAT_EQ(var[0], 1.25f);
  const double expected[4] = {-1.34163, -0.44721, 0.44721, 1.34163};
  const auto oracle = formula_oracle(x, {1.0}, {0.0}, 1e-5);
  const Tensor yd = layer.train(x, 0);
  for (int i = 0; i < 4; ++i) {
    EXPECT_NEAR(y[i], expected[i], 1e-4);
    EXPECT_NEAR(y[i], oracle[i], 1e-4);
    EXPECT_EQ(yd[i], y[i]);
  }
}

TEST(Dbn, SingleDomainIsBitwiseBatchNorm) {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 100; ++trial) {
    const int N = 1 + rng() % 3, C = 1 + rng() % 4, H = 1 + rng() % 4, W = 2 + rng() % 3;
    const Tensor x = random_tensor(rng, {N, C, H, W}, -3, 3);
    DbnLayer<float> layer(C, 1);
    layer.gamma = random_tensor(rng, {C}, 0.5f, 2);
    layer.beta = random_tensor(rng, {C});
    ASSERT_EQ(layer.train(x, 0), bn_train(x, layer.gamma, layer.beta)) << "trial " << trial;

    const Tensor x2 = random_tensor(rng, {N, C, H, W}, -3, 3);
    Tape<float> t;
    const std::span<const float> mean = layer.running_mean.vec(), var = layer.running_var.vec();
    const Tensor ref = t.value(bn_forward_eval(t, t.constant(x2), t.constant(layer.gamma), t.constant(layer.beta),
                                               layer.epsilon, mean, var));
    ASSERT_EQ(layer.eval(x2, 0), ref) << "trial " << trial;
  }
}

TEST(Dbn, StandardizedInputBatchNorm) {
  // mean 0, population variance 1 exactly
  const Tensor x({1, 1, 2, 2}, std::vector<float>{-1, 1, 1, -1});
  const Tensor y = bn_train(x, Tensor({1}, 2.0f), Tensor({1}, 1.0f));
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(y[i], 2 * x[i] / std::sqrt(1 + 1e-5) + 1, 1e-6);
}

TEST(Dbn, EvalWithUnitStatsIsNearIdentity) {
  std::mt19937_64 rng(2);
  DbnLayer<float> layer(3, 2);
  layer.updates = {1, 1};
  const Tensor x = random_tensor(rng, {2, 3, 2, 2});
  const Tensor y = layer.eval(x, 1);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(y[i], x[i] / std::sqrt(1 + 1e-5), 1e-6);
}

TEST(Dbn, EvalUsesPerDomainStats) {
  std::mt19937_64 rng(3);
  DbnLayer<float> layer(2, 2);
  layer.running_mean = Tensor({2, 2}, std::vector<float>{0.1f, -0.2f, 0.7f, 0.3f});
  layer.running_var = Tensor({2, 2}, std::vector<float>{0.5f, 1.5f, 2.0f, 0.25f});
  layer.updates = {3, 5};
  layer.gamma = Tensor({2}, std::vector<float>{1.5f, 0.5f});
  layer.beta = Tensor({2}, std::vector<float>{0.2f, -0.4f});
  const Tensor x = random_tensor(rng, {2, 2, 3, 3});
  const Tensor y0 = layer.eval(x, 0), y1 = layer.eval(x, 1);
  EXPECT_NE(y0, y1);
  for (int d = 0; d < 2; ++d) {
    const std::vector<double> mu{layer.running_mean[d * 2], layer.running_mean[d * 2 + 1]};
    const std::vector<double> var{layer.running_var[d * 2], layer.running_var[d * 2 + 1]};
    const auto oracle = formula_oracle(x, {1.5, 0.5}, {0.2, -0.4}, 1e-5, &mu, &var);
    const Tensor& y = d ? y1 : y0;
    for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(y[i], oracle[i], 1e-5);
  }
}

TEST(Dbn, TrainMatchesFormulaOracle) {
  std::mt19937_64 rng(4);
  DbnLayer<float> layer(3, 2);
  layer.gamma = random_tensor(rng, {3}, 0.5f, 2);
  layer.beta = random_tensor(rng, {3});
  const Tensor x = random_tensor(rng, {2, 3, 4, 4}, -2, 2);
  const auto oracle = formula_oracle(x, {layer.gamma[0], layer.gamma[1], layer.gamma[2]},
                                     {layer.beta[0], layer.beta[1], layer.beta[2]}, 1e-5);
  const Tensor y = layer.train(x, 1);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(y[i], oracle[i], 1e-5);
}

TEST(Dbn, ShiftInvarianceIsExact) {
  // multiples of 1/8 with a power-of-two count per channel keep every sum,
  // mean and difference exact, so the shift cancels without rounding
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> q(-16, 16);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x({2, 3, 2, 4});
    for (auto& v : x.data()) v = q(rng) / 8.0f;
    if (trial % 4 == 0) x[0] += 0.125f;  // avoid relying on a symmetric draw
    Tensor shifted = x;
    const float c = static_cast<float>(q(rng));
    for (auto& v : shifted.data()) v += c;
    DbnLayer<float> a(3, 2), b(3, 2);
    EXPECT_EQ(a.train(x, trial % 2), b.train(shifted, trial % 2)) << "trial " << trial;
  }
}

TEST(Dbn, ScaleInvarianceAtZeroEpsilon) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor x = random_tensor(rng, {2, 2, 3, 3}, -2, 2);
    Tensor scaled = x;
    const float k = std::uniform_real_distribution<float>(0.1f, 10)(rng);
    for (auto& v : scaled.data()) v *= k;
    DbnLayer<float> layer(2, 1, 0.0f);
    const Tensor y1 = layer.train(x, 0), y2 = layer.train(scaled, 0);
    for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(y1[i], y2[i], 1e-5 * (1 + std::abs(y1[i])));
  }
}

TEST(Dbn, OutputStatistics) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const float spread = std::uniform_real_distribution<float>(0.6f, 4)(rng);
    const Tensor x = random_tensor(rng, {4, 3, 4, 4}, -spread, spread);
    DbnLayer<float> layer(3, 1);
    const Tensor y = layer.train(x, 0);
    for (int c = 0; c < 3; ++c) {
      double m = 0, v = 0, in_m = 0, in_v = 0;
      for (int n = 0; n < 4; ++n)
        for (int p = 0; p < 16; ++p) {
          m += y[(n * 3 + c) * 16 + p];
          in_m += x[(n * 3 + c) * 16 + p];
        }
      m /= 64;
      in_m /= 64;
      for (int n = 0; n < 4; ++n)
        for (int p = 0; p < 16; ++p) {
          v += std::pow(y[(n * 3 + c) * 16 + p] - m, 2);
          in_v += std::pow(x[(n * 3 + c) * 16 + p] - in_m, 2);
        }
      v /= 64;
      in_v /= 64;
      ASSERT_GE(in_v, 0.1);
      EXPECT_NEAR(m, 0.0, 1e-5);
      EXPECT_GE(v, 1 - 1e-3);
      EXPECT_LE(v, 1 + 1e-6);  // 1/(1 + eps/var) up to float rounding
    }
  }
}

TEST(Dbn, RunningStatsUpdateAndDomainIsolation) {
  std::mt19937_64 rng(8);
  DbnLayer<float> layer(2, 3);
  layer.running_mean = random_tensor(rng, {3, 2});
  layer.running_var = random_tensor(rng, {3, 2}, 0.5f, 2);
  const Tensor before_mean = layer.running_mean, before_var = layer.running_var;
  const Tensor x = random_tensor(rng, {2, 2, 3, 3}, -2, 2);
  Tape<float> t;
  Tensor bm, bv;
  bn_forward_train(t, t.constant(x), t.constant(layer.gamma), t.constant(layer.beta), 1e-5f, &bm, &bv);
  layer.train(x, 1);
  for (int d = 0; d < 3; ++d)
    for (int c = 0; c < 2; ++c) {
      const std::size_t i = d * 2 + c;
      if (d != 1) {
        EXPECT_EQ(layer.running_mean[i], before_mean[i]);
        EXPECT_EQ(layer.running_var[i], before_var[i]);
      } else {
        EXPECT_EQ(layer.running_mean[i], 0.9f * before_mean[i] + 0.1f * bm[c]);
        EXPECT_EQ(layer.running_var[i], 0.9f * before_var[i] + 0.1f * bv[c]);
      }
    }
  EXPECT_EQ(layer.updates, (std::vector<std::int64_t>{0, 1, 0}));
  for (float v : layer.running_var.data()) EXPECT_GE(v, 0.0f);
}

TEST(Dbn, EvalDoesNotMutate) {
  std::mt19937_64 rng(9);
  DbnLayer<float> layer(2, 2);
  layer.train(random_tensor(rng, {2, 2, 2, 2}), 0);
  const DbnLayer<float> copy = layer;
  layer.eval(random_tensor(rng, {2, 2, 2, 2}), 0);
  layer.eval(random_tensor(rng, {2, 2, 2, 2}), 1);
  EXPECT_EQ(layer.running_mean, copy.running_mean);
  EXPECT_EQ(layer.running_var, copy.running_var);
  EXPECT_EQ(layer.updates, copy.updates);
}

TEST(Dbn, RejectsMixedBatchesAndBadDomains) {
  DbnLayer<float> layer(1, 2);
  Tape<float> t;
  const Var x = t.constant(Tensor({2, 1, 2, 2}, std::vector<float>{1, 2, 3, 4, 5, 6, 7, 8}));
  const Var g = t.constant(layer.gamma), b = t.constant(layer.beta);
  const std::vector<int> mixed{0, 1}, same{1, 1};
  EXPECT_THROW(layer.forward_train(t, x, g, b, std::span<const int>(mixed)), DomainError);
  EXPECT_NO_THROW(layer.forward_train(t, x, g, b, std::span<const int>(same)));
  EXPECT_THROW(layer.forward_train(t, x, g, b, 2), DomainError);
  EXPECT_THROW(layer.forward_train(t, x, g, b, -1), DomainError);
  EXPECT_THROW(layer.forward_eval(t, x, g, b, 5), DomainError);
  EXPECT_ANY_THROW(DbnLayer<float>(1, 0));
}

TEST(Dbn, UnseenDomainFallsBackToAverageWithWarning) {
  DbnLayer<float> layer(2, 3);
  layer.running_mean = Tensor({3, 2}, std::vector<float>{1, 2, 3, 4, 100, 100});
  layer.running_var = Tensor({3, 2}, std::vector<float>{1, 1, 3, 5, 100, 100});
  layer.updates = {1, 1, 0};
  std::vector<std::string> warnings;
  const auto [mean, var] = layer.eval_stats(2, &warnings);
  EXPECT_EQ(mean, (std::vector<float>{2, 3}));
  EXPECT_EQ(var, (std::vector<float>{2, 3}));
  ASSERT_EQ(warnings.size(), 1u);
  EXPECT_NE(warnings[0].find("never trained"), std::string::npos);

  warnings.clear();
  layer.eval_stats(0, &warnings);
  EXPECT_TRUE(warnings.empty());

  DbnLayer<float> fresh(2, 2);
  const auto [m2, v2] = fresh.eval_stats(1, &warnings);
  EXPECT_EQ(m2, (std::vector<float>{0, 0}));
  EXPECT_EQ(v2, (std::vector<float>{1, 1}));
  EXPECT_EQ(warnings.size(), 1u);
}

TEST(Dbn, TrainBackwardPassesGradCheck) {
  std::mt19937_64 rng(10);
  for (int seed = 0; seed < 5; ++seed) {
    const TensorD x = random_tensor(rng, {3, 2, 3, 3}, -2, 2).cast<double>();
    const TensorD g = random_tensor(rng, {2}, 0.5f, 1.5f).cast<double>();
    const TensorD b = random_tensor(rng, {2}).cast<double>();
    GradCheckOptions o;
    o.seed = seed;
    const auto rep = grad_check(
        [seed](Tape<double>& t, const std::vector<Var>& v) {
          DbnLayer<double> layer(2, 3);
          return layer.forward_train(t, v[0], v[1], v[2], seed % 3);
        },
        {x, g, b}, {"x", "gamma", "beta"}, o);
    EXPECT_LE(rep.max_error(), 1e-4) << rep.summary();
  }
}
