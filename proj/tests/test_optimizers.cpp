#include <gtest/gtest.h>

#include <cmath>

#include "blackfed/optimizers.hpp"

using namespace blackfed;

namespace {

// Textbook AdamW on one scalar, all in double: theta -= lr * (m_hat /
// (sqrt(v_hat) + eps) + wd * theta).
struct ScalarAdamW {
  double lr, b1, b2, eps, wd;
  double m = 0, v = 0, p1 = 1, p2 = 1;

  double step(double theta, double g) {
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    p1 *= b1;
    p2 *= b2;
    const double mh = m / (1 - p1), vh = v / (1 - p2);
    return theta - lr * (mh / (std::sqrt(vh) + eps) + wd * theta);
  }
};

double quadratic(const ParamVector<double>& x) {
  double s = 0;
  for (double v : x.values) s += v * v;
  return s;
}

}  // namespace

TEST(AdamW, FirstStepByHand) {
  AdamW<double> opt({1e-3, 0.9, 0.999, 1e-8, 0.01}, 1);
  std::vector<double> p{1.0}, g{0.5};
  opt.step(std::span<double>(p), std::span<const double>(g));
  const double want = 1.0 - 1e-3 * (0.5 / (0.5 + 1e-8)) - 1e-3 * 0.01 * 1.0;
  EXPECT_NEAR(p[0], want, 1e-15);
  EXPECT_NEAR(p[0], 0.998990, 1e-6);
}

TEST(AdamW, ZeroGradientNoDecayIsNoOp) {
  AdamW<float> opt({1e-2, 0.9, 0.999, 1e-8, 0.0}, 3);
  std::vector<float> p{1.5f, -2.0f, 0.25f}, g(3, 0.0f);
  const auto before = p;
  for (int i = 0; i < 5; ++i) opt.step(std::span<float>(p), std::span<const float>(g));
  EXPECT_EQ(p, before);
}

TEST(AdamW, MatchesScalarReference) {
  Rng rng(31);
  for (int problem = 0; problem < 20; ++problem) {
    const double target = rng.uniform(-2, 2), curvature = rng.uniform(0.1, 5);
    AdamWConfig cfg{rng.uniform(1e-4, 1e-1), 0.9, 0.999, 1e-8, rng.uniform(0, 0.1)};
    AdamW<double> opt(cfg, 1);
    ScalarAdamW ref{cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay};
    std::vector<double> p{rng.uniform(-3, 3)};
    double q = p[0];
    for (int t = 0; t < 100; ++t) {
      std::vector<double> g{2 * curvature * (p[0] - target)};
      opt.step(std::span<double>(p), std::span<const double>(g));
      q = ref.step(q, 2 * curvature * (q - target));
      ASSERT_NEAR(p[0], q, 1e-9) << "problem " << problem << " step " << t;
    }
  }
}

TEST(AdamW, DecreasesParabolaAfterWarmup) {
  AdamW<double> opt({1e-2, 0.9, 0.999, 1e-8, 0.0}, 1);
  std::vector<double> p{1.0};
  double prev = 1.0;
  for (int t = 0; t < 50; ++t) {
    std::vector<double> g{2 * p[0]};
    opt.step(std::span<double>(p), std::span<const double>(g));
    EXPECT_LT(std::abs(p[0]), prev);
    prev = std::abs(p[0]);
  }
}

TEST(AdamW, NonFiniteGradientAbortsStep) {
  AdamW<float> opt({}, 2);
  std::vector<float> p{1.0f, 2.0f}, g{0.1f, std::nanf("")};
  try {
    opt.step(std::span<float>(p), std::span<const float>(g));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::non_finite);
    EXPECT_NE(std::string(e.what()).find("gradient 1"), std::string::npos);
  }
  EXPECT_EQ(p, (std::vector<float>{1.0f, 2.0f}));
  EXPECT_EQ(opt.steps(), 0u);
}

TEST(AdamW, LengthMismatchRejected) {
  AdamW<float> opt({}, 2);
  std::vector<float> p{1.0f}, g{0.1f};
  EXPECT_THROW(opt.step(std::span<float>(p), std::span<const float>(g)), Error);
}

TEST(SpsaEstimate, HandEvaluatedQuadratic) {
  ParamVector<double> x{{1.0, 2.0}};
  const std::vector<int> d{+1, -1};
  auto e = spsa_estimate<double>(quadratic, x, d, 0.1);
  EXPECT_NEAR(e.loss_plus, 4.82, 1e-12);
  EXPECT_NEAR(e.loss_minus, 5.22, 1e-12);
  EXPECT_NEAR(e.gradient.values[0], -2.0, 1e-12);
  EXPECT_NEAR(e.gradient.values[1], 2.0, 1e-12);
}

TEST(SpsaEstimate, ConstantLossGivesZero) {
  ParamVector<double> x{{0.3, -0.7, 1.1}};
  Rng rng(2);
  auto e = spsa_estimate<double>([](const ParamVector<double>&) { return 3.5; }, x, rademacher(rng, 3), 0.01);
  for (double g : e.gradient.values) EXPECT_EQ(g, 0.0);
}

TEST(SpsaEstimate, RademacherEntriesAreSigns) {
  Rng rng(3);
  int plus = 0;
  for (int v : rademacher(rng, 4000)) {
    ASSERT_TRUE(v == 1 || v == -1);
    plus += v == 1;
  }
  EXPECT_NEAR(plus, 2000, 200);
}

// For a quadratic the symmetric difference is exact, so each estimate is
// g_j + sum_{k != j} g_k d_k d_j. The mean of n draws therefore has
// per-component standard deviation sqrt(sum_{k != j} g_k^2 / n); check it
// stays within five of those.
TEST(SpsaEstimate, UnbiasedOnQuadraticWithinSamplingNoise) {
  const std::size_t dim = 16, n = 10000;
  Rng rng(41);
  std::vector<double> A(dim * dim, 0.0);
  std::vector<double> B(dim * dim);
  for (double& v : B) v = rng.normal();
  for (std::size_t i = 0; i < dim; ++i)
    for (std::size_t j = 0; j < dim; ++j) {
      for (std::size_t k = 0; k < dim; ++k) A[i * dim + j] += B[k * dim + i] * B[k * dim + j] / dim;
      if (i == j) A[i * dim + j] += 0.1;
    }
  ParamVector<double> theta;
  for (std::size_t i = 0; i < dim; ++i) theta.values.push_back(rng.normal());
  std::vector<double> g(dim, 0.0);
  for (std::size_t i = 0; i < dim; ++i)
    for (std::size_t j = 0; j < dim; ++j) g[i] += 2 * A[i * dim + j] * theta.values[j];
  LossFn<double> f = [&](const ParamVector<double>& x) {
    double s = 0;
    for (std::size_t i = 0; i < dim; ++i)
      for (std::size_t j = 0; j < dim; ++j) s += x.values[i] * A[i * dim + j] * x.values[j];
    return s;
  };
  SpsaConfig cfg;
  cfg.seed = 5;
  SpsaGc<double> opt(cfg, dim);
  std::vector<double> mean(dim, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    auto e = opt.estimate(f, theta);
    for (std::size_t j = 0; j < dim; ++j) mean[j] += e.gradient.values[j] / n;
  }
  double total = 0;
  for (double v : g) total += v * v;
  for (std::size_t j = 0; j < dim; ++j) {
    const double sigma = std::sqrt((total - g[j] * g[j]) / n);
    EXPECT_LT(std::abs(mean[j] - g[j]), 5 * sigma) << "component " << j;
  }
}

TEST(SpsaGc, ZeroMomentumIsPlainSpsaBitwise) {
  Rng rng(12);
  ParamVector<float> x0;
  for (int i = 0; i < 40; ++i) x0.values.push_back(static_cast<float>(rng.normal()));
  LossFn<float> f = [](const ParamVector<float>& x) {
    double s = 0;
    for (std::size_t i = 0; i < x.size(); ++i) s += std::cos(x.values[i]) * (1.0 + 0.1 * static_cast<double>(i));
    return s;
  };
  SpsaConfig cfg;
  cfg.beta = 0.0;
  cfg.seed = 77;
  SpsaGc<float> gc(cfg, x0.size());
  Spsa<float> plain(cfg, x0.size());
  ParamVector<float> a = x0, b = x0;
  for (int t = 0; t < 200; ++t) {
    gc.step(a, f);
    plain.step(b, f);
    ASSERT_EQ(a, b) << "diverged at step " << t;
  }
}

TEST(SpsaGc, ConvergesOnShiftedParabola) {
  SpsaConfig cfg;  // default schedule
  SpsaGc<double> opt(cfg, 1);
  ParamVector<double> x{{0.0}};
  LossFn<double> f = [](const ParamVector<double>& p) { return (p.values[0] - 3) * (p.values[0] - 3); };
  for (int t = 0; t < 500; ++t) opt.step(x, f);
  EXPECT_LT(std::abs(x.values[0] - 3), 0.1);
}

TEST(SpsaGc, LookAheadPointIsThetaPlusBetaM) {
  // Momentum is seeded by one step; the second step's probes must be
  // centred on x + beta*m.
  SpsaConfig cfg;
  cfg.seed = 4;
  SpsaGc<double> opt(cfg, 2);
  ParamVector<double> x{{1.0, -1.0}};
  LossFn<double> f = [](const ParamVector<double>& p) { return p.values[0] * 2 + p.values[1]; };
  opt.step(x, f);
  const std::vector<double> m(opt.momentum().begin(), opt.momentum().end());
  std::vector<ParamVector<double>> seen;
  LossFn<double> record = [&](const ParamVector<double>& p) {
    seen.push_back(p);
    return f(p);
  };
  const ParamVector<double> before = x;
  opt.step(x, record);
  ASSERT_EQ(seen.size(), 2u);
  for (std::size_t j = 0; j < 2; ++j) {
    const double centre = 0.5 * (seen[0].values[j] + seen[1].values[j]);
    EXPECT_NEAR(centre, before.values[j] + 0.9 * m[j], 1e-12);
  }
}

TEST(SpsaGc, SameSeedSameTrajectory) {
  LossFn<float> f = [](const ParamVector<float>& p) { return std::pow(p.values[0] - 1.0, 2) + std::sin(p.values[1]); };
  SpsaConfig cfg;
  cfg.seed = 9;
  SpsaGc<float> a(cfg, 2), b(cfg, 2);
  ParamVector<float> x{{0.f, 0.f}}, y{{0.f, 0.f}};
  for (int t = 0; t < 100; ++t) {
    a.step(x, f);
    b.step(y, f);
  }
  EXPECT_EQ(x, y);
}

TEST(SpsaGc, NonFiniteLossSkipsStep) {
  SpsaGc<float> opt(SpsaConfig{}, 2);
  ParamVector<float> x{{1.f, 2.f}};
  auto r = opt.step(x, [](const ParamVector<float>&) { return std::nan(""); });
  EXPECT_FALSE(r.applied);
  EXPECT_EQ(x, (ParamVector<float>{{1.f, 2.f}}));
  EXPECT_EQ(opt.iteration(), 1u);
}

TEST(SpsaGc, StepSizeUnderflowIsTerminal) {
  SpsaConfig cfg;
  cfg.a = 1e-20;
  SpsaGc<float> opt(cfg, 1);
  ParamVector<float> x{{0.f}};
  try {
    opt.step(x, [](const ParamVector<float>&) { return 0.0; });
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::schedule);
  }
}

TEST(SpsaGc, ScheduleFormulas) {
  SpsaConfig cfg;
  EXPECT_DOUBLE_EQ(cfg.step_size(0), 0.01 / std::pow(101.0, 0.602));
  EXPECT_DOUBLE_EQ(cfg.perturbation(9), 0.005 / std::pow(10.0, 0.101));
}

TEST(SpsaGc, AveragedPerturbations) {
  SpsaConfig cfg;
  cfg.num_perturbations = 4;
  SpsaGc<double> opt(cfg, 3);
  int calls = 0;
  ParamVector<double> x{{1, 2, 3}};
  opt.step(x, [&](const ParamVector<double>& p) {
    ++calls;
    return quadratic(p);
  });
  EXPECT_EQ(calls, 8);
  cfg.num_perturbations = 0;
  EXPECT_THROW(SpsaGc<double>(cfg, 3), Error);
}
