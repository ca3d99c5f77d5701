#include <gtest/gtest.h>

#include <cmath>

#include "blackfed/ops.hpp"

using namespace blackfed;

namespace {

template <typename T>
Tensor<T> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(std::move(shape));
  for (T& v : t.values()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

// Direct six-loop convolution in double, with explicit zero padding.
Tensor<double> reference_conv(const Tensor<double>& x, const Tensor<double>& k, const Tensor<double>& b,
                              std::size_t stride, std::size_t pad) {
  const std::size_t B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Cout = k.dim(0), Kh = k.dim(2), Kw = k.dim(3);
  const std::size_t Ho = (H + 2 * pad - Kh) / stride + 1, Wo = (W + 2 * pad - Kw) / stride + 1;
  Tensor<double> y({B, Cout, Ho, Wo});
  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t co = 0; co < Cout; ++co)
      for (std::size_t oy = 0; oy < Ho; ++oy)
        for (std::size_t ox = 0; ox < Wo; ++ox) {
          double acc = b[co];
          for (std::size_t ci = 0; ci < Cin; ++ci)
            for (std::size_t ky = 0; ky < Kh; ++ky)
              for (std::size_t kx = 0; kx < Kw; ++kx) {
                const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
                const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(H) || ix >= static_cast<long>(W)) continue;
                acc += x.at(n, ci, iy, ix) * k.at(co, ci, ky, kx);
              }
          y.at(n, co, oy, ox) = acc;
        }
  return y;
}

template <typename T>
Tensor<T> run_conv(const Tensor<T>& x, const Tensor<T>& k, const Tensor<T>& b, std::size_t stride, std::size_t pad) {
  Graph<T> g;
  return conv2d(g.constant(x), g.constant(k), g.constant(b), stride, pad).value();
}

}  // namespace

TEST(Tensor, ShapeMustMatchData) {
  EXPECT_THROW(Tensor<float>(Shape{2, 3}, std::vector<float>(5)), Error);
  Tensor<float> t({2, 3}, 1.5f);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t[5], 1.5f);
}

TEST(Tensor, StackAddsLeadingAxis) {
  Tensor<float> a({2}, 1.0f), b({2}, 2.0f);
  const Tensor<float>* items[] = {&a, &b};
  Tensor<float> s = stack<float>(items);
  EXPECT_EQ(s.shape(), (Shape{2, 2}));
  EXPECT_EQ(s[2], 2.0f);
}

TEST(Conv2d, OnesGiveNine) {
  Tensor<float> x({1, 1, 3, 3}, 1.0f), k({1, 1, 3, 3}, 1.0f), b({1}, 0.0f);
  Tensor<float> y = run_conv(x, k, b, 1, 0);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_EQ(y[0], 9.0f);
}

TEST(Conv2d, UnitKernelIsIdentity) {
  Rng rng(3);
  Tensor<float> x = random_tensor<float>({2, 1, 4, 5}, rng);
  Tensor<float> k({1, 1, 1, 1}, 1.0f), b({1}, 0.0f);
  EXPECT_EQ(run_conv(x, k, b, 1, 0), x);
}

TEST(Conv2d, MatchesLoopOracleInDouble) {
  Rng rng(11);
  auto x = random_tensor<double>({2, 2, 5, 5}, rng);
  auto k = random_tensor<double>({3, 2, 3, 3}, rng);
  auto b = random_tensor<double>({3}, rng);
  Tensor<double> got = run_conv(x, k, b, 1, 0);
  Tensor<double> want = reference_conv(x, k, b, 1, 0);
  ASSERT_EQ(got.shape(), want.shape());
  for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-6);
}

TEST(Conv2d, MatchesLoopOracleOnRandomShapes) {
  Rng rng(2024);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t B = 1 + rng.below(3), Cin = 1 + rng.below(4), Cout = 1 + rng.below(4);
    const std::size_t K = 1 + rng.below(3), stride = 1 + rng.below(2), pad = rng.below(2);
    const std::size_t H = K + rng.below(6), W = K + rng.below(6);
    auto xd = random_tensor<double>({B, Cin, H, W}, rng);
    auto kd = random_tensor<double>({Cout, Cin, K, K}, rng);
    auto bd = random_tensor<double>({Cout}, rng);
    Tensor<float> got = run_conv(xd.cast<float>(), kd.cast<float>(), bd.cast<float>(), stride, pad);
    // The oracle sees the same float-rounded inputs.
    Tensor<double> want = reference_conv(xd.cast<float>().cast<double>(), kd.cast<float>().cast<double>(),
                                         bd.cast<float>().cast<double>(), stride, pad);
    ASSERT_EQ(got.shape(), want.shape()) << "trial " << trial;
    for (std::size_t i = 0; i < got.size(); ++i) ASSERT_NEAR(got[i], want[i], 1e-5) << "trial " << trial;
  }
}

TEST(Conv2d, OutputExtentFormula) {
  Tensor<float> x({1, 2, 7, 6}), k({4, 2, 3, 3}), b({4});
  EXPECT_EQ(run_conv(x, k, b, 2, 1).shape(), (Shape{1, 4, 4, 3}));
}

TEST(Conv2d, ChannelMismatchNamesDimension) {
  Tensor<float> x({1, 2, 4, 4}), k({1, 3, 3, 3}), b({1});
  try {
    run_conv(x, k, b, 1, 0);
    FAIL() << "expected invalid-shape";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::invalid_shape);
    EXPECT_NE(std::string(e.what()).find("channel"), std::string::npos) << e.what();
  }
}

TEST(Conv2d, KernelLargerThanPaddedInputRejected) {
  Tensor<float> x({1, 1, 2, 2}), k({1, 1, 3, 3}), b({1});
  EXPECT_THROW(run_conv(x, k, b, 1, 0), Error);
  EXPECT_THROW(run_conv(x, k, b, 0, 1), Error);
}

TEST(Relu, Definition) {
  Graph<float> g;
  Tensor<float> x({3}, std::vector<float>{-1, 0, 2});
  EXPECT_EQ(relu(g.constant(x)).value(), Tensor<float>({3}, std::vector<float>{0, 0, 2}));
}

TEST(Elementwise, AddMulScale) {
  Graph<double> g;
  auto a = g.constant(Tensor<double>({2}, std::vector<double>{1, 2}));
  auto b = g.constant(Tensor<double>({2}, std::vector<double>{3, 5}));
  EXPECT_EQ(add(a, b).value(), Tensor<double>({2}, std::vector<double>{4, 7}));
  EXPECT_EQ(mul(a, b).value(), Tensor<double>({2}, std::vector<double>{3, 10}));
  EXPECT_EQ(scale(a, 0.5).value(), Tensor<double>({2}, std::vector<double>{0.5, 1}));
  EXPECT_THROW(add(a, g.constant(Tensor<double>({3}))), Error);
}

TEST(Softmax, EqualLogitsAreUniform) {
  Graph<float> g;
  auto y = softmax_over_channels(g.constant(Tensor<float>({1, 4, 2, 2}, 0.7f))).value();
  for (float v : y.values()) EXPECT_NEAR(v, 0.25f, 1e-7f);
}

TEST(Softmax, ChannelSumsAreOne) {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t C = 2 + rng.below(6);
    Graph<float> g;
    auto y = softmax_over_channels(g.constant(random_tensor<float>({2, C, 3, 4}, rng, -30, 30))).value();
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t p = 0; p < 12; ++p) {
        double s = 0;
        for (std::size_t c = 0; c < C; ++c) s += y[(n * C + c) * 12 + p];
        ASSERT_GE(s, 1 - 1e-5);
        ASSERT_LE(s, 1 + 1e-5);
      }
  }
}

TEST(BilinearUpsample, HandInterpolatedGrid) {
  Graph<double> g;
  auto y = bilinear_upsample(g.constant(Tensor<double>({1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4})), 4, 4).value();
  // Corner-aligned sampling: source coordinates 0, 1/3, 2/3, 1 on each axis.
  const double want[4][4] = {{1, 4.0 / 3, 5.0 / 3, 2},
                             {5.0 / 3, 2, 7.0 / 3, 8.0 / 3},
                             {7.0 / 3, 8.0 / 3, 3, 10.0 / 3},
                             {3, 10.0 / 3, 11.0 / 3, 4}};
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(y.at(0, 0, r, c), want[r][c], 1e-12) << r << "," << c;
}

TEST(BilinearUpsample, RejectsBadTargets) {
  Graph<float> g;
  auto x = g.constant(Tensor<float>({1, 1, 2, 2}));
  EXPECT_THROW(bilinear_upsample(x, 0, 4), Error);
  EXPECT_THROW(bilinear_upsample(x, 5, 4), Error);
}

TEST(CrossEntropy, UniformIsLnClasses) {
  Graph<float> g;
  Labels t({1, 2, 2});
  t[1] = 3;
  auto l = pixelwise_cross_entropy(g.constant(Tensor<float>({1, 4, 2, 2}, 0.0f)), t).value();
  EXPECT_NEAR(l[0], std::log(4.0), 1e-6);
}

TEST(CrossEntropy, SaturatedCorrectPrediction) {
  Graph<double> g;
  Labels t({1, 1, 1});
  auto l = pixelwise_cross_entropy(g.constant(Tensor<double>({1, 2, 1, 1}, std::vector<double>{10, -10})), t).value();
  EXPECT_NEAR(l[0], 2.06e-9, 0.01e-9);
  EXPECT_GT(l[0], 0.0);
}

TEST(CrossEntropy, MatchesScalarOracle) {
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor<float> x = random_tensor<float>({1, 3, 2, 2}, rng, -4, 4);
    Labels t({1, 2, 2});
    for (auto& v : t.values()) v = static_cast<std::uint16_t>(rng.below(3));
    double want = 0;
    for (std::size_t p = 0; p < 4; ++p) {
      double z = 0;
      for (std::size_t c = 0; c < 3; ++c) z += std::exp(static_cast<double>(x[c * 4 + p]));
      want += -(static_cast<double>(x[t[p] * 4 + p]) - std::log(z));
    }
    want /= 4;
    Graph<float> g;
    EXPECT_NEAR(pixelwise_cross_entropy(g.constant(x), t).value()[0], want, 1e-6);
  }
}

TEST(CrossEntropy, OutOfRangeLabelReportsPixel) {
  Graph<float> g;
  Labels t({1, 2, 2});
  t[3] = 4;
  try {
    pixelwise_cross_entropy(g.constant(Tensor<float>({1, 4, 2, 2})), t);
    FAIL() << "expected invalid-label";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::invalid_label);
    EXPECT_NE(std::string(e.what()).find("y=1, x=1"), std::string::npos) << e.what();
  }
}

TEST(NonFinite, RejectedAtBoundary) {
  Graph<float> g;
  Tensor<float> x({1, 1, 1, 1}, std::nanf(""));
  Tensor<float> k({1, 1, 1, 1}, 1.0f), b({1}, 0.0f);
  EXPECT_THROW(conv2d(g.constant(x), g.constant(k), g.constant(b), 1, 0), Error);
}

TEST(Argmax, PicksLargestChannel) {
  Tensor<float> x({1, 3, 1, 2}, std::vector<float>{0, 5, 2, 1, 1, 9});
  Labels y = argmax_channels(x);
  EXPECT_EQ(y[0], 1);
  EXPECT_EQ(y[1], 2);
}

TEST(Determinism, RepeatedConvIsBitIdentical) {
  Rng rng(1);
  auto x = random_tensor<float>({2, 3, 9, 9}, rng);
  auto k = random_tensor<float>({5, 3, 3, 3}, rng);
  auto b = random_tensor<float>({5}, rng);
  EXPECT_EQ(run_conv(x, k, b, 2, 1), run_conv(x, k, b, 2, 1));
}
