#include <gtest/gtest.h>

#include <cmath>

#include "heimdal/ops.hpp"
#include "test_support.hpp"

using namespace heimdal;
using heimdal::testing::dot;
using heimdal::testing::max_abs;
using heimdal::testing::max_relative_error;
using heimdal::testing::numeric_gradient;
using heimdal::testing::random_away_from_zero;
using heimdal::testing::random_tensor;

namespace {

constexpr int kSeeds = 50;
constexpr double kFloatTolerance = 1e-3;

ConvSpec time_conv(int k, int d) {
  ConvSpec s;
  s.kernel_t = k;
  s.dilation_t = d;
  return s;
}

}  // namespace

TEST(Conv2d, OutputExtentsMatchArchitectureTable) {
  EXPECT_EQ(conv_out_extent(131, 5, 0, 1, 1), 127);
  EXPECT_EQ(conv_out_extent(16, 5, 2, 1, 2), 8);
  EXPECT_EQ(conv_out_extent(123, 3, 0, 2, 1), 119);

  ConvSpec s;
  s.kernel_f = 5;
  s.kernel_t = 5;
  s.pad_f = 2;
  s.stride_f = 2;
  const Tensor<float> y = conv2d_forward(Tensor<float>({1, 1, 16, 131}), Tensor<float>({12, 1, 5, 5}), nullptr, s);
  EXPECT_EQ(y.dims(), (Shape{1, 12, 8, 127}));
}

TEST(Conv2d, NonPositiveExtentNamesAxis) {
  try {
    conv2d_forward(Tensor<float>({1, 1, 4, 2}), Tensor<float>({1, 1, 1, 3}), nullptr, time_conv(3, 1));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("time axis"), std::string::npos) << e.what();
  }
  ConvSpec s;
  s.kernel_f = 5;
  EXPECT_THROW(conv2d_forward(Tensor<float>({1, 1, 4, 4}), Tensor<float>({1, 1, 5, 1}), nullptr, s), ShapeError);
}

TEST(Conv2d, ZeroGradOutGivesZeroGradients) {
  Rng rng(1);
  const auto x = random_tensor({2, 4, 5, 9}, rng);
  const auto w = random_tensor({3, 4, 3, 3}, rng);
  ConvSpec s;
  s.kernel_f = s.kernel_t = 3;
  s.pad_f = 1;
  const auto y = conv2d_forward(x, w, nullptr, s);
  const auto g = conv2d_backward(Tensor<float>(y.dims()), x, w, s);
  for (const auto* t : {&g.input, &g.weight, &g.bias})
    for (float v : t->values()) EXPECT_EQ(v, 0.0f);
}

TEST(Conv2d, IdentityLikeKernelScattersGradOut) {
  // 1x1x3 input, kernel (1,3) = [0,1,0] picks the middle tap: the single output
  // equals x[1], so grad_input is grad_out placed at index 1.
  Tensor<float> x({1, 1, 1, 3}, std::vector<float>{0.5f, -1.0f, 2.0f});
  Tensor<float> w({1, 1, 1, 3}, std::vector<float>{0.0f, 1.0f, 0.0f});
  const auto s = time_conv(3, 1);
  const auto y = conv2d_forward(x, w, nullptr, s);
  ASSERT_EQ(y.dims(), (Shape{1, 1, 1, 1}));
  EXPECT_FLOAT_EQ(y[0], -1.0f);
  Tensor<float> gy({1, 1, 1, 1}, std::vector<float>{0.7f});
  const auto g = conv2d_backward(gy, x, w, s);
  EXPECT_FLOAT_EQ(g.input[0], 0.0f);
  EXPECT_FLOAT_EQ(g.input[1], 0.7f);
  EXPECT_FLOAT_EQ(g.input[2], 0.0f);

  const auto numeric = numeric_gradient(
      [&](const Tensor<double>& xd) { return 0.7 * conv2d_forward(xd, w.cast<double>(), nullptr, s)[0]; },
      x.cast<double>());
  EXPECT_LT(max_relative_error(g.input, numeric), 1e-3);
}

TEST(Conv2d, FiniteDifferenceRandomCases) {
  double worst = 0;
  for (int seed = 0; seed < kSeeds; ++seed) {
    Rng rng(100 + seed);
    ConvSpec s;
    s.kernel_f = uniform_int(rng, 1, 3);
    s.kernel_t = uniform_int(rng, 1, 3);
    s.pad_f = uniform_int(rng, 0, 1);
    s.stride_f = uniform_int(rng, 1, 2);
    s.dilation_t = uniform_int(rng, 1, 2);
    s.groups = seed % 3 == 0 ? 2 : 1;
    const int cin = 2 * uniform_int(rng, 1, 2), cout = 2 * uniform_int(rng, 1, 2);
    const auto x = random_tensor({2, cin, 4, 9}, rng);
    const auto w = random_tensor({cout, cin / s.groups, s.kernel_f, s.kernel_t}, rng);
    const auto b = random_tensor({cout}, rng);
    const auto y = conv2d_forward(x, w, &b, s);
    const auto r = random_tensor(y.dims(), rng);
    const auto g = conv2d_backward(r, x, w, s);
    const auto rd = r.cast<double>();
    const auto xd = x.cast<double>(), wd = w.cast<double>(), bd = b.cast<double>();
    worst = std::max(worst, max_relative_error(g.input, numeric_gradient([&](const Tensor<double>& v) {
                                                 return dot(conv2d_forward(v, wd, &bd, s), rd);
                                               }, xd)));
    worst = std::max(worst, max_relative_error(g.weight, numeric_gradient([&](const Tensor<double>& v) {
                                                  return dot(conv2d_forward(xd, v, &bd, s), rd);
                                                }, wd)));
    worst = std::max(worst, max_relative_error(g.bias, numeric_gradient([&](const Tensor<double>& v) {
                                                return dot(conv2d_forward(xd, wd, &v, s), rd);
                                              }, bd)));
  }
  RecordProperty("max_rel_err", std::to_string(worst));
  EXPECT_LT(worst, kFloatTolerance);
}

TEST(Conv2d, DepthwiseEqualsPerChannelConvolutions) {
  for (int seed = 0; seed < 10; ++seed) {
    Rng rng(300 + seed);
    const int c = uniform_int(rng, 1, 4), f = uniform_int(rng, 3, 8), t = uniform_int(rng, 4, 8);
    ConvSpec s;
    s.kernel_f = uniform_int(rng, 1, 3);
    s.kernel_t = uniform_int(rng, 1, 3);
    s.pad_f = 1;
    s.dilation_t = uniform_int(rng, 1, 2);
    s.groups = c;
    const auto x = random_tensor({1, c, f, t}, rng);
    const auto w = random_tensor({c, 1, s.kernel_f, s.kernel_t}, rng);
    const auto y = conv2d_forward(x, w, nullptr, s);
    ConvSpec single = s;
    single.groups = 1;
    for (int ch = 0; ch < c; ++ch) {
      Tensor<float> xc({1, 1, f, t}), wc({1, 1, s.kernel_f, s.kernel_t});
      for (int i = 0; i < f; ++i)
        for (int j = 0; j < t; ++j) xc(0, 0, i, j) = x(0, ch, i, j);
      for (int i = 0; i < s.kernel_f; ++i)
        for (int j = 0; j < s.kernel_t; ++j) wc(0, 0, i, j) = w(ch, 0, i, j);
      const auto yc = conv2d_forward(xc, wc, nullptr, single);
      for (int i = 0; i < yc.dim(2); ++i)
        for (int j = 0; j < yc.dim(3); ++j) EXPECT_FLOAT_EQ(y(0, ch, i, j), yc(0, 0, i, j));
    }
  }
}

TEST(BatchNorm, ZeroVarianceChannelOutputsShift) {
  Tensor<float> x({2, 2, 3, 4});
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = static_cast<float>(i);
  for (int n = 0; n < 2; ++n)
    for (int f = 0; f < 3; ++f)
      for (int t = 0; t < 4; ++t) x(n, 0, f, t) = 3.0f;
  Tensor<float> scale({2}, 1.5f), shift({2}, std::vector<float>{0.25f, -1.0f});
  Tensor<float> rm({2}), rv({2}, 1.0f);
  const auto y = batchnorm_train(x, scale, shift, rm, rv);
  for (int n = 0; n < 2; ++n)
    for (int f = 0; f < 3; ++f)
      for (int t = 0; t < 4; ++t) EXPECT_FLOAT_EQ(y(n, 0, f, t), 0.25f);
  EXPECT_TRUE(y.all_finite());
}

TEST(BatchNorm, NormalizedInputPassesThrough) {
  Rng rng(7);
  auto x = random_tensor({4, 3, 4, 8}, rng);
  // normalize each channel directly
  for (int c = 0; c < 3; ++c) {
    double sum = 0, sq = 0;
    const double m = 4.0 * 4 * 8;
    for (int n = 0; n < 4; ++n)
      for (int f = 0; f < 4; ++f)
        for (int t = 0; t < 8; ++t) sum += x(n, c, f, t);
    for (int n = 0; n < 4; ++n)
      for (int f = 0; f < 4; ++f)
        for (int t = 0; t < 8; ++t) sq += std::pow(x(n, c, f, t) - sum / m, 2);
    const double sd = std::sqrt(sq / m);
    for (int n = 0; n < 4; ++n)
      for (int f = 0; f < 4; ++f)
        for (int t = 0; t < 8; ++t) x(n, c, f, t) = static_cast<float>((x(n, c, f, t) - sum / m) / sd);
  }
  Tensor<float> scale({3}, 1.0f), shift({3}), rm({3}), rv({3}, 1.0f);
  const auto y = batchnorm_train(x, scale, shift, rm, rv);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(y[i], x[i], 1e-4);
}

TEST(BatchNorm, InferIsStatelessAndUsesRunningStats) {
  Rng rng(8);
  const auto x = random_tensor({2, 2, 2, 5}, rng);
  Tensor<float> scale({2}, std::vector<float>{2.0f, 0.5f}), shift({2}, std::vector<float>{1.0f, 0.0f});
  Tensor<float> rm({2}, std::vector<float>{0.1f, -0.2f}), rv({2}, std::vector<float>{4.0f, 0.25f});
  const auto rm0 = rm, rv0 = rv;
  const auto a = batchnorm(x, scale, shift, rm, rv, Mode::Infer);
  const auto b = batchnorm(x, scale, shift, rm, rv, Mode::Infer);
  EXPECT_EQ(a, b);
  EXPECT_EQ(rm, rm0);
  EXPECT_EQ(rv, rv0);
  const double expect = (x(0, 0, 1, 3) - 0.1) / std::sqrt(4.0 + 1e-5) * 2.0 + 1.0;
  EXPECT_NEAR(a(0, 0, 1, 3), expect, 1e-6);
}

TEST(BatchNorm, TrainUpdatesRunningStatsWithMomentum) {
  Tensor<float> x({1, 1, 1, 4}, std::vector<float>{1, 2, 3, 4});
  Tensor<float> scale({1}, 1.0f), shift({1}), rm({1}), rv({1}, 1.0f);
  batchnorm_train(x, scale, shift, rm, rv);
  EXPECT_NEAR(rm[0], 0.1 * 2.5, 1e-6);
  // unbiased variance of {1,2,3,4} is 5/3
  EXPECT_NEAR(rv[0], 0.9 + 0.1 * (5.0 / 3.0), 1e-6);
}

TEST(BatchNorm, FiniteDifference) {
  double worst = 0;
  for (int seed = 0; seed < kSeeds; ++seed) {
    Rng rng(500 + seed);
    const Shape dims{uniform_int(rng, 1, 3), uniform_int(rng, 1, 3), uniform_int(rng, 1, 4), uniform_int(rng, 2, 6)};
    const auto x = random_tensor(dims, rng, -2, 2);
    const auto scale = random_tensor({dims[1]}, rng, 0.5, 1.5);
    const auto shift = random_tensor({dims[1]}, rng);
    Tensor<float> rm({dims[1]}), rv({dims[1]}, 1.0f);
    BatchNormCache<float> cache;
    const auto y = batchnorm_train(x, scale, shift, rm, rv, &cache);
    const auto r = random_tensor(y.dims(), rng);
    const auto g = batchnorm_backward(r, cache, scale);
    const auto rd = r.cast<double>();
    auto objective = [&](const Tensor<double>& xv, const Tensor<double>& sv, const Tensor<double>& hv) {
      Tensor<double> m({dims[1]}), v({dims[1]}, 1.0);
      return dot(batchnorm_train(xv, sv, hv, m, v), rd);
    };
    const auto xd = x.cast<double>(), sd = scale.cast<double>(), hd = shift.cast<double>();
    const auto nx = numeric_gradient([&](const auto& v) { return objective(v, sd, hd); }, xd);
    const auto ns = numeric_gradient([&](const auto& v) { return objective(xd, v, hd); }, sd);
    const auto nh = numeric_gradient([&](const auto& v) { return objective(xd, sd, v); }, hd);
    // With two elements per channel the input gradient is identically zero,
    // so all three are judged against their common scale.
    const double s = std::max({max_abs(nx), max_abs(ns), max_abs(nh)});
    worst = std::max({worst, max_relative_error(g.input, nx, s), max_relative_error(g.scale, ns, s),
                      max_relative_error(g.shift, nh, s)});
  }
  RecordProperty("max_rel_err", std::to_string(worst));
  EXPECT_LT(worst, kFloatTolerance);
}

namespace {
// Direct per-band statistics: normalize bins [g*F/G, (g+1)*F/G) of each
// channel using only those bins.
Tensor<double> brute_force_subspectral(const Tensor<float>& x, int groups) {
  const int nb = x.dim(0), c = x.dim(1), f = x.dim(2), t = x.dim(3), band = f / groups;
  Tensor<double> y(x.dims());
  for (int ch = 0; ch < c; ++ch)
    for (int g = 0; g < groups; ++g) {
      double sum = 0, sq = 0, m = 0;
      for (int n = 0; n < nb; ++n)
        for (int fi = g * band; fi < (g + 1) * band; ++fi)
          for (int ti = 0; ti < t; ++ti) sum += x(n, ch, fi, ti), m += 1;
      const double mean = sum / m;
      for (int n = 0; n < nb; ++n)
        for (int fi = g * band; fi < (g + 1) * band; ++fi)
          for (int ti = 0; ti < t; ++ti) sq += std::pow(x(n, ch, fi, ti) - mean, 2);
      const double inv = 1.0 / std::sqrt(sq / m + 1e-5);
      for (int n = 0; n < nb; ++n)
        for (int fi = g * band; fi < (g + 1) * band; ++fi)
          for (int ti = 0; ti < t; ++ti) y(n, ch, fi, ti) = (x(n, ch, fi, ti) - mean) * inv;
    }
  return y;
}
}  // namespace

TEST(SubSpectralNorm, SingleGroupIsBatchNorm) {
  Rng rng(9);
  const auto x = random_tensor({2, 3, 8, 5}, rng);
  const auto scale = random_tensor({3}, rng, 0.5, 2), shift = random_tensor({3}, rng);
  Tensor<float> rm1({3}), rv1({3}, 1.0f), rm2({3}), rv2({3}, 1.0f);
  EXPECT_EQ(subspectral_norm(x, scale, shift, rm1, rv1, 1, Mode::Train), batchnorm_train(x, scale, shift, rm2, rv2));
}

TEST(SubSpectralNorm, MatchesBruteForceBandStatistics) {
  for (int groups : {2, 8}) {
    Rng rng(10 + groups);
    const auto x = random_tensor({3, 2, 8, 6}, rng, -3, 3);
    Tensor<float> scale({2 * groups}, 1.0f), shift({2 * groups}), rm({2 * groups}), rv({2 * groups}, 1.0f);
    const auto y = subspectral_norm(x, scale, shift, rm, rv, groups, Mode::Train);
    const auto oracle = brute_force_subspectral(x, groups);
    for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y[i], oracle[i], 1e-5) << "groups=" << groups;
  }
}

TEST(SubSpectralNorm, IndivisibleFrequencyIsShapeError) {
  Tensor<float> x({1, 1, 6, 2}), p({4}, 1.0f), rm({4}), rv({4}, 1.0f);
  EXPECT_THROW(subspectral_norm(x, p, p, rm, rv, 4, Mode::Train), ShapeError);
}

TEST(SubSpectralNorm, FiniteDifference) {
  double worst = 0;
  for (int seed = 0; seed < kSeeds; ++seed) {
    Rng rng(700 + seed);
    const int groups = 2;
    const Shape dims{2, 2, 4, 3};
    const auto x = random_tensor(dims, rng, -2, 2);
    const auto scale = random_tensor({4}, rng, 0.5, 1.5), shift = random_tensor({4}, rng);
    Tensor<float> rm({4}), rv({4}, 1.0f);
    BatchNormCache<float> cache;
    const auto y = subspectral_norm(x, scale, shift, rm, rv, groups, Mode::Train, &cache);
    const auto r = random_tensor(y.dims(), rng);
    const auto g = subspectral_norm_backward(r, cache, scale);
    const auto rd = r.cast<double>();
    const auto numeric = numeric_gradient([&](const Tensor<double>& v) {
      Tensor<double> m({4}), var({4}, 1.0);
      return dot(subspectral_norm(v, scale.cast<double>(), shift.cast<double>(), m, var, groups, Mode::Train), rd);
    }, x.cast<double>());
    worst = std::max(worst, max_relative_error(g.input, numeric));
  }
  EXPECT_LT(worst, kFloatTolerance);
}

TEST(Pointwise, SwishAndRelu) {
  Tensor<float> z({1, 1, 1, 3}, std::vector<float>{0.0f, 2.0f, -2.0f});
  const auto s = swish(z);
  EXPECT_EQ(s[0], 0.0f);
  EXPECT_NEAR(s[1], 2.0 / (1 + std::exp(-2.0)), 1e-6);
  EXPECT_NEAR(s[2], -2.0 / (1 + std::exp(2.0)), 1e-6);
  const auto r = relu(z);
  EXPECT_EQ(r[1], 2.0f);
  EXPECT_EQ(r[2], 0.0f);
}

TEST(Pointwise, TimeTrimKeepsMiddleFrames) {
  Tensor<float> x({1, 1, 1, 10});
  for (int i = 0; i < 10; ++i) x[i] = static_cast<float>(i);
  const auto y = time_trim(x, 2, 2);
  ASSERT_EQ(y.dim(3), 6);
  for (int i = 0; i < 6; ++i) EXPECT_EQ(y[i], static_cast<float>(i + 2));
  EXPECT_THROW(time_trim(x, 5, 5), ShapeError);
}

TEST(Pointwise, BroadcastAddMatchesLoop) {
  Rng rng(11);
  const auto x = random_tensor({2, 3, 4, 5}, rng);
  const auto y = freq_broadcast_add(freq_avgpool(x), x);
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 3; ++c)
      for (int t = 0; t < 5; ++t) {
        double mean = 0;
        for (int f = 0; f < 4; ++f) mean += x(n, c, f, t);
        mean /= 4;
        for (int f = 0; f < 4; ++f) EXPECT_NEAR(y(n, c, f, t), x(n, c, f, t) + mean, 1e-6);
      }
}

TEST(Pointwise, ChannelDropout) {
  Rng rng(12);
  const auto x = random_away_from_zero({4, 16, 2, 3}, rng);
  EXPECT_EQ(channel_dropout(x, 0.5, Mode::Infer, nullptr), x);
  Rng a(5), b(5);
  std::vector<float> mask;
  const auto y = channel_dropout(x, 0.5, Mode::Train, &a, &mask);
  EXPECT_EQ(y, channel_dropout(x, 0.5, Mode::Train, &b));
  int dropped = 0;
  for (int n = 0; n < 4; ++n)
    for (int c = 0; c < 16; ++c) {
      const float m = mask[static_cast<std::size_t>(n) * 16 + c];
      dropped += m == 0.0f;
      EXPECT_TRUE(m == 0.0f || m == 2.0f);
      for (int f = 0; f < 2; ++f)
        for (int t = 0; t < 3; ++t) EXPECT_FLOAT_EQ(y(n, c, f, t), x(n, c, f, t) * m);
    }
  EXPECT_GT(dropped, 0);
  EXPECT_LT(dropped, 64);
}

TEST(Pointwise, FiniteDifference) {
  double worst = 0;
  for (int seed = 0; seed < kSeeds; ++seed) {
    Rng rng(900 + seed);
    const Shape dims{2, 2, 3, 6};
    const auto x = random_away_from_zero(dims, rng);
    const auto xd = x.cast<double>();

    {
      const auto r = random_tensor(dims, rng);
      worst = std::max(worst, max_relative_error(swish_backward(r, x), numeric_gradient([&](const auto& v) {
                                                   return dot(swish(v), r.cast<double>());
                                                 }, xd)));
      worst = std::max(worst, max_relative_error(relu_backward(r, x), numeric_gradient([&](const auto& v) {
                                                   return dot(relu(v), r.cast<double>());
                                                 }, xd)));
    }
    {
      const auto r = random_tensor({2, 2, 1, 6}, rng);
      worst = std::max(worst, max_relative_error(freq_avgpool_backward(r, 3), numeric_gradient([&](const auto& v) {
                                                   return dot(freq_avgpool(v), r.cast<double>());
                                                 }, xd)));
      const auto pooled = random_tensor({2, 2, 1, 6}, rng);
      const auto r2 = random_tensor(dims, rng);
      worst = std::max(worst, max_relative_error(freq_broadcast_backward(r2), numeric_gradient([&](const auto& v) {
                                                   return dot(freq_broadcast_add(v, xd), r2.cast<double>());
                                                 }, pooled.cast<double>())));
    }
    {
      const auto r = random_tensor({2, 2, 3, 3}, rng);
      worst = std::max(worst, max_relative_error(time_trim_backward(r, 1, 2), numeric_gradient([&](const auto& v) {
                                                   return dot(time_trim(v, 1, 2), r.cast<double>());
                                                 }, xd)));
    }
    {
      const auto r = random_tensor(dims, rng);
      std::vector<float> mask;
      Rng drop(seed);
      channel_dropout(x, 0.3, Mode::Train, &drop, &mask);
      worst = std::max(worst, max_relative_error(channel_dropout_backward(r, mask), numeric_gradient([&](const auto& v) {
                                                   Rng again(seed);
                                                   return dot(channel_dropout(v, 0.3, Mode::Train, &again), r.cast<double>());
                                                 }, xd)));
    }
  }
  RecordProperty("max_rel_err", std::to_string(worst));
  EXPECT_LT(worst, kFloatTolerance);
}
