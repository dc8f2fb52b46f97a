#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "sslauth/metrics.hpp"
#include "ssim_oracle.hpp"
#include "test_util.hpp"

using namespace sslauth;

namespace {

SsimConfig global_cfg() {
  SsimConfig c;
  c.window = SsimWindow::global;
  return c;
}

double oracle_ssim(const Tensor& x, const Tensor& y, const SsimConfig& cfg) {
  oracle::Params p;
  p.gaussian = cfg.window == SsimWindow::gaussian;
  p.luminance = cfg.channel_mode == ChannelMode::luminance_only;
  return oracle::ssim(x.data(), y.data(), x.dim(0), x.dim(1), p);
}

// Deterministic integer-hash pair shared with the scikit-image reference computation.
std::pair<Tensor, Tensor> hashed_pair() {
  Tensor x({32, 32, 3}), y({32, 32, 3});
  for (std::uint64_t i = 0; i < x.size(); ++i) {
    const double a = static_cast<double>((i * 2654435761ULL + 11ULL) % 4294967296ULL) / 4294967295.0;
    const double b = static_cast<double>((i * i * 7ULL + 3ULL * i + 11ULL) % 1009ULL) / 1008.0;
    x[i] = static_cast<float>(a);
    y[i] = static_cast<float>(0.6 * a + 0.4 * b);
  }
  return {x, y};
}

}  // namespace

TEST(Cosine, IdenticalAndOrthogonal) {
  EXPECT_DOUBLE_EQ(cosine_similarity({1.0, 0.0}, {1.0, 0.0}), 1.0);
  EXPECT_DOUBLE_EQ(cosine_similarity({1.0, 0.0}, {0.0, 1.0}), 0.0);
}

TEST(Cosine, MatchesHandRolledDotNorm) {
  // 32 / sqrt(14 * 77)
  EXPECT_NEAR(cosine_similarity({1.0, 2.0, 3.0}, {4.0, 5.0, 6.0}), 0.9746318461970762, 1e-15);
}

TEST(Cosine, ScaleInvarianceAndSign) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n;
  for (int t = 0; t < 50; ++t) {
    std::vector<double> a(17);
    for (auto& v : a) v = n(rng);
    const double lambda = std::exp(n(rng));
    std::vector<double> pos(a), neg(a);
    for (std::size_t i = 0; i < a.size(); ++i) pos[i] *= lambda, neg[i] *= -lambda;
    EXPECT_NEAR(cosine_similarity(a, pos), 1.0, 1e-12);
    EXPECT_NEAR(cosine_similarity(a, neg), -1.0, 1e-12);
  }
}

TEST(Cosine, ZeroNormAndLengthErrors) {
  try {
    cosine_similarity({0.0, 0.0}, {1.0, 0.0});
    FAIL() << "expected zero-norm error";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::invalid_argument);
  }
  EXPECT_THROW(cosine_similarity({1.0}, {1.0, 2.0}), Error);
  EXPECT_THROW(cosine_similarity(std::vector<double>{}, std::vector<double>{}), Error);
}

TEST(Cosine, RandomHighDimensionalVectorsAreNearlyOrthogonal) {
  // For d = 512 the Monte-Carlo reference gives E|cos| ~ sqrt(2 / (pi d)) = 0.03526
  // and the 99th percentile ~ 2.576 / sqrt(d) = 0.1138.
  std::mt19937_64 rng(2024);
  std::normal_distribution<double> n;
  std::vector<double> abs_cos;
  for (int t = 0; t < 1000; ++t) {
    std::vector<double> a(512), b(512);
    for (auto& v : a) v = n(rng);
    for (auto& v : b) v = n(rng);
    abs_cos.push_back(std::abs(cosine_similarity(a, b)));
  }
  double mean = 0;
  for (double v : abs_cos) mean += v;
  mean /= abs_cos.size();
  std::sort(abs_cos.begin(), abs_cos.end());
  const double p99 = abs_cos[989];
  EXPECT_LT(mean, 0.1);
  EXPECT_LT(p99, 0.2);
  EXPECT_NEAR(mean, 0.03526, 0.004);
  EXPECT_NEAR(p99, 0.1138, 0.02);
}

TEST(Ssim, IdenticalImagesGiveOne) {
  const auto x = testutil::random_image(32, 32, 1);
  EXPECT_NEAR(ssim(x, x), 1.0, 1e-9);
  EXPECT_NEAR(ssim(x, x, global_cfg()), 1.0, 1e-9);
  Tensor flat({32, 32, 3}, 0.25f);
  EXPECT_NEAR(ssim(flat, flat), 1.0, 1e-9);
}

TEST(Ssim, ZerosVersusOnesGlobal) {
  Tensor zeros({8, 8, 3}, 0.0f), ones({8, 8, 3}, 1.0f);
  const double v = ssim(zeros, ones, global_cfg());
  EXPECT_NEAR(v, oracle_ssim(zeros, ones, global_cfg()), 1e-12);
  EXPECT_NEAR(v, 9.999000099990002e-05, 1e-15);  // c1 / (1 + c1)
}

TEST(Ssim, MatchesOracleOnRandomPairs) {
  for (int t = 0; t < 20; ++t) {
    const auto x = testutil::random_image(8, 8, 100 + t);
    const auto y = testutil::random_image(8, 8, 200 + t);
    EXPECT_NEAR(ssim(x, y, global_cfg()), oracle_ssim(x, y, global_cfg()), 1e-6);
    const auto a = testutil::random_image(32, 32, 300 + t);
    const auto b = testutil::random_image(32, 32, 400 + t);
    EXPECT_NEAR(ssim(a, b), oracle_ssim(a, b, SsimConfig{}), 1e-6);
  }
}

TEST(Ssim, MatchesScikitImageReference) {
  // structural_similarity(gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
  // data_range=1.0, channel_axis=2) on the same float32-rounded images.
  const auto [x, y] = hashed_pair();
  EXPECT_NEAR(ssim(x, y), 0.7927477271885527, 1e-6);

  Tensor xs({32, 32, 3}), ys({32, 32, 3});
  for (int r = 0; r < 32; ++r)
    for (int c = 0; c < 32; ++c) {
      const double base[3] = {(r + c) / 62.0, r / 31.0, c / 31.0};
      const double wave = 0.1 * std::sin(r / 3.0 + c / 5.0);
      for (int k = 0; k < 3; ++k) {
        xs[(r * 32 + c) * 3 + k] = static_cast<float>(base[k]);
        ys[(r * 32 + c) * 3 + k] = static_cast<float>(std::clamp(base[k] * 0.8 + wave + 0.05, 0.0, 1.0));
      }
    }
  EXPECT_NEAR(ssim(xs, ys), 0.6426024363439433, 1e-6);
}

TEST(Ssim, SymmetricAndBounded) {
  for (int t = 0; t < 100; ++t) {
    const auto x = testutil::random_image(16, 16, 500 + t);
    auto y = testutil::random_image(16, 16, 700 + t);
    if (t % 2) for (std::size_t i = 0; i < y.size(); ++i) y[i] = 1.0f - x[i];  // anti-correlated
    const double a = ssim(x, y), b = ssim(y, x);
    EXPECT_NEAR(a, b, 1e-9);
    EXPECT_GE(a, -1.0);
    EXPECT_LE(a, 1.0);
  }
}

TEST(Ssim, LuminanceOnlyMatchesOracle) {
  SsimConfig cfg;
  cfg.channel_mode = ChannelMode::luminance_only;
  const auto x = testutil::random_image(20, 20, 9);
  const auto y = testutil::random_image(20, 20, 10);
  EXPECT_NEAR(ssim(x, y, cfg), oracle_ssim(x, y, cfg), 1e-6);
}

TEST(Ssim, Errors) {
  const auto x = testutil::random_image(16, 16, 1);
  const auto small = testutil::random_image(8, 8, 1);
  EXPECT_THROW(ssim(x, small), Error);
  auto bad = x;
  bad[5] = 1.5f;
  try {
    ssim(x, bad);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::out_of_range);
  }
  bad[5] = -0.01f;
  EXPECT_THROW(ssim(bad, x), Error);
  // Gaussian window does not fit an 8x8 image.
  EXPECT_THROW(ssim(small, small), Error);
  SsimConfig neg;
  neg.k1 = 0;
  EXPECT_THROW(ssim(x, x, neg), Error);
}

TEST(SsimComponents, IdenticalImages) {
  const auto x = testutil::random_image(12, 12, 4);
  const auto c = ssim_components(x, x);
  EXPECT_NEAR(c.luminance, 1.0, 1e-9);
  EXPECT_NEAR(c.contrast, 1.0, 1e-9);
  EXPECT_NEAR(c.structure, 1.0, 1e-9);
}

TEST(SsimComponents, BrightnessShiftOnlyAffectsLuminance) {
  const auto x = testutil::random_image(8, 8, 5);
  Tensor y = x;
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = 0.5f * x[i];
  Tensor shifted = y;
  for (auto& v : shifted.vec()) v += 0.3f;
  const auto c = ssim_components(y, shifted, global_cfg());
  EXPECT_NEAR(c.contrast, 1.0, 1e-6);
  EXPECT_NEAR(c.structure, 1.0, 1e-6);
  EXPECT_LT(c.luminance, 1.0);
}

TEST(SsimComponents, ProductIdentity) {
  SsimConfig single = global_cfg();
  single.channel_mode = ChannelMode::luminance_only;
  for (int t = 0; t < 50; ++t) {
    const auto x = testutil::random_image(8, 8, 900 + t);
    const auto y = testutil::random_image(8, 8, 950 + t);
    const auto c = ssim_components(x, y, single);
    EXPECT_NEAR(c.luminance * c.contrast * c.structure, ssim(x, y, single), 1e-9);
  }
  // Windowed: the identity holds at every window position of every plane.
  const auto x = testutil::random_image(16, 16, 1);
  const auto y = testutil::random_image(16, 16, 2);
  const auto maps = ssim_component_maps(x, y);
  double mean = 0;
  std::size_t n = 0;
  for (std::size_t p = 0; p < maps.ssim.size(); ++p) {
    double plane = 0;
    for (std::size_t i = 0; i < maps.ssim[p].size(); ++i) {
      EXPECT_NEAR(maps.luminance[p][i] * maps.contrast[p][i] * maps.structure[p][i], maps.ssim[p][i], 1e-12);
      plane += maps.ssim[p][i];
    }
    mean += plane / maps.ssim[p].size();
    ++n;
  }
  EXPECT_NEAR(mean / n, ssim(x, y), 1e-9);
}

TEST(SsimBatch, MeanOfPerSample) {
  const auto x = testutil::random_images(4, 16, 16, 1);
  const auto y = testutil::random_images(4, 16, 16, 2);
  EXPECT_NEAR(ssim_batch_mean(x, x), 1.0, 1e-9);
  double loop = 0;
  for (int i = 0; i < 4; ++i) {
    auto a = x.slice(i, i + 1), b = y.slice(i, i + 1);
    a.reshape({16, 16, 3});
    b.reshape({16, 16, 3});
    loop += ssim(a, b);
  }
  EXPECT_NEAR(ssim_batch_mean(x, y), loop / 4, 1e-9);

  const auto two_x = x.slice(0, 2), two_y = y.slice(0, 2);
  const auto per = ssim_per_sample(two_x, two_y);
  EXPECT_NEAR(ssim_batch_mean(two_x, two_y), (per[0] + per[1]) / 2, 1e-15);
}

TEST(SsimBatch, EmptyAndMismatched) {
  Tensor empty({0, 16, 16, 3});
  EXPECT_THROW(ssim_batch_mean(empty, empty), Error);
  EXPECT_THROW(ssim_batch_mean(testutil::random_images(2, 16, 16, 1), testutil::random_images(3, 16, 16, 1)), Error);
}

TEST(SsimBatch, GradientMatchesFiniteDifferences) {
  for (SsimWindow window : {SsimWindow::gaussian, SsimWindow::global}) {
    for (ChannelMode mode : {ChannelMode::per_channel_mean, ChannelMode::luminance_only}) {
      SsimConfig cfg;
      cfg.window = window;
      cfg.channel_mode = mode;
      const auto t = testutil::random_images(2, 13, 12, 31);
      auto p = testutil::random_images(2, 13, 12, 32);
      for (auto& v : p.vec()) v = 0.1f + 0.8f * v;
      Tensor grad;
      ssim_batch_mean_grad(t, p, grad, cfg);
      std::mt19937 rng(5);
      std::uniform_int_distribution<std::size_t> pick(0, p.size() - 1);
      for (int k = 0; k < 25; ++k) {
        const std::size_t i = pick(rng);
        const float h = 1e-3f;
        Tensor up = p, dn = p;
        up[i] += h;
        dn[i] -= h;
        const double fd = (ssim_batch_mean(t, up, cfg) - ssim_batch_mean(t, dn, cfg)) /
                          (static_cast<double>(up[i]) - static_cast<double>(dn[i]));
        EXPECT_NEAR(grad[i], fd, 1e-4 + 1e-3 * std::abs(fd)) << "pixel " << i;
      }
    }
  }
}

TEST(AuthRate, TrivialCases) {
  AuthDecisionConfig cfg;
  cfg.epsilon = 0.05;
  const std::vector<double> same = {0.9, 0.9, 0.9};
  EXPECT_DOUBLE_EQ(auth_success_rate(same, 0.9, cfg).rate, 1.0);
  cfg.epsilon = 0.3;
  const std::vector<double> zeros = {0.0, 0.0};
  EXPECT_DOUBLE_EQ(auth_success_rate(zeros, 0.9, cfg).rate, 0.0);
}

TEST(AuthRate, AbsoluteVersusRelative) {
  const std::vector<double> s = {0.85, 0.95};
  AuthDecisionConfig rel{0.1, DecisionMode::relative_to_alpha0};
  AuthDecisionConfig abs{0.1, DecisionMode::absolute};
  // relative to 0.9: drops are 0.0556 and -0.0556; absolute: 0.15 and 0.05.
  EXPECT_DOUBLE_EQ(auth_success_rate(s, 0.9, rel).rate, 1.0);
  const auto a = auth_success_rate(s, 0.9, abs);
  EXPECT_DOUBLE_EQ(a.rate, 0.5);
  EXPECT_FALSE(a.pass[0]);
  EXPECT_TRUE(a.pass[1]);
}

TEST(AuthRate, MatchesNaiveLoopAndIsMonotone) {
  std::mt19937_64 rng(77);
  std::uniform_real_distribution<double> u(-0.2, 1.0), a0(0.05, 1.0), eps(0.0, 1.0);
  for (int t = 0; t < 1000; ++t) {
    std::vector<double> s(1 + t % 40);
    for (auto& v : s) v = u(rng);
    const double alpha0 = a0(rng);
    const double e = eps(rng);
    const DecisionMode mode = t % 3 == 0 ? DecisionMode::absolute : DecisionMode::relative_to_alpha0;
    int cnt = 0;
    for (double v : s) {
      const double drop = mode == DecisionMode::absolute ? 1 - v : 1 - v / alpha0;
      if (drop < e) ++cnt;
    }
    const auto r = auth_success_rate(s, alpha0, {e, mode});
    EXPECT_EQ(r.passed, cnt);
    EXPECT_EQ(r.rate, static_cast<double>(cnt) / s.size());
    const double e2 = std::min(1.0, e + eps(rng) * (1 - e));
    EXPECT_GE(auth_success_rate(s, alpha0, {e2, mode}).rate, r.rate);
  }
}

TEST(AuthRate, Errors) {
  const std::vector<double> s = {0.5};
  EXPECT_THROW(auth_success_rate(s, 0.0, {}), Error);
  EXPECT_THROW(auth_success_rate(s, -1.0, {}), Error);
  EXPECT_THROW(auth_success_rate(s, 0.9, {1.5, DecisionMode::absolute}), Error);
  EXPECT_THROW(auth_success_rate(std::vector<double>{}, 0.9, {}), Error);
}

TEST(Confidence, Arithmetic) {
  const std::vector<double> s = {0.4, 0.5};
  EXPECT_NEAR(confidence(s, 0.9), 0.5, 1e-15);
  const std::vector<double> same = {0.8, 0.8};
  EXPECT_DOUBLE_EQ(confidence(same, 0.8), 1.0);
  EXPECT_THROW(confidence(s, 0.0), Error);
}

TEST(Cosine, PercentClamps) {
  EXPECT_DOUBLE_EQ(cosine_percent(0.5799), 57.99);
  EXPECT_DOUBLE_EQ(cosine_percent(-0.2), 0.0);
  EXPECT_DOUBLE_EQ(cosine_percent(1.0), 100.0);
}
