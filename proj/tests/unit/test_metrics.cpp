#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>

#include "gradleak/metrics.hpp"
#include "gradleak/rng.hpp"

namespace gradleak {
namespace {

Tensor random_image(Shape s, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t(std::move(s));
  for (auto& v : t.data) v = static_cast<float>(uniform01(rng));
  return t;
}

TEST(Cosine, ParallelOppositeOrthogonal) {
  const std::vector<float> u{1, 2, 3}, v{2, 4, 6}, w{-1, -2, -3}, o{3, 0, -1};
  EXPECT_NEAR(cosine_similarity(u, v), 1.0, 1e-12);
  EXPECT_NEAR(cosine_similarity(u, w), -1.0, 1e-12);
  EXPECT_NEAR(cosine_similarity(u, o), 0.0, 1e-12);
}

TEST(Cosine, MatchesDoubleFormula) {
  const Tensor a = random_image({50}, 1), b = random_image({50}, 2);
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < 50; ++i) {
    ab += double(a.data[i]) * b.data[i];
    aa += double(a.data[i]) * a.data[i];
    bb += double(b.data[i]) * b.data[i];
  }
  EXPECT_NEAR(cosine_similarity(a.data, b.data), ab / std::sqrt(aa * bb), 1e-12);
}

TEST(Cosine, RejectsZeroAndMismatch) {
  const std::vector<float> z(3, 0.0f), u{1, 2, 3}, short_v{1, 2};
  EXPECT_THROW(cosine_similarity(z, u), std::invalid_argument);
  EXPECT_THROW(cosine_similarity(u, short_v), std::invalid_argument);
}

TEST(Psnr, IdenticalIsInfinite) {
  const Tensor a = random_image({3, 8, 8}, 3);
  EXPECT_EQ(psnr(a, a), std::numeric_limits<double>::infinity());
}

TEST(Psnr, BlackVersusWhiteIsZero) {
  EXPECT_NEAR(psnr(Tensor({1, 4, 4}, 0.0f), Tensor({1, 4, 4}, 1.0f)), 0.0, 1e-12);
}

TEST(Psnr, MatchesDirectMse) {
  const Tensor a = random_image({3, 8, 8}, 4), b = random_image({3, 8, 8}, 5);
  double mse = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double d = double(a.data[i]) - b.data[i];
    mse += d * d;
  }
  mse /= static_cast<double>(a.numel());
  EXPECT_NEAR(psnr(a, b), -10.0 * std::log10(mse), 1e-9);
  EXPECT_THROW(psnr(a, Tensor({3, 8, 7})), std::exception);
}

// Window statistics from raw moments, a different algebraic route than the
// centred sums used by the library.
double ssim_oracle(const Tensor& a, const Tensor& b, std::size_t c, std::size_t h, std::size_t w) {
  constexpr std::size_t k = 8;
  auto gray = [&](const Tensor& t, std::size_t y, std::size_t x) {
    double s = 0;
    for (std::size_t ch = 0; ch < c; ++ch) s += t.data[(ch * h + y) * w + x];
    return s / static_cast<double>(c);
  };
  double total = 0;
  int windows = 0;
  for (std::size_t y0 = 0; y0 + k <= h; y0 += k)
    for (std::size_t x0 = 0; x0 + k <= w; x0 += k) {
      double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
      for (std::size_t y = y0; y < y0 + k; ++y)
        for (std::size_t x = x0; x < x0 + k; ++x) {
          const double p = gray(a, y, x), q = gray(b, y, x);
          sa += p;
          sb += q;
          saa += p * p;
          sbb += q * q;
          sab += p * q;
        }
      const double n = k * k, ma = sa / n, mb = sb / n;
      const double va = saa / n - ma * ma, vb = sbb / n - mb * mb, cov = sab / n - ma * mb;
      total += (2 * ma * mb + 1e-4) * (2 * cov + 9e-4) /
               ((ma * ma + mb * mb + 1e-4) * (va + vb + 9e-4));
      ++windows;
    }
  return total / windows;
}

TEST(Ssim, IdenticalIsOne) {
  const Tensor a = random_image({3, 16, 16}, 6);
  EXPECT_NEAR(ssim(a, a), 1.0, 1e-12);
}

TEST(Ssim, InvertedImageScoresLower) {
  const Tensor a = random_image({1, 16, 16}, 7);
  Tensor inv = a;
  for (auto& v : inv.data) v = 1.0f - v;
  EXPECT_LT(ssim(a, inv), 0.0);
}

TEST(Ssim, MatchesRawMomentOracle) {
  const Tensor a = random_image({3, 24, 16}, 8), b = random_image({3, 24, 16}, 9);
  EXPECT_NEAR(ssim(a, b), ssim_oracle(a, b, 3, 24, 16), 1e-6);
  Tensor batched = a;
  batched.shape = {1, 3, 24, 16};
  EXPECT_NEAR(ssim(batched, b), ssim(a, b), 1e-12);
}

TEST(Ssim, RejectsImagesSmallerThanWindow) {
  EXPECT_THROW(ssim(Tensor({1, 4, 4}), Tensor({1, 4, 4})), std::invalid_argument);
}

TEST(Hstack, WhiteGutterBetweenPanels) {
  const Tensor a({1, 2, 2}, 0.0f), b({1, 2, 3}, 0.5f);
  const std::vector<Tensor> panels{a, b};
  const Tensor s = hstack_images(panels);
  ASSERT_EQ(s.shape, (Shape{1, 2, 6}));
  for (std::size_t y = 0; y < 2; ++y) {
    EXPECT_EQ(s.data[y * 6 + 1], 0.0f);
    EXPECT_EQ(s.data[y * 6 + 2], 1.0f);
    EXPECT_EQ(s.data[y * 6 + 3], 0.5f);
  }
  const std::vector<Tensor> mismatched{a, Tensor({1, 3, 2})};
  EXPECT_THROW(hstack_images(mismatched), ShapeError);
}

TEST(Ppm, GrayscaleIsReplicatedToRgb) {
  const auto path = std::filesystem::path(::testing::TempDir()) / "metrics_gray.ppm";
  const Tensor g = random_image({1, 5, 7}, 10);
  write_ppm(path, g);
  const Tensor back = read_ppm(path);
  ASSERT_EQ(back.shape, (Shape{3, 5, 7}));
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < 35; ++i) EXPECT_NEAR(back.data[c * 35 + i], g.data[i], 0.5 / 255 + 1e-6);
  std::filesystem::remove(path);
}

}  // namespace
}  // namespace gradleak
