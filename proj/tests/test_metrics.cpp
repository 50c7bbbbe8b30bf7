#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>
#include <vector>

#include "dualcycle/metrics.hpp"

using namespace dualcycle;

namespace {

Volume3D seeded_volume(int n, unsigned seed) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Volume3D v(n, n, n);
  for (float& f : v.data()) f = u(rng);
  return v;
}

// Definition-based SSIM: for every fully-inside window position,
// compute the weighted moments directly and average the local map.
double ssim_oracle(const Volume3D& a, const Volume3D& b, int win, double sigma,
                   double k1, double k2, double range) {
  const int r = win / 2;
  std::vector<double> w(static_cast<std::size_t>(win) * win * win);
  double wsum = 0.0;
  for (int z = 0; z < win; ++z)
    for (int y = 0; y < win; ++y)
      for (int x = 0; x < win; ++x) {
        const double d2 = (z - r) * (z - r) + (y - r) * (y - r) + (x - r) * (x - r);
        const double val = std::exp(-d2 / (2.0 * sigma * sigma));
        w[(static_cast<std::size_t>(z) * win + y) * win + x] = val;
        wsum += val;
      }
  for (double& v : w) v /= wsum;

  const double c1 = (k1 * range) * (k1 * range);
  const double c2 = (k2 * range) * (k2 * range);
  double total = 0.0;
  std::size_t count = 0;
  for (int z = r; z < a.nz() - r; ++z)
    for (int y = r; y < a.ny() - r; ++y)
      for (int x = r; x < a.nx() - r; ++x) {
        double mu_a = 0.0, mu_b = 0.0, aa = 0.0, bb = 0.0, ab = 0.0;
        for (int dz = -r; dz <= r; ++dz)
          for (int dy = -r; dy <= r; ++dy)
            for (int dx = -r; dx <= r; ++dx) {
              const double wv =
                  w[(static_cast<std::size_t>(dz + r) * win + (dy + r)) * win + (dx + r)];
              const double va = a.at(z + dz, y + dy, x + dx);
              const double vb = b.at(z + dz, y + dy, x + dx);
              mu_a += wv * va;
              mu_b += wv * vb;
              aa += wv * va * va;
              bb += wv * vb * vb;
              ab += wv * va * vb;
            }
        const double var_a = aa - mu_a * mu_a;
        const double var_b = bb - mu_b * mu_b;
        const double cov = ab - mu_a * mu_b;
        total += ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) /
                 ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
        ++count;
      }
  return total / static_cast<double>(count);
}

}  // namespace

TEST_CASE("psnr analytic cases") {
  Volume3D a = seeded_volume(8, 1);
  CHECK(std::isinf(psnr(a, a)));

  Volume3D b = a;
  for (float& f : b.data()) f += 0.1f;
  CHECK(psnr(a, b) == doctest::Approx(20.0).epsilon(1e-6));
}

TEST_CASE("psnr rejects dimension mismatch") {
  CHECK_THROWS_AS(psnr(Volume3D(4, 4, 4), Volume3D(4, 4, 5)), MetricError);
}

TEST_CASE("psnr strictly decreases with increasing noise") {
  Volume3D a = seeded_volume(12, 2);
  std::mt19937 rng(3);
  std::normal_distribution<float> gauss(0.0f, 1.0f);
  double prev = std::numeric_limits<double>::infinity();
  for (double sigma : {0.01, 0.02, 0.04, 0.08, 0.16}) {
    Volume3D b = a;
    std::mt19937 local(7);  // same noise pattern, scaled
    for (float& f : b.data()) f += static_cast<float>(sigma * gauss(local));
    const double p = psnr(a, b);
    CHECK(p < prev);
    prev = p;
  }
}

TEST_CASE("ssim of identical volumes is 1") {
  Volume3D a = seeded_volume(16, 4);
  CHECK(ssim(a, a) == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("ssim of anticorrelated volumes is negative") {
  Volume3D a = seeded_volume(16, 5);
  Volume3D b = a;
  for (float& f : b.data()) f = 1.0f - f;
  CHECK(ssim(a, b) < 0.0);
}

TEST_CASE("ssim is symmetric") {
  Volume3D a = seeded_volume(16, 6);
  Volume3D b = seeded_volume(16, 7);
  CHECK(std::abs(ssim(a, b) - ssim(b, a)) < 1e-9);
}

TEST_CASE("ssim matches the sliding-window oracle on 10 seeded pairs") {
  for (unsigned i = 0; i < 10; ++i) {
    Volume3D a = seeded_volume(16, 100 + i);
    Volume3D b = a;
    std::mt19937 rng(200 + i);
    std::normal_distribution<float> gauss(0.0f, 0.05f);
    for (float& f : b.data()) f += gauss(rng);
    const double got = ssim(a, b);
    const double want = ssim_oracle(a, b, 11, 1.5, 0.01, 0.03, 1.0);
    CHECK(std::abs(got - want) < 1e-6);
  }
}

TEST_CASE("ssim rejects volumes smaller than the window") {
  CHECK_THROWS_AS(ssim(Volume3D(8, 16, 16), Volume3D(8, 16, 16)), MetricError);
  SsimWindow even;
  even.size = 10;
  CHECK_THROWS_AS(ssim(Volume3D(16, 16, 16), Volume3D(16, 16, 16), even), MetricError);
}

TEST_CASE("evaluate bundles both metrics") {
  Volume3D a = seeded_volume(16, 8);
  Volume3D b = a;
  for (float& f : b.data()) f += 0.01f;
  MetricReport r = evaluate(a, b);
  CHECK(r.psnr_db == doctest::Approx(40.0).epsilon(1e-6));
  CHECK(r.ssim == doctest::Approx(ssim(a, b)).epsilon(1e-12));
  CHECK(r.data_range == 1.0);
}
