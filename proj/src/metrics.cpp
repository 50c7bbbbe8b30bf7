#include "dualcycle/metrics.hpp"

#include <cmath>
#include <limits>
#include <vector>

namespace dualcycle {

namespace {

void require_same_dims(const Volume3D& a, const Volume3D& b, const char* op) {
  if (a.nz() != b.nz() || a.ny() != b.ny() || a.nx() != b.nx())
    throw MetricError(std::string(op) + ": volume dimensions differ");
}

}  // namespace

double psnr(const Volume3D& ref, const Volume3D& test, double data_range) {
  require_same_dims(ref, test, "psnr");
  double sse = 0.0;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    const double d = static_cast<double>(ref.data()[i]) - test.data()[i];
    sse += d * d;
  }
  const double mse = sse / static_cast<double>(ref.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(data_range * data_range / mse);
}

namespace {

// Valid-mode separable Gaussian filtering along one axis of a dense
// (nz, ny, nx) double buffer; the filtered axis shrinks by size-1.
std::vector<double> filter_axis(const std::vector<double>& in, int nz, int ny, int nx,
                                int axis, const std::vector<double>& taps, int& oz,
                                int& oy, int& ox) {
  const int k = static_cast<int>(taps.size());
  oz = nz - (axis == 0 ? k - 1 : 0);
  oy = ny - (axis == 1 ? k - 1 : 0);
  ox = nx - (axis == 2 ? k - 1 : 0);
  std::vector<double> out(static_cast<std::size_t>(oz) * oy * ox);
  auto idx_in = [ny, nx](int z, int y, int x) {
    return (static_cast<std::size_t>(z) * ny + y) * nx + x;
  };
#pragma omp parallel for collapse(2)
  for (int z = 0; z < oz; ++z)
    for (int y = 0; y < oy; ++y)
      for (int x = 0; x < ox; ++x) {
        double acc = 0.0;
        for (int t = 0; t < k; ++t)
          acc += taps[t] * in[idx_in(z + (axis == 0 ? t : 0), y + (axis == 1 ? t : 0),
                                     x + (axis == 2 ? t : 0))];
        out[(static_cast<std::size_t>(z) * oy + y) * ox + x] = acc;
      }
  return out;
}

std::vector<double> gaussian_filter_valid(const std::vector<double>& in, int nz, int ny,
                                          int nx, const std::vector<double>& taps,
                                          int& oz, int& oy, int& ox) {
  int z1, y1, x1;
  auto a = filter_axis(in, nz, ny, nx, 0, taps, z1, y1, x1);
  int z2, y2, x2;
  auto b = filter_axis(a, z1, y1, x1, 1, taps, z2, y2, x2);
  return filter_axis(b, z2, y2, x2, 2, taps, oz, oy, ox);
}

}  // namespace

double ssim(const Volume3D& ref, const Volume3D& test, SsimWindow window, double k1,
            double k2, double data_range) {
  require_same_dims(ref, test, "ssim");
  if (window.size % 2 == 0 || window.size < 3)
    throw MetricError("ssim: window size must be odd and >= 3");
  if (ref.nz() < window.size || ref.ny() < window.size || ref.nx() < window.size)
    throw MetricError("ssim: volume smaller than window");

  std::vector<double> taps(window.size);
  const int r = window.size / 2;
  double sum = 0.0;
  for (int i = 0; i < window.size; ++i) {
    const double d = i - r;
    taps[i] = std::exp(-d * d / (2.0 * window.sigma * window.sigma));
    sum += taps[i];
  }
  for (double& t : taps) t /= sum;

  const std::size_t n = ref.size();
  std::vector<double> a(n), b(n), aa(n), bb(n), ab(n);
  for (std::size_t i = 0; i < n; ++i) {
    a[i] = ref.data()[i];
    b[i] = test.data()[i];
    aa[i] = a[i] * a[i];
    bb[i] = b[i] * b[i];
    ab[i] = a[i] * b[i];
  }

  int oz, oy, ox;
  const auto mu_a = gaussian_filter_valid(a, ref.nz(), ref.ny(), ref.nx(), taps, oz, oy, ox);
  const auto mu_b = gaussian_filter_valid(b, ref.nz(), ref.ny(), ref.nx(), taps, oz, oy, ox);
  const auto m_aa = gaussian_filter_valid(aa, ref.nz(), ref.ny(), ref.nx(), taps, oz, oy, ox);
  const auto m_bb = gaussian_filter_valid(bb, ref.nz(), ref.ny(), ref.nx(), taps, oz, oy, ox);
  const auto m_ab = gaussian_filter_valid(ab, ref.nz(), ref.ny(), ref.nx(), taps, oz, oy, ox);

  const double c1 = (k1 * data_range) * (k1 * data_range);
  const double c2 = (k2 * data_range) * (k2 * data_range);

  double acc = 0.0;
  for (std::size_t i = 0; i < mu_a.size(); ++i) {
    const double ma = mu_a[i], mb = mu_b[i];
    const double va = m_aa[i] - ma * ma;
    const double vb = m_bb[i] - mb * mb;
    const double cov = m_ab[i] - ma * mb;
    acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) /
           ((ma * ma + mb * mb + c1) * (va + vb + c2));
  }
  return acc / static_cast<double>(mu_a.size());
}

MetricReport evaluate(const Volume3D& ref, const Volume3D& test, double data_range) {
  return MetricReport{psnr(ref, test, data_range), ssim(ref, test, {}, 0.01, 0.03, data_range),
                      data_range};
}

}  // namespace dualcycle
