#include "dualcycle/forward_model.hpp"

#include <cmath>
#include <random>

#include <nlohmann/json.hpp>

namespace dualcycle {

using json = nlohmann::json;

void PSF::validate() const {
  if (kernel.nz() % 2 == 0 || kernel.ny() % 2 == 0 || kernel.nx() % 2 == 0)
    throw ForwardModelError("PSF kernel dimensions must be odd");
  double sum = 0.0;
  for (float v : kernel.data()) {
    if (v < 0.0f) throw ForwardModelError("PSF entries must be nonnegative");
    sum += v;
  }
  if (std::abs(sum - 1.0) > 1e-6)
    throw ForwardModelError("PSF must sum to 1 (got " + std::to_string(sum) + ")");
}

PSF gaussian_psf(double sigma_voxels, Axis blur_axis, int truncation_radius) {
  if (!(sigma_voxels > 0.0)) throw ForwardModelError("gaussian_psf: sigma must be > 0");
  const int radius =
      truncation_radius > 0 ? truncation_radius : static_cast<int>(std::ceil(4.0 * sigma_voxels));
  const int n = 2 * radius + 1;

  std::vector<double> profile(n);
  double sum = 0.0;
  for (int i = 0; i < n; ++i) {
    const double d = i - radius;
    profile[i] = std::exp(-d * d / (2.0 * sigma_voxels * sigma_voxels));
    sum += profile[i];
  }

  int nz = 1, ny = 1, nx = 1;
  switch (blur_axis) {
    case Axis::Z: nz = n; break;
    case Axis::Y: ny = n; break;
    case Axis::X: nx = n; break;
  }
  Volume3D kernel(nz, ny, nx);
  for (int i = 0; i < n; ++i)
    kernel.data()[i] = static_cast<float>(profile[i] / sum);

  PSF psf{std::move(kernel), blur_axis, sigma_voxels};
  psf.validate();
  return psf;
}

PSF delta_psf() {
  Volume3D kernel(1, 1, 1, 1.0f);
  return PSF{std::move(kernel), Axis::Z, std::nullopt};
}

void save_psf(const PSF& psf, const std::string& path) {
  json extras;
  extras["kind"] = "psf";
  extras["blur_axis"] = axis_name(psf.blur_axis);
  if (psf.sigma) extras["sigma"] = *psf.sigma;
  save_volume_with_extras(psf.kernel, path, extras.dump());
}

PSF load_psf(const std::string& path) {
  std::string extras;
  Volume3D kernel = load_volume_with_extras(path, &extras);
  json header = json::parse(extras);
  PSF psf;
  psf.kernel = std::move(kernel);
  if (header.contains("blur_axis")) {
    const std::string a = header["blur_axis"];
    psf.blur_axis = a == "z" ? Axis::Z : (a == "y" ? Axis::Y : Axis::X);
  }
  if (header.contains("sigma")) psf.sigma = header["sigma"].get<double>();
  psf.validate();
  return psf;
}

Volume3D convolve3d(const Volume3D& v, const PSF& psf) {
  psf.validate();
  const Volume3D& k = psf.kernel;
  if (k.nz() > 2 * v.nz() || k.ny() > 2 * v.ny() || k.nx() > 2 * v.nx())
    throw ForwardModelError("convolve3d: kernel larger than 2x volume");

  const int rz = k.nz() / 2, ry = k.ny() / 2, rx = k.nx() / 2;
  Volume3D out(v.nz(), v.ny(), v.nx(), 0.0f, v.spacing());

#pragma omp parallel for collapse(2)
  for (int z = 0; z < v.nz(); ++z)
    for (int y = 0; y < v.ny(); ++y)
      for (int x = 0; x < v.nx(); ++x) {
        double acc = 0.0;
        for (int kz = 0; kz < k.nz(); ++kz) {
          const int sz = z + rz - kz;
          if (sz < 0 || sz >= v.nz()) continue;
          for (int ky = 0; ky < k.ny(); ++ky) {
            const int sy = y + ry - ky;
            if (sy < 0 || sy >= v.ny()) continue;
            for (int kx = 0; kx < k.nx(); ++kx) {
              const int sx = x + rx - kx;
              if (sx < 0 || sx >= v.nx()) continue;
              acc += static_cast<double>(k.at(kz, ky, kx)) * v.at(sz, sy, sx);
            }
          }
        }
        out.at(z, y, x) = static_cast<float>(acc);
      }
  return out;
}

Volume3D convolve3d_adjoint(const Volume3D& v, const PSF& psf) {
  const Volume3D& k = psf.kernel;
  Volume3D flipped(k.nz(), k.ny(), k.nx());
  for (int z = 0; z < k.nz(); ++z)
    for (int y = 0; y < k.ny(); ++y)
      for (int x = 0; x < k.nx(); ++x)
        flipped.at(z, y, x) = k.at(k.nz() - 1 - z, k.ny() - 1 - y, k.nx() - 1 - x);
  PSF adj{std::move(flipped), psf.blur_axis, psf.sigma};
  return convolve3d(v, adj);
}

AffineTransform AffineTransform::identity() { return AffineTransform{}; }

AffineTransform AffineTransform::rotation90_about_y() {
  // In (z, y, x) normalized coordinates: z' = x, y' = y, x' = -z.
  AffineTransform t;
  t.matrix = {{{0, 0, 1}, {0, 1, 0}, {-1, 0, 0}}};
  return t;
}

double AffineTransform::det() const {
  const auto& m = matrix;
  return m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) -
         m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
         m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
}

AffineTransform AffineTransform::inverse() const {
  const double d = det();
  if (std::abs(d) <= 1e-9) throw ForwardModelError("affine matrix is singular");
  const auto& m = matrix;
  AffineTransform inv;
  inv.matrix[0][0] = (m[1][1] * m[2][2] - m[1][2] * m[2][1]) / d;
  inv.matrix[0][1] = (m[0][2] * m[2][1] - m[0][1] * m[2][2]) / d;
  inv.matrix[0][2] = (m[0][1] * m[1][2] - m[0][2] * m[1][1]) / d;
  inv.matrix[1][0] = (m[1][2] * m[2][0] - m[1][0] * m[2][2]) / d;
  inv.matrix[1][1] = (m[0][0] * m[2][2] - m[0][2] * m[2][0]) / d;
  inv.matrix[1][2] = (m[0][2] * m[1][0] - m[0][0] * m[1][2]) / d;
  inv.matrix[2][0] = (m[1][0] * m[2][1] - m[1][1] * m[2][0]) / d;
  inv.matrix[2][1] = (m[0][1] * m[2][0] - m[0][0] * m[2][1]) / d;
  inv.matrix[2][2] = (m[0][0] * m[1][1] - m[0][1] * m[1][0]) / d;
  // inv(p') = M^-1 (p' - t)
  for (int i = 0; i < 3; ++i) {
    inv.translation[i] = 0.0;
    for (int j = 0; j < 3; ++j) inv.translation[i] -= inv.matrix[i][j] * translation[j];
  }
  return inv;
}

bool AffineTransform::is_identity(double tol) const {
  for (int i = 0; i < 3; ++i) {
    if (std::abs(translation[i]) > tol) return false;
    for (int j = 0; j < 3; ++j)
      if (std::abs(matrix[i][j] - (i == j ? 1.0 : 0.0)) > tol) return false;
  }
  return true;
}

namespace {

double sample_trilinear_zero(const Volume3D& v, double z, double y, double x) {
  const int z0 = static_cast<int>(std::floor(z));
  const int y0 = static_cast<int>(std::floor(y));
  const int x0 = static_cast<int>(std::floor(x));
  const double fz = z - z0, fy = y - y0, fx = x - x0;

  double acc = 0.0;
  for (int dz = 0; dz <= 1; ++dz)
    for (int dy = 0; dy <= 1; ++dy)
      for (int dx = 0; dx <= 1; ++dx) {
        const double w = (dz ? fz : 1.0 - fz) * (dy ? fy : 1.0 - fy) * (dx ? fx : 1.0 - fx);
        if (w == 0.0) continue;
        const int zi = z0 + dz, yi = y0 + dy, xi = x0 + dx;
        if (zi < 0 || zi >= v.nz() || yi < 0 || yi >= v.ny() || xi < 0 || xi >= v.nx())
          continue;
        acc += w * v.at(zi, yi, xi);
      }
  return acc;
}

// Voxel index <-> normalized coordinate in [-1, 1] (centers convention).
inline double index_to_norm(int i, int n) {
  return n > 1 ? -1.0 + 2.0 * i / (n - 1) : 0.0;
}
inline double norm_to_index(double c, int n) {
  return n > 1 ? (c + 1.0) * 0.5 * (n - 1) : 0.0;
}

}  // namespace

Volume3D apply_affine(const Volume3D& v, const AffineTransform& t) {
  const AffineTransform inv = t.inverse();  // throws on singular matrix
  Volume3D out(v.nz(), v.ny(), v.nx(), 0.0f, v.spacing());
  const int dims[3] = {v.nz(), v.ny(), v.nx()};

#pragma omp parallel for collapse(2)
  for (int z = 0; z < dims[0]; ++z)
    for (int y = 0; y < dims[1]; ++y)
      for (int x = 0; x < dims[2]; ++x) {
        const double c[3] = {index_to_norm(z, dims[0]), index_to_norm(y, dims[1]),
                             index_to_norm(x, dims[2])};
        double src[3];
        for (int i = 0; i < 3; ++i) {
          src[i] = inv.translation[i];
          for (int j = 0; j < 3; ++j) src[i] += inv.matrix[i][j] * c[j];
        }
        out.at(z, y, x) = static_cast<float>(sample_trilinear_zero(
            v, norm_to_index(src[0], dims[0]), norm_to_index(src[1], dims[1]),
            norm_to_index(src[2], dims[2])));
      }
  return out;
}

void AffineMismatchSpec::validate() const {
  if (matrix_perturbation_bound < 0.0 || translation_bound < 0.0)
    throw ForwardModelError("mismatch bounds must be >= 0");
}

AffineTransform sample_mismatch(const AffineMismatchSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);

  AffineTransform t;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      t.matrix[i][j] = (i == j ? 1.0 : 0.0) + spec.matrix_perturbation_bound * unit(rng);
  for (int i = 0; i < 3; ++i) t.translation[i] = spec.translation_bound * unit(rng);
  return t;
}

void NoiseSpec::validate() const {
  if (sigma < 0.0) throw ForwardModelError("noise sigma must be >= 0");
  if ((model == NoiseModel::None) != (sigma == 0.0))
    throw ForwardModelError("noise sigma must be 0 iff model is none");
}

namespace {

Volume3D add_gaussian_noise(const Volume3D& v, double sigma, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, sigma);
  Volume3D out = v;
  for (float& f : out.data()) f = static_cast<float>(f + gauss(rng));
  return out;
}

}  // namespace

ViewPair simulate_views(const Volume3D& u, const PSF& psf_a, const PSF& psf_b,
                        const AffineMismatchSpec& mismatch, const NoiseSpec& noise,
                        bool apply_rotation) {
  mismatch.validate();
  noise.validate();

  AffineMismatchSpec spec_a = mismatch;
  AffineMismatchSpec spec_b = mismatch;
  spec_a.seed = mismatch.seed * 2 + 1;
  spec_b.seed = mismatch.seed * 2 + 2;

  ViewPair pair;
  pair.psf_a = psf_a;
  pair.psf_b = psf_b;
  pair.noise = noise;
  pair.mismatch_a = sample_mismatch(spec_a);
  pair.mismatch_b = sample_mismatch(spec_b);

  // g_A = A_A H_A u; g_B = R A_B H_B u (blur, then affine, then rotation).
  Volume3D a = convolve3d(u, psf_a);
  if (!pair.mismatch_a.is_identity()) a = apply_affine(a, pair.mismatch_a);
  Volume3D b = convolve3d(u, psf_b);
  if (!pair.mismatch_b.is_identity()) b = apply_affine(b, pair.mismatch_b);
  if (apply_rotation) b = apply_affine(b, AffineTransform::rotation90_about_y());

  if (noise.model == NoiseModel::Gaussian) {
    a = add_gaussian_noise(a, noise.sigma, noise.seed * 2 + 1);
    b = add_gaussian_noise(b, noise.sigma, noise.seed * 2 + 2);
  }

  pair.view_a = std::move(a);
  pair.view_b = std::move(b);
  pair.view_a.check_finite("simulate_views view_a");
  pair.view_b.check_finite("simulate_views view_b");
  return pair;
}

}  // namespace dualcycle
