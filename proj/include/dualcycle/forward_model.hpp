#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>

#include "dualcycle/volume.hpp"

namespace dualcycle {

struct ForwardModelError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Normalized 3D blur kernel. Odd size along every axis, entries >= 0,
// sum 1 within 1e-6.
struct PSF {
  Volume3D kernel;
  Axis blur_axis = Axis::Z;
  std::optional<double> sigma;  // voxels, when Gaussian

  void validate() const;
};

// 1D Gaussian profile along blur_axis embedded in a 3D kernel (size 1
// on the other axes). Truncated at radius ceil(4*sigma) by default.
PSF gaussian_psf(double sigma_voxels, Axis blur_axis, int truncation_radius = -1);

PSF delta_psf();

void save_psf(const PSF& psf, const std::string& path);
PSF load_psf(const std::string& path);

// "Same"-size linear convolution with zero padding.
Volume3D convolve3d(const Volume3D& v, const PSF& psf);

// Convolution with the flipped kernel (the adjoint of convolve3d).
Volume3D convolve3d_adjoint(const Volume3D& v, const PSF& psf);

// 3x3 matrix + translation acting on coordinates normalized to
// [-1, 1]^3 per axis (order z, y, x): p' = M p + t.
struct AffineTransform {
  std::array<std::array<double, 3>, 3> matrix{{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}};
  std::array<double, 3> translation{0, 0, 0};

  static AffineTransform identity();
  // 90-degree rotation about the y axis (View B relative to View A).
  static AffineTransform rotation90_about_y();

  double det() const;
  AffineTransform inverse() const;
  bool is_identity(double tol = 0.0) const;
};

// Backward warping: each output voxel samples the input at t^-1(coord)
// by trilinear interpolation; samples outside the input are zero.
Volume3D apply_affine(const Volume3D& v, const AffineTransform& t);

struct AffineMismatchSpec {
  double matrix_perturbation_bound = 0.0025;
  double translation_bound = 0.05;
  std::uint64_t seed = 0;

  void validate() const;
};

// matrix = I + N with N_ij iid uniform in +-matrix_perturbation_bound,
// translation iid uniform in +-translation_bound. Deterministic per seed.
AffineTransform sample_mismatch(const AffineMismatchSpec& spec);

enum class NoiseModel { None, Gaussian };

struct NoiseSpec {
  NoiseModel model = NoiseModel::None;
  double sigma = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct ViewPair {
  Volume3D view_a;
  Volume3D view_b;
  PSF psf_a;
  PSF psf_b;
  AffineTransform mismatch_a;
  AffineTransform mismatch_b;
  NoiseSpec noise;
};

// Eq-order degradation: view = [rotation o] mismatch o blur applied to u.
// Mismatch transforms for the two views are drawn from spec with
// decorrelated per-view streams. Rotation applies to View B only.
ViewPair simulate_views(const Volume3D& u, const PSF& psf_a, const PSF& psf_b,
                        const AffineMismatchSpec& mismatch, const NoiseSpec& noise,
                        bool apply_rotation);

}  // namespace dualcycle
