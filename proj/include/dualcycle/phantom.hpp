#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "dualcycle/volume.hpp"

namespace dualcycle {

struct PhantomError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct PhantomSpec {
  std::array<int, 3> dims{120, 120, 120};  // (z, y, x)
  std::array<int, 2> line_count_range{30, 50};
  double line_thickness_sigma = 1.0;  // voxels, transverse Gaussian profile
  int elastic_grid = 4;               // control points per axis
  double elastic_sigma = 6.0;         // displacement scale in voxels
  std::uint64_t seed = 0;

  void validate() const;
};

// Random line segments rasterized with a Gaussian transverse profile.
// Deterministic per seed.
Volume3D draw_random_lines(const PhantomSpec& spec);

// Random N(0, sigma^2) displacement vectors at control grid points,
// Catmull-Rom interpolated to a dense field, applied by backward
// warping with clamp-to-edge trilinear sampling.
Volume3D elastic_deform(const Volume3D& v, int grid_per_axis, double sigma_voxels,
                        std::uint64_t seed);

// Dense displacement field at a continuous voxel position; exposed for
// testing the knot-interpolation property.
std::array<double, 3> elastic_displacement_at(const std::array<int, 3>& dims,
                                              int grid_per_axis, double sigma_voxels,
                                              std::uint64_t seed, double z, double y,
                                              double x);

// The raw control vector at grid knot (gz, gy, gx); exposed for the
// knot-reproduction test.
std::array<double, 3> elastic_control_vector(int grid_per_axis, double sigma_voxels,
                                             std::uint64_t seed, int gz, int gy, int gx);

// The line count draw_random_lines(spec) will use; exposed for the
// line-count distribution test.
int sampled_line_count(const PhantomSpec& spec);

// elastic_deform(draw_random_lines(spec)) min-max scaled to [0, 1].
Volume3D generate_phantom(const PhantomSpec& spec);

std::vector<Volume3D> generate_dataset(const std::vector<PhantomSpec>& specs);

}  // namespace dualcycle
