#include "dualcycle/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace dualcycle {

void PhantomSpec::validate() const {
  for (int d : dims)
    if (d < 16) throw PhantomError("phantom dims must each be >= 16");
  if (line_count_range[0] < 1 || line_count_range[1] > 10000 ||
      line_count_range[0] > line_count_range[1])
    throw PhantomError("line_count_range must lie within [1, 10000]");
  if (!(line_thickness_sigma > 0.0)) throw PhantomError("line_thickness_sigma must be > 0");
  if (elastic_grid < 2) throw PhantomError("elastic_grid must be >= 2 per axis");
  if (elastic_sigma < 0.0) throw PhantomError("elastic_sigma must be >= 0");
}

Volume3D draw_random_lines(const PhantomSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::uniform_int_distribution<int> count_dist(spec.line_count_range[0],
                                                spec.line_count_range[1]);
  const int n_lines = count_dist(rng);

  Volume3D out(spec.dims[0], spec.dims[1], spec.dims[2]);
  std::uniform_real_distribution<double> uz(0.0, spec.dims[0] - 1.0);
  std::uniform_real_distribution<double> uy(0.0, spec.dims[1] - 1.0);
  std::uniform_real_distribution<double> ux(0.0, spec.dims[2] - 1.0);

  const double sigma = spec.line_thickness_sigma;
  const int splat_r = static_cast<int>(std::ceil(3.0 * sigma));
  const double inv2s2 = 1.0 / (2.0 * sigma * sigma);

  for (int line = 0; line < n_lines; ++line) {
    const double p0[3] = {uz(rng), uy(rng), ux(rng)};
    const double p1[3] = {uz(rng), uy(rng), ux(rng)};
    const double len = std::sqrt((p1[0] - p0[0]) * (p1[0] - p0[0]) +
                                 (p1[1] - p0[1]) * (p1[1] - p0[1]) +
                                 (p1[2] - p0[2]) * (p1[2] - p0[2]));
    // Splat Gaussian blobs at half-voxel steps along the segment,
    // max-combined so intensity along the line stays flat.
    const int steps = std::max(1, static_cast<int>(std::ceil(len * 2.0)));
    for (int s = 0; s <= steps; ++s) {
      const double t = static_cast<double>(s) / steps;
      const double c[3] = {p0[0] + t * (p1[0] - p0[0]), p0[1] + t * (p1[1] - p0[1]),
                           p0[2] + t * (p1[2] - p0[2])};
      const int z0 = std::max(0, static_cast<int>(std::floor(c[0])) - splat_r);
      const int z1 = std::min(spec.dims[0] - 1, static_cast<int>(std::ceil(c[0])) + splat_r);
      const int y0 = std::max(0, static_cast<int>(std::floor(c[1])) - splat_r);
      const int y1 = std::min(spec.dims[1] - 1, static_cast<int>(std::ceil(c[1])) + splat_r);
      const int x0 = std::max(0, static_cast<int>(std::floor(c[2])) - splat_r);
      const int x1 = std::min(spec.dims[2] - 1, static_cast<int>(std::ceil(c[2])) + splat_r);
      for (int z = z0; z <= z1; ++z)
        for (int y = y0; y <= y1; ++y)
          for (int x = x0; x <= x1; ++x) {
            const double d2 = (z - c[0]) * (z - c[0]) + (y - c[1]) * (y - c[1]) +
                              (x - c[2]) * (x - c[2]);
            const float val = static_cast<float>(std::exp(-d2 * inv2s2));
            out.at(z, y, x) = std::max(out.at(z, y, x), val);
          }
    }
  }
  return out;
}

namespace {

// Catmull-Rom weights for fractional offset f in [0, 1).
inline void catmull_rom_weights(double f, double w[4]) {
  const double f2 = f * f, f3 = f2 * f;
  w[0] = 0.5 * (-f3 + 2.0 * f2 - f);
  w[1] = 0.5 * (3.0 * f3 - 5.0 * f2 + 2.0);
  w[2] = 0.5 * (-3.0 * f3 + 4.0 * f2 + f);
  w[3] = 0.5 * (f3 - f2);
}

struct ControlGrid {
  int g;
  std::vector<std::array<double, 3>> vectors;  // g^3 entries, (z,y,x) order

  const std::array<double, 3>& at(int i, int j, int k) const {
    return vectors[(static_cast<std::size_t>(i) * g + j) * g + k];
  }
};

ControlGrid sample_control_grid(int grid_per_axis, double sigma_voxels,
                                std::uint64_t seed) {
  ControlGrid grid;
  grid.g = grid_per_axis;
  grid.vectors.resize(static_cast<std::size_t>(grid_per_axis) * grid_per_axis *
                      grid_per_axis);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (auto& v : grid.vectors)
    for (int a = 0; a < 3; ++a) v[a] = sigma_voxels * gauss(rng);
  return grid;
}

// Separable Catmull-Rom interpolation of the control grid at grid
// coordinates (gz, gy, gx) in [0, g-1]; edge knots clamped.
std::array<double, 3> interp_displacement(const ControlGrid& grid, double gz, double gy,
                                          double gx) {
  const int g = grid.g;
  auto clampi = [g](int i) { return std::clamp(i, 0, g - 1); };

  const int iz = static_cast<int>(std::floor(gz));
  const int iy = static_cast<int>(std::floor(gy));
  const int ix = static_cast<int>(std::floor(gx));
  double wz[4], wy[4], wx[4];
  catmull_rom_weights(gz - iz, wz);
  catmull_rom_weights(gy - iy, wy);
  catmull_rom_weights(gx - ix, wx);

  std::array<double, 3> out{0.0, 0.0, 0.0};
  for (int a = 0; a < 4; ++a)
    for (int b = 0; b < 4; ++b)
      for (int c = 0; c < 4; ++c) {
        const double w = wz[a] * wy[b] * wx[c];
        if (w == 0.0) continue;
        const auto& vec =
            grid.at(clampi(iz - 1 + a), clampi(iy - 1 + b), clampi(ix - 1 + c));
        for (int d = 0; d < 3; ++d) out[d] += w * vec[d];
      }
  return out;
}

inline double voxel_to_grid(double p, int n, int g) {
  return n > 1 ? p / (n - 1) * (g - 1) : 0.0;
}

double sample_trilinear_clamp(const Volume3D& v, double z, double y, double x) {
  auto clampi = [](int i, int n) { return std::clamp(i, 0, n - 1); };
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
        acc += w * v.at(clampi(z0 + dz, v.nz()), clampi(y0 + dy, v.ny()),
                        clampi(x0 + dx, v.nx()));
      }
  return acc;
}

}  // namespace

std::array<double, 3> elastic_displacement_at(const std::array<int, 3>& dims,
                                              int grid_per_axis, double sigma_voxels,
                                              std::uint64_t seed, double z, double y,
                                              double x) {
  const ControlGrid grid = sample_control_grid(grid_per_axis, sigma_voxels, seed);
  return interp_displacement(grid, voxel_to_grid(z, dims[0], grid_per_axis),
                             voxel_to_grid(y, dims[1], grid_per_axis),
                             voxel_to_grid(x, dims[2], grid_per_axis));
}

std::array<double, 3> elastic_control_vector(int grid_per_axis, double sigma_voxels,
                                             std::uint64_t seed, int gz, int gy, int gx) {
  return sample_control_grid(grid_per_axis, sigma_voxels, seed).at(gz, gy, gx);
}

int sampled_line_count(const PhantomSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::uniform_int_distribution<int> count_dist(spec.line_count_range[0],
                                                spec.line_count_range[1]);
  return count_dist(rng);
}

Volume3D elastic_deform(const Volume3D& v, int grid_per_axis, double sigma_voxels,
                        std::uint64_t seed) {
  if (grid_per_axis < 2) throw PhantomError("elastic grid must be >= 2 per axis");
  const ControlGrid grid = sample_control_grid(grid_per_axis, sigma_voxels, seed);

  Volume3D out(v.nz(), v.ny(), v.nx(), 0.0f, v.spacing());
#pragma omp parallel for collapse(2)
  for (int z = 0; z < v.nz(); ++z)
    for (int y = 0; y < v.ny(); ++y)
      for (int x = 0; x < v.nx(); ++x) {
        const auto d = interp_displacement(grid, voxel_to_grid(z, v.nz(), grid_per_axis),
                                           voxel_to_grid(y, v.ny(), grid_per_axis),
                                           voxel_to_grid(x, v.nx(), grid_per_axis));
        out.at(z, y, x) = static_cast<float>(
            sample_trilinear_clamp(v, z + d[0], y + d[1], x + d[2]));
      }
  out.check_finite("elastic_deform");
  return out;
}

Volume3D generate_phantom(const PhantomSpec& spec) {
  Volume3D lines = draw_random_lines(spec);
  Volume3D warped = elastic_deform(lines, spec.elastic_grid, spec.elastic_sigma,
                                   spec.seed ^ 0x9e3779b97f4a7c15ULL);
  const float lo = warped.min_value();
  const float hi = warped.max_value();
  if (!(hi > lo))
    throw PhantomError("phantom is constant after deformation; retry with another seed");
  const float scale = 1.0f / (hi - lo);
  for (float& f : warped.data()) f = (f - lo) * scale;
  warped.value_range_hint = std::make_pair(0.0f, 1.0f);
  return warped;
}

std::vector<Volume3D> generate_dataset(const std::vector<PhantomSpec>& specs) {
  if (specs.empty()) throw PhantomError("generate_dataset: empty spec list");
  std::vector<Volume3D> out;
  out.reserve(specs.size());
  for (const auto& spec : specs) out.push_back(generate_phantom(spec));
  return out;
}

}  // namespace dualcycle
