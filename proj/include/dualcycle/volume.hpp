#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace dualcycle {

// Axis convention used by the whole project: index order is (z, y, x).
enum class Axis : int { Z = 0, Y = 1, X = 2 };

enum class Plane : int { XY = 0, XZ = 1, YZ = 2 };

Axis plane_normal(Plane p);
std::string axis_name(Axis a);
std::string plane_name(Plane p);
Plane plane_from_name(const std::string& name);

struct VolumeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Dense 3D scalar field with physical voxel spacing in micrometers.
// Data is row-major in (z, y, x); immutable by convention after
// construction (all operations return new volumes).
class Volume3D {
 public:
  Volume3D() = default;
  Volume3D(int nz, int ny, int nx, float fill = 0.0f,
           std::array<double, 3> spacing_um = {1.0, 1.0, 1.0});
  Volume3D(int nz, int ny, int nx, std::vector<float> data,
           std::array<double, 3> spacing_um = {1.0, 1.0, 1.0});

  int nz() const { return dims_[0]; }
  int ny() const { return dims_[1]; }
  int nx() const { return dims_[2]; }
  int dim(Axis a) const { return dims_[static_cast<int>(a)]; }
  std::size_t size() const { return data_.size(); }

  const std::array<double, 3>& spacing() const { return spacing_; }
  void set_spacing(const std::array<double, 3>& s);

  float at(int z, int y, int x) const {
    return data_[(static_cast<std::size_t>(z) * dims_[1] + y) * dims_[2] + x];
  }
  float& at(int z, int y, int x) {
    return data_[(static_cast<std::size_t>(z) * dims_[1] + y) * dims_[2] + x];
  }

  const std::vector<float>& data() const { return data_; }
  std::vector<float>& data() { return data_; }

  std::optional<std::pair<float, float>> value_range_hint;

  float min_value() const;
  float max_value() const;
  // Throws VolumeError if any value is NaN or infinite.
  void check_finite(const std::string& context) const;

 private:
  std::array<int, 3> dims_{0, 0, 0};
  std::array<double, 3> spacing_{1.0, 1.0, 1.0};
  std::vector<float> data_;
};

struct SliceSpec {
  Plane plane = Plane::XY;
  int index = 0;
};

// 2D image used for slices, projections and figure emission.
// Row-major (rows, cols).
struct Image2D {
  int rows = 0;
  int cols = 0;
  std::vector<float> data;

  float at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }
  float& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
};

// Cross-section of the volume. Plane xy -> rows y, cols x at fixed z;
// xz -> rows z, cols x at fixed y; yz -> rows z, cols y at fixed x.
Image2D extract_slice(const Volume3D& v, const SliceSpec& s);

Image2D max_intensity_projection(const Volume3D& v, Axis axis);

// Trilinear resampling onto an isotropic grid with voxel size
// target_spacing_um on every axis. Axes of size 1 fall back to
// nearest-neighbor (the axis stays size 1).
Volume3D resample_isotropic(const Volume3D& v, double target_spacing_um);

// RV1 container: magic "RAWVOL1\0", u32-le JSON header length, JSON
// header {dims:[z,y,x], spacing:[z,y,x], dtype:"f32le", ...extras},
// then payload of little-endian f32 in (z,y,x) row-major order.
// Round-trips are bit-exact.
void save_volume(const Volume3D& v, const std::string& path);
Volume3D load_volume(const std::string& path);

// Same container with extra header keys; used for PSF serialization.
void save_volume_with_extras(const Volume3D& v, const std::string& path,
                             const std::string& extras_json);
Volume3D load_volume_with_extras(const std::string& path, std::string* extras_json);

}  // namespace dualcycle
