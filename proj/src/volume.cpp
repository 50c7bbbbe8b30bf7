#include "dualcycle/volume.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include <nlohmann/json.hpp>

namespace dualcycle {

using json = nlohmann::json;

Axis plane_normal(Plane p) {
  switch (p) {
    case Plane::XY: return Axis::Z;
    case Plane::XZ: return Axis::Y;
    case Plane::YZ: return Axis::X;
  }
  throw VolumeError("invalid plane");
}

std::string axis_name(Axis a) {
  switch (a) {
    case Axis::Z: return "z";
    case Axis::Y: return "y";
    case Axis::X: return "x";
  }
  return "?";
}

std::string plane_name(Plane p) {
  switch (p) {
    case Plane::XY: return "xy";
    case Plane::XZ: return "xz";
    case Plane::YZ: return "yz";
  }
  return "?";
}

Plane plane_from_name(const std::string& name) {
  if (name == "xy") return Plane::XY;
  if (name == "xz") return Plane::XZ;
  if (name == "yz") return Plane::YZ;
  throw VolumeError("unknown plane name: " + name);
}

Volume3D::Volume3D(int nz, int ny, int nx, float fill, std::array<double, 3> spacing_um)
    : dims_{nz, ny, nx}, spacing_(spacing_um),
      data_(static_cast<std::size_t>(nz) * ny * nx, fill) {
  if (nz < 1 || ny < 1 || nx < 1) throw VolumeError("volume dimensions must be >= 1");
  set_spacing(spacing_um);
}

Volume3D::Volume3D(int nz, int ny, int nx, std::vector<float> data,
                   std::array<double, 3> spacing_um)
    : dims_{nz, ny, nx}, spacing_(spacing_um), data_(std::move(data)) {
  if (nz < 1 || ny < 1 || nx < 1) throw VolumeError("volume dimensions must be >= 1");
  if (data_.size() != static_cast<std::size_t>(nz) * ny * nx)
    throw VolumeError("data size does not match dimensions");
  set_spacing(spacing_um);
}

void Volume3D::set_spacing(const std::array<double, 3>& s) {
  for (double v : s)
    if (!(v > 0.0)) throw VolumeError("voxel spacing must be strictly positive");
  spacing_ = s;
}

float Volume3D::min_value() const {
  return *std::min_element(data_.begin(), data_.end());
}

float Volume3D::max_value() const {
  return *std::max_element(data_.begin(), data_.end());
}

void Volume3D::check_finite(const std::string& context) const {
  for (float v : data_)
    if (!std::isfinite(v)) throw VolumeError("non-finite value in " + context);
}

Image2D extract_slice(const Volume3D& v, const SliceSpec& s) {
  const Axis normal = plane_normal(s.plane);
  const int bound = v.dim(normal);
  if (s.index < 0 || s.index >= bound)
    throw VolumeError("slice index " + std::to_string(s.index) +
                      " out of bounds for axis " + axis_name(normal) +
                      " (size " + std::to_string(bound) + ")");

  Image2D out;
  switch (s.plane) {
    case Plane::XY:
      out.rows = v.ny();
      out.cols = v.nx();
      out.data.resize(static_cast<std::size_t>(out.rows) * out.cols);
      for (int y = 0; y < v.ny(); ++y)
        for (int x = 0; x < v.nx(); ++x) out.at(y, x) = v.at(s.index, y, x);
      break;
    case Plane::XZ:
      out.rows = v.nz();
      out.cols = v.nx();
      out.data.resize(static_cast<std::size_t>(out.rows) * out.cols);
      for (int z = 0; z < v.nz(); ++z)
        for (int x = 0; x < v.nx(); ++x) out.at(z, x) = v.at(z, s.index, x);
      break;
    case Plane::YZ:
      out.rows = v.nz();
      out.cols = v.ny();
      out.data.resize(static_cast<std::size_t>(out.rows) * out.cols);
      for (int z = 0; z < v.nz(); ++z)
        for (int y = 0; y < v.ny(); ++y) out.at(z, y) = v.at(z, y, s.index);
      break;
  }
  return out;
}

Image2D max_intensity_projection(const Volume3D& v, Axis axis) {
  Image2D out;
  const float lowest = -std::numeric_limits<float>::infinity();
  switch (axis) {
    case Axis::Z:
      out.rows = v.ny();
      out.cols = v.nx();
      out.data.assign(static_cast<std::size_t>(out.rows) * out.cols, lowest);
      for (int z = 0; z < v.nz(); ++z)
        for (int y = 0; y < v.ny(); ++y)
          for (int x = 0; x < v.nx(); ++x)
            out.at(y, x) = std::max(out.at(y, x), v.at(z, y, x));
      break;
    case Axis::Y:
      out.rows = v.nz();
      out.cols = v.nx();
      out.data.assign(static_cast<std::size_t>(out.rows) * out.cols, lowest);
      for (int z = 0; z < v.nz(); ++z)
        for (int y = 0; y < v.ny(); ++y)
          for (int x = 0; x < v.nx(); ++x)
            out.at(z, x) = std::max(out.at(z, x), v.at(z, y, x));
      break;
    case Axis::X:
      out.rows = v.nz();
      out.cols = v.ny();
      out.data.assign(static_cast<std::size_t>(out.rows) * out.cols, lowest);
      for (int z = 0; z < v.nz(); ++z)
        for (int y = 0; y < v.ny(); ++y)
          for (int x = 0; x < v.nx(); ++x)
            out.at(z, y) = std::max(out.at(z, y), v.at(z, y, x));
      break;
  }
  return out;
}

namespace {

// Sample with clamp-to-edge; coordinates in continuous voxel index space.
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

Volume3D resample_isotropic(const Volume3D& v, double target_spacing_um) {
  if (!(target_spacing_um > 0.0))
    throw VolumeError("target spacing must be strictly positive");

  const std::array<int, 3> in_dims{v.nz(), v.ny(), v.nx()};
  std::array<int, 3> out_dims;
  std::array<double, 3> scale;  // input index per output index
  for (int a = 0; a < 3; ++a) {
    if (in_dims[a] == 1) {
      out_dims[a] = 1;  // nearest-neighbor fallback on degenerate axes
      scale[a] = 0.0;
      continue;
    }
    // Voxel-center convention: physical extent spans (n-1)*spacing.
    const double extent = (in_dims[a] - 1) * v.spacing()[a];
    out_dims[a] = static_cast<int>(std::floor(extent / target_spacing_um + 1e-9)) + 1;
    out_dims[a] = std::max(out_dims[a], 1);
    scale[a] = target_spacing_um / v.spacing()[a];
  }

  Volume3D out(out_dims[0], out_dims[1], out_dims[2], 0.0f,
               {target_spacing_um, target_spacing_um, target_spacing_um});
  for (int z = 0; z < out_dims[0]; ++z)
    for (int y = 0; y < out_dims[1]; ++y)
      for (int x = 0; x < out_dims[2]; ++x)
        out.at(z, y, x) = static_cast<float>(
            sample_trilinear_clamp(v, z * scale[0], y * scale[1], x * scale[2]));
  out.check_finite("resample_isotropic");
  return out;
}

namespace {

constexpr char kMagic[8] = {'R', 'A', 'W', 'V', 'O', 'L', '1', '\0'};

void write_u32le(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32le(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw VolumeError("truncated RV1 header length");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void save_volume_with_extras(const Volume3D& v, const std::string& path,
                             const std::string& extras_json) {
  json header;
  header["dims"] = {v.nz(), v.ny(), v.nx()};
  header["spacing"] = {v.spacing()[0], v.spacing()[1], v.spacing()[2]};
  header["dtype"] = "f32le";
  if (!extras_json.empty()) {
    json extras = json::parse(extras_json);
    for (auto& [k, val] : extras.items()) header[k] = val;
  }
  const std::string hs = header.dump();

  std::ofstream os(path, std::ios::binary);
  if (!os) throw VolumeError("cannot open for writing: " + path);
  os.write(kMagic, 8);
  write_u32le(os, static_cast<std::uint32_t>(hs.size()));
  os.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  static_assert(sizeof(float) == 4);
  os.write(reinterpret_cast<const char*>(v.data().data()),
           static_cast<std::streamsize>(v.size() * sizeof(float)));
  if (!os) throw VolumeError("write failed: " + path);
}

void save_volume(const Volume3D& v, const std::string& path) {
  save_volume_with_extras(v, path, "");
}

Volume3D load_volume_with_extras(const std::string& path, std::string* extras_json) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw VolumeError("cannot open for reading: " + path);

  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kMagic, 8) != 0)
    throw VolumeError("not an RV1 volume file (bad magic): " + path);

  const std::uint32_t hlen = read_u32le(is);
  std::string hs(hlen, '\0');
  is.read(hs.data(), hlen);
  if (!is) throw VolumeError("truncated RV1 header: " + path);

  json header;
  try {
    header = json::parse(hs);
  } catch (const json::exception& e) {
    throw VolumeError(std::string("malformed RV1 JSON header: ") + e.what());
  }
  if (!header.contains("dims") || !header.contains("spacing") || !header.contains("dtype"))
    throw VolumeError("RV1 header missing required keys");
  if (header["dtype"] != "f32le")
    throw VolumeError("unsupported RV1 dtype: " + header["dtype"].dump());

  const auto dims = header["dims"].get<std::vector<int>>();
  const auto spacing = header["spacing"].get<std::vector<double>>();
  if (dims.size() != 3 || spacing.size() != 3)
    throw VolumeError("RV1 dims/spacing must have 3 entries");

  const std::size_t n = static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
  std::vector<float> data(n);
  is.read(reinterpret_cast<char*>(data.data()),
          static_cast<std::streamsize>(n * sizeof(float)));
  if (static_cast<std::size_t>(is.gcount()) != n * sizeof(float))
    throw VolumeError("RV1 payload size does not match declared dims");
  is.peek();
  if (!is.eof()) throw VolumeError("RV1 payload size does not match declared dims");

  if (extras_json) *extras_json = hs;
  return Volume3D(dims[0], dims[1], dims[2], std::move(data),
                  {spacing[0], spacing[1], spacing[2]});
}

Volume3D load_volume(const std::string& path) {
  return load_volume_with_extras(path, nullptr);
}

}  // namespace dualcycle
