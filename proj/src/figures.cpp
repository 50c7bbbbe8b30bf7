#include "dualcycle/figures.hpp"

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <vector>

#include <zlib.h>

namespace dualcycle {

namespace {

void put_u32be(std::vector<unsigned char>& out, std::uint32_t v) {
  out.push_back(static_cast<unsigned char>((v >> 24) & 0xff));
  out.push_back(static_cast<unsigned char>((v >> 16) & 0xff));
  out.push_back(static_cast<unsigned char>((v >> 8) & 0xff));
  out.push_back(static_cast<unsigned char>(v & 0xff));
}

void write_chunk(std::ofstream& os, const char type[4],
                 const std::vector<unsigned char>& data) {
  std::vector<unsigned char> head;
  put_u32be(head, static_cast<std::uint32_t>(data.size()));
  os.write(reinterpret_cast<const char*>(head.data()), 4);
  os.write(type, 4);
  if (!data.empty()) os.write(reinterpret_cast<const char*>(data.data()),
                              static_cast<std::streamsize>(data.size()));
  std::uint32_t crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, reinterpret_cast<const Bytef*>(type), 4);
  if (!data.empty()) crc = crc32(crc, data.data(), static_cast<uInt>(data.size()));
  std::vector<unsigned char> tail;
  put_u32be(tail, crc);
  os.write(reinterpret_cast<const char*>(tail.data()), 4);
}

}  // namespace

void write_png_gray(const std::string& path, const Image2D& img, float lo, float hi) {
  if (img.rows < 1 || img.cols < 1) throw FigureError("empty image");
  if (!(hi > lo)) throw FigureError("invalid intensity range");

  // Scanlines with filter byte 0.
  std::vector<unsigned char> raw;
  raw.reserve(static_cast<std::size_t>(img.rows) * (img.cols + 1));
  const float scale = 255.0f / (hi - lo);
  for (int r = 0; r < img.rows; ++r) {
    raw.push_back(0);
    for (int c = 0; c < img.cols; ++c) {
      const float v = std::clamp((img.at(r, c) - lo) * scale, 0.0f, 255.0f);
      raw.push_back(static_cast<unsigned char>(v + 0.5f));
    }
  }

  uLongf comp_len = compressBound(static_cast<uLong>(raw.size()));
  std::vector<unsigned char> comp(comp_len);
  if (compress2(comp.data(), &comp_len, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
    throw FigureError("zlib compression failed");
  comp.resize(comp_len);

  std::ofstream os(path, std::ios::binary);
  if (!os) throw FigureError("cannot open for writing: " + path);
  static const unsigned char sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  os.write(reinterpret_cast<const char*>(sig), 8);

  std::vector<unsigned char> ihdr;
  put_u32be(ihdr, static_cast<std::uint32_t>(img.cols));
  put_u32be(ihdr, static_cast<std::uint32_t>(img.rows));
  ihdr.push_back(8);  // bit depth
  ihdr.push_back(0);  // grayscale
  ihdr.push_back(0);
  ihdr.push_back(0);
  ihdr.push_back(0);
  write_chunk(os, "IHDR", ihdr);
  write_chunk(os, "IDAT", comp);
  write_chunk(os, "IEND", {});
  if (!os) throw FigureError("PNG write failed: " + path);
}

void write_volume_figures(const std::string& prefix, const Volume3D& v) {
  const float lo = 0.0f;
  const float hi = std::max(v.max_value(), 1e-6f);
  write_png_gray(prefix + "_xy.png", extract_slice(v, {Plane::XY, v.nz() / 2}), lo, hi);
  write_png_gray(prefix + "_xz.png", extract_slice(v, {Plane::XZ, v.ny() / 2}), lo, hi);
  write_png_gray(prefix + "_yz.png", extract_slice(v, {Plane::YZ, v.nx() / 2}), lo, hi);
  write_png_gray(prefix + "_mip_z.png", max_intensity_projection(v, Axis::Z), lo, hi);
  write_png_gray(prefix + "_mip_y.png", max_intensity_projection(v, Axis::Y), lo, hi);
  write_png_gray(prefix + "_mip_x.png", max_intensity_projection(v, Axis::X), lo, hi);
}

}  // namespace dualcycle
