#pragma once

#include <string>

#include "dualcycle/volume.hpp"

namespace dualcycle {

struct FigureError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// 8-bit grayscale PNG; values mapped linearly from [lo, hi] and clamped.
void write_png_gray(const std::string& path, const Image2D& img, float lo = 0.0f,
                    float hi = 1.0f);

// Central cross-sections (xy, xz, yz) and per-axis MIPs for a volume,
// written as "<prefix>_<plane>.png" / "<prefix>_mip_<axis>.png".
void write_volume_figures(const std::string& prefix, const Volume3D& v);

}  // namespace dualcycle
