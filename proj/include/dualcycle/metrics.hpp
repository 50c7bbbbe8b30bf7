#pragma once

#include <string>

#include "dualcycle/volume.hpp"

namespace dualcycle {

struct MetricError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct MetricReport {
  double psnr_db = 0.0;
  double ssim = 0.0;
  double data_range = 1.0;
};

// 10 log10(range^2 / MSE); +inf when the volumes are identical.
double psnr(const Volume3D& ref, const Volume3D& test, double data_range = 1.0);

struct SsimWindow {
  int size = 11;        // odd
  double sigma = 1.5;   // Gaussian window
};

// Mean of the local SSIM map over all valid (fully inside) positions,
// computed with a 3D Gaussian window. Canonical constants K1/K2.
double ssim(const Volume3D& ref, const Volume3D& test, SsimWindow window = {},
            double k1 = 0.01, double k2 = 0.03, double data_range = 1.0);

MetricReport evaluate(const Volume3D& ref, const Volume3D& test, double data_range = 1.0);

}  // namespace dualcycle
