#pragma once

#include "dualcycle/forward_model.hpp"
#include "dualcycle/volume.hpp"

namespace dualcycle {

struct ReconError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct RLConfig {
  int iterations = 40;
  double epsilon = 1e-8;
  bool clamp_nonnegative = true;

  void validate() const;
};

// Voxel-wise arithmetic mean of the two registered views.
Volume3D fuse_average(const ViewPair& views);

// Alternating multiplicative Richardson-Lucy over the two views, one
// view per half-iteration:  u <- u * H^T( g / (H u + eps) ).
// Views must already be registered to the frame of u.
Volume3D joint_richardson_lucy(const ViewPair& views, const PSF& psf_a, const PSF& psf_b,
                               const RLConfig& cfg);

}  // namespace dualcycle
