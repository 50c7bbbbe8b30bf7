#include "dualcycle/classical.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace dualcycle {

void RLConfig::validate() const {
  if (iterations < 1) throw ReconError("RLConfig: iterations must be >= 1");
  if (!(epsilon > 0.0)) throw ReconError("RLConfig: epsilon must be > 0");
}

Volume3D fuse_average(const ViewPair& views) {
  const Volume3D& a = views.view_a;
  const Volume3D& b = views.view_b;
  if (a.nz() != b.nz() || a.ny() != b.ny() || a.nx() != b.nx())
    throw ReconError("fuse_average: view dimensions differ");
  Volume3D out(a.nz(), a.ny(), a.nx(), 0.0f, a.spacing());
  for (std::size_t i = 0; i < a.size(); ++i)
    out.data()[i] = 0.5f * (a.data()[i] + b.data()[i]);
  return out;
}

namespace {

// One multiplicative half-iteration against a single view.
void rl_update(Volume3D& estimate, const Volume3D& view, const PSF& psf, double eps,
               bool clamp) {
  Volume3D blurred = convolve3d(estimate, psf);
  Volume3D ratio(view.nz(), view.ny(), view.nx(), 0.0f, view.spacing());
  for (std::size_t i = 0; i < view.size(); ++i)
    ratio.data()[i] =
        static_cast<float>(view.data()[i] / (static_cast<double>(blurred.data()[i]) + eps));
  Volume3D corr = convolve3d_adjoint(ratio, psf);
  for (std::size_t i = 0; i < estimate.size(); ++i) {
    double v = static_cast<double>(estimate.data()[i]) * corr.data()[i];
    if (clamp && v < 0.0) v = 0.0;
    estimate.data()[i] = static_cast<float>(v);
  }
}

}  // namespace

Volume3D joint_richardson_lucy(const ViewPair& views, const PSF& psf_a, const PSF& psf_b,
                               const RLConfig& cfg) {
  cfg.validate();
  psf_a.validate();
  psf_b.validate();

  Volume3D estimate = fuse_average(views);
  if (cfg.clamp_nonnegative)
    for (float& f : estimate.data()) f = std::max(f, 0.0f);

  const double input_max = std::max<double>(views.view_a.max_value(), views.view_b.max_value());
  const double divergence_cap = 1e3 * std::max(input_max, 1e-12);

  for (int it = 0; it < cfg.iterations; ++it) {
    rl_update(estimate, views.view_a, psf_a, cfg.epsilon, cfg.clamp_nonnegative);
    rl_update(estimate, views.view_b, psf_b, cfg.epsilon, cfg.clamp_nonnegative);
    const double m = estimate.max_value();
    if (!std::isfinite(m) || m > divergence_cap)
      throw ReconError("richardson-lucy diverged at iteration " + std::to_string(it + 1));
  }
  estimate.check_finite("joint_richardson_lucy");
  return estimate;
}

}  // namespace dualcycle
