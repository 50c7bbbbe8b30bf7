#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dualcycle/forward_model.hpp"
#include "dualcycle/nn/tensor.hpp"
#include "dualcycle/volume.hpp"

namespace dualcycle {

struct TrainingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---- generator -----------------------------------------------------------

struct GeneratorConfig {
  int depth = 3;          // number of down/up levels
  int base_channels = 16;
  int in_channels = 2;
  double leaky_slope = 0.2;
  bool residual_skip = true;  // add the mean of the input views to the output
};

// 3D U-Net with padded convolutions, instance normalization and a
// single-channel output. Instance-norm statistics can be captured and
// frozen so that inference is a purely local operator (tiling-safe).
class UNet3D {
 public:
  enum class Mode { Train, CaptureStats, FrozenStats };

  explicit UNet3D(const GeneratorConfig& cfg, nn::Rng& rng);

  nn::TensorPtr forward(const nn::TensorPtr& x, Mode mode = Mode::Train);

  const GeneratorConfig& config() const { return cfg_; }
  std::vector<nn::TensorPtr> parameters() const;
  bool has_frozen_stats() const { return !frozen_stats_.empty(); }

  // Checkpoint access to captured statistics.
  const std::vector<nn::InstanceNormStats>& frozen_stats() const { return frozen_stats_; }
  void set_frozen_stats(std::vector<nn::InstanceNormStats> stats);

 private:
  struct ConvBlock {
    nn::TensorPtr w, b, gamma, beta;
    bool normed = true;
  };
  nn::TensorPtr run_block(const ConvBlock& blk, const nn::TensorPtr& x, int stride,
                          Mode mode, std::size_t norm_index);

  GeneratorConfig cfg_;
  std::vector<ConvBlock> enc_;       // 2 per level
  std::vector<ConvBlock> down_;      // 1 per level (strided)
  std::vector<ConvBlock> bottleneck_;
  std::vector<ConvBlock> up_;        // 1 per level (post-upsample)
  std::vector<ConvBlock> dec_;       // 2 per level
  ConvBlock final_;
  std::size_t norm_count_ = 0;
  std::vector<nn::InstanceNormStats> frozen_stats_;
};

// ---- degradation ----------------------------------------------------------

struct DlgConfig {
  int layer_count = 3;
  int kernel_size = 3;
  double init_noise = 1e-3;  // around the delta initialization
};

// Cascade of single-channel 3D convolutions with no bias and no
// nonlinearity; the composition is one effective linear kernel.
class DeepLinearGenerator {
 public:
  DeepLinearGenerator(const DlgConfig& cfg, const std::string& name_prefix, nn::Rng& rng);

  nn::TensorPtr forward(const nn::TensorPtr& x) const;
  std::vector<nn::TensorPtr> parameters() const { return layers_; }
  const DlgConfig& config() const { return cfg_; }

  // Explicit composition of the layer kernels into one kernel.
  std::vector<double> effective_kernel(std::vector<int>& shape_out) const;

 private:
  DlgConfig cfg_;
  std::vector<nn::TensorPtr> layers_;  // [1,1,k,k,k] each
};

// Physics-guided degradation: fixed (frozen) PSF convolution followed
// by the DLG; blind mode drops the PSF.
class DegradationPath {
 public:
  DegradationPath(std::optional<PSF> psf, DlgConfig dlg_cfg, const std::string& name_prefix,
                  nn::Rng& rng);

  nn::TensorPtr degrade(const nn::TensorPtr& recon) const;
  std::vector<nn::TensorPtr> parameters() const { return dlg_.parameters(); }
  const DeepLinearGenerator& dlg() const { return dlg_; }
  DeepLinearGenerator& dlg() { return dlg_; }
  bool blind() const { return !psf_kernel_; }
  const nn::TensorPtr& frozen_psf_kernel() const { return psf_kernel_; }

 private:
  nn::TensorPtr psf_kernel_;  // [1,1,kz,ky,kx], requires_grad = false
  int psf_pad_[3] = {0, 0, 0};
  DeepLinearGenerator dlg_;
};

// ---- discriminators --------------------------------------------------------

struct DiscriminatorConfig {
  int layer_count = 4;  // strided conv layers before the score head
  int base_channels = 16;
  double leaky_slope = 0.2;
};

// PatchGAN over 2D slices: a fully convolutional stack emitting a 2D
// map of patch scores.
class SliceDiscriminator {
 public:
  SliceDiscriminator(const DiscriminatorConfig& cfg, const std::string& name_prefix,
                     nn::Rng& rng);

  nn::TensorPtr score(const nn::TensorPtr& slice) const;  // [1, h', w']
  std::vector<nn::TensorPtr> parameters() const;

 private:
  DiscriminatorConfig cfg_;
  struct Layer {
    nn::TensorPtr w, b, gamma, beta;
    int stride = 2;
    bool normed = true;
  };
  std::vector<Layer> layers_;
  Layer head_;
};

// ---- losses and training ----------------------------------------------------

struct DualCycleLossTerms {
  double adv_iso_a1 = 0.0, adv_iso_b1 = 0.0;
  double adv_view_a2 = 0.0, adv_view_b2 = 0.0;
  double cycle_l1_a = 0.0, cycle_l1_b = 0.0;
  double lambda_cycle = 10.0;
  double total() const {
    return adv_iso_a1 + adv_iso_b1 + adv_view_a2 + adv_view_b2 +
           lambda_cycle * (cycle_l1_a + cycle_l1_b);
  }
};

struct TrainConfig {
  int steps = 400;
  double learning_rate = 1e-4;
  double lambda_cycle = 10.0;
  int patch_size = 32;          // cubic training patch edge
  int slices_per_plane = 4;     // discriminator slice batch
  std::uint64_t seed = 0;
  GeneratorConfig generator;
  DlgConfig dlg;
  DiscriminatorConfig discriminator;
  bool blind = false;           // drop the PSFs from the degradation paths
  bool single_view = false;     // ablation: feed View A twice, disable B path
  int checkpoint_every = 0;     // 0 = only final
  std::string warm_start_path;  // optional checkpoint to initialize from
};

struct TrainHistoryEntry {
  int step = 0;
  DualCycleLossTerms generator_terms;
  double disc_loss = 0.0;
};

class DualCycleModel {
 public:
  DualCycleModel(const TrainConfig& cfg, const std::optional<PSF>& psf_a,
                 const std::optional<PSF>& psf_b);

  // Forward pass over a registered, equal-dims view pair. Pads and
  // crops internally when dims are not divisible by 2^depth.
  Volume3D reconstruct(const ViewPair& views) const;
  // Tiled inference with overlap blending; requires frozen stats.
  Volume3D reconstruct_tiled(const ViewPair& views, int tile, int overlap) const;

  // One scalar graph with every loss term, on full-volume tensors.
  // Used by training and by the finite-difference gradient check.
  nn::TensorPtr loss_graph(const nn::TensorPtr& in_a, const nn::TensorPtr& in_b,
                           int slices_per_plane, std::uint64_t slice_seed,
                           DualCycleLossTerms* terms_out) const;

  std::vector<TrainHistoryEntry> train(const ViewPair& views);

  std::vector<nn::TensorPtr> generator_parameters() const;
  std::vector<nn::TensorPtr> discriminator_parameters() const;
  std::vector<nn::TensorPtr> all_parameters() const;

  const TrainConfig& config() const { return cfg_; }
  UNet3D& generator() { return *gen_; }
  const UNet3D& generator() const { return *gen_; }
  DegradationPath& path_a() { return *path_a_; }
  DegradationPath& path_b() { return *path_b_; }
  SliceDiscriminator& disc(int i) { return *discs_[i]; }  // 0=A1 1=B1 2=A2 3=B2

  void save_checkpoint(const std::string& path, int step) const;
  // Returns the stored step counter. Throws with a shape diff on
  // architecture mismatch.
  int load_checkpoint(const std::string& path);

  nn::Adam& gen_optimizer() { return opt_gen_; }
  nn::Adam& disc_optimizer() { return opt_disc_; }

 private:
  nn::TensorPtr degrade_cropped(int which, const nn::TensorPtr& recon) const;

  TrainConfig cfg_;
  mutable std::unique_ptr<nn::Rng> init_rng_;
  std::unique_ptr<UNet3D> gen_;
  std::unique_ptr<DegradationPath> path_a_, path_b_;
  std::vector<std::unique_ptr<SliceDiscriminator>> discs_;
  nn::Adam opt_gen_, opt_disc_;
  int cycle_margin_a_ = 0, cycle_margin_b_ = 0;  // interior crop, voxels
};

std::string train_config_to_json_string(const TrainConfig& cfg);
TrainConfig train_config_from_json_string(const std::string& s);

// Volume <-> tensor bridges.
nn::TensorPtr volume_to_tensor(const Volume3D& v);
Volume3D tensor_to_volume(const nn::TensorPtr& t, const std::array<double, 3>& spacing);

}  // namespace dualcycle
