#include "dualcycle/dual_cycle.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace dualcycle {

using nn::TensorPtr;
using json = nlohmann::json;

nn::TensorPtr volume_to_tensor(const Volume3D& v) {
  auto t = nn::make_tensor({1, v.nz(), v.ny(), v.nx()}, false);
  for (std::size_t i = 0; i < v.size(); ++i) t->value[i] = v.data()[i];
  return t;
}

Volume3D tensor_to_volume(const TensorPtr& t, const std::array<double, 3>& spacing) {
  if (t->shape.size() != 4 || t->shape[0] != 1)
    throw TrainingError("tensor_to_volume: expected [1, D, H, W]");
  Volume3D v(t->shape[1], t->shape[2], t->shape[3], 0.0f, spacing);
  for (std::size_t i = 0; i < v.size(); ++i) v.data()[i] = static_cast<float>(t->value[i]);
  return v;
}

namespace {

TensorPtr init_conv_weight(std::vector<int> shape, const std::string& name, nn::Rng& rng,
                           double stddev = 0.02) {
  auto w = nn::make_param(std::move(shape), name);
  for (double& v : w->value) v = rng.normal(0.0, stddev);
  return w;
}

TensorPtr zeros_param(std::vector<int> shape, const std::string& name) {
  return nn::make_param(std::move(shape), name);
}

TensorPtr ones_param(std::vector<int> shape, const std::string& name) {
  auto t = nn::make_param(std::move(shape), name);
  std::fill(t->value.begin(), t->value.end(), 1.0);
  return t;
}

// PSF kernel as a frozen [1,1,kz,ky,kx] tensor.
TensorPtr psf_to_tensor(const PSF& psf) {
  const Volume3D& k = psf.kernel;
  auto t = nn::make_tensor({1, 1, k.nz(), k.ny(), k.nx()}, false);
  for (std::size_t i = 0; i < k.size(); ++i) t->value[i] = k.data()[i];
  return t;
}

int round_up(int n, int multiple) { return (n + multiple - 1) / multiple * multiple; }

}  // namespace

// ---- UNet3D ----------------------------------------------------------------

UNet3D::UNet3D(const GeneratorConfig& cfg, nn::Rng& rng) : cfg_(cfg) {
  if (cfg.depth < 1 || cfg.base_channels < 1)
    throw TrainingError("UNet3D: depth and base_channels must be >= 1");

  auto block = [&](int ci, int co, const std::string& name, bool normed) {
    ConvBlock b;
    b.w = init_conv_weight({co, ci, 3, 3, 3}, "gen." + name + ".w", rng);
    b.b = zeros_param({co}, "gen." + name + ".b");
    b.normed = normed;
    if (normed) {
      b.gamma = ones_param({co}, "gen." + name + ".gamma");
      b.beta = zeros_param({co}, "gen." + name + ".beta");
      ++norm_count_;
    }
    return b;
  };

  int ch = cfg.in_channels;
  for (int level = 0; level < cfg.depth; ++level) {
    const int c = cfg.base_channels << level;
    enc_.push_back(block(ch, c, "enc" + std::to_string(level) + "a", true));
    enc_.push_back(block(c, c, "enc" + std::to_string(level) + "b", true));
    down_.push_back(block(c, c, "down" + std::to_string(level), true));
    ch = c;
  }
  const int cb = cfg.base_channels << cfg.depth;
  bottleneck_.push_back(block(ch, cb, "bota", true));
  bottleneck_.push_back(block(cb, cb, "botb", true));
  ch = cb;
  for (int level = cfg.depth - 1; level >= 0; --level) {
    const int c = cfg.base_channels << level;
    up_.push_back(block(ch, c, "up" + std::to_string(level), true));
    dec_.push_back(block(2 * c, c, "dec" + std::to_string(level) + "a", true));
    dec_.push_back(block(c, c, "dec" + std::to_string(level) + "b", true));
    ch = c;
  }
  final_ = block(ch, 1, "final", false);
  // Zero-initialized head: with the residual skip the untrained network
  // reproduces the mean of its input views exactly.
  std::fill(final_.w->value.begin(), final_.w->value.end(), 0.0);
}

TensorPtr UNet3D::run_block(const ConvBlock& blk, const TensorPtr& x, int stride, Mode mode,
                            std::size_t norm_index) {
  TensorPtr y = nn::conv3d(x, blk.w, blk.b, stride, 1);
  if (blk.normed) {
    const nn::InstanceNormStats* frozen = nullptr;
    if (mode == Mode::FrozenStats) {
      if (frozen_stats_.size() != norm_count_)
        throw TrainingError("UNet3D: frozen statistics not captured");
      frozen = &frozen_stats_[norm_index];
    }
    if (mode == Mode::CaptureStats) {
      // Record per-channel statistics of this activation.
      const int C = y->shape[0];
      const std::size_t n = y->numel() / C;
      nn::InstanceNormStats s;
      s.mean.resize(C);
      s.var.resize(C);
      for (int c = 0; c < C; ++c) {
        double mu = 0.0;
        for (std::size_t i = 0; i < n; ++i) mu += y->value[c * n + i];
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          const double d = y->value[c * n + i] - mu;
          var += d * d;
        }
        s.mean[c] = mu;
        s.var[c] = var / static_cast<double>(n);
      }
      frozen_stats_.push_back(std::move(s));
    }
    y = nn::instance_norm(y, blk.gamma, blk.beta, 1e-5, frozen);
    y = nn::leaky_relu(y, cfg_.leaky_slope);
  }
  return y;
}

TensorPtr UNet3D::forward(const TensorPtr& x, Mode mode) {
  if (x->shape.size() != 4 || x->shape[0] != cfg_.in_channels)
    throw TrainingError("UNet3D: input must be [in_channels, D, H, W]");
  if (mode == Mode::CaptureStats) frozen_stats_.clear();

  const int D = x->shape[1], H = x->shape[2], W = x->shape[3];
  const int mult = 1 << cfg_.depth;
  TensorPtr h = x;
  const int pd = round_up(D, mult), ph = round_up(H, mult), pw = round_up(W, mult);
  if (pd != D || ph != H || pw != W) h = nn::pad3d_to(h, pd, ph, pw);

  std::size_t ni = 0;
  std::vector<TensorPtr> skips;
  for (int level = 0; level < cfg_.depth; ++level) {
    h = run_block(enc_[2 * level], h, 1, mode, ni++);
    h = run_block(enc_[2 * level + 1], h, 1, mode, ni++);
    skips.push_back(h);
    h = run_block(down_[level], h, 2, mode, ni++);
  }
  h = run_block(bottleneck_[0], h, 1, mode, ni++);
  h = run_block(bottleneck_[1], h, 1, mode, ni++);
  for (int level = cfg_.depth - 1; level >= 0; --level) {
    h = nn::upsample_nearest3d(h, 2);
    h = run_block(up_[cfg_.depth - 1 - level], h, 1, mode, ni++);
    h = nn::concat_channels(skips[level], h);
    h = run_block(dec_[2 * (cfg_.depth - 1 - level)], h, 1, mode, ni++);
    h = run_block(dec_[2 * (cfg_.depth - 1 - level) + 1], h, 1, mode, ni++);
  }
  h = nn::conv3d(h, final_.w, final_.b, 1, 1);
  if (pd != D || ph != H || pw != W) h = nn::crop3d_to(h, D, H, W);

  if (cfg_.residual_skip) {
    // Mean of the input views, via a fixed 1x1x1 mixing kernel.
    auto mix = nn::make_tensor({1, cfg_.in_channels, 1, 1, 1}, false);
    std::fill(mix->value.begin(), mix->value.end(), 1.0 / cfg_.in_channels);
    h = nn::add(h, nn::conv3d(x, mix, nullptr, 1, 0));
  }
  return h;
}

std::vector<TensorPtr> UNet3D::parameters() const {
  std::vector<TensorPtr> out;
  auto push = [&out](const ConvBlock& b) {
    out.push_back(b.w);
    out.push_back(b.b);
    if (b.normed) {
      out.push_back(b.gamma);
      out.push_back(b.beta);
    }
  };
  for (const auto& b : enc_) push(b);
  for (const auto& b : down_) push(b);
  for (const auto& b : bottleneck_) push(b);
  for (const auto& b : up_) push(b);
  for (const auto& b : dec_) push(b);
  push(final_);
  return out;
}

void UNet3D::set_frozen_stats(std::vector<nn::InstanceNormStats> stats) {
  if (!stats.empty() && stats.size() != norm_count_)
    throw TrainingError("UNet3D: frozen stats count mismatch");
  frozen_stats_ = std::move(stats);
}

// ---- DeepLinearGenerator -----------------------------------------------------

DeepLinearGenerator::DeepLinearGenerator(const DlgConfig& cfg, const std::string& name_prefix,
                                         nn::Rng& rng)
    : cfg_(cfg) {
  if (cfg.layer_count < 1 || cfg.kernel_size % 2 == 0)
    throw TrainingError("DLG: layer_count >= 1 and odd kernel_size required");
  const int k = cfg.kernel_size;
  const int center = ((k / 2) * k + k / 2) * k + k / 2;
  for (int layer = 0; layer < cfg.layer_count; ++layer) {
    auto w = nn::make_param({1, 1, k, k, k}, name_prefix + ".layer" + std::to_string(layer));
    for (double& v : w->value) v = cfg.init_noise * rng.uniform(-1.0, 1.0);
    w->value[center] += 1.0;  // delta-plus-noise: near-identity start
    layers_.push_back(w);
  }
}

TensorPtr DeepLinearGenerator::forward(const TensorPtr& x) const {
  TensorPtr h = x;
  const int pad = cfg_.kernel_size / 2;
  for (const auto& w : layers_) h = nn::conv3d(h, w, nullptr, 1, pad);
  return h;
}

std::vector<double> DeepLinearGenerator::effective_kernel(std::vector<int>& shape_out) const {
  const int k = cfg_.kernel_size;
  int n = 1;  // current effective size per axis
  std::vector<double> eff{1.0};
  for (const auto& w : layers_) {
    const int m = n + k - 1;
    std::vector<double> next(static_cast<std::size_t>(m) * m * m, 0.0);
    for (int az = 0; az < n; ++az)
      for (int ay = 0; ay < n; ++ay)
        for (int ax = 0; ax < n; ++ax) {
          const double ev = eff[(static_cast<std::size_t>(az) * n + ay) * n + ax];
          if (ev == 0.0) continue;
          for (int bz = 0; bz < k; ++bz)
            for (int by = 0; by < k; ++by)
              for (int bx = 0; bx < k; ++bx)
                next[(static_cast<std::size_t>(az + bz) * m + ay + by) * m + ax + bx] +=
                    ev * w->value[(static_cast<std::size_t>(bz) * k + by) * k + bx];
        }
    eff = std::move(next);
    n = m;
  }
  shape_out = {n, n, n};
  return eff;
}

// ---- DegradationPath ---------------------------------------------------------

DegradationPath::DegradationPath(std::optional<PSF> psf, DlgConfig dlg_cfg,
                                 const std::string& name_prefix, nn::Rng& rng)
    : dlg_(dlg_cfg, name_prefix + ".dlg", rng) {
  if (psf) {
    psf->validate();
    psf_kernel_ = psf_to_tensor(*psf);
    psf_pad_[0] = psf->kernel.nz() / 2;
    psf_pad_[1] = psf->kernel.ny() / 2;
    psf_pad_[2] = psf->kernel.nx() / 2;
  }
}

TensorPtr DegradationPath::degrade(const TensorPtr& recon) const {
  TensorPtr h = recon;
  if (psf_kernel_)
    h = nn::conv3d(h, psf_kernel_, nullptr, 1, psf_pad_[0], psf_pad_[1], psf_pad_[2]);
  return dlg_.forward(h);
}

// ---- SliceDiscriminator -------------------------------------------------------

SliceDiscriminator::SliceDiscriminator(const DiscriminatorConfig& cfg,
                                       const std::string& name_prefix, nn::Rng& rng)
    : cfg_(cfg) {
  if (cfg.layer_count < 1) throw TrainingError("discriminator: layer_count must be >= 1");
  int ci = 1;
  for (int i = 0; i < cfg.layer_count; ++i) {
    const int co = std::min(cfg.base_channels << i, cfg.base_channels * 8);
    Layer layer;
    layer.w = init_conv_weight({co, ci, 4, 4}, name_prefix + ".l" + std::to_string(i) + ".w",
                               rng);
    layer.b = zeros_param({co}, name_prefix + ".l" + std::to_string(i) + ".b");
    layer.stride = (i == cfg.layer_count - 1 && cfg.layer_count > 1) ? 1 : 2;
    layer.normed = i > 0;
    if (layer.normed) {
      layer.gamma = ones_param({co}, name_prefix + ".l" + std::to_string(i) + ".gamma");
      layer.beta = zeros_param({co}, name_prefix + ".l" + std::to_string(i) + ".beta");
    }
    layers_.push_back(layer);
    ci = co;
  }
  head_.w = init_conv_weight({1, ci, 4, 4}, name_prefix + ".head.w", rng);
  head_.b = zeros_param({1}, name_prefix + ".head.b");
  head_.normed = false;
  head_.stride = 1;
}

TensorPtr SliceDiscriminator::score(const TensorPtr& slice) const {
  if (slice->shape.size() != 3 || slice->shape[0] != 1)
    throw TrainingError("discriminator: expected [1, H, W] slice");
  TensorPtr h = slice;
  for (const auto& layer : layers_) {
    h = nn::conv2d(h, layer.w, layer.b, layer.stride, 1);
    if (layer.normed) h = nn::instance_norm(h, layer.gamma, layer.beta);
    h = nn::leaky_relu(h, cfg_.leaky_slope);
  }
  return nn::conv2d(h, head_.w, head_.b, 1, 1);
}

std::vector<TensorPtr> SliceDiscriminator::parameters() const {
  std::vector<TensorPtr> out;
  for (const auto& layer : layers_) {
    out.push_back(layer.w);
    out.push_back(layer.b);
    if (layer.normed) {
      out.push_back(layer.gamma);
      out.push_back(layer.beta);
    }
  }
  out.push_back(head_.w);
  out.push_back(head_.b);
  return out;
}

// ---- DualCycleModel ------------------------------------------------------------

DualCycleModel::DualCycleModel(const TrainConfig& cfg, const std::optional<PSF>& psf_a,
                               const std::optional<PSF>& psf_b)
    : cfg_(cfg),
      opt_gen_(cfg.learning_rate),
      opt_disc_(cfg.learning_rate) {
  if (cfg.blind && (psf_a || psf_b))
    throw TrainingError("blind mode excludes fixed PSFs");
  if (!cfg.blind && (!psf_a || !psf_b))
    throw TrainingError("non-blind mode requires both PSFs");

  init_rng_ = std::make_unique<nn::Rng>(cfg.seed);
  gen_ = std::make_unique<UNet3D>(cfg.generator, *init_rng_);
  path_a_ = std::make_unique<DegradationPath>(cfg.blind ? std::nullopt : psf_a, cfg.dlg,
                                              "dlg_a", *init_rng_);
  path_b_ = std::make_unique<DegradationPath>(cfg.blind ? std::nullopt : psf_b, cfg.dlg,
                                              "dlg_b", *init_rng_);
  for (const char* name : {"disc_a1", "disc_b1", "disc_a2", "disc_b2"})
    discs_.push_back(
        std::make_unique<SliceDiscriminator>(cfg.discriminator, name, *init_rng_));

  if (!cfg.blind) {
    cycle_margin_a_ = psf_a->kernel.nz() / 2;
    cycle_margin_b_ = psf_b->kernel.nx() / 2;
  }
}

std::vector<TensorPtr> DualCycleModel::generator_parameters() const {
  auto out = gen_->parameters();
  for (const auto& p : path_a_->parameters()) out.push_back(p);
  for (const auto& p : path_b_->parameters()) out.push_back(p);
  return out;
}

std::vector<TensorPtr> DualCycleModel::discriminator_parameters() const {
  std::vector<TensorPtr> out;
  for (const auto& d : discs_)
    for (const auto& p : d->parameters()) out.push_back(p);
  return out;
}

std::vector<TensorPtr> DualCycleModel::all_parameters() const {
  auto out = generator_parameters();
  for (const auto& p : discriminator_parameters()) out.push_back(p);
  return out;
}

namespace {

// Interior crop along one axis: keeps slices [margin, dim - margin).
TensorPtr crop_axis(const TensorPtr& t, int axis, int margin) {
  if (margin <= 0) return t;
  int d = t->shape[1], h = t->shape[2], w = t->shape[3];
  if (axis == 0) d -= 2 * margin;
  if (axis == 1) h -= 2 * margin;
  if (axis == 2) w -= 2 * margin;
  if (d < 1 || h < 1 || w < 1) throw TrainingError("cycle margin larger than volume");
  return nn::crop3d_to(t, d, h, w);
}

TensorPtr mean_adv_loss(const SliceDiscriminator& disc,
                        const std::vector<TensorPtr>& slices, double target) {
  std::vector<TensorPtr> terms;
  terms.reserve(slices.size());
  for (const auto& s : slices) terms.push_back(nn::mse_to_constant(disc.score(s), target));
  return nn::add_weighted(terms, std::vector<double>(terms.size(), 1.0 / terms.size()));
}

std::vector<TensorPtr> sample_slices(const TensorPtr& vol, int plane, int count,
                                     nn::Rng& rng) {
  const int bound = plane == 0 ? vol->shape[1] : (plane == 1 ? vol->shape[2] : vol->shape[3]);
  std::vector<TensorPtr> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i)
    out.push_back(nn::slice_plane(vol, plane, rng.uniform_int(0, bound - 1)));
  return out;
}

constexpr int kPlaneXY = 0;
constexpr int kPlaneXZ = 1;
constexpr int kPlaneYZ = 2;

}  // namespace

TensorPtr DualCycleModel::loss_graph(const TensorPtr& in_a, const TensorPtr& in_b,
                                     int slices_per_plane, std::uint64_t slice_seed,
                                     DualCycleLossTerms* terms_out) const {
  if (in_a->shape != in_b->shape) throw TrainingError("loss_graph: view shape mismatch");
  nn::Rng srng(slice_seed);

  TensorPtr x = nn::concat_channels(in_a, in_b);
  TensorPtr recon = gen_->forward(x, UNet3D::Mode::Train);

  const int ma = std::min(cycle_margin_a_, (in_a->shape[1] - 4) / 2);
  const int mb = std::min(cycle_margin_b_, (in_a->shape[3] - 4) / 2);
  TensorPtr regen_a = crop_axis(path_a_->degrade(recon), 0, ma);
  TensorPtr regen_b = crop_axis(path_b_->degrade(recon), 2, mb);
  TensorPtr target_a = crop_axis(in_a, 0, ma);
  TensorPtr target_b = crop_axis(in_b, 2, mb);

  TensorPtr cyc_a = nn::l1_loss(regen_a, target_a);
  TensorPtr cyc_b = nn::l1_loss(regen_b, target_b);

  // Isotropy discriminators: the reconstruction's xz planes must be
  // indistinguishable from each view's sharp plane.
  std::vector<TensorPtr> fake_a1 = sample_slices(recon, kPlaneXY, slices_per_plane, srng);
  for (auto& s : sample_slices(recon, kPlaneXZ, slices_per_plane, srng))
    fake_a1.push_back(s);
  TensorPtr adv_a1 = mean_adv_loss(*discs_[0], fake_a1, 1.0);

  std::vector<TensorPtr> fake_b1 = sample_slices(recon, kPlaneYZ, slices_per_plane, srng);
  for (auto& s : sample_slices(recon, kPlaneXZ, slices_per_plane, srng))
    fake_b1.push_back(s);
  TensorPtr adv_b1 = mean_adv_loss(*discs_[1], fake_b1, 1.0);

  TensorPtr adv_a2 = mean_adv_loss(
      *discs_[2], sample_slices(regen_a, kPlaneXY, slices_per_plane, srng), 1.0);
  TensorPtr adv_b2 = mean_adv_loss(
      *discs_[3], sample_slices(regen_b, kPlaneYZ, slices_per_plane, srng), 1.0);

  const double lambda = cfg_.lambda_cycle;
  TensorPtr total;
  DualCycleLossTerms terms;
  terms.lambda_cycle = lambda;
  if (cfg_.single_view) {
    total = nn::add_weighted({adv_a1, adv_a2, cyc_a}, {1.0, 1.0, lambda});
    terms.adv_iso_a1 = adv_a1->value[0];
    terms.adv_view_a2 = adv_a2->value[0];
    terms.cycle_l1_a = cyc_a->value[0];
  } else {
    total = nn::add_weighted({adv_a1, adv_b1, adv_a2, adv_b2, cyc_a, cyc_b},
                             {1.0, 1.0, 1.0, 1.0, lambda, lambda});
    terms.adv_iso_a1 = adv_a1->value[0];
    terms.adv_iso_b1 = adv_b1->value[0];
    terms.adv_view_a2 = adv_a2->value[0];
    terms.adv_view_b2 = adv_b2->value[0];
    terms.cycle_l1_a = cyc_a->value[0];
    terms.cycle_l1_b = cyc_b->value[0];
  }

  auto check = [](double v, const char* component) {
    if (!std::isfinite(v))
      throw TrainingError(std::string("non-finite loss term in ") + component);
  };
  check(terms.adv_iso_a1, "adv_iso_a1");
  check(terms.adv_iso_b1, "adv_iso_b1");
  check(terms.adv_view_a2, "adv_view_a2");
  check(terms.adv_view_b2, "adv_view_b2");
  check(terms.cycle_l1_a, "cycle_l1_a");
  check(terms.cycle_l1_b, "cycle_l1_b");
  if (terms_out) *terms_out = terms;
  return total;
}

namespace {

TensorPtr volume_patch_tensor(const Volume3D& v, int z0, int y0, int x0, int size) {
  auto t = nn::make_tensor({1, size, size, size}, false);
  for (int z = 0; z < size; ++z)
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x)
        t->value[(static_cast<std::size_t>(z) * size + y) * size + x] =
            v.at(z0 + z, y0 + y, x0 + x);
  return t;
}

}  // namespace

std::vector<TrainHistoryEntry> DualCycleModel::train(const ViewPair& views) {
  const Volume3D& va = views.view_a;
  const Volume3D& vb = cfg_.single_view ? views.view_a : views.view_b;
  if (va.nz() != vb.nz() || va.ny() != vb.ny() || va.nx() != vb.nx())
    throw TrainingError("train: view dimensions differ");

  if (!cfg_.warm_start_path.empty()) load_checkpoint(cfg_.warm_start_path);

  const int patch = std::min({cfg_.patch_size, va.nz(), va.ny(), va.nx()});
  nn::Rng rng(cfg_.seed ^ 0xd1b54a32d192ed03ULL);

  const auto gen_params = generator_parameters();
  const auto disc_params = discriminator_parameters();

  std::vector<TrainHistoryEntry> history;
  history.reserve(cfg_.steps);

  for (int step = 0; step < cfg_.steps; ++step) {
    const int z0 = rng.uniform_int(0, va.nz() - patch);
    const int y0 = rng.uniform_int(0, va.ny() - patch);
    const int x0 = rng.uniform_int(0, va.nx() - patch);
    TensorPtr in_a = volume_patch_tensor(va, z0, y0, x0, patch);
    TensorPtr in_b = volume_patch_tensor(vb, z0, y0, x0, patch);
    const std::uint64_t slice_seed = rng.next_seed();

    // Generator step.
    DualCycleLossTerms terms;
    opt_gen_.zero_grad(gen_params);
    TensorPtr g_loss = loss_graph(in_a, in_b, cfg_.slices_per_plane, slice_seed, &terms);
    nn::backward(g_loss);
    opt_gen_.step(gen_params);

    // Discriminator step on detached reconstructions.
    opt_disc_.zero_grad(disc_params);
    TensorPtr x = nn::concat_channels(in_a, in_b);
    TensorPtr recon = nn::detach(gen_->forward(x, UNet3D::Mode::Train));
    const int ma = std::min(cycle_margin_a_, (patch - 4) / 2);
    const int mb = std::min(cycle_margin_b_, (patch - 4) / 2);
    TensorPtr regen_a = nn::detach(crop_axis(path_a_->degrade(recon), 0, ma));
    TensorPtr regen_b = nn::detach(crop_axis(path_b_->degrade(recon), 2, mb));

    nn::Rng drng(slice_seed ^ 0x2545f4914f6cdd1dULL);
    const int n = cfg_.slices_per_plane;
    std::vector<TensorPtr> d_losses;

    {  // A1
      auto real = sample_slices(in_a, kPlaneXY, n, drng);
      auto fake = sample_slices(recon, kPlaneXY, n, drng);
      for (auto& s : sample_slices(recon, kPlaneXZ, n, drng)) fake.push_back(s);
      d_losses.push_back(nn::add_weighted(
          {mean_adv_loss(*discs_[0], real, 1.0), mean_adv_loss(*discs_[0], fake, 0.0)},
          {0.5, 0.5}));
    }
    if (!cfg_.single_view) {  // B1
      auto real = sample_slices(in_b, kPlaneYZ, n, drng);
      auto fake = sample_slices(recon, kPlaneYZ, n, drng);
      for (auto& s : sample_slices(recon, kPlaneXZ, n, drng)) fake.push_back(s);
      d_losses.push_back(nn::add_weighted(
          {mean_adv_loss(*discs_[1], real, 1.0), mean_adv_loss(*discs_[1], fake, 0.0)},
          {0.5, 0.5}));
    }
    {  // A2
      auto real = sample_slices(in_a, kPlaneXY, n, drng);
      auto fake = sample_slices(regen_a, kPlaneXY, n, drng);
      d_losses.push_back(nn::add_weighted(
          {mean_adv_loss(*discs_[2], real, 1.0), mean_adv_loss(*discs_[2], fake, 0.0)},
          {0.5, 0.5}));
    }
    if (!cfg_.single_view) {  // B2
      auto real = sample_slices(in_b, kPlaneYZ, n, drng);
      auto fake = sample_slices(regen_b, kPlaneYZ, n, drng);
      d_losses.push_back(nn::add_weighted(
          {mean_adv_loss(*discs_[3], real, 1.0), mean_adv_loss(*discs_[3], fake, 0.0)},
          {0.5, 0.5}));
    }
    TensorPtr d_loss = nn::add_weighted(
        d_losses, std::vector<double>(d_losses.size(), 1.0 / d_losses.size()));
    nn::backward(d_loss);
    opt_disc_.step(disc_params);

    if (!std::isfinite(d_loss->value[0]))
      throw TrainingError("non-finite discriminator loss at step " + std::to_string(step));

    history.push_back(TrainHistoryEntry{step, terms, d_loss->value[0]});
  }

  // Freeze instance-norm statistics on the full training volume so
  // inference behaves as a local operator (tiling-safe).
  if (cfg_.steps > 0) {
    TensorPtr full = nn::concat_channels(volume_to_tensor(va), volume_to_tensor(vb));
    gen_->forward(full, UNet3D::Mode::CaptureStats);
  }
  return history;
}

Volume3D DualCycleModel::reconstruct(const ViewPair& views) const {
  const Volume3D& va = views.view_a;
  const Volume3D& vb = cfg_.single_view ? views.view_a : views.view_b;
  TensorPtr x = nn::concat_channels(volume_to_tensor(va), volume_to_tensor(vb));
  const auto mode =
      gen_->has_frozen_stats() ? UNet3D::Mode::FrozenStats : UNet3D::Mode::Train;
  TensorPtr out = gen_->forward(x, mode);
  return tensor_to_volume(out, va.spacing());
}

Volume3D DualCycleModel::reconstruct_tiled(const ViewPair& views, int tile,
                                           int overlap) const {
  const Volume3D& va = views.view_a;
  const Volume3D& vb = cfg_.single_view ? views.view_a : views.view_b;
  const int mult = 1 << cfg_.generator.depth;
  if (tile < mult || tile <= 2 * overlap)
    throw TrainingError("tile must exceed twice the overlap and the downsampling factor");
  if (!gen_->has_frozen_stats())
    throw TrainingError("tiled inference requires frozen normalization statistics");

  Volume3D out(va.nz(), va.ny(), va.nx(), 0.0f, va.spacing());
  const int dims[3] = {va.nz(), va.ny(), va.nx()};
  const int step = tile - 2 * overlap;

  for (int z0 = 0; z0 < dims[0]; z0 += step)
    for (int y0 = 0; y0 < dims[1]; y0 += step)
      for (int x0 = 0; x0 < dims[2]; x0 += step) {
        const int bz = std::min(step, dims[0] - z0);
        const int by = std::min(step, dims[1] - y0);
        const int bx = std::min(step, dims[2] - x0);
        const int wz0 = std::max(0, z0 - overlap), wz1 = std::min(dims[0], z0 + bz + overlap);
        const int wy0 = std::max(0, y0 - overlap), wy1 = std::min(dims[1], y0 + by + overlap);
        const int wx0 = std::max(0, x0 - overlap), wx1 = std::min(dims[2], x0 + bx + overlap);

        auto window = [&](const Volume3D& v) {
          auto t = nn::make_tensor({1, wz1 - wz0, wy1 - wy0, wx1 - wx0}, false);
          std::size_t i = 0;
          for (int z = wz0; z < wz1; ++z)
            for (int y = wy0; y < wy1; ++y)
              for (int x = wx0; x < wx1; ++x) t->value[i++] = v.at(z, y, x);
          return t;
        };
        TensorPtr x = nn::concat_channels(window(va), window(vb));
        TensorPtr rec = gen_->forward(x, UNet3D::Mode::FrozenStats);
        const int oh = wy1 - wy0, ow = wx1 - wx0;
        for (int z = 0; z < bz; ++z)
          for (int y = 0; y < by; ++y)
            for (int x2 = 0; x2 < bx; ++x2)
              out.at(z0 + z, y0 + y, x0 + x2) = static_cast<float>(
                  rec->value[(static_cast<std::size_t>(z0 + z - wz0) * oh + (y0 + y - wy0)) *
                                 ow +
                             (x0 + x2 - wx0)]);
      }
  return out;
}

// ---- checkpointing -------------------------------------------------------------

std::string train_config_to_json_string(const TrainConfig& cfg) {
  json j;
  j["steps"] = cfg.steps;
  j["learning_rate"] = cfg.learning_rate;
  j["lambda_cycle"] = cfg.lambda_cycle;
  j["patch_size"] = cfg.patch_size;
  j["slices_per_plane"] = cfg.slices_per_plane;
  j["seed"] = cfg.seed;
  j["generator"] = {{"depth", cfg.generator.depth},
                    {"base_channels", cfg.generator.base_channels},
                    {"in_channels", cfg.generator.in_channels},
                    {"leaky_slope", cfg.generator.leaky_slope},
                    {"residual_skip", cfg.generator.residual_skip}};
  j["dlg"] = {{"layer_count", cfg.dlg.layer_count},
              {"kernel_size", cfg.dlg.kernel_size},
              {"init_noise", cfg.dlg.init_noise}};
  j["discriminator"] = {{"layer_count", cfg.discriminator.layer_count},
                        {"base_channels", cfg.discriminator.base_channels},
                        {"leaky_slope", cfg.discriminator.leaky_slope}};
  j["blind"] = cfg.blind;
  j["single_view"] = cfg.single_view;
  j["checkpoint_every"] = cfg.checkpoint_every;
  j["warm_start_path"] = cfg.warm_start_path;
  return j.dump();
}

TrainConfig train_config_from_json_string(const std::string& s) {
  json j = json::parse(s);
  TrainConfig cfg;
  cfg.steps = j.value("steps", cfg.steps);
  cfg.learning_rate = j.value("learning_rate", cfg.learning_rate);
  cfg.lambda_cycle = j.value("lambda_cycle", cfg.lambda_cycle);
  cfg.patch_size = j.value("patch_size", cfg.patch_size);
  cfg.slices_per_plane = j.value("slices_per_plane", cfg.slices_per_plane);
  cfg.seed = j.value("seed", cfg.seed);
  if (j.contains("generator")) {
    const auto& g = j["generator"];
    cfg.generator.depth = g.value("depth", cfg.generator.depth);
    cfg.generator.base_channels = g.value("base_channels", cfg.generator.base_channels);
    cfg.generator.in_channels = g.value("in_channels", cfg.generator.in_channels);
    cfg.generator.leaky_slope = g.value("leaky_slope", cfg.generator.leaky_slope);
    cfg.generator.residual_skip = g.value("residual_skip", cfg.generator.residual_skip);
  }
  if (j.contains("dlg")) {
    const auto& d = j["dlg"];
    cfg.dlg.layer_count = d.value("layer_count", cfg.dlg.layer_count);
    cfg.dlg.kernel_size = d.value("kernel_size", cfg.dlg.kernel_size);
    cfg.dlg.init_noise = d.value("init_noise", cfg.dlg.init_noise);
  }
  if (j.contains("discriminator")) {
    const auto& d = j["discriminator"];
    cfg.discriminator.layer_count = d.value("layer_count", cfg.discriminator.layer_count);
    cfg.discriminator.base_channels =
        d.value("base_channels", cfg.discriminator.base_channels);
    cfg.discriminator.leaky_slope = d.value("leaky_slope", cfg.discriminator.leaky_slope);
  }
  cfg.blind = j.value("blind", cfg.blind);
  cfg.single_view = j.value("single_view", cfg.single_view);
  cfg.checkpoint_every = j.value("checkpoint_every", cfg.checkpoint_every);
  cfg.warm_start_path = j.value("warm_start_path", cfg.warm_start_path);
  return cfg;
}

namespace {

constexpr char kCkptMagic[8] = {'D', 'C', 'C', 'K', 'P', 'T', '1', '\0'};

void append_doubles(std::vector<double>& payload, json& entries, const std::string& name,
                    const std::string& kind, const std::vector<int>& shape,
                    const std::vector<double>& data) {
  json e;
  e["name"] = name;
  e["kind"] = kind;
  e["shape"] = shape;
  e["offset"] = payload.size();
  e["count"] = data.size();
  entries.push_back(e);
  payload.insert(payload.end(), data.begin(), data.end());
}

}  // namespace

void DualCycleModel::save_checkpoint(const std::string& path, int step) const {
  json header;
  header["format"] = "dual-cycle-checkpoint";
  header["version"] = 1;
  header["step"] = step;
  header["config"] = json::parse(train_config_to_json_string(cfg_));
  json entries = json::array();
  std::vector<double> payload;

  for (const auto& p : all_parameters())
    append_doubles(payload, entries, p->name, "param", p->shape, p->value);

  for (const auto& [opt, tag] :
       {std::pair<const nn::Adam*, const char*>{&opt_gen_, "adam_gen"},
        std::pair<const nn::Adam*, const char*>{&opt_disc_, "adam_disc"}}) {
    for (const auto& p : all_parameters()) {
      const nn::Adam::State* s = opt->state_for(p->name);
      if (!s) continue;
      append_doubles(payload, entries, p->name, std::string(tag) + "_m", p->shape, s->m);
      append_doubles(payload, entries, p->name, std::string(tag) + "_v", p->shape, s->v);
      json e;
      e["name"] = p->name;
      e["kind"] = std::string(tag) + "_t";
      e["t"] = s->t;
      entries.push_back(e);
    }
  }

  const auto& stats = gen_->frozen_stats();
  for (std::size_t i = 0; i < stats.size(); ++i) {
    const std::string name = "in_stats" + std::to_string(i);
    append_doubles(payload, entries, name, "in_mean",
                   {static_cast<int>(stats[i].mean.size())}, stats[i].mean);
    append_doubles(payload, entries, name, "in_var",
                   {static_cast<int>(stats[i].var.size())}, stats[i].var);
  }

  if (!cfg_.blind) {
    for (const auto& [pathp, tag] :
         {std::pair<const DegradationPath*, const char*>{path_a_.get(), "psf_a"},
          std::pair<const DegradationPath*, const char*>{path_b_.get(), "psf_b"}}) {
      const auto& k = pathp->frozen_psf_kernel();
      append_doubles(payload, entries, tag, "frozen_psf", k->shape, k->value);
    }
  }

  header["entries"] = entries;
  const std::string hs = header.dump();

  std::ofstream os(path, std::ios::binary);
  if (!os) throw TrainingError("cannot open checkpoint for writing: " + path);
  os.write(kCkptMagic, 8);
  const std::uint32_t hlen = static_cast<std::uint32_t>(hs.size());
  unsigned char lb[4] = {static_cast<unsigned char>(hlen & 0xff),
                         static_cast<unsigned char>((hlen >> 8) & 0xff),
                         static_cast<unsigned char>((hlen >> 16) & 0xff),
                         static_cast<unsigned char>((hlen >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(lb), 4);
  os.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  os.write(reinterpret_cast<const char*>(payload.data()),
           static_cast<std::streamsize>(payload.size() * sizeof(double)));
  if (!os) throw TrainingError("checkpoint write failed: " + path);
}

int DualCycleModel::load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw TrainingError("cannot open checkpoint: " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kCkptMagic, 8) != 0)
    throw TrainingError("not a dual-cycle checkpoint: " + path);
  unsigned char lb[4];
  is.read(reinterpret_cast<char*>(lb), 4);
  const std::uint32_t hlen = static_cast<std::uint32_t>(lb[0]) | (lb[1] << 8) |
                             (lb[2] << 16) | (static_cast<std::uint32_t>(lb[3]) << 24);
  std::string hs(hlen, '\0');
  is.read(hs.data(), hlen);
  if (!is) throw TrainingError("truncated checkpoint header");
  json header = json::parse(hs);

  std::vector<double> payload;
  {
    std::vector<char> raw((std::istreambuf_iterator<char>(is)),
                          std::istreambuf_iterator<char>());
    payload.resize(raw.size() / sizeof(double));
    std::memcpy(payload.data(), raw.data(), payload.size() * sizeof(double));
  }

  std::map<std::string, TensorPtr> by_name;
  for (const auto& p : all_parameters()) by_name[p->name] = p;

  // Architecture check with a shape diff before mutating anything.
  std::ostringstream diff;
  std::map<std::string, std::vector<int>> file_params;
  for (const auto& e : header["entries"]) {
    if (e["kind"] != "param") continue;
    file_params[e["name"].get<std::string>()] = e["shape"].get<std::vector<int>>();
  }
  for (const auto& [name, p] : by_name) {
    auto it = file_params.find(name);
    if (it == file_params.end())
      diff << "  missing in checkpoint: " << name << "\n";
    else if (it->second != p->shape) {
      diff << "  shape mismatch for " << name << ": model [";
      for (int d : p->shape) diff << d << " ";
      diff << "] vs checkpoint [";
      for (int d : it->second) diff << d << " ";
      diff << "]\n";
    }
  }
  for (const auto& [name, shape] : file_params)
    if (!by_name.count(name)) diff << "  extra in checkpoint: " << name << "\n";
  if (!diff.str().empty())
    throw TrainingError("checkpoint architecture mismatch:\n" + diff.str());

  std::vector<nn::InstanceNormStats> stats;
  for (const auto& e : header["entries"]) {
    const std::string kind = e["kind"];
    const std::string name = e["name"];
    if (kind.ends_with("_t")) {
      continue;  // handled with the moment arrays below
    }
    const std::size_t off = e["offset"].get<std::size_t>();
    const std::size_t count = e["count"].get<std::size_t>();
    if (off + count > payload.size()) throw TrainingError("checkpoint payload truncated");
    std::vector<double> data(payload.begin() + off, payload.begin() + off + count);

    if (kind == "param") {
      by_name[name]->value = std::move(data);
    } else if (kind == "adam_gen_m" || kind == "adam_disc_m") {
      nn::Adam& opt = kind == "adam_gen_m" ? opt_gen_ : opt_disc_;
      nn::Adam::State s;
      if (const auto* prev = opt.state_for(name)) s = *prev;
      s.m = std::move(data);
      opt.restore_state(name, std::move(s));
    } else if (kind == "adam_gen_v" || kind == "adam_disc_v") {
      nn::Adam& opt = kind == "adam_gen_v" ? opt_gen_ : opt_disc_;
      nn::Adam::State s;
      if (const auto* prev = opt.state_for(name)) s = *prev;
      s.v = std::move(data);
      opt.restore_state(name, std::move(s));
    } else if (kind == "in_mean" || kind == "in_var") {
      const std::size_t idx = std::stoul(name.substr(8));
      if (stats.size() <= idx) stats.resize(idx + 1);
      (kind == "in_mean" ? stats[idx].mean : stats[idx].var) = std::move(data);
    } else if (kind == "frozen_psf") {
      const auto& k = name == "psf_a" ? path_a_->frozen_psf_kernel()
                                      : path_b_->frozen_psf_kernel();
      if (!k || k->shape != e["shape"].get<std::vector<int>>())
        throw TrainingError("checkpoint PSF does not match model PSF shape");
      k->value = std::move(data);
    }
  }
  for (const auto& e : header["entries"]) {
    const std::string kind = e["kind"].get<std::string>();
    if (!kind.ends_with("_t")) continue;
    nn::Adam& opt = kind.starts_with("adam_gen") ? opt_gen_ : opt_disc_;
    const std::string name = e["name"];
    nn::Adam::State s;
    if (const auto* prev = opt.state_for(name)) s = *prev;
    s.t = e["t"].get<std::int64_t>();
    opt.restore_state(name, std::move(s));
  }
  if (!stats.empty()) gen_->set_frozen_stats(std::move(stats));

  return header["step"].get<int>();
}

}  // namespace dualcycle
