#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace dualcycle::nn {

struct NnError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

// Node of the autodiff tape. shape[0] is the channel dimension for
// feature maps; remaining dimensions are spatial (2 or 3 of them).
// All math is double precision.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::string name;  // nonempty for parameters

  std::vector<TensorPtr> parents;
  std::function<void(Tensor&)> backward_fn;

  std::size_t numel() const {
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    return n;
  }
  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

TensorPtr make_tensor(std::vector<int> shape, bool requires_grad = false);
TensorPtr make_param(std::vector<int> shape, const std::string& name);
TensorPtr constant_like(const TensorPtr& t, double v);

// Leaf copy of the values; gradients do not flow past it.
TensorPtr detach(const TensorPtr& t);

// Reverse-mode sweep from a scalar root (numel == 1).
void backward(const TensorPtr& root);

// Deterministic RNG used by all stochastic pieces of the network.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  double uniform(double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(engine_);
  }
  double normal(double mean, double stddev) {
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }
  int uniform_int(int lo, int hi) {
    return std::uniform_int_distribution<int>(lo, hi)(engine_);
  }
  std::uint64_t next_seed() { return engine_(); }

 private:
  std::mt19937_64 engine_;
};

// ---- ops ---------------------------------------------------------------

// x: [Ci, D, H, W]; w: [Co, Ci, kd, kh, kw]; b: [Co] or null.
TensorPtr conv3d(const TensorPtr& x, const TensorPtr& w, const TensorPtr& b, int stride,
                 int pad);
TensorPtr conv3d(const TensorPtr& x, const TensorPtr& w, const TensorPtr& b, int stride,
                 int pad_d, int pad_h, int pad_w);
// x: [Ci, H, W]; w: [Co, Ci, kh, kw]; b: [Co] or null.
TensorPtr conv2d(const TensorPtr& x, const TensorPtr& w, const TensorPtr& b, int stride,
                 int pad);

TensorPtr upsample_nearest3d(const TensorPtr& x, int factor);
TensorPtr concat_channels(const TensorPtr& a, const TensorPtr& b);
TensorPtr leaky_relu(const TensorPtr& x, double slope);
TensorPtr add(const TensorPtr& a, const TensorPtr& b);
TensorPtr scale(const TensorPtr& x, double s);

// Per-channel normalization over spatial positions. When frozen stats
// are supplied the op becomes a fixed per-channel affine map.
struct InstanceNormStats {
  std::vector<double> mean, var;
};
TensorPtr instance_norm(const TensorPtr& x, const TensorPtr& gamma, const TensorPtr& beta,
                        double eps = 1e-5, const InstanceNormStats* frozen = nullptr);

// Symmetric zero padding / centered crop of the three spatial dims of
// a [C, D, H, W] tensor to the requested spatial sizes.
TensorPtr pad3d_to(const TensorPtr& x, int d, int h, int w);
TensorPtr crop3d_to(const TensorPtr& x, int d, int h, int w);

// Extract a 2D slice from [C, D, H, W]: plane 0 = xy (fix D index),
// 1 = xz (fix H index), 2 = yz (fix W index).
TensorPtr slice_plane(const TensorPtr& x, int plane, int index);

TensorPtr l1_loss(const TensorPtr& a, const TensorPtr& b);        // scalar
TensorPtr mse_to_constant(const TensorPtr& x, double target);     // scalar
TensorPtr add_weighted(const std::vector<TensorPtr>& scalars,
                       const std::vector<double>& weights);       // scalar

// ---- optimizer ----------------------------------------------------------

class Adam {
 public:
  Adam(double lr = 1e-4, double beta1 = 0.5, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(const std::vector<TensorPtr>& params);
  void zero_grad(const std::vector<TensorPtr>& params);

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }

  // Serialized moment access for checkpoints (keyed by parameter name).
  struct State {
    std::int64_t t = 0;
    std::vector<double> m, v;
  };
  const State* state_for(const std::string& name) const;
  void restore_state(const std::string& name, State s);

 private:
  double lr_, beta1_, beta2_, eps_;
  std::unordered_map<std::string, State> states_;
};

}  // namespace dualcycle::nn
