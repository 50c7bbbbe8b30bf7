#include <algorithm>
#include <cmath>

#include "dualcycle/nn/tensor.hpp"

namespace dualcycle::nn {

namespace {

void check_rank(const TensorPtr& t, std::size_t rank, const char* op) {
  if (t->shape.size() != rank) throw NnError(std::string(op) + ": unexpected tensor rank");
}

int conv_out_dim(int in, int k, int stride, int pad) {
  const int n = (in + 2 * pad - k) / stride + 1;
  if (n < 1) throw NnError("convolution output dimension would be empty");
  return n;
}

}  // namespace

TensorPtr conv3d(const TensorPtr& x, const TensorPtr& w, const TensorPtr& b, int stride,
                 int pad) {
  return conv3d(x, w, b, stride, pad, pad, pad);
}

TensorPtr conv3d(const TensorPtr& x, const TensorPtr& w, const TensorPtr& b, int stride,
                 int pad_d, int pad_h, int pad_w) {
  check_rank(x, 4, "conv3d");
  check_rank(w, 5, "conv3d");
  const int ci = x->shape[0], D = x->shape[1], H = x->shape[2], W = x->shape[3];
  const int co = w->shape[0], kd = w->shape[2], kh = w->shape[3], kw = w->shape[4];
  if (w->shape[1] != ci) throw NnError("conv3d: channel mismatch");
  if (b && (b->shape.size() != 1 || b->shape[0] != co))
    throw NnError("conv3d: bias shape mismatch");

  const int od = conv_out_dim(D, kd, stride, pad_d);
  const int oh = conv_out_dim(H, kh, stride, pad_h);
  const int ow = conv_out_dim(W, kw, stride, pad_w);

  auto out = make_tensor({co, od, oh, ow}, true);
  const double* xv = x->value.data();
  const double* wv = w->value.data();
  double* ov = out->value.data();

  const std::size_t x_c = static_cast<std::size_t>(D) * H * W;
  const std::size_t w_co = static_cast<std::size_t>(ci) * kd * kh * kw;

#pragma omp parallel for collapse(2)
  for (int c = 0; c < co; ++c)
    for (int zd = 0; zd < od; ++zd)
      for (int zh = 0; zh < oh; ++zh)
        for (int zw = 0; zw < ow; ++zw) {
          double acc = b ? b->value[c] : 0.0;
          for (int ic = 0; ic < ci; ++ic) {
            const double* xc = xv + ic * x_c;
            const double* wc = wv + c * w_co + static_cast<std::size_t>(ic) * kd * kh * kw;
            for (int a = 0; a < kd; ++a) {
              const int sd = zd * stride + a - pad_d;
              if (sd < 0 || sd >= D) continue;
              for (int e = 0; e < kh; ++e) {
                const int sh = zh * stride + e - pad_h;
                if (sh < 0 || sh >= H) continue;
                const double* xrow = xc + (static_cast<std::size_t>(sd) * H + sh) * W;
                const double* wrow = wc + (static_cast<std::size_t>(a) * kh + e) * kw;
                for (int f = 0; f < kw; ++f) {
                  const int sw = zw * stride + f - pad_w;
                  if (sw < 0 || sw >= W) continue;
                  acc += wrow[f] * xrow[sw];
                }
              }
            }
          }
          ov[((static_cast<std::size_t>(c) * od + zd) * oh + zh) * ow + zw] = acc;
        }

  out->parents = b ? std::vector<TensorPtr>{x, w, b} : std::vector<TensorPtr>{x, w};
  TensorPtr xp = x, wp = w, bp = b;
  out->backward_fn = [xp, wp, bp, stride, pad_d, pad_h, pad_w, ci, D, H, W, co, kd, kh,
                      kw, od, oh, ow](Tensor& self) {
    xp->ensure_grad();
    wp->ensure_grad();
    if (bp) bp->ensure_grad();
    const double* g = self.grad.data();
    const double* xv = xp->value.data();
    const double* wv = wp->value.data();
    double* gx = xp->grad.data();
    double* gw = wp->grad.data();
    const std::size_t x_c = static_cast<std::size_t>(D) * H * W;
    const std::size_t w_co = static_cast<std::size_t>(ci) * kd * kh * kw;

    for (int c = 0; c < co; ++c)
      for (int zd = 0; zd < od; ++zd)
        for (int zh = 0; zh < oh; ++zh)
          for (int zw = 0; zw < ow; ++zw) {
            const double go =
                g[((static_cast<std::size_t>(c) * od + zd) * oh + zh) * ow + zw];
            if (go == 0.0) continue;
            if (bp) bp->grad[c] += go;
            for (int ic = 0; ic < ci; ++ic) {
              const double* xc = xv + ic * x_c;
              double* gxc = gx + ic * x_c;
              const std::size_t wbase =
                  c * w_co + static_cast<std::size_t>(ic) * kd * kh * kw;
              for (int a = 0; a < kd; ++a) {
                const int sd = zd * stride + a - pad_d;
                if (sd < 0 || sd >= D) continue;
                for (int e = 0; e < kh; ++e) {
                  const int sh = zh * stride + e - pad_h;
                  if (sh < 0 || sh >= H) continue;
                  const std::size_t rowoff = (static_cast<std::size_t>(sd) * H + sh) * W;
                  const std::size_t woff = wbase + (static_cast<std::size_t>(a) * kh + e) * kw;
                  for (int f = 0; f < kw; ++f) {
                    const int sw = zw * stride + f - pad_w;
                    if (sw < 0 || sw >= W) continue;
                    gxc[rowoff + sw] += go * wv[woff + f];
                    gw[woff + f] += go * xc[rowoff + sw];
                  }
                }
              }
            }
          }
  };
  return out;
}

TensorPtr conv2d(const TensorPtr& x, const TensorPtr& w, const TensorPtr& b, int stride,
                 int pad) {
  check_rank(x, 3, "conv2d");
  check_rank(w, 4, "conv2d");
  const int ci = x->shape[0], H = x->shape[1], W = x->shape[2];
  const int co = w->shape[0], kh = w->shape[2], kw = w->shape[3];
  if (w->shape[1] != ci) throw NnError("conv2d: channel mismatch");

  const int oh = conv_out_dim(H, kh, stride, pad);
  const int ow = conv_out_dim(W, kw, stride, pad);

  auto out = make_tensor({co, oh, ow}, true);
  for (int c = 0; c < co; ++c)
    for (int zh = 0; zh < oh; ++zh)
      for (int zw = 0; zw < ow; ++zw) {
        double acc = b ? b->value[c] : 0.0;
        for (int ic = 0; ic < ci; ++ic)
          for (int e = 0; e < kh; ++e) {
            const int sh = zh * stride + e - pad;
            if (sh < 0 || sh >= H) continue;
            for (int f = 0; f < kw; ++f) {
              const int sw = zw * stride + f - pad;
              if (sw < 0 || sw >= W) continue;
              acc += w->value[((static_cast<std::size_t>(c) * ci + ic) * kh + e) * kw + f] *
                     x->value[(static_cast<std::size_t>(ic) * H + sh) * W + sw];
            }
          }
        out->value[((static_cast<std::size_t>(c) * oh) + zh) * ow + zw] = acc;
      }

  out->parents = b ? std::vector<TensorPtr>{x, w, b} : std::vector<TensorPtr>{x, w};
  TensorPtr xp = x, wp = w, bp = b;
  out->backward_fn = [xp, wp, bp, stride, pad, ci, H, W, co, kh, kw, oh, ow](Tensor& self) {
    xp->ensure_grad();
    wp->ensure_grad();
    if (bp) bp->ensure_grad();
    for (int c = 0; c < co; ++c)
      for (int zh = 0; zh < oh; ++zh)
        for (int zw = 0; zw < ow; ++zw) {
          const double go = self.grad[((static_cast<std::size_t>(c) * oh) + zh) * ow + zw];
          if (go == 0.0) continue;
          if (bp) bp->grad[c] += go;
          for (int ic = 0; ic < ci; ++ic)
            for (int e = 0; e < kh; ++e) {
              const int sh = zh * stride + e - pad;
              if (sh < 0 || sh >= H) continue;
              for (int f = 0; f < kw; ++f) {
                const int sw = zw * stride + f - pad;
                if (sw < 0 || sw >= W) continue;
                const std::size_t wi =
                    ((static_cast<std::size_t>(c) * ci + ic) * kh + e) * kw + f;
                const std::size_t xi = (static_cast<std::size_t>(ic) * H + sh) * W + sw;
                xp->grad[xi] += go * wp->value[wi];
                wp->grad[wi] += go * xp->value[xi];
              }
            }
        }
  };
  return out;
}

TensorPtr upsample_nearest3d(const TensorPtr& x, int factor) {
  check_rank(x, 4, "upsample_nearest3d");
  const int C = x->shape[0], D = x->shape[1], H = x->shape[2], W = x->shape[3];
  const int od = D * factor, oh = H * factor, ow = W * factor;
  auto out = make_tensor({C, od, oh, ow}, true);
  for (int c = 0; c < C; ++c)
    for (int z = 0; z < od; ++z)
      for (int y = 0; y < oh; ++y)
        for (int w = 0; w < ow; ++w)
          out->value[((static_cast<std::size_t>(c) * od + z) * oh + y) * ow + w] =
              x->value[((static_cast<std::size_t>(c) * D + z / factor) * H + y / factor) * W +
                       w / factor];
  out->parents = {x};
  TensorPtr xp = x;
  out->backward_fn = [xp, factor, C, D, H, W, od, oh, ow](Tensor& self) {
    xp->ensure_grad();
    for (int c = 0; c < C; ++c)
      for (int z = 0; z < od; ++z)
        for (int y = 0; y < oh; ++y)
          for (int w = 0; w < ow; ++w)
            xp->grad[((static_cast<std::size_t>(c) * D + z / factor) * H + y / factor) * W +
                     w / factor] +=
                self.grad[((static_cast<std::size_t>(c) * od + z) * oh + y) * ow + w];
  };
  return out;
}

TensorPtr concat_channels(const TensorPtr& a, const TensorPtr& b) {
  if (a->shape.size() != b->shape.size()) throw NnError("concat: rank mismatch");
  for (std::size_t i = 1; i < a->shape.size(); ++i)
    if (a->shape[i] != b->shape[i]) throw NnError("concat: spatial shape mismatch");
  std::vector<int> shape = a->shape;
  shape[0] += b->shape[0];
  auto out = make_tensor(shape, true);
  std::copy(a->value.begin(), a->value.end(), out->value.begin());
  std::copy(b->value.begin(), b->value.end(), out->value.begin() + a->value.size());
  out->parents = {a, b};
  TensorPtr ap = a, bp = b;
  out->backward_fn = [ap, bp](Tensor& self) {
    ap->ensure_grad();
    bp->ensure_grad();
    for (std::size_t i = 0; i < ap->grad.size(); ++i) ap->grad[i] += self.grad[i];
    for (std::size_t i = 0; i < bp->grad.size(); ++i)
      bp->grad[i] += self.grad[ap->grad.size() + i];
  };
  return out;
}

TensorPtr leaky_relu(const TensorPtr& x, double slope) {
  auto out = make_tensor(x->shape, true);
  for (std::size_t i = 0; i < x->value.size(); ++i)
    out->value[i] = x->value[i] >= 0.0 ? x->value[i] : slope * x->value[i];
  out->parents = {x};
  TensorPtr xp = x;
  out->backward_fn = [xp, slope](Tensor& self) {
    xp->ensure_grad();
    for (std::size_t i = 0; i < xp->grad.size(); ++i)
      xp->grad[i] += self.grad[i] * (xp->value[i] >= 0.0 ? 1.0 : slope);
  };
  return out;
}

TensorPtr add(const TensorPtr& a, const TensorPtr& b) {
  if (a->shape != b->shape) throw NnError("add: shape mismatch");
  auto out = make_tensor(a->shape, true);
  for (std::size_t i = 0; i < a->value.size(); ++i)
    out->value[i] = a->value[i] + b->value[i];
  out->parents = {a, b};
  TensorPtr ap = a, bp = b;
  out->backward_fn = [ap, bp](Tensor& self) {
    ap->ensure_grad();
    bp->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      ap->grad[i] += self.grad[i];
      bp->grad[i] += self.grad[i];
    }
  };
  return out;
}

TensorPtr scale(const TensorPtr& x, double s) {
  auto out = make_tensor(x->shape, true);
  for (std::size_t i = 0; i < x->value.size(); ++i) out->value[i] = s * x->value[i];
  out->parents = {x};
  TensorPtr xp = x;
  out->backward_fn = [xp, s](Tensor& self) {
    xp->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) xp->grad[i] += s * self.grad[i];
  };
  return out;
}

TensorPtr instance_norm(const TensorPtr& x, const TensorPtr& gamma, const TensorPtr& beta,
                        double eps, const InstanceNormStats* frozen) {
  const int C = x->shape[0];
  if (gamma->shape != std::vector<int>{C} || beta->shape != std::vector<int>{C})
    throw NnError("instance_norm: gamma/beta shape mismatch");
  const std::size_t n = x->numel() / C;

  auto out = make_tensor(x->shape, true);
  auto mean = std::make_shared<std::vector<double>>(C);
  auto istd = std::make_shared<std::vector<double>>(C);

  for (int c = 0; c < C; ++c) {
    double mu, var;
    if (frozen) {
      mu = frozen->mean[c];
      var = frozen->var[c];
    } else {
      mu = 0.0;
      for (std::size_t i = 0; i < n; ++i) mu += x->value[c * n + i];
      mu /= static_cast<double>(n);
      var = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double d = x->value[c * n + i] - mu;
        var += d * d;
      }
      var /= static_cast<double>(n);
    }
    (*mean)[c] = mu;
    (*istd)[c] = 1.0 / std::sqrt(var + eps);
    const double g = gamma->value[c], b = beta->value[c], is = (*istd)[c];
    for (std::size_t i = 0; i < n; ++i)
      out->value[c * n + i] = g * (x->value[c * n + i] - mu) * is + b;
  }

  out->parents = {x, gamma, beta};
  TensorPtr xp = x, gp = gamma, bp = beta;
  const bool is_frozen = frozen != nullptr;
  out->backward_fn = [xp, gp, bp, mean, istd, n, C, is_frozen](Tensor& self) {
    xp->ensure_grad();
    gp->ensure_grad();
    bp->ensure_grad();
    for (int c = 0; c < C; ++c) {
      const double mu = (*mean)[c], is = (*istd)[c], g = gp->value[c];
      double sum_dy = 0.0, sum_dy_xhat = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double dy = self.grad[c * n + i];
        const double xhat = (xp->value[c * n + i] - mu) * is;
        sum_dy += dy;
        sum_dy_xhat += dy * xhat;
        gp->grad[c] += dy * xhat;
        bp->grad[c] += dy;
      }
      if (is_frozen) {
        for (std::size_t i = 0; i < n; ++i) xp->grad[c * n + i] += self.grad[c * n + i] * g * is;
      } else {
        const double inv_n = 1.0 / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) {
          const double dy = self.grad[c * n + i];
          const double xhat = (xp->value[c * n + i] - mu) * is;
          xp->grad[c * n + i] +=
              g * is * (dy - inv_n * sum_dy - xhat * inv_n * sum_dy_xhat);
        }
      }
    }
  };
  return out;
}

namespace {

TensorPtr pad_or_crop3d(const TensorPtr& x, int d, int h, int w, bool pad) {
  if (x->shape.size() != 4) throw NnError("pad/crop3d: rank mismatch");
  const int C = x->shape[0], D = x->shape[1], H = x->shape[2], W = x->shape[3];
  if (pad && (d < D || h < H || w < W)) throw NnError("pad3d_to: target smaller than input");
  if (!pad && (d > D || h > H || w > W)) throw NnError("crop3d_to: target larger than input");

  const int offd = pad ? (d - D) / 2 : (D - d) / 2;
  const int offh = pad ? (h - H) / 2 : (H - h) / 2;
  const int offw = pad ? (w - W) / 2 : (W - w) / 2;

  auto out = make_tensor({C, d, h, w}, true);
  const int cd = pad ? D : d, ch = pad ? H : h, cw = pad ? W : w;
  for (int c = 0; c < C; ++c)
    for (int z = 0; z < cd; ++z)
      for (int y = 0; y < ch; ++y)
        for (int v = 0; v < cw; ++v) {
          const std::size_t oi = pad
              ? ((static_cast<std::size_t>(c) * d + z + offd) * h + y + offh) * w + v + offw
              : ((static_cast<std::size_t>(c) * d + z) * h + y) * w + v;
          const std::size_t xi = pad
              ? ((static_cast<std::size_t>(c) * D + z) * H + y) * W + v
              : ((static_cast<std::size_t>(c) * D + z + offd) * H + y + offh) * W + v + offw;
          out->value[oi] = x->value[xi];
        }

  out->parents = {x};
  TensorPtr xp = x;
  out->backward_fn = [xp, d, h, w, C, D, H, W, offd, offh, offw, pad](Tensor& self) {
    xp->ensure_grad();
    const int cd = pad ? D : d, ch = pad ? H : h, cw = pad ? W : w;
    for (int c = 0; c < C; ++c)
      for (int z = 0; z < cd; ++z)
        for (int y = 0; y < ch; ++y)
          for (int v = 0; v < cw; ++v) {
            const std::size_t oi = pad
                ? ((static_cast<std::size_t>(c) * d + z + offd) * h + y + offh) * w + v + offw
                : ((static_cast<std::size_t>(c) * d + z) * h + y) * w + v;
            const std::size_t xi = pad
                ? ((static_cast<std::size_t>(c) * D + z) * H + y) * W + v
                : ((static_cast<std::size_t>(c) * D + z + offd) * H + y + offh) * W + v +
                      offw;
            xp->grad[xi] += self.grad[oi];
          }
  };
  return out;
}

}  // namespace

TensorPtr pad3d_to(const TensorPtr& x, int d, int h, int w) {
  return pad_or_crop3d(x, d, h, w, true);
}

TensorPtr crop3d_to(const TensorPtr& x, int d, int h, int w) {
  return pad_or_crop3d(x, d, h, w, false);
}

TensorPtr slice_plane(const TensorPtr& x, int plane, int index) {
  check_rank(x, 4, "slice_plane");
  const int C = x->shape[0], D = x->shape[1], H = x->shape[2], W = x->shape[3];
  int rows, cols;
  switch (plane) {
    case 0: rows = H; cols = W; break;  // xy (fix z)
    case 1: rows = D; cols = W; break;  // xz (fix y)
    case 2: rows = D; cols = H; break;  // yz (fix x)
    default: throw NnError("slice_plane: invalid plane");
  }
  const int bound = plane == 0 ? D : (plane == 1 ? H : W);
  if (index < 0 || index >= bound) throw NnError("slice_plane: index out of bounds");

  auto xidx = [plane, index, D, H, W](int c, int r, int col) -> std::size_t {
    switch (plane) {
      case 0: return ((static_cast<std::size_t>(c) * D + index) * H + r) * W + col;
      case 1: return ((static_cast<std::size_t>(c) * D + r) * H + index) * W + col;
      default: return ((static_cast<std::size_t>(c) * D + r) * H + col) * W + index;
    }
  };

  auto out = make_tensor({C, rows, cols}, true);
  for (int c = 0; c < C; ++c)
    for (int r = 0; r < rows; ++r)
      for (int col = 0; col < cols; ++col)
        out->value[(static_cast<std::size_t>(c) * rows + r) * cols + col] =
            x->value[xidx(c, r, col)];

  out->parents = {x};
  TensorPtr xp = x;
  out->backward_fn = [xp, xidx, C, rows, cols](Tensor& self) {
    xp->ensure_grad();
    for (int c = 0; c < C; ++c)
      for (int r = 0; r < rows; ++r)
        for (int col = 0; col < cols; ++col)
          xp->grad[xidx(c, r, col)] +=
              self.grad[(static_cast<std::size_t>(c) * rows + r) * cols + col];
  };
  return out;
}

TensorPtr l1_loss(const TensorPtr& a, const TensorPtr& b) {
  if (a->shape != b->shape) throw NnError("l1_loss: shape mismatch");
  auto out = make_tensor({1}, true);
  double acc = 0.0;
  for (std::size_t i = 0; i < a->value.size(); ++i)
    acc += std::abs(a->value[i] - b->value[i]);
  const double inv_n = 1.0 / static_cast<double>(a->value.size());
  out->value[0] = acc * inv_n;
  out->parents = {a, b};
  TensorPtr ap = a, bp = b;
  out->backward_fn = [ap, bp, inv_n](Tensor& self) {
    ap->ensure_grad();
    bp->ensure_grad();
    const double g = self.grad[0] * inv_n;
    for (std::size_t i = 0; i < ap->value.size(); ++i) {
      const double d = ap->value[i] - bp->value[i];
      const double s = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
      ap->grad[i] += g * s;
      bp->grad[i] -= g * s;
    }
  };
  return out;
}

TensorPtr mse_to_constant(const TensorPtr& x, double target) {
  auto out = make_tensor({1}, true);
  double acc = 0.0;
  for (double v : x->value) {
    const double d = v - target;
    acc += d * d;
  }
  const double inv_n = 1.0 / static_cast<double>(x->value.size());
  out->value[0] = acc * inv_n;
  out->parents = {x};
  TensorPtr xp = x;
  out->backward_fn = [xp, target, inv_n](Tensor& self) {
    xp->ensure_grad();
    const double g = self.grad[0] * 2.0 * inv_n;
    for (std::size_t i = 0; i < xp->value.size(); ++i)
      xp->grad[i] += g * (xp->value[i] - target);
  };
  return out;
}

TensorPtr add_weighted(const std::vector<TensorPtr>& scalars,
                       const std::vector<double>& weights) {
  if (scalars.empty() || scalars.size() != weights.size())
    throw NnError("add_weighted: size mismatch");
  auto out = make_tensor({1}, true);
  for (std::size_t i = 0; i < scalars.size(); ++i) {
    if (scalars[i]->numel() != 1) throw NnError("add_weighted: non-scalar term");
    out->value[0] += weights[i] * scalars[i]->value[0];
  }
  out->parents = scalars;
  auto w = weights;
  out->backward_fn = [w](Tensor& self) {
    for (std::size_t i = 0; i < self.parents.size(); ++i) {
      self.parents[i]->ensure_grad();
      self.parents[i]->grad[0] += w[i] * self.grad[0];
    }
  };
  return out;
}

}  // namespace dualcycle::nn
