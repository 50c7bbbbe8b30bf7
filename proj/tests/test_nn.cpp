#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "dualcycle/nn/tensor.hpp"

using namespace dualcycle::nn;

namespace {

TensorPtr randn(std::vector<int> shape, Rng& rng, double scale = 1.0,
                const std::string& name = "") {
  TensorPtr t = name.empty() ? make_tensor(std::move(shape), true)
                             : make_param(std::move(shape), name);
  for (double& v : t->value) v = scale * rng.normal(0.0, 1.0);
  return t;
}

// Central finite differences of a scalar-valued graph builder with
// respect to one leaf tensor.
void check_gradients(const std::function<TensorPtr()>& build, const TensorPtr& leaf,
                     double eps = 1e-5, double tol = 1e-6) {
  TensorPtr loss = build();
  REQUIRE(loss->numel() == 1);
  // Persistent leaves may carry gradients from an earlier sweep.
  leaf->grad.assign(leaf->value.size(), 0.0);
  backward(loss);
  REQUIRE(leaf->grad.size() == leaf->value.size());
  const std::vector<double> analytic = leaf->grad;

  for (std::size_t i = 0; i < leaf->value.size(); ++i) {
    const double orig = leaf->value[i];
    leaf->value[i] = orig + eps;
    const double up = build()->value[0];
    leaf->value[i] = orig - eps;
    const double dn = build()->value[0];
    leaf->value[i] = orig;
    const double fd = (up - dn) / (2.0 * eps);
    const double denom = std::max({1.0, std::abs(fd), std::abs(analytic[i])});
    CHECK(std::abs(analytic[i] - fd) / denom < tol);
  }
}

}  // namespace

TEST_CASE("conv3d gradients (stride 1 and 2, with bias)") {
  Rng rng(1);
  auto x = randn({2, 4, 4, 4}, rng);
  auto w = randn({3, 2, 3, 3, 3}, rng, 0.5, "w");
  auto b = randn({3}, rng, 0.5, "b");
  for (int stride : {1, 2}) {
    auto build = [&]() { return l1_loss(conv3d(x, w, b, stride, 1), constant_like(conv3d(x, w, b, stride, 1), 0.1)); };
    check_gradients(build, x);
    check_gradients(build, w);
    check_gradients(build, b);
  }
}

TEST_CASE("conv3d per-axis padding matches 1D-kernel expectations") {
  Rng rng(2);
  auto x = randn({1, 5, 4, 4}, rng);
  auto w = randn({1, 1, 5, 1, 1}, rng, 0.5, "w");
  auto y = conv3d(x, w, nullptr, 1, 2, 0, 0);
  CHECK(y->shape == std::vector<int>{1, 5, 4, 4});
  auto build = [&]() { return mse_to_constant(conv3d(x, w, nullptr, 1, 2, 0, 0), 0.0); };
  check_gradients(build, x);
  check_gradients(build, w);
}

TEST_CASE("conv2d gradients") {
  Rng rng(3);
  auto x = randn({2, 6, 6}, rng);
  auto w = randn({2, 2, 4, 4}, rng, 0.5, "w");
  auto b = randn({2}, rng, 0.5, "b");
  auto build = [&]() { return mse_to_constant(conv2d(x, w, b, 2, 1), 1.0); };
  check_gradients(build, x);
  check_gradients(build, w);
  check_gradients(build, b);
}

TEST_CASE("upsample_nearest3d forward and gradients") {
  Rng rng(4);
  auto x = randn({1, 2, 2, 2}, rng);
  auto y = upsample_nearest3d(x, 2);
  CHECK(y->shape == std::vector<int>{1, 4, 4, 4});
  CHECK(y->value[0] == x->value[0]);
  check_gradients([&]() { return mse_to_constant(upsample_nearest3d(x, 2), 0.3); }, x);
}

TEST_CASE("concat/leaky_relu/add/scale gradients") {
  Rng rng(5);
  auto a = randn({2, 3, 3, 3}, rng);
  auto b = randn({1, 3, 3, 3}, rng);
  auto build = [&]() {
    auto c = concat_channels(a, b);
    c = leaky_relu(c, 0.2);
    c = add(c, c);
    c = scale(c, 0.5);
    return l1_loss(c, constant_like(c, 0.05));
  };
  check_gradients(build, a, 1e-5, 1e-5);
  check_gradients(build, b, 1e-5, 1e-5);
}

TEST_CASE("instance_norm normalizes and differentiates") {
  Rng rng(6);
  auto x = randn({2, 3, 3, 3}, rng, 2.0);
  auto gamma = make_param({2}, "g");
  gamma->value = {1.0, 1.0};
  auto beta = make_param({2}, "b");

  auto y = instance_norm(x, gamma, beta);
  const std::size_t n = 27;
  for (int c = 0; c < 2; ++c) {
    double mu = 0.0, var = 0.0;
    for (std::size_t i = 0; i < n; ++i) mu += y->value[c * n + i];
    mu /= n;
    for (std::size_t i = 0; i < n; ++i) {
      const double d = y->value[c * n + i] - mu;
      var += d * d;
    }
    CHECK(std::abs(mu) < 1e-9);
    CHECK(var / n == doctest::Approx(1.0).epsilon(1e-3));
  }

  gamma->value = {0.7, 1.3};
  beta->value = {0.1, -0.2};
  auto build = [&]() { return mse_to_constant(instance_norm(x, gamma, beta), 0.2); };
  check_gradients(build, x, 1e-5, 1e-4);
  check_gradients(build, gamma, 1e-5, 1e-4);
  check_gradients(build, beta, 1e-5, 1e-4);
}

TEST_CASE("instance_norm with frozen stats is a fixed affine map") {
  Rng rng(7);
  auto x = randn({1, 3, 3, 3}, rng);
  auto gamma = make_param({1}, "g");
  gamma->value = {1.5};
  auto beta = make_param({1}, "b");
  beta->value = {0.25};
  InstanceNormStats stats;
  stats.mean = {0.4};
  stats.var = {2.0};
  auto y = instance_norm(x, gamma, beta, 1e-5, &stats);
  for (std::size_t i = 0; i < x->value.size(); ++i)
    CHECK(y->value[i] ==
          doctest::Approx(1.5 * (x->value[i] - 0.4) / std::sqrt(2.0 + 1e-5) + 0.25));
  auto build = [&]() { return mse_to_constant(instance_norm(x, gamma, beta, 1e-5, &stats), 0.0); };
  check_gradients(build, x, 1e-5, 1e-5);
}

TEST_CASE("pad/crop round-trip and gradients") {
  Rng rng(8);
  auto x = randn({2, 3, 4, 5}, rng);
  auto padded = pad3d_to(x, 6, 6, 6);
  CHECK(padded->shape == std::vector<int>{2, 6, 6, 6});
  auto back = crop3d_to(padded, 3, 4, 5);
  for (std::size_t i = 0; i < x->value.size(); ++i)
    CHECK(back->value[i] == x->value[i]);
  check_gradients(
      [&]() { return l1_loss(crop3d_to(pad3d_to(x, 6, 6, 6), 3, 4, 5),
                             constant_like(x, 0.0)); },
      x, 1e-5, 1e-5);
}

TEST_CASE("slice_plane routing and gradients") {
  Rng rng(9);
  auto x = randn({1, 3, 4, 5}, rng);
  auto xy = slice_plane(x, 0, 1);
  CHECK(xy->shape == std::vector<int>{1, 4, 5});
  for (int h = 0; h < 4; ++h)
    for (int w = 0; w < 5; ++w)
      CHECK(xy->value[h * 5 + w] == x->value[(1 * 4 + h) * 5 + w]);
  auto xz = slice_plane(x, 1, 2);
  CHECK(xz->shape == std::vector<int>{1, 3, 5});
  auto yz = slice_plane(x, 2, 3);
  CHECK(yz->shape == std::vector<int>{1, 3, 4});
  CHECK_THROWS_AS(slice_plane(x, 0, 3), NnError);
  check_gradients([&]() { return mse_to_constant(slice_plane(x, 1, 2), 0.1); }, x);
}

TEST_CASE("add_weighted combines scalars linearly") {
  Rng rng(10);
  auto x = randn({2, 2, 2, 2}, rng);
  auto s1 = l1_loss(x, constant_like(x, 0.0));
  auto s2 = mse_to_constant(x, 0.5);
  auto total = add_weighted({s1, s2}, {2.0, 10.0});
  CHECK(total->value[0] == doctest::Approx(2.0 * s1->value[0] + 10.0 * s2->value[0]));
  check_gradients(
      [&]() {
        return add_weighted({l1_loss(x, constant_like(x, 0.0)), mse_to_constant(x, 0.5)},
                            {2.0, 10.0});
      },
      x, 1e-5, 1e-5);
}

TEST_CASE("backward handles diamond-shaped graphs (shared parents)") {
  Rng rng(11);
  auto x = randn({1, 2, 2, 2}, rng);
  auto build = [&]() {
    auto y = leaky_relu(x, 0.2);
    return add_weighted({mse_to_constant(add(y, y), 0.0),
                         l1_loss(y, constant_like(y, 1.0))},
                        {1.0, 1.0});
  };
  check_gradients(build, x, 1e-5, 1e-5);
}

TEST_CASE("detach blocks gradient flow") {
  Rng rng(12);
  auto x = randn({1, 2, 2, 2}, rng);
  auto loss = mse_to_constant(detach(x), 0.0);
  backward(loss);
  bool any = false;
  for (double g : x->grad) any = any || g != 0.0;
  CHECK_FALSE(any);
}

TEST_CASE("Adam takes a bounded first step and is stateful per parameter") {
  auto p = make_param({2}, "p");
  p->value = {1.0, -1.0};
  p->ensure_grad();
  p->grad = {0.5, -0.25};
  Adam opt(0.01);
  opt.step({p});
  // First Adam step has magnitude ~lr regardless of gradient scale.
  CHECK(p->value[0] == doctest::Approx(1.0 - 0.01).epsilon(1e-3));
  CHECK(p->value[1] == doctest::Approx(-1.0 + 0.01).epsilon(1e-3));
  const Adam::State* s = opt.state_for("p");
  REQUIRE(s != nullptr);
  CHECK(s->t == 1);

  opt.zero_grad({p});
  CHECK(p->grad[0] == 0.0);
}

TEST_CASE("Adam converges on a quadratic") {
  auto p = make_param({1}, "p");
  p->value = {4.0};
  Adam opt(0.1);
  for (int i = 0; i < 500; ++i) {
    auto loss = mse_to_constant(p, 1.0);
    opt.zero_grad({p});
    backward(loss);
    opt.step({p});
  }
  CHECK(p->value[0] == doctest::Approx(1.0).epsilon(1e-2));
}
