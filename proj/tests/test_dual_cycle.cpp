#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "dualcycle/dual_cycle.hpp"
#include "dualcycle/phantom.hpp"

using namespace dualcycle;
using nn::TensorPtr;
namespace fs = std::filesystem;

namespace {

TensorPtr random_volume_tensor(std::vector<int> shape, unsigned seed) {
  auto t = nn::make_tensor(std::move(shape), false);
  std::mt19937 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (double& v : t->value) v = u(rng);
  return t;
}

ViewPair tiny_views(int n, unsigned seed) {
  PhantomSpec spec;
  spec.dims = {16, 16, 16};
  spec.line_count_range = {3, 5};
  spec.seed = seed;
  Volume3D u = generate_phantom(spec);
  if (n != 16) u = resample_isotropic(u, 16.0 / n);
  PSF pa = gaussian_psf(1.0, Axis::Z), pb = gaussian_psf(1.0, Axis::X);
  ViewPair p;
  p.view_a = convolve3d(u, pa);
  p.view_b = convolve3d(u, pb);
  p.psf_a = pa;
  p.psf_b = pb;
  return p;
}

TrainConfig tiny_config(std::uint64_t seed) {
  TrainConfig cfg;
  cfg.steps = 0;
  cfg.patch_size = 16;
  cfg.slices_per_plane = 2;
  cfg.seed = seed;
  cfg.generator.depth = 1;
  cfg.generator.base_channels = 2;
  cfg.dlg.layer_count = 2;
  cfg.discriminator.layer_count = 2;
  cfg.discriminator.base_channels = 2;
  return cfg;
}

std::size_t param_count(const std::vector<TensorPtr>& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p->numel();
  return n;
}

}  // namespace

TEST_CASE("generator preserves shape, including non-divisible dims") {
  nn::Rng rng(1);
  GeneratorConfig gc;
  gc.depth = 2;
  gc.base_channels = 4;
  UNet3D gen(gc, rng);
  for (auto dims : {std::vector<int>{2, 16, 16, 16}, std::vector<int>{2, 11, 13, 9}}) {
    auto x = random_volume_tensor(dims, 7);
    auto y = gen.forward(x);
    CHECK(y->shape == std::vector<int>{1, dims[1], dims[2], dims[3]});
    for (double v : y->value) CHECK(std::isfinite(v));
  }
}

TEST_CASE("generator evaluation is deterministic") {
  nn::Rng rng(2);
  GeneratorConfig gc;
  gc.depth = 1;
  gc.base_channels = 2;
  UNet3D gen(gc, rng);
  auto x = random_volume_tensor({2, 8, 8, 8}, 8);
  auto y1 = gen.forward(x);
  auto y2 = gen.forward(x);
  CHECK(y1->value == y2->value);
}

TEST_CASE("zero-initialized head makes the untrained generator an average fuser") {
  nn::Rng rng(3);
  GeneratorConfig gc;
  gc.depth = 1;
  gc.base_channels = 2;
  UNet3D gen(gc, rng);
  auto x = random_volume_tensor({2, 8, 8, 8}, 9);
  auto y = gen.forward(x);
  const std::size_t n = 8 * 8 * 8;
  for (std::size_t i = 0; i < n; ++i)
    CHECK(y->value[i] == doctest::Approx(0.5 * (x->value[i] + x->value[n + i])));
}

TEST_CASE("DLG delta initialization with delta PSF is the identity") {
  nn::Rng rng(4);
  DlgConfig dc;
  dc.init_noise = 0.0;
  DegradationPath path(delta_psf(), dc, "p", rng);
  auto x = random_volume_tensor({1, 8, 8, 8}, 10);
  auto y = path.degrade(x);
  for (std::size_t i = 0; i < x->value.size(); ++i)
    CHECK(std::abs(y->value[i] - x->value[i]) < 1e-5);
}

TEST_CASE("non-blind path with delta DLG equals convolve3d") {
  nn::Rng rng(5);
  DlgConfig dc;
  dc.init_noise = 0.0;
  PSF psf = gaussian_psf(1.5, Axis::Z);
  DegradationPath path(psf, dc, "p", rng);

  Volume3D v(8, 8, 8);
  std::mt19937 r(11);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (float& f : v.data()) f = u(r);

  auto x = nn::make_tensor({1, 8, 8, 8}, false);
  for (std::size_t i = 0; i < v.size(); ++i) x->value[i] = v.data()[i];
  auto y = path.degrade(x);
  Volume3D want = convolve3d(v, psf);
  for (std::size_t i = 0; i < v.size(); ++i)
    CHECK(std::abs(y->value[i] - want.data()[i]) < 1e-5);
}

TEST_CASE("DLG effective kernel matches the composition oracle") {
  nn::Rng rng(6);
  DlgConfig dc;
  dc.layer_count = 2;
  dc.kernel_size = 3;
  dc.init_noise = 0.3;  // well away from delta
  DeepLinearGenerator dlg(dc, "dlg", rng);

  std::vector<int> shape;
  std::vector<double> eff = dlg.effective_kernel(shape);
  REQUIRE(shape.size() == 3);
  const int k = shape[0];
  CHECK(k == 5);  // two 3-kernels compose to 5

  // Full convolution of the two layer kernels.
  auto l0 = dlg.parameters()[0], l1 = dlg.parameters()[1];
  std::vector<double> want(static_cast<std::size_t>(k) * k * k, 0.0);
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b)
      for (int c = 0; c < 3; ++c)
        for (int d = 0; d < 3; ++d)
          for (int e = 0; e < 3; ++e)
            for (int f = 0; f < 3; ++f)
              want[(static_cast<std::size_t>(a + d) * k + (b + e)) * k + (c + f)] +=
                  l0->value[(a * 3 + b) * 3 + c] * l1->value[(d * 3 + e) * 3 + f];
  REQUIRE(eff.size() == want.size());
  for (std::size_t i = 0; i < want.size(); ++i) CHECK(std::abs(eff[i] - want[i]) < 1e-10);
}

TEST_CASE("DLG linearity holds for random parameterizations") {
  for (unsigned trial = 0; trial < 10; ++trial) {
    nn::Rng rng(100 + trial);
    DlgConfig dc;
    dc.init_noise = 0.5;
    DegradationPath path(trial % 2 ? std::optional<PSF>(gaussian_psf(1.0, Axis::Z))
                                   : std::nullopt,
                         dc, "p", rng);
    auto v1 = random_volume_tensor({1, 8, 8, 8}, 200 + trial);
    auto v2 = random_volume_tensor({1, 8, 8, 8}, 300 + trial);
    const double a = 0.7, b = -0.4;
    auto mix = nn::make_tensor({1, 8, 8, 8}, false);
    for (std::size_t i = 0; i < mix->value.size(); ++i)
      mix->value[i] = a * v1->value[i] + b * v2->value[i];
    auto y1 = path.degrade(v1), y2 = path.degrade(v2), ym = path.degrade(mix);
    for (std::size_t i = 0; i < ym->value.size(); ++i)
      CHECK(std::abs(ym->value[i] - (a * y1->value[i] + b * y2->value[i])) < 1e-4);
  }
}

TEST_CASE("discriminator emits a deterministic patch score map") {
  nn::Rng rng(7);
  DiscriminatorConfig dc;
  dc.layer_count = 2;
  dc.base_channels = 2;
  SliceDiscriminator disc(dc, "d", rng);
  auto slice = random_volume_tensor({1, 16, 16}, 77);
  auto s = disc.score(slice);
  REQUIRE(s->shape.size() == 3);
  REQUIRE(s->shape[0] == 1);
  // Geometry: 16 -(k4 s2 p1)-> 8 -(k4 s1 p1)-> 7 -(head k4 s1 p1)-> 6.
  CHECK(s->shape[1] == 6);
  CHECK(s->shape[2] == 6);
  for (double v : s->value) CHECK(std::isfinite(v));
  // Same input, same scores; perturbed input, different scores.
  auto s2 = disc.score(slice);
  CHECK(s2->value == s->value);
  auto other = random_volume_tensor({1, 16, 16}, 78);
  auto s3 = disc.score(other);
  CHECK(s3->value != s->value);
}

TEST_CASE("loss graph is finite and reports all terms") {
  TrainConfig cfg = tiny_config(1);
  ViewPair views = tiny_views(16, 21);
  DualCycleModel model(cfg, views.psf_a, views.psf_b);
  auto in_a = random_volume_tensor({1, 16, 16, 16}, 1);
  auto in_b = random_volume_tensor({1, 16, 16, 16}, 2);
  DualCycleLossTerms terms;
  auto loss = model.loss_graph(in_a, in_b, 2, 5, &terms);
  CHECK(std::isfinite(loss->value[0]));
  CHECK(terms.cycle_l1_a >= 0.0);
  CHECK(terms.cycle_l1_b >= 0.0);
  CHECK(terms.total() ==
        doctest::Approx(terms.adv_iso_a1 + terms.adv_iso_b1 + terms.adv_view_a2 +
                        terms.adv_view_b2 +
                        terms.lambda_cycle * (terms.cycle_l1_a + terms.cycle_l1_b)));
  // Same slice seed -> identical loss; different seed -> different slices.
  auto again = model.loss_graph(in_a, in_b, 2, 5, nullptr);
  CHECK(again->value[0] == doctest::Approx(loss->value[0]).epsilon(1e-12));
}

TEST_CASE("gradient check on a sampled subset of a tiny model") {
  TrainConfig cfg = tiny_config(3);
  cfg.generator.base_channels = 1;
  cfg.discriminator.base_channels = 1;
  ViewPair views = tiny_views(8, 22);
  DualCycleModel model(cfg, views.psf_a, views.psf_b);
  auto params = model.all_parameters();
  REQUIRE(param_count(params) <= 1000);

  auto in_a = random_volume_tensor({1, 8, 8, 8}, 3);
  auto in_b = random_volume_tensor({1, 8, 8, 8}, 4);
  auto build = [&]() { return model.loss_graph(in_a, in_b, 1, 9, nullptr); };

  auto loss = build();
  for (const auto& p : params) p->grad.assign(p->value.size(), 0.0);
  nn::backward(loss);

  std::mt19937 pick(12345);
  int checked = 0;
  for (const auto& p : params) {
    if (p->grad.empty()) continue;
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      if (pick() % 17 != 0 || checked >= 40) continue;
      const double eps = 1e-5;
      const double orig = p->value[i];
      p->value[i] = orig + eps;
      const double up = build()->value[0];
      p->value[i] = orig - eps;
      const double dn = build()->value[0];
      p->value[i] = orig;
      const double fd = (up - dn) / (2.0 * eps);
      const double denom = std::max({1e-3, std::abs(fd), std::abs(p->grad[i])});
      CHECK(std::abs(p->grad[i] - fd) / denom < 1e-3);
      ++checked;
    }
  }
  CHECK(checked >= 20);
}

TEST_CASE("zero training steps leave parameters untouched") {
  TrainConfig cfg = tiny_config(4);
  ViewPair views = tiny_views(16, 23);
  DualCycleModel model(cfg, views.psf_a, views.psf_b);
  std::vector<std::vector<double>> before;
  for (const auto& p : model.all_parameters()) before.push_back(p->value);
  auto history = model.train(views);
  CHECK(history.empty());
  auto params = model.all_parameters();
  for (std::size_t i = 0; i < params.size(); ++i) CHECK(params[i]->value == before[i]);
}

TEST_CASE("frozen PSF kernels are bit-identical across training") {
  TrainConfig cfg = tiny_config(5);
  cfg.steps = 3;
  ViewPair views = tiny_views(16, 24);
  DualCycleModel model(cfg, views.psf_a, views.psf_b);
  const std::vector<double> before = model.path_a().frozen_psf_kernel()->value;
  model.train(views);
  CHECK(model.path_a().frozen_psf_kernel()->value == before);
}

TEST_CASE("training loss history is reproducible to 1e-6") {
  ViewPair views = tiny_views(16, 25);
  TrainConfig cfg = tiny_config(6);
  cfg.steps = 5;

  std::vector<double> h1, h2;
  {
    DualCycleModel m(cfg, views.psf_a, views.psf_b);
    for (const auto& e : m.train(views)) h1.push_back(e.generator_terms.total());
  }
  {
    DualCycleModel m(cfg, views.psf_a, views.psf_b);
    for (const auto& e : m.train(views)) h2.push_back(e.generator_terms.total());
  }
  REQUIRE(h1.size() == 5);
  REQUIRE(h2.size() == 5);
  for (std::size_t i = 0; i < h1.size(); ++i) CHECK(std::abs(h1[i] - h2[i]) < 1e-6);
}

TEST_CASE("checkpoint round-trip restores parameters and optimizer state") {
  ViewPair views = tiny_views(16, 26);
  TrainConfig cfg = tiny_config(7);
  cfg.steps = 2;
  DualCycleModel m(cfg, views.psf_a, views.psf_b);
  m.train(views);
  const fs::path path = fs::temp_directory_path() / "dc_test_ckpt.rv1";
  m.save_checkpoint(path.string(), 2);

  cfg.steps = 0;
  DualCycleModel fresh(cfg, views.psf_a, views.psf_b);
  CHECK(fresh.load_checkpoint(path.string()) == 2);
  auto pa = m.all_parameters(), pb = fresh.all_parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i]->value == pb[i]->value);

  // Warm start then zero steps:  parameters identical to the checkpoint.
  TrainConfig warm = tiny_config(8);
  warm.steps = 0;
  warm.warm_start_path = path.string();
  DualCycleModel warmed(warm, views.psf_a, views.psf_b);
  warmed.train(views);
  auto pw = warmed.all_parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i]->value == pw[i]->value);

  // Architecture mismatch must fail with a shape diff.
  TrainConfig other = tiny_config(9);
  other.generator.base_channels = 4;
  DualCycleModel wrong(other, views.psf_a, views.psf_b);
  CHECK_THROWS_WITH_AS(wrong.load_checkpoint(path.string()), doctest::Contains("shape"),
                       TrainingError);
  fs::remove(path);
}

TEST_CASE("tiled reconstruction matches untiled closely on the interior") {
  ViewPair views = tiny_views(32, 27);
  TrainConfig cfg = tiny_config(10);
  cfg.steps = 2;
  cfg.patch_size = 16;
  DualCycleModel m(cfg, views.psf_a, views.psf_b);
  m.train(views);  // capture frozen stats

  Volume3D whole = m.reconstruct(views);
  Volume3D tiled = m.reconstruct_tiled(views, 16, 4);
  REQUIRE(tiled.nz() == whole.nz());
  double worst = 0.0;
  for (int z = 2; z < 30; ++z)
    for (int y = 2; y < 30; ++y)
      for (int x = 2; x < 30; ++x)
        worst = std::max(worst,
                         std::abs(static_cast<double>(tiled.at(z, y, x)) -
                                  whole.at(z, y, x)));
  // The 4-voxel overlap does not fully cover the network's receptive
  // field, so a small convolutional halo error remains.
  CHECK(worst <= 5e-3);

  CHECK_THROWS_AS(m.reconstruct_tiled(views, 6, 4), TrainingError);
}

TEST_CASE("train config JSON round-trip is lossless") {
  TrainConfig cfg = tiny_config(11);
  cfg.steps = 123;
  cfg.learning_rate = 2e-4;
  cfg.lambda_cycle = 7.5;
  cfg.blind = true;
  cfg.warm_start_path = "/some/path.ckpt";
  TrainConfig back = train_config_from_json_string(train_config_to_json_string(cfg));
  CHECK(back.steps == cfg.steps);
  CHECK(back.learning_rate == cfg.learning_rate);
  CHECK(back.lambda_cycle == cfg.lambda_cycle);
  CHECK(back.patch_size == cfg.patch_size);
  CHECK(back.seed == cfg.seed);
  CHECK(back.generator.depth == cfg.generator.depth);
  CHECK(back.generator.base_channels == cfg.generator.base_channels);
  CHECK(back.dlg.layer_count == cfg.dlg.layer_count);
  CHECK(back.discriminator.layer_count == cfg.discriminator.layer_count);
  CHECK(back.blind == cfg.blind);
  CHECK(back.warm_start_path == cfg.warm_start_path);
}

TEST_CASE("blind mode drops the PSF from the degradation path") {
  ViewPair views = tiny_views(16, 28);
  TrainConfig cfg = tiny_config(12);
  cfg.blind = true;
  // Blind mode refuses explicit PSFs outright.
  CHECK_THROWS_AS(DualCycleModel(cfg, views.psf_a, views.psf_b), TrainingError);
  DualCycleModel m(cfg, std::nullopt, std::nullopt);
  CHECK(m.path_a().blind());
  CHECK(m.path_b().blind());
  CHECK(m.path_a().frozen_psf_kernel() == nullptr);
}
