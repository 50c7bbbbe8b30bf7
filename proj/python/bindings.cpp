#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "dualcycle/pipeline.hpp"

namespace py = pybind11;
using namespace dualcycle;

namespace {

Volume3D volume_from_array(py::array_t<float, py::array::c_style | py::array::forcecast> arr,
                           std::array<double, 3> spacing) {
  if (arr.ndim() != 3) throw VolumeError("expected a 3D array indexed (z, y, x)");
  Volume3D v(static_cast<int>(arr.shape(0)), static_cast<int>(arr.shape(1)),
             static_cast<int>(arr.shape(2)),
             std::vector<float>(arr.data(), arr.data() + arr.size()), spacing);
  v.check_finite("Volume3D from numpy");
  return v;
}

py::array_t<float> volume_to_array(const Volume3D& v) {
  py::array_t<float> arr({v.nz(), v.ny(), v.nx()});
  std::copy(v.data().begin(), v.data().end(), arr.mutable_data());
  return arr;
}

py::array_t<float> image_to_array(const Image2D& img) {
  py::array_t<float> arr({img.rows, img.cols});
  std::copy(img.data.begin(), img.data.end(), arr.mutable_data());
  return arr;
}

}  // namespace

PYBIND11_MODULE(_dualcycle, m) {
  m.doc() = "Dual-view 3D deconvolution and fusion core";

  py::register_exception<ConfigError>(m, "ConfigError");
  py::register_exception<VolumeError>(m, "VolumeError");

  py::class_<Volume3D>(m, "Volume3D")
      .def(py::init([](py::array_t<float, py::array::c_style | py::array::forcecast> arr,
                       std::array<double, 3> spacing) {
             return volume_from_array(arr, spacing);
           }),
           py::arg("data"), py::arg("spacing") = std::array<double, 3>{1.0, 1.0, 1.0})
      .def_property_readonly("shape",
                             [](const Volume3D& v) {
                               return py::make_tuple(v.nz(), v.ny(), v.nx());
                             })
      .def_property_readonly("spacing", [](const Volume3D& v) { return v.spacing(); })
      .def("to_numpy", &volume_to_array)
      .def("min", &Volume3D::min_value)
      .def("max", &Volume3D::max_value);

  m.def("save_volume", &save_volume, py::arg("volume"), py::arg("path"));
  m.def("load_volume", &load_volume, py::arg("path"));

  m.def(
      "extract_slice",
      [](const Volume3D& v, const std::string& plane, int index) {
        SliceSpec s;
        if (plane == "xy")
          s.plane = Plane::XY;
        else if (plane == "xz")
          s.plane = Plane::XZ;
        else if (plane == "yz")
          s.plane = Plane::YZ;
        else
          throw VolumeError("plane must be one of xy, xz, yz");
        s.index = index;
        return image_to_array(extract_slice(v, s));
      },
      py::arg("volume"), py::arg("plane"), py::arg("index"));

  m.def(
      "max_intensity_projection",
      [](const Volume3D& v, const std::string& axis) {
        Axis a;
        if (axis == "z")
          a = Axis::Z;
        else if (axis == "y")
          a = Axis::Y;
        else if (axis == "x")
          a = Axis::X;
        else
          throw VolumeError("axis must be one of z, y, x");
        return image_to_array(max_intensity_projection(v, a));
      },
      py::arg("volume"), py::arg("axis"));

  m.def("resample_isotropic", &resample_isotropic, py::arg("volume"),
        py::arg("target_spacing_um"));

  py::class_<PSF>(m, "PSF")
      .def_property_readonly("kernel", [](const PSF& p) { return volume_to_array(p.kernel); })
      .def_readonly("sigma", &PSF::sigma);

  m.def(
      "gaussian_psf",
      [](double sigma, const std::string& axis, int trunc_radius) {
        Axis a = axis == "z" ? Axis::Z : (axis == "y" ? Axis::Y : Axis::X);
        return gaussian_psf(sigma, a, trunc_radius);
      },
      py::arg("sigma"), py::arg("axis"), py::arg("trunc_radius") = -1);

  m.def("convolve3d", &convolve3d, py::arg("volume"), py::arg("kernel"));

  py::class_<PhantomSpec>(m, "PhantomSpec")
      .def(py::init<>())
      .def_readwrite("dims", &PhantomSpec::dims)
      .def_readwrite("line_count_range", &PhantomSpec::line_count_range)
      .def_readwrite("line_thickness_sigma", &PhantomSpec::line_thickness_sigma)
      .def_readwrite("elastic_grid", &PhantomSpec::elastic_grid)
      .def_readwrite("elastic_sigma", &PhantomSpec::elastic_sigma)
      .def_readwrite("seed", &PhantomSpec::seed);
  m.def("generate_phantom", &generate_phantom, py::arg("spec"));

  py::class_<SsimWindow>(m, "SsimWindow")
      .def(py::init<>())
      .def_readwrite("size", &SsimWindow::size)
      .def_readwrite("sigma", &SsimWindow::sigma);

  m.def("psnr", &psnr, py::arg("reference"), py::arg("test"), py::arg("data_range") = 1.0);
  m.def("ssim", &ssim, py::arg("reference"), py::arg("test"),
        py::arg("window") = SsimWindow{}, py::arg("k1") = 0.01, py::arg("k2") = 0.03,
        py::arg("data_range") = 1.0);

  py::class_<ViewPair>(m, "ViewPair")
      .def_property_readonly("view_a",
                             [](const ViewPair& p) { return volume_to_array(p.view_a); })
      .def_property_readonly("view_b",
                             [](const ViewPair& p) { return volume_to_array(p.view_b); });

  m.def(
      "simulate_views",
      [](const Volume3D& u, double sigma_a, double sigma_b, double matrix_bound,
         double translation_bound, std::uint64_t seed, bool apply_rotation) {
        const PSF psf_a = gaussian_psf(sigma_a, Axis::Z);
        const PSF psf_b = gaussian_psf(sigma_b, Axis::X);
        AffineMismatchSpec mm;
        mm.matrix_perturbation_bound = matrix_bound;
        mm.translation_bound = translation_bound;
        mm.seed = seed;
        NoiseSpec noise;
        return simulate_views(u, psf_a, psf_b, mm, noise, apply_rotation);
      },
      py::arg("volume"), py::arg("sigma_a") = 3.0, py::arg("sigma_b") = 3.0,
      py::arg("matrix_bound") = 0.0025, py::arg("translation_bound") = 0.05,
      py::arg("seed") = 0, py::arg("apply_rotation") = false);

  m.def(
      "fuse_average",
      [](const Volume3D& a, const Volume3D& b) {
        ViewPair p;
        p.view_a = a;
        p.view_b = b;
        return fuse_average(p);
      },
      py::arg("view_a"), py::arg("view_b"));

  m.def(
      "joint_richardson_lucy",
      [](const Volume3D& a, const Volume3D& b, double sigma_a, double sigma_b,
         int iterations) {
        ViewPair p;
        p.view_a = a;
        p.view_b = b;
        RLConfig cfg;
        cfg.iterations = iterations;
        return joint_richardson_lucy(p, gaussian_psf(sigma_a, Axis::Z),
                                     gaussian_psf(sigma_b, Axis::X), cfg);
      },
      py::arg("view_a"), py::arg("view_b"), py::arg("sigma_a") = 3.0,
      py::arg("sigma_b") = 3.0, py::arg("iterations") = 40);

  m.def("preprocess_volume", &preprocess_volume, py::arg("volume"),
        py::arg("truncate_floor") = 78.0, py::arg("target_spacing_um") = 0.1625);

  m.def(
      "run_experiment",
      [](const std::string& config_json) {
        const ExperimentConfig cfg = parse_experiment_config(config_json);
        py::list out;
        for (const auto& r : cmd_run(cfg)) {
          py::dict d;
          d["method"] = r.method;
          d["volume_id"] = r.volume_id;
          d["failed"] = r.failed;
          if (r.failed)
            d["error"] = r.error;
          else {
            d["psnr_db"] = r.psnr_db;
            d["ssim"] = r.ssim;
          }
          out.append(d);
        }
        return out;
      },
      py::arg("config_json"));
}
