#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <nlohmann/json.hpp>

#include <sstream>

#include "dimae/cli.hpp"
#include "dimae/data.hpp"
#include "dimae/errors.hpp"
#include "dimae/eval.hpp"
#include "dimae/fourier_aug.hpp"
#include "dimae/objective.hpp"
#include "dimae/patching.hpp"
#include "dimae/train.hpp"

namespace py = pybind11;
using namespace dimae;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

ImageTensor to_image(const Array& a, DomainId domain = kNoDomain) {
  if (a.ndim() != 3) throw ValidationError("expected a (C, H, W) array");
  ImageTensor img(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)), static_cast<int>(a.shape(2)), 0.0,
                  domain);
  std::copy(a.data(), a.data() + a.size(), img.data().begin());
  return img;
}

Array from_image(const ImageTensor& img) {
  Array out({img.channels(), img.height(), img.width()});
  std::copy(img.data().begin(), img.data().end(), out.mutable_data());
  return out;
}

Array planes_array(const std::vector<double>& v, const fourier::FourierPlanes& p) {
  Array out({p.channels, p.height, p.width});
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

// Python dicts go through JSON so the C++ defaults and validation apply.
nlohmann::json to_json(const py::object& obj) {
  if (obj.is_none()) return nlohmann::json::object();
  return nlohmann::json::parse(py::module_::import("json").attr("dumps")(obj).cast<std::string>());
}

patching::PatchSequence to_patches(const Array& a, int patch_size, int channels, int grid) {
  if (a.ndim() != 2) throw ValidationError("expected a (num_patches, patch_dim) array");
  patching::PatchSequence seq;
  seq.patch_size = patch_size;
  seq.channels = channels;
  seq.grid_h = seq.grid_w = grid;
  for (int i = 0; i < a.shape(0); ++i) seq.positions.push_back(i);
  seq.values.assign(a.data(), a.data() + a.size());
  if (static_cast<int>(a.shape(1)) != seq.patch_dim()) throw ValidationError("patch dimension mismatch");
  return seq;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Compiled core of the dimae toolkit";

  py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

  m.def("derive_seed", [](std::uint64_t root, const std::string& stream) { return derive_seed(root, stream); });

  m.def(
      "fft_decompose",
      [](const Array& img) {
        const auto p = fourier::fft_decompose(to_image(img));
        return py::make_tuple(planes_array(p.amplitude, p), planes_array(p.phase, p));
      },
      py::arg("image"), "Per-channel amplitude and phase of the 2-D DFT.");
  m.def(
      "fft_compose",
      [](const Array& amplitude, const Array& phase) {
        if (amplitude.ndim() != 3 || phase.ndim() != 3) throw ValidationError("expected (C, H, W) arrays");
        fourier::FourierPlanes p;
        p.channels = static_cast<int>(amplitude.shape(0));
        p.height = static_cast<int>(amplitude.shape(1));
        p.width = static_cast<int>(amplitude.shape(2));
        p.amplitude.assign(amplitude.data(), amplitude.data() + amplitude.size());
        p.phase.assign(phase.data(), phase.data() + phase.size());
        return from_image(fourier::fft_compose(p));
      },
      py::arg("amplitude"), py::arg("phase"));
  m.def(
      "style_view",
      [](const Array& x, const Array& aux, double lambda, double band_fraction) {
        return from_image(fourier::style_view(to_image(x), to_image(aux), lambda, band_fraction));
      },
      py::arg("x"), py::arg("aux"), py::arg("lam"), py::arg("band_fraction") = 1.0);
  m.def(
      "cp_style_mix",
      [](const Array& x, const std::vector<Array>& aux, std::uint64_t seed, const py::object& config) {
        const auto cfg = to_json(config).get<fourier::StyleMixConfig>();
        std::vector<ImageTensor> views;
        for (std::size_t k = 0; k < aux.size(); ++k) views.push_back(to_image(aux[k], static_cast<DomainId>(k + 1)));
        Rng rng(seed);
        fourier::MixRecord record;
        const auto out = fourier::cp_style_mix(to_image(x, 0), views, cfg, rng, &record);
        return py::make_tuple(from_image(out), py::module_::import("json").attr("loads")(nlohmann::json(record).dump()));
      },
      py::arg("x"), py::arg("aux"), py::arg("seed"), py::arg("config") = py::none(),
      "Style-mixed view of x from one auxiliary image per other domain; returns (image, record).");

  m.def(
      "patchify",
      [](const Array& img, int patch_size) {
        const auto seq = patching::patchify(to_image(img), patch_size);
        Array out({seq.rows(), seq.patch_dim()});
        std::copy(seq.values.begin(), seq.values.end(), out.mutable_data());
        return out;
      },
      py::arg("image"), py::arg("patch_size"));
  m.def(
      "sample_mask",
      [](int num_patches, double p_visible, std::uint64_t seed) {
        const auto plan = patching::sample_mask(num_patches, p_visible, seed);
        return py::make_tuple(plan.visible_idx, plan.masked_idx);
      },
      py::arg("num_patches"), py::arg("p_visible"), py::arg("seed"), "Returns (visible, masked) index lists.");
  m.def(
      "masked_mse",
      [](const Array& pred, const Array& original, int patch_size, double p_visible, std::uint64_t seed) {
        const auto img = to_image(original);
        const int grid = img.height() / patch_size;
        const auto plan = patching::sample_mask(grid * grid, p_visible, seed);
        return objective::masked_mse(to_patches(pred, patch_size, img.channels(), grid),
                                     objective::make_target(img, plan, patch_size));
      },
      py::arg("pred"), py::arg("original"), py::arg("patch_size"), py::arg("p_visible"), py::arg("seed"),
      "Masked-patch MSE with the mask drawn by sample_mask(num_patches, p_visible, seed).");

  m.def(
      "lr_at",
      [](std::int64_t step, std::int64_t total, const py::object& config) {
        return train::lr_at(step, total, to_json(config).get<train::TrainConfig>());
      },
      py::arg("step"), py::arg("total_steps"), py::arg("config") = py::none());

  m.def(
      "generate_synthetic",
      [](const py::object& spec) {
        const auto ds = data::generate_synthetic(to_json(spec).get<data::SyntheticSpec>());
        const auto& first = ds.samples.at(0).image;
        py::array_t<double> images({static_cast<py::ssize_t>(ds.size()), static_cast<py::ssize_t>(first.channels()),
                                    static_cast<py::ssize_t>(first.height()), static_cast<py::ssize_t>(first.width())});
        std::vector<int> domains, labels;
        double* dst = images.mutable_data();
        for (const auto& s : ds.samples) {
          dst = std::copy(s.image.data().begin(), s.image.data().end(), dst);
          domains.push_back(s.domain);
          labels.push_back(s.label);
        }
        py::dict out;
        out["images"] = images;
        out["domains"] = py::array_t<int>(domains.size(), domains.data());
        out["labels"] = py::array_t<int>(labels.size(), labels.data());
        out["domain_names"] = ds.registry.names();
        out["class_names"] = ds.class_names;
        return out;
      },
      py::arg("spec") = py::none());

  m.def(
      "linear_probe",
      [](const Eigen::MatrixXd& train_x, const std::vector<int>& train_y, const Eigen::MatrixXd& test_x,
         const std::vector<int>& test_y, int num_classes, const py::object& config) {
        return eval::linear_probe(train_x, train_y, test_x, test_y, num_classes,
                                  to_json(config).get<eval::ProbeConfig>())
            .accuracy;
      },
      py::arg("train_x"), py::arg("train_y"), py::arg("test_x"), py::arg("test_y"), py::arg("num_classes"),
      py::arg("config") = py::none());

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        int code = 0;
        {
          py::gil_scoped_release release;
          code = cli::dispatch(args, out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs a dimae subcommand in-process; returns (exit_code, stdout, stderr).");
}
