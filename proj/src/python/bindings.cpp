#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "rmx/checkpoint.hpp"
#include "rmx/data.hpp"
#include "rmx/image.hpp"
#include "rmx/loss.hpp"
#include "rmx/trainer.hpp"
#include "rmx/verify.hpp"

namespace py = pybind11;
using namespace rmx;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(std::move(shape), std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
  Array out(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
  std::copy(t.ptr(), t.ptr() + t.numel(), out.mutable_data());
  return out;
}

// [3,H,W] or [N,3,H,W]
Tensor batch_of(const Array& a) {
  Tensor t = to_tensor(a);
  if (t.rank() == 3) t = t.reshaped({1, t.dim(0), t.dim(1), t.dim(2)});
  if (t.rank() != 4 || t.dim(1) != 3)
    throw ShapeError("expected an image of shape [3,H,W] or [N,3,H,W], got " + shape_str(t.shape()));
  return t;
}

ColorSpace space_of(const std::string& s) {
  if (s == "rgb") return ColorSpace::rgb;
  if (s == "y") return ColorSpace::y;
  if (s == "ycbcr") return ColorSpace::ycbcr;
  throw ConfigError("color space must be rgb, y or ycbcr, got '" + s + "'");
}

ModelConfig config_from(const std::string& text, const py::kwargs& overrides) {
  std::string full = text;
  if (!full.empty() && full.back() != '\n') full += '\n';
  for (const auto& [k, v] : overrides) {
    std::string value = py::str(v);
    if (py::isinstance<py::bool_>(v)) value = v.cast<bool>() ? "true" : "false";
    full += py::str(k).cast<std::string>() + " = " + value + "\n";
  }
  return ModelConfig::parse(full);
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "64-bit CPU implementation of the hybrid restoration network";

  py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);

  py::class_<Model>(m, "Model")
      .def(py::init([](const std::string& config, const py::kwargs& kw) { return Model(config_from(config, kw)); }),
           py::arg("config") = "", "Builds a model from `key = value` text plus keyword overrides.")
      .def_static("load", [](const std::string& path) { return load_model(read_checkpoint(path)); })
      .def("save", [](Model& self, const std::string& path) { write_checkpoint(path, capture_model(self)); })
      .def_property_readonly("config", [](const Model& self) { return self.config().to_text(); })
      .def("param_count", &Model::param_count)
      .def("padded_extent", &Model::padded_extent, py::arg("height"), py::arg("width"))
      .def("zero_heads", &Model::zero_heads)
      .def(
          "forward",
          [](Model& self, const Array& image, bool train) {
            const auto p = self.forward(batch_of(image), train ? NormMode::train : NormMode::eval);
            py::list out;
            for (const auto& s : p.scales) out.append(to_array(s));
            return out;
          },
          py::arg("image"), py::arg("train") = false, "All prediction scales, finest first.")
      .def(
          "restore",
          [](Model& self, const Array& image) {
            const bool single = image.ndim() == 3;
            Tensor out = self.forward(batch_of(image), NormMode::eval).final();
            if (single) out = out.reshaped({out.dim(1), out.dim(2), out.dim(3)});
            return to_array(out);
          },
          py::arg("image"))
      .def(
          "cost",
          [](const Model& self, std::int64_t h, std::int64_t w, int flops_per_mac) {
            const auto r = self.cost(h, w);
            py::list items;
            for (const auto& i : r.items) {
              py::dict d;
              d["name"] = i.name;
              d["params"] = i.params;
              d["macs"] = i.macs;
              d["elementwise"] = i.elementwise;
              items.append(d);
            }
            py::dict out;
            out["items"] = items;
            out["params"] = r.total_params();
            out["macs"] = r.total_macs();
            out["elementwise"] = r.total_elementwise();
            out["flops"] = r.total_flops(flops_per_mac);
            return out;
          },
          py::arg("height") = 256, py::arg("width") = 256, py::arg("flops_per_mac") = 1);

  m.def(
      "psnr",
      [](const Array& a, const Array& b, const std::string& space) {
        return psnr(to_metric_space(batch_of(a), space_of(space)), to_metric_space(batch_of(b), space_of(space)));
      },
      py::arg("pred"), py::arg("target"), py::arg("space") = "rgb");
  m.def(
      "ssim",
      [](const Array& a, const Array& b, const std::string& space) {
        return ssim(to_metric_space(batch_of(a), space_of(space)), to_metric_space(batch_of(b), space_of(space)));
      },
      py::arg("pred"), py::arg("target"), py::arg("space") = "rgb");
  m.def(
      "total_loss",
      [](const std::vector<Array>& preds, const Array& clean, double lambda) {
        std::vector<Tensor> p;
        for (const auto& a : preds) p.push_back(to_tensor(a));
        const auto targets = target_pyramid(to_tensor(clean), static_cast<std::int64_t>(p.size()));
        return total_loss(p, targets, LossConfig{lambda})[0];
      },
      py::arg("preds"), py::arg("clean"), py::arg("lam") = 0.1);

  m.def(
      "procedural_image",
      [](std::int64_t h, std::int64_t w, std::uint64_t seed) { return to_array(procedural_image(h, w, seed)); },
      py::arg("height"), py::arg("width"), py::arg("seed") = 0);
  m.def(
      "synth_degrade",
      [](const Array& clean, const std::string& tag, std::uint64_t seed) {
        const auto p = synth_degrade(to_tensor(clean), tag, seed);
        return py::make_tuple(to_array(p.degraded), to_array(p.clean));
      },
      py::arg("clean"), py::arg("tag"), py::arg("seed"), "Returns (degraded, clean); clean may be cropped.");
  m.def(
      "load_image", [](const std::string& path) { return to_array(load_image(path)); }, py::arg("path"));
  m.def(
      "save_image", [](const Array& img, const std::string& path) { save_image(to_tensor(img), path); },
      py::arg("image"), py::arg("path"));

  m.def(
      "verify",
      [](const std::string& suite) {
        const auto which = suite == "grads" ? VerifySuite::grads
                           : suite == "oracles" ? VerifySuite::oracles
                           : suite == "all"     ? VerifySuite::all
                                                : throw ConfigError("suite must be grads, oracles or all");
        py::list out;
        run_verify(which, [&](const CheckResult& r) {
          py::dict d;
          d["suite"] = r.suite;
          d["name"] = r.name;
          d["passed"] = r.passed;
          d["value"] = r.value;
          d["tolerance"] = r.tolerance;
          out.append(d);
        });
        return out;
      },
      py::arg("suite") = "oracles");
}
