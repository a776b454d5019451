#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "davit/dcsa.hpp"
#include "davit/model.hpp"
#include "davit/trainer.hpp"

namespace py = pybind11;
using namespace davit;

namespace {

using ImageArray = py::array_t<double, py::array::c_style | py::array::forcecast>;
using LabelArray = py::array_t<uint8_t, py::array::c_style | py::array::forcecast>;

Image to_image(const ImageArray& a) {
  if (a.ndim() != 3 || a.shape(2) != 3) throw std::invalid_argument("image must have shape (H, W, 3)");
  Image img(a.shape(0), a.shape(1));
  std::copy(a.data(), a.data() + a.size(), img.pixels.begin());
  return img;
}

Mask to_mask(const LabelArray& a) {
  if (a.ndim() != 2) throw std::invalid_argument("mask must have shape (H, W)");
  Mask m(a.shape(0), a.shape(1));
  std::copy(a.data(), a.data() + a.size(), m.labels.begin());
  return m;
}

ImageArray from_image(const Image& img) {
  ImageArray a({img.height, img.width, int64_t{3}});
  std::copy(img.pixels.begin(), img.pixels.end(), a.mutable_data());
  return a;
}

LabelArray from_mask(const Mask& m) {
  LabelArray a({m.height, m.width});
  std::copy(m.labels.begin(), m.labels.end(), a.mutable_data());
  return a;
}

IndexMap to_index(const LabelArray& a) {
  const Mask m = to_mask(a);
  IndexMap map(1, m.height, m.width);
  for (size_t i = 0; i < m.labels.size(); ++i) map.values[i] = m.labels[i];
  return map;
}

std::vector<SampleRecord> to_records(const std::vector<std::pair<ImageArray, LabelArray>>& samples) {
  std::vector<SampleRecord> out;
  for (size_t i = 0; i < samples.size(); ++i) {
    SampleRecord r;
    r.id = "py" + std::to_string(i);
    r.image = to_image(samples[i].first);
    r.mask = to_mask(samples[i].second);
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "DA-VIT segmentation core";
  m.attr("NUM_CLASSES") = kNumClasses;
  m.attr("IGNORE_LABEL") = kIgnoreLabel;

  py::class_<ModelConfig>(m, "ModelConfig")
      .def(py::init<>())
      .def_static("preset", &ModelConfig::preset, py::arg("name"))
      .def_readwrite("name", &ModelConfig::name)
      .def_readwrite("base_channels", &ModelConfig::base_channels)
      .def_readwrite("depths", &ModelConfig::depths)
      .def_readwrite("num_classes", &ModelConfig::num_classes)
      .def_readwrite("mlp_ratio", &ModelConfig::mlp_ratio)
      .def_readwrite("input_height", &ModelConfig::input_height)
      .def_readwrite("input_width", &ModelConfig::input_width)
      .def("validate", &ModelConfig::validate)
      .def("canonical_text", &ModelConfig::canonical_text)
      .def("__repr__", [](const ModelConfig& c) { return "<ModelConfig " + c.name + ">"; });

  py::class_<Model>(m, "Model")
      .def_property_readonly("config", &Model::config)
      .def_property_readonly("digest", &model_digest)
      .def("num_params", [](const Model& self) { return count_params(self); })
      .def("predict",
           [](const Model& self, const ImageArray& image) {
             const IndexMap map = [&] {
               py::gil_scoped_release release;
               return predict(self, to_image(image));
             }();
             return from_mask(index_to_mask(map, 0));
           },
           py::arg("image"), "Argmax class map for an (H, W, 3) image in [0, 1]")
      .def("save", [](const Model& self, const std::filesystem::path& p) { save_checkpoint(self, p); });

  m.def("build_model", &build_model, py::arg("config"), py::arg("seed") = 0);
  m.def("load_model", [](const std::filesystem::path& p) { return load_checkpoint(p); }, py::arg("path"));

  m.def("count_params", py::overload_cast<const ModelConfig&>(&count_params), py::arg("config"));
  m.def("flops", [](const ModelConfig& c, int64_t h, int64_t w) { return flop_report(c, h, w).total; },
        py::arg("config"), py::arg("height") = 512, py::arg("width") = 512);
  m.def("equivalent_kernel_size", &dcsa::equivalent_kernel_size, py::arg("kernel"), py::arg("dilation"));
  m.def("param_reduction_rho",
        [](const std::vector<int>& kernels, int h0, int w0) { return dcsa::param_reduction_rho(kernels, h0, w0); },
        py::arg("branch_kernels"), py::arg("h0"), py::arg("w0"));
  m.def("receptive_field", [] {
    const auto e = dcsa::impulse_receptive_field(dcsa::Weights::zeros(dcsa::Config{}));
    return std::make_pair(e.height, e.width);
  });

  m.def("synth_generate",
        [](size_t n, uint64_t seed, int64_t size) {
          std::vector<std::pair<ImageArray, LabelArray>> out;
          for (const auto& r : synth_generate(n, seed, size)) out.emplace_back(from_image(r.image), from_mask(r.mask));
          return out;
        },
        py::arg("n"), py::arg("seed"), py::arg("size") = 64, "List of (image, mask) pairs");

  m.def("metrics",
        [](const LabelArray& pred, const LabelArray& gt, bool strict) {
          const auto cm = confusion_matrix(to_index(pred), to_index(gt), kNumClasses);
          const auto mt = Metrics::from_confusion(cm, strict ? IouMode::Strict : IouMode::ExcludeEmpty);
          py::dict d;
          d["pa"] = mt.pa;
          d["miou"] = mt.miou;
          d["per_class_iou"] = mt.per_class_iou;
          return d;
        },
        py::arg("pred"), py::arg("gt"), py::arg("strict") = false);

  m.def("five_fold_split",
        [](size_t n, uint64_t seed) {
          const auto plan = five_fold_split(n, seed);
          return std::vector<std::vector<size_t>>(plan.folds.begin(), plan.folds.end());
        },
        py::arg("n"), py::arg("seed") = 0);

  m.def("train",
        [](const Model& init, const std::vector<std::pair<ImageArray, LabelArray>>& samples, int epochs, int batch_size,
           double lr, uint64_t seed, int64_t max_iterations) {
          TrainConfig tc;
          tc.epochs = epochs;
          tc.batch_size = batch_size;
          tc.lr = lr;
          tc.seed = seed;
          tc.max_iterations = max_iterations;
          const auto data = to_records(samples);
          py::gil_scoped_release release;
          auto res = train(init, data, tc);
          std::vector<double> losses;
          for (const auto& e : res.history.epochs) losses.push_back(e.loss);
          return std::make_pair(std::move(res.model), losses);
        },
        py::arg("model"), py::arg("samples"), py::arg("epochs") = 10, py::arg("batch_size") = 8,
        py::arg("lr") = 1e-3, py::arg("seed") = 0, py::arg("max_iterations") = 0,
        "Returns (trained model, per-epoch mean loss)");
}
