#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <memory>

#include "cli.hpp"
#include "latinf/attack_eval.hpp"
#include "latinf/curation.hpp"
#include "latinf/errors.hpp"
#include "latinf/toybench.hpp"
#include "latinf/trainer.hpp"

namespace py = pybind11;
using namespace latinf;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(std::move(shape), std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
  Array out(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
  std::copy(t.data(), t.data() + t.numel(), out.mutable_data());
  return out;
}

ImageBatch to_batch(const Array& a) {
  if (a.ndim() != 4) throw ContractError("expected an [N, C, H, W] image array");
  return ImageBatch(to_tensor(a));
}

}  // namespace

PYBIND11_MODULE(_latinf, m) {
  m.doc() = "Target-conditioned adversarial generator toolkit";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ContractError>(m, "ContractError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_OSError);
  py::register_exception<IntegrityError>(m, "IntegrityError", PyExc_RuntimeError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

  m.def("run_cli", [](std::vector<std::string> args) {
    args.insert(args.begin(), "latinf");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    py::gil_scoped_release release;
    return cli::run(static_cast<int>(argv.size()), argv.data());
  }, py::arg("args"), "Runs one CLI command and returns its exit code.");

  m.def("write_toy_dataset", [](const std::string& root, int train, int val, int test, std::uint64_t seed,
                                double contrast) {
    toy::DatasetOptions o;
    o.train_per_class = train;
    o.val_per_class = val;
    o.test_per_class = test;
    o.seed = seed;
    o.contrast = contrast;
    toy::write_dataset(root, o);
  }, py::arg("root"), py::arg("train") = 120, py::arg("val") = 30, py::arg("test") = 30, py::arg("seed") = 7,
        py::arg("contrast") = 0.2);

  m.def("cosine_distance", [](const std::vector<double>& a, const std::vector<double>& b, double floor) {
    return cosine_distance(a, b, floor);
  }, py::arg("a"), py::arg("b"), py::arg("norm_floor") = 1e-12);

  m.def("greedy_select_classes", [](const Array& features, const std::vector<int>& labels, std::size_t n,
                                    std::uint64_t seed) {
    if (features.ndim() != 2 || features.shape(0) != static_cast<py::ssize_t>(labels.size()))
      throw ContractError("features must be [K, D] with one label per row");
    const Tensor f = to_tensor(features);
    std::vector<ClassPrototype> protos;
    const auto d = f.dim(1);
    for (std::size_t i = 0; i < labels.size(); ++i) {
      Tensor row({d});
      std::copy(f.data() + static_cast<std::int64_t>(i) * d, f.data() + static_cast<std::int64_t>(i + 1) * d, row.data());
      protos.push_back({labels[i], row, 1});
    }
    return greedy_select_classes(protos, n, seed);
  }, py::arg("features"), py::arg("labels"), py::arg("n"), py::arg("seed"));

  m.def("clip_to_budget", [](const Array& raw, const Array& source, double eps) {
    return to_array(clip_to_budget(to_batch(raw), to_batch(source), eps).tensor());
  }, py::arg("raw"), py::arg("source"), py::arg("eps"));

  py::class_<ModelHandle>(m, "Model")
      .def_property_readonly("id", &ModelHandle::id)
      .def_property_readonly("feature_dim", &ModelHandle::feature_dim)
      .def_property_readonly("num_labels", &ModelHandle::num_labels)
      .def("features", [](const ModelHandle& h, const Array& x) { return to_array(extract_features(h, to_batch(x))); })
      .def("logits", [](const ModelHandle& h, const Array& x) { return to_array(classify(h, to_batch(x)).values); })
      .def("predict", [](const ModelHandle& h, const Array& x) { return predict(h, to_batch(x), 64); });

  py::class_<ModelRegistry>(m, "Registry")
      .def_static("load", [](const std::string& path) { return ModelRegistry::load(path); }, py::arg("path"))
      .def("ids", &ModelRegistry::ids)
      .def("model", [](const ModelRegistry& r, const std::string& id, const std::string& role) {
        return r.load_model(id, parse_role(role));
      }, py::arg("id"), py::arg("role") = "extractor");

  py::class_<Generator, std::shared_ptr<Generator>>(m, "Generator")
      .def(py::init([](const std::string& config_json) {
        return std::make_shared<Generator>(GeneratorConfig::from_json(nlohmann::json::parse(config_json)));
      }), py::arg("config_json"))
      .def_static("from_checkpoint", [](const std::string& dir) {
        LoadedCheckpoint ck = load_checkpoint(dir);
        return std::shared_ptr<Generator>(std::move(ck.generator));
      }, py::arg("dir"))
      .def_property_readonly("config_json", [](const Generator& g) { return g.config().to_json().dump(); })
      .def_property_readonly("epsilon", [](const Generator& g) { return g.config().epsilon; })
      .def("generate_raw", [](const Generator& g, const Array& x, const Array& f) {
        return to_array(generate_raw(g, to_batch(x), to_tensor(f)).tensor());
      }, py::arg("source"), py::arg("target_features"))
      .def("craft", [](const Generator& g, const Array& x, const Array& f) {
        return to_array(craft(g, to_batch(x), to_tensor(f)).tensor());
      }, py::arg("source"), py::arg("target_features"));

  m.def("mi_fgsm_targeted", [](const ModelHandle& model, const Array& x, const std::vector<int>& targets, double eps,
                               int steps, double mu) {
    MiOptions o;
    o.eps = eps;
    o.steps = steps;
    o.mu = mu;
    return to_array(mi_fgsm_targeted(model, to_batch(x), targets, o).tensor());
  }, py::arg("model"), py::arg("x"), py::arg("targets"), py::arg("eps") = 16.0 / 255.0, py::arg("steps") = 300,
        py::arg("mu") = 1.0);

  m.attr("__version__") = LATINF_VERSION;
}
