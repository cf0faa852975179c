#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "spfl/aggregation.hpp"
#include "spfl/attacks.hpp"
#include "spfl/losses.hpp"
#include "spfl/net.hpp"
#include "spfl/runner.hpp"

namespace py = pybind11;
using namespace spfl;

namespace {

using Arr = py::array_t<double, py::array::c_style | py::array::forcecast>;
using ArrF = py::array_t<float, py::array::c_style | py::array::forcecast>;

Mat<double> mat_from(const Arr& a) {
  if (a.ndim() != 2) throw std::invalid_argument("expected a 2-D array");
  Mat<double> m({static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1))});
  std::copy_n(a.data(), m.size(), m.ptr());
  return m;
}

py::array_t<double> mat_to(const Mat<double>& m) {
  py::array_t<double> out({m.dim(0), m.dim(1)});
  std::copy_n(m.ptr(), m.size(), out.mutable_data());
  return out;
}

Tensor<double> tensor4_from(const Arr& a) {
  if (a.ndim() != 4) throw std::invalid_argument("expected a 4-D array");
  Tensor<double> t({static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)),
                    static_cast<int>(a.shape(2)), static_cast<int>(a.shape(3))});
  std::copy_n(a.data(), t.size(), t.ptr());
  return t;
}

std::vector<std::vector<float>> rows_from(const ArrF& a) {
  if (a.ndim() != 2) throw std::invalid_argument("expected a 2-D array");
  std::vector<std::vector<float>> rows(static_cast<size_t>(a.shape(0)));
  for (py::ssize_t i = 0; i < a.shape(0); ++i)
    rows[static_cast<size_t>(i)].assign(a.data() + i * a.shape(1),
                                        a.data() + (i + 1) * a.shape(1));
  return rows;
}

std::vector<float> vec_from(const ArrF& a) {
  return std::vector<float>(a.data(), a.data() + a.size());
}

py::array_t<float> vec_to(const std::vector<float>& v) {
  py::array_t<float> out(static_cast<py::ssize_t>(v.size()));
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

// Double-precision network handle for numpy interop.
class PyNetwork {
 public:
  explicit PyNetwork(const std::string& spec)
      : engine_(spec == "mnist_cnn"     ? NetworkSpec::mnist_cnn()
                : spec == "cifar_resnet" ? NetworkSpec::cifar_resnet()
                                         : NetworkSpec::parse(spec)) {}

  size_t param_count() const { return engine_.param_count(); }
  std::string spec_text() const { return engine_.spec().to_text(); }

  py::array_t<double> init(uint64_t seed) const {
    Rng rng = Rng::derive(seed, {stream::kInit});
    Params<double> p = engine_.init_params(rng);
    py::array_t<double> out(static_cast<py::ssize_t>(p.size()));
    std::copy(p.values.begin(), p.values.end(), out.mutable_data());
    return out;
  }

  py::array_t<double> forward(const Arr& params, const Arr& inputs) const {
    return mat_to(engine_.forward(wrap(params), tensor4_from(inputs), nullptr));
  }

  py::array_t<double> attention(const Arr& params, const Arr& inputs,
                                const std::vector<int>& classes,
                                int layer) const {
    Tensor<double> maps = attention_map(engine_, wrap(params),
                                        tensor4_from(inputs), classes, layer);
    py::array_t<double> out({maps.dim(0), maps.dim(1), maps.dim(2)});
    std::copy_n(maps.ptr(), maps.size(), out.mutable_data());
    return out;
  }

  std::vector<int> attention_layers() const { return engine_.attention_layers(); }

 private:
  Params<double> wrap(const Arr& a) const {
    Params<double> p{engine_.manifest(),
                     std::vector<double>(a.data(), a.data() + a.size())};
    return p;
  }
  Engine<double> engine_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "federated-learning poisoning workbench core";

  py::class_<PyNetwork>(m, "Network")
      .def(py::init<const std::string&>(), py::arg("spec"),
           "built-in name (mnist_cnn, cifar_resnet) or spec text")
      .def_property_readonly("param_count", &PyNetwork::param_count)
      .def("spec_text", &PyNetwork::spec_text)
      .def("init", &PyNetwork::init, py::arg("seed"))
      .def("forward", &PyNetwork::forward, py::arg("params"), py::arg("inputs"))
      .def("attention", &PyNetwork::attention, py::arg("params"),
           py::arg("inputs"), py::arg("classes"), py::arg("layer"))
      .def("attention_layers", &PyNetwork::attention_layers);

  m.def("softmax", [](const Arr& z) { return mat_to(softmax(mat_from(z))); });
  m.def(
      "softened",
      [](const Arr& z, double tau) { return mat_to(softened(mat_from(z), tau)); },
      py::arg("logits"), py::arg("tau"));
  m.def(
      "task_loss",
      [](const Arr& p, const Arr& y) { return task_loss(mat_from(p), mat_from(y)); },
      py::arg("probs"), py::arg("onehot"));
  m.def(
      "kd_loss",
      [](const Arr& ref, const Arr& learner) {
        return kd_loss(mat_from(ref), mat_from(learner));
      },
      py::arg("reference"), py::arg("learner"));
  m.def("beta_schedule", &beta_schedule, py::arg("t"), py::arg("total_rounds"),
        py::arg("beta_final"));

  m.def(
      "fedavg",
      [](const ArrF& updates, const std::vector<double>& weights) {
        return vec_to(fedavg(rows_from(updates), weights));
      },
      py::arg("updates"), py::arg("weights") = std::vector<double>{});
  m.def("coordinate_median", [](const ArrF& updates) {
    return vec_to(coordinate_median(rows_from(updates)));
  });
  m.def(
      "geometric_median",
      [](const ArrF& updates, int iters, double eps) {
        auto r = geometric_median(rows_from(updates), iters, eps);
        return py::make_tuple(vec_to(r.value), r.converged);
      },
      py::arg("updates"), py::arg("iters") = 100, py::arg("eps") = 1e-6);
  m.def(
      "rlr_aggregate",
      [](const ArrF& deltas, int theta, double eta) {
        return vec_to(rlr_aggregate(rows_from(deltas), theta, eta));
      },
      py::arg("deltas"), py::arg("theta"), py::arg("eta"));

  m.def(
      "mpa_scale",
      [](const ArrF& x, const ArrF& w0, double gamma) {
        return vec_to(mpa_scale(vec_from(x), vec_from(w0), gamma));
      },
      py::arg("malicious"), py::arg("global_model"), py::arg("gamma"));
  m.def(
      "lie_craft",
      [](const ArrF& u, const ArrF& mu, const ArrF& sigma, double z) {
        return vec_to(lie_craft(vec_from(u), vec_from(mu), vec_from(sigma), z));
      },
      py::arg("backdoored"), py::arg("mu"), py::arg("sigma"), py::arg("z"));

  m.def(
      "synth_digits",
      [](int count, uint64_t seed, bool balanced) {
        Dataset d = synth_digits(count, seed, balanced);
        py::array_t<float> images({count, d.channels, d.height, d.width});
        std::copy(d.images.begin(), d.images.end(), images.mutable_data());
        py::array_t<uint8_t> labels(count);
        std::copy(d.labels.begin(), d.labels.end(), labels.mutable_data());
        return py::make_tuple(images, labels);
      },
      py::arg("count"), py::arg("seed") = 1, py::arg("balanced") = true);

  m.def("canonical_attacks", []() {
    py::list out;
    for (const auto& row : canonical_attacks()) {
      py::dict d;
      d["name"] = row.name;
      d["method"] = to_string(row.method);
      d["adversaries"] = row.adversaries;
      d["schedule"] = row.schedule_mnist;
      d["gamma"] = row.gamma;
      out.append(d);
    }
    return out;
  });

  m.def(
      "run_config",
      [](const std::string& text) {
        ExperimentConfig cfg = parse_experiment_config(text);
        ExperimentResult r = run_experiment(cfg);
        py::list out;
        for (const auto& rec : r.records) {
          py::dict d;
          d["round"] = rec.round;
          d["ma"] = rec.ma;
          d["asr"] = rec.asr;
          d["ba"] = rec.ba;
          out.append(d);
        }
        return out;
      },
      py::arg("config_text"),
      "run a full experiment from config text; returns per-round metrics");

  m.attr("__version__") = kVersion;
}
