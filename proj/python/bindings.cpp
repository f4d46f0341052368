#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "sepm/audio.hpp"
#include "sepm/bench.hpp"
#include "sepm/checkpoint.hpp"
#include "sepm/metrics.hpp"
#include "sepm/separator.hpp"
#include "sepm/ssm.hpp"

namespace py = pybind11;
using namespace sepm;

namespace {

SeparatorConfig config_from_dict(const py::dict& d) {
  SeparatorConfig cfg;
  for (auto item : d) {
    const std::string key = py::cast<std::string>(item.first);
    std::string value;
    if (py::isinstance<py::bool_>(item.second))
      value = py::cast<bool>(item.second) ? "true" : "false";
    else
      value = py::cast<std::string>(py::str(item.second));
    bool found = false;
    for (const auto& f : separator_config_fields())
      if (key == f.name) {
        f.set(cfg, value);
        found = true;
        break;
      }
    if (!found) throw ConfigError("unknown config key: " + key);
  }
  cfg.validate();
  return cfg;
}

py::dict config_to_dict(const SeparatorConfig& cfg) {
  py::dict d;
  for (const auto& f : separator_config_fields()) {
    const std::string v = f.get(cfg);
    if (v == "true" || v == "false")
      d[f.name] = v == "true";
    else
      d[f.name] = std::stoll(v);
  }
  return d;
}

template <typename T>
Tensor<T> tensor_1d(const py::array_t<T, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 1) throw ShapeError("expected a 1-D array");
  std::vector<T> v(a.data(), a.data() + a.size());
  return Tensor<T>::from({static_cast<std::int64_t>(a.size())}, std::move(v));
}

template <typename T>
py::array_t<T> to_numpy_2d(const std::vector<T>& data, std::int64_t rows, std::int64_t cols) {
  py::array_t<T> out({rows, cols});
  std::copy(data.begin(), data.end(), out.mutable_data());
  return out;
}

class PySeparator {
 public:
  PySeparator(const py::dict& config, std::uint64_t seed)
      : weights_(build_separator<float>(config_from_dict(config), seed, /*requires_grad=*/false)) {}

  explicit PySeparator(SeparatorWeights<float> w) : weights_(std::move(w)) {}

  static PySeparator load(const std::string& path) {
    return PySeparator(load_separator<float>(path, /*requires_grad=*/false));
  }

  void save(const std::string& path) const {
    save_checkpoint<float>(path, weights_.cfg, weights_.params);
  }

  py::array_t<float> forward(
      const py::array_t<float, py::array::c_style | py::array::forcecast>& wave) const {
    if (wave.ndim() != 1) throw ShapeError("forward expects a 1-D waveform");
    const std::int64_t l = static_cast<std::int64_t>(wave.size());
    std::vector<float> v(wave.data(), wave.data() + l);
    Tensor<float> x = Tensor<float>::from({1, l}, std::move(v));
    Tensor<float> est = separator_forward(weights_, x);
    return to_numpy_2d(est.values(), weights_.cfg.n_sources, l);
  }

  py::dict config() const { return config_to_dict(weights_.cfg); }
  std::int64_t param_count() const { return count_params(weights_.cfg); }

 private:
  SeparatorWeights<float> weights_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Mamba U-Net speech separation: selective-scan core, separator, metrics, mixing";

  py::register_exception<ConfigError>(m, "ConfigurationError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataFormatError", PyExc_IOError);
  py::register_exception<NumericError>(m, "NumericalError", PyExc_ArithmeticError);

  m.def("count_params", [](const py::dict& cfg) { return count_params(config_from_dict(cfg)); },
        py::arg("config"), "Closed-form parameter count for a configuration.");
  m.def("count_macs",
        [](const py::dict& cfg, double seconds) {
          return count_macs(config_from_dict(cfg), seconds);
        },
        py::arg("config"), py::arg("seconds") = 1.0,
        "Analytic multiply-accumulate count for a forward pass.");
  m.def("lookahead_samples",
        [](const py::dict& cfg) { return lookahead_samples(config_from_dict(cfg)); },
        py::arg("config"), "Future-context window of a causal configuration, in samples.");
  m.def("default_config", [] { return config_to_dict(SeparatorConfig{}); });

  py::class_<PySeparator>(m, "Separator")
      .def(py::init<const py::dict&, std::uint64_t>(), py::arg("config"), py::arg("seed") = 0)
      .def_static("load", &PySeparator::load, py::arg("path"))
      .def("save", &PySeparator::save, py::arg("path"))
      .def("forward", &PySeparator::forward, py::arg("waveform"),
           "Separate a 1-D mixture; returns [n_sources x L].")
      .def("config", &PySeparator::config)
      .def("param_count", &PySeparator::param_count);

  m.def("si_sdr",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& est,
           const py::array_t<double, py::array::c_style | py::array::forcecast>& ref) {
          return si_sdr(tensor_1d(est), tensor_1d(ref)).item();
        },
        py::arg("estimate"), py::arg("reference"),
        "Scale-invariant signal-to-distortion ratio in dB.");

  m.def("upit_loss",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& est,
           const py::array_t<double, py::array::c_style | py::array::forcecast>& ref,
           double clamp_db) {
          if (est.ndim() != 2 || ref.ndim() != 2) throw ShapeError("expected [n x L] arrays");
          std::vector<Tensor<double>> e, r;
          const auto n = est.shape(0);
          const auto l = est.shape(1);
          for (py::ssize_t i = 0; i < n; ++i) {
            std::vector<double> ev(est.data() + i * l, est.data() + (i + 1) * l);
            std::vector<double> rv(ref.data() + i * l, ref.data() + (i + 1) * l);
            e.push_back(Tensor<double>::from({static_cast<std::int64_t>(l)}, std::move(ev)));
            r.push_back(Tensor<double>::from({static_cast<std::int64_t>(l)}, std::move(rv)));
          }
          auto res = upit_loss<double>(e, r, clamp_db);
          return py::make_tuple(res.loss.item(), res.permutation);
        },
        py::arg("estimates"), py::arg("references"), py::arg("clamp_db") = 30.0,
        "Permutation-invariant loss; returns (loss, permutation).");

  m.def("synth_source",
        [](const std::string& kind, double duration_s, std::int64_t sample_rate,
           std::uint64_t seed) {
          auto buf = synth_source<double>(parse_source_kind(kind), duration_s, sample_rate, seed);
          return py::array_t<double>(buf.samples.size(), buf.samples.data());
        },
        py::arg("kind"), py::arg("duration_s"), py::arg("sample_rate") = 8000,
        py::arg("seed") = 0, "Deterministic unit-RMS synthetic source.");

  m.def("speed_perturb",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& x, double factor,
           std::int64_t sample_rate) {
          AudioBuffer<double> buf;
          buf.sample_rate = sample_rate;
          buf.samples.assign(x.data(), x.data() + x.size());
          auto out = speed_perturb(buf, factor);
          return py::array_t<double>(out.samples.size(), out.samples.data());
        },
        py::arg("waveform"), py::arg("factor"), py::arg("sample_rate") = 8000);

  m.def("dynamic_mix",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& a,
           const py::array_t<double, py::array::c_style | py::array::forcecast>& b, double snr_db,
           double speed_a, double speed_b, std::int64_t sample_rate) {
          AudioBuffer<double> ba, bb;
          ba.sample_rate = bb.sample_rate = sample_rate;
          ba.samples.assign(a.data(), a.data() + a.size());
          bb.samples.assign(b.data(), b.data() + b.size());
          MixSpec spec;
          spec.snr_db = snr_db;
          spec.speed_a = speed_a;
          spec.speed_b = speed_b;
          auto r = dynamic_mix(ba, bb, spec);
          auto arr = [](const AudioBuffer<double>& x) {
            return py::array_t<double>(x.samples.size(), x.samples.data());
          };
          return py::make_tuple(arr(r.mixture), arr(r.ref_a), arr(r.ref_b));
        },
        py::arg("source_a"), py::arg("source_b"), py::arg("snr_db") = 0.0,
        py::arg("speed_a") = 1.0, py::arg("speed_b") = 1.0, py::arg("sample_rate") = 8000,
        "Gain-scaled mixture; returns (mixture, ref_a, ref_b) with mixture == ref_a + ref_b.");

  m.def("selective_scan",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& x,
           const py::array_t<double, py::array::c_style | py::array::forcecast>& a_log,
           const py::array_t<double, py::array::c_style | py::array::forcecast>& b,
           const py::array_t<double, py::array::c_style | py::array::forcecast>& c,
           const py::array_t<double, py::array::c_style | py::array::forcecast>& delta,
           bool parallel) {
          if (x.ndim() != 2 || a_log.ndim() != 2 || b.ndim() != 2 || c.ndim() != 2 ||
              delta.ndim() != 2)
            throw ShapeError("selective_scan expects 2-D arrays");
          auto t2 = [](const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
            std::vector<double> v(a.data(), a.data() + a.size());
            return Tensor<double>::from(
                {static_cast<std::int64_t>(a.shape(0)), static_cast<std::int64_t>(a.shape(1))},
                std::move(v));
          };
          Tensor<double> y = ssm_scan(t2(x), t2(a_log), t2(b), t2(c), t2(delta), Tensor<double>(),
                                      parallel ? ScanAlgo::Parallel : ScanAlgo::Sequential);
          return to_numpy_2d(y.values(), y.dim(0), y.dim(1));
        },
        py::arg("x"), py::arg("a_log"), py::arg("b"), py::arg("c"), py::arg("delta"),
        py::arg("parallel") = false,
        "Diagonal selective-scan recurrence: x [d,L], a_log [d,N], b/c [N,L], delta [d,L].");
}
