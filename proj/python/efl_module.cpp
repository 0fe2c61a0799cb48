#include "efl/cond/conditioning.hpp"
#include "efl/eval/metrics.hpp"
#include "efl/ldm/diffusion.hpp"
#include "efl/pipeline/stages.hpp"

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

namespace py = pybind11;
using efl::nn::Tensor;
using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

namespace {

Tensor to_tensor(const Array& a) {
  std::vector<int> shape(a.shape(), a.shape() + a.ndim());
  return Tensor(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  Array out(shape);
  std::copy(t.storage().begin(), t.storage().end(), out.mutable_data());
  return out;
}

using Stage = void (*)(const efl::pipeline::RunConfig&, std::ostream&);

const std::map<std::string, Stage> kStages = {
    {"synthesize", efl::pipeline::cmd_synthesize}, {"preprocess", efl::pipeline::cmd_preprocess},
    {"curate", efl::pipeline::cmd_curate},         {"train-vllm", efl::pipeline::cmd_train_vllm},
    {"train-ldm", efl::pipeline::cmd_train_ldm},   {"generate", efl::pipeline::cmd_generate},
    {"evaluate", efl::pipeline::cmd_evaluate}};

std::string run_stage(const std::string& stage, const std::string& config, const std::vector<std::string>& overrides,
                      std::optional<std::uint64_t> seed) {
  const auto it = kStages.find(stage);
  EFL_CHECK(it != kStages.end(), efl::Errc::config, "unknown stage '" + stage + "'");
  const auto cfg = efl::pipeline::load_run_config(config, overrides, seed);
  std::ostringstream log;
  {
    py::gil_scoped_release release;
    efl::pipeline::WorkDirLock lock(cfg.work_dir);
    it->second(cfg, log);
  }
  return log.str();
}

}  // namespace

PYBIND11_MODULE(_efl, m) {
  m.doc() = "Egocentric action frame generation: pipeline stages and numeric kernels.";

  static py::exception<efl::Error> error(m, "EflError");
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const efl::Error& e) {
      py::object exc = py::reinterpret_borrow<py::object>(error.ptr())(std::string(e.what()));
      exc.attr("exit_code") = efl::pipeline::exit_code_for(e.code());
      PyErr_SetObject(error.ptr(), exc.ptr());
    }
  });

  m.attr("__version__") = efl::pipeline::code_version();
  m.attr("STAGES") = std::vector<std::string>{"synthesize", "preprocess", "curate", "train-vllm",
                                              "train-ldm", "generate", "evaluate"};

  m.def("run_stage", &run_stage, py::arg("stage"), py::arg("config") = "",
        py::arg("overrides") = std::vector<std::string>{}, py::arg("seed") = py::none(),
        "Run one pipeline stage; returns its log.");

  m.def(
      "noise_schedule",
      [](int T, double beta_start, double beta_end) {
        const auto s = efl::ldm::NoiseSchedule::linear(T, beta_start, beta_end);
        return py::dict(py::arg("betas") = s.betas, py::arg("alpha_bars") = s.alpha_bars);
      },
      py::arg("T") = 1000, py::arg("beta_start") = 1e-4, py::arg("beta_end") = 0.02);

  m.def(
      "inference_timesteps",
      [](int steps, int T) { return efl::ldm::NoiseSchedule::linear(T).inference_timesteps(steps); },
      py::arg("steps"), py::arg("T") = 1000);

  m.def(
      "forward_diffuse",
      [](const Array& z0, int t, const Array& noise) {
        return to_array(efl::ldm::forward_diffuse(to_tensor(z0), t, to_tensor(noise), efl::ldm::NoiseSchedule::linear()));
      },
      py::arg("z0"), py::arg("t"), py::arg("noise"));

  m.def(
      "cfg_combine",
      [](const Array& e_null, const Array& e_image, const Array& e_full, double s_x, double s_c) {
        return to_array(efl::ldm::cfg_combine(to_tensor(e_null), to_tensor(e_image), to_tensor(e_full), {s_x, s_c}));
      },
      py::arg("e_null"), py::arg("e_image"), py::arg("e_full"), py::arg("s_x") = 7.5, py::arg("s_c") = 1.5);

  m.def(
      "attention",
      [](const Array& q, const Array& k, const Array& v, int valid_keys) {
        using efl::nn::Var;
        return to_array(efl::ldm::attention(Var(to_tensor(q)), Var(to_tensor(k)), Var(to_tensor(v)), valid_keys).value());
      },
      py::arg("q"), py::arg("k"), py::arg("v"), py::arg("valid_keys") = -1);

  m.def(
      "conditioning_rows",
      [](const std::string& mode, int N, int M) {
        efl::cond::CondConfig c;
        c.text_tokens = N;
        c.image_tokens = M;
        return efl::cond::expected_rows(efl::cond::parse_mode(mode), c);
      },
      py::arg("mode"), py::arg("N") = 32, py::arg("M") = 16);

  m.def(
      "psnr", [](const Array& a, const Array& b) { return efl::eval::psnr(to_tensor(a), to_tensor(b)); }, py::arg("a"),
      py::arg("b"));

  m.def("fid", &efl::eval::fid, py::arg("real"), py::arg("generated"));

  m.def(
      "transition_time_bins",
      [](const std::vector<double>& deltas, int k) {
        const auto b = efl::eval::transition_time_bins(deltas, k);
        return py::dict(py::arg("thresholds") = b.thresholds, py::arg("bins") = b.bins, py::arg("counts") = b.counts,
                        py::arg("degenerate") = b.degenerate);
      },
      py::arg("deltas"), py::arg("k") = 4);
}
