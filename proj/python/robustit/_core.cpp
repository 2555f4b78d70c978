#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "robustit/augment.hpp"
#include "robustit/cli.hpp"
#include "robustit/defense.hpp"
#include "robustit/poison.hpp"
#include "robustit/trainer.hpp"

namespace py = pybind11;
using namespace rit;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

ad::Tensor to_tensor(const Array& a) {
  ad::Shape s(a.shape(), a.shape() + a.ndim());
  return ad::Tensor::from(std::move(s), std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const std::vector<double>& v, std::vector<py::ssize_t> shape) {
  Array out(shape);
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

py::tuple cli(std::vector<std::string> args) {
  args.insert(args.begin(), "robustit");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  std::ostringstream out, err;
  int code;
  {
    py::gil_scoped_release nogil;
    code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  }
  return py::make_tuple(code, out.str(), err.str());
}

// Thin stateful wrapper so Python can drive the optimizer on plain arrays.
class Optimizer {
 public:
  Optimizer(const std::string& kind, double weight_decay, double beta1, double beta2, double eps) {
    cfg_.optimizer = kind;
    cfg_.weight_decay = weight_decay;
    cfg_.adam_beta1 = beta1;
    cfg_.adam_beta2 = beta2;
    cfg_.adam_eps = eps;
    cfg_.validate();
  }

  Array step(const Array& param, const Array& grad, double lr) {
    if (param.size() != grad.size()) throw std::invalid_argument("param and grad sizes differ");
    auto t = to_tensor(param);
    auto p = ad::Tensor::from(t.shape(), t.data(), true);
    // Seed the grad buffer through a linear loss: d(sum(p*g))/dp = g.
    ad::backward(ad::sum_all(ad::mul(p, to_tensor(grad))));
    std::vector<ad::Tensor*> ps{&p};
    optimizer_update(ps, st_, cfg_, lr);
    return to_array(p.data(), std::vector<py::ssize_t>(param.shape(), param.shape() + param.ndim()));
  }

  std::size_t t() const { return st_.t; }

 private:
  TrainConfig cfg_;
  OptimizerState st_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Native core of the robustit package.";

  m.def("run_cli", &cli, py::arg("args"), "Runs the command line in-process. Returns (exit_code, stdout, stderr).");

  m.def(
      "batch_importance", [](const Array& X) { return batch_importance(to_tensor(X)); }, py::arg("X"),
      "Per-channel importance of a [B, T, N, D] activation batch.");
  m.def(
      "update_importance",
      [](std::vector<double> g, std::vector<double> b, double beta, std::size_t step) {
        ImportanceState st{std::move(g), beta, 0.5, step};
        st = update_importance(std::move(st), b);
        return py::make_tuple(st.g, st.step);
      },
      py::arg("g"), py::arg("b"), py::arg("beta"), py::arg("step"));
  m.def(
      "build_mask",
      [](std::vector<double> g, double gamma) {
        ImportanceState st{std::move(g), 0.9, gamma, 1};
        auto mk = build_mask(st);
        return py::make_tuple(mk.bits, mk.k);
      },
      py::arg("g"), py::arg("gamma"));
  m.def(
      "imc_loss",
      [](const Array& h, const Array& ha, const Array& e, const Array& ea) {
        return imc_loss(to_tensor(h), to_tensor(ha), to_tensor(e), to_tensor(ea)).item();
      },
      py::arg("h"), py::arg("h_aug"), py::arg("e"), py::arg("e_aug"));

  m.def(
      "color_jitter",
      [](const Array& img, const std::vector<double>& a, const std::vector<double>& b) {
        if (img.ndim() != 3) throw std::invalid_argument("image must be [H, W, C]");
        auto out = color_jitter(std::vector<double>(img.data(), img.data() + img.size()),
                                static_cast<int>(img.shape(2)), a, b);
        return to_array(out, {img.shape(0), img.shape(1), img.shape(2)});
      },
      py::arg("image"), py::arg("a"), py::arg("b"));
  m.def(
      "hflip",
      [](const Array& img) {
        if (img.ndim() != 3) throw std::invalid_argument("image must be [H, W, C]");
        auto out = hflip(std::vector<double>(img.data(), img.data() + img.size()), static_cast<int>(img.shape(0)),
                         static_cast<int>(img.shape(1)), static_cast<int>(img.shape(2)));
        return to_array(out, {img.shape(0), img.shape(1), img.shape(2)});
      },
      py::arg("image"));

  m.def("corpus_bleu", &corpus_bleu, py::arg("hyps"), py::arg("refs"), py::arg("max_n"));
  m.def("attack_success_rate", &attack_success_rate, py::arg("outputs"), py::arg("target"));
  m.def(
      "scheduled_lr",
      [](double lr, double warmup_fraction, const std::string& schedule, std::size_t t, std::size_t total) {
        TrainConfig tc;
        tc.lr = lr;
        tc.warmup_fraction = warmup_fraction;
        tc.schedule = schedule;
        tc.validate();
        return scheduled_lr(tc, t, total);
      },
      py::arg("lr"), py::arg("warmup_fraction"), py::arg("schedule"), py::arg("t"), py::arg("total"));

  py::class_<Optimizer>(m, "Optimizer")
      .def(py::init<const std::string&, double, double, double, double>(), py::arg("kind") = "adamw",
           py::arg("weight_decay") = 0.01, py::arg("beta1") = 0.9, py::arg("beta2") = 0.999, py::arg("eps") = 1e-8)
      .def("step", &Optimizer::step, py::arg("param"), py::arg("grad"), py::arg("lr"))
      .def_property_readonly("t", &Optimizer::t);

  m.def("attack_names", &attack_names);
  m.def("mode_names", &mode_names);
  m.def(
      "generate_clean_task",
      [](std::size_t n, std::uint64_t seed) {
        ModelConfig mc;
        auto s = generate_clean_task(n, mc, SceneConfig{}, seed);
        py::list out;
        for (const auto& x : s)
          out.append(py::dict(py::arg("image") = to_array(x.image, {mc.H, mc.W, mc.C}),
                              py::arg("instruction") = x.instruction, py::arg("response") = x.response));
        return out;
      },
      py::arg("n"), py::arg("seed"), "Clean samples at the default model geometry.");

  py::register_exception<NonFiniteLoss>(m, "NonFiniteLoss", PyExc_RuntimeError);
}
