#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "tmblock/cli/commands.hpp"
#include "tmblock/train/checkpoint.hpp"

namespace py = pybind11;
using namespace tmb;

namespace {

match::MatchProblem problem(std::vector<double> a, double mu, double eps) {
  match::MatchProblem p{std::move(a), mu, eps};
  p.validate();
  return p;
}

py::tuple point(const match::SimplexPoint& x) { return py::make_tuple(x.p, x.q); }

py::dict epoch_dict(const train::EpochRecord& e) {
  py::dict d;
  d["epoch"] = e.epoch;
  d["train_loss"] = e.train_loss;
  d["main_loss"] = e.main_loss;
  d["aux_loss"] = e.aux_loss;
  d["val_acc"] = e.val_acc;
  d["train_acc"] = e.train_acc;
  return d;
}

train::RunConfig run_config(const std::string& text, std::optional<std::uint64_t> seed,
                            std::optional<std::size_t> epochs) {
  auto rc = text.empty() ? train::RunConfig::defaults(true) : train::RunConfig::parse(text);
  if (seed) rc.train.seed = *seed;
  if (epochs) rc.train.epochs = *epochs;
  return rc;
}

// Images arrive as uint8 [N, C, H, W] and are normalized like the training data.
ad::Tensor input_from(const py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>& images) {
  if (images.ndim() != 4) throw std::invalid_argument("images must have shape [N, C, H, W]");
  const auto n = static_cast<std::size_t>(images.shape(0));
  const auto c = static_cast<std::size_t>(images.shape(1));
  const auto h = static_cast<std::size_t>(images.shape(2));
  const auto w = static_cast<std::size_t>(images.shape(3));
  return train::to_input(std::span<const std::uint8_t>(images.data(), n * c * h * w), n, c, h, w);
}

py::array_t<double> to_numpy(const ad::Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

class Model {
 public:
  explicit Model(net::Network net) : net_(std::move(net)) {}

  static Model build(const std::string& net_text, std::uint64_t seed) {
    return Model(net::Network::build(net::NetConfig::parse(net_text), seed));
  }
  static Model load(const std::filesystem::path& path) { return Model(train::load_checkpoint(path)); }

  void save(const std::filesystem::path& path) { train::save_checkpoint(net_, path); }
  std::size_t parameter_count() { return net_.parameter_count(); }
  std::string config_text() const { return net_.config().to_text(); }
  bool has_block() const { return net_.has_block(); }

  py::array_t<double> logits(const py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>& images) {
    const auto x = input_from(images);
    std::vector<int> labels(x.dim(0), 0);
    return to_numpy(net::forward_eval(net_, x, labels).result.main_logits);
  }

  void calibrate(const py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>& images) {
    net::calibrate_norms(net_, input_from(images));
  }

 private:
  net::Network net_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Template-matching residual blocks: solvers, training and analysis";

  m.def("solve_exact", [](std::vector<double> a, double mu) { return point(match::solve_exact(problem(a, mu, 1.0))); },
        py::arg("a"), py::arg("mu"), "Vertex maximizing q*mu + p.a; returns (p, q).");
  m.def("brute_force_vertices",
        [](std::vector<double> a, double mu) { return point(match::brute_force_vertices(problem(a, mu, 1.0))); },
        py::arg("a"), py::arg("mu"));
  m.def("solve_entropy",
        [](std::vector<double> a, double mu, double eps) { return point(match::solve_entropy(problem(a, mu, eps))); },
        py::arg("a"), py::arg("mu"), py::arg("eps") = 1.0);
  m.def("solve_perturbed",
        [](std::vector<double> a, double mu, double eps, std::size_t samples, std::uint64_t seed) {
          return point(match::solve_perturbed(problem(a, mu, eps), {samples, seed}));
        },
        py::arg("a"), py::arg("mu"), py::arg("eps") = 1.0, py::arg("samples") = 64, py::arg("seed") = 0);
  m.def("jacobian_entropy",
        [](std::vector<double> a, double mu, double eps) { return match::jacobian_entropy(problem(a, mu, eps)); },
        py::arg("a"), py::arg("mu"), py::arg("eps") = 1.0);

  m.def("entropy", [](std::vector<double> p) { return analyze::entropy(p); }, py::arg("p"));
  m.def("kmeans",
        [](const Eigen::MatrixXd& points, std::size_t k, std::uint64_t seed) {
          const auto km = analyze::kmeans(points, k, seed);
          py::dict d;
          d["centers"] = km.centers;
          d["assignments"] = km.assignments;
          d["inertia"] = km.inertia;
          d["inertia_history"] = km.inertia_history;
          d["iterations"] = km.iterations;
          d["converged"] = km.converged;
          return d;
        },
        py::arg("points"), py::arg("k"), py::arg("seed") = 0);

  m.def("synth_dataset",
        [](std::size_t classes, std::size_t samples, std::size_t size, std::uint64_t seed) {
          const auto ds = train::synth_dataset({classes, samples, size, size, seed});
          py::array_t<std::uint8_t> images({ds.size(), ds.channels, ds.height, ds.width});
          std::copy(ds.images.begin(), ds.images.end(), images.mutable_data());
          return py::make_tuple(images, ds.labels);
        },
        py::arg("classes") = 4, py::arg("samples") = 2000, py::arg("size") = 16, py::arg("seed") = 0);

  m.def("default_config", [](bool with_block) { return train::RunConfig::defaults(with_block).to_text(); },
        py::arg("with_block") = true, "Run configuration text of the desk setup.");

  m.def("run_checks",
        [](const std::string& suite, std::uint64_t seed) {
          checks::SuiteOptions o;
          o.seed = seed;
          std::vector<checks::CheckResult> results;
          if (suite == "solvers" || suite == "all") results = checks::run_solver_suite({}, o);
          if (suite == "grads" || suite == "all") {
            auto g = checks::run_grad_suite(o);
            results.insert(results.end(), g.begin(), g.end());
          }
          if (results.empty()) throw std::invalid_argument("suite must be solvers, grads or all");
          py::list out;
          for (const auto& r : results) {
            py::dict d;
            d["name"] = r.name;
            d["passed"] = r.passed;
            d["instances"] = r.instances;
            d["tie_cases"] = r.tie_cases;
            d["max_error"] = r.max_error;
            d["detail"] = r.detail;
            out.append(d);
          }
          return out;
        },
        py::arg("suite") = "solvers", py::arg("seed") = checks::SuiteOptions{}.seed);

  m.def("train",
        [](const std::string& config, const std::filesystem::path& out, std::optional<std::uint64_t> seed,
           std::optional<std::size_t> epochs) {
          const auto rc = run_config(config, seed, epochs);
          std::ostringstream log;
          cli::TrainReport rep;
          {
            py::gil_scoped_release release;
            rep = cli::cmd_train(rc, out, log);
          }
          py::list history;
          for (const auto& e : rep.history.epochs) history.append(epoch_dict(e));
          py::dict d;
          d["history"] = history;
          d["best_epoch"] = rep.history.best_epoch;
          d["test_acc"] = rep.test_acc;
          d["log"] = log.str();
          return d;
        },
        py::arg("config") = "", py::arg("out") = std::filesystem::path("tmb_out"), py::arg("seed") = py::none(),
        py::arg("epochs") = py::none(),
        "Trains like `tmb train`; writes history.csv, best.ckpt and config.txt under `out`.");

  m.def("evaluate",
        [](const std::filesystem::path& checkpoint, const std::string& config, const std::string& split) {
          std::ostringstream log;
          py::gil_scoped_release release;
          return cli::cmd_eval(checkpoint, run_config(config, std::nullopt, std::nullopt), split, log);
        },
        py::arg("checkpoint"), py::arg("config") = "", py::arg("split") = "test");

  py::class_<Model>(m, "Model")
      .def_static("build", &Model::build, py::arg("net_config"), py::arg("seed") = 0)
      .def_static("load", &Model::load, py::arg("path"))
      .def("save", &Model::save, py::arg("path"))
      .def("logits", &Model::logits, py::arg("images"), "Eval-mode logits for uint8 images [N, C, H, W].")
      .def("calibrate", &Model::calibrate, py::arg("images"), "Estimates BN statistics from a batch.")
      .def_property_readonly("parameter_count", &Model::parameter_count)
      .def_property_readonly("has_block", &Model::has_block)
      .def_property_readonly("config_text", &Model::config_text);

  py::register_exception<train::DataError>(m, "DataError", PyExc_OSError);
  py::register_exception<train::CheckpointError>(m, "CheckpointError", PyExc_OSError);
  py::register_exception<train::DivergenceError>(m, "DivergenceError", PyExc_RuntimeError);
}
