// Python entry points. Documents cross the boundary as JSON text so the
// Python side gets plain dicts without a second schema.
#include <sstream>

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "medgrpo/advantage.hpp"
#include "medgrpo/cluster.hpp"
#include "medgrpo/errors.hpp"
#include "medgrpo/experiment.hpp"

namespace py = pybind11;
using namespace medgrpo;

namespace {

using Command = int (*)(const experiment::CommandOptions&, std::ostream&, std::ostream&);

py::tuple run(Command cmd, const experiment::CommandOptions& o) {
  std::ostringstream out, err;
  int code;
  {
    py::gil_scoped_release release;
    code = cmd(o, out, err);
  }
  return py::make_tuple(code, out.str(), err.str());
}

experiment::CommandOptions options(const std::string& config, std::optional<std::uint64_t> seed,
                                   std::optional<std::string> out_dir, int workers) {
  experiment::CommandOptions o;
  o.config_path = config;
  o.seed = seed;
  o.out_dir = std::move(out_dir);
  o.workers = workers;
  return o;
}

}  // namespace

PYBIND11_MODULE(_medgrpo, m) {
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<UsageError>(m, "UsageError", PyExc_ValueError);
  py::register_exception<DivergenceError>(m, "DivergenceError", PyExc_ArithmeticError);

  m.def("discounted_returns",
        [](const std::vector<double>& rewards, double gamma) {
          return advantage::discounted_returns(rewards, gamma);
        },
        py::arg("rewards"), py::arg("gamma"));

  m.def("group_relative_advantage",
        [](double individual, double group_mean, double alpha1, double alpha2, double alpha3,
           double beta) {
          const advantage::AdvantageHyper h{alpha1, alpha2, alpha3, beta};
          h.validate();
          return advantage::group_relative_advantage(individual, group_mean, h);
        },
        py::arg("individual"), py::arg("group_mean"), py::arg("alpha1") = 1.0,
        py::arg("alpha2") = 0.5, py::arg("alpha3") = 0.1, py::arg("beta") = 2.0);

  m.def("kmeans",
        [](const std::vector<std::vector<double>>& points, int k, std::uint64_t seed, int restarts) {
          std::vector<cluster::Vector> pts;
          for (const auto& p : points) pts.push_back(Eigen::Map<const cluster::Vector>(p.data(), Eigen::Index(p.size())));
          cluster::KMeansOptions o;
          o.k = k;
          o.seed = seed;
          o.restarts = restarts;
          const auto fit = cluster::kmeans(std::span<const cluster::Vector>(pts), o);
          return py::make_tuple(fit.labels, fit.inertia);
        },
        py::arg("points"), py::arg("k"), py::arg("seed") = 0, py::arg("restarts") = 10);

  m.def("normalize_config",
        [](const std::string& text) { return experiment::to_json(experiment::parse_config(text)).dump(); },
        py::arg("text"), "Parse a config document and return it with every default filled in.");

  m.def("generate_cohort",
        [](const std::string& text) {
          const auto p = experiment::build_pipeline(experiment::parse_config(text));
          return experiment::cohort_to_json(p.cohort, p.assignment).dump();
        },
        py::arg("config_text"));

  m.def("gradcheck",
        [](const std::string& text) {
          std::vector<py::tuple> rows;
          for (const auto& line : experiment::run_gradchecks(experiment::parse_config(text)))
            rows.push_back(py::make_tuple(line.module, line.report.max_rel_error,
                                          line.report.passed(experiment::kGradTolerance)));
          return rows;
        },
        py::arg("config_text"));

  m.def("train",
        [](const std::string& config, std::optional<std::uint64_t> seed,
           std::optional<std::string> out_dir, int workers) {
          return run(experiment::cmd_train, options(config, seed, std::move(out_dir), workers));
        },
        py::arg("config"), py::arg("seed") = py::none(), py::arg("out_dir") = py::none(),
        py::arg("workers") = 1);

  m.def("search",
        [](const std::string& config, const std::string& checkpoint, int patient,
           std::optional<std::string> out_dir) {
          auto o = options(config, std::nullopt, std::move(out_dir), 1);
          o.checkpoint_path = checkpoint;
          o.patient_id = patient;
          return run(experiment::cmd_search, o);
        },
        py::arg("config"), py::arg("checkpoint"), py::arg("patient"), py::arg("out_dir") = py::none());

  m.def("ablate",
        [](const std::string& config, const std::string& mode, std::optional<std::string> out_dir,
           int workers) {
          auto o = options(config, std::nullopt, std::move(out_dir), workers);
          o.mode = mode;
          return run(experiment::cmd_ablate, o);
        },
        py::arg("config"), py::arg("mode"), py::arg("out_dir") = py::none(), py::arg("workers") = 1);
}
