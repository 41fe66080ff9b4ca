#include <sstream>

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "cli.hpp"
#include "mvhuber/errors.hpp"
#include "mvhuber/estimator.hpp"
#include "mvhuber/fusion.hpp"
#include "mvhuber/huber_dist.hpp"

namespace py = pybind11;
using namespace mvhuber;

namespace {

HuberParams make_params(const Vector& nu, const Matrix& a, double delta) {
    HuberParams p{nu, SpdMatrix(a), delta};
    p.validate();
    return p;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Multivariate Huber distribution, losses and fusion";

    py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

    m.def("normalizing_constant", &normalizing_constant, py::arg("d"), py::arg("delta"));
    m.def("log_normalizing_constant", &log_normalizing_constant, py::arg("d"), py::arg("delta"));
    m.def("variance_factor", &variance_factor, py::arg("d"), py::arg("delta"));
    m.def("huber", &huber_fn, py::arg("y"), py::arg("delta"));

    m.def(
        "log_pdf",
        [](const Matrix& y, const Vector& nu, const Matrix& a, double delta) {
            const HuberParams p = make_params(nu, a, delta);
            if (y.cols() != p.dim()) throw std::invalid_argument("y must have d columns");
            Vector out(y.rows());
            for (Eigen::Index i = 0; i < y.rows(); ++i) out(i) = log_pdf(y.row(i).transpose(), p);
            return out;
        },
        py::arg("y"), py::arg("nu"), py::arg("A"), py::arg("delta") = kDefaultDelta,
        "Log density of each row of y under (nu, A, delta).");

    m.def(
        "sample",
        [](const Vector& nu, const Matrix& a, double delta, int n, std::uint64_t seed) {
            return sample(make_params(nu, a, delta), n, seed);
        },
        py::arg("nu"), py::arg("A"), py::arg("delta") = kDefaultDelta, py::arg("n"), py::arg("seed"));

    m.def(
        "fuse",
        [](const std::vector<std::pair<Vector, Matrix>>& estimates, double delta) {
            FusionProblem problem;
            for (const auto& [nu, a] : estimates) problem.estimates.push_back(make_params(nu, a, delta));
            const FusionResult r = fuse(problem);
            py::dict out;
            out["y"] = r.y_star;
            out["objective_trace"] = r.objective_trace;
            out["iterations"] = r.iterations;
            out["converged"] = r.converged;
            return out;
        },
        py::arg("estimates"), py::arg("delta") = kDefaultDelta,
        "Fuses a list of (nu, A) estimates sharing delta.");

    m.def(
        "fit_mle",
        [](const Matrix& samples, double delta, double theta, int steps, double learning_rate) {
            OptimizerConfig opt;
            opt.steps = steps;
            opt.learning_rate = learning_rate;
            const MleResult r = fit_mle(samples, delta, theta, opt);
            py::dict out;
            out["nu"] = r.params.nu;
            out["A"] = r.params.a.matrix();
            out["nll"] = r.nll;
            out["steps"] = r.steps;
            return out;
        },
        py::arg("samples"), py::arg("delta") = kDefaultDelta, py::arg("theta") = 0.1, py::arg("steps") = 2000,
        py::arg("learning_rate") = 1e-2);

    m.def(
        "run_cli",
        [](const std::vector<std::string>& args) {
            std::ostringstream out, err;
            int code;
            {
                py::gil_scoped_release release;
                code = cli::run(args, out, err);
            }
            return py::make_tuple(code, out.str(), err.str());
        },
        py::arg("args"), "Runs one mvhuber command line; returns (exit_code, stdout, stderr).");
}
