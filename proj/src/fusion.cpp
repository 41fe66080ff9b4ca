#include "mvhuber/fusion.hpp"

#include <cmath>
#include <optional>
#include <stdexcept>

#include "mvhuber/errors.hpp"

namespace mvhuber {

namespace {

double mm_weight(double r, double delta) { return r <= delta ? 1.0 : delta / r; }

Vector solve_weighted(const FusionProblem& problem, const std::vector<double>& weights) {
    const int d = problem.dim();
    Matrix normal = Matrix::Zero(d, d);
    Vector rhs = Vector::Zero(d);
    for (std::size_t i = 0; i < problem.estimates.size(); ++i) {
        const Matrix& a = problem.estimates[i].a.matrix();
        normal.noalias() += weights[i] * a.transpose() * a;
        rhs.noalias() += weights[i] * a.transpose() * problem.estimates[i].nu;
    }
    const Eigen::LLT<Matrix> llt(normal);
    if (llt.info() != Eigen::Success) throw NumericError("mm_step: normal equations are singular");
    return llt.solve(rhs);
}

// Newton step on the objective, which is twice differentiable away from the
// kink spheres r_i = delta. Empty when the Hessian is not positive definite.
std::optional<Vector> newton_point(const FusionProblem& problem, const Vector& y) {
    const int d = problem.dim();
    Matrix hessian = Matrix::Zero(d, d);
    Vector gradient = Vector::Zero(d);
    for (const HuberParams& e : problem.estimates) {
        const Matrix& a = e.a.matrix();
        const Vector residual = a * y - e.nu;
        const double r = residual.norm();
        if (r <= e.delta) {
            hessian.noalias() += a.transpose() * a;
            gradient.noalias() += a.transpose() * residual;
        } else {
            const Vector u = residual / r;
            const Matrix au = a.transpose() * u;
            hessian.noalias() += (e.delta / r) * (a.transpose() * a - au * au.transpose());
            gradient.noalias() += e.delta * au;
        }
    }
    const Eigen::LLT<Matrix> llt(hessian);
    if (llt.info() != Eigen::Success) return std::nullopt;
    Vector next = y - llt.solve(gradient);
    if (!next.allFinite()) return std::nullopt;
    return next;
}

}  // namespace

int FusionProblem::dim() const { return estimates.empty() ? 0 : estimates.front().dim(); }

double FusionProblem::delta() const { return estimates.empty() ? 0.0 : estimates.front().delta; }

void FusionProblem::validate() const {
    if (estimates.empty()) throw std::domain_error("FusionProblem: at least one estimate required");
    for (const HuberParams& e : estimates) {
        e.validate();
        if (e.dim() != dim()) throw std::domain_error("FusionProblem: estimates differ in dimension");
        if (e.delta != delta()) throw std::domain_error("FusionProblem: estimates differ in delta");
    }
    if (!(tol_step >= 0.0) || !(tol_obj >= 0.0) || !(tol_grad >= 0.0) || max_iter < 0)
        throw std::domain_error("FusionProblem: invalid tolerances");
}

double objective(const FusionProblem& problem, const Vector& y) {
    if (y.size() != problem.dim()) throw std::domain_error("objective: dimension mismatch");
    double total = 0.0;
    for (const HuberParams& e : problem.estimates)
        total += huber_fn((e.a.matrix() * y - e.nu).norm(), e.delta);
    return total;
}

Vector objective_gradient(const FusionProblem& problem, const Vector& y) {
    if (y.size() != problem.dim()) throw std::domain_error("objective_gradient: dimension mismatch");
    Vector g = Vector::Zero(y.size());
    for (const HuberParams& e : problem.estimates) {
        const Vector residual = e.a.matrix() * y - e.nu;
        g.noalias() += mm_weight(residual.norm(), e.delta) * e.a.matrix() * residual;
    }
    return g;
}

double majorizer(const FusionProblem& problem, const Vector& y_t, const Vector& y) {
    double total = 0.0;
    for (const HuberParams& e : problem.estimates) {
        const double r_t = (e.a.matrix() * y_t - e.nu).norm();
        const double r2 = (e.a.matrix() * y - e.nu).squaredNorm();
        if (r_t <= e.delta)
            total += 0.5 * r2;
        else
            total += e.delta * r2 / (2.0 * r_t) + 0.5 * (e.delta * r_t - e.delta * e.delta);
    }
    return total;
}

Vector mm_step(const FusionProblem& problem, const Vector& y_t) {
    if (y_t.size() != problem.dim()) throw std::domain_error("mm_step: dimension mismatch");
    std::vector<double> weights;
    weights.reserve(problem.estimates.size());
    for (const HuberParams& e : problem.estimates)
        weights.push_back(mm_weight((e.a.matrix() * y_t - e.nu).norm(), e.delta));
    return solve_weighted(problem, weights);
}

Vector quadratic_fuse(const FusionProblem& problem) {
    return solve_weighted(problem, std::vector<double>(problem.estimates.size(), 1.0));
}

FusionResult fuse(const FusionProblem& problem) {
    problem.validate();
    FusionResult result;
    result.y_star = quadratic_fuse(problem);
    double f = objective(problem, result.y_star);
    result.objective_trace.push_back(f);

    for (int it = 0; it < problem.max_iter; ++it) {
        const Vector& y = result.y_star;
        Vector next = mm_step(problem, y);
        double f_next = objective(problem, next);
        // The MM point already guarantees descent; a Newton point is kept only
        // when it does better. MM alone crawls on ill-conditioned problems.
        if (auto newton = newton_point(problem, y)) {
            const double f_newton = objective(problem, *newton);
            if (f_newton < f_next) {
                next = std::move(*newton);
                f_next = f_newton;
            }
        }
        const double step = (next - y).norm();
        const double decrease = f - f_next;
        result.y_star = std::move(next);
        result.objective_trace.push_back(f_next);
        result.iterations = it + 1;
        f = f_next;
        if (step < problem.tol_step) {
            result.converged = true;
            break;
        }
        // A small decrease alone does not certify the optimum: the decrease
        // scales with the squared gradient and stalls at rounding level first.
        if (decrease < problem.tol_obj * std::max(std::abs(f), 1.0) &&
            objective_gradient(problem, result.y_star).norm() <= problem.tol_grad) {
            result.converged = true;
            break;
        }
    }
    return result;
}

}  // namespace mvhuber
