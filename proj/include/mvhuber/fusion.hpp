#pragma once

#include <vector>

#include "mvhuber/huber_dist.hpp"

namespace mvhuber {

// Independent Huber estimates of one point, fused at the joint maximum
// likelihood location. All estimates share d and delta.
struct FusionProblem {
    std::vector<HuberParams> estimates;
    double tol_step = 1e-10;
    double tol_obj = 1e-12;
    double tol_grad = 1e-9;  // gradient norm that must accompany a tol_obj stop
    int max_iter = 500;

    int dim() const;
    double delta() const;
    // Throws std::domain_error on an empty, mixed-dimension or mixed-delta set,
    // or when delta is not strictly positive.
    void validate() const;
};

struct FusionResult {
    Vector y_star;
    std::vector<double> objective_trace;  // objective at y_0, y_1, ..
    int iterations = 0;
    bool converged = false;
};

// sum_i h_delta(||A_i y - nu_i||)
double objective(const FusionProblem& problem, const Vector& y);
Vector objective_gradient(const FusionProblem& problem, const Vector& y);

// Quadratic majorizer of the objective built at y_t, evaluated at y.
double majorizer(const FusionProblem& problem, const Vector& y_t, const Vector& y);

// Minimizer of the majorizer at y_t: solves
// (sum_i w_i A_i^T A_i) y = sum_i w_i A_i^T nu_i with w_i = min(1, delta / r_i).
Vector mm_step(const FusionProblem& problem, const Vector& y_t);

// All-quadratic fuse (every w_i = 1); the starting point of fuse().
Vector quadratic_fuse(const FusionProblem& problem);

// Starts at quadratic_fuse and keeps, per iteration, the better of the MM
// point and a Newton point, so the objective never increases. Stops when the step
// is below tol_step, or when the relative decrease is below tol_obj with the
// gradient norm at most tol_grad.
FusionResult fuse(const FusionProblem& problem);

}  // namespace mvhuber
