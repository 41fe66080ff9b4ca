#pragma once

#include <cstdint>
#include <limits>

#include "mvhuber/spd_param.hpp"

namespace mvhuber {

inline constexpr double kDefaultDelta = 1.0;

// Huber function: y^2/2 for |y| <= delta, delta (|y| - delta/2) beyond.
double huber_fn(double y, double delta);
// Its derivative, y inside the quadratic zone and delta * sign(y) outside.
double huber_derivative(double y, double delta);

/// Integral of r^n exp(-r^2/2) over [0, upper]; requires 0 < upper <= delta.
double radial_a(int n, double delta, double upper);
/// Integral of r^n exp(-delta r) over [lower, upper]; requires lower >= delta.
double radial_b(int n, double delta, double lower,
                double upper = std::numeric_limits<double>::infinity());

/// log of the surface area of the unit sphere S^{d-1} in R^d.
double log_unit_sphere_area(int d);

// c_d(delta) = integral over R^d of exp(-h_delta(||x||)).
// normalizing_constant throws std::range_error when c_d is not representable;
// the log variant stays finite for every d >= 1, delta > 0.
double normalizing_constant(int d, double delta);
double log_normalizing_constant(int d, double delta);

// alpha(delta, d) such that Var(X) = alpha * Lambda^{-1}.
double variance_factor(int d, double delta);

// (mu, Lambda, delta) parameterization.
struct MomentForm {
    Vector mu;
    SpdMatrix lambda;
    double delta = kDefaultDelta;
};

// (nu, A, delta) with A = Lambda^{1/2}, nu = A mu. The density is
// |A| / c_d(delta) * exp(-h_delta(||A y - nu||)).
struct HuberParams {
    Vector nu;
    SpdMatrix a;
    double delta = kDefaultDelta;

    int dim() const { return static_cast<int>(nu.size()); }
    void validate() const;
    Vector mean() const { return a.solve(nu); }
};

HuberParams to_canonical(const MomentForm& m);
MomentForm to_moment(const HuberParams& p);

double log_pdf(const Vector& y, const HuberParams& p);

// CDF of the radius ||x|| of the standard (nu = 0, A = I) distribution.
class RadialDistribution {
public:
    RadialDistribution(int d, double delta);

    double cdf(double r) const;
    // Bisection on [0, delta + 60/delta] to 1e-12 absolute.
    double quantile(double u) const;

    int dim() const { return d_; }
    double delta() const { return delta_; }

private:
    double unnormalized_mass(double r) const;

    int d_;
    double delta_;
    double total_;
};

// n i.i.d. draws as rows of an n x d matrix. Draw i depends only on
// (params, seed, i).
Matrix sample(const HuberParams& p, int n, std::uint64_t seed);

// Counter-based generator: one stream per (seed, index) pair.
class SplitMix64 {
public:
    using result_type = std::uint64_t;
    explicit SplitMix64(std::uint64_t state) : state_(state) {}
    SplitMix64(std::uint64_t seed, std::uint64_t stream);

    static constexpr result_type min() { return 0; }
    static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }
    result_type operator()();

    // Uniform on the open interval (0, 1).
    double uniform();

private:
    std::uint64_t state_;
};

}  // namespace mvhuber
