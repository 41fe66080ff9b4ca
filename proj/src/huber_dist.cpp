#include "mvhuber/huber_dist.hpp"

#include <cmath>
#include <random>
#include <stdexcept>
#include <string>

namespace mvhuber {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kInf = std::numeric_limits<double>::infinity();

double log_add_exp(double x, double y) {
    if (x == -kInf) return y;
    if (y == -kInf) return x;
    const double hi = std::max(x, y);
    return hi + std::log1p(std::exp(-std::abs(x - y)));
}

void check_delta(double delta) {
    if (!(delta > 0.0) || !std::isfinite(delta))
        throw std::domain_error("delta must be positive and finite, got " + std::to_string(delta));
}

void check_order(int n) {
    if (n < 0) throw std::domain_error("radial integral order must be non-negative");
}

void check_dim(int d) {
    if (d < 1) throw std::domain_error("dimension must be at least 1, got " + std::to_string(d));
}

// Integral of r^n exp(-r^2/2) over [0, u]. The upward recursion
// a(n) = -u^{n-1} e^{-u^2/2} + (n-1) a(n-2) cancels catastrophically once
// u^2 < n - 1, so that regime uses the all-positive series of the lower
// incomplete gamma function instead.
double gaussian_radial(int n, double u) {
    if (u <= 0.0) return 0.0;
    const double eu = std::exp(-0.5 * u * u);
    if (u * u < n - 1) {
        double term = std::pow(u, n + 1) / (n + 1);
        double sum = term;
        for (int k = 1; k < 10000; ++k) {
            term *= u * u / (n + 1 + 2 * k);
            sum += term;
            if (term < 1e-17 * sum) break;
        }
        return eu * sum;
    }
    double lo = std::sqrt(kPi / 2.0) * std::erf(u / std::sqrt(2.0));  // a(0)
    double hi = -std::expm1(-0.5 * u * u);                             // a(1)
    if (n == 0) return lo;
    for (int k = 2; k <= n; ++k) {
        const double next = -std::pow(u, k - 1) * eu + (k - 1) * lo;
        lo = hi;
        hi = next;
    }
    return hi;
}

// Integral of r^n exp(-delta (r - delta)) over [lower, upper], lower >= delta.
// Equal to exp(delta^2) * b(n, delta) restricted to the interval; the shift
// keeps every factor <= 1 so nothing overflows for large delta.
// Lower-incomplete-gamma series for the same shifted integral over [0, r]:
// e^{-delta (r - delta)} r^{n+1} sum_k (delta r)^k / ((n+1)(n+2)..(n+1+k)).
double shifted_head(int n, double delta, double r) {
    const double x = delta * r;
    double term = 1.0 / (n + 1);
    double sum = term;
    for (int k = 1; k < 10000; ++k) {
        term *= x / (n + 1 + k);
        sum += term;
        if (term < 1e-17 * sum) break;
    }
    return std::exp(-delta * (r - delta)) * std::pow(r, n + 1) * sum;
}

double shifted_tail(int n, double delta, double lower, double upper) {
    // The recursion amplifies rounding by k/delta per step when delta * upper
    // is below the order, so short intervals there use the series instead.
    if (std::isfinite(upper) && delta * upper < n + 1)
        return shifted_head(n, delta, upper) - shifted_head(n, delta, lower);
    const double el = std::exp(-delta * (lower - delta));
    const double eu = std::isinf(upper) ? 0.0 : std::exp(-delta * (upper - delta));
    double acc = (el - eu) / delta;
    for (int k = 1; k <= n; ++k) {
        const double boundary =
            std::pow(lower, k) * el - (std::isinf(upper) ? 0.0 : std::pow(upper, k) * eu);
        acc = boundary / delta + (k / delta) * acc;
    }
    return acc;
}

// log of shifted_tail(n, delta, delta, inf), computed entirely in log space:
// I(0) = 1/delta, I(k) = delta^{k-1} + (k/delta) I(k-1).
double log_shifted_tail(int n, double delta) {
    const double log_delta = std::log(delta);
    double acc = -log_delta;
    for (int k = 1; k <= n; ++k)
        acc = log_add_exp((k - 1) * log_delta, std::log(static_cast<double>(k)) - log_delta + acc);
    return acc;
}

// log of a(n, delta) + exp(delta^2/2) b(n, delta).
double log_radial_moment(int n, double delta) {
    const double a = gaussian_radial(n, delta);
    const double log_a = a > 0.0 ? std::log(a) : -kInf;
    return log_add_exp(log_a, -0.5 * delta * delta + log_shifted_tail(n, delta));
}

std::uint64_t mix64(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

}  // namespace

double huber_fn(double y, double delta) {
    if (!std::isfinite(y)) throw std::domain_error("huber_fn: non-finite input");
    check_delta(delta);
    const double ay = std::abs(y);
    return ay <= delta ? 0.5 * y * y : delta * (ay - 0.5 * delta);
}

double huber_derivative(double y, double delta) {
    if (!std::isfinite(y)) throw std::domain_error("huber_derivative: non-finite input");
    check_delta(delta);
    if (std::abs(y) <= delta) return y;
    return y > 0.0 ? delta : -delta;
}

double radial_a(int n, double delta, double upper) {
    check_order(n);
    check_delta(delta);
    if (!(upper > 0.0 && upper <= delta))
        throw std::domain_error("radial_a: upper bound must lie in (0, delta]");
    return gaussian_radial(n, upper);
}

double radial_b(int n, double delta, double lower, double upper) {
    check_order(n);
    check_delta(delta);
    if (!(lower >= delta) || !std::isfinite(lower))
        throw std::domain_error("radial_b: lower bound must be finite and >= delta");
    if (!(upper >= lower)) throw std::domain_error("radial_b: upper bound must be >= lower bound");
    return std::exp(-delta * delta) * shifted_tail(n, delta, lower, upper);
}

double log_unit_sphere_area(int d) {
    check_dim(d);
    return std::log(2.0) + 0.5 * d * std::log(kPi) - std::lgamma(0.5 * d);
}

double log_normalizing_constant(int d, double delta) {
    check_dim(d);
    check_delta(delta);
    return log_unit_sphere_area(d) + log_radial_moment(d - 1, delta);
}

double normalizing_constant(int d, double delta) {
    const double c = std::exp(log_normalizing_constant(d, delta));
    if (!std::isfinite(c) || c == 0.0)
        throw std::range_error("normalizing_constant: c_d(delta) not representable; use log_normalizing_constant");
    return c;
}

double variance_factor(int d, double delta) {
    check_dim(d);
    check_delta(delta);
    return std::exp(log_radial_moment(d + 1, delta) - log_radial_moment(d - 1, delta) - std::log(d));
}

void HuberParams::validate() const {
    check_delta(delta);
    if (nu.size() == 0 || nu.size() != a.dim())
        throw std::domain_error("HuberParams: nu and A dimensions disagree");
}

HuberParams to_canonical(const MomentForm& m) {
    check_delta(m.delta);
    if (m.mu.size() != m.lambda.dim()) throw std::domain_error("to_canonical: dimension mismatch");
    const EigenDecomposition& eig = m.lambda.eigen();
    SpdMatrix a = SpdMatrix::from_eigen({eig.vectors, eig.values.cwiseSqrt()});
    Vector nu = a.matrix() * m.mu;
    return HuberParams{std::move(nu), std::move(a), m.delta};
}

MomentForm to_moment(const HuberParams& p) {
    p.validate();
    const EigenDecomposition& eig = p.a.eigen();
    SpdMatrix lambda = SpdMatrix::from_eigen({eig.vectors, eig.values.cwiseAbs2()});
    return MomentForm{p.a.solve(p.nu), std::move(lambda), p.delta};
}

double log_pdf(const Vector& y, const HuberParams& p) {
    p.validate();
    if (y.size() != p.dim()) throw std::domain_error("log_pdf: dimension mismatch");
    const double r = (p.a.matrix() * y - p.nu).norm();
    return p.a.log_det() - log_normalizing_constant(p.dim(), p.delta) - huber_fn(r, p.delta);
}

RadialDistribution::RadialDistribution(int d, double delta) : d_(d), delta_(delta) {
    check_dim(d);
    check_delta(delta);
    total_ = unnormalized_mass(kInf);
    if (!std::isfinite(total_) || !(total_ > 0.0))
        throw std::range_error("RadialDistribution: radial mass not representable");
}

double RadialDistribution::unnormalized_mass(double r) const {
    const int n = d_ - 1;
    if (r <= delta_) return gaussian_radial(n, r);
    return gaussian_radial(n, delta_) +
           std::exp(-0.5 * delta_ * delta_) * shifted_tail(n, delta_, delta_, r);
}

double RadialDistribution::cdf(double r) const {
    if (r <= 0.0) return 0.0;
    return std::min(1.0, unnormalized_mass(r) / total_);
}

double RadialDistribution::quantile(double u) const {
    if (!(u >= 0.0 && u <= 1.0)) throw std::domain_error("quantile: probability outside [0, 1]");
    double lo = 0.0;
    double hi = delta_ + 60.0 / delta_;
    while (hi - lo > 1e-12) {
        const double mid = 0.5 * (lo + hi);
        if (mid <= lo || mid >= hi) break;
        (cdf(mid) < u ? lo : hi) = mid;
    }
    return 0.5 * (lo + hi);
}

SplitMix64::SplitMix64(std::uint64_t seed, std::uint64_t stream)
    : state_(mix64(mix64(seed) + stream)) {}

SplitMix64::result_type SplitMix64::operator()() {
    state_ += 0x9E3779B97F4A7C15ULL;
    return mix64(state_);
}

double SplitMix64::uniform() {
    // 53 random bits, offset by half an ulp so 0 is excluded.
    return (static_cast<double>((*this)() >> 11) + 0.5) * 0x1.0p-53;
}

Matrix sample(const HuberParams& p, int n, std::uint64_t seed) {
    p.validate();
    if (n < 0) throw std::domain_error("sample: n must be non-negative");
    const int d = p.dim();
    const RadialDistribution radial(d, p.delta);
    Matrix out(n, d);
    Vector z(d);
    for (int i = 0; i < n; ++i) {
        SplitMix64 rng(seed, static_cast<std::uint64_t>(i));
        std::normal_distribution<double> normal;
        double norm = 0.0;
        while (norm == 0.0) {
            for (int k = 0; k < d; ++k) z(k) = normal(rng);
            norm = z.norm();
        }
        const double r = radial.quantile(rng.uniform());
        out.row(i) = p.a.solve(p.nu + (r / norm) * z).transpose();
    }
    return out;
}

}  // namespace mvhuber
