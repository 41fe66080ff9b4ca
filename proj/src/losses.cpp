#include "mvhuber/losses.hpp"

#include <cmath>
#include <map>
#include <mutex>
#include <stdexcept>

#include <boost/math/quadrature/exp_sinh.hpp>

#include "mvhuber/errors.hpp"

namespace mvhuber {

namespace {

constexpr double kLog2Pi = 1.83787706640934548356;

// log of the radial moment integral of r^n exp(1 - sqrt(r^2 + 1)), cached per n.
double charbonnier_log_moment(int n) {
    static std::mutex mutex;
    static std::map<int, double> cache;
    std::lock_guard<std::mutex> lock(mutex);
    if (auto it = cache.find(n); it != cache.end()) return it->second;
    boost::math::quadrature::exp_sinh<double> integrator;
    const double value = std::log(integrator.integrate([n](double r) {
        if (!(r < 1e300)) return 0.0;
        if (r == 0.0) return n == 0 ? 1.0 : 0.0;
        return std::exp(n * std::log(r) - (std::hypot(r, 1.0) - 1.0));
    }));
    cache.emplace(n, value);
    return value;
}

void check_shapes(const Vector& y, const Vector& nu, const SpdMatrix& a) {
    if (y.size() != nu.size() || y.size() != a.dim() || y.size() == 0)
        throw std::domain_error("loss: dimension mismatch between y, nu and A");
}

}  // namespace

std::string_view to_string(LossFamily f) {
    switch (f) {
        case LossFamily::huber: return "huber";
        case LossFamily::gauss: return "gauss";
        case LossFamily::laplace: return "laplace";
        case LossFamily::charbonnier: return "charbonnier";
    }
    return "?";
}

std::string_view to_string(CovarianceMode m) {
    switch (m) {
        case CovarianceMode::identity: return "identity";
        case CovarianceMode::diagonal: return "diagonal";
        case CovarianceMode::full: return "full";
    }
    return "?";
}

std::string_view to_string(Parameterization p) {
    return p == Parameterization::nu_form ? "nu" : "mu";
}

LossFamily parse_family(std::string_view s) {
    if (s == "huber") return LossFamily::huber;
    if (s == "gauss") return LossFamily::gauss;
    if (s == "laplace") return LossFamily::laplace;
    if (s == "charbonnier") return LossFamily::charbonnier;
    throw std::invalid_argument("unknown loss family '" + std::string(s) + "'");
}

CovarianceMode parse_mode(std::string_view s) {
    if (s == "identity") return CovarianceMode::identity;
    if (s == "diagonal") return CovarianceMode::diagonal;
    if (s == "full") return CovarianceMode::full;
    throw std::invalid_argument("unknown covariance mode '" + std::string(s) + "'");
}

Parameterization parse_parameterization(std::string_view s) {
    if (s == "nu" || s == "nu_form") return Parameterization::nu_form;
    if (s == "mu" || s == "mu_form") return Parameterization::mu_form;
    throw std::invalid_argument("unknown parameterization '" + std::string(s) + "'");
}

void LossConfig::validate() const {
    if (!(delta > 0.0) || !std::isfinite(delta)) throw std::domain_error("LossConfig: delta must be positive");
    remap().validate();
}

int raw_width(int d, CovarianceMode mode) {
    return mode == CovarianceMode::identity ? d : d + triangular(d);
}

double family_rho(LossFamily f, double r, double delta) {
    switch (f) {
        case LossFamily::huber: return huber_fn(r, delta);
        case LossFamily::gauss: return 0.5 * r * r;
        case LossFamily::laplace: return r;
        case LossFamily::charbonnier: return std::sqrt(r * r + 1.0) - 1.0;
    }
    return 0.0;
}

double family_weight(LossFamily f, double r, double delta) {
    switch (f) {
        case LossFamily::huber: return r <= delta ? 1.0 : delta / r;
        case LossFamily::gauss: return 1.0;
        case LossFamily::laplace: return r > 0.0 ? 1.0 / r : 0.0;  // subgradient 0 at r = 0
        case LossFamily::charbonnier: return 1.0 / std::sqrt(r * r + 1.0);
    }
    return 0.0;
}

double family_log_normalizer(LossFamily f, int d, double delta) {
    switch (f) {
        case LossFamily::huber: return log_normalizing_constant(d, delta);
        case LossFamily::gauss: return 0.5 * d * kLog2Pi;
        case LossFamily::laplace: return log_unit_sphere_area(d) + std::lgamma(static_cast<double>(d));
        case LossFamily::charbonnier: return log_unit_sphere_area(d) + charbonnier_log_moment(d - 1);
    }
    return 0.0;
}

double family_variance_factor(LossFamily f, int d, double delta) {
    switch (f) {
        case LossFamily::huber: return variance_factor(d, delta);
        case LossFamily::gauss: return 1.0;
        case LossFamily::laplace: return d + 1.0;
        case LossFamily::charbonnier: return std::exp(charbonnier_log_moment(d + 1) - charbonnier_log_moment(d - 1)) / d;
    }
    return 1.0;
}

double family_nll(LossFamily f, const Vector& y, const Vector& nu, const SpdMatrix& a,
                  double delta, bool include_normalizer) {
    check_shapes(y, nu, a);
    const double r = (a.matrix() * y - nu).norm();
    double loss = -a.log_det() + family_rho(f, r, delta);
    if (include_normalizer) loss += family_log_normalizer(f, a.dim(), delta);
    return loss;
}

double huber_nll(const Vector& y, const Vector& nu, const SpdMatrix& a, double delta,
                 bool include_normalizer) {
    return family_nll(LossFamily::huber, y, nu, a, delta, include_normalizer);
}

double gauss_nll(const Vector& y, const Vector& nu, const SpdMatrix& a, bool include_normalizer) {
    return family_nll(LossFamily::gauss, y, nu, a, kDefaultDelta, include_normalizer);
}

double laplace_nll(const Vector& y, const Vector& nu, const SpdMatrix& a, bool include_normalizer) {
    return family_nll(LossFamily::laplace, y, nu, a, kDefaultDelta, include_normalizer);
}

double charbonnier_nll(const Vector& y, const Vector& nu, const SpdMatrix& a,
                       bool include_normalizer) {
    return family_nll(LossFamily::charbonnier, y, nu, a, kDefaultDelta, include_normalizer);
}

ParamGradient grad_nu_a(LossFamily f, const Vector& y, const Vector& nu, const SpdMatrix& a,
                        double delta, bool include_det) {
    check_shapes(y, nu, a);
    const Vector residual = a.matrix() * y - nu;
    const double w = family_weight(f, residual.norm(), delta);
    Matrix d_a = w * residual * y.transpose();
    if (include_det) d_a -= a.inverse();
    return ParamGradient{-w * residual, SymMatrix::symmetrized(d_a)};
}

namespace {

int checked_dim(const RawOutput& raw, const Vector& y, const LossConfig& cfg) {
    cfg.validate();
    if (raw.keypoints < 1 || y.size() % raw.keypoints != 0 || y.size() == 0)
        throw std::domain_error("loss_from_raw: target length not divisible by keypoint count");
    const int d = static_cast<int>(y.size() / raw.keypoints);
    if (raw.values.size() != static_cast<Eigen::Index>(raw.keypoints) * raw_width(d, cfg.mode))
        throw std::domain_error("loss_from_raw: raw length inconsistent with keypoints and d");
    return d;
}

bool is_diagonal_slot(int d, int slot) {
    // slot indexes the row-major upper triangle.
    int k = 0;
    for (int i = 0; i < d; ++i) {
        if (k == slot) return true;
        k += d - i;
    }
    return false;
}

}  // namespace

KeypointParams decode_keypoint(const RawOutput& raw, int d, int k, const LossConfig& cfg) {
    const int width = raw_width(d, cfg.mode);
    const Vector block = raw.values.segment(static_cast<Eigen::Index>(k) * width, width);
    const Vector loc = block.head(d);
    if (cfg.mode == CovarianceMode::identity) return KeypointParams{loc, SpdMatrix::identity(d)};
    Vector v = block.tail(triangular(d));
    if (cfg.mode == CovarianceMode::diagonal)
        for (int s = 0; s < v.size(); ++s)
            if (!is_diagonal_slot(d, s)) v(s) = 0.0;
    SpdConstruction c = build_spd(v, cfg.remap());
    Vector nu = cfg.parameterization == Parameterization::nu_form ? loc : Vector(c.a.matrix() * loc);
    return KeypointParams{std::move(nu), std::move(c.a)};
}

double loss_value_from_raw(const RawOutput& raw, const Vector& y, const LossConfig& cfg) {
    const int d = checked_dim(raw, y, cfg);
    double total = 0.0;
    for (int k = 0; k < raw.keypoints; ++k) {
        const KeypointParams p = decode_keypoint(raw, d, k, cfg);
        total += family_nll(cfg.family, y.segment(k * d, d), p.nu, p.a, cfg.delta, cfg.include_normalizer);
    }
    return total;
}

LossResult loss_from_raw(const RawOutput& raw, const Vector& y, const LossConfig& cfg) {
    const int d = checked_dim(raw, y, cfg);
    const int width = raw_width(d, cfg.mode);
    const RemapConfig remap = cfg.remap();
    const bool mu_form = cfg.parameterization == Parameterization::mu_form;

    LossResult out{0.0, Vector::Zero(raw.values.size())};
    for (int k = 0; k < raw.keypoints; ++k) {
        const Eigen::Index offset = static_cast<Eigen::Index>(k) * width;
        const Vector block = raw.values.segment(offset, width);
        const Vector loc = block.head(d);
        const Vector yk = y.segment(k * d, d);

        if (cfg.mode == CovarianceMode::identity) {
            const SpdMatrix a = SpdMatrix::identity(d);
            out.loss += family_nll(cfg.family, yk, loc, a, cfg.delta, cfg.include_normalizer);
            out.grad.segment(offset, d) = grad_nu_a(cfg.family, yk, loc, a, cfg.delta).d_nu;
            continue;
        }

        Vector v = block.tail(triangular(d));
        if (cfg.mode == CovarianceMode::diagonal)
            for (int s = 0; s < v.size(); ++s)
                if (!is_diagonal_slot(d, s)) v(s) = 0.0;
        const SpdConstruction c = build_spd(v, remap);
        const Matrix& a = c.a.matrix();
        const Vector nu = mu_form ? Vector(a * loc) : loc;

        out.loss += family_nll(cfg.family, yk, nu, c.a, cfg.delta, cfg.include_normalizer);
        // The -log|A| term goes through the remap in closed form: forming
        // A^{-1} in the original basis loses it to rounding once g(lambda)
        // is tiny.
        const ParamGradient g = grad_nu_a(cfg.family, yk, nu, c.a, cfg.delta, false);

        Matrix d_a = g.d_a.matrix();
        if (mu_form) {
            // nu = A mu: dL/dmu = A dL/dnu and dL/dA picks up dL/dnu mu^T.
            out.grad.segment(offset, d) = a * g.d_nu;
            d_a += SymMatrix::symmetrized(g.d_nu * loc.transpose()).matrix();
        } else {
            out.grad.segment(offset, d) = g.d_nu;
        }
        const Matrix d_b = backward_through_remap(c.eig, d_a, remap).matrix() - log_det_backward(c.eig, remap).matrix();
        Vector d_v = sym_to_vec(SymMatrix::symmetrized(d_b));
        if (cfg.mode == CovarianceMode::diagonal)
            for (int s = 0; s < d_v.size(); ++s)
                if (!is_diagonal_slot(d, s)) d_v(s) = 0.0;
        out.grad.segment(offset + d, d_v.size()) = d_v;
    }
    return out;
}

ConvexityReport check_convexity_segment(const LossConfig& cfg, const Vector& y,
                                        const SegmentEndpoint& e1, const SegmentEndpoint& e2,
                                        int samples, bool include_data_term) {
    cfg.validate();
    if (samples < 3) throw std::domain_error("check_convexity_segment: need at least 3 samples");
    const Eigen::Index d = y.size();
    for (const SegmentEndpoint* e : {&e1, &e2}) {
        if (e->nu.size() != d || e->a.rows() != d || e->a.cols() != d)
            throw std::domain_error("check_convexity_segment: dimension mismatch");
        const EigenDecomposition eig = sym_eig(SymMatrix(e->a));
        if (!(eig.values.minCoeff() > cfg.theta))
            throw PreconditionError("check_convexity_segment: endpoint A has an eigenvalue <= theta");
    }

    auto loss_at = [&](double t) {
        const Vector nu = (1.0 - t) * e1.nu + t * e2.nu;
        const SpdMatrix a(SymMatrix::symmetrized((1.0 - t) * e1.a + t * e2.a));
        double value = -a.log_det();
        if (include_data_term) value += family_rho(cfg.family, (a.matrix() * y - nu).norm(), cfg.delta);
        return value;
    };

    std::vector<double> values(samples);
    for (int i = 0; i < samples; ++i) values[i] = loss_at(static_cast<double>(i) / (samples - 1));

    ConvexityReport report;
    report.samples = samples;
    double worst = 0.0;
    for (int i = 1; i + 1 < samples; ++i) {
        const double t = static_cast<double>(i) / (samples - 1);
        const double chord = (1.0 - t) * values.front() + t * values.back();
        const double midpoint = 0.5 * (values[i - 1] + values[i + 1]);
        worst = std::max({worst, values[i] - chord, values[i] - midpoint});
    }
    report.max_violation = worst;
    report.convex = worst <= 1e-9;
    return report;
}

}  // namespace mvhuber
