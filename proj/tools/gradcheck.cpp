#include "gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <stdexcept>

#include "mvhuber/losses.hpp"
#include "mvhuber/spd_param.hpp"

namespace mvhuber::cli {

namespace {

constexpr double kStep = 1e-6;

double rel_error(const Matrix& analytic, const Matrix& fd) {
    const double scale = std::max(1.0, fd.cwiseAbs().maxCoeff());
    return (analytic - fd).cwiseAbs().maxCoeff() / scale;
}

Vector fd_gradient(const std::function<double(const Vector&)>& f, const Vector& x) {
    Vector g(x.size());
    Vector xp = x;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        xp(i) = x(i) + kStep;
        const double fp = f(xp);
        xp(i) = x(i) - kStep;
        const double fm = f(xp);
        xp(i) = x(i);
        g(i) = (fp - fm) / (2.0 * kStep);
    }
    return g;
}

// Gradient over symmetric matrices: entry (i, j) is the derivative along
// E_ij + E_ji, halved off the diagonal.
Matrix fd_symmetric(const std::function<double(const Matrix&)>& f, const Matrix& b) {
    const Eigen::Index n = b.rows();
    Matrix g(n, n);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = i; j < n; ++j) {
            Matrix e = Matrix::Zero(n, n);
            e(i, j) = e(j, i) = 1.0;
            const double v = (f(b + kStep * e) - f(b - kStep * e)) / (2.0 * kStep);
            g(i, j) = g(j, i) = i == j ? v : 0.5 * v;
        }
    return g;
}

Vector normal_vector(int n, std::mt19937_64& rng, double scale) {
    std::normal_distribution<double> nd(0.0, scale);
    Vector v(n);
    for (int i = 0; i < n; ++i) v(i) = nd(rng);
    return v;
}

Matrix symmetric(int d, std::mt19937_64& rng, double scale) {
    const Vector v = normal_vector(d * d, rng, scale);
    const Matrix m = Eigen::Map<const Matrix>(v.data(), d, d);
    return 0.5 * (m + m.transpose());
}

Matrix orthonormal(int d, std::mt19937_64& rng) {
    const Vector v = normal_vector(d * d, rng, 1.0);
    Eigen::HouseholderQR<Matrix> qr(Eigen::Map<const Matrix>(v.data(), d, d));
    return qr.householderQ();
}

Matrix with_spectrum(const Matrix& q, const Vector& ev) {
    const Matrix m = q * ev.asDiagonal() * q.transpose();
    return 0.5 * (m + m.transpose());
}

void corrupt(Matrix& g) { g(0, 0) += 1e-3 * std::max(1.0, std::abs(g(0, 0))); }

double check_loss(LossFamily family, std::mt19937_64& rng, bool fault) {
    std::uniform_int_distribution<int> pick(0, 2);
    LossConfig cfg;
    cfg.family = family;
    cfg.mode = static_cast<CovarianceMode>(pick(rng));
    cfg.parameterization = pick(rng) == 0 ? Parameterization::mu_form : Parameterization::nu_form;
    const int d = 1 + pick(rng);
    const int keypoints = 1 + pick(rng) % 2;
    const int w = raw_width(d, cfg.mode);
    Vector raw(w * keypoints);
    for (int k = 0; k < keypoints; ++k) {
        raw.segment(k * w, d) = normal_vector(d, rng, 1.0);
        if (cfg.mode != CovarianceMode::identity) {
            const Matrix b = symmetric(d, rng, 0.6) + 0.4 * Matrix::Identity(d, d);
            raw.segment(k * w + d, triangular(d)) = sym_to_vec(SymMatrix::symmetrized(b));
        }
    }
    const Vector y = normal_vector(d * keypoints, rng, 1.5);
    Matrix analytic = loss_from_raw(RawOutput{raw, keypoints}, y, cfg).grad;
    if (fault) corrupt(analytic);
    const Vector fd =
        fd_gradient([&](const Vector& x) { return loss_value_from_raw(RawOutput{x, keypoints}, y, cfg); }, raw);
    return rel_error(analytic, fd);
}

double check_backward(const Matrix& b, const Matrix& g, const RemapConfig& cfg, bool fault) {
    Matrix analytic = backward_through_remap(SymMatrix(b), SymMatrix(g), cfg).matrix();
    if (fault) corrupt(analytic);
    const Matrix fd = fd_symmetric(
        [&](const Matrix& x) { return (build_spd(SymMatrix::symmetrized(x), cfg).a.matrix().cwiseProduct(g)).sum(); },
        b);
    return rel_error(analytic, fd);
}

double check_log_det(const Matrix& b, const RemapConfig& cfg, bool fault) {
    Matrix analytic = log_det_backward(sym_eig(SymMatrix(b)), cfg).matrix();
    if (fault) corrupt(analytic);
    const Matrix fd =
        fd_symmetric([&](const Matrix& x) { return build_spd(SymMatrix::symmetrized(x), cfg).a.log_det(); }, b);
    return rel_error(analytic, fd);
}

}  // namespace

GradcheckReport run_gradcheck(const GradcheckOptions& opt) {
    if (opt.trials < 1) throw std::invalid_argument("gradcheck: trials must be >= 1");
    std::mt19937_64 rng(opt.seed);
    GradcheckReport report;
    for (LossFamily f : {LossFamily::huber, LossFamily::gauss, LossFamily::laplace, LossFamily::charbonnier}) {
        double worst = 0.0;
        for (int t = 0; t < opt.trials; ++t) worst = std::max(worst, check_loss(f, rng, opt.inject_fault));
        report.worst_family[std::string(to_string(f))] = worst;
        report.configurations += opt.trials;
    }

    const RemapConfig cfg;
    std::uniform_real_distribution<double> spectrum(-0.3, 0.6);
    std::uniform_real_distribution<double> log_gap(-12.0, -6.0);
    for (int t = 0; t < opt.trials; ++t) {
        const int d = 2 + t % 3;
        Vector ev(d);
        for (int i = 0; i < d; ++i) ev(i) = spectrum(rng);
        const Matrix q = orthonormal(d, rng);
        const Matrix g = symmetric(d, rng, 1.0);
        const Matrix b = with_spectrum(q, ev);
        report.worst_backward = std::max(report.worst_backward, check_backward(b, g, cfg, opt.inject_fault));
        report.worst_log_det = std::max(report.worst_log_det, check_log_det(b, cfg, opt.inject_fault));

        ev(1) = ev(0) + std::pow(10.0, log_gap(rng));
        report.worst_backward_degenerate = std::max(report.worst_backward_degenerate,
                                                    check_backward(with_spectrum(q, ev), g, cfg, opt.inject_fault));
        report.configurations += 3;
    }

    report.passed = report.worst_backward < opt.tolerance && report.worst_log_det < opt.tolerance &&
                    report.worst_backward_degenerate < opt.degenerate_tolerance;
    for (const auto& [name, worst] : report.worst_family) report.passed = report.passed && worst < opt.tolerance;
    return report;
}

}  // namespace mvhuber::cli
