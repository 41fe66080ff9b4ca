#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <random>

#include "mvhuber/errors.hpp"
#include "mvhuber/losses.hpp"
#include "oracles.hpp"

using namespace mvhuber;

namespace {

constexpr LossFamily kFamilies[] = {LossFamily::huber, LossFamily::gauss, LossFamily::laplace,
                                    LossFamily::charbonnier};

double data_term(LossFamily f, double r, double delta) {
    switch (f) {
        case LossFamily::huber: return oracle::huber(r, delta);
        case LossFamily::gauss: return 0.5 * r * r;
        case LossFamily::laplace: return r;
        case LossFamily::charbonnier: return std::sqrt(r * r + 1.0) - 1.0;
    }
    return 0.0;
}

// NLL without normalizer written directly in Eigen; A need not be SPD-checked.
double plain_nll(LossFamily f, const Vector& y, const Vector& nu, const Matrix& a, double delta) {
    return -std::log(a.determinant()) + data_term(f, (a * y - nu).norm(), delta);
}

// Raw vector whose B has eigenvalues in a band, so FD steps stay meaningful.
Vector random_raw(int d, int keypoints, CovarianceMode mode, std::mt19937_64& rng) {
    const int w = raw_width(d, mode);
    Vector raw(w * keypoints);
    for (int k = 0; k < keypoints; ++k) {
        raw.segment(k * w, d) = oracle::random_vector(d, rng);
        if (mode != CovarianceMode::identity) {
            const Matrix b = oracle::random_symmetric(d, rng, 0.6) + 0.4 * Matrix::Identity(d, d);
            raw.segment(k * w + d, triangular(d)) = sym_to_vec(SymMatrix::symmetrized(b));
        }
    }
    return raw;
}

}  // namespace

TEST_CASE("loss value examples") {
    Vector y(2);
    y << 1, 0;
    CHECK(huber_nll(y, Vector::Zero(2), SpdMatrix::identity(2), 1.0, false) == doctest::Approx(0.5).epsilon(1e-15));
    const SpdMatrix two(Matrix(2.0 * Matrix::Identity(2, 2)));
    CHECK(huber_nll(Vector::Zero(2), Vector::Zero(2), two, 1.0, false) ==
          doctest::Approx(-std::log(4.0)).epsilon(1e-15));

    Vector y34(2);
    y34 << 3, 4;
    CHECK(laplace_nll(y34, Vector::Zero(2), SpdMatrix::identity(2), false) == doctest::Approx(5.0).epsilon(1e-15));
    CHECK(gauss_nll(y34, Vector::Zero(2), SpdMatrix::identity(2), false) == doctest::Approx(12.5).epsilon(1e-15));
    const Vector nu = two.matrix() * y34;
    CHECK(charbonnier_nll(y34, nu, two, false) == doctest::Approx(-std::log(4.0)).epsilon(1e-15));

    CHECK(huber_nll(y, Vector::Zero(2), SpdMatrix::identity(2), 1.0, true) ==
          doctest::Approx(0.5 + log_normalizing_constant(2, 1.0)).epsilon(1e-15));
    CHECK_THROWS_AS(huber_nll(Vector::Zero(3), Vector::Zero(2), SpdMatrix::identity(2), 1.0, false),
                    std::domain_error);
}

TEST_CASE("family normalizers against quadrature") {
    for (int d = 1; d <= 4; ++d) {
        const double s = std::exp(log_unit_sphere_area(d));
        for (LossFamily f : kFamilies) {
            const double delta = 1.3;
            auto radial = [&](double r) { return std::pow(r, d - 1) * std::exp(-data_term(f, r, delta)); };
            double mass = oracle::integrate(radial, 0.0, delta) + oracle::integrate(radial, delta, INFINITY);
            mass *= s;
            CHECK(family_log_normalizer(f, d, delta) == doctest::Approx(std::log(mass)).epsilon(1e-10));
        }
    }
    CHECK(family_log_normalizer(LossFamily::gauss, 2, 1.0) == doctest::Approx(std::log(2 * oracle::kPi)));
    CHECK(family_log_normalizer(LossFamily::laplace, 3, 1.0) == doctest::Approx(std::log(8 * oracle::kPi)));
}

TEST_CASE("normalized huber loss integrates to one over y") {
    Matrix a(2, 2);
    a << 1.3, 0.2, 0.2, 0.8;
    const SpdMatrix am(a);
    Vector nu(2);
    nu << 0.5, -0.3;
    const double h = 0.03;
    double s = 0.0;
    Vector y(2);
    for (double x = -30 + h / 2; x < 30; x += h)
        for (double z = -30 + h / 2; z < 30; z += h) {
            y << x, z;
            s += std::exp(-huber_nll(y, nu, am, 1.0, true));
        }
    CHECK(std::abs(s * h * h - 1.0) < 1e-3);
}

TEST_CASE("parameter gradients match finite differences") {
    std::mt19937_64 rng(101);
    for (LossFamily f : kFamilies) {
        double worst = 0.0;
        for (int t = 0; t < 200; ++t) {
            const int d = 1 + t % 3;
            const double delta = 0.5 + (t % 4) * 0.5;
            const Matrix a = oracle::random_spd(d, rng, 0.3, 3.0);
            const Vector nu = oracle::random_vector(d, rng, 2.0);
            const Vector y = oracle::random_vector(d, rng, 2.0);
            const double r = (a * y - nu).norm();
            if (std::abs(r - delta) < 1e-4 || r < 1e-4) continue;

            const ParamGradient g = grad_nu_a(f, y, nu, SpdMatrix(a), delta);
            const Vector fd_nu = oracle::fd_gradient([&](const Vector& x) { return plain_nll(f, y, x, a, delta); }, nu);
            const Matrix fd_a = oracle::fd_symmetric_gradient(
                [&](const Matrix& x) { return plain_nll(f, y, nu, x, delta); }, a);
            worst = std::max({worst, oracle::rel_error(g.d_nu, fd_nu), oracle::rel_error(g.d_a.matrix(), fd_a)});
        }
        INFO("family " << to_string(f));
        CHECK(worst < 1e-5);
    }
}

TEST_CASE("gradient special points") {
    Matrix a(2, 2);
    a << 2.0, 0.3, 0.3, 1.0;
    const SpdMatrix am(a);
    Vector y(2);
    y << 0.4, -1.0;
    // r = 0: only the determinant term remains
    const ParamGradient g0 = grad_nu_a(LossFamily::huber, y, a * y, am, 1.0);
    CHECK((g0.d_a.matrix() + a.inverse()).cwiseAbs().maxCoeff() < 1e-14);
    CHECK(g0.d_nu.norm() == 0.0);

    // both sides of r = delta
    Vector dir(2);
    dir << 0.6, 0.8;
    const double delta = 1.0;
    const ParamGradient lo = grad_nu_a(LossFamily::huber, y, a * y - dir * (delta * (1 - 1e-12)), am, delta);
    const ParamGradient hi = grad_nu_a(LossFamily::huber, y, a * y - dir * (delta * (1 + 1e-12)), am, delta);
    CHECK((lo.d_nu - hi.d_nu).norm() < 1e-10);
    CHECK((lo.d_a.matrix() - hi.d_a.matrix()).norm() < 1e-10);
}

TEST_CASE("identity mode huber is the plain Huber loss") {
    LossConfig cfg;
    cfg.mode = CovarianceMode::identity;
    cfg.include_normalizer = false;
    std::mt19937_64 rng(7);
    for (int t = 0; t < 50; ++t) {
        const Vector mu = oracle::random_vector(2, rng, 2.0);
        const Vector y = oracle::random_vector(2, rng, 2.0);
        const auto res = loss_from_raw(RawOutput{mu, 1}, y, cfg);
        CHECK(res.loss == doctest::Approx(oracle::huber((y - mu).norm(), 1.0)).epsilon(1e-14));
    }
}

TEST_CASE("loss_from_raw gradient matches finite differences") {
    std::mt19937_64 rng(55);
    for (LossFamily f : kFamilies) {
        for (CovarianceMode mode : {CovarianceMode::identity, CovarianceMode::diagonal, CovarianceMode::full}) {
            for (Parameterization par : {Parameterization::nu_form, Parameterization::mu_form}) {
                LossConfig cfg;
                cfg.family = f;
                cfg.mode = mode;
                cfg.parameterization = par;
                double worst = 0.0;
                for (int t = 0; t < 100; ++t) {
                    const int d = 2 + t % 2;
                    const int kp = 1 + t % 3;
                    const Vector raw = random_raw(d, kp, mode, rng);
                    const Vector y = oracle::random_vector(d * kp, rng, 1.5);
                    const LossResult res = loss_from_raw(RawOutput{raw, kp}, y, cfg);
                    CHECK(res.loss == doctest::Approx(loss_value_from_raw(RawOutput{raw, kp}, y, cfg)).epsilon(1e-14));
                    const Vector fd = oracle::fd_gradient(
                        [&](const Vector& x) { return loss_value_from_raw(RawOutput{x, kp}, y, cfg); }, raw);
                    worst = std::max(worst, oracle::rel_error(res.grad, fd));
                }
                INFO(to_string(f) << " " << to_string(mode) << " " << to_string(par));
                CHECK(worst < 1e-5);
            }
        }
    }
}

TEST_CASE("diagonal mode ignores off-diagonal raw entries") {
    LossConfig cfg;
    cfg.mode = CovarianceMode::diagonal;
    std::mt19937_64 rng(2);
    const Vector raw = random_raw(3, 1, CovarianceMode::full, rng);
    const Vector y = oracle::random_vector(3, rng);
    const KeypointParams p = decode_keypoint(RawOutput{raw, 1}, 3, 0, cfg);
    const Matrix a = p.a.matrix();
    CHECK((a - Matrix(a.diagonal().asDiagonal())).norm() == 0.0);
    const auto res = loss_from_raw(RawOutput{raw, 1}, y, cfg);
    // slots 1, 2, 4 of the 3x3 upper triangle are off-diagonal
    CHECK(res.grad(3 + 1) == 0.0);
    CHECK(res.grad(3 + 2) == 0.0);
    CHECK(res.grad(3 + 4) == 0.0);
}

TEST_CASE("rotation invariance") {
    std::mt19937_64 rng(19);
    LossConfig cfg;
    for (int t = 0; t < 50; ++t) {
        const int d = 2 + t % 2;
        const Matrix r = oracle::random_orthonormal(d, rng);
        const Matrix a = oracle::random_spd(d, rng);
        const Vector nu = oracle::random_vector(d, rng);
        const Vector y = oracle::random_vector(d, rng, 2.0);
        const Matrix ra = r * a * r.transpose();
        const double l1 = huber_nll(y, nu, SpdMatrix(a), 1.0, true);
        const double l2 = huber_nll(r * y, r * nu, SpdMatrix(SymMatrix::symmetrized(ra)), 1.0, true);
        CHECK(std::abs(l1 - l2) < 1e-10);

        const Vector raw = random_raw(d, 1, CovarianceMode::full, rng);
        const Matrix b = vec_to_sym(raw.tail(triangular(d))).matrix();
        Vector raw_rot(raw.size());
        raw_rot.head(d) = r * raw.head(d);
        raw_rot.tail(triangular(d)) = sym_to_vec(SymMatrix::symmetrized(r * b * r.transpose()));
        CHECK(std::abs(loss_value_from_raw(RawOutput{raw, 1}, y, cfg) -
                       loss_value_from_raw(RawOutput{raw_rot, 1}, r * y, cfg)) < 1e-10);
    }
}

TEST_CASE("raw gradient norm bound") {
    LossConfig cfg;
    std::mt19937_64 rng(2718);
    std::normal_distribution<double> n(0.0, 1.0);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    double worst_margin = -INFINITY;
    for (int t = 0; t < 20000; ++t) {
        const int d = 1 + t % 3;
        const double scale = std::pow(10.0, 2 * u(rng) - 1);  // raw spread from 0.1 to 10
        Vector raw(d + triangular(d));
        for (Eigen::Index i = 0; i < raw.size(); ++i) raw(i) = scale * n(rng);
        Vector y = oracle::random_vector(d, rng);
        y *= 3.0 * u(rng) / std::max(y.norm(), 1e-12);
        const auto res = loss_from_raw(RawOutput{raw, 1}, y, cfg);
        const double bound = d / cfg.theta + std::sqrt(1.0 + y.squaredNorm());
        worst_margin = std::max(worst_margin, res.grad.norm() - bound);
    }
    CHECK(worst_margin <= 1e-9);
}

TEST_CASE("determinant gradient with respect to B is at most d / theta") {
    RemapConfig cfg;
    std::mt19937_64 rng(41);
    for (int t = 0; t < 2000; ++t) {
        const int d = 1 + t % 4;
        const Matrix b = oracle::random_symmetric(d, rng, 0.5 * (1 + t % 5));
        const auto c = build_spd(SymMatrix::symmetrized(b), cfg);
        const Matrix dl_db = -log_det_backward(c.eig, cfg).matrix();
        CHECK(dl_db.norm() <= d / cfg.theta * (1 + 1e-12));
        if (c.remapped.minCoeff() > 1e-3) {
            const Matrix via_k = backward_through_remap(c.eig, SymMatrix::symmetrized(-c.a.inverse()).matrix(), cfg).matrix();
            CHECK((via_k - dl_db).cwiseAbs().maxCoeff() < 1e-9 * std::max(1.0, dl_db.norm()));
        }
    }
}

TEST_CASE("Hessian of the data term is bounded by 1 + |y|^2") {
    std::mt19937_64 rng(77);
    const double delta = 1.0;
    double worst = -INFINITY;
    for (int t = 0; t < 300; ++t) {
        const int d = 2;
        const int m = d + triangular(d);
        Vector x(m);
        x.head(d) = oracle::random_vector(d, rng);
        x.tail(triangular(d)) = sym_to_vec(SymMatrix::symmetrized(oracle::random_spd(d, rng)));
        Vector y = oracle::random_vector(d, rng);
        y *= 3.0 * std::uniform_real_distribution<double>(0, 1)(rng) / y.norm();
        auto h = [&](const Vector& p) {
            const Matrix a = vec_to_sym(p.tail(triangular(d))).matrix();
            return oracle::huber((a * y - p.head(d)).norm(), delta);
        };
        {
            const Matrix a = vec_to_sym(x.tail(triangular(d))).matrix();
            const double r = (a * y - x.head(d)).norm();
            if (std::abs(r - delta) < 1e-2 || r < 1e-2) continue;
        }
        const double step = 1e-4;
        Matrix hess(m, m);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < m; ++j) {
                Vector pp = x, pm = x, mp = x, mm = x;
                pp(i) += step; pp(j) += step;
                pm(i) += step; pm(j) -= step;
                mp(i) -= step; mp(j) += step;
                mm(i) -= step; mm(j) -= step;
                hess(i, j) = (h(pp) - h(pm) - h(mp) + h(mm)) / (4 * step * step);
            }
        Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (hess + hess.transpose()));
        worst = std::max(worst, es.eigenvalues().maxCoeff() - (1.0 + y.squaredNorm()));
    }
    CHECK(worst <= 1e-6);
}

TEST_CASE("family consistency") {
    std::mt19937_64 rng(3);
    const SpdMatrix id = SpdMatrix::identity(2);
    for (int t = 0; t < 100; ++t) {
        Vector y = oracle::random_vector(2, rng);
        y *= 3.0 * std::uniform_real_distribution<double>(0, 1)(rng) / y.norm();
        CHECK(std::abs(huber_nll(y, Vector::Zero(2), id, 10.0, true) - gauss_nll(y, Vector::Zero(2), id, true)) <
              1e-3);
    }
    // far in the tail the huber loss grows with slope delta, like a scaled laplace loss
    Vector dir(2);
    dir << 0.8, -0.6;
    const double delta = 0.7;
    for (double r = 5.0; r < 50.0; r += 5.0) {
        const double s1 = huber_nll(Vector(dir * (r + 1.0)), Vector::Zero(2), id, delta, true);
        const double s0 = huber_nll(Vector(dir * r), Vector::Zero(2), id, delta, true);
        const double l1 = laplace_nll(Vector(dir * (r + 1.0)), Vector::Zero(2), id, true);
        const double l0 = laplace_nll(Vector(dir * r), Vector::Zero(2), id, true);
        CHECK(s1 - s0 == doctest::Approx(delta * (l1 - l0)).epsilon(1e-12));
    }
}

TEST_CASE("convexity probe") {
    LossConfig cfg;
    std::mt19937_64 rng(1234);
    auto endpoint = [&]() {
        return SegmentEndpoint{oracle::random_vector(2, rng, 2.0), oracle::random_spd(2, rng, 0.11, 4.0)};
    };

    double worst = 0.0;
    double worst_det = 0.0;
    for (int t = 0; t < 1000; ++t) {
        const Vector y = oracle::random_vector(2, rng, 1.5);
        const auto e1 = endpoint();
        const auto e2 = endpoint();
        worst = std::max(worst, check_convexity_segment(cfg, y, e1, e2, 21).max_violation);
        worst_det = std::max(worst_det, check_convexity_segment(cfg, y, e1, e2, 21, false).max_violation);
    }
    CHECK(worst <= 1e-9);
    CHECK(worst_det <= 1e-9);

    // straddling the branch boundary: r < delta at one end, r > delta at the other
    Vector y(2);
    y << 1.0, 0.5;
    SegmentEndpoint inside{Matrix::Identity(2, 2) * y, Matrix::Identity(2, 2)};
    inside.nu(0) += 0.3;
    SegmentEndpoint outside{inside.nu + Vector::Constant(2, 4.0), 2.0 * Matrix::Identity(2, 2)};
    const auto rep = check_convexity_segment(cfg, y, inside, outside, 201);
    CHECK(rep.convex);
    CHECK(rep.samples == 201);

    SegmentEndpoint bad{Vector::Zero(2), 0.05 * Matrix::Identity(2, 2)};
    CHECK_THROWS_AS(check_convexity_segment(cfg, y, bad, outside, 11), PreconditionError);
    CHECK_THROWS_AS(check_convexity_segment(cfg, y, inside, outside, 2), std::domain_error);
}

TEST_CASE("configuration errors") {
    CHECK_THROWS_AS(parse_family("cauchy"), std::invalid_argument);
    CHECK_THROWS_AS(parse_mode("banded"), std::invalid_argument);
    CHECK(parse_parameterization("mu") == Parameterization::mu_form);
    LossConfig cfg;
    cfg.delta = 0.0;
    CHECK_THROWS_AS(cfg.validate(), std::domain_error);
    cfg = LossConfig{};
    CHECK_THROWS_AS(loss_from_raw(RawOutput{Vector::Zero(4), 1}, Vector::Zero(2), cfg), std::domain_error);
    CHECK_THROWS_AS(loss_from_raw(RawOutput{Vector::Zero(5), 2}, Vector::Zero(3), cfg), std::domain_error);
    CHECK(raw_width(2, CovarianceMode::full) == 5);
    CHECK(raw_width(3, CovarianceMode::identity) == 3);
}
