#include "mvhuber/spd_param.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>

#include "mvhuber/errors.hpp"

namespace mvhuber {

namespace {

constexpr double kSqrt2 = 1.41421356237309504880;

bool exactly_symmetric(const Matrix& m) {
    if (m.rows() != m.cols()) return false;
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = i + 1; j < m.cols(); ++j)
            if (m(i, j) != m(j, i)) return false;
    return true;
}

double off_diagonal_norm(const Matrix& a) {
    double s = 0.0;
    for (Eigen::Index i = 0; i < a.rows(); ++i)
        for (Eigen::Index j = 0; j < a.cols(); ++j)
            if (i != j) s += a(i, j) * a(i, j);
    return std::sqrt(s);
}

}  // namespace

SymMatrix::SymMatrix(Matrix m) : m_(std::move(m)) {
    if (!exactly_symmetric(m_))
        throw std::domain_error("SymMatrix: input is not square and exactly symmetric");
}

SymMatrix SymMatrix::symmetrized(const Matrix& m) {
    if (m.rows() != m.cols()) throw std::domain_error("SymMatrix: input is not square");
    Matrix s = m;
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = i + 1; j < m.cols(); ++j) {
            const double v = 0.5 * (m(i, j) + m(j, i));
            s(i, j) = v;
            s(j, i) = v;
        }
    return SymMatrix(std::move(s));
}

Matrix EigenDecomposition::reconstruct() const { return reconstruct(values); }

Matrix EigenDecomposition::reconstruct(const Vector& mapped_values) const {
    Matrix m = vectors.transpose() * mapped_values.asDiagonal() * vectors;
    return SymMatrix::symmetrized(m).matrix();
}

SpdMatrix::SpdMatrix(const SymMatrix& m) : entries_(m), eig_(sym_eig(m)) {
    if (m.dim() == 0) throw std::domain_error("SpdMatrix: empty matrix");
    if (!(eig_.values.minCoeff() > 0.0))
        throw std::domain_error("SpdMatrix: matrix is not positive definite");
}

SpdMatrix::SpdMatrix(const Matrix& m) : SpdMatrix(SymMatrix(m)) {}

SpdMatrix SpdMatrix::identity(int dim) { return SpdMatrix(SymMatrix::identity(dim)); }

SpdMatrix SpdMatrix::from_eigen(EigenDecomposition eig) {
    if (!(eig.values.size() > 0 && eig.values.minCoeff() > 0.0))
        throw std::domain_error("SpdMatrix: eigenvalues must be positive");
    SpdMatrix out;
    out.entries_ = SymMatrix(eig.reconstruct());
    out.eig_ = std::move(eig);
    return out;
}

double SpdMatrix::log_det() const { return eig_.values.array().log().sum(); }

Matrix SpdMatrix::inverse() const { return eig_.reconstruct(eig_.values.cwiseInverse()); }

Matrix SpdMatrix::sqrt() const { return eig_.reconstruct(eig_.values.cwiseSqrt()); }

Vector SpdMatrix::solve(const Vector& rhs) const {
    if (rhs.size() != dim()) throw std::domain_error("SpdMatrix::solve: dimension mismatch");
    const Vector coords = eig_.vectors * rhs;
    return eig_.vectors.transpose() * coords.cwiseQuotient(eig_.values);
}

void RemapConfig::validate() const {
    if (!(theta > 0.0) || !std::isfinite(theta))
        throw std::domain_error("RemapConfig: theta must be positive");
    if (!(eig_tie_tol > 0.0)) throw std::domain_error("RemapConfig: eig_tie_tol must be positive");
}

int dim_from_triangular(Eigen::Index len) {
    for (int d = 0; triangular(d) <= len; ++d)
        if (triangular(d) == len) return d;
    return -1;
}

SymMatrix vec_to_sym(const Vector& v) {
    const int d = dim_from_triangular(v.size());
    if (d <= 0)
        throw std::domain_error("vec_to_sym: length " + std::to_string(v.size()) +
                                " is not d(d+1)/2 for a positive integer d");
    Matrix b(d, d);
    int k = 0;
    for (int i = 0; i < d; ++i) {
        b(i, i) = v(k++);
        for (int j = i + 1; j < d; ++j) {
            const double x = v(k++) / kSqrt2;
            b(i, j) = x;
            b(j, i) = x;
        }
    }
    return SymMatrix(std::move(b));
}

Vector sym_to_vec(const SymMatrix& b) {
    const int d = b.dim();
    Vector v(triangular(d));
    int k = 0;
    for (int i = 0; i < d; ++i) {
        v(k++) = b(i, i);
        for (int j = i + 1; j < d; ++j) v(k++) = b(i, j) * kSqrt2;
    }
    return v;
}

EigenDecomposition sym_eig(const SymMatrix& b) {
    const int n = b.dim();
    if (n == 0) throw std::domain_error("sym_eig: empty matrix");
    if (n > kMaxEigenDim) throw std::domain_error("sym_eig: dimension exceeds 16");
    if (!b.matrix().allFinite()) throw std::domain_error("sym_eig: non-finite entries");

    Matrix a = b.matrix();
    Matrix v = Matrix::Identity(n, n);  // columns are eigenvectors while iterating
    const double tol = 1e-13 * a.norm();

    bool converged = false;
    for (int sweep = 0; sweep <= kMaxJacobiSweeps; ++sweep) {
        if (off_diagonal_norm(a) <= tol) {
            converged = true;
            break;
        }
        if (sweep == kMaxJacobiSweeps) break;
        for (int p = 0; p < n - 1; ++p) {
            for (int q = p + 1; q < n; ++q) {
                const double apq = a(p, q);
                if (apq == 0.0) continue;
                const double phi = (a(q, q) - a(p, p)) / (2.0 * apq);
                const double t = (phi >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(phi) + std::sqrt(phi * phi + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                // A <- J^T A J with J the (p, q) plane rotation.
                for (int k = 0; k < n; ++k) {
                    const double akp = a(k, p);
                    const double akq = a(k, q);
                    a(k, p) = c * akp - s * akq;
                    a(k, q) = s * akp + c * akq;
                }
                for (int k = 0; k < n; ++k) {
                    const double apk = a(p, k);
                    const double aqk = a(q, k);
                    a(p, k) = c * apk - s * aqk;
                    a(q, k) = s * apk + c * aqk;
                }
                a(p, q) = 0.0;
                a(q, p) = 0.0;
                for (int k = 0; k < n; ++k) {
                    const double vkp = v(k, p);
                    const double vkq = v(k, q);
                    v(k, p) = c * vkp - s * vkq;
                    v(k, q) = s * vkp + c * vkq;
                }
            }
        }
    }
    if (!converged)
        throw NumericError("sym_eig: Jacobi iteration did not converge in " +
                           std::to_string(kMaxJacobiSweeps) + " sweeps");

    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int i, int j) { return a(i, i) < a(j, j); });

    EigenDecomposition out;
    out.values.resize(n);
    out.vectors.resize(n, n);
    for (int r = 0; r < n; ++r) {
        const int src = order[r];
        out.values(r) = a(src, src);
        Vector col = v.col(src);
        Eigen::Index imax = 0;
        col.cwiseAbs().maxCoeff(&imax);
        if (col(imax) < 0.0) col = -col;
        out.vectors.row(r) = col.transpose();
    }
    return out;
}

double remap_eigenvalue(double lambda, double theta) {
    return lambda > theta ? lambda : theta * std::exp(lambda / theta - 1.0);
}

double remap_eigenvalue_derivative(double lambda, double theta) {
    return lambda > theta ? 1.0 : std::exp(lambda / theta - 1.0);
}

SpdConstruction build_spd(const SymMatrix& b, const RemapConfig& cfg) {
    cfg.validate();
    EigenDecomposition eig = sym_eig(b);
    Vector remapped = eig.values.unaryExpr([&](double l) { return remap_eigenvalue(l, cfg.theta); });
    if (!(remapped.minCoeff() > 0.0))
        throw std::range_error("build_spd: remapped eigenvalue underflowed to zero");
    EigenDecomposition mapped{eig.vectors, remapped};
    return SpdConstruction{b, std::move(eig), std::move(remapped), SpdMatrix::from_eigen(std::move(mapped))};
}

SpdConstruction build_spd(const Vector& v, const RemapConfig& cfg) {
    return build_spd(vec_to_sym(v), cfg);
}

Matrix divided_difference_matrix(const Vector& values, const RemapConfig& cfg) {
    const Eigen::Index n = values.size();
    Matrix k(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < n; ++j) {
            const double li = values(i);
            const double lj = values(j);
            const double scale = std::max({1.0, std::abs(li), std::abs(lj)});
            if (std::abs(li - lj) > cfg.eig_tie_tol * scale) {
                k(i, j) = (remap_eigenvalue(li, cfg.theta) - remap_eigenvalue(lj, cfg.theta)) / (li - lj);
            } else {
                k(i, j) = remap_eigenvalue_derivative(0.5 * (li + lj), cfg.theta);
            }
        }
    }
    return k;
}

SymMatrix backward_through_remap(const EigenDecomposition& eig, const Matrix& dl_da,
                                 const RemapConfig& cfg) {
    cfg.validate();
    const Eigen::Index n = eig.values.size();
    if (dl_da.rows() != n || dl_da.cols() != n)
        throw std::domain_error("backward_through_remap: dimension mismatch");
    const double scale = std::max(1.0, dl_da.cwiseAbs().maxCoeff());
    if ((dl_da - dl_da.transpose()).cwiseAbs().maxCoeff() > 1e-12 * scale)
        throw std::domain_error("backward_through_remap: dL/dA must be symmetric");

    const Matrix in_eigenbasis = eig.vectors * dl_da * eig.vectors.transpose();
    const Matrix scaled = in_eigenbasis.cwiseProduct(divided_difference_matrix(eig.values, cfg));
    return SymMatrix::symmetrized(eig.vectors.transpose() * scaled * eig.vectors);
}

SymMatrix backward_through_remap(const SymMatrix& b, const SymMatrix& dl_da,
                                 const RemapConfig& cfg) {
    if (b.dim() != dl_da.dim()) throw std::domain_error("backward_through_remap: dimension mismatch");
    return backward_through_remap(sym_eig(b), dl_da.matrix(), cfg);
}

SymMatrix log_det_backward(const EigenDecomposition& eig, const RemapConfig& cfg) {
    cfg.validate();
    // g'(l) / g(l) is 1/theta below the floor and 1/l above it.
    const Vector ratio = eig.values.unaryExpr([&](double l) { return l > cfg.theta ? 1.0 / l : 1.0 / cfg.theta; });
    return SymMatrix::symmetrized(eig.vectors.transpose() * ratio.asDiagonal() * eig.vectors);
}

}  // namespace mvhuber
