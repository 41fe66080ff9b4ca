#pragma once

#include <optional>

#include <Eigen/Dense>

namespace mvhuber {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

// Real symmetric matrix. Symmetry is exact: entries(i, j) == entries(j, i).
class SymMatrix {
public:
    SymMatrix() = default;
    // Throws std::domain_error unless m is square and exactly symmetric.
    explicit SymMatrix(Matrix m);

    // Returns (m + m^T) / 2 with exact symmetric storage.
    static SymMatrix symmetrized(const Matrix& m);
    static SymMatrix zero(int dim) { return SymMatrix(Matrix::Zero(dim, dim)); }
    static SymMatrix identity(int dim) { return SymMatrix(Matrix::Identity(dim, dim)); }

    int dim() const { return static_cast<int>(m_.rows()); }
    const Matrix& matrix() const { return m_; }
    double operator()(int i, int j) const { return m_(i, j); }

private:
    Matrix m_;
};

// Eigen-decomposition B = V^T diag(values) V. Rows of `vectors` are the
// orthonormal eigenvectors; values ascend. Each eigenvector has its
// largest-magnitude component positive, which makes the output a
// deterministic function of the input.
struct EigenDecomposition {
    Matrix vectors;
    Vector values;

    Matrix reconstruct() const;
    Matrix reconstruct(const Vector& mapped_values) const;
};

// Symmetric positive definite matrix with its eigenpairs cached.
class SpdMatrix {
public:
    SpdMatrix() = default;
    // Throws std::domain_error unless m is symmetric with all eigenvalues > 0.
    explicit SpdMatrix(const Matrix& m);
    explicit SpdMatrix(const SymMatrix& m);

    static SpdMatrix identity(int dim);
    // Trusted construction from eigenpairs with strictly positive values.
    static SpdMatrix from_eigen(EigenDecomposition eig);

    int dim() const { return entries_.dim(); }
    const Matrix& matrix() const { return entries_.matrix(); }
    const SymMatrix& sym() const { return entries_; }
    const EigenDecomposition& eigen() const { return eig_; }

    double log_det() const;
    Matrix inverse() const;
    Matrix sqrt() const;
    Vector solve(const Vector& rhs) const;

private:
    SymMatrix entries_;
    EigenDecomposition eig_;
};

struct RemapConfig {
    double theta = 0.1;         // precision floor
    double eig_tie_tol = 1e-8;  // relative gap below which eigenvalues count as tied

    void validate() const;
};

inline constexpr int kMaxJacobiSweeps = 50;
inline constexpr int kMaxEigenDim = 16;

/// Number of free entries d(d+1)/2 of a symmetric d x d matrix.
constexpr int triangular(int d) { return d * (d + 1) / 2; }

/// Inverse of triangular(); returns -1 if `len` is not a triangular number.
int dim_from_triangular(Eigen::Index len);

// Isometric vectorization. Ordering is the row-major upper triangle
// (0,0),(0,1),..,(0,d-1),(1,1),..; off-diagonals carry a sqrt(2) factor so
// that ||v||_2 == ||B||_F.
SymMatrix vec_to_sym(const Vector& v);
Vector sym_to_vec(const SymMatrix& b);

// Cyclic Jacobi eigensolver for d <= kMaxEigenDim. Stops when the
// off-diagonal Frobenius norm drops below 1e-13 ||B||_F; throws NumericError
// after kMaxJacobiSweeps sweeps without convergence.
EigenDecomposition sym_eig(const SymMatrix& b);

// g(lambda) = lambda above theta, theta * exp(lambda/theta - 1) otherwise.
double remap_eigenvalue(double lambda, double theta);
double remap_eigenvalue_derivative(double lambda, double theta);

struct SpdConstruction {
    SymMatrix b;
    EigenDecomposition eig;  // of b, unmapped eigenvalues
    Vector remapped;         // g(eig.values)
    SpdMatrix a;
};

// A = V^T diag(g(lambda)) V. Throws std::range_error if a remapped eigenvalue
// underflows to zero.
SpdConstruction build_spd(const Vector& v, const RemapConfig& cfg);
SpdConstruction build_spd(const SymMatrix& b, const RemapConfig& cfg);

// Divided-difference matrix K(D, g) for the given (unmapped) eigenvalues.
// Entries lie in [0, 1].
Matrix divided_difference_matrix(const Vector& values, const RemapConfig& cfg);

// dL/dB = V^T ((V dL/dA V^T) o K) V. dL_dA must be symmetric
// (std::domain_error otherwise).
SymMatrix backward_through_remap(const SymMatrix& b, const SymMatrix& dl_da,
                                 const RemapConfig& cfg);
SymMatrix backward_through_remap(const EigenDecomposition& eig, const Matrix& dl_da,
                                 const RemapConfig& cfg);

// Gradient of log|A| with respect to B, V^T diag(g'(lambda) / g(lambda)) V.
// Same as backward_through_remap(eig, A^{-1}) in exact arithmetic, without
// forming A^{-1}, whose entries overflow the rounding budget when g(lambda)
// is tiny. Frobenius norm at most sqrt(d) / theta.
SymMatrix log_det_backward(const EigenDecomposition& eig, const RemapConfig& cfg);

}  // namespace mvhuber
