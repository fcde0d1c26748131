#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <string>

#include "catlgp/errors.hpp"

namespace catlgp {

// Lower-triangular Cholesky factor of A + jitter * I.
struct CholeskyFactor {
    Eigen::MatrixXd L;
    double jitter = 0.0;
    int dim() const { return int(L.rows()); }
};

// Factor a symmetric matrix, adding jitter only when the plain factorization
// fails. The jitter starts at base_jitter * mean(diag(A)) and doubles on each
// failure, up to 10 escalations. Reductions follow Eigen's fixed scan order,
// so the result is a pure function of the inputs.
inline CholeskyFactor jittered_cholesky(const Eigen::MatrixXd& a, double base_jitter = 1e-10) {
    if (a.rows() != a.cols())
        throw DimensionMismatch("jittered_cholesky: matrix is " + std::to_string(a.rows()) +
                                "x" + std::to_string(a.cols()) + ", expected square");
    if (base_jitter <= 0.0)
        throw std::invalid_argument("jittered_cholesky: base_jitter must be positive");
    const double scale = std::max(a.cwiseAbs().maxCoeff(), 1.0);
    if ((a - a.transpose()).cwiseAbs().maxCoeff() > 1e-12 * scale)
        throw std::invalid_argument("jittered_cholesky: matrix is not symmetric");

    Eigen::LLT<Eigen::MatrixXd> llt(a);
    if (llt.info() == Eigen::Success) return {Eigen::MatrixXd(llt.matrixL()), 0.0};

    double jitter = base_jitter * a.diagonal().mean();
    for (int attempt = 0; attempt <= 10 && jitter > 0.0; ++attempt, jitter *= 2.0) {
        Eigen::MatrixXd aj = a;
        aj.diagonal().array() += jitter;
        llt.compute(aj);
        if (llt.info() == Eigen::Success) return {Eigen::MatrixXd(llt.matrixL()), jitter};
    }
    throw NotPositiveDefinite(
        "jittered_cholesky: factorization failed after jitter escalation; "
        "degenerate kernel hyperparameters or duplicated inducing inputs?");
}

enum class TriSide { forward, backward };

// Solve L X = B (forward) or L^T X = B (backward) for lower-triangular L.
inline Eigen::MatrixXd tri_solve(const Eigen::MatrixXd& l, const Eigen::MatrixXd& b,
                                 TriSide side) {
    if (l.rows() != l.cols())
        throw DimensionMismatch("tri_solve: factor is not square");
    if (l.rows() != b.rows())
        throw DimensionMismatch("tri_solve: factor dim " + std::to_string(l.rows()) +
                                " vs rhs rows " + std::to_string(b.rows()));
    if (side == TriSide::forward) return l.triangularView<Eigen::Lower>().solve(b);
    return l.transpose().triangularView<Eigen::Upper>().solve(b);
}

// (A + jitter I)^{-1} B given the factor of A + jitter I.
inline Eigen::MatrixXd spd_solve(const CholeskyFactor& f, const Eigen::MatrixXd& b) {
    return tri_solve(f.L, tri_solve(f.L, b, TriSide::forward), TriSide::backward);
}

inline Eigen::MatrixXd inverse_from_factor(const CholeskyFactor& f) {
    return spd_solve(f, Eigen::MatrixXd::Identity(f.dim(), f.dim()));
}

// log det(A + jitter I) = 2 sum log diag(L)
inline double logdet_from_factor(const Eigen::MatrixXd& l) {
    return 2.0 * l.diagonal().array().log().sum();
}

inline double logdet_from_factor(const CholeskyFactor& f) { return logdet_from_factor(f.L); }

} // namespace catlgp
