#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <string>
#include <vector>

#include "catlgp/errors.hpp"

namespace catlgp {

// Hyperparameters of the ARD squared-exponential covariance
//   k(x, x') = sigma_f^2 * exp(-1/2 sum_q alpha_q (x_q - x'_q)^2).
// Both the signal variance and the relevance weights are stored on log scale
// so an unconstrained gradient step cannot leave the feasible region. A weight
// of exactly zero round-trips as log = -inf and disables its dimension.
struct KernelParams {
    double log_signal_var = 0.0;
    Eigen::VectorXd log_ard; // size Q

    KernelParams() = default;
    KernelParams(double signal_var, const Eigen::VectorXd& ard_weights) {
        if (!(signal_var > 0.0))
            throw std::invalid_argument("KernelParams: signal variance must be positive");
        for (Eigen::Index q = 0; q < ard_weights.size(); ++q)
            if (ard_weights[q] < 0.0)
                throw std::invalid_argument("KernelParams: ARD weights must be non-negative");
        log_signal_var = std::log(signal_var);
        log_ard = ard_weights.array().log();
    }

    static KernelParams unit(int q) { return KernelParams(1.0, Eigen::VectorXd::Ones(q)); }

    double signal_var() const { return std::exp(log_signal_var); }
    // scalar std::exp so a -inf log weight maps to exactly zero (Eigen's
    // vectorized exp returns a denormal there)
    Eigen::VectorXd ard_weights() const {
        Eigen::VectorXd a(log_ard.size());
        for (Eigen::Index q = 0; q < log_ard.size(); ++q) a[q] = std::exp(log_ard[q]);
        return a;
    }
    int dim() const { return int(log_ard.size()); }
};

inline double eval_kernel(const Eigen::VectorXd& x, const Eigen::VectorXd& x2,
                          const KernelParams& p) {
    if (x.size() != x2.size() || x.size() != p.dim())
        throw DimensionMismatch("eval_kernel: input dims " + std::to_string(x.size()) + "/" +
                                std::to_string(x2.size()) + " vs kernel dim " +
                                std::to_string(p.dim()));
    double d2 = 0.0;
    for (Eigen::Index q = 0; q < x.size(); ++q) {
        const double diff = x[q] - x2[q];
        d2 += std::exp(p.log_ard[q]) * diff * diff;
    }
    return p.signal_var() * std::exp(-0.5 * d2);
}

namespace detail {

// alpha-weighted squared distances via the expanded square; tiny negative
// values from cancellation are clamped to zero.
inline Eigen::MatrixXd ard_sq_dist(const Eigen::MatrixXd& x, const Eigen::MatrixXd& z,
                                   const Eigen::VectorXd& alpha) {
    const Eigen::MatrixXd xw = x * alpha.asDiagonal();
    const Eigen::VectorXd rx = (xw.array() * x.array()).rowwise().sum();
    const Eigen::MatrixXd zw = z * alpha.asDiagonal();
    const Eigen::VectorXd rz = (zw.array() * z.array()).rowwise().sum();
    Eigen::MatrixXd d2 = rx.replicate(1, z.rows()) + rz.transpose().replicate(x.rows(), 1) -
                         2.0 * (xw * z.transpose());
    return d2.cwiseMax(0.0);
}

} // namespace detail

// A x A Gram matrix of the rows of x. Diagonal is exactly sigma_f^2 and the
// result is numerically symmetric.
inline Eigen::MatrixXd gram(const Eigen::MatrixXd& x, const KernelParams& p) {
    if (x.cols() != p.dim())
        throw DimensionMismatch("gram: input has " + std::to_string(x.cols()) +
                                " columns, kernel dim is " + std::to_string(p.dim()));
    Eigen::MatrixXd d2 = detail::ard_sq_dist(x, x, p.ard_weights());
    d2 = 0.5 * (d2 + d2.transpose()).eval();
    d2.diagonal().setZero();
    return p.signal_var() * (-0.5 * d2).array().exp();
}

// Cross covariances: entry (a, m) = k(x_a, z_m).
inline Eigen::MatrixXd cross_gram(const Eigen::MatrixXd& x, const Eigen::MatrixXd& z,
                                  const KernelParams& p) {
    if (x.cols() != z.cols())
        throw DimensionMismatch("cross_gram: column counts differ");
    if (x.cols() != p.dim())
        throw DimensionMismatch("cross_gram: inputs have " + std::to_string(x.cols()) +
                                " columns, kernel dim is " + std::to_string(p.dim()));
    const Eigen::MatrixXd d2 = detail::ard_sq_dist(x, z, p.ard_weights());
    return p.signal_var() * (-0.5 * d2).array().exp();
}

// Derivatives of every cross-Gram entry with respect to the log
// hyperparameters. d_log_signal_var equals the Gram matrix itself.
struct KernelGrads {
    Eigen::MatrixXd d_log_signal_var;
    std::vector<Eigen::MatrixXd> d_log_ard; // one A x M matrix per latent dim
};

inline KernelGrads kernel_param_grads(const Eigen::MatrixXd& x, const Eigen::MatrixXd& z,
                                      const KernelParams& p) {
    const Eigen::MatrixXd k = cross_gram(x, z, p);
    KernelGrads g;
    g.d_log_signal_var = k;
    g.d_log_ard.reserve(size_t(p.dim()));
    const Eigen::VectorXd alpha = p.ard_weights();
    for (int q = 0; q < p.dim(); ++q) {
        Eigen::MatrixXd dq(x.rows(), z.rows());
        for (Eigen::Index i = 0; i < x.rows(); ++i)
            for (Eigen::Index j = 0; j < z.rows(); ++j) {
                const double diff = x(i, q) - z(j, q);
                dq(i, j) = -0.5 * alpha[q] * diff * diff * k(i, j);
            }
        g.d_log_ard.push_back(std::move(dq));
    }
    return g;
}

} // namespace catlgp
