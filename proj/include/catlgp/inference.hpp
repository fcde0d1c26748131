#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "catlgp/errors.hpp"
#include "catlgp/kernel.hpp"
#include "catlgp/linalg.hpp"
#include "catlgp/model.hpp"
#include "catlgp/parallel.hpp"
#include "catlgp/rng.hpp"

namespace catlgp {

// Variational state:
//   q(X) mean field,      x_nq ~ N(m_nq, s_nq^2), variances stored as logs;
//   q(U) per (d, k),      u_dk ~ N(mu_dk, Sigma_d), Sigma_d shared within d
//                         and parameterized by its lower Cholesky factor with
//                         log diagonal, so it stays SPD under any step;
//   inducing inputs Z     shared by all variables.
struct VariationalPosterior {
    Eigen::MatrixXd x_mean;    // N x Q
    Eigen::MatrixXd x_log_var; // N x Q
    Eigen::MatrixXd inducing;  // M x Q

    std::vector<std::vector<Eigen::VectorXd>> u_mean; // [d][k], each length M
    std::vector<Eigen::MatrixXd> u_chol_raw;          // [d], M x M, diag on log scale

    int n_obs() const { return int(x_mean.rows()); }
    int latent_dim() const { return int(x_mean.cols()); }
    int n_inducing() const { return int(inducing.rows()); }
    int n_vars() const { return int(u_mean.size()); }

    Eigen::MatrixXd x_var() const { return x_log_var.array().exp(); }

    // Materialize the factor C_d of Sigma_d = C_d C_d^T.
    Eigen::MatrixXd u_chol(int d) const {
        const Eigen::MatrixXd& raw = u_chol_raw[size_t(d)];
        const int m = int(raw.rows());
        Eigen::MatrixXd c = Eigen::MatrixXd::Zero(m, m);
        for (int i = 0; i < m; ++i) {
            for (int j = 0; j < i; ++j) c(i, j) = raw(i, j);
            c(i, i) = std::exp(raw(i, i));
        }
        return c;
    }

    Eigen::MatrixXd u_cov(int d) const {
        const Eigen::MatrixXd c = u_chol(d);
        return c * c.transpose();
    }
};

// ELBO estimate with its per-term decomposition. The identity
// value == exp_loglik - kl_x - kl_u holds exactly as computed.
struct ElboEstimate {
    double value = 0.0;
    double kl_x = 0.0;
    double kl_u = 0.0;
    double exp_loglik = 0.0;
    double mc_std_error = 0.0;
    int n_samples = 0;
};

// Gradient bundle mirroring the free parameters. u_chol_raw gradients are
// with respect to the raw (log-diagonal) parameterization.
struct Gradients {
    Eigen::MatrixXd x_mean, x_log_var, inducing;
    std::vector<std::vector<Eigen::VectorXd>> u_mean;
    std::vector<Eigen::MatrixXd> u_chol_raw;
    std::vector<double> kern_log_signal_var;
    std::vector<Eigen::VectorXd> kern_log_ard;

    static Gradients zeros_like(const VariationalPosterior& post,
                                const std::vector<KernelParams>& kernels) {
        Gradients g;
        g.x_mean = Eigen::MatrixXd::Zero(post.x_mean.rows(), post.x_mean.cols());
        g.x_log_var = g.x_mean;
        g.inducing = Eigen::MatrixXd::Zero(post.inducing.rows(), post.inducing.cols());
        g.u_mean.resize(post.u_mean.size());
        for (size_t d = 0; d < post.u_mean.size(); ++d) {
            g.u_mean[d].assign(post.u_mean[d].size(),
                               Eigen::VectorXd::Zero(post.n_inducing()));
            g.u_chol_raw.push_back(
                Eigen::MatrixXd::Zero(post.n_inducing(), post.n_inducing()));
        }
        g.kern_log_signal_var.assign(kernels.size(), 0.0);
        for (const auto& k : kernels) g.kern_log_ard.push_back(Eigen::VectorXd::Zero(k.dim()));
        return g;
    }
};

namespace detail {

inline void check_posterior_dims(const VariationalPosterior& post,
                                 const std::vector<KernelParams>& kernels) {
    const int q = post.latent_dim();
    const int m = post.n_inducing();
    if (post.x_log_var.rows() != post.x_mean.rows() ||
        post.x_log_var.cols() != post.x_mean.cols())
        throw DimensionMismatch("posterior: x_mean and x_log_var shapes differ");
    if (post.inducing.cols() != q)
        throw DimensionMismatch("posterior: inducing inputs have wrong latent dim");
    if (post.u_mean.size() != post.u_chol_raw.size() || post.u_mean.size() != kernels.size())
        throw DimensionMismatch("posterior: per-variable containers disagree");
    for (size_t d = 0; d < kernels.size(); ++d) {
        if (kernels[d].dim() != q)
            throw DimensionMismatch("posterior: kernel " + std::to_string(d) +
                                    " has wrong latent dim");
        if (post.u_chol_raw[d].rows() != m || post.u_chol_raw[d].cols() != m)
            throw DimensionMismatch("posterior: u_chol_raw " + std::to_string(d) +
                                    " has wrong shape");
        for (const auto& mu : post.u_mean[d])
            if (mu.size() != m)
                throw DimensionMismatch("posterior: u_mean length != n_inducing");
    }
}

// Pullback of an (unconstrained, entry-wise) Gram adjoint onto Z and the log
// hyperparameters. gram_z must be the pure Gram matrix without jitter.
inline void gram_adjoint(const Eigen::MatrixXd& abar, const Eigen::MatrixXd& z,
                         const Eigen::MatrixXd& gram_z, const KernelParams& p,
                         Eigen::MatrixXd& zbar, double& log_sf2_bar,
                         Eigen::VectorXd& log_ard_bar) {
    const Eigen::VectorXd alpha = p.ard_weights();
    const int m = int(z.rows());
    const int q_dim = int(z.cols());
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < m; ++j) {
            const double g = abar(i, j) * gram_z(i, j);
            log_sf2_bar += g;
            if (i == j) continue;
            for (int q = 0; q < q_dim; ++q) {
                const double diff = z(i, q) - z(j, q);
                const double c = g * alpha[q] * diff;
                zbar(i, q) -= c;
                zbar(j, q) += c;
                log_ard_bar[q] -= 0.5 * g * alpha[q] * diff * diff;
            }
        }
}

// Chain a dense factor adjoint onto the raw (log-diagonal, lower-triangular)
// storage of C_d.
inline void chol_raw_chain(const Eigen::MatrixXd& cbar, const Eigen::MatrixXd& c,
                           Eigen::MatrixXd& raw_bar) {
    const int m = int(c.rows());
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < i; ++j) raw_bar(i, j) += cbar(i, j);
        raw_bar(i, i) += cbar(i, i) * c(i, i);
    }
}

} // namespace detail

// KL(q(X) || p(X)) for the fully factorized Gaussian posterior against the
// iid N(0, prior_var) prior. Closed form, summed over all (n, q).
inline double kl_latents(const VariationalPosterior& post, double prior_var) {
    if (!(prior_var > 0.0))
        throw NonPositiveVariance("kl_latents: prior variance must be positive");
    const Eigen::ArrayXXd s2 = post.x_log_var.array().exp();
    const Eigen::ArrayXXd m2 = post.x_mean.array().square();
    return 0.5 * (s2 / prior_var + m2 / prior_var - 1.0 -
                  (post.x_log_var.array() - std::log(prior_var)))
                     .sum();
}

inline void kl_latents_grad(const VariationalPosterior& post, double prior_var, double weight,
                            Gradients& grads) {
    if (!(prior_var > 0.0))
        throw NonPositiveVariance("kl_latents_grad: prior variance must be positive");
    grads.x_mean += weight / prior_var * post.x_mean;
    grads.x_log_var.array() +=
        weight * 0.5 * (post.x_log_var.array().exp() / prior_var - 1.0);
}

namespace detail {

inline double kl_inducing_impl(const VariationalPosterior& post,
                               const std::vector<KernelParams>& kernels, double base_jitter,
                               Gradients* grads, double weight) {
    check_posterior_dims(post, kernels);
    const int d_vars = post.n_vars();
    const int m = post.n_inducing();

    std::vector<double> kl_d(size_t(d_vars), 0.0);
    std::vector<Eigen::MatrixXd> zbar_d;
    if (grads)
        zbar_d.assign(size_t(d_vars), Eigen::MatrixXd::Zero(m, post.latent_dim()));

    parallel_for(d_vars, [&](int d) {
        const KernelParams& kern = kernels[size_t(d)];
        const int n_cat = int(post.u_mean[size_t(d)].size());
        const Eigen::MatrixXd gram_z = gram(post.inducing, kern);
        const CholeskyFactor chol = jittered_cholesky(gram_z, base_jitter);
        const Eigen::MatrixXd c = post.u_chol(d);

        // tr(K^{-1} Sigma) via the Frobenius norm of L^{-1} C
        const Eigen::MatrixXd t = tri_solve(chol.L, c, TriSide::forward);
        const double tr_ks = t.squaredNorm();
        const double logdet_k = logdet_from_factor(chol);
        const double logdet_sigma = 2.0 * post.u_chol_raw[size_t(d)].diagonal().sum();

        double quad = 0.0;
        std::vector<Eigen::VectorXd> beta(static_cast<size_t>(n_cat));
        for (int k = 0; k < n_cat; ++k) {
            beta[size_t(k)] = spd_solve(chol, post.u_mean[size_t(d)][size_t(k)]);
            quad += post.u_mean[size_t(d)][size_t(k)].dot(beta[size_t(k)]);
        }
        kl_d[size_t(d)] =
            0.5 * (n_cat * (tr_ks - m + logdet_k - logdet_sigma) + quad);

        if (!grads) return;
        // mu and C adjoints
        const Eigen::MatrixXd kinv_c = spd_solve(chol, c);
        for (int k = 0; k < n_cat; ++k)
            grads->u_mean[size_t(d)][size_t(k)] += weight * beta[size_t(k)];
        Eigen::MatrixXd cbar = Eigen::MatrixXd::Zero(m, m);
        for (int i = 0; i < m; ++i) {
            for (int j = 0; j < i; ++j) cbar(i, j) = weight * n_cat * kinv_c(i, j);
            cbar(i, i) = weight * n_cat * (kinv_c(i, i) - 1.0 / c(i, i));
        }
        detail::chol_raw_chain(cbar, c, grads->u_chol_raw[size_t(d)]);

        // Gram adjoint: d kl / d K = 1/2 (n_cat K^{-1} - n_cat W W^T - sum_k beta beta^T)
        const Eigen::MatrixXd kinv = inverse_from_factor(chol);
        Eigen::MatrixXd abar = 0.5 * weight * n_cat * (kinv - kinv_c * kinv_c.transpose());
        for (int k = 0; k < n_cat; ++k)
            abar -= 0.5 * weight * beta[size_t(k)] * beta[size_t(k)].transpose();
        detail::gram_adjoint(abar, post.inducing, gram_z, kern, zbar_d[size_t(d)],
                             grads->kern_log_signal_var[size_t(d)],
                             grads->kern_log_ard[size_t(d)]);
    });

    double total = 0.0;
    for (int d = 0; d < d_vars; ++d) total += kl_d[size_t(d)];
    if (grads)
        for (int d = 0; d < d_vars; ++d) grads->inducing += zbar_d[size_t(d)];
    return total;
}

} // namespace detail

// KL(q(U) || p(U)) with p(u_dk) = N(0, K_{d,MM}); non-negative up to jitter
// slack. Sigma_d is shared across the categories of variable d.
inline double kl_inducing(const VariationalPosterior& post,
                          const std::vector<KernelParams>& kernels,
                          double base_jitter = 1e-8) {
    return detail::kl_inducing_impl(post, kernels, base_jitter, nullptr, 0.0);
}

// Sparse-GP conditional p(f_nd | x, U_d): per-category means, one shared
// variance. The variance is clamped at zero; the clamp absorbs cancellation
// error of the same order as the jitter.
struct ConditionalF {
    Eigen::VectorXd means;
    double var = 0.0;
};

inline ConditionalF conditional_f_with_factor(const Eigen::VectorXd& x,
                                              const std::vector<Eigen::VectorXd>& u_d,
                                              const Eigen::MatrixXd& z,
                                              const CholeskyFactor& chol,
                                              const KernelParams& p) {
    const int m = int(z.rows());
    Eigen::VectorXd kstar(m);
    for (int j = 0; j < m; ++j) {
        double d2 = 0.0;
        for (int q = 0; q < z.cols(); ++q) {
            const double diff = x[q] - z(j, q);
            d2 += std::exp(p.log_ard[q]) * diff * diff;
        }
        kstar[j] = p.signal_var() * std::exp(-0.5 * d2);
    }
    const Eigen::VectorXd a = spd_solve(chol, kstar);
    ConditionalF out;
    out.var = std::max(p.signal_var() - kstar.dot(a), 0.0);
    out.means.resize(Eigen::Index(u_d.size()));
    for (size_t k = 0; k < u_d.size(); ++k) out.means[Eigen::Index(k)] = a.dot(u_d[k]);
    return out;
}

inline ConditionalF conditional_f(const Eigen::VectorXd& x,
                                  const std::vector<Eigen::VectorXd>& u_d,
                                  const Eigen::MatrixXd& z, const KernelParams& p,
                                  double base_jitter = 1e-8) {
    if (x.size() != z.cols())
        throw DimensionMismatch("conditional_f: x dim vs inducing dim");
    for (const auto& u : u_d)
        if (u.size() != z.rows())
            throw DimensionMismatch("conditional_f: u vector length vs inducing count");
    const CholeskyFactor chol = jittered_cholesky(gram(z, p), base_jitter);
    return conditional_f_with_factor(x, u_d, z, chol, p);
}

// Reparameterized draw from q(x_n); the noise is retained so gradients can
// flow through the mean and scale.
struct QxSample {
    Eigen::VectorXd x, eps;
};

inline QxSample sample_qx_stream(const VariationalPosterior& post, int n,
                                 std::uint64_t stream_seed) {
    const int q = post.latent_dim();
    RngStream rng(stream_seed);
    QxSample s;
    s.eps.resize(q);
    s.x.resize(q);
    for (int i = 0; i < q; ++i) {
        s.eps[i] = rng.normal();
        s.x[i] = post.x_mean(n, i) + std::exp(0.5 * post.x_log_var(n, i)) * s.eps[i];
    }
    return s;
}

inline QxSample sample_qx(const VariationalPosterior& post, int n, std::uint64_t key) {
    if (n < 0 || n >= post.n_obs()) throw IndexOutOfRange("sample_qx: observation index");
    return sample_qx_stream(post, n, substream(key, streams::x_noise, 0, std::uint64_t(n)));
}

// Reparameterized draw from q(U_d): one column per category, u = mu + C eps.
struct QuSample {
    Eigen::MatrixXd u, eps; // M x K_d
};

inline QuSample sample_qu_stream(const VariationalPosterior& post, int d,
                                 std::uint64_t stream_seed) {
    const int m = post.n_inducing();
    const int n_cat = int(post.u_mean[size_t(d)].size());
    const Eigen::MatrixXd c = post.u_chol(d);
    QuSample s;
    s.eps.resize(m, n_cat);
    s.u.resize(m, n_cat);
    for (int k = 0; k < n_cat; ++k) {
        RngStream rng(substream(stream_seed, std::uint64_t(k)));
        for (int i = 0; i < m; ++i) s.eps(i, k) = rng.normal();
        s.u.col(k) = post.u_mean[size_t(d)][size_t(k)] +
                     c.triangularView<Eigen::Lower>() * s.eps.col(k);
    }
    return s;
}

inline QuSample sample_qu(const VariationalPosterior& post, int d, std::uint64_t key) {
    if (d < 0 || d >= post.n_vars()) throw IndexOutOfRange("sample_qu: variable index");
    return sample_qu_stream(post, d, substream(key, streams::u_noise, 0, std::uint64_t(d)));
}

// Monte Carlo estimate of the expected log-likelihood term
//   sum_{n,d observed} E_q log p(y_nd | f_nd)
// with joint reparameterized draws of (x_n, U_d, f_nd). All noise is derived
// from (key, sample, n, d) substreams, so for a fixed key the estimate is a
// deterministic, differentiable function of the parameters, and per-variable
// partial results can be reduced in a fixed order regardless of threading.
struct LoglikResult {
    double value = 0.0;
    double mc_std_error = 0.0;
    std::vector<double> per_sample;
};

inline LoglikResult expected_loglik(const CategoricalDataset& data,
                                    const VariationalPosterior& post,
                                    const std::vector<KernelParams>& kernels,
                                    double base_jitter, int n_samples, std::uint64_t key,
                                    Gradients* grads = nullptr, double grad_weight = 1.0) {
    detail::check_posterior_dims(post, kernels);
    if (data.n_obs() != post.n_obs() || data.n_vars() != post.n_vars())
        throw DimensionMismatch("expected_loglik: dataset vs posterior shape mismatch");
    if (n_samples < 1) throw std::invalid_argument("expected_loglik: n_samples must be >= 1");

    const int n_obs = data.n_obs();
    const int d_vars = data.n_vars();
    const int q_dim = post.latent_dim();
    const int m = post.n_inducing();
    const int s_count = n_samples;

    // Latent draws are shared across variables within a sample.
    std::vector<Eigen::MatrixXd> xs(static_cast<size_t>(s_count));
    for (int s = 0; s < s_count; ++s) {
        xs[size_t(s)].resize(n_obs, q_dim);
        for (int n = 0; n < n_obs; ++n)
            xs[size_t(s)].row(n) =
                sample_qx_stream(post, n, substream(key, streams::x_noise, std::uint64_t(s),
                                                    std::uint64_t(n)))
                    .x;
    }

    struct Local {
        std::vector<double> per_sample;
        Eigen::MatrixXd x_mean_bar, x_log_var_bar, z_bar;
        std::vector<Eigen::VectorXd> u_mean_bar;
        Eigen::MatrixXd c_raw_bar;
        double log_sf2_bar = 0.0;
        Eigen::VectorXd log_ard_bar;
    };
    std::vector<Local> locals(static_cast<size_t>(d_vars));

    parallel_for(d_vars, [&](int d) {
        Local& loc = locals[size_t(d)];
        loc.per_sample.assign(size_t(s_count), 0.0);
        const KernelParams& kern = kernels[size_t(d)];
        const int n_cat = data.cardinalities[size_t(d)];
        const double sf2 = kern.signal_var();
        const Eigen::VectorXd alpha = kern.ard_weights();

        const Eigen::MatrixXd gram_z = gram(post.inducing, kern);
        const CholeskyFactor chol = jittered_cholesky(gram_z, base_jitter);
        const Eigen::MatrixXd c = post.u_chol(d);

        Eigen::MatrixXd abar;
        if (grads) {
            loc.x_mean_bar = Eigen::MatrixXd::Zero(n_obs, q_dim);
            loc.x_log_var_bar = Eigen::MatrixXd::Zero(n_obs, q_dim);
            loc.z_bar = Eigen::MatrixXd::Zero(m, q_dim);
            loc.u_mean_bar.assign(size_t(n_cat), Eigen::VectorXd::Zero(m));
            loc.c_raw_bar = Eigen::MatrixXd::Zero(m, m);
            loc.log_ard_bar = Eigen::VectorXd::Zero(q_dim);
            abar = Eigen::MatrixXd::Zero(m, m);
        }

        Eigen::VectorXd kstar(m), f(n_cat), eps_f(n_cat);
        for (int s = 0; s < s_count; ++s) {
            const QuSample qu = sample_qu_stream(
                post, d, substream(key, streams::u_noise, std::uint64_t(s), std::uint64_t(d)));
            for (int n = 0; n < n_obs; ++n) {
                const int y = data.values(n, d);
                if (y == CategoricalDataset::kMissing) continue;
                const auto x = xs[size_t(s)].row(n);

                for (int j = 0; j < m; ++j) {
                    double d2 = 0.0;
                    for (int q = 0; q < q_dim; ++q) {
                        const double diff = x[q] - post.inducing(j, q);
                        d2 += alpha[q] * diff * diff;
                    }
                    kstar[j] = sf2 * std::exp(-0.5 * d2);
                }
                const Eigen::VectorXd a = spd_solve(chol, kstar);
                const double v = std::max(sf2 - kstar.dot(a), 0.0);
                const double sqv = std::sqrt(v);

                RngStream frng(substream(key, streams::f_noise, std::uint64_t(s),
                                         std::uint64_t(n), std::uint64_t(d)));
                for (int k = 0; k < n_cat; ++k) {
                    eps_f[k] = frng.normal();
                    f[k] = a.dot(qu.u.col(k)) + sqv * eps_f[k];
                }
                loc.per_sample[size_t(s)] += f[y] - logsumexp(f);

                if (!grads) continue;
                // reverse pass; fbar carries the 1/S of the sample average
                const Eigen::VectorXd p = softmax(f);
                Eigen::VectorXd fbar = -p / double(s_count);
                fbar[y] += 1.0 / double(s_count);

                double vbar = 0.0;
                if (v > 0.0) vbar = fbar.dot(eps_f) / (2.0 * sqv);

                Eigen::VectorXd aabar = -vbar * kstar;
                for (int k = 0; k < n_cat; ++k) {
                    aabar += fbar[k] * qu.u.col(k);
                    loc.u_mean_bar[size_t(k)] += fbar[k] * a;
                    // C adjoint from u = mu + C eps (lower triangle only)
                    for (int i = 0; i < m; ++i)
                        for (int j = 0; j <= i; ++j)
                            loc.c_raw_bar(i, j) += fbar[k] * a[i] * qu.eps(j, k);
                }
                const Eigen::VectorXd h = spd_solve(chol, aabar);
                const Eigen::VectorXd kbar = h - vbar * a;
                abar.noalias() -= h * a.transpose();
                loc.log_sf2_bar += vbar * sf2;

                for (int j = 0; j < m; ++j) {
                    const double g = kbar[j] * kstar[j];
                    loc.log_sf2_bar += g;
                    for (int q = 0; q < q_dim; ++q) {
                        const double diff = x[q] - post.inducing(j, q);
                        const double cc = g * alpha[q] * diff;
                        loc.x_mean_bar(n, q) -= cc;
                        loc.z_bar(j, q) += cc;
                        loc.log_ard_bar[q] -= 0.5 * g * alpha[q] * diff * diff;
                        // x flows into m directly and into log s^2 via the
                        // retained noise: x - m = s * eps
                        loc.x_log_var_bar(n, q) -=
                            0.5 * cc * (x[q] - post.x_mean(n, q));
                    }
                }
            }
        }

        if (grads) {
            // c_raw_bar currently holds dense factor adjoints; chain the
            // log-diagonal and add the gram pullback of abar.
            Eigen::MatrixXd cbar = loc.c_raw_bar;
            loc.c_raw_bar.setZero();
            detail::chol_raw_chain(cbar, c, loc.c_raw_bar);
            detail::gram_adjoint(abar, post.inducing, gram_z, kern, loc.z_bar,
                                 loc.log_sf2_bar, loc.log_ard_bar);
        }
    });

    LoglikResult out;
    out.per_sample.assign(size_t(s_count), 0.0);
    for (int d = 0; d < d_vars; ++d)
        for (int s = 0; s < s_count; ++s)
            out.per_sample[size_t(s)] += locals[size_t(d)].per_sample[size_t(s)];
    double mean = 0.0;
    for (double t : out.per_sample) mean += t;
    mean /= double(s_count);
    out.value = mean;
    if (s_count > 1) {
        double ss = 0.0;
        for (double t : out.per_sample) ss += (t - mean) * (t - mean);
        out.mc_std_error = std::sqrt(ss / double(s_count - 1) / double(s_count));
    }

    if (grads) {
        for (int d = 0; d < d_vars; ++d) {
            const Local& loc = locals[size_t(d)];
            grads->x_mean += grad_weight * loc.x_mean_bar;
            grads->x_log_var += grad_weight * loc.x_log_var_bar;
            grads->inducing += grad_weight * loc.z_bar;
            for (size_t k = 0; k < loc.u_mean_bar.size(); ++k)
                grads->u_mean[size_t(d)][k] += grad_weight * loc.u_mean_bar[k];
            grads->u_chol_raw[size_t(d)] += grad_weight * loc.c_raw_bar;
            grads->kern_log_signal_var[size_t(d)] += grad_weight * loc.log_sf2_bar;
            grads->kern_log_ard[size_t(d)] += grad_weight * loc.log_ard_bar;
        }
    }
    return out;
}

// Monte Carlo ELBO: analytic KL terms plus the sampled likelihood term.
inline ElboEstimate elbo(const CategoricalDataset& data, const VariationalPosterior& post,
                         const std::vector<KernelParams>& kernels, const ModelConfig& config,
                         int n_samples, std::uint64_t key) {
    ElboEstimate est;
    est.kl_x = kl_latents(post, config.prior_var_x);
    est.kl_u = kl_inducing(post, kernels, config.jitter);
    const LoglikResult ll =
        expected_loglik(data, post, kernels, config.jitter, n_samples, key);
    est.exp_loglik = ll.value;
    est.mc_std_error = ll.mc_std_error;
    est.n_samples = n_samples;
    est.value = est.exp_loglik - est.kl_x - est.kl_u;
    return est;
}

// ELBO and its gradient on the same noise draws (common random numbers).
inline std::pair<ElboEstimate, Gradients> elbo_with_gradients(
    const CategoricalDataset& data, const VariationalPosterior& post,
    const std::vector<KernelParams>& kernels, const ModelConfig& config, int n_samples,
    std::uint64_t key) {
    Gradients grads = Gradients::zeros_like(post, kernels);
    ElboEstimate est;
    est.kl_x = kl_latents(post, config.prior_var_x);
    kl_latents_grad(post, config.prior_var_x, -1.0, grads);
    est.kl_u = detail::kl_inducing_impl(post, kernels, config.jitter, &grads, -1.0);
    const LoglikResult ll =
        expected_loglik(data, post, kernels, config.jitter, n_samples, key, &grads, 1.0);
    est.exp_loglik = ll.value;
    est.mc_std_error = ll.mc_std_error;
    est.n_samples = n_samples;
    est.value = est.exp_loglik - est.kl_x - est.kl_u;
    return {est, std::move(grads)};
}

// --- flat parameter vector <-> structured state -------------------------
//
// Layout: x_mean, x_log_var, inducing (column-major each), then per variable
// d: log_sf2, log_ard, u_mean per category, lower triangle of u_chol_raw
// (row by row, diagonal included).

inline int param_count(const VariationalPosterior& post,
                       const std::vector<KernelParams>& kernels) {
    const int m = post.n_inducing();
    int count = int(2 * post.x_mean.size() + post.inducing.size());
    for (size_t d = 0; d < kernels.size(); ++d)
        count += 1 + kernels[d].dim() + int(post.u_mean[d].size()) * m + m * (m + 1) / 2;
    return count;
}

inline int inducing_param_offset(const VariationalPosterior& post) {
    return int(2 * post.x_mean.size());
}

namespace detail {

template <typename Scalar, typename MatIn>
inline void copy_mat(const MatIn& src, Eigen::VectorXd& v, int& at) {
    for (Eigen::Index j = 0; j < src.cols(); ++j)
        for (Eigen::Index i = 0; i < src.rows(); ++i) v[at++] = src(i, j);
}

inline void copy_back(Eigen::MatrixXd& dst, const Eigen::VectorXd& v, int& at) {
    for (Eigen::Index j = 0; j < dst.cols(); ++j)
        for (Eigen::Index i = 0; i < dst.rows(); ++i) dst(i, j) = v[at++];
}

} // namespace detail

inline Eigen::VectorXd pack_params(const VariationalPosterior& post,
                                   const std::vector<KernelParams>& kernels) {
    Eigen::VectorXd v(param_count(post, kernels));
    int at = 0;
    detail::copy_mat<double>(post.x_mean, v, at);
    detail::copy_mat<double>(post.x_log_var, v, at);
    detail::copy_mat<double>(post.inducing, v, at);
    const int m = post.n_inducing();
    for (size_t d = 0; d < kernels.size(); ++d) {
        v[at++] = kernels[d].log_signal_var;
        for (int q = 0; q < kernels[d].dim(); ++q) v[at++] = kernels[d].log_ard[q];
        for (const auto& mu : post.u_mean[d])
            for (int i = 0; i < m; ++i) v[at++] = mu[i];
        for (int i = 0; i < m; ++i)
            for (int j = 0; j <= i; ++j) v[at++] = post.u_chol_raw[d](i, j);
    }
    return v;
}

inline void unpack_params(const Eigen::VectorXd& v, VariationalPosterior& post,
                          std::vector<KernelParams>& kernels) {
    int at = 0;
    detail::copy_back(post.x_mean, v, at);
    detail::copy_back(post.x_log_var, v, at);
    detail::copy_back(post.inducing, v, at);
    const int m = post.n_inducing();
    for (size_t d = 0; d < kernels.size(); ++d) {
        kernels[d].log_signal_var = v[at++];
        for (int q = 0; q < kernels[d].dim(); ++q) kernels[d].log_ard[q] = v[at++];
        for (auto& mu : post.u_mean[d])
            for (int i = 0; i < m; ++i) mu[i] = v[at++];
        for (int i = 0; i < m; ++i)
            for (int j = 0; j <= i; ++j) post.u_chol_raw[d](i, j) = v[at++];
    }
}

inline Eigen::VectorXd pack_grads(const Gradients& g, const VariationalPosterior& post,
                                  const std::vector<KernelParams>& kernels) {
    Eigen::VectorXd v(param_count(post, kernels));
    int at = 0;
    detail::copy_mat<double>(g.x_mean, v, at);
    detail::copy_mat<double>(g.x_log_var, v, at);
    detail::copy_mat<double>(g.inducing, v, at);
    const int m = post.n_inducing();
    for (size_t d = 0; d < kernels.size(); ++d) {
        v[at++] = g.kern_log_signal_var[d];
        for (int q = 0; q < kernels[d].dim(); ++q) v[at++] = g.kern_log_ard[d][q];
        for (const auto& mu : g.u_mean[d])
            for (int i = 0; i < m; ++i) v[at++] = mu[i];
        for (int i = 0; i < m; ++i)
            for (int j = 0; j <= i; ++j) v[at++] = g.u_chol_raw[d](i, j);
    }
    return v;
}

} // namespace catlgp
