#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>
#include <cmath>
#include <vector>

#include "catlgp/inference.hpp"

using namespace catlgp;

namespace {

struct TinyModel {
    CategoricalDataset data;
    VariationalPosterior post;
    std::vector<KernelParams> kernels;
    ModelConfig config;
};

// random but well-conditioned state for gradient and invariance checks
TinyModel make_tiny(int n, int d_vars, std::vector<int> cards, int q, int m,
                    std::uint64_t seed, bool with_missing = false) {
    TinyModel t;
    RngStream rng(seed);
    t.data.cardinalities = cards;
    t.data.values.resize(n, d_vars);
    for (int i = 0; i < n; ++i)
        for (int d = 0; d < d_vars; ++d)
            t.data.values(i, d) = int(rng.uniform() * cards[size_t(d)]);
    if (with_missing) t.data.values(0, 0) = CategoricalDataset::kMissing;

    t.post.x_mean.resize(n, q);
    t.post.x_log_var.resize(n, q);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < q; ++j) {
            t.post.x_mean(i, j) = rng.normal();
            t.post.x_log_var(i, j) = -1.0 + 0.3 * rng.normal();
        }
    t.post.inducing.resize(m, q);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < q; ++j) t.post.inducing(i, j) = 2.0 * rng.normal();
    for (int d = 0; d < d_vars; ++d) {
        std::vector<Eigen::VectorXd> mus;
        for (int k = 0; k < cards[size_t(d)]; ++k) {
            Eigen::VectorXd mu(m);
            for (int i = 0; i < m; ++i) mu[i] = rng.normal();
            mus.push_back(std::move(mu));
        }
        t.post.u_mean.push_back(std::move(mus));
        Eigen::MatrixXd raw = Eigen::MatrixXd::Zero(m, m);
        for (int i = 0; i < m; ++i) {
            for (int j = 0; j < i; ++j) raw(i, j) = 0.2 * rng.normal();
            raw(i, i) = -0.5 + 0.2 * rng.normal();
        }
        t.post.u_chol_raw.push_back(std::move(raw));

        KernelParams kern = KernelParams::unit(q);
        kern.log_signal_var = 0.3 * rng.normal();
        for (int j = 0; j < q; ++j) kern.log_ard[j] = 0.3 * rng.normal();
        t.kernels.push_back(std::move(kern));
    }
    t.config.latent_dim = q;
    t.config.n_inducing = m;
    return t;
}

double log_normal_pdf_2d(const Eigen::Vector2d& x, const Eigen::Vector2d& mean,
                         const Eigen::Matrix2d& cov) {
    const double det = cov(0, 0) * cov(1, 1) - cov(0, 1) * cov(1, 0);
    Eigen::Matrix2d inv;
    inv << cov(1, 1), -cov(0, 1), -cov(1, 0), cov(0, 0);
    inv /= det;
    const Eigen::Vector2d r = x - mean;
    return -std::log(2.0 * M_PI) - 0.5 * std::log(det) - 0.5 * r.dot(inv * r);
}

} // namespace

TEST_CASE("kl_latents closed form", "[inference]") {
    VariationalPosterior post;
    post.x_mean = Eigen::MatrixXd::Zero(2, 2);
    post.x_log_var = Eigen::MatrixXd::Zero(2, 2);
    REQUIRE(kl_latents(post, 1.0) == Catch::Approx(0.0).margin(1e-14));

    post.x_mean = Eigen::MatrixXd::Constant(1, 1, 1.0);
    post.x_log_var = Eigen::MatrixXd::Zero(1, 1);
    REQUIRE(kl_latents(post, 1.0) == Catch::Approx(0.5).epsilon(1e-12));

    VariationalPosterior two = post;
    two.x_mean = Eigen::MatrixXd::Constant(2, 1, 1.0);
    two.x_log_var = Eigen::MatrixXd::Zero(2, 1);
    REQUIRE(kl_latents(two, 1.0) == Catch::Approx(2.0 * kl_latents(post, 1.0)).epsilon(1e-12));

    REQUIRE_THROWS_AS(kl_latents(post, 0.0), NonPositiveVariance);
}

TEST_CASE("kl_inducing zero at the prior and univariate value", "[inference]") {
    // q(U) == p(U): mu = 0, Sigma = K
    TinyModel t = make_tiny(3, 1, {2}, 2, 3, 404);
    const Eigen::MatrixXd k = gram(t.post.inducing, t.kernels[0]);
    const auto f = jittered_cholesky(k);
    Eigen::MatrixXd raw = Eigen::MatrixXd::Zero(3, 3);
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < i; ++j) raw(i, j) = f.L(i, j);
        raw(i, i) = std::log(f.L(i, i));
    }
    t.post.u_chol_raw[0] = raw;
    for (auto& mu : t.post.u_mean[0]) mu.setZero();
    REQUIRE(kl_inducing(t.post, t.kernels) == Catch::Approx(0.0).margin(1e-9));

    // M = 1, K = sigma_f^2 = 1, mu = 1, Sigma = 1 -> 1/2 per (d, k)
    TinyModel u = make_tiny(2, 1, {2}, 1, 1, 405);
    u.kernels[0].log_signal_var = 0.0;
    u.post.u_mean[0][0] = Eigen::VectorXd::Ones(1);
    u.post.u_mean[0][1] = Eigen::VectorXd::Ones(1);
    u.post.u_chol_raw[0] = Eigen::MatrixXd::Zero(1, 1); // C = 1
    REQUIRE(kl_inducing(u.post, u.kernels) == Catch::Approx(1.0).epsilon(1e-10));
}

TEST_CASE("kl_inducing matches a Monte Carlo estimate", "[inference]") {
    TinyModel t = make_tiny(2, 1, {2}, 2, 2, 406);
    const double analytic = kl_inducing(t.post, t.kernels);

    const Eigen::MatrixXd k = gram(t.post.inducing, t.kernels[0]);
    const Eigen::Matrix2d kcov = k;
    const Eigen::Matrix2d cov = t.post.u_cov(0);
    const Eigen::MatrixXd c = t.post.u_chol(0);

    // the KL sums over the two categories; estimate each term separately
    const int draws = 100000;
    double mc = 0.0, se_sq = 0.0;
    for (int k_idx = 0; k_idx < 2; ++k_idx) {
        const Eigen::Vector2d mu = t.post.u_mean[0][size_t(k_idx)];
        RngStream rng(substream(999, std::uint64_t(k_idx)));
        double total = 0.0, total_sq = 0.0;
        for (int s = 0; s < draws; ++s) {
            Eigen::Vector2d z(rng.normal(), rng.normal());
            const Eigen::Vector2d x = mu + c * z;
            const double val = log_normal_pdf_2d(x, mu, cov) -
                               log_normal_pdf_2d(x, Eigen::Vector2d::Zero(), kcov);
            total += val;
            total_sq += val * val;
        }
        const double mean = total / draws;
        mc += mean;
        se_sq += (total_sq / draws - mean * mean) / double(draws - 1);
    }
    REQUIRE(std::abs(analytic - mc) < 3.0 * std::sqrt(se_sq) + 1e-9);
}

TEST_CASE("conditional_f interpolates at inducing points", "[inference]") {
    TinyModel t = make_tiny(2, 1, {3}, 2, 3, 77);
    const auto cond = conditional_f(t.post.inducing.row(1).transpose(), t.post.u_mean[0],
                                    t.post.inducing, t.kernels[0]);
    REQUIRE(cond.var == Catch::Approx(0.0).margin(1e-8));
    for (int k = 0; k < 3; ++k)
        REQUIRE(cond.means[k] == Catch::Approx(t.post.u_mean[0][size_t(k)][1]).margin(1e-8));
}

TEST_CASE("conditional_f with zero inducing values", "[inference]") {
    TinyModel t = make_tiny(2, 1, {2}, 1, 2, 78);
    std::vector<Eigen::VectorXd> zeros(2, Eigen::VectorXd::Zero(2));
    Eigen::VectorXd x(1);
    x << 0.37;
    const auto cond = conditional_f(x, zeros, t.post.inducing, t.kernels[0]);
    REQUIRE(cond.means.cwiseAbs().maxCoeff() == 0.0);

    // dense oracle via the explicit 2x2 inverse
    const Eigen::Matrix2d k = gram(t.post.inducing, t.kernels[0]);
    Eigen::Vector2d kstar;
    for (int j = 0; j < 2; ++j)
        kstar[j] = eval_kernel(x, t.post.inducing.row(j).transpose(), t.kernels[0]);
    const double det = k(0, 0) * k(1, 1) - k(0, 1) * k(1, 0);
    Eigen::Matrix2d inv;
    inv << k(1, 1), -k(0, 1), -k(1, 0), k(0, 0);
    inv /= det;
    const double expect = t.kernels[0].signal_var() - kstar.dot(inv * kstar);
    REQUIRE(cond.var == Catch::Approx(expect).margin(1e-9));
}

TEST_CASE("conditional_f mean matches the dense oracle and var ignores u", "[inference]") {
    TinyModel t = make_tiny(2, 1, {2}, 2, 2, 79);
    Eigen::Vector2d x(0.2, -0.4);
    const auto cond = conditional_f(x, t.post.u_mean[0], t.post.inducing, t.kernels[0]);

    const Eigen::Matrix2d k = gram(t.post.inducing, t.kernels[0]);
    const double det = k(0, 0) * k(1, 1) - k(0, 1) * k(1, 0);
    Eigen::Matrix2d inv;
    inv << k(1, 1), -k(0, 1), -k(1, 0), k(0, 0);
    inv /= det;
    Eigen::Vector2d kstar;
    for (int j = 0; j < 2; ++j)
        kstar[j] = eval_kernel(x, t.post.inducing.row(j).transpose(), t.kernels[0]);
    for (int kk = 0; kk < 2; ++kk)
        REQUIRE(cond.means[kk] ==
                Catch::Approx(kstar.dot(inv * t.post.u_mean[0][size_t(kk)])).margin(1e-9));

    // variance must not depend on the u values
    std::vector<Eigen::VectorXd> other(2, Eigen::VectorXd::Constant(2, 9.0));
    const auto cond2 = conditional_f(x, other, t.post.inducing, t.kernels[0]);
    REQUIRE(cond.var == cond2.var);
    REQUIRE(cond.var >= 0.0);
}

TEST_CASE("sample_qx moments, determinism, deterministic limit", "[inference]") {
    VariationalPosterior post;
    post.x_mean = Eigen::MatrixXd::Constant(1, 1, 2.0);
    post.x_log_var = Eigen::MatrixXd::Constant(1, 1, std::log(4.0));
    double sum = 0.0, sum_sq = 0.0;
    const int draws = 100000;
    for (int s = 0; s < draws; ++s) {
        const double x = sample_qx_stream(post, 0, substream(55, std::uint64_t(s))).x[0];
        sum += x;
        sum_sq += x * x;
    }
    const double mean = sum / draws;
    const double var = sum_sq / draws - mean * mean;
    REQUIRE(std::abs(mean - 2.0) < 0.02 * 3.5);
    REQUIRE(var == Catch::Approx(4.0).epsilon(0.10));

    REQUIRE(sample_qx(post, 0, 9).x == sample_qx(post, 0, 9).x);

    post.x_log_var.setConstant(-1e6); // s -> 0
    REQUIRE(sample_qx(post, 0, 1).x[0] == Catch::Approx(2.0).margin(1e-12));
}

TEST_CASE("sample_qu moments and deterministic limit", "[inference]") {
    TinyModel t = make_tiny(2, 1, {2}, 1, 2, 91);
    const Eigen::Matrix2d cov = t.post.u_cov(0);
    Eigen::Matrix2d emp = Eigen::Matrix2d::Zero();
    Eigen::Vector2d mean = Eigen::Vector2d::Zero();
    const int draws = 100000;
    for (int s = 0; s < draws; ++s) {
        const QuSample qs = sample_qu_stream(t.post, 0, substream(66, std::uint64_t(s)));
        const Eigen::Vector2d u = qs.u.col(0);
        mean += u / draws;
        emp += u * u.transpose() / draws;
    }
    emp -= mean * mean.transpose();
    REQUIRE((emp - cov).norm() < 0.05 * cov.norm());
    REQUIRE((mean - t.post.u_mean[0][0]).cwiseAbs().maxCoeff() < 0.05);

    REQUIRE(sample_qu(t.post, 0, 5).u == sample_qu(t.post, 0, 5).u);

    t.post.u_chol_raw[0].diagonal().setConstant(-1e6);
    t.post.u_chol_raw[0](1, 0) = 0.0; // Sigma -> 0
    const QuSample qs = sample_qu(t.post, 0, 2);
    REQUIRE((qs.u.col(0) - t.post.u_mean[0][0]).cwiseAbs().maxCoeff() < 1e-12);
    REQUIRE((qs.u.col(1) - t.post.u_mean[0][1]).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("elbo on an all-missing dataset reduces to the KL terms", "[inference]") {
    TinyModel t = make_tiny(3, 2, {2, 3}, 2, 2, 15);
    t.data.values.setConstant(CategoricalDataset::kMissing);
    // validate() would reject all-missing rows; call the estimator directly
    const ElboEstimate est = elbo(t.data, t.post, t.kernels, t.config, 4, 7);
    REQUIRE(est.exp_loglik == 0.0);
    REQUIRE(est.mc_std_error == 0.0);
    REQUIRE(est.value == -est.kl_x - est.kl_u);
}

TEST_CASE("elbo decomposition identity and frozen-noise determinism", "[inference]") {
    TinyModel t = make_tiny(4, 2, {2, 3}, 2, 3, 16, true);
    const ElboEstimate a = elbo(t.data, t.post, t.kernels, t.config, 5, 31);
    const ElboEstimate b = elbo(t.data, t.post, t.kernels, t.config, 5, 31);
    REQUIRE(a.value == b.value);
    REQUIRE(a.value == a.exp_loglik - a.kl_x - a.kl_u);
    REQUIRE(a.n_samples == 5);
    REQUIRE(a.mc_std_error >= 0.0);

    const ElboEstimate c = elbo(t.data, t.post, t.kernels, t.config, 5, 32);
    REQUIRE(a.value != c.value); // different noise key
}

TEST_CASE("elbo gradients match finite differences on a tiny model", "[inference]") {
    TinyModel t = make_tiny(3, 2, {2, 3}, 2, 2, 23, true);
    const std::uint64_t key = 88;
    const int s = 3;
    auto [est, grads] = elbo_with_gradients(t.data, t.post, t.kernels, t.config, s, key);
    const Eigen::VectorXd g = pack_grads(grads, t.post, t.kernels);
    Eigen::VectorXd params = pack_params(t.post, t.kernels);

    const double h = 1e-5;
    for (int i = 0; i < params.size(); i += 3) { // spot-check a third of them
        Eigen::VectorXd p = params;
        p[i] += h;
        unpack_params(p, t.post, t.kernels);
        const double up = elbo(t.data, t.post, t.kernels, t.config, s, key).value;
        p[i] -= 2 * h;
        unpack_params(p, t.post, t.kernels);
        const double dn = elbo(t.data, t.post, t.kernels, t.config, s, key).value;
        const double fd = (up - dn) / (2 * h);
        const double tol = std::max(1e-4 * std::max(std::abs(fd), std::abs(g[i])), 1e-7);
        INFO("param " << i << " fd " << fd << " analytic " << g[i]);
        REQUIRE(std::abs(fd - g[i]) <= tol);
    }
    unpack_params(params, t.post, t.kernels);
}

TEST_CASE("kl gradient vanishes at the prior", "[inference]") {
    TinyModel t = make_tiny(2, 1, {2}, 2, 2, 29);
    t.post.x_mean.setZero();
    t.post.x_log_var.setZero(); // s^2 = prior_var = 1
    Gradients g = Gradients::zeros_like(t.post, t.kernels);
    kl_latents_grad(t.post, 1.0, 1.0, g);
    REQUIRE(g.x_mean.cwiseAbs().maxCoeff() == 0.0);
    REQUIRE(g.x_log_var.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("likelihood term is invariant under joint translation", "[inference]") {
    TinyModel t = make_tiny(3, 2, {2, 2}, 2, 3, 41);
    const std::uint64_t key = 5;
    Gradients g = Gradients::zeros_like(t.post, t.kernels);
    const LoglikResult base =
        expected_loglik(t.data, t.post, t.kernels, t.config.jitter, 4, key, &g, 1.0);

    // direction: +1 on every latent mean, inducing input, and u mean entry
    double directional = g.x_mean.sum() + g.inducing.sum();
    for (const auto& per_d : g.u_mean)
        for (const auto& mu : per_d) directional += mu.sum();
    REQUIRE(std::abs(directional) < 1e-8 * (1.0 + std::abs(base.value)));

    const double c = 0.5;
    TinyModel shifted = t;
    shifted.post.x_mean.array() += c;
    shifted.post.inducing.array() += c;
    for (auto& per_d : shifted.post.u_mean)
        for (auto& mu : per_d) mu.array() += c;
    const LoglikResult moved =
        expected_loglik(shifted.data, shifted.post, shifted.kernels, t.config.jitter, 4, key);
    REQUIRE(moved.value == Catch::Approx(base.value).margin(1e-8));
}

TEST_CASE("adding a far-away inducing point barely moves the likelihood", "[inference]") {
    TinyModel t = make_tiny(3, 1, {2}, 1, 2, 59);
    const std::uint64_t key = 3;
    const LoglikResult base = expected_loglik(t.data, t.post, t.kernels, t.config.jitter, 4, key);

    TinyModel ext = t;
    ext.post.inducing.conservativeResize(3, 1);
    ext.post.inducing(2, 0) = 1000.0;
    for (auto& mu : ext.post.u_mean[0]) {
        mu.conservativeResize(3);
        mu[2] = 0.0;
    }
    Eigen::MatrixXd raw = Eigen::MatrixXd::Zero(3, 3);
    raw.topLeftCorner(2, 2) = t.post.u_chol_raw[0];
    raw(2, 0) = raw(2, 1) = 0.0;
    raw(2, 2) = -1.0;
    ext.post.u_chol_raw[0] = raw;
    const LoglikResult moved =
        expected_loglik(ext.data, ext.post, ext.kernels, t.config.jitter, 4, key);
    REQUIRE(moved.value == Catch::Approx(base.value).margin(1e-6));
}

TEST_CASE("KL terms are never below the jitter slack", "[inference]") {
    for (std::uint64_t seed = 300; seed < 320; ++seed) {
        TinyModel t = make_tiny(3, 2, {2, 4}, 2, 3, seed);
        REQUIRE(kl_latents(t.post, 1.0) >= 0.0);
        REQUIRE(kl_inducing(t.post, t.kernels) >= -1e-8);
    }
}

TEST_CASE("mc_std_error halves when samples quadruple", "[inference]") {
    TinyModel t = make_tiny(5, 2, {3, 2}, 2, 3, 61);
    double se_small = 0.0, se_big = 0.0;
    const int reps = 20;
    for (int r = 0; r < reps; ++r) {
        se_small += elbo(t.data, t.post, t.kernels, t.config, 400, substream(1000, r)).mc_std_error;
        se_big += elbo(t.data, t.post, t.kernels, t.config, 1600, substream(2000, r)).mc_std_error;
    }
    const double ratio = se_small / se_big;
    REQUIRE(ratio > 1.4);
    REQUIRE(ratio < 2.6);
}

TEST_CASE("pack and unpack round-trip", "[inference]") {
    TinyModel t = make_tiny(3, 2, {2, 3}, 2, 3, 71);
    const Eigen::VectorXd v = pack_params(t.post, t.kernels);
    REQUIRE(v.size() == param_count(t.post, t.kernels));
    TinyModel u = make_tiny(3, 2, {2, 3}, 2, 3, 72);
    unpack_params(v, u.post, u.kernels);
    REQUIRE(pack_params(u.post, u.kernels) == v);
    REQUIRE(u.post.x_mean == t.post.x_mean);
    REQUIRE(u.kernels[1].log_ard == t.kernels[1].log_ard);
}
