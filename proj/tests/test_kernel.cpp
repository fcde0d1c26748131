#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>
#include <cmath>

#include "catlgp/kernel.hpp"
#include "catlgp/linalg.hpp"
#include "catlgp/rng.hpp"

using namespace catlgp;

namespace {

Eigen::MatrixXd random_mat(int r, int c, std::uint64_t seed) {
    RngStream rng(seed);
    Eigen::MatrixXd m(r, c);
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) m(i, j) = rng.normal();
    return m;
}

} // namespace

TEST_CASE("eval_kernel basics", "[kernel]") {
    const KernelParams p(2.0, Eigen::Vector2d(1.0, 3.0));
    const Eigen::Vector2d x(0.3, -0.7);
    REQUIRE(eval_kernel(x, x, p) == Catch::Approx(2.0).epsilon(1e-14));

    const KernelParams flat(1.5, Eigen::Vector2d(0.0, 0.0));
    REQUIRE(eval_kernel(x, Eigen::Vector2d(100.0, -40.0), flat) ==
            Catch::Approx(1.5).epsilon(1e-14));

    const KernelParams scalar(1.0, Eigen::VectorXd::Constant(1, 2.0));
    REQUIRE(eval_kernel(Eigen::VectorXd::Zero(1), Eigen::VectorXd::Ones(1), scalar) ==
            Catch::Approx(std::exp(-1.0)).epsilon(1e-12));

    REQUIRE_THROWS_AS(eval_kernel(Eigen::Vector2d(0, 0), Eigen::Vector3d(0, 0, 0), p),
                      DimensionMismatch);
}

TEST_CASE("gram single row and duplicates", "[kernel]") {
    const KernelParams p(1.7, Eigen::Vector2d(1.0, 1.0));
    const Eigen::MatrixXd k1 = gram(random_mat(1, 2, 3), p);
    REQUIRE(k1.rows() == 1);
    REQUIRE(k1(0, 0) == Catch::Approx(1.7).epsilon(1e-14));

    Eigen::MatrixXd dup(2, 2);
    dup << 0.4, -1.0, 0.4, -1.0;
    const Eigen::MatrixXd k2 = gram(dup, p);
    REQUIRE(k2.isApprox(Eigen::MatrixXd::Constant(2, 2, 1.7), 1e-14));
    const auto f = jittered_cholesky(k2);
    REQUIRE(f.jitter > 0.0); // rank deficient without jitter
}

TEST_CASE("gram and cross_gram match the pairwise oracle", "[kernel]") {
    const KernelParams p(0.8, Eigen::Vector2d(0.5, 2.5));
    const Eigen::MatrixXd x = random_mat(3, 2, 11);
    const Eigen::MatrixXd z = random_mat(2, 2, 12);

    const Eigen::MatrixXd g = gram(x, p);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            REQUIRE(g(i, j) ==
                    Catch::Approx(eval_kernel(x.row(i), x.row(j), p)).margin(1e-14));

    const Eigen::MatrixXd c = cross_gram(x, z, p);
    REQUIRE(c.rows() == 3);
    REQUIRE(c.cols() == 2);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 2; ++j)
            REQUIRE(c(i, j) ==
                    Catch::Approx(eval_kernel(x.row(i), z.row(j), p)).margin(1e-14));

    REQUIRE(cross_gram(x, x, p).isApprox(g, 1e-12));
    const Eigen::MatrixXd c11 = cross_gram(random_mat(1, 2, 5), random_mat(1, 2, 6), p);
    REQUIRE(c11.rows() == 1);
    REQUIRE(c11.cols() == 1);
}

TEST_CASE("kernel_param_grads matches central differences", "[kernel]") {
    KernelParams p(1.3, Eigen::Vector2d(0.7, 1.9));
    const Eigen::MatrixXd x = random_mat(2, 2, 21);
    const Eigen::MatrixXd z = random_mat(2, 2, 22);
    const KernelGrads g = kernel_param_grads(x, z, p);

    const double h = 1e-5;
    auto fd = [&](double* param) {
        *param += h;
        const Eigen::MatrixXd up = cross_gram(x, z, p);
        *param -= 2 * h;
        const Eigen::MatrixXd dn = cross_gram(x, z, p);
        *param += h;
        return ((up - dn) / (2 * h)).eval();
    };
    const Eigen::MatrixXd d_sf2 = fd(&p.log_signal_var);
    REQUIRE((d_sf2 - g.d_log_signal_var).cwiseAbs().maxCoeff() < 1e-5);
    for (int q = 0; q < 2; ++q) {
        const Eigen::MatrixXd dq = fd(&p.log_ard[q]);
        REQUIRE((dq - g.d_log_ard[size_t(q)]).cwiseAbs().maxCoeff() < 1e-5);
    }
}

TEST_CASE("kernel_param_grads degenerate cases", "[kernel]") {
    // alpha = 0: the kernel is constant, so the log-variance gradient is the
    // Gram matrix itself and the ARD gradient vanishes
    const KernelParams flat(2.0, Eigen::Vector2d(0.0, 0.0));
    const Eigen::MatrixXd x = random_mat(2, 2, 31);
    const KernelGrads g = kernel_param_grads(x, x, flat);
    REQUIRE(g.d_log_signal_var.isApprox(cross_gram(x, x, flat), 1e-14));
    for (const auto& dq : g.d_log_ard) REQUIRE(dq.cwiseAbs().maxCoeff() == 0.0);

    // zero-distance pair
    const KernelParams p(1.0, Eigen::Vector2d(1.0, 1.0));
    Eigen::MatrixXd same = random_mat(1, 2, 32);
    const KernelGrads g2 = kernel_param_grads(same, same, p);
    for (const auto& dq : g2.d_log_ard) REQUIRE(dq.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("stationarity under shifts", "[kernel]") {
    const KernelParams p(1.1, Eigen::Vector3d(0.4, 1.0, 2.2));
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        RngStream rng(seed);
        Eigen::Vector3d x, y, c;
        for (int i = 0; i < 3; ++i) {
            x[i] = rng.normal();
            y[i] = rng.normal();
            c[i] = rng.normal();
        }
        REQUIRE(eval_kernel(x, y, p) ==
                Catch::Approx(eval_kernel(x + c, y + c, p)).epsilon(1e-9));
    }
}

TEST_CASE("gram of distinct rows is factorizable with tiny jitter", "[kernel]") {
    for (std::uint64_t seed = 40; seed < 60; ++seed) {
        const KernelParams p(1.0, Eigen::Vector2d(1.0, 0.5));
        const Eigen::MatrixXd x = random_mat(5, 2, seed);
        const auto f = jittered_cholesky(gram(x, p), 1e-10);
        REQUIRE(f.jitter <= 1e-6);
    }
}

TEST_CASE("increasing a relevance weight weakly decreases covariance", "[kernel]") {
    for (std::uint64_t seed = 70; seed < 80; ++seed) {
        RngStream rng(seed);
        Eigen::Vector2d x(rng.normal(), rng.normal());
        Eigen::Vector2d y(rng.normal(), rng.normal());
        Eigen::Vector2d alpha(0.5 + rng.uniform(), 0.5 + rng.uniform());
        const KernelParams p(1.0, alpha);
        Eigen::Vector2d bumped = alpha;
        bumped[0] += 1.0;
        const KernelParams p2(1.0, bumped);
        REQUIRE(eval_kernel(x, y, p2) <= eval_kernel(x, y, p) + 1e-15);
    }
}
