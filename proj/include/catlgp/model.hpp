#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <iostream>
#include <string>
#include <vector>

#include "catlgp/errors.hpp"
#include "catlgp/kernel.hpp"
#include "catlgp/linalg.hpp"
#include "catlgp/rng.hpp"

namespace catlgp {

// N observations of D categorical variables, stored as category indices.
// kMissing marks unobserved cells; their likelihood terms are skipped, which
// is the exact marginalization under the model's conditional independence.
struct CategoricalDataset {
    static constexpr int kMissing = -1;

    std::vector<int> cardinalities; // K_d >= 2
    Eigen::MatrixXi values;         // N x D

    int n_obs() const { return int(values.rows()); }
    int n_vars() const { return int(values.cols()); }
    bool is_missing(int n, int d) const { return values(n, d) == kMissing; }

    void validate() const {
        if (values.cols() != Eigen::Index(cardinalities.size()))
            throw InvalidDataset("dataset: value columns do not match cardinalities");
        for (size_t d = 0; d < cardinalities.size(); ++d)
            if (cardinalities[d] < 2)
                throw InvalidDataset("dataset: variable " + std::to_string(d) +
                                     " has cardinality < 2");
        for (int n = 0; n < n_obs(); ++n) {
            bool any = false;
            for (int d = 0; d < n_vars(); ++d) {
                const int v = values(n, d);
                if (v == kMissing) continue;
                any = true;
                if (v < 0 || v >= cardinalities[size_t(d)])
                    throw InvalidDataset("dataset: value out of range at (" +
                                         std::to_string(n) + ", " + std::to_string(d) + ")");
            }
            if (!any)
                throw InvalidDataset("dataset: observation " + std::to_string(n) +
                                     " has no observed values");
        }
    }
};

struct ModelConfig {
    int latent_dim = 2;      // Q
    int n_inducing = 20;     // M
    double prior_var_x = 1.0;
    int mc_samples_train = 10;
    int mc_samples_eval = 500;
    double step_size = 1e-2;
    int max_iters = 2000;
    double convergence_tol = 1e-4; // on the smoothed ELBO; 0 disables early stop
    int restarts = 1;
    bool freeze_inducing = false;
    double jitter = 1e-8; // base jitter for K_MM factorizations
    std::uint64_t rng_seed = 1;

    void validate() const {
        if (latent_dim < 1) throw std::invalid_argument("config: latent_dim must be >= 1");
        if (n_inducing < 1) throw std::invalid_argument("config: n_inducing must be >= 1");
        if (!(prior_var_x >= 0.0)) throw std::invalid_argument("config: prior_var_x < 0");
        if (mc_samples_train < 1 || mc_samples_eval < 1)
            throw std::invalid_argument("config: MC sample counts must be >= 1");
        if (!(step_size > 0.0)) throw std::invalid_argument("config: step_size must be > 0");
        if (max_iters < 0) throw std::invalid_argument("config: max_iters < 0");
        if (restarts < 1) throw std::invalid_argument("config: restarts must be >= 1");
    }

    void validate_for(int n_obs) const {
        validate();
        if (n_inducing > n_obs)
            std::cerr << "catlgp: warning: n_inducing (" << n_inducing
                      << ") exceeds the number of observations (" << n_obs << ")\n";
    }
};

// Per-observation class weight vectors f_nd, one K_d-vector per (n, d).
struct LatentWeights {
    std::vector<std::vector<Eigen::VectorXd>> f; // [n][d]
};

inline double logsumexp(const Eigen::VectorXd& v) {
    const double m = v.maxCoeff();
    return m + std::log((v.array() - m).exp().sum());
}

// Probability vector of a weight vector; max-subtraction keeps entries up to
// +-1e4 from overflowing, argmax is preserved.
inline Eigen::VectorXd softmax(const Eigen::VectorXd& f) {
    if (f.size() == 0) throw EmptyVector("softmax: empty weight vector");
    const Eigen::ArrayXd e = (f.array() - f.maxCoeff()).exp();
    return e / e.sum();
}

inline double log_softmax_at(const Eigen::VectorXd& f, int k) {
    if (f.size() == 0) throw EmptyVector("log_softmax_at: empty weight vector");
    if (k < 0 || k >= f.size())
        throw IndexOutOfRange("log_softmax_at: index " + std::to_string(k) + " out of [0, " +
                              std::to_string(f.size()) + ")");
    return f[k] - logsumexp(f);
}

// N x Q latent inputs drawn iid from N(0, prior_var_x).
inline Eigen::MatrixXd sample_prior_latents(int n, const ModelConfig& config,
                                            std::uint64_t key) {
    const double sd = std::sqrt(config.prior_var_x);
    Eigen::MatrixXd x(n, config.latent_dim);
    for (int i = 0; i < n; ++i) {
        RngStream rng(substream(key, streams::prior, std::uint64_t(i)));
        for (int q = 0; q < config.latent_dim; ++q) x(i, q) = sd * rng.normal();
    }
    return x;
}

// Draw one category from a probability vector by inverse CDF.
inline int sample_category(const Eigen::VectorXd& probs, double u) {
    double cum = 0.0;
    for (Eigen::Index k = 0; k < probs.size(); ++k) {
        cum += probs[k];
        if (u < cum) return int(k);
    }
    return int(probs.size()) - 1;
}

// Exact forward simulation of the generative process: each weight function is
// drawn jointly at the rows of x from its GP prior, pushed through softmax,
// and categories are sampled.
inline std::pair<LatentWeights, CategoricalDataset> forward_simulate(
    const Eigen::MatrixXd& x, const std::vector<KernelParams>& kernels,
    const std::vector<int>& cardinalities, std::uint64_t key) {
    if (kernels.size() != cardinalities.size())
        throw DimensionMismatch("forward_simulate: kernels vs cardinalities size mismatch");
    const int n = int(x.rows());
    const int d_vars = int(kernels.size());

    LatentWeights weights;
    weights.f.assign(size_t(n), std::vector<Eigen::VectorXd>(size_t(d_vars)));
    for (int nn = 0; nn < n; ++nn)
        for (int d = 0; d < d_vars; ++d)
            weights.f[size_t(nn)][size_t(d)] = Eigen::VectorXd(cardinalities[size_t(d)]);

    for (int d = 0; d < d_vars; ++d) {
        const CholeskyFactor chol = jittered_cholesky(gram(x, kernels[size_t(d)]));
        for (int k = 0; k < cardinalities[size_t(d)]; ++k) {
            RngStream rng(substream(key, streams::sim_gp, std::uint64_t(d), std::uint64_t(k)));
            Eigen::VectorXd eps(n);
            for (int i = 0; i < n; ++i) eps[i] = rng.normal();
            const Eigen::VectorXd fk = chol.L * eps;
            for (int i = 0; i < n; ++i) weights.f[size_t(i)][size_t(d)][k] = fk[i];
        }
    }

    CategoricalDataset data;
    data.cardinalities = cardinalities;
    data.values.resize(n, d_vars);
    for (int nn = 0; nn < n; ++nn)
        for (int d = 0; d < d_vars; ++d) {
            RngStream rng(substream(key, streams::sim_cat, std::uint64_t(nn), std::uint64_t(d)));
            data.values(nn, d) =
                sample_category(softmax(weights.f[size_t(nn)][size_t(d)]), rng.uniform());
        }
    data.validate();
    return {std::move(weights), std::move(data)};
}

// Balanced two-component Gaussian mixture on the real line, components at
// -4 and +4 with unit variance (8 component SDs apart, so the midpoint
// density is negligible next to the mode density).
struct TwoClusterSample {
    Eigen::MatrixXd x;        // N x 1
    Eigen::VectorXi cluster;  // component assignments
};

constexpr double kTwoClusterMode = 4.0;

inline TwoClusterSample make_two_cluster_inputs(int n, std::uint64_t key) {
    TwoClusterSample out;
    out.x.resize(n, 1);
    out.cluster.resize(n);
    for (int i = 0; i < n; ++i) {
        RngStream rng(substream(key, streams::cluster, std::uint64_t(i)));
        const int comp = rng.uniform() < 0.5 ? 0 : 1;
        out.cluster[i] = comp;
        out.x(i, 0) = (comp == 0 ? -kTwoClusterMode : kTwoClusterMode) + rng.normal();
    }
    return out;
}

} // namespace catlgp
