#pragma once

#include <Eigen/Dense>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "catlgp/errors.hpp"
#include "catlgp/inference.hpp"
#include "catlgp/kernel.hpp"
#include "catlgp/model.hpp"
#include "catlgp/parallel.hpp"
#include "catlgp/rng.hpp"

namespace catlgp {

struct IterationRecord {
    int iteration = 0;
    double elbo = 0.0;
    double kl_x = 0.0;
    double kl_u = 0.0;
    double exp_loglik = 0.0;
    double grad_norm = 0.0;
    double wall_clock_s = 0.0;
};

struct TrainTrace {
    std::vector<IterationRecord> records;
    Eigen::MatrixXd final_ard; // D x Q relevance weights
};

struct FittedModel {
    VariationalPosterior posterior;
    std::vector<KernelParams> kernels;
    ModelConfig config;
    TrainTrace trace;
};

inline Eigen::MatrixXd ard_matrix(const std::vector<KernelParams>& kernels) {
    if (kernels.empty()) return {};
    Eigen::MatrixXd a(kernels.size(), kernels[0].dim());
    for (size_t d = 0; d < kernels.size(); ++d) a.row(Eigen::Index(d)) = kernels[d].ard_weights();
    return a;
}

// PCA-based initialization: latent means from the top principal directions of
// the one-hot encoded data (unit variance per dimension), inducing inputs
// subsampled from the means, diffuse but small posterior variances.
inline std::pair<VariationalPosterior, std::vector<KernelParams>> initialize(
    const CategoricalDataset& data, const ModelConfig& config) {
    data.validate();
    config.validate();
    const int n = data.n_obs();
    if (n < 2) throw InsufficientData("initialize: need at least 2 observations");
    const int d_vars = data.n_vars();
    const int q_dim = config.latent_dim;
    const int m = config.n_inducing;
    const std::uint64_t key = substream(config.rng_seed, streams::init);

    int onehot_cols = 0;
    for (int d = 0; d < d_vars; ++d) onehot_cols += data.cardinalities[size_t(d)];
    Eigen::MatrixXd onehot = Eigen::MatrixXd::Zero(n, onehot_cols);
    for (int d = 0, off = 0; d < d_vars; ++d) {
        for (int r = 0; r < n; ++r)
            if (!data.is_missing(r, d)) onehot(r, off + data.values(r, d)) = 1.0;
        off += data.cardinalities[size_t(d)];
    }
    onehot.rowwise() -= onehot.colwise().mean();

    Eigen::JacobiSVD<Eigen::MatrixXd> svd(onehot, Eigen::ComputeThinU);
    const Eigen::VectorXd sv = svd.singularValues();

    VariationalPosterior post;
    post.x_mean.resize(n, q_dim);
    for (int q = 0; q < q_dim; ++q) {
        bool degenerate = true;
        if (q < sv.size() && sv[q] > 1e-9 * std::max(sv[0], 1.0)) {
            Eigen::VectorXd col = svd.matrixU().col(q) * sv[q];
            const double var = col.squaredNorm() / double(n);
            if (var > 1e-12) {
                col /= std::sqrt(var);
                if (std::abs(col.minCoeff()) > std::abs(col.maxCoeff())) col = -col;
                post.x_mean.col(q) = col;
                degenerate = false;
            }
        }
        if (degenerate) {
            // flat spectrum direction; fall back to small noise
            RngStream rng(substream(key, 1000 + std::uint64_t(q)));
            for (int r = 0; r < n; ++r) post.x_mean(r, q) = 0.1 * rng.normal();
        }
    }

    post.x_log_var = Eigen::MatrixXd::Constant(n, q_dim, std::log(0.1));

    // inducing inputs: rows sampled without replacement, perturbed copies if
    // more are requested than observations exist
    std::vector<int> idx(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) idx[size_t(i)] = i;
    RngStream zrng(substream(key, 1));
    const int take = std::min(m, n);
    for (int i = 0; i < take; ++i) {
        const int j = i + int(zrng.uniform() * double(n - i));
        std::swap(idx[size_t(i)], idx[size_t(std::min(j, n - 1))]);
    }
    post.inducing.resize(m, q_dim);
    for (int i = 0; i < m; ++i) {
        post.inducing.row(i) = post.x_mean.row(idx[size_t(i % n)]);
        if (i >= take)
            for (int q = 0; q < q_dim; ++q) post.inducing(i, q) += 0.1 * zrng.normal();
    }
    // categorical data often has repeated profiles, hence repeated PCA rows;
    // nudge any colliding inducing inputs apart so K_MM starts well conditioned
    for (int i = 0; i < m; ++i) {
        bool collides = true;
        for (int attempt = 0; attempt < 50 && collides; ++attempt) {
            collides = false;
            for (int j = 0; j < i; ++j)
                if ((post.inducing.row(i) - post.inducing.row(j)).norm() < 1e-3) {
                    collides = true;
                    break;
                }
            if (collides)
                for (int q = 0; q < q_dim; ++q) post.inducing(i, q) += 0.05 * zrng.normal();
        }
    }

    // u means at zero, Sigma_d = 0.1 I via its factor
    const double raw_diag = 0.5 * std::log(0.1);
    for (int d = 0; d < d_vars; ++d) {
        post.u_mean.emplace_back(size_t(data.cardinalities[size_t(d)]),
                                 Eigen::VectorXd::Zero(m));
        Eigen::MatrixXd raw = Eigen::MatrixXd::Zero(m, m);
        raw.diagonal().setConstant(raw_diag);
        post.u_chol_raw.push_back(std::move(raw));
    }

    std::vector<KernelParams> kernels(size_t(d_vars), KernelParams::unit(q_dim));
    return {std::move(post), std::move(kernels)};
}

using IterCallback = std::function<void(const IterationRecord&, const VariationalPosterior&,
                                        const std::vector<KernelParams>&)>;

namespace detail {

inline FittedModel fit_once(const CategoricalDataset& data, const ModelConfig& config,
                            std::uint64_t run_seed, const IterCallback& callback) {
    ModelConfig cfg = config;
    cfg.rng_seed = run_seed;
    FittedModel model;
    model.config = config;
    std::tie(model.posterior, model.kernels) = initialize(data, cfg);

    Eigen::VectorXd params = pack_params(model.posterior, model.kernels);
    Eigen::VectorXd adam_m = Eigen::VectorXd::Zero(params.size());
    Eigen::VectorXd adam_v = Eigen::VectorXd::Zero(params.size());
    constexpr double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
    const int z_off = inducing_param_offset(model.posterior);
    const int z_len = int(model.posterior.inducing.size());

    const auto t0 = std::chrono::steady_clock::now();
    for (int t = 0; t < cfg.max_iters; ++t) {
        const std::uint64_t key = substream(run_seed, streams::iteration, std::uint64_t(t));
        auto [est, grads] = elbo_with_gradients(data, model.posterior, model.kernels, cfg,
                                                cfg.mc_samples_train, key);
        if (!std::isfinite(est.value))
            throw DivergenceDetected("fit: non-finite ELBO at iteration " + std::to_string(t));

        Eigen::VectorXd g = pack_grads(grads, model.posterior, model.kernels);
        if (cfg.freeze_inducing) g.segment(z_off, z_len).setZero();

        IterationRecord rec;
        rec.iteration = t;
        rec.elbo = est.value;
        rec.kl_x = est.kl_x;
        rec.kl_u = est.kl_u;
        rec.exp_loglik = est.exp_loglik;
        rec.grad_norm = g.norm();
        rec.wall_clock_s =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        model.trace.records.push_back(rec);

        // Adam ascent step
        adam_m = beta1 * adam_m + (1.0 - beta1) * g;
        adam_v = beta2 * adam_v + (1.0 - beta2) * g.cwiseProduct(g).eval();
        const double corr1 = 1.0 - std::pow(beta1, t + 1);
        const double corr2 = 1.0 - std::pow(beta2, t + 1);
        params += (cfg.step_size / corr1) * adam_m.cwiseQuotient(
                      ((adam_v / corr2).cwiseSqrt().array() + adam_eps).matrix());
        unpack_params(params, model.posterior, model.kernels);

        if (callback) callback(rec, model.posterior, model.kernels);

        // stop when the 50-iteration moving average of the ELBO settles
        if (cfg.convergence_tol > 0.0 && model.trace.records.size() >= 100) {
            const auto& r = model.trace.records;
            double recent = 0.0, prev = 0.0;
            for (size_t i = r.size() - 50; i < r.size(); ++i) recent += r[i].elbo;
            for (size_t i = r.size() - 100; i < r.size() - 50; ++i) prev += r[i].elbo;
            recent /= 50.0;
            prev /= 50.0;
            if (std::abs(recent - prev) / std::max(std::abs(prev), 1e-12) <
                cfg.convergence_tol)
                break;
        }
    }

    model.trace.final_ard = ard_matrix(model.kernels);
    return model;
}

} // namespace detail

// Stochastic gradient ascent on the ELBO over all free parameters. Fresh MC
// noise per iteration, Adam step adaptation, trace recorded at every
// iteration. Bit-reproducible for a fixed seed and config.
inline FittedModel fit(const CategoricalDataset& data, const ModelConfig& config,
                       const IterCallback& callback = nullptr) {
    data.validate();
    config.validate_for(data.n_obs());
    if (config.restarts == 1) return detail::fit_once(data, config, config.rng_seed, callback);

    FittedModel best;
    double best_elbo = -std::numeric_limits<double>::infinity();
    bool have = false;
    for (int r = 0; r < config.restarts; ++r) {
        const std::uint64_t seed =
            r == 0 ? config.rng_seed
                   : substream(config.rng_seed, streams::restart, std::uint64_t(r));
        FittedModel candidate = detail::fit_once(data, config, seed, callback);
        const ElboEstimate est =
            elbo(data, candidate.posterior, candidate.kernels, config,
                 config.mc_samples_eval, substream(seed, streams::eval));
        if (!have || est.value > best_elbo) {
            best = std::move(candidate);
            best_elbo = est.value;
            have = true;
        }
    }
    return best;
}

// Latent dimensions whose largest relevance weight (over variables) is at
// least threshold_ratio times the global maximum.
inline std::vector<int> effective_dims(const FittedModel& model, double threshold_ratio = 0.05) {
    const Eigen::MatrixXd a = ard_matrix(model.kernels);
    if (a.size() == 0) return {};
    const double global_max = a.maxCoeff();
    std::vector<int> dims;
    for (int q = 0; q < a.cols(); ++q)
        if (a.col(q).maxCoeff() >= threshold_ratio * global_max) dims.push_back(q);
    return dims;
}

// One fit per candidate latent dimension; candidates are seeded by their Q
// value, so duplicate candidates give identical fits and the ranking does not
// depend on candidate order. Ties break toward smaller Q, then first listed.
struct SelectDimRow {
    int q = 0;
    double elbo = 0.0;
    double mc_std_error = 0.0;
    std::vector<int> effective;
    bool ok = false;
    std::string error;
};

struct SelectDimResult {
    std::vector<SelectDimRow> rows;
    int selected_q = 0;
    int selected_index = -1;
};

inline SelectDimResult select_latent_dim(const CategoricalDataset& data,
                                         const std::vector<int>& q_candidates,
                                         const ModelConfig& config) {
    if (q_candidates.empty())
        throw std::invalid_argument("select_latent_dim: need at least one candidate");
    SelectDimResult result;
    std::string last_error;
    for (int q : q_candidates) {
        SelectDimRow row;
        row.q = q;
        try {
            ModelConfig cfg = config;
            cfg.latent_dim = q;
            cfg.rng_seed = substream(config.rng_seed, streams::candidate, std::uint64_t(q));
            FittedModel model = fit(data, cfg);
            const ElboEstimate est =
                elbo(data, model.posterior, model.kernels, cfg, cfg.mc_samples_eval,
                     substream(cfg.rng_seed, streams::eval));
            row.elbo = est.value;
            row.mc_std_error = est.mc_std_error;
            row.effective = effective_dims(model);
            row.ok = true;
        } catch (const Error& e) {
            row.error = e.what();
            last_error = e.what();
        }
        result.rows.push_back(std::move(row));
    }
    for (size_t i = 0; i < result.rows.size(); ++i) {
        const SelectDimRow& row = result.rows[i];
        if (!row.ok) continue;
        if (result.selected_index < 0) {
            result.selected_index = int(i);
            continue;
        }
        const SelectDimRow& best = result.rows[size_t(result.selected_index)];
        if (row.elbo > best.elbo || (row.elbo == best.elbo && row.q < best.q))
            result.selected_index = int(i);
    }
    if (result.selected_index < 0)
        throw DivergenceDetected("select_latent_dim: every candidate failed; last error: " +
                                 last_error);
    result.selected_q = result.rows[size_t(result.selected_index)].q;
    return result;
}

// Monte Carlo predictive probabilities, one vector per observed (n, d) cell;
// missing cells stay empty.
inline std::vector<std::vector<Eigen::VectorXd>> predictive_probs(const FittedModel& model,
                                                                  const CategoricalDataset& data,
                                                                  std::uint64_t key) {
    const VariationalPosterior& post = model.posterior;
    detail::check_posterior_dims(post, model.kernels);
    if (data.n_obs() != post.n_obs() || data.n_vars() != post.n_vars())
        throw DimensionMismatch("predictive_probs: dataset vs model shape mismatch");
    const int n_obs = data.n_obs();
    const int d_vars = data.n_vars();
    const int s_count = model.config.mc_samples_eval;

    std::vector<Eigen::MatrixXd> xs(static_cast<size_t>(s_count));
    for (int s = 0; s < s_count; ++s) {
        xs[size_t(s)].resize(n_obs, post.latent_dim());
        for (int n = 0; n < n_obs; ++n)
            xs[size_t(s)].row(n) =
                sample_qx_stream(post, n, substream(key, streams::x_noise, std::uint64_t(s),
                                                    std::uint64_t(n)))
                    .x;
    }

    std::vector<std::vector<Eigen::VectorXd>> probs(
        static_cast<size_t>(n_obs),
        std::vector<Eigen::VectorXd>(static_cast<size_t>(d_vars)));
    parallel_for(d_vars, [&](int d) {
        const KernelParams& kern = model.kernels[size_t(d)];
        const int n_cat = data.cardinalities[size_t(d)];
        const CholeskyFactor chol =
            jittered_cholesky(gram(post.inducing, kern), model.config.jitter);
        for (int n = 0; n < n_obs; ++n)
            if (!data.is_missing(n, d))
                probs[size_t(n)][size_t(d)] = Eigen::VectorXd::Zero(n_cat);
        std::vector<Eigen::VectorXd> u_cols(static_cast<size_t>(n_cat));
        for (int s = 0; s < s_count; ++s) {
            const QuSample qu = sample_qu_stream(
                post, d, substream(key, streams::u_noise, std::uint64_t(s), std::uint64_t(d)));
            for (int k = 0; k < n_cat; ++k) u_cols[size_t(k)] = qu.u.col(k);
            for (int n = 0; n < n_obs; ++n) {
                if (data.is_missing(n, d)) continue;
                const ConditionalF cond = conditional_f_with_factor(
                    xs[size_t(s)].row(n).transpose(), u_cols, post.inducing, chol, kern);
                RngStream frng(substream(key, streams::f_noise, std::uint64_t(s),
                                         std::uint64_t(n), std::uint64_t(d)));
                Eigen::VectorXd f(n_cat);
                const double sd = std::sqrt(cond.var);
                for (int k = 0; k < n_cat; ++k) f[k] = cond.means[k] + sd * frng.normal();
                probs[size_t(n)][size_t(d)] += softmax(f) / double(s_count);
            }
        }
    });
    return probs;
}

// Fraction of observed cells whose argmax prediction (ties to the lowest
// index) disagrees with the data. Empty when nothing is observed.
inline std::optional<double> misclassification(
    const std::vector<std::vector<Eigen::VectorXd>>& probs, const CategoricalDataset& data) {
    long total = 0, wrong = 0;
    for (int n = 0; n < data.n_obs(); ++n)
        for (int d = 0; d < data.n_vars(); ++d) {
            if (data.is_missing(n, d)) continue;
            const Eigen::VectorXd& p = probs[size_t(n)][size_t(d)];
            int arg = 0;
            for (int k = 1; k < p.size(); ++k)
                if (p[k] > p[arg]) arg = k;
            ++total;
            if (arg != data.values(n, d)) ++wrong;
        }
    if (total == 0) return std::nullopt;
    return double(wrong) / double(total);
}

inline std::optional<double> train_error(const FittedModel& model,
                                         const CategoricalDataset& data) {
    return misclassification(
        predictive_probs(model, data, substream(model.config.rng_seed, streams::predict)),
        data);
}

} // namespace catlgp
