#pragma once

#include <Eigen/Dense>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "catlgp/errors.hpp"
#include "catlgp/fs_util.hpp"
#include "catlgp/training.hpp"

namespace catlgp {

constexpr int kModelFormatVersion = 1;

namespace detail {

inline nlohmann::json mat_to_json(const Eigen::MatrixXd& m) {
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        nlohmann::json row = nlohmann::json::array();
        for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
        rows.push_back(std::move(row));
    }
    return rows;
}

inline Eigen::MatrixXd mat_from_json(const nlohmann::json& j) {
    const size_t rows = j.size();
    const size_t cols = rows ? j.at(0).size() : 0;
    Eigen::MatrixXd m(rows, cols);
    for (size_t i = 0; i < rows; ++i) {
        if (j.at(i).size() != cols) throw SerializationError("model: ragged matrix");
        for (size_t c = 0; c < cols; ++c) m(Eigen::Index(i), Eigen::Index(c)) = j.at(i).at(c);
    }
    return m;
}

inline nlohmann::json vec_to_json(const Eigen::VectorXd& v) {
    nlohmann::json a = nlohmann::json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
    return a;
}

inline Eigen::VectorXd vec_from_json(const nlohmann::json& j) {
    Eigen::VectorXd v(j.size());
    for (size_t i = 0; i < j.size(); ++i) v[Eigen::Index(i)] = j.at(i);
    return v;
}

} // namespace detail

inline nlohmann::json config_to_json(const ModelConfig& c) {
    return {
        {"latent_dim", c.latent_dim},
        {"n_inducing", c.n_inducing},
        {"prior_var_x", c.prior_var_x},
        {"mc_samples_train", c.mc_samples_train},
        {"mc_samples_eval", c.mc_samples_eval},
        {"step_size", c.step_size},
        {"max_iters", c.max_iters},
        {"convergence_tol", c.convergence_tol},
        {"restarts", c.restarts},
        {"freeze_inducing", c.freeze_inducing},
        {"jitter", c.jitter},
        {"rng_seed", c.rng_seed},
    };
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.latent_dim = j.at("latent_dim");
    c.n_inducing = j.at("n_inducing");
    c.prior_var_x = j.at("prior_var_x");
    c.mc_samples_train = j.at("mc_samples_train");
    c.mc_samples_eval = j.at("mc_samples_eval");
    c.step_size = j.at("step_size");
    c.max_iters = j.at("max_iters");
    c.convergence_tol = j.at("convergence_tol");
    c.restarts = j.at("restarts");
    c.freeze_inducing = j.at("freeze_inducing");
    c.jitter = j.at("jitter");
    c.rng_seed = j.at("rng_seed");
    return c;
}

// Versioned model container; loading any other version fails loudly. Doubles
// round-trip exactly (shortest-representation JSON numbers).
inline void save_model(const FittedModel& model, const std::filesystem::path& path) {
    nlohmann::json j;
    j["format"] = "catlgp-model";
    j["version"] = kModelFormatVersion;
    j["config"] = config_to_json(model.config);
    nlohmann::json kernels = nlohmann::json::array();
    for (const auto& k : model.kernels)
        kernels.push_back({{"log_signal_var", k.log_signal_var},
                           {"log_ard", detail::vec_to_json(k.log_ard)}});
    j["kernels"] = std::move(kernels);
    j["posterior"] = {
        {"x_mean", detail::mat_to_json(model.posterior.x_mean)},
        {"x_log_var", detail::mat_to_json(model.posterior.x_log_var)},
        {"inducing", detail::mat_to_json(model.posterior.inducing)},
    };
    nlohmann::json u_mean = nlohmann::json::array();
    nlohmann::json u_chol = nlohmann::json::array();
    for (size_t d = 0; d < model.posterior.u_mean.size(); ++d) {
        nlohmann::json per_k = nlohmann::json::array();
        for (const auto& mu : model.posterior.u_mean[d]) per_k.push_back(detail::vec_to_json(mu));
        u_mean.push_back(std::move(per_k));
        u_chol.push_back(detail::mat_to_json(model.posterior.u_chol_raw[d]));
    }
    j["posterior"]["u_mean"] = std::move(u_mean);
    j["posterior"]["u_chol_raw"] = std::move(u_chol);
    write_file_atomic(path, j.dump());
}

inline FittedModel load_model(const std::filesystem::path& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw SerializationError("model: cannot parse " + path.string() + ": " + e.what());
    }
    try {
        if (j.at("format") != "catlgp-model")
            throw SerializationError("model: " + path.string() + " is not a catlgp model file");
        const int version = j.at("version");
        if (version != kModelFormatVersion)
            throw SerializationError("model: version " + std::to_string(version) +
                                     " not supported (expected " +
                                     std::to_string(kModelFormatVersion) + ")");
        FittedModel model;
        model.config = config_from_json(j.at("config"));
        for (const auto& k : j.at("kernels")) {
            KernelParams p;
            p.log_signal_var = k.at("log_signal_var");
            p.log_ard = detail::vec_from_json(k.at("log_ard"));
            model.kernels.push_back(std::move(p));
        }
        const auto& post = j.at("posterior");
        model.posterior.x_mean = detail::mat_from_json(post.at("x_mean"));
        model.posterior.x_log_var = detail::mat_from_json(post.at("x_log_var"));
        model.posterior.inducing = detail::mat_from_json(post.at("inducing"));
        for (const auto& per_k : post.at("u_mean")) {
            std::vector<Eigen::VectorXd> mus;
            for (const auto& mu : per_k) mus.push_back(detail::vec_from_json(mu));
            model.posterior.u_mean.push_back(std::move(mus));
        }
        for (const auto& raw : post.at("u_chol_raw"))
            model.posterior.u_chol_raw.push_back(detail::mat_from_json(raw));
        model.trace.final_ard = ard_matrix(model.kernels);
        return model;
    } catch (const nlohmann::json::exception& e) {
        throw SerializationError("model: malformed " + path.string() + ": " + e.what());
    }
}

} // namespace catlgp
