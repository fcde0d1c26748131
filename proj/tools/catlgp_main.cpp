// catlgp: categorical latent Gaussian process toolkit.
//
// Subcommands: simulate | fit | select-dim | embed | density | error | plot.
// Exit codes: 0 success, 2 bad input, 3 numerical failure. All randomness
// flows from --seed; CATLGP_THREADS caps internal parallelism.

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "catlgp/data_io.hpp"
#include "catlgp/errors.hpp"
#include "catlgp/fs_util.hpp"
#include "catlgp/inference.hpp"
#include "catlgp/model.hpp"
#include "catlgp/serialize.hpp"
#include "catlgp/svg_plot.hpp"
#include "catlgp/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Run manifest: command, resolved configuration, seed, file checksums,
// wall-clock duration. Written atomically after every successful command.
class ManifestBuilder {
  public:
    ManifestBuilder(std::string command, std::uint64_t seed)
        : start_(std::chrono::steady_clock::now()) {
        j_["command"] = std::move(command);
        j_["seed"] = seed;
    }
    void set_config(json cfg) { j_["config"] = std::move(cfg); }
    void add_input(const fs::path& p) { j_["inputs"].push_back(p.string()); }
    void add_output(const fs::path& p) { outputs_.push_back(p); }
    void write(const fs::path& path) {
        j_["outputs"] = json::array();
        for (const auto& p : outputs_)
            j_["outputs"].push_back({{"path", p.string()}, {"checksum", catlgp::checksum_file(p)}});
        j_["duration_seconds"] =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
        catlgp::write_file_atomic(path, j_.dump(2) + "\n");
    }

  private:
    json j_;
    std::vector<fs::path> outputs_;
    std::chrono::steady_clock::time_point start_;
};

fs::path sidecar_path(const fs::path& out) {
    fs::path p = out;
    p.replace_extension();
    return p.string() + ".truth.csv";
}

std::string format_effective_dims(const std::vector<int>& dims) {
    std::string s;
    for (size_t i = 0; i < dims.size(); ++i) {
        if (i) s += ';';
        s += std::to_string(dims[i]);
    }
    return s;
}

// --- simulate -------------------------------------------------------------

struct SimulateArgs {
    int n = 100;
    int d = 10;
    int k = 2;
    std::string clusters = "two-gaussian";
    std::uint64_t seed = 1;
    std::string out;
};

int cmd_simulate(const SimulateArgs& a) {
    ManifestBuilder manifest("simulate", a.seed);
    manifest.set_config({{"n", a.n},
                         {"d", a.d},
                         {"k", a.k},
                         {"clusters", a.clusters},
                         {"out", a.out}});
    const fs::path out = a.out;
    const fs::path truth = sidecar_path(out);

    if (a.clusters == "two-gaussian") {
        const catlgp::TwoClusterSample tc = catlgp::make_two_cluster_inputs(a.n, a.seed);
        std::vector<catlgp::KernelParams> kernels(
            size_t(a.d), catlgp::KernelParams(3.0, Eigen::VectorXd::Constant(1, 0.15)));
        auto [weights, data] =
            catlgp::forward_simulate(tc.x, kernels, std::vector<int>(size_t(a.d), a.k), a.seed);
        (void)weights;
        catlgp::Schema schema;
        for (int d = 0; d < a.d; ++d) {
            catlgp::VariableSchema var;
            var.name = "var_" + std::to_string(d + 1);
            for (int c = 0; c < a.k; ++c) var.labels.push_back(std::to_string(c));
            schema.variables.push_back(std::move(var));
        }
        catlgp::write_csv(out, schema, data);

        std::string side = "id,x_1,cluster\n";
        for (int i = 0; i < a.n; ++i)
            side += std::to_string(i) + ',' + catlgp::fmt_g12(tc.x(i, 0)) + ',' +
                    std::to_string(tc.cluster[i]) + '\n';
        catlgp::write_file_atomic(truth, side);
    } else { // table1
        const catlgp::Table1Sample t = catlgp::generate_table1_like(a.n, a.seed);
        catlgp::write_csv(out, t.schema, t.data);
        std::string side = "id,x_1,x_2,cluster\n";
        for (int i = 0; i < a.n; ++i)
            side += std::to_string(i) + ',' + catlgp::fmt_g12(t.latents(i, 0)) + ',' +
                    catlgp::fmt_g12(t.latents(i, 1)) + ',' + std::to_string(t.cluster[i]) + '\n';
        catlgp::write_file_atomic(truth, side);
    }
    manifest.add_output(out);
    manifest.add_output(truth);
    manifest.write(out.string() + ".manifest.json");
    std::cout << "wrote " << out.string() << " and " << truth.string() << "\n";
    return 0;
}

// --- fit ---------------------------------------------------------------

struct FitArgs {
    std::string data;
    int q = 2;
    int m = 20;
    int iters = 2000;
    int mc_train = 10;
    int mc_eval = 500;
    std::uint64_t seed = 1;
    int restarts = 1;
    bool freeze_z = false;
    std::string out_dir;
};

catlgp::ModelConfig config_from(const FitArgs& a) {
    catlgp::ModelConfig cfg;
    cfg.latent_dim = a.q;
    cfg.n_inducing = a.m;
    cfg.max_iters = a.iters;
    cfg.mc_samples_train = a.mc_train;
    cfg.mc_samples_eval = a.mc_eval;
    cfg.rng_seed = a.seed;
    cfg.restarts = a.restarts;
    cfg.freeze_inducing = a.freeze_z;
    return cfg;
}

json fit_config_json(const FitArgs& a) {
    return {{"data", a.data},        {"q", a.q},
            {"m", a.m},              {"iters", a.iters},
            {"mc_train", a.mc_train}, {"mc_eval", a.mc_eval},
            {"restarts", a.restarts}, {"freeze_z", a.freeze_z},
            {"out_dir", a.out_dir}};
}

int cmd_fit(const FitArgs& a) {
    ManifestBuilder manifest("fit", a.seed);
    manifest.set_config(fit_config_json(a));
    manifest.add_input(a.data);
    auto [schema, data] = catlgp::load_csv(a.data);
    (void)schema;
    const catlgp::ModelConfig cfg = config_from(a);
    const catlgp::FittedModel model = catlgp::fit(data, cfg);

    fs::create_directories(a.out_dir);
    const fs::path model_path = fs::path(a.out_dir) / "model.json";
    const fs::path trace_path = fs::path(a.out_dir) / "trace.jsonl";
    catlgp::save_model(model, model_path);
    catlgp::export_trace(model.trace, trace_path);
    manifest.add_output(model_path);
    manifest.add_output(trace_path);
    manifest.write(fs::path(a.out_dir) / "manifest.json");

    if (!model.trace.records.empty())
        std::cout << "fit: " << model.trace.records.size() << " iterations, final ELBO estimate "
                  << catlgp::fmt_g12(model.trace.records.back().elbo) << "\n";
    else
        std::cout << "fit: 0 iterations (returned initialization)\n";
    return 0;
}

// --- select-dim ----------------------------------------------------------

struct SelectDimArgs {
    FitArgs fit;
    std::vector<int> q_candidates;
};

int cmd_select_dim(const SelectDimArgs& a) {
    ManifestBuilder manifest("select-dim", a.fit.seed);
    json cfg_json = fit_config_json(a.fit);
    cfg_json["q_candidates"] = a.q_candidates;
    manifest.set_config(cfg_json);
    manifest.add_input(a.fit.data);
    auto [schema, data] = catlgp::load_csv(a.fit.data);
    (void)schema;
    const catlgp::SelectDimResult result =
        catlgp::select_latent_dim(data, a.q_candidates, config_from(a.fit));

    std::string table = "Q,elbo,mc_std_error,effective_dims\n";
    for (const auto& row : result.rows) {
        table += std::to_string(row.q) + ',';
        if (row.ok) {
            table += catlgp::fmt_g12(row.elbo);
            table += ',' + catlgp::fmt_g12(row.mc_std_error);
            table += ',' + format_effective_dims(row.effective);
        } else {
            table += ",,";
        }
        table += '\n';
    }
    fs::create_directories(a.fit.out_dir);
    const fs::path table_path = fs::path(a.fit.out_dir) / "select_dim.csv";
    catlgp::write_file_atomic(table_path, table);
    manifest.add_output(table_path);
    manifest.write(fs::path(a.fit.out_dir) / "manifest.json");

    const auto& best = result.rows[size_t(result.selected_index)];
    std::cout << "selected Q = " << result.selected_q << " (ELBO " << catlgp::fmt_g12(best.elbo)
              << " +- " << catlgp::fmt_g12(best.mc_std_error) << ")\n";
    return 0;
}

// --- embed ----------------------------------------------------------------

struct EmbedArgs {
    std::string model, out, labels, label_column = "label";
};

int cmd_embed(const EmbedArgs& a) {
    ManifestBuilder manifest("embed", 0);
    manifest.set_config({{"model", a.model},
                         {"out", a.out},
                         {"labels", a.labels},
                         {"label_column", a.label_column}});
    manifest.add_input(a.model);
    const catlgp::FittedModel model = catlgp::load_model(a.model);
    std::optional<std::vector<std::string>> labels;
    if (!a.labels.empty()) {
        manifest.add_input(a.labels);
        const catlgp::CsvTable table = catlgp::read_csv_table(a.labels);
        const int col = table.column(a.label_column);
        if (col < 0)
            throw catlgp::InvalidFlag("embed: column '" + a.label_column + "' not found in " +
                                      a.labels);
        std::vector<std::string> values;
        for (const auto& row : table.rows) values.push_back(row[size_t(col)]);
        labels = std::move(values);
    }
    catlgp::export_embeddings(model, labels, a.out);
    manifest.add_output(a.out);
    manifest.write(a.out + ".manifest.json");
    std::cout << "wrote " << a.out << "\n";
    return 0;
}

// --- density ----------------------------------------------------------------

struct DensityArgs {
    std::string model, out;
    std::vector<int> dims{0, 1};
    int res = 200;
};

int cmd_density(const DensityArgs& a) {
    ManifestBuilder manifest("density", 0);
    manifest.set_config(
        {{"model", a.model}, {"out", a.out}, {"dims", a.dims}, {"res", a.res}});
    manifest.add_input(a.model);
    const catlgp::FittedModel model = catlgp::load_model(a.model);
    const catlgp::DensityGridSpec spec =
        catlgp::auto_grid_spec(model, a.dims.at(0), a.dims.at(1), a.res);
    const catlgp::DensityGrid grid = catlgp::latent_density(model, spec);
    catlgp::export_density(grid, a.out);
    manifest.add_output(a.out);
    manifest.write(a.out + ".manifest.json");
    std::cout << "wrote " << a.out << " (integral " << catlgp::fmt_g12(grid.integral()) << ")\n";
    return 0;
}

// --- error ----------------------------------------------------------------

struct ErrorArgs {
    std::string model, data, out = "train_error.json";
};

int cmd_error(const ErrorArgs& a) {
    ManifestBuilder manifest("error", 0);
    manifest.set_config({{"model", a.model}, {"data", a.data}, {"out", a.out}});
    manifest.add_input(a.model);
    manifest.add_input(a.data);
    const catlgp::FittedModel model = catlgp::load_model(a.model);
    auto [schema, data] = catlgp::load_csv(a.data);
    (void)schema;
    const std::optional<double> err = catlgp::train_error(model, data);
    json j;
    if (err) {
        j["train_error"] = *err;
        std::cout << "train_error " << catlgp::fmt_g12(*err) << "\n";
    } else {
        j["train_error"] = nullptr;
        std::cout << "train_error undefined (no observed cells)\n";
    }
    catlgp::write_file_atomic(a.out, j.dump(2) + "\n");
    manifest.add_output(a.out);
    manifest.write(a.out + ".manifest.json");
    return 0;
}

// --- plot -------------------------------------------------------------------

struct PlotArgs {
    std::string embeddings, density, label_column, out;
    std::vector<int> dims{0, 1};
};

int cmd_plot(const PlotArgs& a) {
    ManifestBuilder manifest("plot", 0);
    manifest.set_config({{"embeddings", a.embeddings},
                         {"density", a.density},
                         {"label_column", a.label_column},
                         {"dims", a.dims},
                         {"out", a.out}});
    std::string svg;
    if (!a.embeddings.empty()) {
        manifest.add_input(a.embeddings);
        const catlgp::CsvTable table = catlgp::read_csv_table(a.embeddings);
        const std::string mx = "m_" + std::to_string(a.dims.at(0) + 1);
        const std::string my = "m_" + std::to_string(a.dims.at(1) + 1);
        const int cx = table.column(mx);
        const int cy = table.column(my);
        if (cx < 0 || cy < 0)
            throw catlgp::DimensionOutOfRange("plot: no columns '" + mx + "'/'" + my + "' in " +
                                              a.embeddings);
        int cl = -1;
        std::vector<std::string> label_names;
        std::map<std::string, int> label_idx;
        if (!a.label_column.empty()) {
            cl = table.column(a.label_column);
            if (cl < 0)
                throw catlgp::InvalidFlag("plot: column '" + a.label_column + "' not found in " +
                                          a.embeddings);
            std::set<std::string> distinct;
            for (const auto& row : table.rows) distinct.insert(row[size_t(cl)]);
            if (int(distinct.size()) > catlgp::svg::kMaxLabels)
                throw catlgp::TooManyLabels(
                    "plot: " + std::to_string(distinct.size()) + " distinct labels exceed " +
                    std::to_string(catlgp::svg::kMaxLabels) +
                    "; aggregate the label column or drop --label-column");
            for (const auto& name : distinct) {
                label_idx[name] = int(label_names.size());
                label_names.push_back(name);
            }
        }
        std::vector<catlgp::ScatterPoint> points;
        for (const auto& row : table.rows) {
            catlgp::ScatterPoint p;
            p.x = std::stod(row[size_t(cx)]);
            p.y = std::stod(row[size_t(cy)]);
            if (cl >= 0) p.label = label_idx.at(row[size_t(cl)]);
            points.push_back(p);
        }
        svg = catlgp::render_scatter_svg(points, label_names,
                                         "latent dim " + std::to_string(a.dims.at(0) + 1),
                                         "latent dim " + std::to_string(a.dims.at(1) + 1));
    } else {
        manifest.add_input(a.density);
        svg = catlgp::render_density_svg(catlgp::read_density(a.density));
    }
    catlgp::write_file_atomic(a.out, svg);
    manifest.add_output(a.out);
    manifest.write(a.out + ".manifest.json");
    std::cout << "wrote " << a.out << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"categorical latent Gaussian process: density estimation and "
                 "low-dimensional embedding of multivariate categorical data"};
    app.require_subcommand(1);
    app.footer("Environment: CATLGP_THREADS caps internal parallelism.\n"
               "Exit codes: 0 success, 2 bad input, 3 numerical failure.");

    SimulateArgs sim;
    CLI::App* simulate = app.add_subcommand("simulate", "generate a synthetic dataset");
    simulate->add_option("--n", sim.n, "number of observations")
        ->capture_default_str()
        ->check(CLI::PositiveNumber);
    simulate->add_option("--d", sim.d, "number of variables (two-gaussian mode)")
        ->capture_default_str()
        ->check(CLI::PositiveNumber);
    simulate->add_option("--k", sim.k, "cardinality per variable (two-gaussian mode)")
        ->capture_default_str()
        ->check(CLI::Range(2, 10));
    simulate->add_option("--clusters", sim.clusters, "latent structure")
        ->capture_default_str()
        ->check(CLI::IsMember({"two-gaussian", "table1"}));
    simulate->add_option("--seed", sim.seed, "RNG seed")->capture_default_str();
    simulate->add_option("--out", sim.out, "output dataset CSV path")->required();

    FitArgs fit_args;
    auto add_fit_flags = [](CLI::App* cmd, FitArgs& a) {
        cmd->add_option("--data", a.data, "input dataset CSV")
            ->required()
            ->check(CLI::ExistingFile);
        cmd->add_option("--m", a.m, "number of inducing points")
            ->capture_default_str()
            ->check(CLI::PositiveNumber);
        cmd->add_option("--iters", a.iters, "iteration budget")
            ->capture_default_str()
            ->check(CLI::NonNegativeNumber);
        cmd->add_option("--mc-train", a.mc_train, "MC samples per training step")
            ->capture_default_str()
            ->check(CLI::PositiveNumber);
        cmd->add_option("--mc-eval", a.mc_eval, "MC samples for reported ELBO evaluations")
            ->capture_default_str()
            ->check(CLI::PositiveNumber);
        cmd->add_option("--seed", a.seed, "RNG seed")->capture_default_str();
        cmd->add_option("--restarts", a.restarts, "independent restarts, best ELBO wins")
            ->capture_default_str()
            ->check(CLI::PositiveNumber);
        cmd->add_flag("--freeze-z", a.freeze_z, "keep inducing inputs fixed");
        cmd->add_option("--out-dir", a.out_dir, "output directory")->required();
    };
    CLI::App* fit_cmd = app.add_subcommand("fit", "fit the model to a dataset");
    add_fit_flags(fit_cmd, fit_args);
    fit_cmd->add_option("--q", fit_args.q, "latent dimension")
        ->capture_default_str()
        ->check(CLI::PositiveNumber);

    SelectDimArgs sel;
    CLI::App* sel_cmd =
        app.add_subcommand("select-dim", "compare maximized ELBO across latent dimensions");
    add_fit_flags(sel_cmd, sel.fit);
    sel_cmd->add_option("--q-candidates", sel.q_candidates, "comma-separated candidate Qs")
        ->required()
        ->delimiter(',')
        ->check(CLI::PositiveNumber);

    EmbedArgs emb;
    CLI::App* emb_cmd = app.add_subcommand("embed", "export latent embeddings as CSV");
    emb_cmd->add_option("--model", emb.model, "fitted model file")
        ->required()
        ->check(CLI::ExistingFile);
    emb_cmd->add_option("--out", emb.out, "output CSV path")->required();
    emb_cmd->add_option("--labels", emb.labels, "CSV file with per-observation labels")
        ->check(CLI::ExistingFile);
    emb_cmd->add_option("--label-column", emb.label_column, "label column name")
        ->capture_default_str();

    DensityArgs den;
    CLI::App* den_cmd = app.add_subcommand("density", "export the latent density grid");
    den_cmd->add_option("--model", den.model, "fitted model file")
        ->required()
        ->check(CLI::ExistingFile);
    den_cmd->add_option("--dims", den.dims, "two latent dimensions, e.g. 0,1")
        ->delimiter(',')
        ->expected(2)
        ->capture_default_str();
    den_cmd->add_option("--res", den.res, "grid resolution per axis")
        ->capture_default_str()
        ->check(CLI::PositiveNumber);
    den_cmd->add_option("--out", den.out, "output CSV path")->required();

    ErrorArgs err_args;
    CLI::App* err_cmd = app.add_subcommand("error", "training misclassification fraction");
    err_cmd->add_option("--model", err_args.model, "fitted model file")
        ->required()
        ->check(CLI::ExistingFile);
    err_cmd->add_option("--data", err_args.data, "dataset the model was fitted to")
        ->required()
        ->check(CLI::ExistingFile);
    err_cmd->add_option("--out", err_args.out, "result JSON path")->capture_default_str();

    PlotArgs plot;
    CLI::App* plot_cmd = app.add_subcommand("plot", "render an SVG figure");
    auto* opt_emb = plot_cmd->add_option("--embeddings", plot.embeddings, "embeddings CSV")
                        ->check(CLI::ExistingFile);
    auto* opt_den = plot_cmd->add_option("--density", plot.density, "density CSV")
                        ->check(CLI::ExistingFile);
    opt_emb->excludes(opt_den);
    plot_cmd->add_option("--label-column", plot.label_column, "color points by this column");
    plot_cmd->add_option("--dims", plot.dims, "latent dimensions to plot, e.g. 0,1")
        ->delimiter(',')
        ->expected(2)
        ->capture_default_str();
    plot_cmd->add_option("--out", plot.out, "output SVG path")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (simulate->parsed()) return cmd_simulate(sim);
        if (fit_cmd->parsed()) return cmd_fit(fit_args);
        if (sel_cmd->parsed()) return cmd_select_dim(sel);
        if (emb_cmd->parsed()) return cmd_embed(emb);
        if (den_cmd->parsed()) return cmd_density(den);
        if (err_cmd->parsed()) return cmd_error(err_args);
        if (plot_cmd->parsed()) {
            if (plot.embeddings.empty() && plot.density.empty())
                throw catlgp::InvalidFlag("plot: need --embeddings or --density");
            return cmd_plot(plot);
        }
    } catch (const catlgp::Error& e) {
        std::cerr << "catlgp: error: " << e.what() << "\n";
        return catlgp::is_input_error(e) ? 2 : 3;
    } catch (const std::invalid_argument& e) {
        std::cerr << "catlgp: error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "catlgp: error: " << e.what() << "\n";
        return 3;
    }
    return 0;
}
