#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "catlgp/errors.hpp"
#include "catlgp/fs_util.hpp"
#include "catlgp/model.hpp"
#include "catlgp/rng.hpp"
#include "catlgp/training.hpp"

namespace catlgp {

struct VariableSchema {
    std::string name;
    std::vector<std::string> labels; // sorted lexicographically
    int cardinality() const { return int(labels.size()); }
};

struct Schema {
    std::vector<VariableSchema> variables;

    int n_vars() const { return int(variables.size()); }
    std::vector<int> cardinalities() const {
        std::vector<int> k;
        for (const auto& v : variables) k.push_back(v.cardinality());
        return k;
    }
    void validate() const {
        std::set<std::string> names;
        for (const auto& v : variables) {
            if (!names.insert(v.name).second)
                throw InvalidDataset("schema: duplicate variable name '" + v.name + "'");
            std::set<std::string> labels(v.labels.begin(), v.labels.end());
            if (labels.size() != v.labels.size())
                throw SingletonVariable("schema: duplicate labels in variable '" + v.name + "'");
            if (v.cardinality() < 2)
                throw SingletonVariable("schema: variable '" + v.name +
                                        "' has fewer than 2 labels");
        }
    }
};

namespace detail {

// One CSV record (quoted fields, embedded commas/newlines, doubled quotes).
// Returns false at end of input. line_no tracks physical lines for messages.
inline bool next_csv_record(const std::string& text, size_t& pos, int& line_no,
                            std::vector<std::string>& fields) {
    fields.clear();
    if (pos >= text.size()) return false;
    std::string field;
    bool in_quotes = false;
    bool any = false;
    while (pos < text.size()) {
        const char c = text[pos];
        if (in_quotes) {
            if (c == '"') {
                if (pos + 1 < text.size() && text[pos + 1] == '"') {
                    field += '"';
                    pos += 2;
                } else {
                    in_quotes = false;
                    ++pos;
                }
            } else {
                if (c == '\n') ++line_no;
                field += c;
                ++pos;
            }
            any = true;
            continue;
        }
        if (c == '"') {
            in_quotes = true;
            any = true;
            ++pos;
        } else if (c == ',') {
            fields.push_back(std::move(field));
            field.clear();
            any = true;
            ++pos;
        } else if (c == '\n' || c == '\r') {
            if (c == '\r' && pos + 1 < text.size() && text[pos + 1] == '\n') ++pos;
            ++pos;
            ++line_no;
            fields.push_back(std::move(field));
            return true;
        } else {
            field += c;
            any = true;
            ++pos;
        }
    }
    if (any || !field.empty()) {
        fields.push_back(std::move(field));
        ++line_no;
        return true;
    }
    return false;
}

inline std::string csv_quote(const std::string& s) {
    if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += "\"\"";
        else out += c;
    }
    out += '"';
    return out;
}

} // namespace detail

// Generic CSV table: header plus string cells. Used by the plot command and
// the loaders below.
struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    int column(const std::string& name) const {
        for (size_t i = 0; i < header.size(); ++i)
            if (header[i] == name) return int(i);
        return -1;
    }
};

inline CsvTable read_csv_table(const std::filesystem::path& path) {
    const std::string text = read_file(path);
    CsvTable table;
    size_t pos = 0;
    int line_no = 1;
    std::vector<std::string> fields;
    int header_line = line_no;
    if (!detail::next_csv_record(text, pos, line_no, fields))
        throw EmptyFile("csv: " + path.string() + " is empty");
    (void)header_line;
    table.header = fields;
    while (true) {
        const int record_line = line_no;
        if (!detail::next_csv_record(text, pos, line_no, fields)) break;
        if (fields.size() == 1 && fields[0].empty()) continue; // trailing blank line
        if (fields.size() != table.header.size())
            throw MalformedCsv("csv: " + path.string() + " line " +
                               std::to_string(record_line) + ": expected " +
                               std::to_string(table.header.size()) + " fields, got " +
                               std::to_string(fields.size()));
        table.rows.push_back(fields);
    }
    return table;
}

// Categorical CSV ingestion. Labels are encoded by sorted order, so the
// schema does not depend on row order. Empty cells and the missing token mark
// missing values.
inline std::pair<Schema, CategoricalDataset> load_csv(const std::filesystem::path& path,
                                                      const std::string& missing_token = "NA") {
    const CsvTable table = read_csv_table(path);
    const int d_vars = int(table.header.size());
    const int n = int(table.rows.size());
    if (n == 0) throw EmptyFile("csv: " + path.string() + " has a header but no data rows");

    Schema schema;
    std::vector<std::map<std::string, int>> label_index(static_cast<size_t>(d_vars));
    for (int d = 0; d < d_vars; ++d) {
        std::set<std::string> labels;
        for (int r = 0; r < n; ++r) {
            const std::string& cell = table.rows[size_t(r)][size_t(d)];
            if (cell.empty() || cell == missing_token) continue;
            labels.insert(cell);
        }
        if (labels.size() < 2)
            throw SingletonVariable("csv: variable '" + table.header[size_t(d)] + "' has " +
                                    std::to_string(labels.size()) +
                                    " distinct labels; need at least 2");
        VariableSchema var;
        var.name = table.header[size_t(d)];
        var.labels.assign(labels.begin(), labels.end());
        for (size_t i = 0; i < var.labels.size(); ++i)
            label_index[size_t(d)][var.labels[i]] = int(i);
        schema.variables.push_back(std::move(var));
    }
    schema.validate();

    CategoricalDataset data;
    data.cardinalities = schema.cardinalities();
    data.values.resize(n, d_vars);
    for (int r = 0; r < n; ++r)
        for (int d = 0; d < d_vars; ++d) {
            const std::string& cell = table.rows[size_t(r)][size_t(d)];
            data.values(r, d) = (cell.empty() || cell == missing_token)
                                    ? CategoricalDataset::kMissing
                                    : label_index[size_t(d)].at(cell);
        }
    data.validate();
    return {std::move(schema), std::move(data)};
}

inline void write_csv(const std::filesystem::path& path, const Schema& schema,
                      const CategoricalDataset& data, const std::string& missing_token = "NA") {
    if (schema.n_vars() != data.n_vars())
        throw DimensionMismatch("write_csv: schema vs dataset width");
    std::string out;
    for (int d = 0; d < schema.n_vars(); ++d) {
        if (d) out += ',';
        out += detail::csv_quote(schema.variables[size_t(d)].name);
    }
    out += '\n';
    for (int r = 0; r < data.n_obs(); ++r) {
        for (int d = 0; d < data.n_vars(); ++d) {
            if (d) out += ',';
            const int v = data.values(r, d);
            out += v == CategoricalDataset::kMissing
                       ? missing_token
                       : detail::csv_quote(schema.variables[size_t(d)].labels[size_t(v)]);
        }
        out += '\n';
    }
    write_file_atomic(path, out);
}

// Synthetic cohort generator with the cardinality profile of a small clinical
// questionnaire: 12 demographic/admission variables with cardinalities
// {2,2,2,4,4,2,5,2,2,3,2,4}, 7 comorbidity and 9 complication indicators,
// and 14 binary symptom indicators (42 variables in total). Observations are
// produced by a 2-D latent forward simulation over three clusters, so there
// is structure for a model to discover.
inline Schema table1_schema() {
    Schema schema;
    auto binary = [](const std::string& name) {
        return VariableSchema{name, {"no", "yes"}};
    };
    auto levels = [](const std::string& name, int k) {
        VariableSchema v;
        v.name = name;
        for (int i = 0; i < k; ++i) v.labels.push_back("level_" + std::to_string(i));
        return v;
    };
    schema.variables = {
        binary("hospital_admission"), binary("symptoms_at_diagnosis"), binary("icu_admission"),
        levels("abo_blood_type", 4),  levels("race", 4),               binary("employment_status"),
        levels("employer_type", 5),   binary("insurance"),             binary("marital_status"),
        levels("primary_language", 3), binary("sick_contact"),         levels("sick_contact_type", 4),
    };
    for (int i = 1; i <= 7; ++i) schema.variables.push_back(binary("comorbidity_" + std::to_string(i)));
    for (int i = 1; i <= 9; ++i) schema.variables.push_back(binary("complication_" + std::to_string(i)));
    for (int i = 1; i <= 2; ++i) schema.variables.push_back(binary("thermo_symptom_" + std::to_string(i)));
    for (int i = 1; i <= 2; ++i) schema.variables.push_back(binary("lower_resp_symptom_" + std::to_string(i)));
    for (int i = 1; i <= 4; ++i) schema.variables.push_back(binary("heent_symptom_" + std::to_string(i)));
    for (int i = 1; i <= 3; ++i) schema.variables.push_back(binary("gi_symptom_" + std::to_string(i)));
    schema.variables.push_back(binary("hemodynamic_symptom_1"));
    schema.variables.push_back(binary("cardiovascular_symptom_1"));
    schema.variables.push_back(binary("musculoskeletal_symptom_1"));
    schema.validate();
    return schema;
}

struct Table1Sample {
    Schema schema;
    CategoricalDataset data;
    Eigen::MatrixXd latents; // N x 2 ground truth
    Eigen::VectorXi cluster;
};

inline Table1Sample generate_table1_like(int n, std::uint64_t key) {
    if (n < 1) throw std::invalid_argument("generate_table1_like: n must be >= 1");
    Table1Sample out;
    out.schema = table1_schema();

    // three well-separated clusters in a 2-D latent space
    const double means[3][2] = {{-3.0, 0.0}, {3.0, 0.0}, {0.0, 3.0}};
    out.latents.resize(n, 2);
    out.cluster.resize(n);
    for (int i = 0; i < n; ++i) {
        RngStream rng(substream(key, streams::cluster, std::uint64_t(i)));
        const int comp = std::min(2, int(rng.uniform() * 3.0));
        out.cluster[i] = comp;
        out.latents(i, 0) = means[comp][0] + rng.normal();
        out.latents(i, 1) = means[comp][1] + rng.normal();
    }

    std::vector<KernelParams> kernels(size_t(out.schema.n_vars()),
                                      KernelParams(2.0, Eigen::Vector2d(0.5, 0.5)));
    auto [weights, data] = forward_simulate(out.latents, kernels, out.schema.cardinalities(), key);
    (void)weights;
    out.data = std::move(data);
    return out;
}

// --- density over the latent points --------------------------------------

struct DensityGridSpec {
    int dim_x = 0, dim_y = 1;
    double x_min = 0.0, x_max = 1.0, y_min = 0.0, y_max = 1.0;
    int nx = 200, ny = 200;
};

struct DensityGrid {
    DensityGridSpec spec;
    Eigen::MatrixXd values; // ny x nx, row iy, col ix, evaluated at cell centers

    double cell_area() const {
        return (spec.x_max - spec.x_min) / spec.nx * (spec.y_max - spec.y_min) / spec.ny;
    }
    double integral() const { return values.sum() * cell_area(); }
    double center_x(int ix) const {
        return spec.x_min + (ix + 0.5) * (spec.x_max - spec.x_min) / spec.nx;
    }
    double center_y(int iy) const {
        return spec.y_min + (iy + 0.5) * (spec.y_max - spec.y_min) / spec.ny;
    }
};

// Grid covering +-4 posterior standard deviations around every latent mean.
inline DensityGridSpec auto_grid_spec(const FittedModel& model, int dim_x, int dim_y,
                                      int resolution = 200) {
    const int q = model.posterior.latent_dim();
    if (dim_x < 0 || dim_x >= q || dim_y < 0 || dim_y >= q)
        throw DimensionOutOfRange("auto_grid_spec: latent dimension out of range");
    DensityGridSpec spec;
    spec.dim_x = dim_x;
    spec.dim_y = dim_y;
    spec.nx = spec.ny = resolution;
    const Eigen::MatrixXd sd = model.posterior.x_log_var.array().exp().sqrt();
    const auto& m = model.posterior.x_mean;
    spec.x_min = (m.col(dim_x) - 4.0 * sd.col(dim_x)).minCoeff();
    spec.x_max = (m.col(dim_x) + 4.0 * sd.col(dim_x)).maxCoeff();
    spec.y_min = (m.col(dim_y) - 4.0 * sd.col(dim_y)).minCoeff();
    spec.y_max = (m.col(dim_y) + 4.0 * sd.col(dim_y)).maxCoeff();
    return spec;
}

// Uniform mixture over observations of q(x_n), marginalized to two chosen
// dimensions and evaluated at the cell centers.
inline DensityGrid latent_density(const FittedModel& model, const DensityGridSpec& spec) {
    const int q = model.posterior.latent_dim();
    if (spec.dim_x < 0 || spec.dim_x >= q || spec.dim_y < 0 || spec.dim_y >= q)
        throw DimensionOutOfRange("latent_density: latent dimension out of range");
    if (spec.nx < 1 || spec.ny < 1)
        throw std::invalid_argument("latent_density: resolution must be positive");
    const int n = model.posterior.n_obs();
    DensityGrid grid;
    grid.spec = spec;
    grid.values = Eigen::MatrixXd::Zero(spec.ny, spec.nx);
    constexpr double inv_two_pi = 0.15915494309189533577;
    for (int i = 0; i < n; ++i) {
        const double mx = model.posterior.x_mean(i, spec.dim_x);
        const double my = model.posterior.x_mean(i, spec.dim_y);
        const double vx = std::exp(model.posterior.x_log_var(i, spec.dim_x));
        const double vy = std::exp(model.posterior.x_log_var(i, spec.dim_y));
        const double norm = inv_two_pi / std::sqrt(vx * vy) / double(n);
        for (int iy = 0; iy < spec.ny; ++iy) {
            const double dy = grid.center_y(iy) - my;
            const double ey = dy * dy / (2.0 * vy);
            for (int ix = 0; ix < spec.nx; ++ix) {
                const double dx = grid.center_x(ix) - mx;
                grid.values(iy, ix) += norm * std::exp(-(dx * dx / (2.0 * vx) + ey));
            }
        }
    }
    return grid;
}

// --- artifact exports -----------------------------------------------------

inline void export_embeddings(const FittedModel& model,
                              const std::optional<std::vector<std::string>>& labels,
                              const std::filesystem::path& path) {
    const int n = model.posterior.n_obs();
    const int q = model.posterior.latent_dim();
    if (labels && int(labels->size()) != n)
        throw DimensionMismatch("export_embeddings: label count vs observations");
    std::string out = "id";
    for (int j = 0; j < q; ++j) out += ",m_" + std::to_string(j + 1);
    for (int j = 0; j < q; ++j) out += ",s2_" + std::to_string(j + 1);
    if (labels) out += ",label";
    out += '\n';
    const Eigen::MatrixXd var = model.posterior.x_var();
    for (int i = 0; i < n; ++i) {
        out += std::to_string(i);
        for (int j = 0; j < q; ++j) out += ',' + fmt_g12(model.posterior.x_mean(i, j));
        for (int j = 0; j < q; ++j) out += ',' + fmt_g12(var(i, j));
        if (labels) out += ',' + detail::csv_quote((*labels)[size_t(i)]);
        out += '\n';
    }
    write_file_atomic(path, out);
}

// JSON-lines, one record per iteration. Wall-clock stays in memory only so a
// rerun with the same seed emits byte-identical files.
inline void export_trace(const TrainTrace& trace, const std::filesystem::path& path) {
    std::string out;
    for (const auto& r : trace.records) {
        out += "{\"iter\":" + std::to_string(r.iteration);
        out += ",\"elbo\":" + fmt_g12(r.elbo);
        out += ",\"kl_x\":" + fmt_g12(r.kl_x);
        out += ",\"kl_u\":" + fmt_g12(r.kl_u);
        out += ",\"exp_loglik\":" + fmt_g12(r.exp_loglik);
        out += ",\"grad_norm\":" + fmt_g12(r.grad_norm);
        out += "}\n";
    }
    write_file_atomic(path, out);
}

inline void export_density(const DensityGrid& grid, const std::filesystem::path& path) {
    std::string out;
    out += "# catlgp density grid\n";
    out += "# dims " + std::to_string(grid.spec.dim_x) + " " + std::to_string(grid.spec.dim_y) + "\n";
    out += "# x " + fmt_g12(grid.spec.x_min) + " " + fmt_g12(grid.spec.x_max) + " " +
           std::to_string(grid.spec.nx) + "\n";
    out += "# y " + fmt_g12(grid.spec.y_min) + " " + fmt_g12(grid.spec.y_max) + " " +
           std::to_string(grid.spec.ny) + "\n";
    for (int iy = 0; iy < grid.spec.ny; ++iy) {
        for (int ix = 0; ix < grid.spec.nx; ++ix) {
            if (ix) out += ',';
            out += fmt_g12(grid.values(iy, ix));
        }
        out += '\n';
    }
    write_file_atomic(path, out);
}

inline DensityGrid read_density(const std::filesystem::path& path) {
    const std::string text = read_file(path);
    if (text.empty()) throw EmptyFile("density: " + path.string() + " is empty");
    DensityGrid grid;
    std::vector<std::vector<double>> rows;
    size_t pos = 0;
    while (pos < text.size()) {
        size_t eol = text.find('\n', pos);
        if (eol == std::string::npos) eol = text.size();
        const std::string line = text.substr(pos, eol - pos);
        pos = eol + 1;
        if (line.empty()) continue;
        if (line[0] == '#') {
            std::istringstream ss(line.substr(1));
            std::string tag;
            ss >> tag;
            if (tag == "dims") ss >> grid.spec.dim_x >> grid.spec.dim_y;
            else if (tag == "x") ss >> grid.spec.x_min >> grid.spec.x_max >> grid.spec.nx;
            else if (tag == "y") ss >> grid.spec.y_min >> grid.spec.y_max >> grid.spec.ny;
            continue;
        }
        std::vector<double> row;
        std::istringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
        rows.push_back(std::move(row));
    }
    if (int(rows.size()) != grid.spec.ny || grid.spec.ny == 0)
        throw MalformedCsv("density: " + path.string() + " row count does not match header");
    grid.values.resize(grid.spec.ny, grid.spec.nx);
    for (int iy = 0; iy < grid.spec.ny; ++iy) {
        if (int(rows[size_t(iy)].size()) != grid.spec.nx)
            throw MalformedCsv("density: " + path.string() + " ragged grid row");
        for (int ix = 0; ix < grid.spec.nx; ++ix)
            grid.values(iy, ix) = rows[size_t(iy)][size_t(ix)];
    }
    return grid;
}

} // namespace catlgp
