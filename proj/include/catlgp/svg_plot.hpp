#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <string>
#include <vector>

#include "catlgp/data_io.hpp"
#include "catlgp/errors.hpp"

namespace catlgp {

// Static SVG figures for the latent space: a scatter of posterior means with
// optional label coloring, and a density heat map. Output is a plain string
// built with fixed formatting, so identical inputs give identical bytes.

namespace svg {

constexpr int kWidth = 640;
constexpr int kHeight = 480;
constexpr int kMargin = 48;
constexpr int kMaxLabels = 12;

inline const char* palette(int i) {
    static const char* colors[kMaxLabels] = {
        "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b",
        "#e377c2", "#7f7f7f", "#bcbd22", "#17becf", "#393b79", "#ad494a",
    };
    return colors[i % kMaxLabels];
}

inline std::string num(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

struct Range {
    double lo = 0.0, hi = 1.0;
    void pad() {
        if (hi <= lo) {
            lo -= 0.5;
            hi += 0.5;
        }
        const double m = 0.05 * (hi - lo);
        lo -= m;
        hi += m;
    }
    double to_px(double v, double px_lo, double px_hi) const {
        return px_lo + (v - lo) / (hi - lo) * (px_hi - px_lo);
    }
};

} // namespace svg

struct ScatterPoint {
    double x = 0.0, y = 0.0;
    int label = -1; // index into label_names, -1 for unlabeled
};

inline std::string render_scatter_svg(const std::vector<ScatterPoint>& points,
                                      const std::vector<std::string>& label_names,
                                      const std::string& x_title = "latent dim 1",
                                      const std::string& y_title = "latent dim 2") {
    if (int(label_names.size()) > svg::kMaxLabels)
        throw TooManyLabels("plot: " + std::to_string(label_names.size()) +
                            " distinct labels exceed the limit of " +
                            std::to_string(svg::kMaxLabels) +
                            "; aggregate the label column or drop it");
    svg::Range rx, ry;
    if (!points.empty()) {
        rx.lo = rx.hi = points[0].x;
        ry.lo = ry.hi = points[0].y;
        for (const auto& p : points) {
            rx.lo = std::min(rx.lo, p.x);
            rx.hi = std::max(rx.hi, p.x);
            ry.lo = std::min(ry.lo, p.y);
            ry.hi = std::max(ry.hi, p.y);
        }
    }
    rx.pad();
    ry.pad();

    const double x0 = svg::kMargin, x1 = svg::kWidth - svg::kMargin;
    const double y0 = svg::kHeight - svg::kMargin, y1 = svg::kMargin;
    std::string out;
    out += "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"" +
           std::to_string(svg::kWidth) + "\" height=\"" + std::to_string(svg::kHeight) + "\">\n";
    out += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    out += "<rect x=\"" + svg::num(x0) + "\" y=\"" + svg::num(y1) + "\" width=\"" +
           svg::num(x1 - x0) + "\" height=\"" + svg::num(y0 - y1) +
           "\" fill=\"none\" stroke=\"#444\"/>\n";
    // axis extent labels
    out += "<text x=\"" + svg::num(x0) + "\" y=\"" + svg::num(y0 + 16) +
           "\" font-size=\"11\" fill=\"#444\">" + svg::num(rx.lo) + "</text>\n";
    out += "<text x=\"" + svg::num(x1 - 30) + "\" y=\"" + svg::num(y0 + 16) +
           "\" font-size=\"11\" fill=\"#444\">" + svg::num(rx.hi) + "</text>\n";
    out += "<text x=\"6\" y=\"" + svg::num(y0) + "\" font-size=\"11\" fill=\"#444\">" +
           svg::num(ry.lo) + "</text>\n";
    out += "<text x=\"6\" y=\"" + svg::num(y1 + 10) + "\" font-size=\"11\" fill=\"#444\">" +
           svg::num(ry.hi) + "</text>\n";
    out += "<text x=\"" + svg::num((x0 + x1) / 2 - 30) + "\" y=\"" +
           svg::num(double(svg::kHeight) - 8) + "\" font-size=\"12\" fill=\"#111\">" + x_title +
           "</text>\n";
    out += "<text x=\"14\" y=\"" + svg::num((y0 + y1) / 2) +
           "\" font-size=\"12\" fill=\"#111\" transform=\"rotate(-90 14 " +
           svg::num((y0 + y1) / 2) + ")\">" + y_title + "</text>\n";

    for (const auto& p : points) {
        const char* color = p.label >= 0 ? svg::palette(p.label) : "#1f77b4";
        out += "<circle cx=\"" + svg::num(rx.to_px(p.x, x0, x1)) + "\" cy=\"" +
               svg::num(ry.to_px(p.y, y0, y1)) + "\" r=\"4\" fill=\"" + color +
               "\" fill-opacity=\"0.75\"/>\n";
    }

    for (size_t i = 0; i < label_names.size(); ++i) {
        const double ly = y1 + 14 + 18 * double(i);
        out += "<rect x=\"" + svg::num(x1 - 120) + "\" y=\"" + svg::num(ly - 9) +
               "\" width=\"10\" height=\"10\" fill=\"" + svg::palette(int(i)) + "\"/>\n";
        out += "<text x=\"" + svg::num(x1 - 105) + "\" y=\"" + svg::num(ly) +
               "\" font-size=\"11\" fill=\"#111\">" + label_names[i] + "</text>\n";
    }
    out += "</svg>\n";
    return out;
}

// One rect per grid cell, opacity proportional to density.
inline std::string render_density_svg(const DensityGrid& grid) {
    const double vmax = grid.values.size() ? grid.values.maxCoeff() : 0.0;
    const double x0 = svg::kMargin, x1 = svg::kWidth - svg::kMargin;
    const double y0 = svg::kHeight - svg::kMargin, y1 = svg::kMargin;
    const double cw = (x1 - x0) / grid.spec.nx;
    const double ch = (y0 - y1) / grid.spec.ny;
    std::string out;
    out += "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"" +
           std::to_string(svg::kWidth) + "\" height=\"" + std::to_string(svg::kHeight) + "\">\n";
    out += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    for (int iy = 0; iy < grid.spec.ny; ++iy) {
        // grid row 0 is the lowest y value; SVG y axis points down
        const double py = y0 - (iy + 1) * ch;
        for (int ix = 0; ix < grid.spec.nx; ++ix) {
            const double opacity = vmax > 0.0 ? grid.values(iy, ix) / vmax : 0.0;
            out += "<rect x=\"" + svg::num(x0 + ix * cw) + "\" y=\"" + svg::num(py) +
                   "\" width=\"" + svg::num(cw) + "\" height=\"" + svg::num(ch) +
                   "\" fill=\"#117733\" fill-opacity=\"" + svg::num(opacity) + "\"/>\n";
        }
    }
    out += "<rect x=\"" + svg::num(x0) + "\" y=\"" + svg::num(y1) + "\" width=\"" +
           svg::num(x1 - x0) + "\" height=\"" + svg::num(y0 - y1) +
           "\" fill=\"none\" stroke=\"#444\"/>\n";
    out += "<text x=\"" + svg::num(x0) + "\" y=\"" + svg::num(y0 + 16) +
           "\" font-size=\"11\" fill=\"#444\">" + svg::num(grid.spec.x_min) + "</text>\n";
    out += "<text x=\"" + svg::num(x1 - 30) + "\" y=\"" + svg::num(y0 + 16) +
           "\" font-size=\"11\" fill=\"#444\">" + svg::num(grid.spec.x_max) + "</text>\n";
    out += "<text x=\"6\" y=\"" + svg::num(y0) + "\" font-size=\"11\" fill=\"#444\">" +
           svg::num(grid.spec.y_min) + "</text>\n";
    out += "<text x=\"6\" y=\"" + svg::num(y1 + 10) + "\" font-size=\"11\" fill=\"#444\">" +
           svg::num(grid.spec.y_max) + "</text>\n";
    out += "</svg>\n";
    return out;
}

} // namespace catlgp
