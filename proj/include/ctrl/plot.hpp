#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "ctrl/metrics.hpp"

namespace ctrl {

struct PlotLayout {
    double width = 640.0, height = 400.0;
    double left = 60.0, right = 20.0, top = 20.0, bottom = 40.0;

    double plot_w() const { return width - left - right; }
    double plot_h() const { return height - top - bottom; }
};

struct PlotBounds {
    double xmin = 0.0, xmax = 1.0, ymin = 0.0, ymax = 1.0;
};

/// Data -> pixel mapping; degenerate ranges land mid-axis.
inline std::pair<double, double> map_point(double x, double y, const PlotBounds& b,
                                           const PlotLayout& l = {}) {
    const double fx = b.xmax > b.xmin ? (x - b.xmin) / (b.xmax - b.xmin) : 0.5;
    const double fy = b.ymax > b.ymin ? (y - b.ymin) / (b.ymax - b.ymin) : 0.5;
    return {l.left + fx * l.plot_w(), l.top + (1.0 - fy) * l.plot_h()};
}

inline std::string svg_line_chart(const std::vector<std::pair<double, double>>& points,
                                  const std::string& title, const std::string& x_label,
                                  const std::string& y_label) {
    const PlotLayout l;
    PlotBounds b;
    if (!points.empty()) {
        b.xmin = b.xmax = points[0].first;
        b.ymin = b.ymax = points[0].second;
        for (const auto& [x, y] : points) {
            b.xmin = std::min(b.xmin, x);
            b.xmax = std::max(b.xmax, x);
            b.ymin = std::min(b.ymin, y);
            b.ymax = std::max(b.ymax, y);
        }
    }
    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << format_metric(l.width)
       << "\" height=\"" << format_metric(l.height) << "\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<text x=\"" << format_metric(l.width / 2) << "\" y=\"14\" text-anchor=\"middle\" "
          "font-family=\"sans-serif\" font-size=\"13\">" << title << "</text>\n";
    // axes
    os << "<line x1=\"" << format_metric(l.left) << "\" y1=\"" << format_metric(l.top)
       << "\" x2=\"" << format_metric(l.left) << "\" y2=\"" << format_metric(l.height - l.bottom)
       << "\" stroke=\"black\"/>\n";
    os << "<line x1=\"" << format_metric(l.left) << "\" y1=\"" << format_metric(l.height - l.bottom)
       << "\" x2=\"" << format_metric(l.width - l.right) << "\" y2=\""
       << format_metric(l.height - l.bottom) << "\" stroke=\"black\"/>\n";
    os << "<text x=\"" << format_metric(l.width / 2) << "\" y=\"" << format_metric(l.height - 8)
       << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" << x_label
       << "</text>\n";
    os << "<text x=\"14\" y=\"" << format_metric(l.height / 2)
       << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\" "
          "transform=\"rotate(-90 14 " << format_metric(l.height / 2) << ")\">" << y_label
       << "</text>\n";
    if (!points.empty()) {
        // range labels
        os << "<text x=\"" << format_metric(l.left) << "\" y=\""
           << format_metric(l.height - l.bottom + 14)
           << "\" font-family=\"sans-serif\" font-size=\"10\">" << format_metric(b.xmin)
           << "</text>\n";
        os << "<text x=\"" << format_metric(l.width - l.right) << "\" y=\""
           << format_metric(l.height - l.bottom + 14)
           << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">"
           << format_metric(b.xmax) << "</text>\n";
        os << "<text x=\"" << format_metric(l.left - 4) << "\" y=\""
           << format_metric(l.height - l.bottom)
           << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">"
           << format_metric(b.ymin) << "</text>\n";
        os << "<text x=\"" << format_metric(l.left - 4) << "\" y=\"" << format_metric(l.top + 4)
           << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">"
           << format_metric(b.ymax) << "</text>\n";
        os << "<polyline fill=\"none\" stroke=\"#1f6fb2\" stroke-width=\"1.5\" points=\"";
        bool first = true;
        for (const auto& [x, y] : points) {
            const auto [px, py] = map_point(x, y, b, l);
            if (!first) os << ' ';
            os << format_metric(px) << ',' << format_metric(py);
            first = false;
        }
        os << "\"/>\n";
    }
    os << "</svg>\n";
    return os.str();
}

/// Emits one SVG per tracked series (returns, both representation losses,
/// silhouette) against env_steps. Pure function of the csv contents.
inline std::vector<std::string> emit_plots(const std::string& csv_path, const std::string& out_dir) {
    const MetricsTable table = parse_metrics_csv(csv_path);
    auto column_index = [&](const std::string& name) {
        for (std::size_t i = 0; i < table.columns.size(); ++i)
            if (table.columns[i] == name) return i;
        throw std::runtime_error("plots: missing column '" + name + "'");
    };
    const std::size_t x_col = column_index("env_steps");
    const std::vector<std::pair<std::string, std::string>> series = {
        {"mean_train_return", "returns.svg"},
        {"L_clust", "clust_loss.svg"},
        {"L_pred", "pred_loss.svg"},
        {"silhouette", "silhouette.svg"},
    };
    std::filesystem::create_directories(out_dir);
    std::vector<std::string> written;
    for (const auto& [column, filename] : series) {
        const std::size_t y_col = column_index(column);
        std::vector<std::pair<double, double>> points;
        for (const auto& row : table.rows) {
            if (std::isnan(row[y_col])) continue;
            points.emplace_back(row[x_col], row[y_col]);
        }
        const std::string path = out_dir + "/" + filename;
        std::ofstream os(path, std::ios::binary);
        if (!os) throw std::runtime_error("plots: cannot open '" + path + "'");
        os << svg_line_chart(points, column, "env_steps", column);
        written.push_back(path);
    }
    return written;
}

}  // namespace ctrl
