#pragma once

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace ctrl {

/// Shortest round-trip decimal form; identical inputs always format to
/// identical bytes, which the determinism guarantees lean on.
inline std::string format_metric(double v) {
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

inline constexpr const char* kMetricsHeader =
    "epoch,env_steps,mean_train_return,L_clust,L_pred,L_RL,entropy,silhouette";

struct MetricsRow {
    std::size_t epoch = 0;
    std::uint64_t env_steps = 0;
    double mean_train_return = 0.0;
    double l_clust = 0.0;
    double l_pred = 0.0;
    double l_rl = 0.0;
    double entropy = 0.0;
    bool has_silhouette = false;
    double silhouette = 0.0;

    std::string to_csv() const {
        std::ostringstream os;
        os << epoch << ',' << env_steps << ',' << format_metric(mean_train_return) << ','
           << format_metric(l_clust) << ',' << format_metric(l_pred) << ',' << format_metric(l_rl)
           << ',' << format_metric(entropy) << ',';
        if (has_silhouette) os << format_metric(silhouette);
        return os.str();
    }
};

/// Append-only CSV writer with the fixed schema above.
class MetricsWriter {
  public:
    explicit MetricsWriter(const std::string& path) : os_(path) {
        if (!os_) throw std::runtime_error("metrics: cannot open '" + path + "'");
        os_ << kMetricsHeader << "\n";
    }

    void append(const MetricsRow& row) {
        os_ << row.to_csv() << "\n";
        os_.flush();
    }

  private:
    std::ofstream os_;
};

/// Parsed metrics file for plotting and tests.
struct MetricsTable {
    std::vector<std::string> columns;
    std::vector<std::vector<double>> rows;  // NaN for empty cells
};

inline MetricsTable parse_metrics_csv(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("metrics: cannot open '" + path + "'");
    MetricsTable table;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        lineno += 1;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        std::vector<std::string> cells;
        std::size_t start = 0;
        for (;;) {
            const auto comma = line.find(',', start);
            cells.push_back(line.substr(start, comma == std::string::npos ? comma : comma - start));
            if (comma == std::string::npos) break;
            start = comma + 1;
        }
        if (lineno == 1) {
            table.columns = cells;
            continue;
        }
        if (cells.size() != table.columns.size())
            throw std::runtime_error("metrics csv line " + std::to_string(lineno) + ": expected " +
                                     std::to_string(table.columns.size()) + " cells, got " +
                                     std::to_string(cells.size()));
        std::vector<double> row;
        row.reserve(cells.size());
        for (const std::string& cell : cells) {
            if (cell.empty()) {
                row.push_back(std::nan(""));
                continue;
            }
            try {
                std::size_t used = 0;
                const double v = std::stod(cell, &used);
                if (used != cell.size()) throw std::invalid_argument(cell);
                row.push_back(v);
            } catch (const std::exception&) {
                throw std::runtime_error("metrics csv line " + std::to_string(lineno) +
                                         ": bad number '" + cell + "'");
            }
        }
        table.rows.push_back(std::move(row));
    }
    if (table.columns.empty()) throw std::runtime_error("metrics csv: missing header");
    return table;
}

}  // namespace ctrl
