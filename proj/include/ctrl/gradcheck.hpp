#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "ctrl/graph.hpp"

namespace ctrl::diff {

struct GradCheckEntry {
    std::string param;
    double max_rel_err = 0.0;
    std::size_t worst_coord = 0;
    double analytic_at_worst = 0.0;
    double numeric_at_worst = 0.0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double max_rel_err = 0.0;
    double tolerance = 0.0;
    bool pass = true;
};

/// Relative error between an analytic and a central-difference derivative.
/// Pairs that are both below the absolute floor count as exact matches: at
/// that magnitude the finite difference is pure roundoff.
inline double grad_rel_err(double analytic, double numeric, double abs_floor = 1e-7) {
    const double aa = std::abs(analytic), an = std::abs(numeric);
    if (aa <= abs_floor && an <= abs_floor) return 0.0;
    return std::abs(analytic - numeric) / std::max({aa, an, 1e-12});
}

/// Central finite differences over every coordinate of every parameter the
/// graph touches, compared against one reverse-mode sweep.
inline GradCheckReport grad_check(Graph& graph, NodeId loss,
                                  const std::map<std::string, Tensor>& inputs,
                                  double tolerance, double h = 1e-5) {
    GradCheckReport report;
    report.tolerance = tolerance;

    graph.evaluate(inputs);
    graph.backward(loss);
    ParameterStore& store = *graph.store();

    std::map<std::string, Tensor> analytic;
    for (const std::string& name : graph.touched_params()) analytic[name] = store.grad(name);

    for (const std::string& name : graph.touched_params()) {
        GradCheckEntry entry;
        entry.param = name;
        Tensor& value = store.value(name);
        for (std::size_t i = 0; i < value.numel(); ++i) {
            const double saved = value.data[i];
            value.data[i] = saved + h;
            graph.evaluate(inputs);
            const double lp = graph.scalar_value(loss);
            value.data[i] = saved - h;
            graph.evaluate(inputs);
            const double lm = graph.scalar_value(loss);
            value.data[i] = saved;
            const double numeric = (lp - lm) / (2.0 * h);
            const double err = grad_rel_err(analytic[name].data[i], numeric);
            if (err >= entry.max_rel_err) {
                entry.max_rel_err = err;
                entry.worst_coord = i;
                entry.analytic_at_worst = analytic[name].data[i];
                entry.numeric_at_worst = numeric;
            }
        }
        report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
        report.entries.push_back(entry);
    }
    // restore forward/backward state for the caller
    graph.evaluate(inputs);
    graph.backward(loss);
    report.pass = report.max_rel_err < tolerance;
    return report;
}

}  // namespace ctrl::diff
