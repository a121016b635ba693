#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "ctrl/graph.hpp"
#include "ctrl/tensor.hpp"

namespace ctrl::analysis {

/// Probability vector over a finite support.
struct DiscreteDistribution {
    std::vector<double> p;

    explicit DiscreteDistribution(std::vector<double> probs) : p(std::move(probs)) {
        double sum = 0.0;
        for (double x : p) {
            if (x < 0.0) throw std::invalid_argument("DiscreteDistribution: negative mass");
            sum += x;
        }
        if (std::abs(sum - 1.0) > 1e-12)
            throw std::invalid_argument("DiscreteDistribution: mass sums to " + std::to_string(sum));
    }

    std::size_t size() const { return p.size(); }
};

/// Symmetric nonnegative cost matrix with zero diagonal.
struct GroundMetric {
    diff::Tensor d;

    explicit GroundMetric(diff::Tensor m) : d(std::move(m)) {
        if (d.rank() != 2 || d.shape[0] != d.shape[1])
            throw std::invalid_argument("GroundMetric: must be square");
        const std::size_t n = d.shape[0];
        for (std::size_t i = 0; i < n; ++i) {
            if (d.at(i, i) != 0.0) throw std::invalid_argument("GroundMetric: nonzero diagonal");
            for (std::size_t j = 0; j < n; ++j) {
                if (d.at(i, j) < 0.0) throw std::invalid_argument("GroundMetric: negative entry");
                if (std::abs(d.at(i, j) - d.at(j, i)) > 1e-12)
                    throw std::invalid_argument("GroundMetric: not symmetric");
            }
        }
    }

    std::size_t size() const { return d.shape[0]; }
};

/// Mean silhouette over all points, Euclidean distances. Points in singleton
/// clusters score 0. Requires at least two non-empty clusters.
inline double silhouette(const diff::Tensor& points, const std::vector<std::size_t>& labels) {
    if (points.rank() != 2) throw std::invalid_argument("silhouette: points must be B x d");
    const std::size_t B = points.shape[0], d = points.shape[1];
    if (labels.size() != B) throw std::invalid_argument("silhouette: one label per point");
    std::size_t num_clusters = 0;
    for (std::size_t l : labels) num_clusters = std::max(num_clusters, l + 1);
    std::vector<std::size_t> count(num_clusters, 0);
    for (std::size_t l : labels) count[l] += 1;
    std::size_t nonempty = 0;
    for (std::size_t c : count) nonempty += c > 0 ? 1 : 0;
    if (nonempty < 2) throw std::invalid_argument("silhouette: needs at least 2 non-empty clusters");

    auto dist = [&](std::size_t i, std::size_t j) {
        double s = 0.0;
        for (std::size_t k = 0; k < d; ++k) {
            const double v = points.data[i * d + k] - points.data[j * d + k];
            s += v * v;
        }
        return std::sqrt(s);
    };

    double total = 0.0;
    std::vector<double> cluster_sum(num_clusters);
    for (std::size_t i = 0; i < B; ++i) {
        if (count[labels[i]] == 1) continue;  // singleton: contributes 0
        std::fill(cluster_sum.begin(), cluster_sum.end(), 0.0);
        for (std::size_t j = 0; j < B; ++j) {
            if (j == i) continue;
            cluster_sum[labels[j]] += dist(i, j);
        }
        const double a = cluster_sum[labels[i]] / static_cast<double>(count[labels[i]] - 1);
        double b = std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < num_clusters; ++c) {
            if (c == labels[i] || count[c] == 0) continue;
            b = std::min(b, cluster_sum[c] / static_cast<double>(count[c]));
        }
        const double m = std::max(a, b);
        total += m > 0.0 ? (b - a) / m : 0.0;
    }
    return total / static_cast<double>(B);
}

/// Cosine similarity between time-adjacent cluster centroids along a label
/// series.
inline std::vector<double> temporal_cluster_similarity(const std::vector<std::size_t>& labels,
                                                       const diff::Tensor& E) {
    if (labels.size() < 2) throw std::invalid_argument("temporal_cluster_similarity: need >= 2 windows");
    const std::size_t d = E.shape[1];
    std::vector<double> out;
    out.reserve(labels.size() - 1);
    for (std::size_t t = 0; t + 1 < labels.size(); ++t) {
        const double* a = E.data.data() + labels[t] * d;
        const double* b = E.data.data() + labels[t + 1] * d;
        const double na = diff::kernels::l2_norm(a, d), nb = diff::kernels::l2_norm(b, d);
        out.push_back(diff::kernels::dot(a, b, d) / (na * nb));
    }
    return out;
}

struct PerturbationCheck {
    bool holds_condition = false;
    bool same_argmax = false;
};

/// Raw dot-product argmax before and after adding delta, plus the half-plane
/// condition (e_j - e_j') . delta >= 0 for all j' != j. Whenever the
/// condition holds the argmax cannot move.
inline PerturbationCheck check_perturbation_invariance(const diff::Tensor& E,
                                                       const std::vector<double>& v,
                                                       const std::vector<double>& delta) {
    const std::size_t C = E.shape[0], d = E.shape[1];
    if (v.size() != d || delta.size() != d)
        throw std::invalid_argument("check_perturbation_invariance: dimension mismatch");
    auto argmax_scores = [&](const std::vector<double>& x) {
        std::size_t best = 0;
        double best_score = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < C; ++c) {
            const double s = diff::kernels::dot(E.data.data() + c * d, x.data(), d);
            if (s > best_score) {
                best_score = s;
                best = c;
            }
        }
        return best;
    };
    const std::size_t j = argmax_scores(v);
    PerturbationCheck out;
    out.holds_condition = true;
    for (std::size_t jp = 0; jp < C && out.holds_condition; ++jp) {
        if (jp == j) continue;
        double s = 0.0;
        for (std::size_t i = 0; i < d; ++i) s += (E.data[j * d + i] - E.data[jp * d + i]) * delta[i];
        if (s < 0.0) out.holds_condition = false;
    }
    std::vector<double> shifted(d);
    for (std::size_t i = 0; i < d; ++i) shifted[i] = v[i] + delta[i];
    out.same_argmax = argmax_scores(shifted) == j;
    return out;
}

/// Exact optimal-transport cost between p and q under ground metric d,
/// solved in the primal by successive shortest augmenting paths. Intended
/// for oracle-grade use on small supports (n <= 16).
inline double wasserstein1(const DiscreteDistribution& p, const DiscreteDistribution& q,
                           const GroundMetric& metric) {
    const std::size_t n = p.size();
    if (q.size() != n || metric.size() != n)
        throw std::invalid_argument("wasserstein1: support sizes differ");
    if (n > 16) throw std::invalid_argument("wasserstein1: support too large (max 16)");
    double sp = 0.0, sq = 0.0;
    for (double x : p.p) sp += x;
    for (double x : q.p) sq += x;
    if (std::abs(sp - sq) > 1e-9) throw std::invalid_argument("wasserstein1: infeasible marginals");

    std::vector<double> supply = p.p, demand = q.p;
    std::vector<double> flow(n * n, 0.0);
    const double eps = 1e-15;
    double cost = 0.0;

    auto remaining = [&]() {
        double r = 0.0;
        for (double s : supply) r += s;
        return r;
    };

    std::size_t guard = 16 * n * n + 64;
    while (remaining() > eps) {
        if (guard-- == 0) throw std::runtime_error("wasserstein1: augmentation guard tripped");
        // Bellman-Ford over 2n nodes: sources [0,n), sinks [n,2n)
        const double inf = std::numeric_limits<double>::infinity();
        std::vector<double> dist(2 * n, inf);
        std::vector<int> pred(2 * n, -1);
        for (std::size_t i = 0; i < n; ++i)
            if (supply[i] > eps) dist[i] = 0.0;
        for (std::size_t round = 0; round < 2 * n; ++round) {
            bool changed = false;
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < n; ++j) {
                    const double dij = metric.d.data[i * n + j];
                    if (dist[i] < inf && dist[i] + dij < dist[n + j] - 1e-18) {
                        dist[n + j] = dist[i] + dij;
                        pred[n + j] = static_cast<int>(i);
                        changed = true;
                    }
                    if (flow[i * n + j] > eps && dist[n + j] < inf &&
                        dist[n + j] - dij < dist[i] - 1e-18) {
                        dist[i] = dist[n + j] - dij;
                        pred[i] = static_cast<int>(n + j);
                        changed = true;
                    }
                }
            }
            if (!changed) break;
        }
        // closest sink with demand left
        int sink = -1;
        for (std::size_t j = 0; j < n; ++j)
            if (demand[j] > eps && (sink < 0 || dist[n + j] < dist[n + static_cast<std::size_t>(sink)]))
                sink = static_cast<int>(j);
        if (sink < 0 || dist[n + static_cast<std::size_t>(sink)] == inf)
            throw std::runtime_error("wasserstein1: no augmenting path");

        // bottleneck along the path
        double bottleneck = demand[static_cast<std::size_t>(sink)];
        for (int node = static_cast<int>(n) + sink; pred[node] >= 0; node = pred[node]) {
            const int prev = pred[node];
            if (prev >= static_cast<int>(n)) {
                // backward arc sink(prev) -> source(node)
                bottleneck = std::min(bottleneck,
                                      flow[static_cast<std::size_t>(node) * n +
                                           (static_cast<std::size_t>(prev) - n)]);
            }
            if (pred[prev] < 0) bottleneck = std::min(bottleneck, supply[static_cast<std::size_t>(prev)]);
        }
        // apply
        for (int node = static_cast<int>(n) + sink; pred[node] >= 0; node = pred[node]) {
            const int prev = pred[node];
            if (prev < static_cast<int>(n)) {
                const std::size_t i = static_cast<std::size_t>(prev);
                const std::size_t j = static_cast<std::size_t>(node) - n;
                flow[i * n + j] += bottleneck;
                cost += bottleneck * metric.d.data[i * n + j];
            } else {
                const std::size_t i = static_cast<std::size_t>(node);
                const std::size_t j = static_cast<std::size_t>(prev) - n;
                flow[i * n + j] -= bottleneck;
                cost -= bottleneck * metric.d.data[i * n + j];
            }
        }
        // path starts at a supply node
        int start = static_cast<int>(n) + sink;
        while (pred[start] >= 0) start = pred[start];
        supply[static_cast<std::size_t>(start)] -= bottleneck;
        demand[static_cast<std::size_t>(sink)] -= bottleneck;
    }
    return cost;
}

/// Closed-form W1 for unit-spaced supports on a line (d(i,j) = |i-j|):
/// the L1 distance between the cumulative distributions.
inline double wasserstein1_line(const std::vector<double>& p, const std::vector<double>& q) {
    if (p.size() != q.size()) throw std::invalid_argument("wasserstein1_line: support sizes differ");
    double cum = 0.0, total = 0.0;
    for (std::size_t k = 0; k + 1 < p.size(); ++k) {
        cum += p[k] - q[k];
        total += std::abs(cum);
    }
    return total;
}

struct BisimProbeReport {
    double mean_same_cluster_w1 = 0.0;
    double mean_cross_cluster_w1 = 0.0;
    bool same_leq_cross = false;
    std::size_t same_pairs = 0;
    std::size_t cross_pairs = 0;
};

/// Evidence probe: views are softmax-normalized into distributions over
/// their coordinates and compared with W1 under the |i-j| ground metric
/// (closed form; the LP solver cross-checks it on small supports in tests).
/// The inequality is reported, never asserted.
inline BisimProbeReport bisim_consistency_probe(const std::vector<diff::Tensor>& views,
                                                const std::vector<std::size_t>& labels,
                                                const diff::Tensor& E) {
    if (views.size() != labels.size())
        throw std::invalid_argument("bisim_consistency_probe: one label per view");
    const std::size_t C = E.shape[0];
    for (std::size_t l : labels)
        if (l >= C) throw std::invalid_argument("bisim_consistency_probe: label out of range");
    std::vector<std::vector<double>> dists(views.size());
    for (std::size_t i = 0; i < views.size(); ++i) {
        dists[i].resize(views[i].numel());
        diff::kernels::softmax_row(views[i].data.data(), dists[i].data(), views[i].numel());
    }
    BisimProbeReport report;
    double same_sum = 0.0, cross_sum = 0.0;
    for (std::size_t i = 0; i < views.size(); ++i) {
        for (std::size_t j = i + 1; j < views.size(); ++j) {
            const double w = wasserstein1_line(dists[i], dists[j]);
            if (labels[i] == labels[j]) {
                same_sum += w;
                report.same_pairs += 1;
            } else {
                cross_sum += w;
                report.cross_pairs += 1;
            }
        }
    }
    if (report.same_pairs) report.mean_same_cluster_w1 = same_sum / static_cast<double>(report.same_pairs);
    if (report.cross_pairs) report.mean_cross_cluster_w1 = cross_sum / static_cast<double>(report.cross_pairs);
    report.same_leq_cross = report.mean_same_cluster_w1 <= report.mean_cross_cluster_w1;
    return report;
}

}  // namespace ctrl::analysis
