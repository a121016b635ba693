#pragma once

#include <algorithm>
#include <cstddef>
#include <stdexcept>
#include <vector>

#include "ctrl/clustering.hpp"
#include "ctrl/graph.hpp"
#include "ctrl/rng.hpp"

namespace ctrl {

/// D_kl = ||e_k - e_l||^2.
inline diff::Tensor centroid_distances(const diff::Tensor& E) {
    using namespace diff;
    if (E.rank() != 2) throw GraphError("centroid_distances: E must be rank-2");
    const std::size_t C = E.shape[0], d = E.shape[1];
    Tensor D({C, C});
    for (std::size_t k = 0; k < C; ++k) {
        for (std::size_t l = k + 1; l < C; ++l) {
            double s = 0.0;
            for (std::size_t i = 0; i < d; ++i) {
                const double diff_i = E.data[k * d + i] - E.data[l * d + i];
                s += diff_i * diff_i;
            }
            D.data[k * C + l] = s;
            D.data[l * C + k] = s;
        }
    }
    return D;
}

/// Per-row argmax; ties go to the lowest cluster index.
inline std::vector<std::size_t> hard_assign(const diff::Tensor& Qt) {
    using namespace diff;
    if (Qt.rank() != 2) throw GraphError("hard_assign: expects a B x C matrix");
    const std::size_t B = Qt.shape[0], C = Qt.shape[1];
    std::vector<std::size_t> labels(B);
    for (std::size_t i = 0; i < B; ++i) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < C; ++c)
            if (Qt.data[i * C + c] > Qt.data[i * C + best]) best = c;
        labels[i] = best;
    }
    return labels;
}

inline std::vector<std::size_t> cluster_occupancy(const std::vector<std::size_t>& labels,
                                                  std::size_t num_clusters) {
    std::vector<std::size_t> counts(num_clusters, 0);
    for (std::size_t l : labels) counts.at(l) += 1;
    return counts;
}

/// The <=K occupied clusters nearest to c (by D), excluding c itself.
/// Ordered near-to-far; distance ties resolve to the lower cluster id.
inline std::vector<std::size_t> neighbor_clusters(const diff::Tensor& D, std::size_t c, std::size_t K,
                                                  const std::vector<std::size_t>& occupancy) {
    using namespace diff;
    const std::size_t C = D.shape[0];
    if (c >= C || occupancy.size() != C) throw GraphError("neighbor_clusters: bad cluster id or occupancy");
    std::vector<std::size_t> candidates;
    for (std::size_t l = 0; l < C; ++l)
        if (l != c && occupancy[l] > 0) candidates.push_back(l);
    std::sort(candidates.begin(), candidates.end(), [&](std::size_t a, std::size_t b) {
        const double da = D.data[c * C + a], db = D.data[c * C + b];
        if (da != db) return da < db;
        return a < b;
    });
    if (candidates.size() > K) candidates.resize(K);
    return candidates;
}

/// One mining pass: which anchors were drawn and which trajectory was mined
/// from each neighboring cluster. Sampling is separated from loss building
/// so the same plan can drive the graph and the value oracle.
struct MiningPlan {
    struct Anchor {
        std::size_t anchor_index = 0;
        std::vector<std::size_t> mined_indices;
    };
    std::vector<Anchor> anchors;

    std::size_t total_mined() const {
        std::size_t n = 0;
        for (const auto& a : anchors) n += a.mined_indices.size();
        return n;
    }
};

inline MiningPlan plan_mining(const std::vector<std::size_t>& labels, const diff::Tensor& D,
                              std::size_t num_anchors, std::size_t K, Rng& rng) {
    const std::size_t B = labels.size();
    if (B < 2) throw diff::GraphError("plan_mining: need at least 2 trajectories");
    const std::size_t C = D.shape[0];
    const std::vector<std::size_t> occupancy = cluster_occupancy(labels, C);
    std::vector<std::vector<std::size_t>> members(C);
    for (std::size_t i = 0; i < B; ++i) members[labels[i]].push_back(i);

    MiningPlan plan;
    plan.anchors.reserve(num_anchors);
    for (std::size_t n = 0; n < num_anchors; ++n) {
        MiningPlan::Anchor anchor;
        anchor.anchor_index = static_cast<std::size_t>(rng.below(B));
        const std::size_t cn = labels[anchor.anchor_index];
        for (std::size_t ck : neighbor_clusters(D, cn, K, occupancy)) {
            const auto& pool = members[ck];
            anchor.mined_indices.push_back(pool[static_cast<std::size_t>(rng.below(pool.size()))]);
        }
        plan.anchors.push_back(std::move(anchor));
    }
    return plan;
}

/// Sum over anchors of sum_k ||w'_n - stopgrad(v'_{c_k})||^2 as a graph
/// node. u_nodes[i] is trajectory i's view node.
inline diff::NodeId prediction_loss_node(diff::Graph& g, const MiningPlan& plan,
                                         const std::vector<diff::NodeId>& u_nodes) {
    using namespace diff;
    std::vector<NodeId> terms;
    for (const auto& anchor : plan.anchors) {
        if (anchor.mined_indices.empty()) continue;  // no occupied neighbors: contributes 0
        NodeId w = mlp_node(g, "pred.theta", mlp_node(g, "pred.psi", u_nodes[anchor.anchor_index]));
        for (std::size_t mined : anchor.mined_indices) {
            NodeId v = g.stop_gradient(mlp_node(g, "pred.psi", u_nodes[mined]));
            terms.push_back(g.squared_dist(w, v));
        }
    }
    if (terms.empty()) return g.constant(Tensor::scalar(0.0));
    return g.add_n(terms);
}

/// Value-route twin of prediction_loss_node.
inline double prediction_loss_value(const diff::ParameterStore& store, const MiningPlan& plan,
                                    const std::vector<diff::Tensor>& u_values) {
    double loss = 0.0;
    for (const auto& anchor : plan.anchors) {
        if (anchor.mined_indices.empty()) continue;
        const diff::Tensor w =
            mlp_forward(store, "pred.theta", mlp_forward(store, "pred.psi", u_values[anchor.anchor_index]));
        for (std::size_t mined : anchor.mined_indices) {
            const diff::Tensor v = mlp_forward(store, "pred.psi", u_values[mined]);
            for (std::size_t i = 0; i < w.numel(); ++i) {
                const double d = w.data[i] - v.data[i];
                loss += d * d;
            }
        }
    }
    return loss;
}

/// Convenience wrapper: plan and evaluate the prediction loss in one call.
inline double mine_and_predict(const diff::ParameterStore& store,
                               const std::vector<diff::Tensor>& u_values,
                               const std::vector<std::size_t>& labels, const diff::Tensor& D,
                               std::size_t num_anchors, std::size_t K, Rng& rng) {
    const MiningPlan plan = plan_mining(labels, D, num_anchors, K, rng);
    return prediction_loss_value(store, plan, u_values);
}

inline void init_pred_params(diff::ParameterStore& store, const ClusterConfig& cfg, Rng& rng) {
    init_mlp_params(store, "pred.psi", cfg.view_dim, cfg.hidden_dim, cfg.latent_dim, rng);
    init_mlp_params(store, "pred.theta", cfg.latent_dim, cfg.latent_dim, cfg.latent_dim, rng);
}

}  // namespace ctrl
