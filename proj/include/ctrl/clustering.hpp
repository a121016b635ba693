#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "ctrl/graph.hpp"
#include "ctrl/rng.hpp"

namespace ctrl {

/// Clustering branch: psi projects views to the 32-d centroid space, theta
/// projects once more, and E holds C unit-norm centroid rows.
struct ClusterConfig {
    std::size_t num_clusters = 200;
    double temperature = 0.3;
    int sinkhorn_iters = 3;
    std::size_t view_dim = 128;  // T * embed_dim
    std::size_t latent_dim = 32;
    std::size_t hidden_dim = 64;
};

inline void renormalize_centroid_rows(diff::Tensor& E) {
    const std::size_t C = E.shape[0], d = E.shape[1];
    for (std::size_t c = 0; c < C; ++c) {
        double* row = E.data.data() + c * d;
        const double nrm = diff::kernels::l2_norm(row, d);
        if (nrm == 0.0) throw diff::GraphError("renormalize_centroid_rows: zero-norm centroid");
        for (std::size_t i = 0; i < d; ++i) row[i] /= nrm;
    }
}

inline void init_mlp_params(diff::ParameterStore& store, const std::string& prefix, std::size_t in,
                            std::size_t hidden, std::size_t out, Rng& rng) {
    using diff::Tensor;
    store.add(prefix + ".w1", Tensor::randn({hidden, in}, rng, std::sqrt(2.0 / static_cast<double>(in))));
    store.add(prefix + ".b1", Tensor::zeros({hidden}));
    store.add(prefix + ".w2", Tensor::randn({out, hidden}, rng, std::sqrt(2.0 / static_cast<double>(hidden))));
    store.add(prefix + ".b2", Tensor::zeros({out}));
}

inline diff::NodeId mlp_node(diff::Graph& g, const std::string& prefix, diff::NodeId x) {
    diff::NodeId h = g.relu(g.affine(x, g.param(prefix + ".w1"), g.param(prefix + ".b1")));
    return g.affine(h, g.param(prefix + ".w2"), g.param(prefix + ".b2"));
}

inline diff::Tensor mlp_forward(const diff::ParameterStore& store, const std::string& prefix,
                                const diff::Tensor& x) {
    using namespace diff;
    const Tensor& w1 = store.value(prefix + ".w1");
    Tensor h({w1.shape[0]});
    kernels::affine(x, w1, &store.value(prefix + ".b1"), h);
    for (double& v : h.data) v = v > 0.0 ? v : 0.0;
    const Tensor& w2 = store.value(prefix + ".w2");
    Tensor out({w2.shape[0]});
    kernels::affine(h, w2, &store.value(prefix + ".b2"), out);
    return out;
}

inline void init_cluster_params(diff::ParameterStore& store, const ClusterConfig& cfg, Rng& rng) {
    init_mlp_params(store, "clust.psi", cfg.view_dim, cfg.hidden_dim, cfg.latent_dim, rng);
    init_mlp_params(store, "clust.theta", cfg.latent_dim, cfg.latent_dim, cfg.latent_dim, rng);
    diff::Tensor E = diff::Tensor::randn({cfg.num_clusters, cfg.latent_dim}, rng, 1.0);
    renormalize_centroid_rows(E);
    store.add("clust.E", std::move(E));
}

/// Q_ic = softmax_c(cos(v_i, e_c) / beta). Rows of V need not be normalized;
/// zero-norm rows are rejected.
inline diff::Tensor soft_assign(const diff::Tensor& V, const diff::Tensor& E, double beta) {
    using namespace diff;
    if (V.rank() != 2 || E.rank() != 2 || V.shape[1] != E.shape[1])
        throw GraphError("soft_assign: V " + shape_str(V.shape) + " vs E " + shape_str(E.shape));
    if (beta <= 0.0) throw GraphError("soft_assign: temperature must be positive");
    const std::size_t B = V.shape[0], C = E.shape[0], d = V.shape[1];
    std::vector<double> enorm(C);
    for (std::size_t c = 0; c < C; ++c) {
        enorm[c] = kernels::l2_norm(E.data.data() + c * d, d);
        if (enorm[c] == 0.0) throw GraphError("soft_assign: zero-norm centroid row " + std::to_string(c));
    }
    Tensor Q({B, C});
    std::vector<double> scores(C);
    for (std::size_t i = 0; i < B; ++i) {
        const double* vi = V.data.data() + i * d;
        const double vn = kernels::l2_norm(vi, d);
        if (vn == 0.0) throw GraphError("soft_assign: zero-norm view row " + std::to_string(i));
        for (std::size_t c = 0; c < C; ++c)
            scores[c] = kernels::dot(vi, E.data.data() + c * d, d) / (vn * enorm[c] * beta);
        kernels::softmax_row(scores.data(), Q.data.data() + i * C, C);
    }
    return Q;
}

/// Balanced re-normalization toward uniform cluster marginals: `iters`
/// rounds of (columns to B/C, rows to 1), then one final row pass. The
/// output is an assignment target and carries no gradients.
inline diff::Tensor sinkhorn_normalize(const diff::Tensor& Q, int iters) {
    using namespace diff;
    if (Q.rank() != 2) throw GraphError("sinkhorn_normalize: expects a B x C matrix");
    for (double q : Q.data)
        if (!(q > 0.0)) throw GraphError("sinkhorn_normalize: entries must be strictly positive");
    const std::size_t B = Q.shape[0], C = Q.shape[1];
    Tensor M = Q;
    const double col_target = static_cast<double>(B) / static_cast<double>(C);
    for (int it = 0; it < iters; ++it) {
        for (std::size_t c = 0; c < C; ++c) {
            double s = 0.0;
            for (std::size_t i = 0; i < B; ++i) s += M.data[i * C + c];
            if (s > 0.0) {
                const double f = col_target / s;
                for (std::size_t i = 0; i < B; ++i) M.data[i * C + c] *= f;
            }
        }
        for (std::size_t i = 0; i < B; ++i) {
            double s = 0.0;
            for (std::size_t c = 0; c < C; ++c) s += M.data[i * C + c];
            const double f = 1.0 / s;
            for (std::size_t c = 0; c < C; ++c) M.data[i * C + c] *= f;
        }
    }
    for (std::size_t i = 0; i < B; ++i) {
        double s = 0.0;
        for (std::size_t c = 0; c < C; ++c) s += M.data[i * C + c];
        const double f = 1.0 / s;
        for (std::size_t c = 0; c < C; ++c) M.data[i * C + c] *= f;
    }
    return M;
}

/// P_ic = log softmax_c(w_i . e_c / beta); unnormalized dot products.
inline diff::Tensor log_assign(const diff::Tensor& W, const diff::Tensor& E, double beta) {
    using namespace diff;
    if (W.rank() != 2 || E.rank() != 2 || W.shape[1] != E.shape[1])
        throw GraphError("log_assign: W " + shape_str(W.shape) + " vs E " + shape_str(E.shape));
    const std::size_t B = W.shape[0], C = E.shape[0], d = W.shape[1];
    Tensor P({B, C});
    std::vector<double> scores(C);
    for (std::size_t i = 0; i < B; ++i) {
        const double* wi = W.data.data() + i * d;
        for (std::size_t c = 0; c < C; ++c)
            scores[c] = kernels::dot(wi, E.data.data() + c * d, d) / beta;
        kernels::log_softmax_row(scores.data(), P.data.data() + i * C, C);
    }
    return P;
}

/// L = -(1/B) sum_i sum_c Qt_ic P_ic.
inline double clustering_loss(const diff::Tensor& Qt, const diff::Tensor& P) {
    using namespace diff;
    if (Qt.shape != P.shape) throw GraphError("clustering_loss: shape mismatch");
    const std::size_t B = Qt.shape[0];
    double loss = 0.0;
    for (std::size_t i = 0; i < Qt.numel(); ++i) loss -= Qt.data[i] * P.data[i];
    return loss / static_cast<double>(B);
}

/// Graph route for the clustering loss: per-view w nodes are scored against
/// the centroid parameter, log-softmaxed, and weighted by the fixed Sinkhorn
/// targets. Gradients flow through P into theta/psi/phi and E, never into
/// the targets.
inline diff::NodeId clustering_loss_node(diff::Graph& g, const std::vector<diff::NodeId>& w_nodes,
                                         const diff::Tensor& Qt, double beta) {
    using namespace diff;
    if (w_nodes.empty()) throw GraphError("clustering_loss_node: empty batch");
    if (Qt.shape[0] != w_nodes.size()) throw GraphError("clustering_loss_node: target rows != views");
    const std::size_t C = Qt.shape[1];
    NodeId E = g.param("clust.E");
    std::vector<NodeId> terms;
    terms.reserve(w_nodes.size());
    for (std::size_t i = 0; i < w_nodes.size(); ++i) {
        NodeId scores = g.scale(g.affine(w_nodes[i], E), 1.0 / beta);
        NodeId p = g.log_softmax(scores);
        Tensor qrow({C});
        std::copy_n(Qt.data.begin() + i * C, C, qrow.data.begin());
        terms.push_back(g.cross_entropy_rows(g.constant(std::move(qrow)), p));
    }
    return g.scale(g.add_n(terms), 1.0 / static_cast<double>(w_nodes.size()));
}

}  // namespace ctrl
