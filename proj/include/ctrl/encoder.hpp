#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "ctrl/env.hpp"
#include "ctrl/graph.hpp"
#include "ctrl/rng.hpp"

namespace ctrl {

/// Belief-state encoder: a dense 3x3 conv, a strided 3x3 conv, and a linear
/// map to a 64-dimensional embedding, plus per-action FiLM tables. The
/// linear layer reads the strided feature map together with per-channel
/// first- and second-moment pools of the dense layer; the pooled moments
/// carry spatial statistics (local correlation textures) that survive a
/// randomly initialized readout, which flattening alone does not.
struct EncoderConfig {
    diff::Shape obs_shape;       // [C,H,W]
    std::size_t num_actions = 0;
    std::size_t embed_dim = 64;
    std::size_t conv1_channels = 16;
    std::size_t conv2_channels = 32;
    std::size_t kernel = 3;
    int conv1_stride = 1;
    int conv2_stride = 4;

    std::size_t conv1_h() const { return (obs_shape[1] - kernel) / static_cast<std::size_t>(conv1_stride) + 1; }
    std::size_t conv1_w() const { return (obs_shape[2] - kernel) / static_cast<std::size_t>(conv1_stride) + 1; }
    std::size_t conv2_h() const { return (conv1_h() - kernel) / static_cast<std::size_t>(conv2_stride) + 1; }
    std::size_t conv2_w() const { return (conv1_w() - kernel) / static_cast<std::size_t>(conv2_stride) + 1; }
    std::size_t flat_dim() const { return conv2_channels * conv2_h() * conv2_w(); }
    std::size_t fc_in_dim() const { return flat_dim() + 2 * conv1_channels; }
};

inline void init_encoder_params(diff::ParameterStore& store, const EncoderConfig& cfg, Rng& rng) {
    using diff::Tensor;
    const std::size_t cin = cfg.obs_shape[0];
    const double s1 = std::sqrt(2.0 / static_cast<double>(cin * cfg.kernel * cfg.kernel));
    store.add("phi.conv1.w", Tensor::randn({cfg.conv1_channels, cin, cfg.kernel, cfg.kernel}, rng, s1));
    store.add("phi.conv1.b", Tensor::zeros({cfg.conv1_channels}));
    const double s2 = std::sqrt(2.0 / static_cast<double>(cfg.conv1_channels * cfg.kernel * cfg.kernel));
    store.add("phi.conv2.w", Tensor::randn({cfg.conv2_channels, cfg.conv1_channels, cfg.kernel, cfg.kernel}, rng, s2));
    store.add("phi.conv2.b", Tensor::zeros({cfg.conv2_channels}));
    const double s3 = std::sqrt(2.0 / static_cast<double>(cfg.fc_in_dim()));
    store.add("phi.fc.w", Tensor::randn({cfg.embed_dim, cfg.fc_in_dim()}, rng, s3));
    store.add("phi.fc.b", Tensor::zeros({cfg.embed_dim}));
    // FiLM starts near the identity with enough noise to tell actions apart
    Tensor gamma = Tensor::randn({cfg.num_actions, cfg.embed_dim}, rng, 0.1);
    for (double& g : gamma.data) g += 1.0;
    store.add("film.gamma", std::move(gamma));
    store.add("film.beta", Tensor::randn({cfg.num_actions, cfg.embed_dim}, rng, 0.1));
}

/// Deterministic embedding of a single observation (inference path; shares
/// kernels with the graph path bit-for-bit).
inline diff::Tensor encode_observation(const diff::ParameterStore& store, const EncoderConfig& cfg,
                                       const diff::Tensor& obs) {
    using namespace diff;
    if (obs.shape != cfg.obs_shape)
        throw GraphError("encode_observation: observation shape " + shape_str(obs.shape) +
                         " does not match " + shape_str(cfg.obs_shape));
    Tensor h1({cfg.conv1_channels, cfg.conv1_h(), cfg.conv1_w()});
    kernels::conv2d(obs, store.value("phi.conv1.w"), store.value("phi.conv1.b"), cfg.conv1_stride, h1);
    Tensor r1 = h1;
    for (double& x : r1.data) x = x > 0.0 ? x : 0.0;
    Tensor h2({cfg.conv2_channels, cfg.conv2_h(), cfg.conv2_w()});
    kernels::conv2d(r1, store.value("phi.conv2.w"), store.value("phi.conv2.b"), cfg.conv2_stride, h2);
    for (double& x : h2.data) x = x > 0.0 ? x : 0.0;

    Tensor fc_in({cfg.fc_in_dim()});
    std::copy(h2.data.begin(), h2.data.end(), fc_in.data.begin());
    const std::size_t plane = cfg.conv1_h() * cfg.conv1_w();
    for (std::size_t c = 0; c < cfg.conv1_channels; ++c) {
        double mean = 0.0, second = 0.0;
        for (std::size_t i = 0; i < plane; ++i) {
            mean += r1.data[c * plane + i];
            second += h1.data[c * plane + i] * h1.data[c * plane + i];
        }
        fc_in.data[cfg.flat_dim() + c] = mean / static_cast<double>(plane);
        fc_in.data[cfg.flat_dim() + cfg.conv1_channels + c] = second / static_cast<double>(plane);
    }
    Tensor out({cfg.embed_dim});
    kernels::affine(fc_in, store.value("phi.fc.w"), &store.value("phi.fc.b"), out);
    return out;
}

/// gamma_a * embedding + beta_a.
inline diff::Tensor film_condition(const diff::ParameterStore& store, const diff::Tensor& embedding,
                                   int action) {
    using namespace diff;
    const Tensor& gamma = store.value("film.gamma");
    const Tensor& beta = store.value("film.beta");
    if (action < 0 || static_cast<std::size_t>(action) >= gamma.shape[0])
        throw std::out_of_range("film_condition: action " + std::to_string(action) + " out of range");
    const std::size_t d = gamma.shape[1];
    Tensor out({d});
    const std::size_t off = static_cast<std::size_t>(action) * d;
    for (std::size_t i = 0; i < d; ++i)
        out.data[i] = gamma.data[off + i] * embedding.data[i] + beta.data[off + i];
    return out;
}

/// Graph twin of encode_observation.
inline diff::NodeId encode_observation_node(diff::Graph& g, const EncoderConfig& cfg, diff::NodeId obs) {
    using namespace diff;
    NodeId h1 = g.conv2d(obs, g.param("phi.conv1.w"), g.param("phi.conv1.b"), cfg.conv1_stride);
    NodeId r1 = g.relu(h1);
    NodeId h2 = g.relu(g.conv2d(r1, g.param("phi.conv2.w"), g.param("phi.conv2.b"), cfg.conv2_stride));
    NodeId flat = g.reshape(h2, {cfg.flat_dim()});
    NodeId mean1 = g.channel_mean(r1);
    NodeId second1 = g.channel_mean(g.mul(h1, h1));
    NodeId fc_in = g.concat({flat, mean1, second1});
    return g.affine(fc_in, g.param("phi.fc.w"), g.param("phi.fc.b"));
}

inline diff::NodeId film_node(diff::Graph& g, diff::NodeId embedding, int action) {
    using namespace diff;
    NodeId gamma = g.gather_row(g.param("film.gamma"), static_cast<std::size_t>(action));
    NodeId beta = g.gather_row(g.param("film.beta"), static_cast<std::size_t>(action));
    return g.add(g.mul(gamma, embedding), beta);
}

enum class ViewMode { Sampled, Consecutive };

struct ViewOptions {
    std::size_t T = 2;
    ViewMode mode = ViewMode::Sampled;
    bool use_film = true;  // false under the no-action ablation
};

/// Reward-free trajectory view: concatenated (FiLM-conditioned) embeddings
/// of T sampled keypoints.
struct TrajectoryView {
    diff::Tensor u;
    std::vector<std::size_t> source_indices;
    std::size_t trajectory_id = 0;
};

/// Keypoints for a view: either a uniform T-subset (sorted) or a uniform
/// consecutive window.
inline std::vector<std::size_t> sample_view_indices(std::size_t length, std::size_t T, ViewMode mode,
                                                    Rng& rng) {
    if (T == 0 || T > length)
        throw std::invalid_argument("sample_view_indices: need 0 < T <= trajectory length, got T=" +
                                    std::to_string(T) + " length=" + std::to_string(length));
    if (mode == ViewMode::Consecutive) {
        const std::size_t start = static_cast<std::size_t>(rng.below(length - T + 1));
        std::vector<std::size_t> idx(T);
        for (std::size_t i = 0; i < T; ++i) idx[i] = start + i;
        return idx;
    }
    return rng.sample_without_replacement(length, T);
}

inline diff::Tensor view_from_indices(const diff::ParameterStore& store, const EncoderConfig& cfg,
                                      const envs::Trajectory& traj,
                                      const std::vector<std::size_t>& indices, bool use_film) {
    diff::Tensor u({indices.size() * cfg.embed_dim});
    std::size_t off = 0;
    for (std::size_t idx : indices) {
        diff::Tensor e = encode_observation(store, cfg, traj.observations[idx]);
        if (use_film) e = film_condition(store, e, traj.actions[idx]);
        std::copy(e.data.begin(), e.data.end(), u.data.begin() + off);
        off += cfg.embed_dim;
    }
    return u;
}

inline TrajectoryView build_view(const diff::ParameterStore& store, const EncoderConfig& cfg,
                                 const envs::Trajectory& traj, const ViewOptions& opt, Rng& rng,
                                 std::size_t trajectory_id = 0) {
    TrajectoryView view;
    view.trajectory_id = trajectory_id;
    view.source_indices = sample_view_indices(traj.length(), opt.T, opt.mode, rng);
    view.u = view_from_indices(store, cfg, traj, view.source_indices, opt.use_film);
    return view;
}

/// Graph twin of view_from_indices; observations enter as constants.
inline diff::NodeId build_view_node(diff::Graph& g, const EncoderConfig& cfg,
                                    const envs::Trajectory& traj,
                                    const std::vector<std::size_t>& indices, bool use_film) {
    std::vector<diff::NodeId> parts;
    parts.reserve(indices.size());
    for (std::size_t idx : indices) {
        diff::NodeId obs = g.constant(traj.observations[idx]);
        diff::NodeId e = encode_observation_node(g, cfg, obs);
        if (use_film) e = film_node(g, e, traj.actions[idx]);
        parts.push_back(e);
    }
    return g.concat(parts);
}

}  // namespace ctrl
