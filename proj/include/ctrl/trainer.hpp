#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "ctrl/analysis.hpp"
#include "ctrl/checkpoint.hpp"
#include "ctrl/clustering.hpp"
#include "ctrl/config.hpp"
#include "ctrl/encoder.hpp"
#include "ctrl/gridworld.hpp"
#include "ctrl/ising.hpp"
#include "ctrl/metrics.hpp"
#include "ctrl/mining.hpp"
#include "ctrl/optim.hpp"
#include "ctrl/plot.hpp"
#include "ctrl/rl.hpp"

namespace ctrl {

inline std::unique_ptr<envs::Env> make_train_env(const ExperimentConfig& cfg, std::uint64_t instance_seed) {
    if (cfg.env == "ising") {
        envs::CompositeIsingOptions opt;
        opt.episode_length = cfg.episode_length;
        return std::make_unique<envs::CompositeIsingTask>(instance_seed, opt);
    }
    envs::GridworldOptions opt;
    opt.seed_lo = cfg.train_seed_lo;
    opt.seed_hi = cfg.train_seed_hi;
    opt.max_steps = cfg.max_steps;
    return std::make_unique<envs::GridworldEnv>(instance_seed, opt);
}

/// Episode-bounded trajectories of at least min_len steps, in storage order.
inline std::vector<envs::Trajectory> batch_segments(const RolloutBatch& batch, std::size_t min_len) {
    std::vector<envs::Trajectory> out;
    for (std::size_t e = 0; e < batch.num_envs; ++e) {
        for (const auto& [start, len] : batch.segments_of_env(e)) {
            if (len < min_len) continue;
            envs::Trajectory traj;
            traj.observations.reserve(len);
            traj.actions.reserve(len);
            traj.rewards.reserve(len);
            for (std::size_t k = 0; k < len; ++k) {
                traj.observations.push_back(batch.observations[start + k]);
                traj.actions.push_back(batch.actions[start + k]);
                traj.rewards.push_back(batch.rewards[start + k]);
            }
            out.push_back(std::move(traj));
        }
    }
    return out;
}

struct CtrlPhaseResult {
    std::size_t views = 0;
    double l_clust = 0.0;
    double l_pred = 0.0;
    double total = 0.0;
    bool updated = false;
    bool has_silhouette = false;
    double silhouette = 0.0;
    std::vector<std::size_t> labels;
    std::vector<std::vector<std::size_t>> view_indices;
    diff::Tensor v_rows;  // normalized psi_clust outputs, B x latent
    std::size_t anchors = 0;
    std::size_t mined = 0;
    std::size_t occupied_clusters = 0;
    std::vector<std::size_t> occupancy;
};

struct EpochStats {
    CtrlPhaseResult ctrl;
    PpoStats ppo;
    double mean_train_return = 0.0;
    std::size_t episodes = 0;
    std::uint64_t env_steps = 0;
};

/// Owns parameters, optimizers and envs; runs the per-epoch loop: collect a
/// batch under the fixed snapshot, update the representation (clustering +
/// mining losses), then update the policy/value heads with PPO on the
/// snapshot features.
class Trainer {
  public:
    explicit Trainer(ExperimentConfig cfg) : cfg_(std::move(cfg)) {
        validate_config(cfg_);
        Rng root(cfg_.seed);
        {
            auto probe = make_train_env(cfg_, 0);
            enc_cfg_.obs_shape = probe->obs_shape();
            enc_cfg_.num_actions = probe->num_actions();
        }
        clu_cfg_.num_clusters = cfg_.num_clusters;
        clu_cfg_.temperature = cfg_.cluster_temperature;
        clu_cfg_.sinkhorn_iters = cfg_.sinkhorn_iters;
        clu_cfg_.view_dim = cfg_.view_timesteps * enc_cfg_.embed_dim;

        Rng init_rng = root.fork(1);
        init_encoder_params(store_, enc_cfg_, init_rng);
        init_cluster_params(store_, clu_cfg_, init_rng);
        init_pred_params(store_, clu_cfg_, init_rng);
        init_head_params(store_, enc_cfg_.num_actions, enc_cfg_.embed_dim, init_rng);

        adam_ctrl_ = std::make_unique<Adam>(cfg_.learning_rate);
        adam_rl_ = std::make_unique<Adam>(cfg_.learning_rate);

        slots_.resize(cfg_.num_envs);
        for (std::size_t e = 0; e < cfg_.num_envs; ++e) {
            const std::uint64_t instance_seed = root.fork(1000 + e).next_u64();
            slots_[e].env = make_train_env(cfg_, instance_seed);
            slots_[e].action_rng = root.fork(2000 + e);
        }
        view_rng_ = root.fork(3);
        mine_rng_ = root.fork(4);
        shuffle_rng_ = root.fork(5);
    }

    const ExperimentConfig& config() const { return cfg_; }
    const EncoderConfig& encoder_config() const { return enc_cfg_; }
    const ClusterConfig& cluster_config() const { return clu_cfg_; }
    diff::ParameterStore& store() { return store_; }
    const diff::ParameterStore& store() const { return store_; }

    /// Representation update over one batch. With update=false the losses
    /// and clustering statistics are computed without touching parameters.
    CtrlPhaseResult ctrl_phase(const RolloutBatch& batch, bool update) {
        CtrlPhaseResult res;
        if (cfg_.no_cluster && cfg_.no_pred) return res;  // encoder receives no signal

        const std::vector<envs::Trajectory> segments = batch_segments(batch, cfg_.view_timesteps);
        const std::size_t B = segments.size();
        if (B < 2) return res;
        res.views = B;

        ViewOptions vopt;
        vopt.T = cfg_.view_timesteps;
        vopt.mode = cfg_.consecutive_t ? ViewMode::Consecutive : ViewMode::Sampled;
        vopt.use_film = !cfg_.no_action;

        res.view_indices.resize(B);
        std::vector<diff::Tensor> u_values(B);
        diff::Tensor V({B, clu_cfg_.latent_dim});
        for (std::size_t i = 0; i < B; ++i) {
            res.view_indices[i] = sample_view_indices(segments[i].length(), vopt.T, vopt.mode, view_rng_);
            u_values[i] = view_from_indices(store_, enc_cfg_, segments[i], res.view_indices[i], vopt.use_film);
            const diff::Tensor v = mlp_forward(store_, "clust.psi", u_values[i]);
            std::copy(v.data.begin(), v.data.end(), V.data.begin() + i * clu_cfg_.latent_dim);
        }

        const diff::Tensor& E = store_.value("clust.E");
        const diff::Tensor Q = soft_assign(V, E, clu_cfg_.temperature);
        diff::Tensor Qt;
        if (cfg_.no_cluster) {
            res.labels = hard_assign(Q);  // raw cosine scores, no balancing
        } else {
            Qt = sinkhorn_normalize(Q, clu_cfg_.sinkhorn_iters);
            res.labels = hard_assign(Qt);
        }

        res.occupancy = cluster_occupancy(res.labels, clu_cfg_.num_clusters);
        for (std::size_t c : res.occupancy) res.occupied_clusters += c > 0 ? 1 : 0;

        // normalized rows give silhouette the same geometry the assignment saw
        res.v_rows = V;
        for (std::size_t i = 0; i < B; ++i) {
            double* row = res.v_rows.data.data() + i * clu_cfg_.latent_dim;
            const double nrm = diff::kernels::l2_norm(row, clu_cfg_.latent_dim);
            if (nrm > 0.0)
                for (std::size_t k = 0; k < clu_cfg_.latent_dim; ++k) row[k] /= nrm;
        }
        if (res.occupied_clusters >= 2) {
            res.silhouette = analysis::silhouette(res.v_rows, res.labels);
            res.has_silhouette = true;
        }

        MiningPlan plan;
        if (!cfg_.no_pred) {
            const diff::Tensor D = centroid_distances(E);
            const std::size_t anchors = cfg_.n_anchors ? cfg_.n_anchors : std::max<std::size_t>(1, B / 4);
            plan = plan_mining(res.labels, D, anchors, cfg_.knn, mine_rng_);
            res.anchors = plan.anchors.size();
            res.mined = plan.total_mined();
        }

        diff::Graph g(&store_);
        std::vector<diff::NodeId> u_nodes(B);
        for (std::size_t i = 0; i < B; ++i)
            u_nodes[i] = build_view_node(g, enc_cfg_, segments[i], res.view_indices[i], vopt.use_film);

        diff::NodeId lc = diff::kNoNode, lp = diff::kNoNode;
        if (!cfg_.no_cluster) {
            std::vector<diff::NodeId> w_nodes(B);
            for (std::size_t i = 0; i < B; ++i)
                w_nodes[i] = mlp_node(g, "clust.theta", mlp_node(g, "clust.psi", u_nodes[i]));
            lc = clustering_loss_node(g, w_nodes, Qt, clu_cfg_.temperature);
        }
        if (!cfg_.no_pred) lp = prediction_loss_node(g, plan, u_nodes);
        const diff::NodeId total = (lc != diff::kNoNode && lp != diff::kNoNode) ? g.add(lc, lp)
                                   : (lc != diff::kNoNode ? lc : lp);
        g.evaluate();
        res.l_clust = lc != diff::kNoNode ? g.scalar_value(lc) : 0.0;
        res.l_pred = lp != diff::kNoNode ? g.scalar_value(lp) : 0.0;
        res.total = g.scalar_value(total);

        if (update) {
            g.backward(total);
            const std::vector<std::string> touched = g.touched_params();
            adam_ctrl_->step(store_, touched);
            if (std::find(touched.begin(), touched.end(), "clust.E") != touched.end())
                renormalize_centroid_rows(store_.value("clust.E"));
            res.updated = true;
        }
        return res;
    }

    EpochStats run_epoch() {
        const RolloutBatch batch = collect_rollouts(slots_, store_, enc_cfg_, cfg_.n_timesteps, cfg_.serial);
        EpochStats stats;
        stats.ctrl = ctrl_phase(batch, true);

        PpoConfig pcfg;
        pcfg.clip = cfg_.clip_range;
        pcfg.entropy_coef = cfg_.entropy_coef;
        pcfg.gamma = cfg_.gamma;
        pcfg.lambda = cfg_.lambda;
        pcfg.minibatches = cfg_.minibatches;
        stats.ppo = ppo_update(batch, store_, *adam_rl_, pcfg, shuffle_rng_);

        stats.episodes = batch.episode_returns.size();
        if (stats.episodes > 0) {
            double sum = 0.0;
            for (double r : batch.episode_returns) sum += r;
            stats.mean_train_return = sum / static_cast<double>(stats.episodes);
        }
        epochs_done_ += 1;
        env_steps_ += batch.size();
        stats.env_steps = env_steps_;
        return stats;
    }

    /// Greedy policy rollouts on held-out tasks. The eval seed range must
    /// not touch the training range.
    struct EvalReport {
        double mean_return = 0.0;
        double std_return = 0.0;
        std::size_t episodes = 0;
        double mean_length = 0.0;
    };

    EvalReport evaluate(std::uint64_t eval_lo, std::uint64_t eval_hi, std::size_t episodes_per_level) const {
        if (eval_lo <= cfg_.train_seed_hi && cfg_.train_seed_lo <= eval_hi)
            throw ConfigError("eval seeds [" + std::to_string(eval_lo) + "," + std::to_string(eval_hi) +
                              "] overlap train seeds [" + std::to_string(cfg_.train_seed_lo) + "," +
                              std::to_string(cfg_.train_seed_hi) + "]");
        return evaluate_store(cfg_, store_, enc_cfg_, eval_lo, eval_hi, episodes_per_level);
    }

    static EvalReport evaluate_store(const ExperimentConfig& cfg, const diff::ParameterStore& store,
                                     const EncoderConfig& enc_cfg, std::uint64_t eval_lo,
                                     std::uint64_t eval_hi, std::size_t episodes_per_level) {
        std::vector<double> returns;
        std::vector<std::size_t> lengths;
        for (std::uint64_t level = eval_lo; level <= eval_hi; ++level) {
            for (std::size_t ep = 0; ep < episodes_per_level; ++ep) {
                std::unique_ptr<envs::Env> env;
                if (cfg.env == "ising") {
                    envs::CompositeIsingOptions opt;
                    opt.episode_length = cfg.episode_length;
                    env = std::make_unique<envs::CompositeIsingTask>(0xE5A1000000000000ULL ^ level, opt);
                    for (std::size_t skip = 0; skip < ep; ++skip) env->reset();
                } else {
                    envs::GridworldOptions opt;
                    opt.seed_lo = level;
                    opt.seed_hi = level;
                    opt.max_steps = cfg.max_steps;
                    env = std::make_unique<envs::GridworldEnv>(level, opt);
                }
                diff::Tensor obs = env->reset();
                double ret = 0.0;
                std::size_t len = 0;
                for (;;) {
                    const diff::Tensor f = encode_observation(store, enc_cfg, obs);
                    const PolicyOutput pol = policy_forward(store, f);
                    const envs::StepResult sr = env->step(greedy_action(pol.logits));
                    ret += sr.reward;
                    len += 1;
                    if (sr.done) break;
                    obs = sr.observation;
                }
                returns.push_back(ret);
                lengths.push_back(len);
            }
        }
        EvalReport report;
        report.episodes = returns.size();
        double sum = 0.0;
        for (double r : returns) sum += r;
        report.mean_return = sum / static_cast<double>(returns.size());
        double var = 0.0;
        for (double r : returns) var += (r - report.mean_return) * (r - report.mean_return);
        report.std_return = std::sqrt(var / static_cast<double>(returns.size()));
        double lsum = 0.0;
        for (std::size_t l : lengths) lsum += static_cast<double>(l);
        report.mean_length = lsum / static_cast<double>(lengths.size());
        return report;
    }

    std::uint64_t env_steps() const { return env_steps_; }
    std::size_t epochs_done() const { return epochs_done_; }

    /// Fresh batch, losses and clustering stats, no parameter updates.
    CtrlPhaseResult probe_ctrl() {
        const RolloutBatch batch = collect_rollouts(slots_, store_, enc_cfg_, cfg_.n_timesteps, cfg_.serial);
        return ctrl_phase(batch, false);
    }

  private:
    ExperimentConfig cfg_;
    EncoderConfig enc_cfg_;
    ClusterConfig clu_cfg_;
    diff::ParameterStore store_;
    std::unique_ptr<Adam> adam_ctrl_, adam_rl_;
    std::vector<EnvSlot> slots_;
    Rng view_rng_{0}, mine_rng_{0}, shuffle_rng_{0};
    std::uint64_t env_steps_ = 0;
    std::size_t epochs_done_ = 0;
};

struct RunArtifacts {
    std::string output_dir;
    std::string metrics_path;
    std::string config_snapshot_path;
    std::string summary_path;
    std::string cluster_stats_path;
    std::string final_checkpoint_path;
    std::vector<std::string> checkpoint_paths;
    std::vector<std::string> plot_paths;
    double final_mean_train_return = 0.0;
    std::size_t epochs = 0;
};

/// Full training run with artifacts on disk.
inline RunArtifacts run_train(const ExperimentConfig& cfg) {
    validate_config(cfg);
    namespace fs = std::filesystem;
    RunArtifacts art;
    art.output_dir = cfg.output_dir;
    fs::create_directories(cfg.output_dir);

    art.config_snapshot_path = cfg.output_dir + "/config.txt";
    {
        std::ofstream os(art.config_snapshot_path, std::ios::binary);
        os << canonical_config_text(cfg);
    }

    Trainer trainer(cfg);
    art.metrics_path = cfg.output_dir + "/metrics.csv";
    MetricsWriter metrics(art.metrics_path);

    art.cluster_stats_path = cfg.output_dir + "/cluster_stats.csv";
    std::ofstream cluster_stats(art.cluster_stats_path, std::ios::binary);
    cluster_stats << "epoch,views,anchors,mined,occupied_clusters";
    for (std::size_t c = 0; c < cfg.num_clusters; ++c) cluster_stats << ",occ_" << c;
    cluster_stats << "\n";

    const std::size_t total_epochs =
        std::max<std::size_t>(1, static_cast<std::size_t>((cfg.total_env_steps + cfg.n_samples - 1) / cfg.n_samples));
    double last_return = 0.0;
    for (std::size_t epoch = 1; epoch <= total_epochs; ++epoch) {
        const EpochStats stats = trainer.run_epoch();
        MetricsRow row;
        row.epoch = epoch;
        row.env_steps = stats.env_steps;
        row.mean_train_return = stats.mean_train_return;
        row.l_clust = stats.ctrl.l_clust;
        row.l_pred = stats.ctrl.l_pred;
        row.l_rl = stats.ppo.total_loss;
        row.entropy = stats.ppo.entropy;
        if (cfg.silhouette_every > 0 && epoch % cfg.silhouette_every == 0 && stats.ctrl.has_silhouette) {
            row.has_silhouette = true;
            row.silhouette = stats.ctrl.silhouette;
        }
        metrics.append(row);

        cluster_stats << epoch << ',' << stats.ctrl.views << ',' << stats.ctrl.anchors << ','
                      << stats.ctrl.mined << ',' << stats.ctrl.occupied_clusters;
        std::vector<std::size_t> occ = stats.ctrl.occupancy;
        occ.resize(cfg.num_clusters, 0);
        for (std::size_t c = 0; c < cfg.num_clusters; ++c) cluster_stats << ',' << occ[c];
        cluster_stats << "\n";
        cluster_stats.flush();

        last_return = stats.mean_train_return;
        if (cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0) {
            const std::string path = cfg.output_dir + "/checkpoint_" + std::to_string(epoch) + ".bin";
            save_checkpoint(path, trainer.store());
            art.checkpoint_paths.push_back(path);
        }
    }

    art.final_checkpoint_path = cfg.output_dir + "/checkpoint_final.bin";
    save_checkpoint(art.final_checkpoint_path, trainer.store());
    art.checkpoint_paths.push_back(art.final_checkpoint_path);

    art.summary_path = cfg.output_dir + "/summary.txt";
    {
        std::ofstream os(art.summary_path, std::ios::binary);
        os << "run summary\n===========\n";
        os << "env: " << cfg.env << "\nseed: " << cfg.seed << "\n";
        os << "epochs: " << total_epochs << "\nenv steps: " << trainer.env_steps() << "\n";
        os << "final mean train return: " << format_metric(last_return) << "\n";
        os << "ablations: consecutive_t=" << cfg.consecutive_t << " no_action=" << cfg.no_action
           << " no_cluster=" << cfg.no_cluster << " no_pred=" << cfg.no_pred << "\n";
    }
    art.plot_paths = emit_plots(art.metrics_path, cfg.output_dir + "/plots");
    art.final_mean_train_return = last_return;
    art.epochs = total_epochs;
    return art;
}

/// Greedy evaluation of a saved checkpoint on held-out seeds.
inline Trainer::EvalReport eval_zero_shot(const ExperimentConfig& cfg, const std::string& checkpoint_path,
                                          std::uint64_t eval_lo, std::uint64_t eval_hi,
                                          std::size_t episodes_per_level) {
    validate_config(cfg);
    if (eval_lo <= cfg.train_seed_hi && cfg.train_seed_lo <= eval_hi)
        throw ConfigError("eval seeds overlap train seeds");
    diff::ParameterStore store;
    load_checkpoint(checkpoint_path, store);
    EncoderConfig enc_cfg;
    {
        auto probe = make_train_env(cfg, 0);
        enc_cfg.obs_shape = probe->obs_shape();
        enc_cfg.num_actions = probe->num_actions();
    }
    return Trainer::evaluate_store(cfg, store, enc_cfg, eval_lo, eval_hi, episodes_per_level);
}

struct IsingSweepCell {
    std::size_t num_clusters = 0;
    std::uint64_t seed = 0;
    double mean_return = 0.0;  // normalized per step and per site
    double silhouette = 0.0;
};

struct IsingSweepResult {
    std::vector<std::size_t> e_values;
    std::vector<std::uint64_t> seeds;
    std::vector<IsingSweepCell> cells;  // seed-major, then E in order

    const IsingSweepCell& cell(std::size_t seed_idx, std::size_t e_idx) const {
        return cells[seed_idx * e_values.size() + e_idx];
    }
};

/// Normalized greedy return on fresh task instances: mean per-step reward
/// divided by the lattice site count, so values land in [-1, 0].
inline double ising_normalized_return(const ExperimentConfig& cfg, const diff::ParameterStore& store,
                                      const EncoderConfig& enc_cfg, std::size_t episodes,
                                      std::uint64_t salt) {
    envs::CompositeIsingOptions opt;
    opt.episode_length = cfg.episode_length;
    double total = 0.0;
    for (std::size_t ep = 0; ep < episodes; ++ep) {
        envs::CompositeIsingTask env(0xBEEF000000000000ULL ^ (salt * 7919 + ep), opt);
        diff::Tensor obs = env.reset();
        double ret = 0.0;
        std::size_t len = 0;
        for (;;) {
            const diff::Tensor f = encode_observation(store, enc_cfg, obs);
            const PolicyOutput pol = policy_forward(store, f);
            const envs::StepResult sr = env.step(greedy_action(pol.logits));
            ret += sr.reward;
            len += 1;
            if (sr.done) break;
            obs = sr.observation;
        }
        total += ret / (static_cast<double>(len) * static_cast<double>(envs::kLatticeSites));
    }
    return total / static_cast<double>(episodes);
}

/// Trains one composite-Ising run per (seed, cluster count) and records the
/// final normalized return plus a post-training silhouette probe.
inline IsingSweepResult ising_cluster_sweep(const ExperimentConfig& base,
                                            const std::vector<std::size_t>& e_values,
                                            const std::vector<std::uint64_t>& seeds,
                                            std::size_t eval_episodes = 20) {
    IsingSweepResult result;
    result.e_values = e_values;
    result.seeds = seeds;
    for (std::uint64_t seed : seeds) {
        for (std::size_t E : e_values) {
            ExperimentConfig cfg = base;
            cfg.env = "ising";
            cfg.seed = seed;
            cfg.num_clusters = E;
            cfg.knn = std::min<std::size_t>(base.knn, E - 1);
            validate_config(cfg);
            Trainer trainer(cfg);
            const std::size_t total_epochs = std::max<std::size_t>(
                1, static_cast<std::size_t>((cfg.total_env_steps + cfg.n_samples - 1) / cfg.n_samples));
            for (std::size_t epoch = 0; epoch < total_epochs; ++epoch) trainer.run_epoch();

            IsingSweepCell cell;
            cell.num_clusters = E;
            cell.seed = seed;
            cell.mean_return = ising_normalized_return(cfg, trainer.store(), trainer.encoder_config(),
                                                       eval_episodes, seed * 131 + E);
            const CtrlPhaseResult probe = trainer.probe_ctrl();
            cell.silhouette = probe.has_silhouette ? probe.silhouette : 0.0;
            result.cells.push_back(cell);
        }
    }
    return result;
}

inline void write_sweep_csv(const IsingSweepResult& result, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("sweep: cannot open '" + path + "'");
    os << "seed,num_clusters,mean_return,silhouette,silhouette_change\n";
    for (std::size_t s = 0; s < result.seeds.size(); ++s) {
        for (std::size_t e = 0; e < result.e_values.size(); ++e) {
            const IsingSweepCell& cell = result.cell(s, e);
            os << cell.seed << ',' << cell.num_clusters << ',' << format_metric(cell.mean_return)
               << ',' << format_metric(cell.silhouette) << ',';
            if (e > 0) os << format_metric(result.cell(s, e - 1).silhouette - cell.silhouette);
            os << "\n";
        }
    }
}

}  // namespace ctrl
