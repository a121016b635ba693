#pragma once

#include <cmath>
#include <memory>
#include <stdexcept>
#include <thread>
#include <vector>

#include "ctrl/encoder.hpp"
#include "ctrl/env.hpp"
#include "ctrl/graph.hpp"
#include "ctrl/optim.hpp"
#include "ctrl/rng.hpp"

namespace ctrl {

struct GaeResult {
    std::vector<double> advantages;
    std::vector<double> returns;
};

/// GAE(lambda) over one trajectory strip. values must carry one extra entry:
/// the value of the state after the last step (0 or a bootstrap; it is
/// masked wherever dones[t] is set).
inline GaeResult compute_gae(const std::vector<double>& rewards, const std::vector<double>& values,
                             const std::vector<std::uint8_t>& dones, double gamma, double lambda) {
    const std::size_t T = rewards.size();
    if (values.size() != T + 1 || dones.size() != T)
        throw std::invalid_argument("compute_gae: need |rewards|=T, |values|=T+1, |dones|=T");
    GaeResult out;
    out.advantages.resize(T);
    out.returns.resize(T);
    double next_adv = 0.0;
    for (std::size_t t = T; t-- > 0;) {
        const double mask = dones[t] ? 0.0 : 1.0;
        const double delta = rewards[t] + gamma * values[t + 1] * mask - values[t];
        next_adv = delta + gamma * lambda * mask * next_adv;
        out.advantages[t] = next_adv;
        out.returns[t] = next_adv + values[t];
    }
    return out;
}

inline void init_head_params(diff::ParameterStore& store, std::size_t num_actions,
                             std::size_t embed_dim, Rng& rng) {
    using diff::Tensor;
    store.add("pi.w", Tensor::randn({num_actions, embed_dim}, rng, 0.01));
    store.add("pi.b", Tensor::zeros({num_actions}));
    store.add("v.w", Tensor::randn({1, embed_dim}, rng, 0.01));
    store.add("v.b", Tensor::zeros({1}));
}

struct PolicyOutput {
    std::vector<double> logits;
    std::vector<double> log_probs;
    double value = 0.0;
};

inline PolicyOutput policy_forward(const diff::ParameterStore& store, const diff::Tensor& features) {
    using namespace diff;
    const Tensor& pw = store.value("pi.w");
    PolicyOutput out;
    Tensor logits({pw.shape[0]});
    kernels::affine(features, pw, &store.value("pi.b"), logits);
    out.logits = logits.data;
    out.log_probs.resize(out.logits.size());
    kernels::log_softmax_row(out.logits.data(), out.log_probs.data(), out.logits.size());
    Tensor v({1});
    kernels::affine(features, store.value("v.w"), &store.value("v.b"), v);
    out.value = v.data[0];
    return out;
}

inline int sample_action(const std::vector<double>& log_probs, Rng& rng) {
    const double u = rng.uniform();
    double cum = 0.0;
    for (std::size_t a = 0; a < log_probs.size(); ++a) {
        cum += std::exp(log_probs[a]);
        if (u < cum) return static_cast<int>(a);
    }
    return static_cast<int>(log_probs.size() - 1);
}

inline int greedy_action(const std::vector<double>& logits) {
    std::size_t best = 0;
    for (std::size_t a = 1; a < logits.size(); ++a)
        if (logits[a] > logits[best]) best = a;
    return static_cast<int>(best);
}

/// One epoch of experience: num_envs strips of horizon steps collected under
/// a fixed parameter snapshot. Stored env-major; step (e,t) lives at
/// e*horizon + t.
struct RolloutBatch {
    std::size_t num_envs = 0;
    std::size_t horizon = 0;
    std::vector<diff::Tensor> observations;
    std::vector<diff::Tensor> features;  // encoder output per step (snapshot)
    std::vector<int> actions;
    std::vector<double> rewards;
    std::vector<double> values;
    std::vector<double> log_probs;
    std::vector<std::uint8_t> done;      // episode boundary (either kind)
    std::vector<std::uint8_t> terminal;  // boundary with no bootstrap
    std::vector<double> boot_value;      // value after the step, where it matters
    std::vector<double> episode_returns;
    std::vector<std::size_t> episode_lengths;

    std::size_t size() const { return num_envs * horizon; }

    envs::Transition transition(std::size_t i) const {
        envs::Transition t;
        t.observation = observations[i];
        t.action = actions[i];
        t.reward = rewards[i];
        t.done = done[i] != 0;
        t.value_estimate = values[i];
        t.log_prob = log_probs[i];
        return t;
    }

    /// Episode-bounded slices of one env strip, as (start, length) pairs.
    std::vector<std::pair<std::size_t, std::size_t>> segments_of_env(std::size_t e) const {
        std::vector<std::pair<std::size_t, std::size_t>> out;
        std::size_t start = e * horizon;
        const std::size_t end = (e + 1) * horizon;
        std::size_t len = 0;
        for (std::size_t i = e * horizon; i < end; ++i) {
            len += 1;
            if (done[i]) {
                out.emplace_back(start, len);
                start = i + 1;
                len = 0;
            }
        }
        if (len > 0) out.emplace_back(start, len);
        return out;
    }
};

/// Runs one env for `horizon` steps under the current parameters. Everything
/// the strip needs is written into caller-provided slices; no shared state
/// is touched, so strips may run on parallel threads.
inline void collect_strip(envs::Env& env, const diff::ParameterStore& store, const EncoderConfig& cfg,
                          diff::Tensor& carry_obs, bool& carry_valid, Rng& action_rng,
                          double& carry_return, std::size_t& carry_len, RolloutBatch& batch,
                          std::size_t e, std::vector<double>& ep_returns,
                          std::vector<std::size_t>& ep_lengths) {
    const std::size_t base = e * batch.horizon;
    if (!carry_valid) {
        carry_obs = env.reset();
        carry_valid = true;
        carry_return = 0.0;
        carry_len = 0;
    }
    for (std::size_t t = 0; t < batch.horizon; ++t) {
        const std::size_t i = base + t;
        batch.observations[i] = carry_obs;
        batch.features[i] = encode_observation(store, cfg, carry_obs);
        const PolicyOutput pol = policy_forward(store, batch.features[i]);
        const int action = sample_action(pol.log_probs, action_rng);
        const envs::StepResult sr = env.step(action);
        batch.actions[i] = action;
        batch.rewards[i] = sr.reward;
        batch.values[i] = pol.value;
        batch.log_probs[i] = pol.log_probs[static_cast<std::size_t>(action)];
        batch.done[i] = sr.done ? 1 : 0;
        batch.terminal[i] = (sr.done && !sr.truncated) ? 1 : 0;
        carry_return += sr.reward;
        carry_len += 1;
        if (sr.done) {
            if (sr.truncated) {
                const diff::Tensor f = encode_observation(store, cfg, sr.observation);
                batch.boot_value[i] = policy_forward(store, f).value;
            }
            ep_returns.push_back(carry_return);
            ep_lengths.push_back(carry_len);
            carry_return = 0.0;
            carry_len = 0;
            carry_obs = env.reset();
        } else {
            carry_obs = sr.observation;
            if (t + 1 == batch.horizon) {
                const diff::Tensor f = encode_observation(store, cfg, carry_obs);
                batch.boot_value[i] = policy_forward(store, f).value;
            }
        }
    }
}

/// Per-env carry-over between epochs (episodes span rollout boundaries).
struct EnvSlot {
    std::unique_ptr<envs::Env> env;
    Rng action_rng{0};
    diff::Tensor carry_obs;
    bool carry_valid = false;
    double carry_return = 0.0;
    std::size_t carry_len = 0;
};

inline RolloutBatch collect_rollouts(std::vector<EnvSlot>& slots, const diff::ParameterStore& store,
                                     const EncoderConfig& cfg, std::size_t horizon, bool serial) {
    if (slots.empty()) throw std::invalid_argument("collect_rollouts: no environments");
    RolloutBatch batch;
    batch.num_envs = slots.size();
    batch.horizon = horizon;
    const std::size_t n = batch.size();
    batch.observations.resize(n);
    batch.features.resize(n);
    batch.actions.assign(n, 0);
    batch.rewards.assign(n, 0.0);
    batch.values.assign(n, 0.0);
    batch.log_probs.assign(n, 0.0);
    batch.done.assign(n, 0);
    batch.terminal.assign(n, 0);
    batch.boot_value.assign(n, 0.0);

    std::vector<std::vector<double>> per_env_returns(slots.size());
    std::vector<std::vector<std::size_t>> per_env_lengths(slots.size());

    auto run_env = [&](std::size_t e) {
        collect_strip(*slots[e].env, store, cfg, slots[e].carry_obs, slots[e].carry_valid,
                      slots[e].action_rng, slots[e].carry_return, slots[e].carry_len, batch, e,
                      per_env_returns[e], per_env_lengths[e]);
    };

    if (serial || slots.size() == 1) {
        for (std::size_t e = 0; e < slots.size(); ++e) run_env(e);
    } else {
        std::vector<std::thread> threads;
        threads.reserve(slots.size());
        for (std::size_t e = 0; e < slots.size(); ++e) threads.emplace_back(run_env, e);
        for (auto& t : threads) t.join();
    }
    for (std::size_t e = 0; e < slots.size(); ++e) {
        batch.episode_returns.insert(batch.episode_returns.end(), per_env_returns[e].begin(),
                                     per_env_returns[e].end());
        batch.episode_lengths.insert(batch.episode_lengths.end(), per_env_lengths[e].begin(),
                                     per_env_lengths[e].end());
    }
    return batch;
}

struct PpoConfig {
    double clip = 0.2;
    double entropy_coef = 0.01;
    double value_coef = 0.5;
    double gamma = 0.999;
    double lambda = 0.95;
    std::size_t minibatches = 8;
};

struct PpoStats {
    double policy_loss = 0.0;
    double value_loss = 0.0;
    double entropy = 0.0;
    double total_loss = 0.0;
    std::size_t updates = 0;
};

/// Per-step advantages and returns over the whole batch, episode-aware.
inline void batch_gae(const RolloutBatch& batch, double gamma, double lambda,
                      std::vector<double>& advantages, std::vector<double>& returns) {
    advantages.assign(batch.size(), 0.0);
    returns.assign(batch.size(), 0.0);
    for (std::size_t e = 0; e < batch.num_envs; ++e) {
        for (const auto& [start, len] : batch.segments_of_env(e)) {
            std::vector<double> rewards(len), values(len + 1);
            std::vector<std::uint8_t> dones(len, 0);
            for (std::size_t k = 0; k < len; ++k) {
                rewards[k] = batch.rewards[start + k];
                values[k] = batch.values[start + k];
            }
            const std::size_t last = start + len - 1;
            if (batch.terminal[last]) {
                dones[len - 1] = 1;
                values[len] = 0.0;
            } else {
                values[len] = batch.boot_value[last];  // truncated or horizon cut
            }
            const GaeResult g = compute_gae(rewards, values, dones, gamma, lambda);
            for (std::size_t k = 0; k < len; ++k) {
                advantages[start + k] = g.advantages[k];
                returns[start + k] = g.returns[k];
            }
        }
    }
}

inline void normalize_advantages(std::vector<double>& adv) {
    const double n = static_cast<double>(adv.size());
    double mean = 0.0;
    for (double a : adv) mean += a;
    mean /= n;
    double var = 0.0;
    for (double a : adv) var += (a - mean) * (a - mean);
    const double stddev = std::sqrt(var / n);
    const double denom = std::max(stddev, 1e-8);
    for (double& a : adv) a = (a - mean) / denom;
}

/// Clipped-surrogate PPO over the batch. The heads read the rollout-time
/// feature snapshot as constants, so the policy-gradient graph contains no
/// encoder parameters at all: isolation is structural.
inline PpoStats ppo_update(const RolloutBatch& batch, diff::ParameterStore& store, Adam& adam,
                           const PpoConfig& cfg, Rng& shuffle_rng) {
    using namespace diff;
    if (batch.size() == 0) throw std::invalid_argument("ppo_update: empty batch");
    const std::size_t n = batch.size();
    const std::size_t embed_dim = batch.features[0].numel();
    const std::size_t num_actions = store.value("pi.w").shape[0];

    std::vector<double> advantages, returns;
    batch_gae(batch, cfg.gamma, cfg.lambda, advantages, returns);
    normalize_advantages(advantages);

    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[shuffle_rng.below(i)]);

    const std::size_t mb_count = std::max<std::size_t>(1, std::min(cfg.minibatches, n));
    PpoStats stats;
    for (std::size_t mb = 0; mb < mb_count; ++mb) {
        const std::size_t lo = mb * n / mb_count;
        const std::size_t hi = (mb + 1) * n / mb_count;
        const std::size_t b = hi - lo;
        if (b == 0) continue;

        Tensor feats({b, embed_dim});
        Tensor old_lp({b});
        Tensor adv({b});
        Tensor ret({b});
        std::vector<std::size_t> act(b);
        for (std::size_t k = 0; k < b; ++k) {
            const std::size_t i = order[lo + k];
            std::copy(batch.features[i].data.begin(), batch.features[i].data.end(),
                      feats.data.begin() + k * embed_dim);
            old_lp.data[k] = batch.log_probs[i];
            adv.data[k] = advantages[i];
            ret.data[k] = returns[i];
            act[k] = static_cast<std::size_t>(batch.actions[i]);
        }

        Graph g(&store);
        NodeId f = g.constant(std::move(feats), "features");
        NodeId logits = g.affine(f, g.param("pi.w"), g.param("pi.b"));
        NodeId lp_all = g.log_softmax(logits);
        NodeId lp = g.select_per_row(lp_all, act);
        NodeId ratio = g.exp_(g.sub(lp, g.constant(std::move(old_lp))));
        NodeId adv_c = g.constant(std::move(adv));
        NodeId unclipped = g.mul(ratio, adv_c);
        NodeId clipped = g.mul(g.clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip), adv_c);
        NodeId policy_loss = g.scale(g.mean_all(g.min_elem(unclipped, clipped)), -1.0);
        NodeId vpred = g.affine(f, g.param("v.w"), g.param("v.b"));
        NodeId verr = g.sub(g.reshape(vpred, {b}), g.constant(std::move(ret)));
        NodeId value_loss = g.mean_all(g.mul(verr, verr));
        NodeId probs = g.softmax(logits);
        NodeId entropy = g.scale(g.mean_all(g.row_sum(g.mul(probs, lp_all))), -1.0);
        NodeId total = g.add(g.add(policy_loss, g.scale(value_loss, cfg.value_coef)),
                             g.scale(entropy, -cfg.entropy_coef));
        g.evaluate();
        g.backward(total);
        adam.step(store, {"pi.w", "pi.b", "v.w", "v.b"});

        stats.policy_loss += g.scalar_value(policy_loss) * static_cast<double>(b);
        stats.value_loss += g.scalar_value(value_loss) * static_cast<double>(b);
        stats.entropy += g.scalar_value(entropy) * static_cast<double>(b);
        stats.total_loss += g.scalar_value(total) * static_cast<double>(b);
        stats.updates += 1;
    }
    const double dn = static_cast<double>(n);
    stats.policy_loss /= dn;
    stats.value_loss /= dn;
    stats.entropy /= dn;
    stats.total_loss /= dn;
    return stats;
}

}  // namespace ctrl
