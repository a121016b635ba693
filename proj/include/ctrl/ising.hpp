#pragma once

#include <array>
#include <optional>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "ctrl/env.hpp"
#include "ctrl/rng.hpp"
#include "ctrl/tensor.hpp"

namespace ctrl::envs {

inline constexpr std::size_t kLatticeSide = 32;
inline constexpr std::size_t kLatticeSites = kLatticeSide * kLatticeSide;

/// Square-lattice Ising model with spins stored as {0,1}, coupling J=1 and
/// periodic boundaries. Dynamics are Metropolis single-site proposals in
/// fixed raster order, one full sweep per step.
class IsingModel {
  public:
    IsingModel(std::size_t side, double inverse_temperature, Rng rng)
        : side_(side), beta_(inverse_temperature), rng_(rng), lattice_(side * side, 0) {
        if (beta_ < 0.0) throw std::invalid_argument("IsingModel: beta must be >= 0");
        for (auto& s : lattice_) s = static_cast<std::uint8_t>(rng_.below(2));
        // acceptance table for positive energy gains; dE is always a
        // multiple of 4 on the square lattice (2*sigma*neighbor_sum)
        for (int k = 0; k < 5; ++k) accept_[k] = std::exp(-beta_ * 4.0 * k);
    }

    std::size_t side() const { return side_; }
    double beta() const { return beta_; }
    const std::vector<std::uint8_t>& lattice() const { return lattice_; }

    void set_lattice(const std::vector<std::uint8_t>& spins) {
        if (spins.size() != lattice_.size()) throw std::invalid_argument("IsingModel: lattice size mismatch");
        lattice_ = spins;
    }

    /// Total energy -J * sum over directed right+down bonds (each wrap bond
    /// of a 2-wide lattice counts twice, matching the per-site neighbor sum
    /// used by the dynamics).
    double energy() const {
        double e = 0.0;
        for (std::size_t r = 0; r < side_; ++r) {
            for (std::size_t c = 0; c < side_; ++c) {
                const double s = spin(r, c);
                e -= s * spin(r, (c + 1) % side_);
                e -= s * spin((r + 1) % side_, c);
            }
        }
        return e;
    }

    double magnetization() const {
        double m = 0.0;
        for (auto s : lattice_) m += s ? 1.0 : -1.0;
        return m / static_cast<double>(lattice_.size());
    }

    /// One Metropolis sweep with randomness supplied by the model's own
    /// stream.
    void sweep() { sweep_with(rng_); }

    /// One Metropolis sweep driven by an external stream. Consumes exactly
    /// one uniform per site, drawn before the state is inspected, so that
    /// models sharing a stream stay coupled site-for-site.
    void sweep_with(Rng& rng) {
        const std::size_t n = side_;
        for (std::size_t r = 0; r < n; ++r) {
            const std::size_t up = (r == 0 ? n - 1 : r - 1) * n;
            const std::size_t down = (r == n - 1 ? 0 : r + 1) * n;
            const std::size_t row = r * n;
            for (std::size_t c = 0; c < n; ++c) {
                const double u = rng.uniform();
                const std::size_t left = row + (c == 0 ? n - 1 : c - 1);
                const std::size_t right = row + (c == n - 1 ? 0 : c + 1);
                const int h = lattice_[up + c] + lattice_[down + c] + lattice_[left] + lattice_[right];
                // energy gain of flipping, in units where bonds carry +-1
                const int de = lattice_[row + c] ? 4 * h - 8 : 8 - 4 * h;
                if (de <= 0 || u < accept_[de / 4]) lattice_[row + c] ^= 1u;
            }
        }
    }

    Rng& rng() { return rng_; }

  private:
    double spin(std::size_t r, std::size_t c) const {
        return lattice_[r * side_ + c] ? 1.0 : -1.0;
    }

    std::size_t side_;
    double beta_;
    Rng rng_;
    std::vector<std::uint8_t> lattice_;
    std::array<double, 5> accept_{};
};

struct CompositeIsingOptions {
    std::size_t num_models = 5;
    double beta_lo = 0.01;
    double beta_hi = 0.3;
    std::size_t episode_length = 100;
    std::size_t goal_sweeps_lo = 50;
    std::size_t goal_sweeps_hi = 200;
};

/// Matching task over a bank of Ising models whose inverse temperatures sit
/// on a uniform grid. A hidden sixth model carries the goal: its inverse
/// temperature is one of the grid values, drawn per episode. All six chains
/// start from one shared lattice and advance in lockstep off one shared
/// proposal/acceptance stream, warmed up for a random number of sweeps
/// before the episode so the textures are developed. The first observation
/// of an episode is the goal lattice; afterwards the agent sees only the
/// lattice of the model it chose. Reward compares the chosen lattice with
/// the goal chain, so the beta-matched model (bit-identical to the goal
/// under the shared stream) earns reward 0 while mismatched models diverge
/// by damage spreading.
class CompositeIsingTask final : public Env {
  public:
    explicit CompositeIsingTask(std::uint64_t task_seed, CompositeIsingOptions opt = {})
        : opt_(opt), task_rng_(Rng(task_seed).fork(0x15196)) {}

    diff::Shape obs_shape() const override { return {1, kLatticeSide, kLatticeSide}; }
    std::size_t num_actions() const override { return opt_.num_models; }

    diff::Tensor reset() override {
        Rng episode_rng = task_rng_.fork(episode_counter_++);
        goal_index_ = episode_rng.below(opt_.num_models);
        goal_beta_ = grid_beta(goal_index_);
        const std::size_t warmup =
            opt_.goal_sweeps_lo + episode_rng.below(opt_.goal_sweeps_hi - opt_.goal_sweeps_lo + 1);

        // one shared initial lattice ...
        std::vector<std::uint8_t> init(kLatticeSites);
        Rng init_rng = episode_rng.fork(1);
        for (auto& s : init) s = static_cast<std::uint8_t>(init_rng.below(2));

        // ... and one shared proposal/acceptance stream for all six chains
        sweep_rng_ = episode_rng.fork(2);

        models_.clear();
        for (std::size_t i = 0; i < opt_.num_models; ++i) {
            models_.emplace_back(kLatticeSide, grid_beta(i), episode_rng.fork(100 + i));
            models_.back().set_lattice(init);
        }
        goal_model_.emplace(kLatticeSide, goal_beta_, episode_rng.fork(3));
        goal_model_->set_lattice(init);

        for (std::size_t s = 0; s < warmup; ++s) advance_all();

        steps_ = 0;
        done_ = false;
        return lattice_to_obs(goal_model_->lattice());
    }

    StepResult step(int action) override {
        if (done_) throw std::logic_error("CompositeIsingTask: step after episode end");
        if (action < 0 || static_cast<std::size_t>(action) >= opt_.num_models)
            throw std::out_of_range("CompositeIsingTask: action out of range");

        advance_all();

        const auto& lattice = models_[static_cast<std::size_t>(action)].lattice();
        const auto& goal = goal_model_->lattice();
        double dist = 0.0;
        for (std::size_t i = 0; i < kLatticeSites; ++i)
            dist += (lattice[i] != goal[i]) ? 1.0 : 0.0;

        steps_ += 1;
        StepResult out;
        out.reward = -dist;
        out.done = steps_ >= opt_.episode_length;
        out.truncated = out.done;  // fixed-horizon episodes bootstrap
        out.observation = lattice_to_obs(lattice);
        done_ = out.done;
        return out;
    }

    double goal_beta() const { return goal_beta_; }
    std::size_t goal_index() const { return goal_index_; }
    double grid_beta(std::size_t i) const {
        return opt_.beta_lo + (opt_.beta_hi - opt_.beta_lo) * static_cast<double>(i) /
                                  static_cast<double>(opt_.num_models - 1);
    }
    const std::vector<std::uint8_t>& goal_lattice() const { return goal_model_->lattice(); }
    const IsingModel& model(std::size_t i) const { return models_.at(i); }
    const CompositeIsingOptions& options() const { return opt_; }

    static diff::Tensor lattice_to_obs(const std::vector<std::uint8_t>& lattice) {
        diff::Tensor obs({1, kLatticeSide, kLatticeSide});
        for (std::size_t i = 0; i < lattice.size(); ++i) obs.data[i] = lattice[i] ? 1.0 : 0.0;
        return obs;
    }

  private:
    // Every chain consumes the same stream state; the stream then advances
    // by exactly one sweep.
    void advance_all() {
        Rng advanced = sweep_rng_;
        bool first = true;
        for (auto& model : models_) {
            Rng stream = sweep_rng_;
            model.sweep_with(stream);
            if (first) {
                advanced = stream;
                first = false;
            }
        }
        Rng goal_stream = sweep_rng_;
        goal_model_->sweep_with(goal_stream);
        sweep_rng_ = advanced;
    }

    CompositeIsingOptions opt_;
    Rng task_rng_;
    std::uint64_t episode_counter_ = 0;
    std::vector<IsingModel> models_;
    std::optional<IsingModel> goal_model_;
    Rng sweep_rng_{0};
    double goal_beta_ = 0.0;
    std::size_t goal_index_ = 0;
    std::size_t steps_ = 0;
    bool done_ = true;
};

}  // namespace ctrl::envs
