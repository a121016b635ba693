#pragma once

#include <cstddef>
#include <vector>

#include "ctrl/tensor.hpp"

namespace ctrl::envs {

struct StepResult {
    diff::Tensor observation;
    double reward = 0.0;
    bool done = false;
    bool truncated = false;  // done by horizon, not by a terminal state
};

/// One logged step of experience.
struct Transition {
    diff::Tensor observation;
    int action = 0;
    double reward = 0.0;
    bool done = false;
    double value_estimate = 0.0;
    double log_prob = 0.0;
};

/// Episodic task-family interface. Each instance owns its task stream:
/// reset() draws the next task from the family's distribution.
class Env {
  public:
    virtual ~Env() = default;
    virtual diff::Shape obs_shape() const = 0;
    virtual std::size_t num_actions() const = 0;
    virtual diff::Tensor reset() = 0;
    virtual StepResult step(int action) = 0;
};

/// Reward-bearing trajectory slice used to build views and losses.
struct Trajectory {
    std::vector<diff::Tensor> observations;
    std::vector<int> actions;
    std::vector<double> rewards;

    std::size_t length() const { return observations.size(); }
};

}  // namespace ctrl::envs
