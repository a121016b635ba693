#pragma once

#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

#include "ctrl/graph.hpp"

namespace ctrl {

/// Adam with per-parameter moment buffers and step counts, so parameter
/// groups updated at different cadences keep correct bias correction.
class Adam {
  public:
    explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(diff::ParameterStore& store, const std::vector<std::string>& params) {
        for (const std::string& name : params) {
            diff::Tensor& value = store.value(name);
            const diff::Tensor& grad = store.grad(name);
            State& st = state_[name];
            if (st.m.numel() == 0) {
                st.m = diff::Tensor::zeros(value.shape);
                st.v = diff::Tensor::zeros(value.shape);
            }
            st.t += 1;
            const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(st.t));
            const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(st.t));
            for (std::size_t i = 0; i < value.numel(); ++i) {
                const double g = grad.data[i];
                st.m.data[i] = beta1_ * st.m.data[i] + (1.0 - beta1_) * g;
                st.v.data[i] = beta2_ * st.v.data[i] + (1.0 - beta2_) * g * g;
                const double mhat = st.m.data[i] / bc1;
                const double vhat = st.v.data[i] / bc2;
                value.data[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
            }
        }
    }

    double learning_rate() const { return lr_; }

  private:
    struct State {
        diff::Tensor m, v;
        std::uint64_t t = 0;
    };

    double lr_, beta1_, beta2_, eps_;
    std::unordered_map<std::string, State> state_;
};

}  // namespace ctrl
