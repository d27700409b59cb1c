// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "cmmix/tensor.hpp"

namespace cmmix::optim {

/// A named trainable tensor. `decay` selects decoupled weight decay (weights yes,
/// biases/norm gains/mask tokens no).
template <typename T>
struct Param {
    std::string name;
    tensor::Tensor<T> value;
    bool decay = true;
};

template <typename T>
using ParamList = std::vector<Param<T>>;

struct AdamOptions {
    double beta1 = 0.9;
    double beta2 = 0.95;
    double weight_decay = 0.05;
    double eps = 1e-8;
};

/// Adam with bias correction and decoupled weight decay:
///   m <- b1 m + (1-b1) g,  v <- b2 v + (1-b2) g^2
///   p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)
template <typename T>
class Adam {
public:
    Adam() = default;
    Adam(const ParamList<T>& params, AdamOptions options);

    /// Applies one update with learning rate `lr`. Every parameter must carry a
    /// gradient buffer (from backward() or zero_grad()).
    void step(ParamList<T>& params, double lr);

    const AdamOptions& options() const { return options_; }
    std::size_t step_count() const { return step_; }
    void set_step_count(std::size_t step) { step_ = step; }
    std::vector<std::vector<T>>& first_moments() { return m_; }
    std::vector<std::vector<T>>& second_moments() { return v_; }
    const std::vector<std::vector<T>>& first_moments() const { return m_; }
    const std::vector<std::vector<T>>& second_moments() const { return v_; }

private:
    AdamOptions options_;
    std::size_t step_ = 0;
    std::vector<std::vector<T>> m_;
    std::vector<std::vector<T>> v_;
};

template <typename T>
void zero_grad(ParamList<T>& params) {
    for (auto& p : params) p.value.zero_grad();
}

/// Linear warmup 0 -> base_lr over `warmup_steps`, then cosine decay to `min_lr`
/// at `total_steps`. Throws ConfigError when warmup_steps >= total_steps.
double lr_schedule(std::size_t step, std::size_t warmup_steps, std::size_t total_steps, double base_lr,
                   double min_lr);

}  // namespace cmmix::optim
