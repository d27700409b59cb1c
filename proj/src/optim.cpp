// SPDX-License-Identifier: Apache-2.0
#include "cmmix/optim.hpp"

#include <cmath>
#include <numbers>

namespace cmmix::optim {

template <typename T>
Adam<T>::Adam(const ParamList<T>& params, AdamOptions options) : options_(options) {
    m_.reserve(params.size());
    v_.reserve(params.size());
    for (const auto& p : params) {
        m_.emplace_back(p.value.size(), T(0));
        v_.emplace_back(p.value.size(), T(0));
    }
}

template <typename T>
void Adam<T>::step(ParamList<T>& params, double lr) {
    if (params.size() != m_.size())
        throw ContractError("adam: optimizer tracks " + std::to_string(m_.size()) + " parameters, got " +
                            std::to_string(params.size()));
    for (const auto& p : params)
        if (!p.value.has_grad()) throw ContractError("adam: parameter '" + p.name + "' has no gradient");

    ++step_;
    const double t = static_cast<double>(step_);
    const T b1 = static_cast<T>(options_.beta1);
    const T b2 = static_cast<T>(options_.beta2);
    const T bc1 = static_cast<T>(1.0 - std::pow(options_.beta1, t));
    const T bc2 = static_cast<T>(1.0 - std::pow(options_.beta2, t));
    const T eps = static_cast<T>(options_.eps);
    const T step_lr = static_cast<T>(lr);
    const T decay = static_cast<T>(lr * options_.weight_decay);

    for (std::size_t k = 0; k < params.size(); ++k) {
        auto data = params[k].value.data();
        auto grad = params[k].value.grad();
        auto& m = m_[k];
        auto& v = v_[k];
        if (m.size() != data.size()) throw ContractError("adam: moment shape mismatch for '" + params[k].name + "'");
        const bool decays = params[k].decay && options_.weight_decay != 0.0;
        for (std::size_t i = 0; i < data.size(); ++i) {
            const T g = grad[i];
            m[i] = b1 * m[i] + (T(1) - b1) * g;
            v[i] = b2 * v[i] + (T(1) - b2) * g * g;
            const T m_hat = m[i] / bc1;
            const T v_hat = v[i] / bc2;
            T update = step_lr * m_hat / (std::sqrt(v_hat) + eps);
            if (decays) update += decay * data[i];
            data[i] -= update;
        }
    }
}

double lr_schedule(std::size_t step, std::size_t warmup_steps, std::size_t total_steps, double base_lr,
                   double min_lr) {
    if (warmup_steps >= total_steps)
        throw ConfigError("train.warmup_epochs", "warmup (" + std::to_string(warmup_steps) +
                                                     " steps) must be shorter than the run (" +
                                                     std::to_string(total_steps) + " steps)");
    if (step > total_steps) step = total_steps;
    if (step < warmup_steps) return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
    const double progress =
        static_cast<double>(step - warmup_steps) / static_cast<double>(total_steps - warmup_steps);
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

template class Adam<float>;
template class Adam<double>;

}  // namespace cmmix::optim
