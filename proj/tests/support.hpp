// SPDX-License-Identifier: Apache-2.0
// Shared helpers for the unit and acceptance tests: finite-difference
// gradient oracles and small synthetic fixtures.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "cmmix/optim.hpp"
#include "cmmix/random.hpp"
#include "cmmix/tensor.hpp"

namespace cmmix::testing {

using TensorD = tensor::Tensor<double>;

inline TensorD random_tensor(Rng& rng, tensor::Shape shape, double lo = -1.0, double hi = 1.0,
                             bool requires_grad = true) {
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> data(tensor::numel(shape));
    for (double& v : data) v = u(rng);
    return TensorD::from(std::move(shape), std::move(data), requires_grad);
}

/// Norm-wise relative error between the autograd gradient of every input and
/// a central finite difference with step h. Returns the worst input's error.
inline double gradcheck(const std::function<TensorD(const std::vector<TensorD>&)>& f, std::vector<TensorD> inputs,
                        double h = 1e-4) {
    for (auto& x : inputs) x.zero_grad();
    tensor::backward(f(inputs));
    double worst = 0.0;
    for (auto& x : inputs) {
        if (!x.requires_grad()) continue;
        const std::vector<double> analytic(x.grad().begin(), x.grad().end());
        std::vector<double> numeric(x.size());
        tensor::NoGradGuard guard;
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double keep = x.data()[i];
            x.data()[i] = keep + h;
            const double up = f(inputs).item();
            x.data()[i] = keep - h;
            const double down = f(inputs).item();
            x.data()[i] = keep;
            numeric[i] = (up - down) / (2 * h);
        }
        double diff = 0, na = 0, nn = 0;
        for (std::size_t i = 0; i < x.size(); ++i) {
            diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
            na += analytic[i] * analytic[i];
            nn += numeric[i] * numeric[i];
        }
        const double scale = std::max({std::sqrt(na), std::sqrt(nn), 1e-12});
        worst = std::max(worst, std::sqrt(diff) / scale);
    }
    return worst;
}

/// Directional check over a parameter list: for a random direction u in each
/// group, compares <grad, u> against (f(p + h u) - f(p - h u)) / 2h.
/// Returns the worst relative error over the groups.
inline double directional_gradcheck(const std::function<TensorD()>& f, optim::ParamList<double>& params, Rng& rng,
                                    double h = 1e-4) {
    optim::zero_grad(params);
    tensor::backward(f());
    std::normal_distribution<double> normal(0.0, 1.0);
    double worst = 0.0;
    for (auto& p : params) {
        std::vector<double> u(p.value.size());
        for (double& v : u) v = normal(rng);
        double analytic = 0;
        for (std::size_t i = 0; i < u.size(); ++i) analytic += p.value.grad()[i] * u[i];
        tensor::NoGradGuard guard;
        const std::vector<double> keep(p.value.data().begin(), p.value.data().end());
        for (std::size_t i = 0; i < u.size(); ++i) p.value.data()[i] = keep[i] + h * u[i];
        const double up = f().item();
        for (std::size_t i = 0; i < u.size(); ++i) p.value.data()[i] = keep[i] - h * u[i];
        const double down = f().item();
        std::copy(keep.begin(), keep.end(), p.value.data().begin());
        const double numeric = (up - down) / (2 * h);
        const double scale = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
        worst = std::max(worst, std::abs(analytic - numeric) / scale);
    }
    return worst;
}

/// Same comparison along one random unit direction spanning every parameter at once.
inline double joint_directional_gradcheck(const std::function<TensorD()>& f, optim::ParamList<double>& params,
                                          Rng& rng, double h = 1e-4) {
    optim::zero_grad(params);
    tensor::backward(f());
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<std::vector<double>> dirs, keep;
    double norm = 0;
    for (auto& p : params) {
        auto& u = dirs.emplace_back(p.value.size());
        for (double& v : u) {
            v = normal(rng);
            norm += v * v;
        }
        keep.emplace_back(p.value.data().begin(), p.value.data().end());
    }
    double analytic = 0;
    for (std::size_t g = 0; g < params.size(); ++g)
        for (std::size_t i = 0; i < dirs[g].size(); ++i) {
            dirs[g][i] /= std::sqrt(norm);
            analytic += params[g].value.grad()[i] * dirs[g][i];
        }
    tensor::NoGradGuard guard;
    auto shift = [&](double t) {
        for (std::size_t g = 0; g < params.size(); ++g)
            for (std::size_t i = 0; i < dirs[g].size(); ++i) params[g].value.data()[i] = keep[g][i] + t * dirs[g][i];
    };
    shift(h);
    const double up = f().item();
    shift(-h);
    const double down = f().item();
    shift(0);
    const double numeric = (up - down) / (2 * h);
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-8});
}

}  // namespace cmmix::testing
