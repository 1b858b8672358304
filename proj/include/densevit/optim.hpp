#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "densevit/params.hpp"
#include "densevit/tensor.hpp"

namespace densevit {

// AdamW state plus the learning-rate schedule constants. Moments are aligned
// with the registry's parameter order.
struct OptimState {
    std::int64_t step = 0;
    std::vector<std::vector<double>> first_moment;
    std::vector<std::vector<double>> second_moment;
    double lr_base = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double weight_decay = 0.01;
    double lr_min = 1e-6;
    std::int64_t warmup_iters = 1000;
    std::int64_t total_iters = 2000;
    double clip_norm = 1.0; // global L2 max-norm applied before each step
    double eps = 1e-8;

    void init(const ParamRegistry& params) {
        first_moment.clear();
        second_moment.clear();
        for (const Param& p : params.list()) {
            first_moment.emplace_back(p.tensor.numel(), 0.0);
            second_moment.emplace_back(p.tensor.numel(), 0.0);
        }
        step = 0;
    }

    // Effective warmup length: truncated when the run is shorter than the
    // configured warmup.
    std::int64_t effective_warmup() const {
        if (total_iters >= warmup_iters) return warmup_iters;
        return std::max<std::int64_t>(1, total_iters / 2);
    }
};

// Linear warmup from lr_base/warmup to lr_base over [0, warmup), cosine decay
// from lr_base to lr_min over [warmup, total]; clamps to lr_min past the end.
inline double lr_schedule(std::int64_t step, const OptimState& state) {
    const std::int64_t warmup = state.effective_warmup();
    if (step < warmup)
        return state.lr_base * static_cast<double>(std::max<std::int64_t>(step, 1)) /
               static_cast<double>(warmup);
    if (step > state.total_iters) return state.lr_min;
    if (state.total_iters <= warmup) return step >= state.total_iters ? state.lr_min : state.lr_base;
    const double t = static_cast<double>(step - warmup) /
                     static_cast<double>(state.total_iters - warmup);
    return state.lr_min + (state.lr_base - state.lr_min) * 0.5 * (1.0 + std::cos(M_PI * t));
}

// Scales all gradients so their global L2 norm is at most max_norm.
// Returns the pre-clip norm.
inline double clip_grad_norm(ParamRegistry& params, double max_norm) {
    double sq = 0.0;
    for (const Param& p : params.list()) {
        if (!p.tensor.has_grad()) continue;
        for (double g : p.tensor.grad()) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        const double scale = max_norm / norm;
        for (Param& p : params.list()) {
            if (!p.tensor.has_grad()) continue;
            auto& node = *p.tensor.node();
            for (double& g : node.grad) g *= scale;
        }
    }
    return norm;
}

// One AdamW step with decoupled weight decay. Parameters flagged no_decay
// skip the decay term. Gradients are globally norm-clipped first.
inline void adamw_step(ParamRegistry& params, OptimState& state, double lr) {
    detail::check(state.first_moment.size() == params.size(),
                  "optimizer state not initialized for this registry");
    for (const Param& p : params.list())
        if (p.tensor.has_grad())
            for (double g : p.tensor.grad())
                if (!std::isfinite(g))
                    throw std::runtime_error("non-finite gradient in parameter '" + p.name + "'");

    clip_grad_norm(params, state.clip_norm);

    state.step += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));

    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Param& p = params[pi];
        auto& node = *p.tensor.node();
        auto& m = state.first_moment[pi];
        auto& v = state.second_moment[pi];
        const bool decay = !p.no_decay && state.weight_decay != 0.0;
        for (std::size_t i = 0; i < node.value.size(); ++i) {
            const double g = node.grad.empty() ? 0.0 : node.grad[i];
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            double w = node.value[i];
            if (decay) w -= lr * state.weight_decay * w;
            node.value[i] = w - lr * mhat / (std::sqrt(vhat) + state.eps);
        }
    }
}

} // namespace densevit
