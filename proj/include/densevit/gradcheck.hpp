#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "densevit/random.hpp"
#include "densevit/tensor.hpp"

namespace densevit {

struct GradCheckOptions {
    double eps = 1e-5;            // central-difference step, must lie in [1e-7, 1e-3]
    std::size_t max_coords = 24;  // sampled coordinates per tensor (all when smaller)
    std::uint64_t seed = 7;       // coordinate sampling seed
};

// Compares analytic gradients of a deterministic scalar function against
// central finite differences. Returns the max relative error
// |analytic - numeric| / max(1, |analytic|, |numeric|) over the sampled
// coordinates of all checked tensors.
inline double grad_check(const std::function<Tensor()>& f, std::vector<Tensor> params,
                         const GradCheckOptions& opt = {}) {
    detail::check(opt.eps >= 1e-7 && opt.eps <= 1e-3, "grad_check: eps out of [1e-7, 1e-3]");

    for (Tensor& p : params) p.zero_grad();
    Tensor loss = f();
    detail::check(loss.numel() == 1, "grad_check: f must return a scalar");
    if (!std::isfinite(loss.item()))
        throw std::runtime_error("grad_check: f returned a non-finite value");
    backward(loss);

    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (const Tensor& p : params)
        analytic.push_back(p.has_grad() ? p.grad() : std::vector<double>(p.numel(), 0.0));

    Rng rng(opt.seed);
    double max_rel = 0.0;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor& p = params[pi];
        const std::size_t n = p.numel();
        std::vector<std::size_t> coords;
        if (n <= opt.max_coords) {
            coords.resize(n);
            for (std::size_t i = 0; i < n; ++i) coords[i] = i;
        } else {
            for (std::size_t i = 0; i < opt.max_coords; ++i)
                coords.push_back(static_cast<std::size_t>(
                    rng.uniform_int(0, static_cast<std::int64_t>(n) - 1)));
        }
        auto& vals = p.mutable_values();
        for (std::size_t c : coords) {
            const double saved = vals[c];
            vals[c] = saved + opt.eps;
            const double fp = f().item();
            vals[c] = saved - opt.eps;
            const double fm = f().item();
            vals[c] = saved;
            if (!std::isfinite(fp) || !std::isfinite(fm))
                throw std::runtime_error("grad_check: f returned a non-finite value");
            const double numeric = (fp - fm) / (2.0 * opt.eps);
            const double a = analytic[pi][c];
            const double rel = std::abs(a - numeric) /
                               std::max({1.0, std::abs(a), std::abs(numeric)});
            max_rel = std::max(max_rel, rel);
        }
    }
    return max_rel;
}

} // namespace densevit
