#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "densevit/random.hpp"
#include "densevit/tensor.hpp"

namespace densevit {

namespace detail {

inline Tensor he_uniform(const Shape& shape, std::size_t fan_in, Rng& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
    return Tensor::rand_uniform(shape, rng, -limit, limit);
}

} // namespace detail

struct Param {
    std::string name;
    Tensor tensor;
    bool no_decay = false; // positional embeddings and layer-norm affines
};

// Ordered list of learnable tensors. Order is registration order and fixed;
// optimizer state and checkpoint layout index by it.
class ParamRegistry {
public:
    Tensor add(const std::string& name, Tensor t, bool no_decay = false) {
        for (const Param& p : params_)
            detail::check(p.name != name, "duplicate parameter name: " + name);
        t.set_requires_grad(true);
        params_.push_back(Param{name, t, no_decay});
        return t;
    }

    std::size_t size() const { return params_.size(); }
    Param& operator[](std::size_t i) { return params_[i]; }
    const Param& operator[](std::size_t i) const { return params_[i]; }

    std::vector<Param>& list() { return params_; }
    const std::vector<Param>& list() const { return params_; }

    const Param* find(const std::string& name) const {
        for (const Param& p : params_)
            if (p.name == name) return &p;
        return nullptr;
    }

    void zero_grad() {
        for (Param& p : params_) p.tensor.zero_grad();
    }

    std::size_t total_scalars() const {
        std::size_t n = 0;
        for (const Param& p : params_) n += p.tensor.numel();
        return n;
    }

private:
    std::vector<Param> params_;
};

} // namespace densevit
