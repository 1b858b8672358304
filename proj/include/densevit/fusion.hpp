#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "densevit/cnn.hpp"
#include "densevit/density.hpp"
#include "densevit/params.hpp"
#include "densevit/tensor.hpp"

namespace densevit {

// --- token-level building blocks -------------------------------------------

// Fixed-order channel split: first half local, second half global.
inline std::pair<Tensor, Tensor> channel_split(const Tensor& tokens) {
    detail::check(tokens.rank() == 3, "channel_split: expected (B,N,C), got " +
                                          detail::shape_str(tokens.shape()));
    detail::check(tokens.dim(2) % 2 == 0,
                  "channel_split: channel count " + std::to_string(tokens.dim(2)) + " is odd");
    return split_half(tokens, 2);
}

// Repeats a per-token mask (B,N) across c_half channels -> (B,N,c_half).
inline Tensor broadcast_mask(const Tensor& token_mask, std::size_t c_half) {
    detail::check(token_mask.rank() == 2, "broadcast_mask: expected (B,N), got " +
                                              detail::shape_str(token_mask.shape()));
    const std::size_t b = token_mask.dim(0), n = token_mask.dim(1);
    return expand(reshape(token_mask, {b, n, 1}), {b, n, c_half});
}

// Mask-weighted mean over the token axis: G = sum_n(Z (.) P) / sum_n(P),
// per channel. An all-zero mask gets a 1e-6 denominator guard and yields
// G = 0.
inline Tensor masked_global_pool(const Tensor& z_glob, const Tensor& mask_bc) {
    detail::check(z_glob.shape() == mask_bc.shape(),
                  "masked_global_pool: shapes disagree: " + detail::shape_str(z_glob.shape()) +
                      " vs " + detail::shape_str(mask_bc.shape()));
    Tensor num = sum_axis(mul(z_glob, mask_bc), 1); // (B, C/2)
    Tensor den = sum_axis(mask_bc, 1);              // (B, C/2)
    std::vector<double> guard(den.numel(), 0.0);
    bool any = false;
    for (std::size_t i = 0; i < den.numel(); ++i)
        if (den.values()[i] == 0.0) {
            guard[i] = 1e-6;
            any = true;
        }
    if (any) den = add(den, Tensor(den.shape(), std::move(guard)));
    return div(num, den);
}

// Concatenates the pooled global vector, repeated across tokens, after the
// local channels: (B,N,C/2) + (B,C/2) -> (B,N,C).
inline Tensor fuse_global(const Tensor& z_loc, const Tensor& pooled) {
    detail::check(z_loc.rank() == 3 && pooled.rank() == 2 && z_loc.dim(0) == pooled.dim(0) &&
                      z_loc.dim(2) == pooled.dim(1),
                  "fuse_global: incompatible shapes " + detail::shape_str(z_loc.shape()) +
                      " and " + detail::shape_str(pooled.shape()));
    const std::size_t b = z_loc.dim(0), n = z_loc.dim(1), ch = z_loc.dim(2);
    Tensor rep = expand(reshape(pooled, {b, 1, ch}), {b, n, ch});
    return concat({z_loc, rep}, 2);
}

// Training-phase modulation by the density mask, broadcast over all
// channels; the inferring phase passes tokens through untouched.
inline Tensor train_modulate(const Tensor& fused, const Tensor& token_mask, Mode mode) {
    if (mode != Mode::training) return fused;
    const std::size_t b = fused.dim(0), n = fused.dim(1), c = fused.dim(2);
    Tensor m3 = expand(reshape(token_mask, {b, n, 1}), {b, n, c});
    return mul(fused, m3);
}

// Multiplies each token embedding by its keep probability (channel 0 of the
// focusing pair), broadcast across the embedding dimension.
inline Tensor apply_focus(const Tensor& tokens, const Tensor& focus_probs) {
    detail::check(focus_probs.rank() == 3 && focus_probs.dim(2) == 2,
                  "apply_focus: focusing probability must be (B,N,2), got " +
                      detail::shape_str(focus_probs.shape()));
    const std::size_t b = tokens.dim(0), n = tokens.dim(1), d = tokens.dim(2);
    Tensor keep = narrow(focus_probs, 2, 0, 1); // (B,N,1)
    return mul(tokens, expand(keep, {b, n, d}));
}

// Inference-time hard gating: keeps the ceil(keep_ratio * N) tokens with the
// highest keep probability (ties to the lower index) and zeroes the rest.
inline Tensor apply_hard_focus(const Tensor& tokens, const Tensor& focus_probs,
                               double keep_ratio) {
    detail::check(keep_ratio > 0.0 && keep_ratio <= 1.0,
                  "apply_hard_focus: keep_ratio must lie in (0,1]");
    const std::size_t b = tokens.dim(0), n = tokens.dim(1), d = tokens.dim(2);
    const std::size_t k = static_cast<std::size_t>(
        std::min<double>(static_cast<double>(n),
                         std::ceil(keep_ratio * static_cast<double>(n))));
    std::vector<double> gate(b * n, 0.0);
    for (std::size_t bi = 0; bi < b; ++bi) {
        std::vector<std::size_t> order(n);
        for (std::size_t i = 0; i < n; ++i) order[i] = i;
        std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) {
            return focus_probs.values()[(bi * n + i) * 2] > focus_probs.values()[(bi * n + j) * 2];
        });
        for (std::size_t i = 0; i < k; ++i) gate[bi * n + order[i]] = 1.0;
    }
    Tensor g({b, n, 1}, std::move(gate));
    return mul(tokens, expand(g, {b, n, d}));
}

struct DefmOutput {
    Tensor focus_probs;  // (B,N,2), rows sum to 1
    Tensor focus_logits; // pre-softmax, used by the auxiliary loss
    Tensor tokens;       // input tokens gated by the keep probability
};

// Density-enhanced fusion stage: LN -> GELU -> channel split -> mask
// broadcast -> masked global pool -> fuse -> (training) modulate -> LN ->
// MLP -> softmax, then the focusing probability gates the incoming tokens.
class DensityFusion {
public:
    DensityFusion() = default;

    DensityFusion(ParamRegistry& reg, std::size_t stage, std::size_t channels, Rng& rng)
        : channels_(channels) {
        detail::check(channels % 2 == 0, "DEFM channel count must be even");
        const std::string p = "defm.stage" + std::to_string(stage) + ".";
        const std::size_t ch = channels / 2;
        pre_gamma_ = reg.add(p + "pre_ln.gamma", Tensor::ones({channels}), true);
        pre_beta_ = reg.add(p + "pre_ln.beta", Tensor::zeros({channels}), true);
        out_gamma_ = reg.add(p + "out_ln.gamma", Tensor::ones({channels}), true);
        out_beta_ = reg.add(p + "out_ln.beta", Tensor::zeros({channels}), true);
        mlp_w1_ = reg.add(p + "mlp.w1", detail::he_uniform({channels, ch}, channels, rng));
        mlp_b1_ = reg.add(p + "mlp.b1", Tensor::zeros({ch}));
        mlp_w2_ = reg.add(p + "mlp.w2", detail::he_uniform({ch, 2}, ch, rng));
        mlp_b2_ = reg.add(p + "mlp.b2", Tensor::zeros({2}));
    }

    // token_mask is (B,N) with values in [0,1].
    DefmOutput forward(const Tensor& tokens, const Tensor& token_mask, Mode mode) const {
        detail::check(tokens.rank() == 3 && tokens.dim(2) == channels_,
                      "defm_forward: tokens must be (B,N," + std::to_string(channels_) +
                          "), got " + detail::shape_str(tokens.shape()));
        detail::check(token_mask.rank() == 2 && token_mask.dim(0) == tokens.dim(0) &&
                          token_mask.dim(1) == tokens.dim(1),
                      "defm_forward: mask " + detail::shape_str(token_mask.shape()) +
                          " does not match token grid of " +
                          detail::shape_str(tokens.shape()));

        Tensor x = gelu(layer_norm(tokens, pre_gamma_, pre_beta_));
        auto [loc, glob] = channel_split(x);
        Tensor mask_bc = broadcast_mask(token_mask, channels_ / 2);
        Tensor pooled = masked_global_pool(glob, mask_bc);
        Tensor fused = fuse_global(loc, pooled);
        Tensor modulated = train_modulate(fused, token_mask, mode);
        Tensor h = layer_norm(modulated, out_gamma_, out_beta_);
        Tensor logits = add(matmul(gelu(add(matmul(h, mlp_w1_), mlp_b1_)), mlp_w2_), mlp_b2_);
        Tensor probs = softmax(logits, 2);
        return DefmOutput{probs, logits, apply_focus(tokens, probs)};
    }

    Tensor mlp_w1() const { return mlp_w1_; }
    Tensor mlp_w2() const { return mlp_w2_; }
    Tensor mlp_b2() const { return mlp_b2_; }

private:
    std::size_t channels_ = 0;
    Tensor pre_gamma_, pre_beta_, out_gamma_, out_beta_;
    Tensor mlp_w1_, mlp_b1_, mlp_w2_, mlp_b2_;
};

} // namespace densevit
