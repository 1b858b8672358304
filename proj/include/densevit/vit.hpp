#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "densevit/cnn.hpp"
#include "densevit/density.hpp"
#include "densevit/fusion.hpp"
#include "densevit/params.hpp"
#include "densevit/tensor.hpp"

namespace densevit {

struct ModelConfig {
    std::size_t image_h = 512;
    std::size_t image_w = 512;
    std::size_t patch = 16;
    std::size_t embed_dim = 128;
    std::size_t depth = 12;
    std::size_t heads = 8;
    std::vector<std::size_t> defm_layers = {3, 6, 9}; // encoder layers preceded by a fusion stage
    double mlp_ratio = 4.0;
    double keep_ratio = 0.7; // hard token gating at inference, when enabled
    bool hard_gating = false;

    std::size_t grid_h() const { return image_h / patch; }
    std::size_t grid_w() const { return image_w / patch; }
    std::size_t tokens() const { return grid_h() * grid_w(); }
    std::size_t ffn_hidden() const {
        return static_cast<std::size_t>(mlp_ratio * static_cast<double>(embed_dim));
    }

    // CNN level whose spatial extents equal the token grid (fused with the
    // final tokens). Levels are H/2..H/16, so patch must be 2, 4, 8 or 16.
    std::size_t fuse_level() const {
        std::size_t level = 0, p = patch;
        while (p > 2) {
            p /= 2;
            ++level;
        }
        return level;
    }

    void validate() const {
        detail::check(patch == 2 || patch == 4 || patch == 8 || patch == 16,
                      "patch size must be one of 2,4,8,16 so a CNN level matches the token grid");
        detail::check(image_h % patch == 0 && image_w % patch == 0,
                      "image extents must be divisible by the patch size");
        detail::check(image_h % 16 == 0 && image_w % 16 == 0,
                      "image extents must be divisible by 16 for the CNN branch");
        detail::check(embed_dim % heads == 0, "embed_dim must be divisible by heads");
        detail::check(embed_dim % 2 == 0, "embed_dim must be even for the channel split");
        for (std::size_t i = 0; i < defm_layers.size(); ++i) {
            detail::check(defm_layers[i] < depth,
                          "defm layer index " + std::to_string(defm_layers[i]) +
                              " out of range for depth " + std::to_string(depth));
            detail::check(i == 0 || defm_layers[i] > defm_layers[i - 1],
                          "defm layer indices must be strictly increasing");
        }
        // fusion stage k pools CNN level k onto the token grid
        const std::size_t max_stages = fuse_level() + 1;
        detail::check(defm_layers.size() <= max_stages,
                      "at most " + std::to_string(max_stages) +
                          " fusion stages fit patch size " + std::to_string(patch));
        detail::check(ffn_hidden() > 0, "mlp_ratio too small");
    }
};

// Tokens plus their learnable positional table.
struct TokenSequence {
    Tensor tokens;     // (B, N, D)
    Tensor positional; // (N, D)
};

// Non-overlapping PxP blocks flattened row-major, patches ordered row-major
// over the grid: (B,1,H,W) -> (B, N, P^2).
inline Tensor patchify(const Tensor& image, std::size_t patch) {
    detail::check(image.rank() == 4 && image.dim(1) == 1,
                  "patchify: input must be (B,1,H,W), got " + detail::shape_str(image.shape()));
    const std::size_t b = image.dim(0), h = image.dim(2), w = image.dim(3);
    detail::check(h % patch == 0 && w % patch == 0,
                  "patchify: extents " + std::to_string(h) + "x" + std::to_string(w) +
                      " not divisible by patch " + std::to_string(patch));
    const std::size_t gh = h / patch, gw = w / patch;
    Tensor t = reshape(image, {b, gh, patch, gw, patch});
    t = permute(t, {0, 1, 3, 2, 4}); // (B, gh, gw, P, P)
    return reshape(t, {b, gh * gw, patch * patch});
}

// Inverse of patchify.
inline Tensor unpatchify(const Tensor& patches, std::size_t patch, std::size_t h, std::size_t w) {
    const std::size_t b = patches.dim(0);
    const std::size_t gh = h / patch, gw = w / patch;
    detail::check(patches.dim(1) == gh * gw && patches.dim(2) == patch * patch,
                  "unpatchify: shape mismatch");
    Tensor t = reshape(patches, {b, gh, gw, patch, patch});
    t = permute(t, {0, 1, 3, 2, 4});
    return reshape(t, {b, 1, h, w});
}

struct MhaResult {
    Tensor output; // (B,N,D), after the output projection
    Tensor probs;  // (B,heads,N,N) attention rows
};

// ViT encoder with fusion stages inserted before the configured layers, the
// CNN branch, and the mask refiner. Detection-oriented: no class token.
class Encoder {
public:
    struct Output {
        Tensor tokens;                    // (B,N,D) after the final block
        std::vector<Tensor> focus_probs;  // one (B,N,2) per fusion stage
        std::vector<Tensor> focus_logits; // matching pre-softmax activations
        std::vector<Tensor> refined_masks;// masks consumed per stage, (B,1,gh,gw)
        PyramidFeatures pyramid;
    };

    Encoder() = default;

    Encoder(ParamRegistry& reg, const ModelConfig& cfg, Rng& rng) : cfg_(cfg) {
        cfg.validate();
        const std::size_t d = cfg.embed_dim, p2 = cfg.patch * cfg.patch;
        cnn_ = CnnBackbone(reg, rng);
        refiner_ = MaskRefiner(reg, cfg.defm_layers.size(), cfg.grid_h(), cfg.grid_w(), cfg.patch);
        patch_proj_ = reg.add("vit.patch_proj", detail::he_uniform({p2, d}, p2, rng));
        pos_embed_ = reg.add("vit.pos_embed", Tensor::randn({cfg.tokens(), d}, rng, 0.02), true);
        for (std::size_t l = 0; l < cfg.depth; ++l) {
            const std::string p = "vit.block" + std::to_string(l) + ".";
            Block blk;
            blk.wq = reg.add(p + "attn.wq", detail::he_uniform({d, d}, d, rng));
            blk.wk = reg.add(p + "attn.wk", detail::he_uniform({d, d}, d, rng));
            blk.wv = reg.add(p + "attn.wv", detail::he_uniform({d, d}, d, rng));
            blk.wo = reg.add(p + "attn.wo", detail::he_uniform({d, d}, d, rng));
            blk.bo = reg.add(p + "attn.bo", Tensor::zeros({d}));
            blk.ln1_g = reg.add(p + "ln1.gamma", Tensor::ones({d}), true);
            blk.ln1_b = reg.add(p + "ln1.beta", Tensor::zeros({d}), true);
            blk.ffn_w1 = reg.add(p + "ffn.w1", detail::he_uniform({d, cfg.ffn_hidden()}, d, rng));
            blk.ffn_b1 = reg.add(p + "ffn.b1", Tensor::zeros({cfg.ffn_hidden()}));
            blk.ffn_w2 =
                reg.add(p + "ffn.w2", detail::he_uniform({cfg.ffn_hidden(), d}, cfg.ffn_hidden(), rng));
            blk.ffn_b2 = reg.add(p + "ffn.b2", Tensor::zeros({d}));
            blk.ln2_g = reg.add(p + "ln2.gamma", Tensor::ones({d}), true);
            blk.ln2_b = reg.add(p + "ln2.beta", Tensor::zeros({d}), true);
            blocks_.push_back(blk);
        }
        for (std::size_t s = 0; s < cfg.defm_layers.size(); ++s)
            defms_.emplace_back(reg, s, d, rng);

        // final fusion: 1x1 conv over [token channels ; CNN channels],
        // initialized to pass tokens through plus a faint CNN contribution
        const std::size_t cmatch = kCnnChannels[cfg.fuse_level()];
        Tensor fw = detail::he_uniform({d, d + cmatch, 1, 1}, d + cmatch, rng);
        for (std::size_t i = 0; i < d + cmatch; ++i)
            for (std::size_t o = 0; o < d; ++o) {
                double& v = fw.mutable_values()[o * (d + cmatch) + i];
                v = i < d ? (i == o ? 1.0 : 0.0) : v * 0.1;
            }
        fuse_w_ = reg.add("vit.fuse.weight", fw);
        fuse_b_ = reg.add("vit.fuse.bias", Tensor::zeros({d}));
    }

    const ModelConfig& config() const { return cfg_; }
    const CnnBackbone& cnn() const { return cnn_; }
    const MaskRefiner& refiner() const { return refiner_; }

    TokenSequence embed(const Tensor& patches) const {
        detail::check(patches.rank() == 3 && patches.dim(2) == patch_proj_.dim(0),
                      "embed: patches " + detail::shape_str(patches.shape()) +
                          " do not match projection " + detail::shape_str(patch_proj_.shape()));
        detail::check(patches.dim(1) == cfg_.tokens(), "embed: token count mismatch");
        Tensor z = matmul(patches, patch_proj_);
        return TokenSequence{add(z, pos_embed_), pos_embed_};
    }

    MhaResult multi_head_attention(const Tensor& z, std::size_t layer) const {
        const Block& blk = blocks_[layer];
        const std::size_t b = z.dim(0), n = z.dim(1), d = z.dim(2);
        const std::size_t h = cfg_.heads, dh = d / h;
        auto heads_of = [&](const Tensor& m) {
            return permute(reshape(m, {b, n, h, dh}), {0, 2, 1, 3}); // (B,h,N,dh)
        };
        Tensor q = heads_of(matmul(z, blk.wq));
        Tensor k = heads_of(matmul(z, blk.wk));
        Tensor v = heads_of(matmul(z, blk.wv));
        Tensor scores = mul_scalar(matmul(q, transpose(k)), 1.0 / std::sqrt(double(dh)));
        Tensor probs = softmax(scores, 3); // (B,h,N,N)
        Tensor ctx = matmul(probs, v);     // (B,h,N,dh)
        Tensor merged = reshape(permute(ctx, {0, 2, 1, 3}), {b, n, d});
        return MhaResult{add(matmul(merged, blk.wo), blk.bo), probs};
    }

    // One encoder layer: residual multi-head attention, then the LN/FFN
    // sandwich LN(FFN(LN(Z')) + Z').
    Tensor attention_block(const Tensor& z, std::size_t layer) const {
        detail::check(layer < blocks_.size(), "attention_block: layer out of range");
        const Block& blk = blocks_[layer];
        Tensor zp = add(multi_head_attention(z, layer).output, z);
        Tensor inner = layer_norm(zp, blk.ln1_g, blk.ln1_b);
        Tensor ffn = add(matmul(gelu(add(matmul(inner, blk.ffn_w1), blk.ffn_b1)), blk.ffn_w2),
                         blk.ffn_b2);
        return layer_norm(add(ffn, zp), blk.ln2_g, blk.ln2_b);
    }

    // Refined masks are supplied per fusion stage in training mode and
    // produced internally from CNN features at inference.
    Output forward(const Tensor& image, const std::vector<Tensor>& refined_masks,
                   Mode mode) const {
        PyramidFeatures pyramid = cnn_.forward(image);
        std::vector<Tensor> masks;
        if (mode == Mode::training) {
            detail::check(refined_masks.size() == cfg_.defm_layers.size(),
                          "forward: training mode needs one refined mask per fusion stage (" +
                              std::to_string(cfg_.defm_layers.size()) + "), got " +
                              std::to_string(refined_masks.size()));
            masks = refined_masks;
        } else {
            for (std::size_t s = 0; s < cfg_.defm_layers.size(); ++s)
                masks.push_back(refiner_.refine(s, {}, pyramid.level(s), Mode::inferring));
        }
        return run_layers(image, std::move(pyramid), std::move(masks), mode);
    }

    // Pipeline surface: builds refined masks internally from per-image coarse
    // density maps (training branch) or CNN features alone (inference).
    Output forward_with_density(const Tensor& image, const std::vector<DensityMap>& coarse,
                                Mode mode) const {
        PyramidFeatures pyramid = cnn_.forward(image);
        std::vector<Tensor> masks;
        for (std::size_t s = 0; s < cfg_.defm_layers.size(); ++s)
            masks.push_back(mode == Mode::training
                                ? refiner_.refine(s, coarse, pyramid.level(s), Mode::training)
                                : refiner_.refine(s, {}, pyramid.level(s), Mode::inferring));
        return run_layers(image, std::move(pyramid), std::move(masks), mode);
    }

    // Token position rearrangement plus channel concat with the matching CNN
    // level, then a 1x1 conv back to D channels: -> (B, D, H/P, W/P).
    Tensor fuse_final(const Tensor& tokens, const Tensor& cnn_level) const {
        const std::size_t b = tokens.dim(0), d = tokens.dim(2);
        const std::size_t gh = cfg_.grid_h(), gw = cfg_.grid_w();
        detail::check(cnn_level.rank() == 4 && cnn_level.dim(2) == gh && cnn_level.dim(3) == gw,
                      "fuse_final: CNN level " + detail::shape_str(cnn_level.shape()) +
                          " does not match token grid " + std::to_string(gh) + "x" +
                          std::to_string(gw));
        Tensor grid = permute(reshape(tokens, {b, gh, gw, d}), {0, 3, 1, 2}); // (B,D,gh,gw)
        Tensor cat = concat({grid, cnn_level}, 1);
        return conv2d(cat, fuse_w_, fuse_b_, 1, 0);
    }

private:
    struct Block {
        Tensor wq, wk, wv, wo, bo;
        Tensor ln1_g, ln1_b;
        Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
        Tensor ln2_g, ln2_b;
    };

    Output run_layers(const Tensor& image, PyramidFeatures pyramid, std::vector<Tensor> masks,
                      Mode mode) const {
        Output out;
        Tensor z = embed(patchify(image, cfg_.patch)).tokens;
        std::size_t stage = 0;
        for (std::size_t l = 0; l < cfg_.depth; ++l) {
            if (stage < cfg_.defm_layers.size() && cfg_.defm_layers[stage] == l) {
                Tensor mask2 = reshape(masks[stage], {z.dim(0), cfg_.tokens()});
                DefmOutput defm = defms_[stage].forward(z, mask2, mode);
                out.focus_probs.push_back(defm.focus_probs);
                out.focus_logits.push_back(defm.focus_logits);
                out.refined_masks.push_back(masks[stage]);
                z = (mode == Mode::inferring && cfg_.hard_gating)
                        ? apply_hard_focus(z, defm.focus_probs, cfg_.keep_ratio)
                        : defm.tokens;
                ++stage;
            }
            z = attention_block(z, l);
        }
        out.tokens = z;
        out.pyramid = std::move(pyramid);
        return out;
    }

    ModelConfig cfg_;
    CnnBackbone cnn_;
    MaskRefiner refiner_;
    Tensor patch_proj_, pos_embed_;
    Tensor fuse_w_, fuse_b_;
    std::vector<Block> blocks_;
    std::vector<DensityFusion> defms_;
};

} // namespace densevit
