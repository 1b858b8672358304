#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "densevit/geometry.hpp"
#include "densevit/params.hpp"
#include "densevit/tensor.hpp"

namespace densevit {

enum class Mode { training, inferring };

// Per-pixel object-density map; same extents as the source image. Values are
// nonnegative and may exceed 1 before clipping.
struct DensityMap {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<double> values;

    double at(std::size_t y, std::size_t x) const { return values[y * width + x]; }
};

// Isotropic kernel width from the box extents: geometric-mean extent over 6,
// so 3 sigma is about half the extent.
inline double sigma_from_box(const RotatedBox& b) { return std::sqrt(b.w * b.h) / 6.0; }

// Kernel support radius; contributions beyond 4 sigma are dropped
// (per-pixel error below exp(-8)).
inline constexpr double kGaussianCutoffSigmas = 4.0;

inline double gaussian_contribution(const RotatedBox& b, double x, double y) {
    const double sigma = sigma_from_box(b);
    const double dx = x - b.cx, dy = y - b.cy;
    return std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
}

// Sum of per-box Gaussian kernels evaluated at integer pixel centers,
// truncated at the cutoff radius. Empty box list gives an all-zero map.
inline DensityMap coarse_density_map(const std::vector<RotatedBox>& boxes, std::size_t height,
                                     std::size_t width) {
    detail::check(height > 0 && width > 0, "coarse_density_map: empty extents");
    DensityMap m{height, width, std::vector<double>(height * width, 0.0)};
    for (const RotatedBox& b : boxes) {
        const double sigma = sigma_from_box(b);
        const double r = kGaussianCutoffSigmas * sigma;
        const double r2 = r * r;
        const double inv = 1.0 / (2.0 * sigma * sigma);
        const long y0 = std::max(0L, static_cast<long>(std::ceil(b.cy - r)));
        const long y1 = std::min(static_cast<long>(height) - 1,
                                 static_cast<long>(std::floor(b.cy + r)));
        const long x0 = std::max(0L, static_cast<long>(std::ceil(b.cx - r)));
        const long x1 = std::min(static_cast<long>(width) - 1,
                                 static_cast<long>(std::floor(b.cx + r)));
        for (long y = y0; y <= y1; ++y) {
            const double dy = static_cast<double>(y) - b.cy;
            for (long x = x0; x <= x1; ++x) {
                const double dx = static_cast<double>(x) - b.cx;
                const double d2 = dx * dx + dy * dy;
                if (d2 > r2) continue;
                m.values[static_cast<std::size_t>(y) * width + static_cast<std::size_t>(x)] +=
                    std::exp(-d2 * inv);
            }
        }
    }
    return m;
}

// Average-pools a pixel map onto the (H/P)x(W/P) token grid, row-major token
// order matching patchify.
inline std::vector<double> pool_mask_to_tokens(const DensityMap& mask, std::size_t patch) {
    detail::check(patch > 0 && mask.height % patch == 0 && mask.width % patch == 0,
                  "pool_mask_to_tokens: extents " + std::to_string(mask.height) + "x" +
                      std::to_string(mask.width) + " not divisible by patch " +
                      std::to_string(patch));
    const std::size_t gh = mask.height / patch, gw = mask.width / patch;
    std::vector<double> out(gh * gw, 0.0);
    const double inv = 1.0 / static_cast<double>(patch * patch);
    for (std::size_t gy = 0; gy < gh; ++gy)
        for (std::size_t gx = 0; gx < gw; ++gx) {
            double s = 0.0;
            for (std::size_t py = 0; py < patch; ++py)
                for (std::size_t px = 0; px < patch; ++px)
                    s += mask.at(gy * patch + py, gx * patch + px);
            out[gy * gw + gx] = s * inv;
        }
    return out;
}

// Learnable per-level refinement of density masks on the token grid.
// Training consumes the pooled ground-truth map and a channel-averaged pooled
// CNN feature through a 2->1 1x1 conv; inference uses the feature summary
// alone through a separate 1->1 conv and never reads the ground truth.
class MaskRefiner {
public:
    MaskRefiner() = default;

    MaskRefiner(ParamRegistry& reg, std::size_t levels, std::size_t grid_h, std::size_t grid_w,
                std::size_t patch)
        : grid_h_(grid_h), grid_w_(grid_w), patch_(patch) {
        for (std::size_t i = 0; i < levels; ++i) {
            const std::string p = "refiner.level" + std::to_string(i) + ".";
            train_w_.push_back(reg.add(p + "train.weight", Tensor({2}, {0.5, 0.5})));
            train_b_.push_back(reg.add(p + "train.bias", Tensor::scalar(0.0)));
            infer_w_.push_back(reg.add(p + "infer.weight", Tensor::scalar(1.0)));
            infer_b_.push_back(reg.add(p + "infer.bias", Tensor::scalar(0.0)));
        }
    }

    std::size_t levels() const { return train_w_.size(); }
    std::size_t grid_h() const { return grid_h_; }
    std::size_t grid_w() const { return grid_w_; }

    // Pools a batch of coarse maps to the token grid as a constant tensor of
    // shape (B, 1, grid_h, grid_w).
    Tensor pool_coarse_batch(const std::vector<DensityMap>& maps) const {
        const std::size_t batch = maps.size();
        std::vector<double> data;
        data.reserve(batch * grid_h_ * grid_w_);
        for (const DensityMap& m : maps) {
            auto pooled = pool_mask_to_tokens(m, patch_);
            data.insert(data.end(), pooled.begin(), pooled.end());
        }
        return Tensor({batch, 1, grid_h_, grid_w_}, std::move(data));
    }

    // Spatial pool to the token grid plus channel average: (B,C,fh,fw) ->
    // (B,1,grid_h,grid_w). Feature extents must divide evenly into the grid.
    Tensor pool_feature(const Tensor& feat) const {
        detail::check(feat.rank() == 4, "refine_mask: feature must be (B,C,H,W)");
        const std::size_t fh = feat.dim(2), fw = feat.dim(3);
        detail::check(fh % grid_h_ == 0 && fw % grid_w_ == 0 && fh / grid_h_ == fw / grid_w_,
                      "refine_mask: feature extents " + std::to_string(fh) + "x" +
                          std::to_string(fw) + " do not pool onto token grid " +
                          std::to_string(grid_h_) + "x" + std::to_string(grid_w_));
        const std::size_t window = fh / grid_h_;
        Tensor pooled = window > 1 ? avg_pool2d(feat, window) : feat;
        return mean_axis(pooled, 1, true);
    }

    // Two branches: training fuses the pooled ground truth with the feature
    // summary, inference uses the feature summary alone. Output clipped to
    // [0,1], shape (B, 1, grid_h, grid_w).
    Tensor refine(std::size_t level, const std::vector<DensityMap>& coarse, const Tensor& feat,
                  Mode mode) const {
        detail::check(level < levels(), "refine_mask: level out of range");
        Tensor fpool = pool_feature(feat);
        if (mode == Mode::training) {
            detail::check(coarse.size() == feat.dim(0),
                          "refine_mask: need one coarse map per batch image");
            Tensor mpool = pool_coarse_batch(coarse);
            const Tensor& w = train_w_[level];
            Tensor wm = reshape(narrow(w, 0, 0, 1), {1});
            Tensor wf = reshape(narrow(w, 0, 1, 1), {1});
            Tensor lin = add(add(mul(mpool, expand(wm, mpool.shape())),
                                 mul(fpool, expand(wf, fpool.shape()))),
                             expand(train_b_[level], fpool.shape()));
            return clip(lin, 0.0, 1.0);
        }
        Tensor lin = add(mul(fpool, expand(infer_w_[level], fpool.shape())),
                         expand(infer_b_[level], fpool.shape()));
        return clip(lin, 0.0, 1.0);
    }

private:
    std::vector<Tensor> train_w_, train_b_, infer_w_, infer_b_;
    std::size_t grid_h_ = 0, grid_w_ = 0, patch_ = 0;
};

} // namespace densevit
