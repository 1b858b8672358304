#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "densevit/params.hpp"
#include "densevit/random.hpp"
#include "densevit/tensor.hpp"

namespace densevit {

// Multi-scale features from the four-stage CNN; level i has shape
// (B, C_i, H/2^(i+1), W/2^(i+1)) with C = [16, 32, 64, 128].
struct PyramidFeatures {
    std::vector<Tensor> levels;

    const Tensor& level(std::size_t i) const { return levels[i]; }
};

inline constexpr std::array<std::size_t, 4> kCnnChannels = {16, 32, 64, 128};

// Lightweight four-stage backbone: each stage is conv3x3(stride 2, pad 1),
// GELU, conv3x3(stride 1, pad 1), GELU, halving the spatial extents.
class CnnBackbone {
public:
    CnnBackbone() = default;

    CnnBackbone(ParamRegistry& reg, Rng& rng) {
        std::size_t cin = 1;
        for (std::size_t s = 0; s < 4; ++s) {
            const std::size_t cout = kCnnChannels[s];
            const std::string p = "cnn.stage" + std::to_string(s + 1) + ".";
            w1_[s] = reg.add(p + "conv1.weight",
                             detail::he_uniform({cout, cin, 3, 3}, cin * 9, rng));
            b1_[s] = reg.add(p + "conv1.bias", Tensor::zeros({cout}));
            w2_[s] = reg.add(p + "conv2.weight",
                             detail::he_uniform({cout, cout, 3, 3}, cout * 9, rng));
            b2_[s] = reg.add(p + "conv2.bias", Tensor::zeros({cout}));
            cin = cout;
        }
    }

    PyramidFeatures forward(const Tensor& image) const {
        detail::check(image.rank() == 4 && image.dim(1) == 1,
                      "cnn_forward: input must be (B,1,H,W), got " +
                          detail::shape_str(image.shape()));
        detail::check(image.dim(2) % 16 == 0 && image.dim(3) % 16 == 0,
                      "cnn_forward: extents " + std::to_string(image.dim(2)) + "x" +
                          std::to_string(image.dim(3)) + " must be divisible by 16");
        PyramidFeatures out;
        Tensor x = image;
        for (std::size_t s = 0; s < 4; ++s) {
            x = gelu(conv2d(x, w1_[s], b1_[s], 2, 1));
            x = gelu(conv2d(x, w2_[s], b2_[s], 1, 1));
            out.levels.push_back(x);
        }
        return out;
    }

private:
    std::array<Tensor, 4> w1_, b1_, w2_, b2_;
};

} // namespace densevit
