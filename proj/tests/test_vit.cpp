#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "densevit/gradcheck.hpp"
#include "densevit/random.hpp"
#include "densevit/vit.hpp"

using namespace densevit;

namespace {

ModelConfig tiny_cfg() {
    ModelConfig cfg;
    cfg.image_h = cfg.image_w = 16;
    cfg.patch = 8;
    cfg.embed_dim = 8;
    cfg.depth = 2;
    cfg.heads = 2;
    cfg.defm_layers = {1};
    return cfg;
}

} // namespace

TEST_CASE("patchify block order and round trip") {
    // 4x4 image, P=2: patch 0 is the top-left 2x2 block
    std::vector<double> img(16);
    for (int i = 0; i < 16; ++i) img[i] = i;
    Tensor t({1, 1, 4, 4}, img);
    Tensor p = patchify(t, 2);
    CHECK(p.shape() == Shape{1, 4, 4});
    CHECK(std::vector<double>(p.values().begin(), p.values().begin() + 4) ==
          std::vector<double>{0, 1, 4, 5});
    // patch order is row-major over the grid
    CHECK(std::vector<double>(p.values().begin() + 4, p.values().begin() + 8) ==
          std::vector<double>{2, 3, 6, 7});

    // constant image -> every patch vector all-c
    Tensor c = patchify(Tensor::full({2, 1, 8, 8}, 0.7), 4);
    for (double v : c.values()) CHECK(v == 0.7);

    // ramp image reassembles bit-exactly
    Rng rng(3);
    Tensor r = Tensor::randn({2, 1, 12, 8}, rng);
    CHECK(unpatchify(patchify(r, 4), 4, 12, 8).values() == r.values());

    CHECK_THROWS_AS(patchify(Tensor::zeros({1, 1, 9, 8}), 4), std::invalid_argument);
}

TEST_CASE("embed adds positional encoding to projections") {
    ParamRegistry reg;
    Rng rng(5);
    Encoder enc(reg, tiny_cfg(), rng);

    Tensor zero_patches = Tensor::zeros({2, 4, 64});
    TokenSequence ts = enc.embed(zero_patches);
    const Tensor pe = reg.find("vit.pos_embed")->tensor;
    for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t i = 0; i < 32; ++i)
            CHECK(ts.tokens.values()[b * 32 + i] == pe.values()[i]);

    // PE = 0 -> tokens equal projections
    std::fill(pe.node()->value.begin(), pe.node()->value.end(), 0.0);
    Tensor patches = Tensor::randn({1, 4, 64}, rng);
    TokenSequence ts2 = enc.embed(patches);
    Tensor proj = matmul(patches, reg.find("vit.patch_proj")->tensor);
    CHECK(ts2.tokens.values() == proj.values());

    // random case matches matmul+add oracle
    Rng rng2(7);
    ParamRegistry reg2;
    Encoder enc2(reg2, tiny_cfg(), rng2);
    Tensor patches2 = Tensor::randn({2, 4, 64}, rng2);
    TokenSequence ts3 = enc2.embed(patches2);
    Tensor oracle = add(matmul(patches2, reg2.find("vit.patch_proj")->tensor),
                        reg2.find("vit.pos_embed")->tensor);
    CHECK(ts3.tokens.values() == oracle.values());
}

TEST_CASE("single-token attention returns the value row") {
    ModelConfig cfg = tiny_cfg();
    cfg.image_h = cfg.image_w = 16; // one 16x16 patch -> N = 1
    cfg.patch = 16;
    cfg.defm_layers = {};
    ParamRegistry reg;
    Rng rng(11);
    Encoder enc(reg, cfg, rng);

    // output projection = identity, bias 0
    Tensor wo = reg.find("vit.block0.attn.wo")->tensor;
    std::fill(wo.node()->value.begin(), wo.node()->value.end(), 0.0);
    for (std::size_t i = 0; i < 8; ++i) wo.node()->value[i * 8 + i] = 1.0;

    Tensor z = Tensor::randn({1, 1, 8}, rng);
    MhaResult r = enc.multi_head_attention(z, 0);
    Tensor v = matmul(z, reg.find("vit.block0.attn.wv")->tensor);
    for (std::size_t i = 0; i < 8; ++i)
        CHECK(r.output.values()[i] == doctest::Approx(v.values()[i]).epsilon(1e-12));
    // the single attention weight is exactly 1
    for (double p : r.probs.values()) CHECK(p == 1.0);
}

TEST_CASE("attention rows are probability distributions") {
    ParamRegistry reg;
    Rng rng(13);
    Encoder enc(reg, tiny_cfg(), rng);
    Tensor z = Tensor::randn({2, 4, 8}, rng);
    MhaResult r = enc.multi_head_attention(z, 0);
    CHECK(r.probs.shape() == Shape{2, 2, 4, 4});
    for (std::size_t row = 0; row < 2 * 2 * 4; ++row) {
        double s = 0.0;
        for (std::size_t c = 0; c < 4; ++c) s += r.probs.values()[row * 4 + c];
        CHECK(std::abs(s - 1.0) <= 1e-12);
    }
}

TEST_CASE("all-zero attention and FFN weights reduce the block to LN(Z)") {
    ParamRegistry reg;
    Rng rng(17);
    Encoder enc(reg, tiny_cfg(), rng);
    for (const char* nm : {"attn.wq", "attn.wk", "attn.wv", "attn.wo", "attn.bo", "ffn.w1",
                           "ffn.b1", "ffn.w2", "ffn.b2"}) {
        auto& v = reg.find(std::string("vit.block0.") + nm)->tensor.node()->value;
        std::fill(v.begin(), v.end(), 0.0);
    }
    Tensor z = Tensor::randn({1, 4, 8}, rng);
    Tensor out = enc.attention_block(z, 0);
    Tensor ln = layer_norm(z, Tensor::ones({8}), Tensor::zeros({8}));
    for (std::size_t i = 0; i < out.numel(); ++i)
        CHECK(out.values()[i] == doctest::Approx(ln.values()[i]).epsilon(1e-12));
}

TEST_CASE("attention block matches a straight-line scalar oracle") {
    // B=1, N=3, D=4, heads=2, random weights: recompute everything with
    // plain loops and compare to 1e-12
    ModelConfig cfg = tiny_cfg();
    cfg.image_h = 48;
    cfg.image_w = 16; // N = 3
    cfg.patch = 16;
    cfg.embed_dim = 4;
    cfg.heads = 2;
    cfg.defm_layers = {};
    ParamRegistry reg;
    Rng rng(19);
    Encoder enc(reg, cfg, rng);

    const std::size_t N = 3, D = 4, H = 2, DH = 2, HID = cfg.ffn_hidden();
    Tensor z = Tensor::randn({1, N, D}, rng);
    Tensor out = enc.attention_block(z, 0);

    auto W = [&](const char* nm) { return reg.find(std::string("vit.block0.") + nm)->tensor; };
    auto matmul_nd = [&](const std::vector<double>& a, const Tensor& w, std::size_t rows,
                         std::size_t inner, std::size_t cols) {
        std::vector<double> r(rows * cols, 0.0);
        for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t k = 0; k < inner; ++k)
                for (std::size_t j = 0; j < cols; ++j)
                    r[i * cols + j] += a[i * inner + k] * w.values()[k * cols + j];
        return r;
    };

    auto q = matmul_nd(z.values(), W("attn.wq"), N, D, D);
    auto k = matmul_nd(z.values(), W("attn.wk"), N, D, D);
    auto v = matmul_nd(z.values(), W("attn.wv"), N, D, D);

    std::vector<double> ctx(N * D, 0.0);
    for (std::size_t h = 0; h < H; ++h)
        for (std::size_t i = 0; i < N; ++i) {
            std::vector<double> row(N);
            double mx = -1e300;
            for (std::size_t j = 0; j < N; ++j) {
                double dot = 0.0;
                for (std::size_t c = 0; c < DH; ++c)
                    dot += q[i * D + h * DH + c] * k[j * D + h * DH + c];
                row[j] = dot / std::sqrt(double(DH));
                mx = std::max(mx, row[j]);
            }
            double zsum = 0.0;
            for (std::size_t j = 0; j < N; ++j) {
                row[j] = std::exp(row[j] - mx);
                zsum += row[j];
            }
            for (std::size_t j = 0; j < N; ++j)
                for (std::size_t c = 0; c < DH; ++c)
                    ctx[i * D + h * DH + c] += (row[j] / zsum) * v[j * D + h * DH + c];
        }

    auto mha = matmul_nd(ctx, W("attn.wo"), N, D, D);
    std::vector<double> zp(N * D);
    for (std::size_t i = 0; i < N * D; ++i)
        zp[i] = mha[i] + W("attn.bo").values()[i % D] + z.values()[i];

    auto ln_vec = [&](const std::vector<double>& x, std::size_t rows, std::size_t d) {
        std::vector<double> r(x.size());
        for (std::size_t i = 0; i < rows; ++i) {
            double mu = 0.0, var = 0.0;
            for (std::size_t c = 0; c < d; ++c) mu += x[i * d + c];
            mu /= d;
            for (std::size_t c = 0; c < d; ++c) {
                const double dd = x[i * d + c] - mu;
                var += dd * dd;
            }
            var /= d;
            const double rs = 1.0 / std::max(std::sqrt(var), 1e-5);
            for (std::size_t c = 0; c < d; ++c) r[i * d + c] = (x[i * d + c] - mu) * rs;
        }
        return r;
    };

    auto inner = ln_vec(zp, N, D);
    auto h1 = matmul_nd(inner, W("ffn.w1"), N, D, HID);
    for (std::size_t i = 0; i < N; ++i)
        for (std::size_t c = 0; c < HID; ++c) {
            double x = h1[i * HID + c] + W("ffn.b1").values()[c];
            h1[i * HID + c] = 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0)));
        }
    auto h2 = matmul_nd(h1, W("ffn.w2"), N, HID, D);
    std::vector<double> pre(N * D);
    for (std::size_t i = 0; i < N * D; ++i)
        pre[i] = h2[i] + W("ffn.b2").values()[i % D] + zp[i];
    auto expect = ln_vec(pre, N, D);

    for (std::size_t i = 0; i < N * D; ++i)
        CHECK(out.values()[i] == doctest::Approx(expect[i]).epsilon(1e-12));
}

TEST_CASE("attention block is permutation equivariant") {
    ParamRegistry reg;
    Rng rng(23);
    Encoder enc(reg, tiny_cfg(), rng);
    Tensor z = Tensor::randn({1, 4, 8}, rng);
    Tensor out = enc.attention_block(z, 0);

    const std::vector<std::size_t> perm = {2, 0, 3, 1};
    std::vector<double> pz(z.numel());
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t c = 0; c < 8; ++c) pz[i * 8 + c] = z.values()[perm[i] * 8 + c];
    Tensor out_p = enc.attention_block(Tensor({1, 4, 8}, pz), 0);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t c = 0; c < 8; ++c)
            CHECK(out_p.values()[i * 8 + c] ==
                  doctest::Approx(out.values()[perm[i] * 8 + c]).epsilon(1e-12));
}

TEST_CASE("forward with no fusion stages equals the plain-ViT baseline bit-exactly") {
    ModelConfig cfg = tiny_cfg();
    cfg.defm_layers = {};
    ParamRegistry reg;
    Rng rng(29);
    Encoder enc(reg, cfg, rng);
    Tensor img = Tensor::randn({2, 1, 16, 16}, rng);

    Encoder::Output out = enc.forward(img, {}, Mode::inferring);
    CHECK(out.focus_probs.empty());

    // independent baseline composition from the same primitives
    Tensor z = enc.embed(patchify(img, cfg.patch)).tokens;
    for (std::size_t l = 0; l < cfg.depth; ++l) z = enc.attention_block(z, l);
    CHECK(out.tokens.values() == z.values());

    // training mode with zero masks expected also runs (none required)
    Encoder::Output tr = enc.forward(img, {}, Mode::training);
    CHECK(tr.tokens.values() == z.values());
}

TEST_CASE("forward returns one focusing probability per fusion stage") {
    ParamRegistry reg;
    Rng rng(31);
    Encoder enc(reg, tiny_cfg(), rng); // depth 2, stage before layer 1
    Tensor img = Tensor::randn({1, 1, 16, 16}, rng);

    Encoder::Output out = enc.forward(img, {}, Mode::inferring);
    CHECK(out.focus_probs.size() == 1);
    CHECK(out.focus_probs[0].shape() == Shape{1, 4, 2});
    CHECK(out.tokens.shape() == Shape{1, 4, 8});

    // training mode requires the masks
    CHECK_THROWS_AS(enc.forward(img, {}, Mode::training), std::invalid_argument);
    Tensor mask = Tensor::full({1, 1, 2, 2}, 0.5);
    Encoder::Output tr = enc.forward(img, {mask}, Mode::training);
    CHECK(tr.focus_probs.size() == 1);
}

TEST_CASE("full forward shape arithmetic on a mid-size config") {
    ModelConfig cfg;
    cfg.image_h = cfg.image_w = 64;
    cfg.patch = 16;
    cfg.embed_dim = 64;
    cfg.depth = 4;
    cfg.heads = 4;
    cfg.defm_layers = {1};
    ParamRegistry reg;
    Rng rng(37);
    Encoder enc(reg, cfg, rng);
    Tensor img = Tensor::randn({2, 1, 64, 64}, rng);
    Encoder::Output out = enc.forward(img, {}, Mode::inferring);
    CHECK(out.tokens.shape() == Shape{2, 16, 64});
    CHECK(out.focus_probs.size() == 1);
    CHECK(out.pyramid.level(3).shape() == Shape{2, 128, 4, 4});
}

TEST_CASE("fuse_final rearrangement and oracle") {
    ModelConfig cfg = tiny_cfg();
    cfg.defm_layers = {};
    ParamRegistry reg;
    Rng rng(41);
    Encoder enc(reg, cfg, rng); // grid 2x2, fuse level F_3 with 64 channels
    Tensor tokens = Tensor::randn({1, 4, 8}, rng);
    Tensor cnn_level = Tensor::randn({1, 64, 2, 2}, rng);

    // identity over token channels, zero over CNN channels: output is the
    // rearranged token grid
    {
        Tensor fw = reg.find("vit.fuse.weight")->tensor;
        std::fill(fw.node()->value.begin(), fw.node()->value.end(), 0.0);
        for (std::size_t i = 0; i < 8; ++i) fw.node()->value[i * 72 + i] = 1.0;
    }
    Tensor fused = enc.fuse_final(tokens, cnn_level);
    CHECK(fused.shape() == Shape{1, 8, 2, 2});
    // token k maps to grid cell (k / gw, k % gw)
    for (std::size_t k = 0; k < 4; ++k)
        for (std::size_t d = 0; d < 8; ++d)
            CHECK(fused.values()[d * 4 + (k / 2) * 2 + (k % 2)] ==
                  doctest::Approx(tokens.values()[k * 8 + d]).epsilon(1e-15));

    // randomized conv weights: match a reshape+concat+1x1 oracle
    Tensor fw = reg.find("vit.fuse.weight")->tensor;
    Rng rng2(43);
    for (double& v : fw.node()->value) v = rng2.normal(0.0, 0.3);
    Tensor fb = reg.find("vit.fuse.bias")->tensor;
    for (double& v : fb.node()->value) v = rng2.normal(0.0, 0.1);
    Tensor fused2 = enc.fuse_final(tokens, cnn_level);
    for (std::size_t d = 0; d < 8; ++d)
        for (std::size_t cell = 0; cell < 4; ++cell) {
            double acc = fb.values()[d];
            for (std::size_t c = 0; c < 72; ++c) {
                const double in = c < 8 ? tokens.values()[cell * 8 + c]
                                        : cnn_level.values()[(c - 8) * 4 + cell];
                acc += fw.values()[d * 72 + c] * in;
            }
            CHECK(fused2.values()[d * 4 + cell] == doctest::Approx(acc).epsilon(1e-12));
        }

    CHECK_THROWS_AS(enc.fuse_final(tokens, Tensor::zeros({1, 64, 4, 4})), std::invalid_argument);
}

TEST_CASE("config validation") {
    ModelConfig bad = tiny_cfg();
    bad.patch = 5;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

    ModelConfig bad2 = tiny_cfg();
    bad2.embed_dim = 9;
    CHECK_THROWS_AS(bad2.validate(), std::invalid_argument);

    ModelConfig bad3 = tiny_cfg();
    bad3.defm_layers = {5};
    CHECK_THROWS_AS(bad3.validate(), std::invalid_argument);

    ModelConfig ok = tiny_cfg();
    ok.validate();
    CHECK(ok.fuse_level() == 2); // patch 8 -> third CNN level
    CHECK(ModelConfig{}.fuse_level() == 3);
}
