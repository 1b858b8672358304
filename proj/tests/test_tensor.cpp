#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <sstream>

#include "densevit/gradcheck.hpp"
#include "densevit/random.hpp"
#include "densevit/tensor.hpp"
#include "densevit/tensor_io.hpp"

using namespace densevit;

TEST_CASE("elementwise basics") {
    Tensor a({2}, {1.0, 2.0});
    Tensor b({2}, {3.0, 4.0});
    Tensor c = add(a, b);
    CHECK(c.values() == std::vector<double>{4.0, 6.0});

    CHECK(gelu(Tensor::scalar(0.0)).item() == 0.0);
    CHECK(clip(Tensor::scalar(1.7), 0.0, 1.0).item() == 1.0);
    CHECK(clip(Tensor::scalar(-0.2), 0.0, 1.0).item() == 0.0);
    CHECK(clip(Tensor::scalar(0.5), 0.0, 1.0).item() == 0.5);

    // gelu at a known point: 1.0 * Phi(1.0)
    const double phi1 = 0.5 * (1.0 + std::erf(1.0 / std::sqrt(2.0)));
    CHECK(gelu(Tensor::scalar(1.0)).item() == doctest::Approx(phi1).epsilon(1e-14));
}

TEST_CASE("broadcasting follows trailing-dimension rules") {
    Tensor a({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor row({3}, {10, 20, 30});
    Tensor c = add(a, row);
    CHECK(c.shape() == Shape{2, 3});
    CHECK(c.values() == std::vector<double>{11, 22, 33, 14, 25, 36});

    Tensor col({2, 1}, {100, 200});
    Tensor d = mul(a, col);
    CHECK(d.values() == std::vector<double>{100, 200, 300, 800, 1000, 1200});

    CHECK_THROWS_WITH_AS(add(Tensor::zeros({2, 3}), Tensor::zeros({2, 4})),
                         doctest::Contains("(2,3)"), std::invalid_argument);
    CHECK_THROWS_WITH_AS(add(Tensor::zeros({2, 3}), Tensor::zeros({2, 4})),
                         doctest::Contains("(2,4)"), std::invalid_argument);
}

TEST_CASE("broadcast gradients reduce over expanded dims") {
    Tensor a = Tensor({2, 2}, {1, 2, 3, 4}, true);
    Tensor row = Tensor({2}, {5, 6}, true);
    Tensor loss = sum(mul(a, row));
    backward(loss);
    CHECK(a.grad() == std::vector<double>{5, 6, 5, 6});
    CHECK(row.grad() == std::vector<double>{1 + 3, 2 + 4});
}

TEST_CASE("matmul identity and mismatch error") {
    Tensor eye({2, 2}, {1, 0, 0, 1});
    Tensor m({2, 2}, {1, 2, 3, 4});
    CHECK(matmul(eye, m).values() == m.values());

    CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 2})), std::invalid_argument);
}

TEST_CASE("batched matmul matches per-batch 2-D matmul") {
    Rng rng(11);
    Tensor a = Tensor::randn({3, 2, 4}, rng);
    Tensor b = Tensor::randn({3, 4, 5}, rng);
    Tensor c = matmul(a, b);
    CHECK(c.shape() == Shape{3, 2, 5});
    for (std::size_t bi = 0; bi < 3; ++bi) {
        Tensor a2({2, 4}, std::vector<double>(a.values().begin() + bi * 8,
                                              a.values().begin() + (bi + 1) * 8));
        Tensor b2({4, 5}, std::vector<double>(b.values().begin() + bi * 20,
                                              b.values().begin() + (bi + 1) * 20));
        Tensor c2 = matmul(a2, b2);
        for (std::size_t i = 0; i < 10; ++i)
            CHECK(c.values()[bi * 10 + i] == doctest::Approx(c2.values()[i]).epsilon(1e-15));
    }
}

TEST_CASE("concat and split shape contracts") {
    Tensor a = Tensor::full({1, 4, 3}, 1.0);
    Tensor b = Tensor::full({1, 4, 5}, 2.0);
    Tensor c = concat({a, b}, 2);
    CHECK(c.shape() == Shape{1, 4, 8});

    Tensor whole = Tensor::zeros({1, 4, 8});
    auto [lo, hi] = split_half(whole, 2);
    CHECK(lo.shape() == Shape{1, 4, 4});
    CHECK(hi.shape() == Shape{1, 4, 4});

    // split then concat restores the original
    Rng rng(3);
    Tensor r = Tensor::randn({2, 3, 6}, rng);
    auto [r1, r2] = split_half(r, 2);
    CHECK(concat({r1, r2}, 2).values() == r.values());

    CHECK_THROWS_AS(split_half(Tensor::zeros({1, 4, 7}), 2), std::invalid_argument);
}

TEST_CASE("reshape round-trips bit-exactly and permute is its own inverse") {
    Rng rng(5);
    Tensor a = Tensor::randn({3, 4, 5}, rng);
    Tensor b = reshape(reshape(a, {60}), {3, 4, 5});
    CHECK(b.values() == a.values());

    Tensor p = permute(a, {2, 0, 1});
    CHECK(p.shape() == Shape{5, 3, 4});
    Tensor back = permute(p, {1, 2, 0});
    CHECK(back.values() == a.values());

    // transpose swaps the last two axes
    Tensor m({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor mt = transpose(m);
    CHECK(mt.shape() == Shape{3, 2});
    CHECK(mt.values() == std::vector<double>{1, 4, 2, 5, 3, 6});
}

TEST_CASE("softmax values") {
    Tensor s = softmax(Tensor({2}, {0.0, 0.0}), 0);
    CHECK(s.values()[0] == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(s.values()[1] == doctest::Approx(0.5).epsilon(1e-15));

    // hand oracle: exp(ln 2) = 2, sum = 3
    Tensor t = softmax(Tensor({2}, {std::log(2.0), 0.0}), 0);
    CHECK(t.values()[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-14));
    CHECK(t.values()[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-14));
}

TEST_CASE("softmax rows are probability vectors") {
    Rng rng(17);
    for (int trial = 0; trial < 30; ++trial) {
        Tensor x = Tensor::randn({4, 7}, rng, 3.0);
        Tensor y = softmax(x, 1);
        for (std::size_t r = 0; r < 4; ++r) {
            double s = 0.0;
            for (std::size_t c = 0; c < 7; ++c) {
                const double v = y.values()[r * 7 + c];
                CHECK(v >= 0.0);
                s += v;
            }
            CHECK(std::abs(s - 1.0) <= 1e-12);
        }
    }
}

TEST_CASE("log_softmax agrees with log of softmax") {
    Rng rng(23);
    Tensor x = Tensor::randn({3, 5}, rng, 2.0);
    Tensor a = log_softmax(x, 1);
    Tensor b = softmax(x, 1);
    for (std::size_t i = 0; i < a.numel(); ++i)
        CHECK(a.values()[i] == doctest::Approx(std::log(b.values()[i])).epsilon(1e-12));
}

TEST_CASE("layer_norm constant input and statistics") {
    Tensor gamma = Tensor::ones({4});
    Tensor beta = Tensor::zeros({4});
    Tensor y = layer_norm(Tensor({1, 4}, {1, 1, 1, 1}), gamma, beta);
    for (double v : y.values()) CHECK(std::abs(v) < 1e-12);

    Rng rng(31);
    for (int trial = 0; trial < 25; ++trial) {
        const std::size_t d = 2 + static_cast<std::size_t>(rng.uniform_int(0, 14));
        Tensor x = Tensor::randn({3, d}, rng, 2.0);
        Tensor g1 = Tensor::ones({d});
        Tensor b0 = Tensor::zeros({d});
        Tensor out = layer_norm(x, g1, b0);
        for (std::size_t r = 0; r < 3; ++r) {
            double mu = 0.0, var = 0.0;
            for (std::size_t i = 0; i < d; ++i) mu += out.values()[r * d + i];
            mu /= d;
            for (std::size_t i = 0; i < d; ++i) {
                const double c = out.values()[r * d + i] - mu;
                var += c * c;
            }
            var /= d;
            CHECK(std::abs(mu) < 1e-10);
            CHECK(std::abs(var - 1.0) < 1e-8);
        }
    }

    CHECK_THROWS_AS(layer_norm(Tensor({1, 2}, {1, 2}), Tensor::ones({3}), Tensor::zeros({3})),
                    std::invalid_argument);
}

TEST_CASE("conv2d identity kernel and all-ones oracle") {
    Rng rng(41);
    Tensor x = Tensor::randn({1, 1, 4, 4}, rng);
    Tensor delta({1, 1, 1, 1}, {1.0});
    Tensor zb = Tensor::zeros({1});
    Tensor y = conv2d(x, delta, zb, 1, 0);
    CHECK(y.values() == x.values());

    // 3x3 all-ones kernel over all-ones 4x4 input, pad 0 -> every output 9
    Tensor ones_in = Tensor::ones({1, 1, 4, 4});
    Tensor k = Tensor::ones({1, 1, 3, 3});
    Tensor out = conv2d(ones_in, k, zb, 1, 0);
    CHECK(out.shape() == Shape{1, 1, 2, 2});
    for (double v : out.values()) CHECK(v == doctest::Approx(9.0).epsilon(1e-15));

    CHECK_THROWS_AS(conv2d(Tensor::zeros({1, 2, 4, 4}), Tensor::zeros({1, 3, 3, 3}), zb, 1, 1),
                    std::invalid_argument);
}

TEST_CASE("conv2d matches a brute-force cross-correlation oracle") {
    Rng rng(43);
    const std::size_t B = 2, Cin = 3, H = 5, W = 6, Cout = 4, k = 3;
    for (std::size_t stride : {std::size_t{1}, std::size_t{2}}) {
        for (std::size_t pad : {std::size_t{0}, std::size_t{1}}) {
            Tensor x = Tensor::randn({B, Cin, H, W}, rng);
            Tensor w = Tensor::randn({Cout, Cin, k, k}, rng);
            Tensor bias = Tensor::randn({Cout}, rng);
            Tensor y = conv2d(x, w, bias, stride, pad);
            const std::size_t Ho = (H + 2 * pad - k) / stride + 1;
            const std::size_t Wo = (W + 2 * pad - k) / stride + 1;
            REQUIRE(y.shape() == Shape{B, Cout, Ho, Wo});
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t co = 0; co < Cout; ++co)
                    for (std::size_t ho = 0; ho < Ho; ++ho)
                        for (std::size_t wo = 0; wo < Wo; ++wo) {
                            double acc = bias.values()[co];
                            for (std::size_t ci = 0; ci < Cin; ++ci)
                                for (std::size_t ky = 0; ky < k; ++ky)
                                    for (std::size_t kx = 0; kx < k; ++kx) {
                                        const long iy = static_cast<long>(ho * stride + ky) -
                                                        static_cast<long>(pad);
                                        const long ix = static_cast<long>(wo * stride + kx) -
                                                        static_cast<long>(pad);
                                        if (iy < 0 || iy >= static_cast<long>(H) || ix < 0 ||
                                            ix >= static_cast<long>(W))
                                            continue;
                                        acc += x.values()[((b * Cin + ci) * H + iy) * W + ix] *
                                               w.values()[((co * Cin + ci) * k + ky) * k + kx];
                                    }
                            const double got =
                                y.values()[((b * Cout + co) * Ho + ho) * Wo + wo];
                            CHECK(got == doctest::Approx(acc).epsilon(1e-12));
                        }
        }
    }
}

TEST_CASE("avg_pool2d mean of four") {
    Tensor x({1, 1, 2, 2}, {1, 3, 5, 7});
    Tensor y = avg_pool2d(x, 2);
    CHECK(y.shape() == Shape{1, 1, 1, 1});
    CHECK(y.item() == doctest::Approx(4.0).epsilon(1e-15));
}

TEST_CASE("backward on linear and quadratic losses") {
    Tensor w = Tensor({2}, {1.0, 2.0}, true);
    Tensor x({2}, {3.0, 4.0});
    Tensor loss = sum(mul(w, x));
    backward(loss);
    CHECK(w.grad() == std::vector<double>{3.0, 4.0});

    Tensor w2 = Tensor({2}, {1.0, -2.0}, true);
    Tensor loss2 = sum(mul(w2, w2));
    backward(loss2);
    CHECK(w2.grad() == std::vector<double>{2.0, -4.0});

    CHECK_THROWS_AS(backward(Tensor::zeros({2})), std::invalid_argument);
}

TEST_CASE("gradients accumulate across uses") {
    Tensor w = Tensor::scalar(2.0, true);
    Tensor loss = add(mul(w, w), mul_scalar(w, 3.0)); // w^2 + 3w -> d = 2w + 3 = 7
    backward(loss);
    CHECK(w.grad()[0] == doctest::Approx(7.0).epsilon(1e-15));
}

TEST_CASE("grad_check on closed forms") {
    Tensor x = Tensor::scalar(3.0, true);
    double err = grad_check([&] { return mul(x, x); }, {x});
    CHECK(err < 1e-8);

    // softmax cross-entropy against the known closed-form gradient p - t
    Rng rng(53);
    Tensor logits = Tensor::randn({1, 5}, rng, 2.0);
    logits.set_requires_grad(true);
    std::vector<double> target = {0, 0, 1, 0, 0};
    auto ce = [&] {
        Tensor lsm = log_softmax(logits, 1);
        Tensor t({1, 5}, target);
        return neg(sum(mul(t, lsm)));
    };
    double err2 = grad_check([&] { return ce(); }, {logits});
    CHECK(err2 < 1e-6);

    logits.zero_grad();
    Tensor loss = ce();
    backward(loss);
    Tensor p = softmax(logits.detach(), 1);
    for (std::size_t i = 0; i < 5; ++i)
        CHECK(logits.grad()[i] == doctest::Approx(p.values()[i] - target[i]).epsilon(1e-10));
}

// Every differentiable op: analytic gradient vs central differences on
// randomized small tensors, 20+ seeds.
TEST_CASE("gradient property suite over random seeds") {
    double worst = 0.0;
    for (std::uint64_t seed = 1; seed <= 21; ++seed) {
        Rng rng(seed * 1009);
        Tensor a = Tensor::randn({2, 3, 4}, rng);
        a.set_requires_grad(true);
        Tensor b = Tensor::randn({2, 3, 4}, rng);
        b.set_requires_grad(true);
        Tensor c = Tensor::randn({1, 3, 4}, rng); // broadcast operand
        c.set_requires_grad(true);
        Tensor m1 = Tensor::randn({2, 3, 4}, rng);
        m1.set_requires_grad(true);
        Tensor m2 = Tensor::randn({2, 4, 5}, rng);
        m2.set_requires_grad(true);
        Tensor g = Tensor::randn({4}, rng, 0.5);
        g.set_requires_grad(true);
        Tensor be = Tensor::randn({4}, rng, 0.5);
        be.set_requires_grad(true);
        Tensor img = Tensor::randn({1, 2, 6, 6}, rng);
        img.set_requires_grad(true);
        Tensor ker = Tensor::randn({3, 2, 3, 3}, rng, 0.5);
        ker.set_requires_grad(true);
        Tensor kb = Tensor::randn({3}, rng, 0.1);
        kb.set_requires_grad(true);

        GradCheckOptions opt;
        opt.seed = seed;
        auto run = [&](const std::function<Tensor()>& f, std::vector<Tensor> ps) {
            worst = std::max(worst, grad_check(f, std::move(ps), opt));
        };

        run([&] { return sum(mul(add(a, c), sub(b, c))); }, {a, b, c});
        run([&] { return sum(div(a, add_scalar(mul(b, b), 1.0))); }, {a, b});
        run([&] { return sum(gelu(a)); }, {a});
        run([&] { return sum(exp(mul_scalar(a, 0.3))); }, {a});
        run([&] { return sum(sigmoid(a)); }, {a});
        run([&] { return sum(tanh(a)); }, {a});
        run([&] { return sum(add(sin(a), cos(b))); }, {a, b});
        run([&] { return sum(softplus(a)); }, {a});
        run([&] { return sum(smooth_l1(a, b)); }, {a, b});
        run([&] { return mean(mul(a, a)); }, {a});
        run([&] { return sum(sum_axis(mul(a, b), 1)); }, {a, b});
        run([&] { return sum(matmul(m1, m2)); }, {m1, m2});
        run([&] { return sum(mul(reshape(a, {6, 4}), reshape(b, {6, 4}))); }, {a, b});
        run([&] { return sum(mul(permute(a, {2, 0, 1}), permute(b, {2, 0, 1}))); }, {a, b});
        run([&] { return sum(mul(concat({a, b}, 1), concat({b, a}, 1))); }, {a, b});
        run([&] { return sum(narrow(mul(a, b), 2, 1, 2)); }, {a, b});
        run([&] { return sum(mul(expand(c, {2, 3, 4}), a)); }, {a, c});
        run([&] { return sum(layer_norm(a, g, be)); }, {a, g, be});
        run([&] { return sum(mul(softmax(a, 2), b)); }, {a, b});
        run([&] { return sum(mul(log_softmax(a, 2), b)); }, {a, b});
        run([&] { return sum(conv2d(img, ker, kb, 1, 1)); }, {img, ker, kb});
        run([&] { return sum(mul(avg_pool2d(img, 2), avg_pool2d(img, 2))); }, {img});
        // clip: keep samples away from the bounds so FD stays valid
        run([&] { return sum(clip(mul_scalar(a, 0.1), -10.0, 10.0)); }, {a});
    }
    CHECK(worst < 1e-4);
    MESSAGE("max rel err over op suite: " << worst);
}

TEST_CASE("grad_check rejects non-finite functions and bad eps") {
    Tensor x = Tensor::scalar(0.0, true);
    CHECK_THROWS_AS(grad_check([&] { return log(x); }, {x}), std::runtime_error);

    Tensor y = Tensor::scalar(1.0, true);
    GradCheckOptions opt;
    opt.eps = 1e-2; // outside [1e-7, 1e-3]
    CHECK_THROWS_AS(grad_check([&] { return mul(y, y); }, {y}, opt), std::invalid_argument);
}

TEST_CASE("normalization rejects an empty last axis") {
    CHECK_THROWS_AS(layer_norm(Tensor::zeros({2, 0}), Tensor::ones({0}), Tensor::zeros({0})),
                    std::invalid_argument);
    CHECK_THROWS_AS(softmax(Tensor::zeros({2, 0}), 1), std::invalid_argument);
}

TEST_CASE("TNSR round trip") {
    Rng rng(71);
    Tensor t = Tensor::randn({2, 3, 5}, rng);
    std::ostringstream os(std::ios::binary);
    write_tnsr(os, t);
    const std::string bytes = os.str();
    CHECK(bytes.size() == 8 + 4 + 3 * 8 + 30 * 8);
    CHECK(bytes.substr(0, 4) == "TNSR");
    CHECK(bytes[7] == 1);
    std::istringstream is(bytes, std::ios::binary);
    Tensor back = read_tnsr(is);
    CHECK(back.shape() == t.shape());
    CHECK(back.values() == t.values());

    std::istringstream bad("NOTATNSR stream", std::ios::binary);
    CHECK_THROWS_AS(read_tnsr(bad), std::invalid_argument);
}
