#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "densevit/optim.hpp"
#include "densevit/params.hpp"
#include "densevit/random.hpp"
#include "densevit/tensor.hpp"

using namespace densevit;

namespace {

ParamRegistry make_single(double w0, bool no_decay = false) {
    ParamRegistry reg;
    reg.add("w", Tensor::scalar(w0), no_decay);
    return reg;
}

} // namespace

TEST_CASE("zero gradient, zero decay leaves params unchanged") {
    ParamRegistry reg = make_single(0.75);
    OptimState st;
    st.weight_decay = 0.0;
    st.init(reg);
    reg[0].tensor.zero_grad();
    adamw_step(reg, st, 1e-4);
    CHECK(reg[0].tensor.item() == 0.75);
    CHECK(st.step == 1);
}

TEST_CASE("decoupled decay with zero gradient") {
    ParamRegistry reg = make_single(1.0);
    OptimState st;
    st.init(reg);
    reg[0].tensor.zero_grad();
    adamw_step(reg, st, 1e-4);
    CHECK(reg[0].tensor.item() == doctest::Approx(1.0 - 1e-4 * 0.01 * 1.0).epsilon(1e-15));

    // no-decay parameters skip the decay term entirely
    ParamRegistry reg2 = make_single(1.0, true);
    OptimState st2;
    st2.init(reg2);
    reg2[0].tensor.zero_grad();
    adamw_step(reg2, st2, 1e-4);
    CHECK(reg2[0].tensor.item() == 1.0);
}

TEST_CASE("single AdamW step closed form") {
    // w=0, g=1: mhat = 1, vhat = 1 after bias correction -> w = -lr/(1+eps')
    ParamRegistry reg = make_single(0.0);
    OptimState st;
    st.init(reg);
    auto& node = *reg[0].tensor.node();
    node.grad.assign(1, 1.0);
    adamw_step(reg, st, 1e-4);
    CHECK(std::abs(reg[0].tensor.item() + 1e-4) < 1e-10);
}

TEST_CASE("NaN gradient raises an error naming the parameter") {
    ParamRegistry reg;
    reg.add("encoder.pos_embed", Tensor::scalar(0.0));
    OptimState st;
    st.init(reg);
    reg[0].tensor.node()->grad.assign(1, std::nan(""));
    CHECK_THROWS_WITH_AS(adamw_step(reg, st, 1e-4), doctest::Contains("encoder.pos_embed"),
                         std::runtime_error);
}

TEST_CASE("global norm clipping rescales gradients") {
    ParamRegistry reg;
    reg.add("a", Tensor({2}, {0.0, 0.0}));
    reg.add("b", Tensor::scalar(0.0));
    reg[0].tensor.node()->grad = {3.0, 0.0};
    reg[1].tensor.node()->grad = {4.0};
    const double norm = clip_grad_norm(reg, 1.0);
    CHECK(norm == doctest::Approx(5.0).epsilon(1e-15));
    CHECK(reg[0].tensor.grad()[0] == doctest::Approx(0.6).epsilon(1e-12));
    CHECK(reg[1].tensor.grad()[0] == doctest::Approx(0.8).epsilon(1e-12));

    // below the threshold nothing changes
    reg[0].tensor.node()->grad = {0.3, 0.0};
    reg[1].tensor.node()->grad = {0.4};
    clip_grad_norm(reg, 1.0);
    CHECK(reg[0].tensor.grad()[0] == 0.3);
    CHECK(reg[1].tensor.grad()[0] == 0.4);
}

TEST_CASE("training steps are bit-deterministic") {
    auto run = [](std::uint64_t seed) {
        Rng rng(seed);
        ParamRegistry reg;
        Tensor w = reg.add("w", Tensor::randn({4, 3}, rng));
        Tensor x = Tensor::randn({3, 1}, rng);
        OptimState st;
        st.init(reg);
        for (int i = 1; i <= 25; ++i) {
            reg.zero_grad();
            Tensor loss = sum(mul(matmul(w, x), matmul(w, x)));
            backward(loss);
            adamw_step(reg, st, lr_schedule(i, st));
        }
        return w.values();
    };
    auto a = run(99);
    auto b = run(99);
    CHECK(a == b);
    auto c = run(100);
    CHECK(a != c);
}

TEST_CASE("lr schedule hits the pinned values exactly") {
    OptimState st;
    st.total_iters = 2000;
    CHECK(lr_schedule(1000, st) == 1e-4);
    CHECK(lr_schedule(2000, st) == 1e-6);
    CHECK(lr_schedule(500, st) == 5e-5);
    CHECK(lr_schedule(0, st) == 1e-4 / 1000.0);
    CHECK(lr_schedule(1, st) == 1e-4 / 1000.0);
    CHECK(lr_schedule(2500, st) == 1e-6); // clamps past the end

    // halfway through the cosine leg
    CHECK(lr_schedule(1500, st) ==
          doctest::Approx(1e-6 + (1e-4 - 1e-6) * 0.5).epsilon(1e-12));

    // monotone: non-decreasing through warmup, non-increasing after
    double prev = 0.0;
    for (int s = 0; s <= 1000; ++s) {
        const double lr = lr_schedule(s, st);
        CHECK(lr >= prev);
        prev = lr;
    }
    for (int s = 1000; s <= 2000; ++s) {
        const double lr = lr_schedule(s, st);
        CHECK(lr <= prev + 1e-18);
        prev = lr;
    }
}

TEST_CASE("warmup truncates when the run is shorter than warmup") {
    OptimState st;
    st.total_iters = 100; // < warmup_iters = 1000
    CHECK(st.effective_warmup() == 50);
    CHECK(lr_schedule(50, st) == 1e-4);
    CHECK(lr_schedule(100, st) == 1e-6);
    CHECK(lr_schedule(25, st) == 5e-5);
}
