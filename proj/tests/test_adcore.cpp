// Copyright 2026 The BLO-Inst Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>

#include "bloinst/adcore.hpp"
#include "bloinst/error.hpp"
#include "doctest.h"
#include "op_cases.hpp"

using namespace bloinst;
using namespace bloinst::ad;

TEST_CASE("forward values") {
    const Tensor s = add(Tensor::vector({1, 2}), Tensor::vector({3, 4}));
    CHECK(s[0] == 4.0);
    CHECK(s[1] == 6.0);
    CHECK(sigmoid(Tensor::scalar(0.0)).item() == 0.5);

    const Tensor m = matmul(Tensor::full({2, 3}, 1.0), Tensor::full({3, 2}, 1.0));
    CHECK(m.shape() == Shape{2, 2});
    for (double v : m.values()) {
        CHECK(v == 3.0);
    }
}

TEST_CASE("shape mismatch names both shapes") {
    try {
        add(Tensor::zeros({2, 3}), Tensor::zeros({3, 2}));
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(std::string(e.what()).find("[2,3]") != std::string::npos);
        CHECK(std::string(e.what()).find("[3,2]") != std::string::npos);
    }
    CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), Error);
    CHECK_THROWS_AS(conv2d(Tensor::zeros({1, 1, 4, 4}), Tensor::zeros({1, 1, 3, 3}), Tensor(), 3, 0), Error);
}

TEST_CASE("backward examples") {
    {
        Tape tape;
        const Tensor x = tape.leaf(Tensor::vector({2.0}));
        const Gradients g = tape.backward(sum(mul(x, x)));
        CHECK(g.of(x)[0] == 4.0);
    }
    {
        Tape tape;
        const Tensor w = tape.leaf(Tensor::vector({0.0}));
        const Tensor x = Tensor::vector({3.0});
        const Gradients g = tape.backward(sum(sigmoid(mul(w, x))));
        CHECK(g.of(w)[0] == doctest::Approx(0.75).epsilon(1e-15));
    }
    {
        Tape tape;
        const Tensor x = tape.leaf(Tensor::vector({1, 2, 3, 4}));
        const Gradients g = tape.backward(mean(x));
        const Tensor gx = g.of(x);
        for (double v : gx.values()) {
            CHECK(v == 0.25);
        }
    }
}

TEST_CASE("non-scalar root rejected") {
    Tape tape;
    const Tensor x = tape.leaf(Tensor::vector({1, 2}));
    CHECK_THROWS_AS(tape.backward(mul(x, x)), Error);
}

TEST_CASE("untracked operands leave no tape entries") {
    Tape tape;
    const Tensor w = Tensor::full({3, 3}, 0.5);
    const Tensor x = tape.leaf(Tensor::full({3, 1}, 1.0));
    const Tensor before = matmul(w, w);
    CHECK_FALSE(before.requires_grad());
    CHECK(tape.size() == 1);
    const Tensor y = matmul(w, x);
    CHECK(y.requires_grad());
    CHECK(tape.size() == 2);
    CHECK(tape.entry(1).inputs[0] == -1);
}

TEST_CASE("finite_diff_grad examples") {
    auto square = [](const Tensor& x) { return x[0] * x[0]; };
    CHECK(std::abs(finite_diff_grad(square, Tensor::vector({3.0}), 1e-5)[0] - 6.0) < 1e-8);
    auto sin_sum = [](const Tensor& x) { return std::sin(x[0]); };
    CHECK(finite_diff_grad(sin_sum, Tensor::vector({0.0}), 1e-5)[0] == doctest::Approx(1.0).epsilon(1e-9));
    auto constant = [](const Tensor&) { return 7.0; };
    const Tensor flat = finite_diff_grad(constant, Tensor::vector({1, 2, 3}), 1e-5);
    for (double v : flat.values()) {
        CHECK(v == 0.0);
    }
    CHECK_THROWS_AS(finite_diff_grad(square, Tensor::vector({1.0}), 0.0), Error);
}

TEST_CASE("every op kind matches central differences") {
    for (const auto& family : testing::op_families()) {
        Rng rng(mix_seed(11, std::hash<std::string>{}(family.name) & 0xffff));
        double worst = 0.0;
        for (int i = 0; i < 100; ++i) {
            auto c = family.make(rng, static_cast<std::uint64_t>(i));
            worst = std::max(worst, testing::grad_check(c.fn, c.inputs));
        }
        INFO(family.name << " worst relative error " << worst);
        CHECK(worst <= 1e-5);
    }
}

TEST_CASE("independent tapes give bit-identical gradients") {
    Rng rng(5);
    const Tensor x = testing::random_tensor(rng, {1, 2, 6, 6});
    const Tensor w = testing::random_tensor(rng, {3, 2, 3, 3});
    auto run = [&] {
        Tape tape;
        const Tensor lw = tape.leaf(w);
        const Tensor y = sigmoid(conv2d(x, lw, Tensor(), 2, 1));
        return tape.backward(mean(mul(y, y))).of(lw);
    };
    const Tensor g1 = run();
    const Tensor g2 = run();
    for (std::size_t i = 0; i < g1.size(); ++i) {
        CHECK(g1[i] == g2[i]);
    }
}

TEST_CASE("slice/concat round trip is exact") {
    Rng rng(9);
    for (int trial = 0; trial < 50; ++trial) {
        const Shape shape{1 + rng.below(3), 2 + rng.below(4), 1 + rng.below(3)};
        const Tensor x = testing::random_tensor(rng, shape);
        for (std::size_t axis = 0; axis < shape.size(); ++axis) {
            std::vector<Tensor> parts;
            std::size_t at = 0;
            while (at < shape[axis]) {
                const std::size_t len = 1 + rng.below(shape[axis] - at);
                parts.push_back(slice(x, axis, at, at + len));
                at += len;
            }
            const Tensor back = concat(parts, axis);
            REQUIRE(back.shape() == x.shape());
            for (std::size_t i = 0; i < x.size(); ++i) {
                CHECK(back[i] == x[i]);
            }
        }
    }
}

TEST_CASE("conv2d output geometry") {
    const Tensor y = conv2d(Tensor::zeros({2, 3, 8, 8}), Tensor::zeros({4, 3, 3, 3}), Tensor::zeros({4}), 2, 1);
    CHECK(y.shape() == Shape{2, 4, 4, 4});
}
