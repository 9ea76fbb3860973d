#include <catch2/catch_amalgamated.hpp>

#include <cstring>

#include "cmust/grad_check.hpp"
#include "cmust/ops.hpp"
#include "cmust/parameter.hpp"
#include "cmust/rng.hpp"

using namespace cmust;

TEST_CASE("softmax matches closed forms", "[numerics]") {
    auto p = softmax({0.0, 0.0});
    CHECK(p[0] == Catch::Approx(0.5).margin(1e-15));
    CHECK(p[1] == Catch::Approx(0.5).margin(1e-15));

    auto q = softmax({std::log(2.0), 0.0});
    CHECK(q[0] == Catch::Approx(2.0 / 3.0).margin(1e-14));
    CHECK(q[1] == Catch::Approx(1.0 / 3.0).margin(1e-14));

    auto r = softmax({1000.0, 0.0});  // max-subtraction keeps this finite
    CHECK(r[0] == Catch::Approx(1.0).margin(1e-12));
    CHECK(r[1] == Catch::Approx(0.0).margin(1e-12));
    CHECK(std::isfinite(r[0]));
}

TEST_CASE("softmax sums to one on random inputs", "[numerics]") {
    Rng rng(7);
    for (int trial = 0; trial < 200; ++trial) {
        std::size_t n = 1 + rng.below(40);
        std::vector<double> x(n);
        for (double& v : x) v = rng.uniform(-50.0, 50.0);
        auto p = softmax(x);
        double sum = 0.0;
        for (double v : p) {
            CHECK(v > 0.0);
            CHECK(v <= 1.0);
            sum += v;
        }
        CHECK(std::abs(sum - 1.0) <= 1e-12);
    }
}

TEST_CASE("softmax rejects bad input", "[numerics]") {
    CHECK_THROWS_AS(softmax({}), shape_error);
    CHECK_THROWS_AS(softmax({1.0, std::numeric_limits<double>::infinity()}), numeric_error);
    CHECK_THROWS_AS(softmax({std::nan("")}), numeric_error);
}

TEST_CASE("layer_norm closed forms", "[numerics]") {
    std::vector<double> ones{1.0, 1.0, 1.0};
    std::vector<double> zeros{0.0, 0.0, 0.0};

    auto constant = layer_norm({5.0, 5.0, 5.0}, ones, zeros, 1e-5);
    for (double v : constant) CHECK(v == Catch::Approx(0.0).margin(1e-9));

    auto centered = layer_norm({1.0, -1.0}, {1.0, 1.0}, {0.0, 0.0}, 0.0);
    CHECK(centered[0] == Catch::Approx(1.0).margin(1e-12));
    CHECK(centered[1] == Catch::Approx(-1.0).margin(1e-12));

    // popvar of {2,4,6} is 8/3
    auto h = layer_norm({2.0, 4.0, 6.0}, ones, zeros, 0.0);
    CHECK(h[0] == Catch::Approx(-1.224745).margin(1e-6));
    CHECK(h[1] == Catch::Approx(0.0).margin(1e-12));
    CHECK(h[2] == Catch::Approx(1.224745).margin(1e-6));

    CHECK_THROWS_AS(layer_norm({1.0, 2.0}, ones, zeros, 1e-5), shape_error);
}

TEST_CASE("huber loss branches and continuity", "[numerics]") {
    Tensor zero({1}, {0.0});
    CHECK(huber_loss(zero, zero, 1.0) == 0.0);

    Tensor pred({1}, {0.5}), target({1}, {0.0});
    CHECK(huber_loss(pred, target, 1.0) == 0.125);

    Tensor pred2({1}, {2.0});
    CHECK(huber_loss(pred2, target, 1.0) == 1.5);

    // both branches evaluate to delta^2/2 at |r| = delta
    for (double delta : {0.25, 1.0, 3.0}) {
        double quad = 0.5 * delta * delta;
        double lin = delta * (delta - 0.5 * delta);
        CHECK(std::abs(quad - lin) <= 1e-15);
        CHECK(std::abs(huber_term(delta, delta) - quad) <= 1e-15);
    }

    Tensor wrong({2}, {0.0, 0.0});
    CHECK_THROWS_AS(huber_loss(pred, wrong, 1.0), shape_error);
}

TEST_CASE("adam first step matches hand computation", "[numerics]") {
    Parameter w("w", Tensor({1}, {1.0}));
    w.grad = Tensor({1}, {1.0});
    w.grad_valid = true;
    adam_step({&w}, {0.1, 0.0, 0.9, 0.999, 1e-8});
    // bias-corrected m-hat = v-hat = 1 at t = 1
    double expect = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8));
    CHECK(w.value[0] == Catch::Approx(expect).margin(1e-12));
    CHECK(w.value[0] == Catch::Approx(1.0 - 0.09999999).margin(1e-7));
}

TEST_CASE("adam leaves zero-gradient weights alone", "[numerics]") {
    Parameter w("w", Tensor({3}, {1.5, -2.0, 0.25}));
    w.grad_valid = true;
    Tensor before = w.value;
    adam_step({&w}, {0.1, 0.0, 0.9, 0.999, 1e-8});
    for (std::size_t i = 0; i < 3; ++i) CHECK(w.value[i] == before[i]);
}

TEST_CASE("adam freeze contract is bit-exact", "[numerics]") {
    Rng rng(11);
    Parameter w("w", Tensor::zeros({64}));
    for (double& v : w.value.data) v = rng.normal();
    for (std::size_t i = 0; i < 64; ++i) w.frozen[i] = i % 3 == 0 ? 1 : 0;
    Tensor before = w.value;
    Tensor m1_before = w.m1, m2_before = w.m2;
    for (int step = 0; step < 5; ++step) {
        for (double& g : w.grad.data) g = rng.normal();
        w.grad_valid = true;
        adam_step({&w}, {0.05, 3e-4, 0.9, 0.999, 1e-8});
    }
    for (std::size_t i = 0; i < 64; ++i) {
        if (w.frozen[i]) {
            CHECK(std::memcmp(&w.value[i], &before[i], sizeof(double)) == 0);
            CHECK(w.m1[i] == m1_before[i]);
            CHECK(w.m2[i] == m2_before[i]);
        } else {
            CHECK(w.value[i] != before[i]);
        }
    }
}

TEST_CASE("adam with all-true freeze mask is the identity", "[numerics]") {
    Rng rng(13);
    Parameter w("w", Tensor::zeros({32}));
    for (double& v : w.value.data) v = rng.normal();
    w.frozen.assign(32, 1);
    Tensor before = w.value;
    for (double& g : w.grad.data) g = rng.normal();
    w.grad_valid = true;
    adam_step({&w}, {0.5, 1e-2, 0.9, 0.999, 1e-8});
    CHECK(std::memcmp(w.value.ptr(), before.ptr(), 32 * sizeof(double)) == 0);
}

TEST_CASE("adam requires gradients on trainable parameters", "[numerics]") {
    Parameter w("w", Tensor({1}, {1.0}));
    CHECK_THROWS_AS(adam_step({&w}, {}), numeric_error);
}

TEST_CASE("finite differences recover analytic derivatives", "[numerics]") {
    Parameter w("w", Tensor({1}, {3.0}));
    auto fd = finite_difference_gradient([&] { return w.value[0] * w.value[0]; }, {&w}, 1e-5);
    CHECK(fd.at("w")[0] == Catch::Approx(6.0).margin(1e-6));

    auto fd_const = finite_difference_gradient([&] { return 42.0; }, {&w}, 1e-5);
    CHECK(fd_const.at("w")[0] == 0.0);

    Parameter v("v", Tensor({2}, {1.0, 2.0}));
    auto fd2 = finite_difference_gradient(
        [&] { return v.value[0] * v.value[0] + v.value[1] * v.value[1]; }, {&v}, 1e-5);
    CHECK(fd2.at("v")[0] == Catch::Approx(2.0).margin(1e-6));
    CHECK(fd2.at("v")[1] == Catch::Approx(4.0).margin(1e-6));
}

TEST_CASE("finite differences restore values bit-exactly", "[numerics]") {
    Parameter w("w", Tensor({3}, {0.1, -0.2, 0.3}));
    Tensor before = w.value;
    finite_difference_gradient([&] { return w.value[0] + w.value[1] + w.value[2]; }, {&w}, 1e-5);
    CHECK(std::memcmp(w.value.ptr(), before.ptr(), 3 * sizeof(double)) == 0);
}
