#include <catch2/catch_amalgamated.hpp>

#include <functional>

#include "cmust/embedding.hpp"
#include "cmust/grad_check.hpp"
#include "cmust/rng.hpp"

using namespace cmust;

namespace {

Tensor random_tensor(Rng& rng, Shape shape, double scale = 1.0) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (double& v : t.data) v = rng.normal() * scale;
    return t;
}

// Contracts the op output against fixed random weights to get a scalar, then
// compares reverse-mode gradients of every input parameter against central
// finite differences at the contract tolerance.
void check_gradients(std::vector<Parameter>& inputs,
                     const std::function<Var(ForwardCtx&, std::vector<Parameter>&)>& build,
                     std::uint64_t seed) {
    std::vector<Parameter*> ptrs;
    for (Parameter& p : inputs) ptrs.push_back(&p);

    ForwardCtx probe;
    probe.record = false;
    Rng wrng(seed);
    Tensor contract = random_tensor(wrng, build(probe, inputs).shape());

    ForwardCtx ctx;
    Var loss = dot_const(build(ctx, inputs), contract);
    backward(loss);
    ctx.harvest();

    auto fd = finite_difference_gradient(
        [&] {
            ForwardCtx c;
            c.record = false;
            return dot_const(build(c, inputs), contract).value()[0];
        },
        ptrs, 1e-5);

    for (Parameter& p : inputs) {
        const Tensor& numeric = fd.at(p.name);
        REQUIRE(p.grad_valid);
        for (std::size_t i = 0; i < p.size(); ++i) {
            INFO(p.name << "[" << i << "]: analytic " << p.grad[i] << " vs fd " << numeric[i]);
            CHECK(grad_rel_err(p.grad[i], numeric[i]) <= 1e-4);
        }
    }
}

}  // namespace

TEST_CASE("gradients: linear map and bias", "[autodiff]") {
    Rng rng(1);
    std::vector<Parameter> in;
    in.emplace_back("x", random_tensor(rng, {3, 5, 4}));
    in.emplace_back("w", random_tensor(rng, {4, 6}));
    in.emplace_back("b", random_tensor(rng, {6}));
    check_gradients(in, [](ForwardCtx& c, auto& p) {
        return add_bias(matmul(c.use(p[0]), c.use(p[1])), c.use(p[2]));
    }, 101);
}

TEST_CASE("gradients: relu and sigmoid", "[autodiff]") {
    Rng rng(2);
    std::vector<Parameter> in;
    // keep pre-activations away from the relu kink
    Tensor x = random_tensor(rng, {4, 7});
    for (double& v : x.data)
        if (std::abs(v) < 1e-3) v += 0.5;
    in.emplace_back("x", x);
    check_gradients(in, [](ForwardCtx& c, auto& p) { return relu(c.use(p[0])); }, 102);
    check_gradients(in, [](ForwardCtx& c, auto& p) { return sigmoid(c.use(p[0])); }, 103);
}

TEST_CASE("gradients: add and scale", "[autodiff]") {
    Rng rng(3);
    std::vector<Parameter> in;
    in.emplace_back("a", random_tensor(rng, {2, 3, 4}));
    in.emplace_back("b", random_tensor(rng, {2, 3, 4}));
    check_gradients(in, [](ForwardCtx& c, auto& p) {
        return scale(add(c.use(p[0]), c.use(p[1])), -1.7);
    }, 104);
}

TEST_CASE("gradients: slicing and concatenation", "[autodiff]") {
    Rng rng(4);
    std::vector<Parameter> in;
    in.emplace_back("x", random_tensor(rng, {3, 4, 10}));
    in.emplace_back("y", random_tensor(rng, {3, 4, 3}));
    check_gradients(in, [](ForwardCtx& c, auto& p) {
        Var x = c.use(p[0]);
        Var left = slice_last(x, 0, 4);
        Var right = slice_last(x, 4, 6);
        return concat_last({right, c.use(p[1]), left});
    }, 105);
}

TEST_CASE("gradients: transpose and reshape", "[autodiff]") {
    Rng rng(5);
    std::vector<Parameter> in;
    in.emplace_back("x", random_tensor(rng, {2, 3, 4, 5}));
    check_gradients(in, [](ForwardCtx& c, auto& p) {
        return reshape(transpose12(c.use(p[0])), {6, 4, 5});
    }, 106);
}

TEST_CASE("gradients: batched matmuls", "[autodiff]") {
    Rng rng(6);
    std::vector<Parameter> in;
    in.emplace_back("a", random_tensor(rng, {3, 4, 5}));
    in.emplace_back("b", random_tensor(rng, {3, 5, 2}));
    check_gradients(in, [](ForwardCtx& c, auto& p) { return bmm(c.use(p[0]), c.use(p[1])); }, 107);

    std::vector<Parameter> in2;
    in2.emplace_back("q", random_tensor(rng, {3, 4, 5}));
    in2.emplace_back("k", random_tensor(rng, {3, 6, 5}));
    check_gradients(in2, [](ForwardCtx& c, auto& p) { return bmm_nt(c.use(p[0]), c.use(p[1])); },
                    108);
}

TEST_CASE("gradients: softmax rows", "[autodiff]") {
    Rng rng(7);
    std::vector<Parameter> in;
    in.emplace_back("x", random_tensor(rng, {5, 6}, 2.0));
    check_gradients(in, [](ForwardCtx& c, auto& p) { return softmax_last(c.use(p[0])); }, 109);
}

TEST_CASE("gradients: layer norm", "[autodiff]") {
    Rng rng(8);
    std::vector<Parameter> in;
    in.emplace_back("x", random_tensor(rng, {6, 9}));
    in.emplace_back("g", random_tensor(rng, {9}, 0.5));
    in.emplace_back("b", random_tensor(rng, {9}, 0.5));
    check_gradients(in, [](ForwardCtx& c, auto& p) {
        return layer_norm_last(c.use(p[0]), c.use(p[1]), c.use(p[2]), 1e-5);
    }, 110);
}

TEST_CASE("gradients: broadcasts", "[autodiff]") {
    Rng rng(9);
    std::vector<Parameter> t;
    t.emplace_back("t", random_tensor(rng, {2, 3, 4}));
    check_gradients(t, [](ForwardCtx& c, auto& p) { return tile_axis2(c.use(p[0]), 5); }, 111);

    std::vector<Parameter> n;
    n.emplace_back("n", random_tensor(rng, {5, 4}));
    check_gradients(n, [](ForwardCtx& c, auto& p) { return tile_bt(c.use(p[0]), 2, 3); }, 112);

    std::vector<Parameter> r;
    r.emplace_back("r", random_tensor(rng, {1, 6}));
    check_gradients(r, [](ForwardCtx& c, auto& p) { return tile_rows(c.use(p[0]), 7); }, 113);

    Rng crng(19);
    Tensor pe = random_tensor(crng, {3, 4});
    check_gradients(t, [pe](ForwardCtx& c, auto& p) { return add_tail2(c.use(p[0]), pe); }, 114);
}

TEST_CASE("gradients: embedding lookup", "[autodiff]") {
    Rng rng(10);
    std::vector<Parameter> in;
    in.emplace_back("table", random_tensor(rng, {9, 5}));
    std::vector<int> idx{0, 3, 3, 8, 1, 4};
    check_gradients(in, [idx](ForwardCtx& c, auto& p) {
        return embedding_lookup(c.use(p[0]), idx);
    }, 115);
}

TEST_CASE("gradients: losses", "[autodiff]") {
    Rng rng(11);
    Tensor target = random_tensor(rng, {4, 6});
    std::vector<Parameter> in;
    Tensor pred = random_tensor(rng, {4, 6});
    // keep residuals away from the huber branch switch
    for (std::size_t i = 0; i < pred.size(); ++i)
        if (std::abs(pred[i] - target[i]) > 0.9 && std::abs(pred[i] - target[i]) < 1.1)
            pred[i] = target[i] + 0.5;
    in.emplace_back("pred", pred);
    check_gradients(in, [target](ForwardCtx& c, auto& p) {
        return huber_mean(c.use(p[0]), target, 1.0);
    }, 116);
    check_gradients(in, [target](ForwardCtx& c, auto& p) {
        return mse_mean(c.use(p[0]), target);
    }, 117);
}

TEST_CASE("gradients: composed attention kernel", "[autodiff]") {
    Rng rng(12);
    std::vector<Parameter> in;
    in.emplace_back("x", random_tensor(rng, {2, 2, 5, 6}, 0.7));
    in.emplace_back("wq", random_tensor(rng, {6, 4}, 0.7));
    in.emplace_back("wk", random_tensor(rng, {6, 4}, 0.7));
    in.emplace_back("wv", random_tensor(rng, {6, 4}, 0.7));
    check_gradients(in, [](ForwardCtx& c, auto& p) {
        Var x = c.use(p[0]);
        Var q = reshape(matmul(x, c.use(p[1])), {4, 5, 4});
        Var k = reshape(matmul(x, c.use(p[2])), {4, 5, 4});
        Var v = reshape(matmul(x, c.use(p[3])), {4, 5, 4});
        Var scores = softmax_last(scale(bmm_nt(q, k), 0.5));
        return bmm(scores, v);
    }, 118);
}

TEST_CASE("ops reject non-finite results", "[autodiff]") {
    Tensor big = Tensor::full({2, 2}, 1e308);
    CHECK_THROWS_AS(matmul(constant(big), constant(big)), numeric_error);
}

TEST_CASE("backward accumulates through shared subgraphs", "[autodiff]") {
    // f(x) = sum(x * x) via add(x, x) reuse: d/dx sum((2x)^2 * 0.25) = 2x
    Parameter x("x", Tensor({3}, {1.0, -2.0, 3.0}));
    ForwardCtx ctx;
    Var v = ctx.use(x);
    Var doubled = add(v, v);
    Var loss = dot_const(doubled, Tensor({3}, {1.0, 1.0, 1.0}));
    backward(loss);
    ctx.harvest();
    for (std::size_t i = 0; i < 3; ++i) CHECK(x.grad[i] == Catch::Approx(2.0).margin(1e-12));
}
