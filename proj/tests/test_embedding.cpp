#include <catch2/catch_amalgamated.hpp>

#include <cstring>

#include "cmust/msti.hpp"
#include "cmust/rng.hpp"

using namespace cmust;

namespace {

ModelConfig micro_cfg() {
    ModelConfig c = tiny_profile();
    c.layout = {2, 2, 2, 2};
    c.h_obs = 2;
    c.attn = {2, 8, 1, 4, 1};
    c.d_f = 2;
    c.d_y = 2;
    c.input_len = 2;
    c.horizon = 2;
    c.c_in = 1;
    c.slots_per_day = 2;
    c.nodes = 2;
    return c;
}

void set_param(Model& m, const std::string& name, std::vector<double> vals) {
    Parameter& p = m.params().at(name);
    REQUIRE(p.size() == vals.size());
    p.value.data = std::move(vals);
}

void zero_param(Model& m, const std::string& name) { m.params().at(name).value.fill(0.0); }

Tensor random_tensor(Rng& rng, Shape shape) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (double& v : t.data) v = rng.normal();
    return t;
}

}  // namespace

TEST_CASE("profiles carry the documented widths", "[embedding]") {
    ModelConfig tiny = tiny_profile();
    CHECK(tiny.layout.d_h() == 32);
    CHECK(tiny.layout.d_obs == 8);
    CHECK(tiny.layout.d_s == 4);
    CHECK(tiny.layout.d_t == 12);
    CHECK(tiny.layout.d_p == 8);

    ModelConfig full = full_profile();
    CHECK(full.layout.d_obs == 24);
    CHECK(full.layout.d_s == 12);
    CHECK(full.layout.d_t == 60);
    CHECK(full.layout.d_p == 72);
    CHECK(full.layout.d_h() == 168);  // equals the self-attention width
    CHECK(full.attn.d_self == 168);
    CHECK(full.attn.d_cross == 24);
    CHECK(full.attn.heads == 4);
    CHECK(full.attn.ffn_hidden == 256);
    CHECK(full.h_obs == 64);
}

TEST_CASE("embed_observations with zero weights is zero", "[embedding]") {
    Model m(micro_cfg(), 1);
    for (const char* n : {"embed/obs/w1", "embed/obs/b1", "embed/obs/w2", "embed/obs/b2"})
        zero_param(m, n);
    ForwardCtx ctx;
    Var e = m.embed_observations(ctx, Tensor::full({1, 2, 2, 1}, 3.0));
    for (double v : e.value().data) CHECK(v == 0.0);
}

TEST_CASE("embed_observations keeps the full-profile shape", "[embedding]") {
    ModelConfig cfg = full_profile();
    cfg.nodes = 4;
    cfg.slots_per_day = 4;
    cfg.c_in = 3;
    Model m(cfg, 2);
    ForwardCtx ctx;
    Rng rng(3);
    Var e = m.embed_observations(ctx, random_tensor(rng, {2, 12, 4, 3}));
    CHECK(e.shape() == Shape{2, 12, 4, 24});
}

TEST_CASE("embed_observations matches manual matrix arithmetic", "[embedding]") {
    Model m(micro_cfg(), 4);
    set_param(m, "embed/obs/w1", {1.0, -1.0});
    set_param(m, "embed/obs/b1", {0.5, 0.25});
    set_param(m, "embed/obs/w2", {1.0, 2.0, 3.0, 4.0});
    set_param(m, "embed/obs/b2", {0.1, -0.1});
    ForwardCtx ctx;
    Var e = m.embed_observations(ctx, Tensor({1, 1, 1, 1}, {0.7}));
    // h = relu([0.7 + 0.5, -0.7 + 0.25]) = [1.2, 0]
    CHECK(e.value()[0] == Catch::Approx(1.2 * 1.0 + 0.1).margin(1e-12));
    CHECK(e.value()[1] == Catch::Approx(1.2 * 2.0 - 0.1).margin(1e-12));
}

TEST_CASE("embed_spatial zero weights and manual case", "[embedding]") {
    Model m(micro_cfg(), 5);
    zero_param(m, "embed/spatial/w");
    zero_param(m, "embed/spatial/b");
    ForwardCtx ctx;
    Tensor coords({2, 2}, {0.0, 1.0, 1.0, 0.5});
    Var z = m.embed_spatial(ctx, coords);
    for (double v : z.value().data) CHECK(v == 0.0);

    set_param(m, "embed/spatial/w", {1.0, 0.0, 0.0, 2.0});
    set_param(m, "embed/spatial/b", {0.5, -0.5});
    ForwardCtx ctx2;
    Var e = m.embed_spatial(ctx2, coords);
    CHECK(e.value()[0] == Catch::Approx(0.5).margin(1e-12));
    CHECK(e.value()[1] == Catch::Approx(1.5).margin(1e-12));
    CHECK(e.value()[2] == Catch::Approx(1.5).margin(1e-12));
    CHECK(e.value()[3] == Catch::Approx(0.5).margin(1e-12));

    CHECK(full_profile().layout.d_s == 12);
}

TEST_CASE("embed_temporal determinism and zero case", "[embedding]") {
    ModelConfig cfg = micro_cfg();
    cfg.slots_per_day = 4;
    Model m(cfg, 6);
    std::vector<int> tod{1, 3, 1};
    std::vector<int> dow{2, 5, 2};
    Tensor ts({3, 6}, {0.1, 0.2, 0.3, 0.4, 0.5, 0.0, 0.9, 0.8, 0.7, 0.6, 0.5, 0.0,
                       0.1, 0.2, 0.3, 0.4, 0.5, 0.0});
    ForwardCtx ctx;
    Var e = m.embed_temporal(ctx, tod, dow, ts);
    CHECK(e.shape() == Shape{3, cfg.layout.d_t});
    // rows 0 and 2 share identical indicators
    for (std::size_t j = 0; j < cfg.layout.d_t; ++j)
        CHECK(e.value()[j] == e.value()[2 * cfg.layout.d_t + j]);

    for (const char* n : {"embed/temporal/dow_table", "embed/temporal/tod_table",
                          "embed/temporal/ts_w", "embed/temporal/ts_b", "embed/temporal/out_w",
                          "embed/temporal/out_b"})
        zero_param(m, n);
    ForwardCtx ctx2;
    Var z = m.embed_temporal(ctx2, tod, dow, ts);
    for (double v : z.value().data) CHECK(v == 0.0);

    CHECK_THROWS_AS(m.embed_temporal(ctx2, {9}, {0}, Tensor::zeros({1, 6})), shape_error);
    CHECK_THROWS_AS(m.embed_temporal(ctx2, {0}, {7}, Tensor::zeros({1, 6})), shape_error);
}

TEST_CASE("assemble_representation reads back its slices", "[embedding]") {
    ModelConfig cfg = micro_cfg();
    Model m(cfg, 7);
    Rng rng(8);
    std::size_t b = 2, t = 2, n = 2;
    Tensor e_obs = random_tensor(rng, {b, t, n, cfg.layout.d_obs});
    Tensor e_s = random_tensor(rng, {n, cfg.layout.d_s});
    Tensor e_t = random_tensor(rng, {b, t, cfg.layout.d_t});
    Tensor prompt = random_tensor(rng, {n, cfg.layout.d_p});
    ForwardCtx ctx;
    Var h = m.assemble_representation(ctx, constant(e_obs), constant(e_s), constant(e_t),
                                      constant(prompt));
    REQUIRE(h.shape() == Shape{b, t, n, cfg.layout.d_h()});

    const SliceLayout& L = cfg.layout;
    Var back = slice_last(h, L.obs_offset(), L.d_obs);
    for (std::size_t i = 0; i < e_obs.size(); ++i) CHECK(back.value()[i] == e_obs[i]);

    Var sp = slice_last(h, L.s_offset(), L.d_s);
    Var tm = slice_last(h, L.t_offset(), L.d_t);
    Var pr = slice_last(h, L.p_offset(), L.d_p);
    for (std::size_t bb = 0; bb < b; ++bb)
        for (std::size_t tt = 0; tt < t; ++tt)
            for (std::size_t nn = 0; nn < n; ++nn) {
                for (std::size_t j = 0; j < L.d_s; ++j)
                    CHECK(sp.value()[(((bb * t) + tt) * n + nn) * L.d_s + j] ==
                          e_s[nn * L.d_s + j]);
                for (std::size_t j = 0; j < L.d_t; ++j)
                    CHECK(tm.value()[(((bb * t) + tt) * n + nn) * L.d_t + j] ==
                          e_t[(bb * t + tt) * L.d_t + j]);
                // prompt broadcast: identical across b and t at fixed n
                for (std::size_t j = 0; j < L.d_p; ++j)
                    CHECK(pr.value()[(((bb * t) + tt) * n + nn) * L.d_p + j] ==
                          prompt[nn * L.d_p + j]);
            }
}

TEST_CASE("assemble_representation rejects width mismatches", "[embedding]") {
    ModelConfig cfg = micro_cfg();
    Model m(cfg, 9);
    ForwardCtx ctx;
    Tensor bad = Tensor::zeros({1, 1, 2, cfg.layout.d_obs + 1});
    CHECK_THROWS_AS(m.assemble_representation(ctx, constant(bad),
                                              constant(Tensor::zeros({2, cfg.layout.d_s})),
                                              constant(Tensor::zeros({1, 1, cfg.layout.d_t})),
                                              constant(Tensor::zeros({2, cfg.layout.d_p}))),
                    shape_error);
}

TEST_CASE("layout arithmetic", "[embedding]") {
    SliceLayout tiny{8, 4, 12, 8};
    CHECK(tiny.d_h() == 32);
    CHECK(tiny.obs_offset() == 0);
    CHECK(tiny.s_offset() == 8);
    CHECK(tiny.t_offset() == 12);
    CHECK(tiny.p_offset() == 24);

    SliceLayout bad{0, 1, 1, 1};
    CHECK_THROWS_AS(bad.validate(), config_error);
}
