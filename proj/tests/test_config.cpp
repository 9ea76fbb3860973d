#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>

#include "cmust/config.hpp"

using namespace cmust;

namespace {

Json minimal() {
    return Json{{"data", {{"synthetic", Json::object()}}}};
}

}  // namespace

TEST_CASE("config fills profile defaults", "[config]") {
    RunConfig c = parse_run_config(minimal());
    CHECK(c.mode == "roada");
    CHECK(c.profile == "tiny");
    CHECK(c.seed == 0);
    CHECK(c.model.layout.d_h() == 32);
    CHECK(c.train.batch_size == 16);
    CHECK(c.train.patience == 5);
    CHECK(c.train.lr == 1e-3);
    CHECK(c.train.weight_decay == 3e-4);
    CHECK(c.roada.variance_threshold == 1e-6);
    CHECK(c.roada.rolling_lr_factor == 0.01);
    CHECK(c.roada.base_lr == c.train.lr);
    CHECK(c.synth.tasks == 3);
    CHECK(c.synth.seed == c.seed);

    Json full = minimal();
    full["profile"] = "full";
    RunConfig f = parse_run_config(full);
    CHECK(f.model.layout.d_h() == 168);
    CHECK(f.model.attn.heads == 4);
    CHECK(f.train.batch_size == 32);
    CHECK(f.train.patience == 10);
}

TEST_CASE("config rejects unknown keys everywhere", "[config]") {
    Json bad = minimal();
    bad["oops"] = 1;
    CHECK_THROWS_WITH(parse_run_config(bad), Catch::Matchers::ContainsSubstring("oops"));

    Json bad_train = minimal();
    bad_train["train"] = {{"learning_rate", 0.1}};
    CHECK_THROWS_WITH(parse_run_config(bad_train),
                      Catch::Matchers::ContainsSubstring("learning_rate"));

    Json bad_nested = minimal();
    bad_nested["roada"] = {{"autoencoder", {{"width", 4}}}};
    CHECK_THROWS_WITH(parse_run_config(bad_nested), Catch::Matchers::ContainsSubstring("width"));

    Json bad_data = minimal();
    bad_data["data"]["synthetic"]["node_count"] = 4;
    CHECK_THROWS_WITH(parse_run_config(bad_data),
                      Catch::Matchers::ContainsSubstring("node_count"));
}

TEST_CASE("config demands exactly one data source", "[config]") {
    CHECK_THROWS_AS(parse_run_config(Json::object()), config_error);
    Json both = minimal();
    both["data"]["paths"] = {"a"};
    CHECK_THROWS_AS(parse_run_config(both), config_error);
    Json neither{{"data", Json::object()}};
    CHECK_THROWS_AS(parse_run_config(neither), config_error);
}

TEST_CASE("model overrides recompute the self-attention width", "[config]") {
    Json j = minimal();
    j["model"] = {{"d_p", 16}, {"heads", 4}};
    RunConfig c = parse_run_config(j);
    CHECK(c.model.layout.d_p == 16);
    CHECK(c.model.layout.d_h() == 40);
    CHECK(c.model.attn.d_self == 40);
    CHECK(c.model.attn.heads == 4);

    // invalid width/head combinations surface at validation
    Json odd = minimal();
    odd["model"] = {{"heads", 16}};  // d_cross 8 is not divisible by 16
    RunConfig bad = parse_run_config(odd);
    CHECK_THROWS_AS(bad.model.validate(), config_error);
}

TEST_CASE("ablation mode needs a flag and sweep axes parse", "[config]") {
    Json j = minimal();
    j["mode"] = "ablation";
    CHECK_THROWS_AS(parse_run_config(j), config_error);
    j["ablation"] = {{"no_cross_interaction", true}};
    RunConfig c = parse_run_config(j);
    CHECK(c.ablation.no_cross_interaction);

    Json s = minimal();
    s["sweep"] = {{"d_p", {18, 36}}, {"heads", {2, 4}}, {"variance_threshold", {1e-6, 1e-7}}};
    RunConfig cs = parse_run_config(s);
    CHECK(cs.sweep.d_p == std::vector<std::size_t>{18, 36});
    CHECK(cs.sweep.heads == std::vector<std::size_t>{2, 4});
    CHECK(cs.sweep.variance_threshold == std::vector<double>{1e-6, 1e-7});
}

TEST_CASE("resolved config echoes every effective setting", "[config]") {
    Json j = minimal();
    j["seed"] = 7;
    j["train"] = {{"max_epochs", 12}};
    RunConfig c = parse_run_config(j);
    Json r = resolved_config_json(c);
    CHECK(r.at("seed") == 7);
    CHECK(r.at("train").at("max_epochs") == 12);
    CHECK(r.at("train").at("lr") == 1e-3);
    CHECK(r.at("model").at("d_obs") == 8);
    CHECK(r.at("roada").at("autoencoder").at("latent") == 16);
    // the echo parses back to the same configuration
    Json again = Json{{"mode", r.at("mode")},
                      {"profile", r.at("profile")},
                      {"seed", r.at("seed")},
                      {"data", r.at("data")},
                      {"train", r.at("train")}};
    RunConfig c2 = parse_run_config(again);
    CHECK(c2.train.max_epochs == 12);
    CHECK(c2.seed == 7);
}

TEST_CASE("output root env var applies to relative paths", "[config]") {
    setenv("CMUST_OUT_ROOT", "/tmp/cmust_root", 1);
    CHECK(resolve_output_dir("runs/x") == fs::path("/tmp/cmust_root/runs/x"));
    CHECK(resolve_output_dir("/abs/path") == fs::path("/abs/path"));
    CHECK(resolve_output_dir("") == fs::path(""));
    unsetenv("CMUST_OUT_ROOT");
    CHECK(resolve_output_dir("runs/x") == fs::path("runs/x"));
}
