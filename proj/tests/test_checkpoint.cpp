#include <catch2/catch_amalgamated.hpp>

#include <cstring>
#include <unistd.h>

#include "cmust/checkpoint.hpp"
#include "cmust/rng.hpp"

using namespace cmust;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) {
        path = fs::temp_directory_path() / ("cmust_ckpt_" + tag + "_" + std::to_string(::getpid()));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("checkpoint round trip is bit-exact", "[checkpoint]") {
    TempDir dir("bits");
    ParameterStore store;
    Rng rng(3);
    Parameter& a = store.add("embed/obs/w1", Tensor::zeros({3, 4}));
    Parameter& b = store.add("head/out/b", Tensor::zeros({7}));
    for (double& v : a.value.data) v = rng.normal() * 1e3;
    for (double& v : b.value.data) v = rng.normal() * 1e-7;
    a.value[0] = -0.0;  // signed zero must survive
    a.value[1] = 1e-308;
    for (std::size_t i = 0; i < b.size(); i += 2) b.frozen[i] = 1;

    save_checkpoint(dir.path, {&a, &b}, Json{{"note", "test"}});
    auto loaded = load_checkpoint(dir.path);
    REQUIRE(loaded.size() == 2);
    CHECK(loaded[0].name == "embed/obs/w1");  // insertion order preserved
    CHECK(loaded[1].name == "head/out/b");
    CHECK(std::memcmp(loaded[0].value.ptr(), a.value.ptr(), a.size() * sizeof(double)) == 0);
    CHECK(std::memcmp(loaded[1].value.ptr(), b.value.ptr(), b.size() * sizeof(double)) == 0);
    CHECK(loaded[1].frozen == b.frozen);
    CHECK(load_checkpoint_meta(dir.path).at("note") == "test");

    // restore into a fresh store with the same registration
    ParameterStore other;
    other.add("embed/obs/w1", Tensor::zeros({3, 4}));
    other.add("head/out/b", Tensor::zeros({7}));
    restore_into(other, loaded);
    CHECK(std::memcmp(other.at("embed/obs/w1").value.ptr(), a.value.ptr(),
                      a.size() * sizeof(double)) == 0);
    CHECK(other.at("head/out/b").frozen == b.frozen);
}

TEST_CASE("checkpoint files use sanitized parameter paths", "[checkpoint]") {
    TempDir dir("names");
    ParameterStore store;
    Parameter& a = store.add("msti/b0/tsi/wq", Tensor::zeros({2, 2}));
    save_checkpoint(dir.path, {&a});
    CHECK(fs::exists(dir.path / "msti__b0__tsi__wq.f64"));
    CHECK(fs::exists(dir.path / "msti__b0__tsi__wq.mask"));
    CHECK(fs::file_size(dir.path / "msti__b0__tsi__wq.f64") == 4 * sizeof(double));
    CHECK(fs::file_size(dir.path / "msti__b0__tsi__wq.mask") == 4);
}

TEST_CASE("checkpoint loading validates shapes and presence", "[checkpoint]") {
    TempDir dir("errors");
    ParameterStore store;
    Parameter& a = store.add("w", Tensor::zeros({4}));
    save_checkpoint(dir.path, {&a});

    ParameterStore wrong;
    wrong.add("w", Tensor::zeros({5}));
    CHECK_THROWS_AS(restore_into(wrong, load_checkpoint(dir.path)), io_error);

    ParameterStore missing;
    missing.add("other", Tensor::zeros({4}));
    CHECK_THROWS_AS(restore_into(missing, load_checkpoint(dir.path)), io_error);

    // truncated value file
    atomic_write(dir.path / "w.f64", "abc");
    CHECK_THROWS_AS(load_checkpoint(dir.path), io_error);
}

TEST_CASE("rewriting a checkpoint leaves identical bytes", "[checkpoint]") {
    TempDir dir("stable");
    ParameterStore store;
    Rng rng(5);
    Parameter& a = store.add("x/y", Tensor::zeros({16}));
    for (double& v : a.value.data) v = rng.normal();
    save_checkpoint(dir.path / "one", {&a});
    save_checkpoint(dir.path / "two", {&a});
    CHECK(read_file(dir.path / "one" / "params.json") ==
          read_file(dir.path / "two" / "params.json"));
    CHECK(read_file(dir.path / "one" / "x__y.f64") == read_file(dir.path / "two" / "x__y.f64"));
}
