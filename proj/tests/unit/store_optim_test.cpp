#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <unistd.h>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "grad2task/adam.hpp"
#include "grad2task/checkpoint.hpp"
#include "grad2task/param_store.hpp"
#include "grad2task/rng.hpp"
#include "grad2task/tensor.hpp"

using namespace g2t;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() / ("g2t_test_" + std::to_string(::getpid()));
        fs::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

} // namespace

TEST_CASE("adam matches a hand-computed two-step reference") {
    const double lr = 0.1, b1 = 0.9, b2 = 0.999, eps = 1e-8;
    ParamStore store;
    store.create("p", Tensor::from_data({2}, {1.0, -2.0}));
    Adam opt(lr, b1, b2, eps);

    std::vector<double> x = {1.0, -2.0};
    std::vector<double> m(2, 0.0), v(2, 0.0);
    for (int t = 1; t <= 2; ++t) {
        backward(sum_all(square(store.get("p"))));
        std::vector<double> g(2);
        for (int i = 0; i < 2; ++i) g[i] = 2.0 * x[i];
        opt.step(store);
        for (int i = 0; i < 2; ++i) {
            m[i] = b1 * m[i] + (1 - b1) * g[i];
            v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i];
            double mh = m[i] / (1 - std::pow(b1, t));
            double vh = v[i] / (1 - std::pow(b2, t));
            x[i] -= lr * mh / (std::sqrt(vh) + eps);
            CHECK(store.get("p").value_at(i) == doctest::Approx(x[i]).epsilon(1e-14));
        }
    }
    CHECK(opt.steps_taken() == 2);
}

TEST_CASE("adam requires a gradient on every trainable parameter") {
    ParamStore store;
    store.create("used", Tensor::from_data({1}, {1.0}));
    store.create("unused", Tensor::from_data({1}, {1.0}));
    Adam opt(0.1);
    backward(sum_all(square(store.get("used"))));
    CHECK_THROWS_AS(opt.step(store), std::runtime_error);
}

TEST_CASE("frozen parameters are skipped even with gradients present") {
    ParamStore store;
    store.create("a", Tensor::from_data({1}, {3.0}));
    store.create("b", Tensor::from_data({1}, {5.0}));
    store.set_trainable("b", false);
    Adam opt(0.1);
    backward(sum_all(square(add(store.get("a"), store.get("b")))));
    opt.step(store);
    CHECK(store.get("a").value_at(0) != 3.0);
    CHECK(store.get("b").value_at(0) == 5.0);
}

TEST_CASE("zero learning rate leaves parameters bit-identical") {
    ParamStore store;
    store.create("p", Tensor::from_data({3}, {0.1, -0.2, 0.3}));
    Adam opt(0.0);
    backward(sum_all(square(store.get("p"))));
    opt.step(store);
    CHECK(store.get("p").value_at(0) == 0.1);
    CHECK(store.get("p").value_at(1) == -0.2);
    CHECK(store.get("p").value_at(2) == 0.3);
}

TEST_CASE("checkpoint round trip is byte exact") {
    TempDir tmp;
    Rng rng(21);
    ParamStore store;
    std::vector<double> w(12), b(3);
    for (auto& x : w) x = rng.normal(0.0, 1.0);
    for (auto& x : b) x = rng.normal(0.0, 1.0);
    store.create("w", Tensor::from_data({4, 3}, w));
    store.create("b", Tensor::from_data({3}, b));

    save_checkpoint(tmp.file("a.ckpt"), store);
    ParamStore loaded;
    loaded.create("w", Tensor::zeros({4, 3}));
    loaded.create("b", Tensor::zeros({3}));
    load_checkpoint(tmp.file("a.ckpt"), loaded);
    for (std::size_t i = 0; i < 12; ++i) CHECK(loaded.get("w").value_at(i) == w[i]);
    for (std::size_t i = 0; i < 3; ++i) CHECK(loaded.get("b").value_at(i) == b[i]);

    save_checkpoint(tmp.file("b.ckpt"), loaded);
    std::ifstream f1(tmp.file("a.ckpt"), std::ios::binary), f2(tmp.file("b.ckpt"), std::ios::binary);
    std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(s1 == s2);
}

TEST_CASE("shape mismatch on load names the offending parameter") {
    TempDir tmp;
    ParamStore store;
    store.create("w", Tensor::zeros({2, 2}));
    save_checkpoint(tmp.file("c.ckpt"), store);
    ParamStore other;
    other.create("w", Tensor::zeros({3, 2}));
    CHECK_THROWS_WITH_AS(load_checkpoint(tmp.file("c.ckpt"), other), doctest::Contains("w"),
                         std::runtime_error);
}

TEST_CASE("truncated and corrupt files are rejected") {
    TempDir tmp;
    ParamStore store;
    store.create("w", Tensor::zeros({8}));
    save_checkpoint(tmp.file("d.ckpt"), store);
    std::ifstream in(tmp.file("d.ckpt"), std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();

    {
        std::ofstream out(tmp.file("trunc.ckpt"), std::ios::binary);
        out.write(bytes.data(), std::streamsize(bytes.size() / 2));
    }
    ParamStore t1;
    t1.create("w", Tensor::zeros({8}));
    CHECK_THROWS_AS(load_checkpoint(tmp.file("trunc.ckpt"), t1), std::runtime_error);

    {
        std::string bad = bytes;
        bad[0] = 'X';
        std::ofstream out(tmp.file("magic.ckpt"), std::ios::binary);
        out.write(bad.data(), std::streamsize(bad.size()));
    }
    ParamStore t2;
    t2.create("w", Tensor::zeros({8}));
    CHECK_THROWS_AS(load_checkpoint(tmp.file("magic.ckpt"), t2), std::runtime_error);

    CHECK_THROWS_AS(load_checkpoint(tmp.file("missing.ckpt"), t2), std::runtime_error);
}

TEST_CASE("optimizer moments and extras survive a round trip") {
    TempDir tmp;
    ParamStore store;
    store.create("p", Tensor::from_data({2}, {1.0, 2.0}));
    Adam opt(0.05);
    for (int i = 0; i < 3; ++i) {
        backward(sum_all(square(store.get("p"))));
        opt.step(store);
    }
    std::map<std::string, double> extras = {{"step", 3.0}, {"stage", 1.0}};
    save_checkpoint(tmp.file("e.ckpt"), store, &opt, extras);

    ParamStore loaded;
    loaded.create("p", Tensor::zeros({2}));
    Adam opt2(0.05);
    auto got = load_checkpoint(tmp.file("e.ckpt"), loaded, &opt2);
    CHECK(got.at("step") == 3.0);
    CHECK(got.at("stage") == 1.0);
    CHECK(opt2.steps_taken() == 3);

    // Continuing from the restored state must match continuing in place.
    backward(sum_all(square(store.get("p"))));
    opt.step(store);
    backward(sum_all(square(loaded.get("p"))));
    opt2.step(loaded);
    CHECK(loaded.get("p").value_at(0) == store.get("p").value_at(0));
    CHECK(loaded.get("p").value_at(1) == store.get("p").value_at(1));
}

TEST_CASE("reserved name prefixes cannot be used for parameters") {
    TempDir tmp;
    ParamStore store;
    store.create("~adam.m:p", Tensor::zeros({1}));
    CHECK_THROWS_AS(save_checkpoint(tmp.file("f.ckpt"), store), std::runtime_error);
}
