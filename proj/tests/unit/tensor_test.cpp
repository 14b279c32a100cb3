#include <doctest.h>

#include <cmath>
#include <vector>

#include "grad2task/param_store.hpp"
#include "grad2task/rng.hpp"
#include "grad2task/tensor.hpp"
#include "test_helpers.hpp"

using namespace g2t;

namespace {

Tensor random_tensor(Rng& rng, Shape shape, bool requires_grad = false) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    std::vector<double> data(n);
    for (auto& x : data) x = rng.normal(0.0, 1.0);
    return Tensor::from_data(std::move(shape), std::move(data), requires_grad);
}

} // namespace

TEST_CASE("matmul matches a triple-loop reference") {
    Rng rng(11);
    for (int trial = 0; trial < 5; ++trial) {
        std::size_t m = 1 + rng.uniform_int(5), k = 1 + rng.uniform_int(5),
                    n = 1 + rng.uniform_int(5);
        Tensor a = random_tensor(rng, {m, k});
        Tensor b = random_tensor(rng, {k, n});
        Tensor c = matmul(a, b);
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                double acc = 0.0;
                for (std::size_t t = 0; t < k; ++t) {
                    acc += a.value_at(i * k + t) * b.value_at(t * n + j);
                }
                CHECK(c.value_at(i * n + j) == doctest::Approx(acc).epsilon(1e-12));
            }
        }
    }
}

TEST_CASE("matmul_nt equals matmul against the transpose") {
    Rng rng(12);
    Tensor a = random_tensor(rng, {3, 4});
    Tensor b = random_tensor(rng, {5, 4});
    std::vector<double> bt(4 * 5);
    for (std::size_t i = 0; i < 5; ++i) {
        for (std::size_t j = 0; j < 4; ++j) bt[j * 5 + i] = b.value_at(i * 4 + j);
    }
    Tensor c1 = matmul_nt(a, b);
    Tensor c2 = matmul(a, Tensor::from_data({4, 5}, bt));
    for (std::size_t i = 0; i < c1.size(); ++i) {
        CHECK(c1.value_at(i) == doctest::Approx(c2.value_at(i)).epsilon(1e-12));
    }
}

TEST_CASE("shape mismatch names both shapes") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({4, 5});
    CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("[2,3]"), std::invalid_argument);
    CHECK_THROWS_AS(add(a, b), std::invalid_argument);
}

TEST_CASE("non-finite results are rejected") {
    Tensor z = Tensor::from_data({1}, {0.0});
    CHECK_THROWS_AS(log_op(z), std::runtime_error);
    Tensor big = Tensor::from_data({1}, {1e308});
    CHECK_THROWS_AS(mul(big, big), std::runtime_error);
}

TEST_CASE("softmax rows sum to one and log_softmax is its log") {
    Rng rng(13);
    Tensor m = random_tensor(rng, {3, 5});
    Tensor s = softmax(m);
    Tensor ls = log_softmax(m);
    for (std::size_t r = 0; r < 3; ++r) {
        double sum = 0.0;
        for (std::size_t c = 0; c < 5; ++c) sum += s.value_at(r * 5 + c);
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    }
    for (std::size_t i = 0; i < 15; ++i) {
        CHECK(std::log(s.value_at(i)) == doctest::Approx(ls.value_at(i)).epsilon(1e-9));
    }
}

TEST_CASE("gelu matches the erf closed form") {
    Tensor x = Tensor::from_data({5}, {-2.0, -0.5, 0.0, 0.7, 3.0});
    Tensor y = gelu(x);
    for (std::size_t i = 0; i < 5; ++i) {
        double v = x.value_at(i);
        double want = 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0)));
        CHECK(y.value_at(i) == doctest::Approx(want).epsilon(1e-14));
    }
}

TEST_CASE("gradients of a composite graph match finite differences") {
    Rng rng(14);
    ParamStore store;
    store.create("w", random_tensor(rng, {4, 3}));
    store.create("b", random_tensor(rng, {3}));
    store.create("g", Tensor::full({3}, 1.0));
    store.create("x", random_tensor(rng, {2, 4}));

    auto forward = [&store] {
        Tensor h = add_rowvec(matmul(store.get("x"), store.get("w")), store.get("b"));
        h = layer_norm(gelu(h), store.get("g"), Tensor::zeros({3}));
        Tensor sm = log_softmax(h);
        Tensor probe = add(mul(tanh_op(row(h, 0)), sigmoid(row(sm, 1))), sqrt_op(exp_op(row(h, 1))));
        return mean_all(concat({probe, neg(row(sm, 0))}));
    };

    Tensor loss = forward();
    backward(loss);
    std::vector<std::string> names = {"w", "b", "g", "x"};
    auto fd = testutil::finite_diff(store, names, [&] { return forward().scalar_value(); });
    for (std::size_t p = 0; p < names.size(); ++p) {
        auto grad = store.get(names[p]).grad();
        for (std::size_t i = 0; i < grad.size(); ++i) {
            CHECK(testutil::rel_err(grad[i], fd[p][i]) < 1e-6);
        }
    }
}

TEST_CASE("gather_rows, film, slice and concat backprop correctly") {
    Rng rng(15);
    ParamStore store;
    store.create("table", random_tensor(rng, {6, 4}));
    store.create("gamma", random_tensor(rng, {4}));
    store.create("beta", random_tensor(rng, {4}));

    std::vector<int> ids = {1, 4, 1, 0};
    auto forward = [&] {
        Tensor g = gather_rows(store.get("table"), ids);
        g = film_row(g, store.get("gamma"), store.get("beta"), 2);
        g = film_all_rows(g, store.get("gamma"), store.get("beta"));
        Tensor left = slice_cols(g, 0, 2);
        Tensor r = concat({row(left, 0), slice(row(g, 3), 1, 3)});
        return sum_all(square(r));
    };
    Tensor loss = forward();
    backward(loss);
    std::vector<std::string> names = {"table", "gamma", "beta"};
    auto fd = testutil::finite_diff(store, names, [&] { return forward().scalar_value(); });
    for (std::size_t p = 0; p < names.size(); ++p) {
        auto grad = store.get(names[p]).grad();
        for (std::size_t i = 0; i < grad.size(); ++i) {
            CHECK(testutil::rel_err(grad[i], fd[p][i]) < 1e-6);
        }
    }
}

TEST_CASE("film_row leaves other rows bit-identical") {
    Rng rng(16);
    Tensor m = random_tensor(rng, {4, 3});
    Tensor out = film_row(m, Tensor::from_data({3}, {2.0, 3.0, 4.0}),
                          Tensor::from_data({3}, {1.0, -1.0, 0.5}), 1);
    for (std::size_t r = 0; r < 4; ++r) {
        for (std::size_t c = 0; c < 3; ++c) {
            double v = m.value_at(r * 3 + c);
            double w = out.value_at(r * 3 + c);
            if (r == 1) {
                CHECK(w == doctest::Approx(v * (2.0 + c) + (c == 0 ? 1.0 : c == 1 ? -1.0 : 0.5)));
            } else {
                CHECK(w == v);
            }
        }
    }
}

TEST_CASE("identity film is exactly the identity") {
    Rng rng(17);
    Tensor m = random_tensor(rng, {3, 4});
    Tensor g1 = Tensor::full({4}, 1.0), b0 = Tensor::zeros({4});
    Tensor out = film_all_rows(film_row(m, g1, b0, 0), g1, b0);
    for (std::size_t i = 0; i < m.size(); ++i) CHECK(out.value_at(i) == m.value_at(i));
}

TEST_CASE("gradient of a scaled sum is the mean of per-term gradients") {
    Rng rng(18);
    ParamStore store;
    store.create("p", random_tensor(rng, {3}));
    auto term = [&](double c) { return sum_all(square(scale(store.get("p"), c))); };

    backward(term(2.0));
    std::vector<double> g1(store.get("p").grad().begin(), store.get("p").grad().end());
    store.zero_grads();
    backward(term(3.0));
    std::vector<double> g2(store.get("p").grad().begin(), store.get("p").grad().end());
    store.zero_grads();
    backward(scale(add(term(2.0), term(3.0)), 0.5));
    auto g = store.get("p").grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
        CHECK(g[i] == doctest::Approx((g1[i] + g2[i]) / 2.0).epsilon(1e-12));
    }
}

TEST_CASE("dropout is identity in eval mode and rescales in training") {
    Rng rng(19);
    Tensor x = Tensor::full({100}, 1.0);
    Tensor eval_out = dropout(x, 0.5, rng, false);
    for (std::size_t i = 0; i < 100; ++i) CHECK(eval_out.value_at(i) == 1.0);
    Tensor train_out = dropout(x, 0.5, rng, true);
    std::size_t kept = 0;
    for (std::size_t i = 0; i < 100; ++i) {
        double v = train_out.value_at(i);
        CHECK((v == 0.0 || v == 2.0));
        if (v != 0.0) ++kept;
    }
    CHECK(kept > 20);
    CHECK(kept < 80);
}

TEST_CASE("detach cuts the graph") {
    Tensor p = Tensor::from_data({2}, {1.0, 2.0}, true);
    Tensor d = square(p).detach();
    CHECK_FALSE(d.requires_grad());
    Tensor loss = sum_all(mul(d, p));
    backward(loss);
    auto g = p.grad();
    CHECK(g[0] == 1.0);
    CHECK(g[1] == 4.0);
}
