#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "dilo/fdcheck.hpp"
#include "dilo/optim.hpp"
#include "dilo/rng.hpp"
#include "dilo/tensor.hpp"
#include "oracles.hpp"

using namespace dilo;

TEST_CASE("elementwise forward values") {
    Graph g;
    Tensor a = Tensor::from_vec({1, 2}, {2});
    Tensor b = Tensor::from_vec({3, 4}, {2});
    CHECK(g.add(a, b).vals() == std::vector<double>{4, 6});
    CHECK(g.sub(a, b).vals() == std::vector<double>{-2, -2});
    CHECK(g.mul(a, b).vals() == std::vector<double>{3, 8});
    CHECK(g.scale(a, 2.5).vals() == std::vector<double>{2.5, 5});
    CHECK(g.square(b).vals() == std::vector<double>{9, 16});
    CHECK(g.sum(a).at(0) == 3.0);
    CHECK(g.mean(b).at(0) == 3.5);
}

TEST_CASE("matmul identity and hand value") {
    Graph g;
    Tensor eye = Tensor::from_vec({1, 0, 0, 1}, {2, 2});
    Tensor m = Tensor::from_vec({5, 6, 7, 8}, {2, 2});
    CHECK(g.matmul(eye, m).vals() == m.vals());

    Tensor row = Tensor::from_vec({1, 2}, {1, 2});
    Tensor col = Tensor::from_vec({3, 4}, {2, 1});
    Tensor got = g.matmul(row, col);
    CHECK(got.shape == std::vector<std::size_t>{1, 1});
    CHECK(got.at(0) == 11.0);
    CHECK(got.at(0) == oracles::naive_matmul(row, col).at(0));
}

TEST_CASE("matmul matches naive oracle on random sizes") {
    Rng rng(11);
    for (int rep = 0; rep < 10; ++rep) {
        const std::size_t m = 1 + rng.uniform_index(6);
        const std::size_t k = 1 + rng.uniform_index(6);
        const std::size_t n = 1 + rng.uniform_index(6);
        Tensor a = rng.normal_tensor({m, k});
        Tensor b = rng.normal_tensor({k, n});
        Graph g;
        Tensor got = g.matmul(a, b);
        Tensor want = oracles::naive_matmul(a, b);
        for (std::size_t i = 0; i < got.numel(); ++i)
            CHECK(got.at(i) == doctest::Approx(want.at(i)).epsilon(1e-12));
    }
}

TEST_CASE("shape mismatch errors name the op and the shapes") {
    Graph g;
    Tensor a = Tensor::from_vec({1, 2}, {2});
    Tensor b = Tensor::from_vec({1, 2, 3}, {3});
    CHECK_THROWS_WITH_AS(g.add(a, b), doctest::Contains("add"), std::runtime_error);
    CHECK_THROWS_WITH_AS(g.mul(a, b), doctest::Contains("[2]"), std::runtime_error);
    CHECK_THROWS_AS(g.matmul(a, b), std::runtime_error);
    CHECK_THROWS_AS(g.sqrt(Tensor::from_vec({4.0, -1.0}, {2})), std::runtime_error);
}

TEST_CASE("concat slice transpose reshape round trips") {
    Graph g;
    Tensor a = Tensor::from_vec({1, 2, 3, 4, 5, 6}, {2, 3});
    Tensor b = Tensor::from_vec({7, 8, 9}, {1, 3});
    Tensor cat = g.concat({a, b}, 0);
    CHECK(cat.shape == std::vector<std::size_t>{3, 3});
    CHECK(cat.at(6) == 7.0);
    Tensor back = g.slice(cat, 0, 0, 2);
    CHECK(back.vals() == a.vals());

    Tensor catc = g.concat({a, Tensor::from_vec({7, 8}, {2, 1})}, 1);
    CHECK(catc.shape == std::vector<std::size_t>{2, 4});
    CHECK(catc.vals() == std::vector<double>{1, 2, 3, 7, 4, 5, 6, 8});

    Tensor t = g.transpose(a);
    CHECK(t.shape == std::vector<std::size_t>{3, 2});
    CHECK(t.vals() == std::vector<double>{1, 4, 2, 5, 3, 6});

    Tensor r = g.reshape(a, {6});
    CHECK(r.vals() == a.vals());
    CHECK_THROWS_AS(g.reshape(a, {4}), std::runtime_error);
}

TEST_CASE("backward: quadratic and tanh basics") {
    {
        Graph g;
        Tensor x = g.leaf(Tensor::scalar(3.0));
        Tensor loss = g.mul(x, x);
        Gradients grads = g.backward(loss);
        CHECK(grads.wrt(x).at(0) == doctest::Approx(6.0));
        CHECK(grads.wrt(loss).at(0) == 1.0);
    }
    {
        Graph g;
        Tensor x = g.leaf(Tensor::zeros({5}));
        Tensor loss = g.sum(g.tanh(x));
        Gradients grads = g.backward(loss);
        for (std::size_t i = 0; i < 5; ++i) CHECK(grads.wrt(x).at(i) == 1.0);
    }
}

TEST_CASE("backward errors") {
    Graph g;
    Tensor x = g.leaf(Tensor::from_vec({1, 2}, {2}));
    Tensor y = g.square(x);
    CHECK_THROWS_AS(g.backward(y), std::runtime_error);  // not scalar

    Graph g2;
    Tensor z = g2.leaf(Tensor::scalar(1.0));
    Tensor loss2 = g2.square(z);
    CHECK_THROWS_AS(g.backward(loss2), std::runtime_error);  // wrong graph
}

namespace {

// Random 3-layer tanh composite used as a generic smooth test function.
double composite_loss_value(const Tensor& x, const std::vector<Tensor>& ws) {
    Graph g;
    Tensor h = g.leaf(x);
    h = g.reshape(h, {x.numel(), 1});
    for (std::size_t l = 0; l < ws.size(); ++l) {
        h = g.matmul(ws[l], h);
        if (l + 1 < ws.size()) h = g.tanh(h);
    }
    return g.sum(g.square(h)).at(0);
}

Tensor composite_loss_grad(const Tensor& x, const std::vector<Tensor>& ws) {
    Graph g;
    Tensor leaf = g.leaf(x);
    Tensor h = g.reshape(leaf, {x.numel(), 1});
    for (std::size_t l = 0; l < ws.size(); ++l) {
        h = g.matmul(ws[l], h);
        if (l + 1 < ws.size()) h = g.tanh(h);
    }
    Tensor loss = g.sum(g.square(h));
    return g.backward(loss).wrt(leaf);
}

}  // namespace

TEST_CASE("backward matches finite differences on a random 3-layer composite") {
    Rng rng(7);
    const std::size_t dim = 8;
    std::vector<Tensor> ws = {rng.normal_tensor({6, dim}), rng.normal_tensor({5, 6}),
                              rng.normal_tensor({3, 5})};
    Tensor x = rng.normal_tensor({dim});
    Tensor analytic = composite_loss_grad(x, ws);
    Tensor fd = finite_difference_gradient(
        [&](const Tensor& t) { return composite_loss_value(t, ws); }, x, 1e-5);
    CHECK(rel_l2_error(analytic, fd) < 1e-6);
}

TEST_CASE("backward matches finite differences for every op kind") {
    Rng rng(23);
    auto check_grad = [&](const std::function<Tensor(Graph&, const Tensor&)>& build, Tensor x0,
                          double tol = 1e-5) {
        auto value = [&](const Tensor& x) {
            Graph g;
            Tensor leaf = g.leaf(x);
            return g.sum(g.square(build(g, leaf))).at(0);
        };
        Graph g;
        Tensor leaf = g.leaf(x0);
        Tensor loss = g.sum(g.square(build(g, leaf)));
        Tensor analytic = g.backward(loss).wrt(leaf);
        Tensor fd = finite_difference_gradient(value, x0, 1e-6);
        CHECK(rel_l2_error(analytic, fd) < tol);
    };

    Tensor other = rng.normal_tensor({3, 4});
    Tensor mat = rng.normal_tensor({4, 5});

    check_grad([&](Graph& g, const Tensor& x) { return g.add(x, other); },
               rng.normal_tensor({3, 4}));
    check_grad([&](Graph& g, const Tensor& x) { return g.sub(other, x); },
               rng.normal_tensor({3, 4}));
    check_grad([&](Graph& g, const Tensor& x) { return g.mul(x, other); },
               rng.normal_tensor({3, 4}));
    check_grad([&](Graph& g, const Tensor& x) { return g.matmul(x, mat); },
               rng.normal_tensor({3, 4}));
    check_grad([&](Graph& g, const Tensor& x) { return g.matmul(other, x); },
               rng.normal_tensor({4, 5}));
    check_grad([&](Graph& g, const Tensor& x) { return g.scale(x, -1.7); },
               rng.normal_tensor({7}));
    check_grad([&](Graph& g, const Tensor& x) { return g.sum(x); }, rng.normal_tensor({9}));
    check_grad([&](Graph& g, const Tensor& x) { return g.mean(x); }, rng.normal_tensor({9}));
    check_grad([&](Graph& g, const Tensor& x) { return g.square(x); }, rng.normal_tensor({6}));
    {
        Tensor pos = rng.normal_tensor({6});
        for (double& v : pos.mut()) v = std::fabs(v) + 0.5;
        check_grad([&](Graph& g, const Tensor& x) { return g.sqrt(x); }, pos);
    }
    check_grad([&](Graph& g, const Tensor& x) { return g.tanh(x); }, rng.normal_tensor({6}));
    {
        // keep samples away from the kink so the FD stencil stays one-sided
        Tensor x = rng.normal_tensor({12});
        for (double& v : x.mut())
            if (std::fabs(v) < 1e-3) v = 0.5;
        check_grad([&](Graph& g, const Tensor& t) { return g.relu(t); }, x);
    }
    check_grad([&](Graph& g, const Tensor& x) { return g.sin(x); }, rng.normal_tensor({6}));
    check_grad([&](Graph& g, const Tensor& x) { return g.cos(x); }, rng.normal_tensor({6}));
    check_grad([&](Graph& g, const Tensor& x) { return g.concat({x, other}, 1); },
               rng.normal_tensor({3, 2}));
    check_grad([&](Graph& g, const Tensor& x) { return g.reshape(x, {2, 6}); },
               rng.normal_tensor({3, 4}));
    check_grad([&](Graph& g, const Tensor& x) { return g.slice(x, 1, 1, 2); },
               rng.normal_tensor({3, 4}));
    check_grad([&](Graph& g, const Tensor& x) { return g.transpose(x); },
               rng.normal_tensor({3, 4}));
}

TEST_CASE("gradient flows through reused nodes") {
    Graph g;
    Tensor x = g.leaf(Tensor::scalar(2.0));
    Tensor y = g.mul(x, x);        // x^2
    Tensor z = g.add(y, g.mul(y, x));  // x^2 + x^3
    Gradients grads = g.backward(z);
    CHECK(grads.wrt(x).at(0) == doctest::Approx(2 * 2 + 3 * 4));  // 2x + 3x^2 = 16
}

TEST_CASE("graph replay reproduces node values bit-exactly") {
    Rng rng(41);
    Graph g;
    Tensor x = g.leaf(rng.normal_tensor({4, 4}));
    Tensor w = g.leaf(rng.normal_tensor({4, 4}));
    Tensor h = g.tanh(g.matmul(w, x));
    Tensor s = g.sum(g.square(g.sub(h, x)));
    (void)s;
    CHECK(g.replay_matches());
}

TEST_CASE("finite_difference_gradient basics") {
    Tensor x = Tensor::from_vec({1, 2}, {2});
    auto f = [](const Tensor& t) { return t.at(0) * t.at(0) + t.at(1) * t.at(1); };
    Tensor fd = finite_difference_gradient(f, x, 1e-5);
    CHECK(fd.at(0) == doctest::Approx(2.0).epsilon(1e-8));
    CHECK(fd.at(1) == doctest::Approx(4.0).epsilon(1e-8));

    Tensor zero = finite_difference_gradient([](const Tensor&) { return 3.14; }, x, 1e-5);
    CHECK(zero.at(0) == 0.0);
    CHECK(zero.at(1) == 0.0);

    CHECK_THROWS_WITH_AS(
        finite_difference_gradient(
            [](const Tensor& t) { return std::log(t.at(0) - 10.0); }, x, 1e-5),
        doctest::Contains("coordinate"), std::runtime_error);
}

TEST_CASE("hvp_finite_difference: identity and diagonal Hessians") {
    auto grad_identity = [](const Tensor& x) { return x; };  // f = 0.5||x||^2
    Tensor x = Tensor::from_vec({0.3, -1.2}, {2});
    Tensor v = Tensor::from_vec({1, 1}, {2});
    Tensor hv = hvp_finite_difference(grad_identity, x, v, 1e-5);
    CHECK(hv.at(0) == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(hv.at(1) == doctest::Approx(1.0).epsilon(1e-9));

    auto grad_diag = [](const Tensor& t) {
        return Tensor::from_vec({1.0 * t.at(0), 4.0 * t.at(1)}, {2});
    };
    Tensor hv2 = hvp_finite_difference(grad_diag, x, v, 1e-5);
    CHECK(hv2.at(0) == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(hv2.at(1) == doctest::Approx(4.0).epsilon(1e-9));

    CHECK_THROWS_AS(hvp_finite_difference(grad_identity, x, Tensor::zeros({3}), 1e-5),
                    std::runtime_error);
}

TEST_CASE("hvp operator is symmetric on a smooth function") {
    Rng rng(5);
    const std::size_t dim = 6;
    std::vector<Tensor> ws = {rng.normal_tensor({5, dim}), rng.normal_tensor({4, 5}),
                              rng.normal_tensor({2, 4})};
    auto gradf = [&](const Tensor& x) { return composite_loss_grad(x, ws); };
    Tensor x = rng.normal_tensor({dim});
    Tensor v1 = rng.normal_tensor({dim});
    Tensor v2 = rng.normal_tensor({dim});
    Tensor hv1 = hvp_finite_difference(gradf, x, v1, 1e-5);
    Tensor hv2 = hvp_finite_difference(gradf, x, v2, 1e-5);
    const double lhs = oracles::dot(hv1, v2);
    const double rhs = oracles::dot(v1, hv2);
    CHECK(std::fabs(lhs - rhs) / std::max(std::fabs(lhs), std::fabs(rhs)) < 1e-4);
}

TEST_CASE("optimizer: gd, adam first step, zero gradient") {
    {
        OptimizerState st;
        OptimizerConfig cfg;
        cfg.mode = OptMode::Gd;
        cfg.lr = 0.1;
        Tensor p = Tensor::scalar(1.0);
        optimizer_update(st, {&p}, {Tensor::scalar(2.0)}, cfg);
        CHECK(p.at(0) == doctest::Approx(0.8).epsilon(1e-15));
        optimizer_update(st, {&p}, {Tensor::scalar(0.0)}, cfg);
        CHECK(p.at(0) == doctest::Approx(0.8).epsilon(1e-15));
    }
    {
        OptimizerState st;
        OptimizerConfig cfg;
        cfg.mode = OptMode::Adam;
        cfg.lr = 0.05;
        Tensor p = Tensor::from_vec({1.0, -2.0}, {2});
        Tensor g = Tensor::from_vec({0.3, -7.0}, {2});
        optimizer_update(st, {&p}, {g}, cfg);
        // first Adam step moves by ~lr in the sign direction of the gradient
        CHECK(p.at(0) == doctest::Approx(1.0 - 0.05).epsilon(1e-4));
        CHECK(p.at(1) == doctest::Approx(-2.0 + 0.05).epsilon(1e-4));
    }
    {
        OptimizerState st;
        OptimizerConfig cfg;
        Tensor p = Tensor::scalar(1.0);
        CHECK_THROWS_AS(optimizer_update(st, {&p}, {}, cfg), std::runtime_error);
        CHECK_THROWS_AS(optimizer_update(st, {&p}, {Tensor::zeros({2})}, cfg),
                        std::runtime_error);
    }
}

TEST_CASE("adamw applies decoupled weight decay") {
    OptimizerState st;
    OptimizerConfig cfg;
    cfg.mode = OptMode::AdamW;
    cfg.lr = 0.1;
    cfg.weight_decay = 0.5;
    Tensor p = Tensor::scalar(2.0);
    optimizer_update(st, {&p}, {Tensor::scalar(0.0)}, cfg);
    // zero gradient: only the decay term acts, p -> p - lr*wd*p
    CHECK(p.at(0) == doctest::Approx(2.0 - 0.1 * 0.5 * 2.0).epsilon(1e-12));
}

TEST_CASE("optimizer updates do not disturb values recorded on a graph") {
    Graph g;
    Tensor p = Tensor::from_vec({1.0, 2.0}, {2});
    Tensor leaf = g.leaf(p);
    Tensor loss = g.sum(g.square(leaf));
    Gradients grads = g.backward(loss);
    OptimizerState st;
    OptimizerConfig cfg;
    cfg.mode = OptMode::Gd;
    cfg.lr = 0.5;
    optimizer_update(st, {&p}, {grads.wrt(leaf)}, cfg);
    CHECK(p.at(0) == 0.0);
    CHECK(g.node(leaf.node).value.at(0) == 1.0);
    CHECK(g.replay_matches());
}

TEST_CASE("f32 mode rounds results through float and propagates dtype") {
    Graph g;
    Tensor a = Tensor::from_vec({0.1, 0.2}, {2}, DType::f32);
    Tensor b = Tensor::from_vec({0.3, 0.4}, {2}, DType::f32);
    Tensor c = g.add(a, b);
    CHECK(c.dtype == DType::f32);
    const double a0 = static_cast<double>(static_cast<float>(0.1));
    const double b0 = static_cast<double>(static_cast<float>(0.3));
    CHECK(c.at(0) == static_cast<double>(static_cast<float>(a0 + b0)));
    Tensor d = g.add(a, Tensor::from_vec({0.3, 0.4}, {2}));
    CHECK(d.dtype == DType::f64);
}

TEST_CASE("rng determinism and normality") {
    Rng a(123), b(123);
    for (int i = 0; i < 100; ++i) CHECK(a.normal() == b.normal());
    Rng c(7);
    double mean = 0, var = 0;
    const int n = 20000;
    std::vector<double> xs(n);
    for (int i = 0; i < n; ++i) {
        xs[i] = c.normal();
        mean += xs[i];
    }
    mean /= n;
    for (double x : xs) var += (x - mean) * (x - mean);
    var /= n;
    CHECK(std::fabs(mean) < 0.03);
    CHECK(var == doctest::Approx(1.0).epsilon(0.05));
    CHECK(derive_seed(1, "gen-data") != derive_seed(1, "invert"));
}
