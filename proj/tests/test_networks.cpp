#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "dilo/fdcheck.hpp"
#include "dilo/networks.hpp"
#include "dilo/physics.hpp"
#include "oracles.hpp"

using namespace dilo;

namespace {

ModelBundle small_bundle(std::uint64_t seed = 1, std::size_t grid = 8, std::size_t latent = 6) {
    SpectralArch sa;
    sa.grid_n = grid;
    sa.channels = 4;
    sa.layers = 2;
    sa.modes = 3;
    sa.head = SpectralArch::Head::Boundary;
    sa.out_channels = 4;  // patterns
    DiffusionSchedule sched = make_schedule(50, 1e-3, 0.05, 10);
    return make_bundle(seed, grid, latent, {24}, {24}, {24}, sa, sched, 0.01, 1.0, 8);
}

}  // namespace

TEST_CASE("init_mlp: determinism, seed sensitivity, parameter count") {
    MlpArch arch;
    arch.widths = {4, 8, 2};
    CHECK(mlp_param_count(arch) == 58);

    MlpParams a = init_mlp(42, arch);
    MlpParams b = init_mlp(42, arch);
    MlpParams c = init_mlp(43, arch);
    for (std::size_t l = 0; l < a.weight.size(); ++l) {
        CHECK(std::memcmp(a.weight[l].vals().data(), b.weight[l].vals().data(),
                          a.weight[l].numel() * sizeof(double)) == 0);
        for (std::size_t i = 0; i < a.bias[l].numel(); ++i) CHECK(a.bias[l].at(i) == 0.0);
    }
    bool differs = false;
    for (std::size_t i = 0; i < a.weight[0].numel(); ++i)
        if (a.weight[0].at(i) != c.weight[0].at(i)) differs = true;
    CHECK(differs);

    MlpArch bad;
    bad.widths = {4, 2};
    CHECK_THROWS_AS(init_mlp(1, bad), std::runtime_error);
}

TEST_CASE("time embedding: pair structure and norm") {
    const std::size_t dim = 12;
    std::vector<double> e = time_embedding(dim, 17.0);
    double norm2 = 0;
    for (std::size_t k = 0; k < dim / 2; ++k) {
        CHECK(e[2 * k] * e[2 * k] + e[2 * k + 1] * e[2 * k + 1] ==
              doctest::Approx(1.0).epsilon(1e-12));
        norm2 += e[2 * k] * e[2 * k] + e[2 * k + 1] * e[2 * k + 1];
    }
    CHECK(std::sqrt(norm2) <= std::sqrt(static_cast<double>(dim)));
    CHECK_THROWS_AS(time_embedding(7, 1.0), std::runtime_error);
}

TEST_CASE("score_forward: zero final layer, purity, range checks") {
    ModelBundle b = small_bundle();
    b.score.weight.back() = Tensor::zeros(b.score.weight.back().shape);
    b.score.bias.back() = Tensor::zeros(b.score.bias.back().shape);
    Rng rng(4);
    Tensor z = rng.normal_tensor({b.latent_dim, 1});
    Graph g;
    BoundBundle bb = bind_bundle(g, b);
    Tensor out = score_forward(g, bb, z, 7);
    for (std::size_t i = 0; i < out.numel(); ++i) CHECK(out.at(i) == 0.0);
    CHECK_THROWS_AS(score_forward(g, bb, z, 0), std::runtime_error);
    CHECK_THROWS_AS(score_forward(g, bb, z, 51), std::runtime_error);

    ModelBundle b2 = small_bundle();
    std::vector<double> first, second;
    for (int rep = 0; rep < 2; ++rep) {
        Graph g2;
        BoundBundle bb2 = bind_bundle(g2, b2);
        (rep == 0 ? first : second) = score_forward(g2, bb2, z, 7).vals();
    }
    CHECK(std::memcmp(first.data(), second.data(), first.size() * sizeof(double)) == 0);
}

TEST_CASE("score Jacobian w.r.t. z matches finite differences") {
    ModelBundle b = small_bundle(9, 8, 4);
    Rng rng(6);
    Tensor z = rng.normal_tensor({4, 1});
    const int t = 13;
    const double h = 1e-6;
    for (std::size_t row = 0; row < 4; ++row) {
        Graph g;
        BoundBundle bb = bind_bundle(g, b);
        Tensor leaf = g.leaf(z);
        Tensor out = score_forward(g, bb, leaf, t);
        Tensor entry = g.reshape(g.slice(out, 0, row, 1), {});
        Tensor grad = g.backward(entry).wrt(leaf);
        for (std::size_t col = 0; col < 4; ++col) {
            Tensor zp = z.detached();
            zp.mut()[col] += h;
            Tensor zm = z.detached();
            zm.mut()[col] -= h;
            Graph g2;
            BoundBundle bb2 = bind_bundle(g2, b);
            const double fp = score_forward(g2, bb2, g2.leaf(zp), t).at(row);
            const double fm = score_forward(g2, bb2, g2.leaf(zm), t).at(row);
            const double fd = (fp - fm) / (2.0 * h);
            CHECK(grad.at(col) == doctest::Approx(fd).epsilon(1e-5));
        }
    }
}

TEST_CASE("decoder output is hard-bounded to the admissible range") {
    ModelBundle b = small_bundle();
    Rng rng(8);
    const int trials = 10000;
    Graph g;
    BoundBundle bb = bind_bundle(g, b);
    // one big batch of random latents, amplified to push tanh to saturation
    Tensor z = rng.normal_tensor({b.latent_dim, static_cast<std::size_t>(trials)});
    for (double& x : z.mut()) x *= 10.0;
    Tensor a = decode(g, bb, z);
    double lo = 1e300, hi = -1e300;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        lo = std::min(lo, a.at(i));
        hi = std::max(hi, a.at(i));
    }
    CHECK(lo >= b.sigma_min);
    CHECK(hi <= b.sigma_max);
}

TEST_CASE("encode then decode of the mean field is finite") {
    ModelBundle b = small_bundle();
    std::vector<double> mean_field(b.grid_n * b.grid_n, 0.2);
    std::vector<double> z = encode_raw(b, mean_field);
    std::vector<double> rec = decode_raw(b, z);
    for (double x : rec) CHECK(std::isfinite(x));
    CHECK(rec.size() == mean_field.size());
}

TEST_CASE("spectral transform: synthesis of analysis reproduces the field") {
    const std::size_t n = 8;
    const DftConstants& dc = dft_constants(n, n);  // full modes
    Rng rng(12);
    Tensor x = rng.normal_tensor({1, n * n});
    Graph g;
    Tensor xre = g.matmul(x, g.leaf(dc.fwd_re));
    Tensor xim = g.matmul(x, g.leaf(dc.fwd_im));
    Tensor back = g.sub(g.matmul(xre, g.leaf(dc.inv_re)), g.matmul(xim, g.leaf(dc.inv_im)));
    for (std::size_t i = 0; i < n * n; ++i)
        CHECK(std::fabs(back.at(i) - x.at(i)) < 1e-10);
}

TEST_CASE("spectral transform: analysis rows are orthonormal") {
    const std::size_t n = 6;
    const DftConstants& dc = dft_constants(n, 2);
    // (fwd^H fwd) in coefficient space: inv * fwd = I_K for the kept modes
    Graph g;
    Tensor re = g.sub(g.matmul(g.leaf(dc.inv_re), g.leaf(dc.fwd_re)),
                      g.scale(g.matmul(g.leaf(dc.inv_im), g.leaf(dc.fwd_im)), -1.0));
    // complex product (inv_re + i inv_im)(fwd_re + i fwd_im): real part
    Tensor real_part = g.sub(g.matmul(g.leaf(dc.inv_re), g.leaf(dc.fwd_re)),
                             g.matmul(g.leaf(dc.inv_im), g.leaf(dc.fwd_im)));
    (void)re;
    for (std::size_t i = 0; i < dc.n_kept; ++i)
        for (std::size_t j = 0; j < dc.n_kept; ++j) {
            const double want = i == j ? 1.0 : 0.0;
            CHECK(std::fabs(real_part.at2(i, j) - want) < 1e-12);
        }
}

TEST_CASE("spectral block: one retained mode gives constant output") {
    SpectralArch sa;
    sa.grid_n = 8;
    sa.channels = 3;
    sa.layers = 1;
    sa.modes = 1;
    sa.head = SpectralArch::Head::Field;
    sa.out_channels = 3;
    SpectralParams p = init_spectral(3, sa);
    // silence the local conv path so only the spectral path remains
    for (Tensor& t : p.conv_w) t = Tensor::zeros(t.shape);
    p.proj_w = Tensor::from_vec(std::vector<double>(9, 0.0), {3, 3});
    p.proj_w.mut()[0] = 1.0;
    p.proj_w.mut()[4] = 1.0;
    p.proj_w.mut()[8] = 1.0;
    Rng rng(19);
    Graph g;
    BoundSpectral bs = bind_spectral(g, p);
    Tensor x = rng.normal_tensor({1, 64});
    Tensor out = spectral_forward(g, bs, x);
    for (std::size_t ch = 0; ch < 3; ++ch)
        for (std::size_t i = 1; i < 64; ++i)
            CHECK(out.at2(ch, i) == doctest::Approx(out.at2(ch, 0)).epsilon(1e-10));
}

TEST_CASE("spectral path is a linear map at full modes") {
    SpectralArch sa;
    sa.grid_n = 4;
    sa.channels = 2;
    sa.layers = 1;
    sa.modes = 4;
    sa.head = SpectralArch::Head::Field;
    sa.out_channels = 1;
    SpectralParams p = init_spectral(5, sa);
    for (Tensor& t : p.conv_w) t = Tensor::zeros(t.shape);  // spectral path only
    auto run = [&](const Tensor& x) {
        Graph g;
        BoundSpectral bs = bind_spectral(g, p);
        // bypass the activation by reading the pre-projection? the block
        // applies tanh; use relu-free check via small inputs instead
        return spectral_forward(g, bs, x);
    };
    // additivity of the pre-activation spectral path is checked through the
    // first-order response: J(x) is constant for a linear map
    Rng rng(2);
    Tensor x1 = rng.normal_tensor({1, 16});
    Tensor x2 = rng.normal_tensor({1, 16});
    for (double& v : x1.mut()) v *= 1e-4;
    for (double& v : x2.mut()) v *= 1e-4;
    Tensor y1 = run(x1), y2 = run(x2);
    Tensor xs = x1.detached();
    for (std::size_t i = 0; i < 16; ++i) xs.mut()[i] += x2.at(i);
    Tensor ys = run(xs);
    Tensor y0 = run(Tensor::zeros({1, 16}));
    // f(x1+x2) - f(0) ~ (f(x1)-f(0)) + (f(x2)-f(0)) for tiny inputs
    for (std::size_t i = 0; i < 16; ++i) {
        const double lhs = ys.at(i) - y0.at(i);
        const double rhs = (y1.at(i) - y0.at(i)) + (y2.at(i) - y0.at(i));
        CHECK(lhs == doctest::Approx(rhs).epsilon(1e-4));
    }
}

TEST_CASE("boundary restriction of a constant field is a constant vector") {
    const std::size_t n = 6;
    Tensor r = boundary_restriction_matrix(n, false);
    Graph g;
    Tensor field = Tensor::full({1, n * n}, 3.25);
    Tensor v = g.matmul(field, r);
    CHECK(v.shape[1] == 4 * (n - 1));
    for (std::size_t i = 0; i < v.numel(); ++i) CHECK(v.at(i) == 3.25);
    // with mean removal the constant drops to zero
    Tensor rq = boundary_restriction_matrix(n, true);
    Tensor v2 = g.matmul(field, rq);
    for (std::size_t i = 0; i < v2.numel(); ++i) CHECK(std::fabs(v2.at(i)) < 1e-12);
}

TEST_CASE("surrogate body gradient matches finite differences on an 8x8 grid") {
    ModelBundle b = small_bundle(21);
    Rng rng(22);
    const std::size_t n2 = b.grid_n * b.grid_n;
    Tensor a = rng.normal_tensor({1, n2});
    for (double& v : a.mut()) v = 0.2 + 0.05 * v;

    Graph g;
    BoundBundle bb = bind_bundle(g, b);
    Tensor leaf = g.leaf(a);
    Tensor y = surrogate_body_forward(g, bb, leaf);
    Tensor loss = g.sum(g.square(y));
    Tensor analytic = g.backward(loss).wrt(leaf);

    Tensor fd = finite_difference_gradient(
        [&](const Tensor& x) {
            Graph g2;
            BoundBundle bb2 = bind_bundle(g2, b);
            return g2.sum(g2.square(surrogate_body_forward(g2, bb2, g2.leaf(x)))).at(0);
        },
        a, 1e-6);
    CHECK(rel_l2_error(analytic, fd) < 1e-5);
}

TEST_CASE("autoencoder memorizes a single sample") {
    ModelBundle b = small_bundle(31);
    std::vector<std::vector<double>> data = gen_eit_blobs(1, 5, b.grid_n);
    TrainConfig cfg;
    cfg.epochs = 800;
    cfg.batch = 1;
    cfg.opt.lr = 3e-3;
    cfg.seed = 1;
    std::vector<double> losses = train_autoencoder(b, data, cfg);
    CHECK(losses.size() == cfg.epochs);
    double best = losses[0];
    for (double l : losses) best = std::min(best, l);
    CHECK(best <= losses.front());
    CHECK(best < 1e-3);
}

TEST_CASE("train_score: series length, zero-net starting loss near latent dim") {
    ModelBundle b = small_bundle(33);
    std::vector<std::vector<double>> data = gen_eit_blobs(16, 6, b.grid_n);
    TrainConfig ae_cfg;
    ae_cfg.epochs = 60;
    ae_cfg.batch = 8;
    ae_cfg.opt.lr = 3e-3;
    train_autoencoder(b, data, ae_cfg);
    finalize_latent_stats(b, data);

    // zero the score output layer: first epoch loss should be ~latent dim
    b.score.weight.back() = Tensor::zeros(b.score.weight.back().shape);
    TrainConfig cfg;
    cfg.epochs = 30;
    cfg.batch = 8;
    cfg.opt.lr = 2e-3;
    std::vector<double> losses = train_score(b, data, cfg);
    CHECK(losses.size() == cfg.epochs);
    CHECK(losses.front() ==
          doctest::Approx(static_cast<double>(b.latent_dim)).epsilon(0.35));
    double best = 1e300;
    for (double l : losses) best = std::min(best, l);
    CHECK(best <= losses.front());
    CHECK_THROWS_AS(train_score(b, {}, cfg), std::runtime_error);
}

TEST_CASE("latent stats give unit-scale codes and unchanged reconstruction") {
    ModelBundle b = small_bundle(35);
    std::vector<std::vector<double>> data = gen_eit_blobs(24, 9, b.grid_n);
    TrainConfig cfg;
    cfg.epochs = 40;
    cfg.batch = 8;
    cfg.opt.lr = 3e-3;
    train_autoencoder(b, data, cfg);
    std::vector<double> rec_before = decode_raw(b, encode_raw(b, data[0]));
    finalize_latent_stats(b, data);
    std::vector<double> rec_after = decode_raw(b, encode_raw(b, data[0]));
    for (std::size_t i = 0; i < rec_before.size(); ++i)
        CHECK(rec_before[i] == doctest::Approx(rec_after[i]).epsilon(1e-9));

    // per-dimension mean ~0 and std ~1 over the dataset
    const std::size_t d = b.latent_dim;
    std::vector<double> mean(d, 0.0), var(d, 0.0);
    std::vector<std::vector<double>> zs;
    for (const auto& f : data) zs.push_back(encode_raw(b, f));
    for (const auto& z : zs)
        for (std::size_t i = 0; i < d; ++i) mean[i] += z[i];
    for (double& m : mean) m /= static_cast<double>(zs.size());
    for (const auto& z : zs)
        for (std::size_t i = 0; i < d; ++i) var[i] += (z[i] - mean[i]) * (z[i] - mean[i]);
    for (std::size_t i = 0; i < d; ++i) {
        CHECK(std::fabs(mean[i]) < 1e-8);
        CHECK(var[i] / static_cast<double>(zs.size()) == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("score lipschitz probe is finite and positive for a random net") {
    ModelBundle b = small_bundle(37);
    const double lip = score_lipschitz_probe(b, 4, 3);
    CHECK(std::isfinite(lip));
    CHECK(lip > 0.0);
}
