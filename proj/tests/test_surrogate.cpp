#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "dilo/dilo.hpp"
#include "dilo/fdcheck.hpp"
#include "dilo/pipeline.hpp"
#include "dilo/surrogate.hpp"
#include "oracles.hpp"

using namespace dilo;

namespace {

RunConfig tiny_config() {
    RunConfig c;
    c.grid = 8;
    c.latent = 6;
    c.ae_hidden = "24";
    c.score_hidden = "24";
    c.patterns = 4;
    c.channels = 4;
    c.layers = 2;
    c.modes = 3;
    c.t_train = 60;
    c.substeps = 5;
    return c;
}

}  // namespace

TEST_CASE("exact handle value equals the solver output bit-exactly") {
    RunConfig c = tiny_config();
    CurrentPatternSet ps = make_trig_patterns(c.grid, c.patterns);
    SurrogateHandle exact = make_exact_surrogate(ps);
    std::vector<std::vector<double>> fields = gen_eit_blobs(1, 3, c.grid);
    ConductivityField f{c.grid, fields[0], 0.01, 1.0};
    EitSolution sol = eit_solve(f, ps);

    Graph g;
    Tensor a = g.leaf(Tensor::from_vec(fields[0], {1, fields[0].size()}));
    Tensor y = surrogate_eval(g, exact, a);
    CHECK(y.shape == std::vector<std::size_t>{c.patterns, sol.obs.boundary});
    for (std::size_t i = 0; i < y.numel(); ++i) CHECK(y.at(i) == sol.obs.v[i]);
    CHECK(g.replay_matches());
}

TEST_CASE("exact handle vjp with residual cotangent equals the adjoint gradient") {
    RunConfig c = tiny_config();
    CurrentPatternSet ps = make_trig_patterns(c.grid, c.patterns);
    SurrogateHandle exact = make_exact_surrogate(ps);
    std::vector<std::vector<double>> fields = gen_eit_blobs(2, 5, c.grid);
    ConductivityField f{c.grid, fields[0], 0.01, 1.0};
    ConductivityField tgt{c.grid, fields[1], 0.01, 1.0};
    Observation obs = eit_solve(tgt, ps).obs;
    EitSolution sol = eit_solve(f, ps);

    std::vector<double> cot(sol.obs.v.size());
    for (std::size_t i = 0; i < cot.size(); ++i) cot[i] = sol.obs.v[i] - obs.v[i];
    std::vector<double> vjp = surrogate_vjp(exact, fields[0], cot);
    EitGradient grad = eit_adjoint_gradient(f, ps, obs);
    for (std::size_t i = 0; i < vjp.size(); ++i)
        CHECK(std::fabs(vjp[i] - grad.grad[i]) < 1e-12);
}

TEST_CASE("exact handle backward on the graph matches the adjoint gradient") {
    RunConfig c = tiny_config();
    CurrentPatternSet ps = make_trig_patterns(c.grid, c.patterns);
    SurrogateHandle exact = make_exact_surrogate(ps);
    std::vector<std::vector<double>> fields = gen_eit_blobs(2, 7, c.grid);
    ConductivityField tgt{c.grid, fields[1], 0.01, 1.0};
    Observation obs = eit_solve(tgt, ps).obs;

    Graph g;
    Tensor a = g.leaf(Tensor::from_vec(fields[0], {1, fields[0].size()}));
    Tensor y = surrogate_eval(g, exact, a);
    Tensor want = g.leaf(Tensor::from_vec(obs.v, y.shape));
    Tensor loss = g.scale(g.sum(g.square(g.sub(y, want))), 0.5);
    Tensor grad = g.backward(loss).wrt(a);

    ConductivityField f{c.grid, fields[0], 0.01, 1.0};
    EitGradient adj = eit_adjoint_gradient(f, ps, obs);
    CHECK(std::fabs(loss.at(0) - adj.misfit) < 1e-12);
    CHECK(rel_l2_error(grad, Tensor::from_vec(adj.grad, grad.shape)) < 1e-10);
}

TEST_CASE("neural handle vjp matches finite differences") {
    RunConfig c = tiny_config();
    ModelBundle b = bundle_from_config(c, 11);
    SurrogateHandle neural = make_neural_surrogate(b.surrogate);
    Rng rng(13);
    std::vector<double> a(c.grid * c.grid);
    for (double& x : a) x = 0.2 + 0.05 * rng.normal();
    std::vector<double> cot(c.patterns * 4 * (c.grid - 1));
    for (double& x : cot) x = rng.normal();

    std::vector<double> vjp = surrogate_vjp(neural, a, cot);
    auto pseudo_loss = [&](const Tensor& x) {
        Graph g;
        Tensor y = surrogate_eval(g, neural, g.leaf(x));
        double s = 0;
        for (std::size_t i = 0; i < cot.size(); ++i) s += y.at(i) * cot[i];
        return s;
    };
    Tensor fd = finite_difference_gradient(pseudo_loss, Tensor::from_vec(a, {1, a.size()}), 1e-6);
    CHECK(rel_l2_error(Tensor::from_vec(vjp, {1, a.size()}), fd) < 1e-5);
}

TEST_CASE("train_surrogate memorizes a 5-sample dataset") {
    RunConfig c = tiny_config();
    PairedEitDataset ds = gen_eit_paired(5, 21, c.grid, c.patterns);
    ModelBundle b = bundle_from_config(c, 23);
    TrainConfig cfg;
    cfg.epochs = 1500;
    cfg.batch = 5;
    cfg.opt.lr = 4e-3;
    cfg.seed = 2;
    SurrogateTrainResult res = train_surrogate(b.surrogate, ds, nullptr, cfg);
    CHECK(res.losses.size() == cfg.epochs);
    double best = res.losses.front();
    for (double l : res.losses) best = std::min(best, l);
    CHECK(best <= res.losses.front());
    CHECK(best < 1e-4);
    CHECK(res.holdout_rel_l2 == -1.0);

    PairedEitDataset empty;
    CHECK_THROWS_AS(train_surrogate(b.surrogate, empty, nullptr, cfg), std::runtime_error);
}

TEST_CASE("gap estimate: zero against itself, shrinks with training") {
    RunConfig c = tiny_config();
    c.n_train = 24;
    c.n_test = 8;
    c.ae_epochs = 150;
    c.ldm_epochs = 60;
    c.surr_epochs = 0;  // untrained surrogate first
    EitTestbed tb = build_eit_testbed(c, 31);

    Observation y_obs;
    y_obs.patterns = tb.train.m_patterns;
    y_obs.boundary = tb.train.boundary;
    y_obs.v = tb.train.observations[0];

    Rng rng(33);
    std::vector<Tensor> probes;
    for (int i = 0; i < 3; ++i) probes.push_back(rng.normal_tensor({c.latent, 1}));

    GapStats self = gap_estimate(tb.bundle, tb.exact, tb.exact, y_obs, probes);
    CHECK(self.grad_max == 0.0);
    CHECK(self.value_max == 0.0);

    SurrogateHandle untrained = make_neural_surrogate(tb.bundle.surrogate);
    GapStats before = gap_estimate(tb.bundle, untrained, tb.exact, y_obs, probes);
    CHECK(before.grad_max > 0.0);

    TrainConfig cfg;
    cfg.epochs = 120;
    cfg.batch = 8;
    cfg.opt.lr = 3e-3;
    cfg.seed = 5;
    train_surrogate(tb.bundle.surrogate, tb.train, nullptr, cfg);
    SurrogateHandle trained = make_neural_surrogate(tb.bundle.surrogate);
    GapStats after = gap_estimate(tb.bundle, trained, tb.exact, y_obs, probes);
    CHECK(after.grad_max >= 0.0);
    // training shrinks both gaps by at least 30 percent on fixed probes
    CHECK(after.grad_max < 0.7 * before.grad_max);
    CHECK(after.value_max < 0.7 * before.value_max);
}

TEST_CASE("end-to-end exact-adjoint gradient matches finite differences") {
    RunConfig c = tiny_config();
    ModelBundle b = bundle_from_config(c, 41);
    // temper the random score net so the unroll is well-conditioned
    for (Tensor& w : b.score.weight) {
        Tensor s = w;
        for (double& x : s.mut()) x *= 0.3;
        w = s;
    }
    CurrentPatternSet ps = make_trig_patterns(c.grid, c.patterns);
    SurrogateHandle exact = make_exact_surrogate(ps);
    std::vector<std::vector<double>> fields = gen_eit_blobs(1, 43, c.grid);
    ConductivityField tgt{c.grid, fields[0], 0.01, 1.0};
    Observation y_obs = eit_solve(tgt, ps).obs;
    const Tensor target = grounded_target(y_obs);
    const DiffusionSchedule sched = with_substeps(b.schedule, 5);

    Rng rng(45);
    Tensor zT = rng.normal_tensor({c.latent, 1});
    LossEval ev = measurement_loss(b, exact, sched, zT, target, 1.0, true);
    Tensor fd = finite_difference_gradient(
        [&](const Tensor& z) {
            return measurement_loss(b, exact, sched, z, target, 1.0, false).loss;
        },
        zT, 1e-4);
    CHECK(rel_l2_error(ev.grad_zT, fd) < 1e-6);
}
