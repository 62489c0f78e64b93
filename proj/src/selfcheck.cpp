#include "dilo/selfcheck.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "dilo/diffusion.hpp"
#include "dilo/fdcheck.hpp"
#include "dilo/grid.hpp"
#include "dilo/io.hpp"
#include "dilo/physics.hpp"
#include "dilo/rng.hpp"

namespace dilo {

namespace {

struct Checker {
    std::ostream& out;
    int failures = 0;

    void check(const char* name, bool ok) {
        out << (ok ? "[ok]   " : "[FAIL] ") << name << "\n";
        if (!ok) ++failures;
    }
};

double misfit(const ConductivityField& s, const CurrentPatternSet& ps, const Observation& o) {
    const EitSolution sol = eit_solve(s, ps);
    double m = 0;
    for (std::size_t k = 0; k < o.patterns; ++k) {
        double mean = 0;
        std::vector<double> r(o.boundary);
        for (std::size_t b = 0; b < o.boundary; ++b) {
            r[b] = sol.obs.at(k, b) - o.at(k, b);
            mean += r[b];
        }
        mean /= static_cast<double>(o.boundary);
        for (double x : r) m += 0.5 * (x - mean) * (x - mean);
    }
    return m;
}

}  // namespace

int run_verify_suite(std::ostream& out) {
    Checker c{out};

    {  // reverse mode against central differences on a tanh composite
        Rng rng(101);
        Tensor w1 = rng.normal_tensor({5, 6});
        Tensor w2 = rng.normal_tensor({3, 5});
        Tensor x = rng.normal_tensor({6, 1});
        Graph g;
        Tensor leaf = g.leaf(x);
        Tensor loss = g.sum(g.square(g.matmul(w2, g.tanh(g.matmul(w1, leaf)))));
        Tensor analytic = g.backward(loss).wrt(leaf);
        Tensor fd = finite_difference_gradient(
            [&](const Tensor& t) {
                Graph g2;
                return g2.sum(g2.square(g2.matmul(w2, g2.tanh(g2.matmul(w1, g2.leaf(t))))))
                    .at(0);
            },
            x, 1e-6);
        c.check("autodiff gradient vs finite differences", rel_l2_error(analytic, fd) < 1e-6);
        c.check("graph replay is bit-exact", g.replay_matches());
    }
    {  // sampling identities
        DiffusionSchedule s = make_schedule(120, 1e-4, 0.04, 12);
        Rng rng(102);
        bool two_form = true, round_trip = true;
        Graph g;
        for (int rep = 0; rep < 5; ++rep) {
            const int t = static_cast<int>(2 + rng.uniform_index(118));
            const int t_prev = static_cast<int>(rng.uniform_index(static_cast<std::size_t>(t)));
            Tensor z = rng.normal_tensor({6});
            Tensor eps = rng.normal_tensor({6});
            Tensor stepped = ddim_step(g, z, eps, t, t_prev, 0.0, nullptr, s);
            auto [cc, dd] = coefficients_cd(t, t_prev, s);
            for (std::size_t i = 0; i < 6; ++i)
                if (std::fabs(stepped.at(i) - (cc * z.at(i) + dd * eps.at(i))) > 1e-12)
                    two_form = false;
            Tensor z0 = rng.normal_tensor({6});
            Tensor zt = forward_noise(g, z0, t, eps, s);
            Tensor rec = tweedie(g, zt, eps, t, s);
            for (std::size_t i = 0; i < 6; ++i)
                if (std::fabs(rec.at(i) - z0.at(i)) > 1e-10) round_trip = false;
        }
        c.check("deterministic update two-form identity", two_form);
        c.check("clean-state prediction inverts forward noising", round_trip);
        auto [c1, d1] = coefficients_cd(2, 1, make_schedule(3, 0.0, 0.0, 2, true));
        c.check("identity step coefficients (1, 0)", c1 == 1.0 && d1 == 0.0);
    }
    {  // adjoint gradient against the finite-difference oracle
        Rng rng(103);
        const std::size_t n = 12;
        CurrentPatternSet ps = make_trig_patterns(n, 4);
        bool adjoint_ok = true;
        for (int inst = 0; inst < 2; ++inst) {
            ConductivityField s;
            s.n = n;
            s.sigma.resize(n * n);
            for (double& v : s.sigma) v = 0.15 + 0.6 * rng.uniform();
            ConductivityField tgt = s;
            for (double& v : tgt.sigma) v = 0.15 + 0.6 * rng.uniform();
            Observation obs = eit_solve(tgt, ps).obs;
            EitGradient grad = eit_adjoint_gradient(s, ps, obs);
            std::vector<double> dir(n * n);
            for (double& v : dir) v = rng.normal();
            double analytic = 0;
            for (std::size_t i = 0; i < dir.size(); ++i) analytic += grad.grad[i] * dir[i];
            const double h = 1e-5;
            ConductivityField sp = s, sm = s;
            for (std::size_t i = 0; i < dir.size(); ++i) {
                sp.sigma[i] += h * dir[i];
                sm.sigma[i] -= h * dir[i];
            }
            const double fd = (misfit(sp, ps, obs) - misfit(sm, ps, obs)) / (2.0 * h);
            if (std::fabs(analytic - fd) > 1e-4 * std::max(std::fabs(fd), 1e-12))
                adjoint_ok = false;
        }
        c.check("adjoint gradient vs finite differences", adjoint_ok);

        // homogeneity
        ConductivityField s;
        s.n = n;
        s.sigma.assign(n * n, 0.0);
        for (double& v : s.sigma) v = 0.2 + 0.5 * rng.uniform();
        Observation base = eit_solve(s, ps).obs;
        ConductivityField s3 = s;
        for (double& v : s3.sigma) v *= 3.1;
        Observation scaled = eit_solve(s3, ps).obs;
        double num = 0, den = 0;
        for (std::size_t i = 0; i < base.v.size(); ++i) {
            const double want = base.v[i] / 3.1;
            num += (scaled.v[i] - want) * (scaled.v[i] - want);
            den += want * want;
        }
        c.check("forward-map homogeneity in sigma", std::sqrt(num / den) < 1e-10);
    }
    {  // harmonic extension maximum principle
        Rng rng(104);
        const std::size_t n = 10;
        bool ok = true;
        for (int rep = 0; rep < 10; ++rep) {
            std::vector<double> bv(4 * (n - 1));
            for (double& v : bv) v = rng.normal();
            double lo = 1e300, hi = -1e300;
            for (double v : bv) {
                lo = std::min(lo, v);
                hi = std::max(hi, v);
            }
            for (double v : harmonic_extension(bv, n))
                if (v < lo - 1e-9 || v > hi + 1e-9) ok = false;
        }
        c.check("harmonic extension maximum principle", ok);
    }
    {  // viscous decay and mean conservation
        NsConfig cfg;
        cfg.n = 16;
        cfg.nu = 0.01;
        cfg.forcing_amplitude = 0.0;
        cfg.advection = false;
        std::vector<double> w0(cfg.n * cfg.n);
        for (std::size_t iy = 0; iy < cfg.n; ++iy)
            for (std::size_t ix = 0; ix < cfg.n; ++ix)
                w0[iy * cfg.n + ix] =
                    std::cos(2.0 * M_PI * static_cast<double>(ix) / cfg.n);
        std::vector<double> wT = ns_forward(w0, cfg, 0.5, 1e-3);
        const double decay = std::exp(-cfg.nu * 0.5);
        bool decay_ok = true;
        for (std::size_t i = 0; i < wT.size(); ++i)
            if (std::fabs(wT[i] - decay * w0[i]) > 1e-8) decay_ok = false;
        c.check("viscous single-mode decay vs closed form", decay_ok);

        NsConfig turb;
        turb.n = 16;
        std::vector<double> grf = gen_ns_grf(1, 7, turb.n)[0];
        for (double& x : grf) x += 0.21;
        double m0 = 0, mT = 0;
        std::vector<double> end = ns_forward(grf, turb, 0.2, 1e-3);
        for (double x : grf) m0 += x;
        for (double x : end) mT += x;
        c.check("mean vorticity conservation",
                std::fabs(mT - m0) / static_cast<double>(grf.size()) < 1e-12);
    }
    {  // file format round trips
        Rng rng(105);
        Tensor t = rng.normal_tensor({3, 5, 2});
        const std::vector<std::uint8_t> bytes = encode_tensor(t);
        Tensor back = decode_tensor(bytes);
        bool ok = back.same_shape(t) && back.dtype == t.dtype;
        for (std::size_t i = 0; ok && i < t.numel(); ++i)
            if (back.at(i) != t.at(i)) ok = false;
        c.check("tensor encode/decode round trip", ok);

        RunConfig cfg;
        cfg.iterations = 123;
        cfg.lr = 0.0123;
        RunConfig reparsed = parse_config(serialize_config(cfg));
        c.check("config serialize/parse round trip",
                serialize_config(reparsed) == serialize_config(cfg));
        bool rejected = false;
        try {
            parse_config("[invert]\nbogus_key = 1\n");
        } catch (const std::exception&) {
            rejected = true;
        }
        c.check("config rejects unknown keys", rejected);
    }
    return c.failures;
}

}  // namespace dilo
