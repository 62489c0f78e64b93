#include "dilo/dilo.hpp"

#include <chrono>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "dilo/fdcheck.hpp"
#include "dilo/optim.hpp"

namespace dilo {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

double now_ms() {
    return std::chrono::duration<double, std::milli>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
}


}  // namespace

InvOpt parse_optimizer(const std::string& name) {
    if (name == "adam") return InvOpt::Adam;
    if (name == "adamw") return InvOpt::AdamW;
    if (name == "gd-1-over-L" || name == "gd") return InvOpt::Gd;
    fail("unknown optimizer '" + name + "' (expected adam | adamw | gd-1-over-L)");
}

Tensor grounded_target(const Observation& y_obs) {
    // grounding convention: each pattern row is mean-removed, matching the
    // solver output and making constant offsets in the data irrelevant
    std::vector<double> v = y_obs.v;
    for (std::size_t k = 0; k < y_obs.patterns; ++k) {
        double m = 0;
        for (std::size_t b = 0; b < y_obs.boundary; ++b) m += v[k * y_obs.boundary + b];
        m /= static_cast<double>(y_obs.boundary);
        for (std::size_t b = 0; b < y_obs.boundary; ++b) v[k * y_obs.boundary + b] -= m;
    }
    return Tensor::from_vec(std::move(v), {y_obs.patterns, y_obs.boundary});
}

LossEval measurement_loss(const ModelBundle& bundle, const SurrogateHandle& surrogate,
                          const DiffusionSchedule& schedule, const Tensor& zT,
                          const Tensor& target, double weight, bool want_grad) {
    Graph g;
    BoundBundle bb = bind_bundle(g, bundle);
    Tensor leaf = g.leaf(zT);
    Tensor z0 = sample_deterministic(g, bb, leaf, schedule);
    Tensor a_col = decode(g, bb, z0);
    Tensor a_row = g.transpose(a_col);
    Tensor y = surrogate_eval(g, surrogate, a_row);
    if (!y.same_shape(target))
        fail("measurement_loss: prediction " + y.shape_str() + " vs target " +
             target.shape_str());
    Tensor loss = g.scale(g.sum(g.square(g.sub(y, g.leaf(target)))), weight);

    LossEval out;
    out.loss = loss.at(0);
    out.field = a_row.vals();
    if (!std::isfinite(out.loss)) fail("measurement_loss: non-finite loss");
    if (want_grad) {
        out.grad_zT = g.backward(loss).wrt(leaf);
        out.grad_norm = out.grad_zT.norm2();
    }
    return out;
}

double mean_abs_error(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) fail("mean_abs_error: length mismatch");
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += std::fabs(a[i] - b[i]);
    return s / static_cast<double>(a.size());
}

TrajectoryDiagnostics dilo_invert(const Observation& y_obs, const ModelBundle& bundle,
                                  const SurrogateHandle& surrogate,
                                  const InversionConfig& config,
                                  const SurrogateHandle* exact_ref,
                                  const std::vector<double>* true_field) {
    if (config.iterations < 1) fail("dilo_invert: iterations must be >= 1");
    if (!(config.lr > 0.0)) fail("dilo_invert: learning rate must be > 0");
    const DiffusionSchedule schedule = with_substeps(bundle.schedule, config.substeps);
    const Tensor target = grounded_target(y_obs);

    Rng rng(derive_seed(config.seed, "invert-init"));
    Tensor zT = rng.normal_tensor({bundle.latent_dim, 1});

    OptimizerState opt_state;
    OptimizerConfig opt_cfg;
    opt_cfg.lr = config.lr;
    opt_cfg.mode = config.mode == InvOpt::Adam
                       ? OptMode::Adam
                       : (config.mode == InvOpt::AdamW ? OptMode::AdamW : OptMode::Gd);
    if (config.mode == InvOpt::AdamW) opt_cfg.weight_decay = 0.0;

    TrajectoryDiagnostics diag;
    diag.gd_mode = config.mode == InvOpt::Gd;
    diag.lr_used = config.lr;
    double best = 0;
    const double t0 = now_ms();
    for (std::size_t it = 0; it < config.iterations; ++it) {
        LossEval ev;
        try {
            ev = measurement_loss(bundle, surrogate, schedule, zT, target,
                                  config.loss_weight, true);
        } catch (const std::exception& e) {
            fail("dilo_invert: iteration " + std::to_string(it) + ": " + e.what());
        }
        diag.loss.push_back(ev.loss);
        diag.grad_norm.push_back(ev.grad_norm);
        diag.zT_series.push_back(zT.vals());
        diag.wallclock_ms.push_back(now_ms() - t0);
        if (exact_ref) {
            LossEval ex = measurement_loss(bundle, *exact_ref, schedule, zT, target,
                                           config.loss_weight, true);
            diag.grad_norm_exact.push_back(ex.grad_norm);
        }
        if (true_field) diag.mae.push_back(mean_abs_error(ev.field, *true_field));

        if (it == 0 || ev.loss < best) {
            best = ev.loss;
            diag.best_iter = it;
            diag.best_field = ev.field;
            diag.best_zT = zT.detached();
        }
        diag.final_field = ev.field;
        diag.final_zT = zT.detached();
        diag.iters_run = it + 1;

        if (ev.grad_norm < config.grad_tol || ev.loss < config.loss_tol) {
            diag.early_stopped = true;
            break;
        }
        optimizer_update(opt_state, {&zT}, {ev.grad_zT}, opt_cfg);
    }
    diag.initial_loss = diag.loss.front();
    diag.best_loss = best;
    diag.final_loss = diag.loss.back();
    return diag;
}

DpsDiagnostics dps_baseline(const Observation& y_obs, const ModelBundle& bundle,
                            const SurrogateHandle& surrogate, double guidance_scale,
                            const InversionConfig& config) {
    const DiffusionSchedule schedule = with_substeps(bundle.schedule, config.substeps);
    const Tensor target = grounded_target(y_obs);
    Rng rng(derive_seed(config.seed, "invert-init"));  // same init as dilo_invert
    Tensor z = rng.normal_tensor({bundle.latent_dim, 1});

    DpsDiagnostics out;
    const auto& subs = schedule.substeps;
    for (std::size_t i = 0; i < subs.size(); ++i) {
        const int t = subs[i];
        const int t_prev = i + 1 < subs.size() ? subs[i + 1] : 0;
        Graph g;
        BoundBundle bb = bind_bundle(g, bundle);
        Tensor leaf = g.leaf(z);
        Tensor eps_hat = score_forward(g, bb, leaf, t);
        Tensor z0_hat = tweedie(g, leaf, eps_hat, t, schedule);
        Tensor a_row = g.transpose(decode(g, bb, z0_hat));
        Tensor y = surrogate_eval(g, surrogate, a_row);
        Tensor res = g.scale(g.sum(g.square(g.sub(y, g.leaf(target)))), config.loss_weight);
        out.residual_per_step.push_back(res.at(0));
        Tensor z_det = ddim_step(g, leaf, eps_hat, t, t_prev, 0.0, nullptr, schedule);
        std::vector<double> next = z_det.vals();
        if (guidance_scale != 0.0) {
            const Tensor gz = g.backward(res).wrt(leaf);
            for (std::size_t j = 0; j < next.size(); ++j)
                next[j] -= guidance_scale * gz.at(j);
        }
        z = Tensor::from_vec(std::move(next), z.shape);
    }

    Graph g;
    BoundBundle bb = bind_bundle(g, bundle);
    Tensor a_row = g.transpose(decode(g, bb, g.leaf(z)));
    out.final_field = a_row.vals();
    Tensor y = surrogate_eval(g, surrogate, a_row);
    Tensor loss = g.scale(g.sum(g.square(g.sub(y, g.leaf(target)))), config.loss_weight);
    out.final_loss = loss.at(0);
    return out;
}

OodCurve ood_diagnostic(const ModelBundle& bundle, const SurrogateHandle& surrogate,
                        const std::vector<double>& sigma_field, const Observation& y,
                        std::uint64_t seed) {
    const Tensor target = grounded_target(y);
    const std::vector<double> z0 = encode_raw(bundle, sigma_field);
    Rng rng(derive_seed(seed, "ood-diag"));
    OodCurve curve;
    for (int t : bundle.schedule.substeps) {
        const std::vector<double> eps = rng.normal_vec(z0.size());
        const std::vector<double> zt = forward_noise_raw(z0, t, eps, bundle.schedule);
        Graph g;
        BoundBundle bb = bind_bundle(g, bundle);
        Tensor zt_leaf = g.leaf(Tensor::from_vec(zt, {bundle.latent_dim, 1}));
        Tensor eps_hat = score_forward(g, bb, zt_leaf, t);
        Tensor z0_hat = tweedie(g, zt_leaf, eps_hat, t, bundle.schedule);
        Tensor a_row = g.transpose(decode(g, bb, z0_hat));
        Tensor yhat = surrogate_eval(g, surrogate, a_row);
        Tensor diff = g.sub(yhat, g.leaf(target));
        curve.t.push_back(t);
        curve.residual.push_back(diff.norm2());
    }
    curve.endpoint_ratio = curve.residual.front() / std::max(curve.residual.back(), 1e-300);
    return curve;
}

LEstimate estimate_L(const GradFn& gradf, const std::vector<Tensor>& probes,
                     std::size_t power_iters, double h, std::uint64_t seed, double tol) {
    if (probes.empty()) fail("estimate_L: need at least one probe point");
    LEstimate out;
    Rng rng(derive_seed(seed, "estimate-L"));
    for (const Tensor& z : probes) {
        Tensor v = rng.normal_tensor(z.shape);
        double lam = 0, lam_prev = -1;
        bool converged = false;
        for (std::size_t it = 0; it < power_iters; ++it) {
            const double nv = v.norm2();
            if (nv == 0.0) break;
            Tensor vn = v.detached();
            for (double& x : vn.mut()) x /= nv;
            Tensor hv = hvp_finite_difference(gradf, z, vn, h);
            lam = hv.norm2();
            if (lam < 1e-14) {  // effectively zero curvature
                converged = true;
                break;
            }
            if (lam_prev >= 0 && std::fabs(lam - lam_prev) <= tol * lam) {
                converged = true;
                v = hv;
                break;
            }
            lam_prev = lam;
            v = hv;
        }
        out.per_probe.push_back(lam);
        out.l_hat = std::max(out.l_hat, lam);
        out.converged = out.converged && converged;
    }
    return out;
}

ConvergenceReport verify_convergence(const TrajectoryDiagnostics& diag, double l_hat,
                                     double delta_hat, double descent_threshold,
                                     double slack) {
    if (!diag.gd_mode)
        fail("verify_convergence: diagnostics must come from a gd-1-over-L run");
    if (diag.loss.size() < 2) fail("verify_convergence: trajectory too short");
    ConvergenceReport rep;
    rep.l_hat = l_hat;
    rep.delta_hat = delta_hat;

    std::size_t satisfied = 0, total = 0;
    for (std::size_t k = 0; k + 1 < diag.loss.size(); ++k) {
        const double bound =
            diag.loss[k] - diag.grad_norm[k] * diag.grad_norm[k] / (2.0 * l_hat);
        // tiny relative tolerance absorbs floating-point noise at equality
        if (diag.loss[k + 1] <= bound + 1e-12 * std::fabs(diag.loss[k]) + 1e-300) ++satisfied;
        ++total;
    }
    rep.descent_fraction = static_cast<double>(satisfied) / static_cast<double>(total);
    rep.descent_ok = rep.descent_fraction >= descent_threshold;

    double loss_min = diag.loss[0];
    for (double l : diag.loss) loss_min = std::min(loss_min, l);
    double grad_sum = 0;
    for (std::size_t k = 0; k + 1 < diag.loss.size(); ++k)
        grad_sum += diag.grad_norm[k] * diag.grad_norm[k];
    rep.telescoped_lhs = grad_sum;
    rep.telescoped_rhs = 2.0 * l_hat * (diag.loss[0] - loss_min);
    rep.telescoped_ok = rep.telescoped_lhs <= rep.telescoped_rhs * (1.0 + 1e-12);

    rep.final_grad_surr = diag.grad_norm.back();
    rep.final_grad_exact =
        diag.grad_norm_exact.empty() ? diag.grad_norm.back() : diag.grad_norm_exact.back();
    rep.triangle_ok =
        rep.final_grad_exact <= (delta_hat + rep.final_grad_surr) * (1.0 + slack) + 1e-12;
    return rep;
}

std::string ConvergenceReport::summary() const {
    std::ostringstream os;
    os << "descent " << (descent_ok ? "ok" : "FAIL") << " (fraction " << descent_fraction
       << "), telescoped " << (telescoped_ok ? "ok" : "FAIL") << " (" << telescoped_lhs
       << " <= " << telescoped_rhs << "), triangle " << (triangle_ok ? "ok" : "FAIL")
       << " (|g_exact| " << final_grad_exact << " <= delta " << delta_hat << " + |g_surr| "
       << final_grad_surr << ")";
    return os.str();
}

TheoremSuiteResult run_theorem_suite(const Observation& y_obs, const ModelBundle& bundle,
                                     const SurrogateHandle& surrogate,
                                     const SurrogateHandle* exact_ref,
                                     const InversionConfig& base_config,
                                     std::size_t l_power_iters, double lr_scale) {
    const DiffusionSchedule schedule = with_substeps(bundle.schedule, base_config.substeps);
    const Tensor target = grounded_target(y_obs);
    GradFn gradf = [&](const Tensor& z) {
        return measurement_loss(bundle, surrogate, schedule, z, target,
                                base_config.loss_weight, true)
            .grad_zT;
    };

    Rng rng(derive_seed(base_config.seed, "invert-init"));
    Tensor z_init = rng.normal_tensor({bundle.latent_dim, 1});

    TheoremSuiteResult out;
    LEstimate est = estimate_L(gradf, {z_init}, l_power_iters, 1e-4, base_config.seed + 1);
    double l_hat = est.l_hat;

    for (int round = 0; round < 3; ++round) {
        InversionConfig cfg = base_config;
        cfg.mode = InvOpt::Gd;
        cfg.lr = lr_scale / l_hat;
        out.diagnostics = dilo_invert(y_obs, bundle, surrogate, cfg, exact_ref, nullptr);

        // probes at 0/25/50/75/100 percent of the realized path
        std::vector<Tensor> probes;
        const std::size_t m = out.diagnostics.zT_series.size();
        for (double f : {0.0, 0.25, 0.5, 0.75, 1.0}) {
            const std::size_t idx =
                std::min(m - 1, static_cast<std::size_t>(f * static_cast<double>(m - 1)));
            probes.push_back(
                Tensor::from_vec(out.diagnostics.zT_series[idx], {bundle.latent_dim, 1}));
        }
        out.l_estimate = estimate_L(gradf, probes, l_power_iters, 1e-4,
                                    base_config.seed + 2 + static_cast<std::uint64_t>(round));
        out.l_estimate.l_hat = std::max(out.l_estimate.l_hat, l_hat);

        out.delta_hat = 0.0;
        if (exact_ref && exact_ref->kind != surrogate.kind) {
            GapStats gap = gap_estimate(bundle, surrogate, *exact_ref, y_obs, probes,
                                        base_config.loss_weight);
            out.delta_hat = gap.grad_max;
        }

        if (out.l_estimate.l_hat <= l_hat * (1.0 + 1e-9)) break;
        l_hat = out.l_estimate.l_hat;  // step was too long for the observed curvature
    }
    out.report = verify_convergence(out.diagnostics, out.l_estimate.l_hat, out.delta_hat);
    return out;
}

}  // namespace dilo
