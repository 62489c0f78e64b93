#pragma once

#include <functional>
#include <string>

#include "dilo/surrogate.hpp"

namespace dilo {

enum class InvOpt { Adam, AdamW, Gd };

InvOpt parse_optimizer(const std::string& name);

struct InversionConfig {
    std::size_t iterations = 3000;
    InvOpt mode = InvOpt::AdamW;
    double lr = 5e-3;
    std::uint64_t seed = 0;
    std::size_t substeps = 50;
    double loss_weight = 1.0;
    double noise_gamma = 0.0;   // recorded; noise is applied to y_obs by the caller
    double grad_tol = 1e-8;
    double loss_tol = 1e-12;
};

struct TrajectoryDiagnostics {
    std::vector<double> loss, grad_norm;
    std::vector<double> grad_norm_exact;       // empty unless a reference handle was given
    std::vector<double> mae;                   // empty unless the true field was given
    std::vector<double> wallclock_ms;
    std::vector<std::vector<double>> zT_series;
    std::vector<double> best_field, final_field;
    Tensor best_zT, final_zT;
    std::size_t best_iter = 0;
    std::size_t iters_run = 0;
    bool early_stopped = false;
    bool gd_mode = false;
    double lr_used = 0;
    double initial_loss = 0, best_loss = 0, final_loss = 0;
};

/// One full evaluation of the measurement loss at z_T: deterministic unroll,
/// decode, surrogate, squared error against the grounded target.
struct LossEval {
    double loss = 0;
    Tensor grad_zT;
    std::vector<double> field;
    double grad_norm = 0;
};

Tensor grounded_target(const Observation& y_obs);

LossEval measurement_loss(const ModelBundle& bundle, const SurrogateHandle& surrogate,
                          const DiffusionSchedule& schedule, const Tensor& zT,
                          const Tensor& target, double weight, bool want_grad);

/// Gradient descent (or Adam/AdamW) on the initial latent noise through the
/// deterministic unroll. Returns the decoded field of the best-loss iterate.
TrajectoryDiagnostics dilo_invert(const Observation& y_obs, const ModelBundle& bundle,
                                  const SurrogateHandle& surrogate,
                                  const InversionConfig& config,
                                  const SurrogateHandle* exact_ref = nullptr,
                                  const std::vector<double>* true_field = nullptr);

/// Single guided reverse pass: at every substep the measurement gradient at
/// the current state, evaluated through the predicted clean latent, is
/// subtracted from the deterministic update.
struct DpsDiagnostics {
    std::vector<double> residual_per_step;
    std::vector<double> final_field;
    double final_loss = 0;
};

DpsDiagnostics dps_baseline(const Observation& y_obs, const ModelBundle& bundle,
                            const SurrogateHandle& surrogate, double guidance_scale,
                            const InversionConfig& config);

/// Per-timestep surrogate residual when the clean-state prediction from a
/// noised encoding is fed to the forward operator.
struct OodCurve {
    std::vector<int> t;
    std::vector<double> residual;
    double endpoint_ratio = 0;  // residual at t = T over residual at smallest t
};

OodCurve ood_diagnostic(const ModelBundle& bundle, const SurrogateHandle& surrogate,
                        const std::vector<double>& sigma_field, const Observation& y,
                        std::uint64_t seed);

/// Dominant curvature magnitude of a loss, by power iteration on the
/// finite-difference Hessian-vector product of its analytic gradient,
/// maximized over the probe points.
struct LEstimate {
    double l_hat = 0;
    std::vector<double> per_probe;
    bool converged = true;
};

using GradFn = std::function<Tensor(const Tensor&)>;

LEstimate estimate_L(const GradFn& gradf, const std::vector<Tensor>& probes,
                     std::size_t power_iters, double h, std::uint64_t seed,
                     double tol = 1e-3);

/// Checks of the gradient-descent trajectory: per-iteration descent
/// inequality with 1/(2L), the telescoped gradient-sum bound, and the
/// triangle bound relating the exact gradient to the surrogate gradient
/// plus the estimated gap.
struct ConvergenceReport {
    double descent_fraction = 0;
    bool descent_ok = false;
    double telescoped_lhs = 0, telescoped_rhs = 0;
    bool telescoped_ok = false;
    double final_grad_exact = 0, final_grad_surr = 0, delta_hat = 0;
    bool triangle_ok = false;
    double l_hat = 0;

    bool all_ok() const { return descent_ok && telescoped_ok && triangle_ok; }
    std::string summary() const;
};

ConvergenceReport verify_convergence(const TrajectoryDiagnostics& diag, double l_hat,
                                     double delta_hat, double descent_threshold = 0.95,
                                     double slack = 0.10);

/// Full protocol: estimate L at the start, run gradient descent with
/// lr = lr_scale / L, re-estimate L along the path (re-running once if the
/// path estimate grew), estimate the gradient gap on the same probes, then
/// verify. lr_scale = 1 is the theorem setting; larger values are negative
/// controls.
struct TheoremSuiteResult {
    TrajectoryDiagnostics diagnostics;
    LEstimate l_estimate;
    double delta_hat = 0;
    ConvergenceReport report;
};

TheoremSuiteResult run_theorem_suite(const Observation& y_obs, const ModelBundle& bundle,
                                     const SurrogateHandle& surrogate,
                                     const SurrogateHandle* exact_ref,
                                     const InversionConfig& base_config,
                                     std::size_t l_power_iters = 12, double lr_scale = 1.0);

double mean_abs_error(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace dilo
