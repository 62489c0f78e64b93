#pragma once

#include <functional>
#include <vector>

#include "dilo/rng.hpp"
#include "dilo/tensor.hpp"

namespace dilo {

/// DDPM noise schedule plus the decreasing list of inference timesteps.
/// alpha_bar_at(0) is defined as 1, so the final update of a trajectory
/// returns the predicted clean state exactly.
struct DiffusionSchedule {
    std::size_t t_train = 0;
    std::vector<double> beta;       // beta[t-1] for t = 1..t_train
    std::vector<double> alpha;      // 1 - beta
    std::vector<double> alpha_bar;  // running product of alpha
    std::vector<int> substeps;      // strictly decreasing, subset of 1..t_train
};

DiffusionSchedule make_schedule(std::size_t t_train, double beta_start, double beta_end,
                                std::size_t n_substeps, bool allow_degenerate = false);

/// Same beta tables, different inference substep count.
DiffusionSchedule with_substeps(const DiffusionSchedule& s, std::size_t n_substeps);

double alpha_bar_at(const DiffusionSchedule& s, int t);

/// (c_t, d_t) of the single-step deterministic update
/// z_{t_prev} = c_t z_t + d_t eps_hat.
std::pair<double, double> coefficients_cd(int t, int t_prev, const DiffusionSchedule& s);

/// z_t = sqrt(abar_t) z0 + sqrt(1-abar_t) eps.
Tensor forward_noise(Graph& g, const Tensor& z0, int t, const Tensor& eps,
                     const DiffusionSchedule& s);
std::vector<double> forward_noise_raw(const std::vector<double>& z0, int t,
                                      const std::vector<double>& eps,
                                      const DiffusionSchedule& s);

/// Predicted clean state under the noise-prediction convention:
/// z0_hat = (z_t - sqrt(1-abar_t) eps_hat) / sqrt(abar_t).
Tensor tweedie(Graph& g, const Tensor& z_t, const Tensor& eps_hat, int t,
               const DiffusionSchedule& s);

/// One DDIM update from t to t_prev. noise is required iff eta > 0.
Tensor ddim_step(Graph& g, const Tensor& z_t, const Tensor& eps_hat, int t, int t_prev,
                 double eta, const Tensor* noise, const DiffusionSchedule& s);

/// Noise prediction network evaluated at (z_t, t) on the given graph.
using ScoreFn = std::function<Tensor(Graph&, const Tensor&, int)>;

struct TrajectoryRecord {
    struct Step {
        int t = 0;
        Tensor z_t, eps_hat, z0_hat;
    };
    std::vector<Step> steps;
    Tensor z0;
};

/// Deterministic (eta = 0) unroll over consecutive substep pairs, ending at
/// t = 0. Fully on-graph, so the result is differentiable w.r.t. z_T.
Tensor sample_deterministic(Graph& g, const ScoreFn& score, const Tensor& z_T,
                            const DiffusionSchedule& s, TrajectoryRecord* record = nullptr);

/// Mean over the batch of ||eps - eps_theta(z_t, t)||^2 with per-sample
/// t ~ U{1..t_train} and eps ~ N(0, I). Differentiable through the score.
Tensor diffusion_loss(Graph& g, const ScoreFn& score,
                      const std::vector<std::vector<double>>& batch_z0,
                      std::size_t latent_dim, const DiffusionSchedule& s, Rng& rng);

}  // namespace dilo
