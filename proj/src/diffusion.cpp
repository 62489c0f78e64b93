#include "dilo/diffusion.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace dilo {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

void check_t(const DiffusionSchedule& s, int t) {
    if (t < 1 || static_cast<std::size_t>(t) > s.t_train)
        fail("schedule: timestep " + std::to_string(t) + " outside 1.." +
             std::to_string(s.t_train));
}

double delta_t(const DiffusionSchedule& s, int t, int t_prev) {
    const double ab_t = alpha_bar_at(s, t);
    const double ab_p = alpha_bar_at(s, t_prev);
    return std::sqrt((1.0 - ab_p) / (1.0 - ab_t)) * std::sqrt(1.0 - ab_t / ab_p);
}

std::vector<int> spaced_substeps(std::size_t t_train, std::size_t n_substeps) {
    std::vector<int> out(n_substeps);
    for (std::size_t i = 0; i < n_substeps; ++i) {
        if (n_substeps == 1) {
            out[i] = static_cast<int>(t_train);
        } else {
            const double frac = static_cast<double>(i) / (n_substeps - 1);
            out[i] = static_cast<int>(std::llround(t_train - frac * (t_train - 1)));
        }
    }
    for (std::size_t i = 1; i < n_substeps; ++i)
        if (out[i] >= out[i - 1]) fail("schedule: substeps not strictly decreasing");
    return out;
}

}  // namespace

DiffusionSchedule make_schedule(std::size_t t_train, double beta_start, double beta_end,
                                std::size_t n_substeps, bool allow_degenerate) {
    if (t_train < 1) fail("make_schedule: t_train must be >= 1");
    const bool degenerate_ok = allow_degenerate && beta_start == 0.0 && beta_end == 0.0;
    if (!degenerate_ok && !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
        fail("make_schedule: need 0 < beta_start <= beta_end < 1");
    if (n_substeps < 1 || n_substeps > t_train)
        fail("make_schedule: need 1 <= n_substeps <= t_train");

    DiffusionSchedule s;
    s.t_train = t_train;
    s.beta.resize(t_train);
    s.alpha.resize(t_train);
    s.alpha_bar.resize(t_train);
    double prod = 1.0;
    for (std::size_t i = 0; i < t_train; ++i) {
        const double frac = t_train == 1 ? 0.0 : static_cast<double>(i) / (t_train - 1);
        s.beta[i] = beta_start + (beta_end - beta_start) * frac;
        s.alpha[i] = 1.0 - s.beta[i];
        prod *= s.alpha[i];
        s.alpha_bar[i] = prod;
    }
    s.substeps = spaced_substeps(t_train, n_substeps);
    return s;
}

DiffusionSchedule with_substeps(const DiffusionSchedule& s, std::size_t n_substeps) {
    if (n_substeps < 1 || n_substeps > s.t_train)
        fail("with_substeps: need 1 <= n_substeps <= t_train");
    DiffusionSchedule out = s;
    out.substeps = spaced_substeps(s.t_train, n_substeps);
    return out;
}

double alpha_bar_at(const DiffusionSchedule& s, int t) {
    if (t == 0) return 1.0;
    check_t(s, t);
    return s.alpha_bar[static_cast<std::size_t>(t - 1)];
}

std::pair<double, double> coefficients_cd(int t, int t_prev, const DiffusionSchedule& s) {
    if (t <= t_prev) fail("coefficients_cd: need t > t_prev");
    const double ab_t = alpha_bar_at(s, t);
    const double ab_p = alpha_bar_at(s, t_prev);
    const double c = std::sqrt(ab_p) / std::sqrt(ab_t);
    const double d = std::sqrt(1.0 - ab_p) - c * std::sqrt(1.0 - ab_t);
    return {c, d};
}

std::vector<double> forward_noise_raw(const std::vector<double>& z0, int t,
                                      const std::vector<double>& eps,
                                      const DiffusionSchedule& s) {
    check_t(s, t);
    if (z0.size() != eps.size()) fail("forward_noise: shape mismatch");
    const double ab = alpha_bar_at(s, t);
    const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
    std::vector<double> out(z0.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * z0[i] + b * eps[i];
    return out;
}

Tensor forward_noise(Graph& g, const Tensor& z0, int t, const Tensor& eps,
                     const DiffusionSchedule& s) {
    check_t(s, t);
    if (!z0.same_shape(eps))
        fail("forward_noise: shape mismatch " + z0.shape_str() + " vs " + eps.shape_str());
    const double ab = alpha_bar_at(s, t);
    return g.add(g.scale(z0, std::sqrt(ab)), g.scale(eps, std::sqrt(1.0 - ab)));
}

Tensor tweedie(Graph& g, const Tensor& z_t, const Tensor& eps_hat, int t,
               const DiffusionSchedule& s) {
    if (!z_t.same_shape(eps_hat))
        fail("tweedie: shape mismatch " + z_t.shape_str() + " vs " + eps_hat.shape_str());
    const double ab = alpha_bar_at(s, t);
    if (ab == 0.0) fail("tweedie: alpha_bar is zero at t=" + std::to_string(t));
    return g.scale(g.sub(z_t, g.scale(eps_hat, std::sqrt(1.0 - ab))), 1.0 / std::sqrt(ab));
}

Tensor ddim_step(Graph& g, const Tensor& z_t, const Tensor& eps_hat, int t, int t_prev,
                 double eta, const Tensor* noise, const DiffusionSchedule& s) {
    if (t <= t_prev) fail("ddim_step: need t > t_prev");
    const double ab_p = alpha_bar_at(s, t_prev);
    Tensor z0_hat = tweedie(g, z_t, eps_hat, t, s);
    if (t_prev == 0 && eta == 0.0) return z0_hat;  // last update returns z0_hat exactly

    const double dt = eta > 0.0 ? delta_t(s, t, t_prev) : 0.0;
    const double drift_sq = 1.0 - ab_p - eta * eta * dt * dt;
    if (drift_sq < 0.0) fail("ddim_step: eta^2 delta_t^2 exceeds 1 - alpha_bar(t_prev)");
    Tensor out = g.add(g.scale(z0_hat, std::sqrt(ab_p)), g.scale(eps_hat, std::sqrt(drift_sq)));
    if (eta > 0.0) {
        if (noise == nullptr) fail("ddim_step: eta > 0 requires a noise tensor");
        out = g.add(out, g.scale(*noise, eta * dt));
    }
    return out;
}

Tensor sample_deterministic(Graph& g, const ScoreFn& score, const Tensor& z_T,
                            const DiffusionSchedule& s, TrajectoryRecord* record) {
    Tensor z = g.owns(z_T) ? z_T : g.leaf(z_T);
    for (std::size_t i = 0; i < s.substeps.size(); ++i) {
        const int t = s.substeps[i];
        const int t_prev = i + 1 < s.substeps.size() ? s.substeps[i + 1] : 0;
        Tensor eps_hat = score(g, z, t);
        Tensor z_next = ddim_step(g, z, eps_hat, t, t_prev, 0.0, nullptr, s);
        if (record) {
            TrajectoryRecord::Step st;
            st.t = t;
            st.z_t = z;
            st.eps_hat = eps_hat;
            st.z0_hat = t_prev == 0 ? z_next : tweedie(g, z, eps_hat, t, s);
            record->steps.push_back(std::move(st));
        }
        z = z_next;
    }
    if (record) record->z0 = z;
    return z;
}

Tensor diffusion_loss(Graph& g, const ScoreFn& score,
                      const std::vector<std::vector<double>>& batch_z0,
                      std::size_t latent_dim, const DiffusionSchedule& s, Rng& rng) {
    if (batch_z0.empty()) fail("diffusion_loss: empty batch");
    Tensor total = g.leaf(Tensor::scalar(0.0));
    for (const auto& z0 : batch_z0) {
        if (z0.size() != latent_dim) fail("diffusion_loss: sample has wrong latent dim");
        const int t = static_cast<int>(1 + rng.uniform_index(s.t_train));
        const std::vector<double> eps = rng.normal_vec(latent_dim);
        const std::vector<double> zt = forward_noise_raw(z0, t, eps, s);
        Tensor zt_t = g.leaf(Tensor::from_vec(zt, {latent_dim, 1}));
        Tensor eps_t = g.leaf(Tensor::from_vec(eps, {latent_dim, 1}));
        Tensor pred = score(g, zt_t, t);
        total = g.add(total, g.sum(g.square(g.sub(eps_t, pred))));
    }
    return g.scale(total, 1.0 / static_cast<double>(batch_z0.size()));
}

}  // namespace dilo
