#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dilo/rng.hpp"

namespace dilo {

/// Cell-centered conductivity on an n x n grid over the unit square,
/// row-major with index iy * n + ix.
struct ConductivityField {
    std::size_t n = 0;
    std::vector<double> sigma;
    double sigma_min = 0.01, sigma_max = 1.0;
};

/// Injected boundary currents. Boundary cells are ordered counterclockwise;
/// patterns are per-node currents (already integrated over the edge) and
/// must sum to zero for the pure-Neumann problem to be solvable.
struct CurrentPatternSet {
    std::size_t n = 0;
    std::vector<std::size_t> cells;                // CCW boundary cells
    std::vector<std::vector<double>> patterns;     // M x B
    std::string id;
};

/// Trigonometric drive patterns cos(k theta_j), sin(k theta_j) on the index
/// angle theta_j = 2 pi j / B, scaled by the boundary edge length 4/B.
/// Exactly zero-sum on the square boundary.
CurrentPatternSet make_trig_patterns(std::size_t n, std::size_t m_patterns);

/// Boundary voltages per pattern, each row mean-zero (grounding convention).
struct Observation {
    std::size_t patterns = 0, boundary = 0;
    std::vector<double> v;  // M x B row-major
    double noise_gamma = 0.0;
    std::string pattern_id;

    double at(std::size_t k, std::size_t b) const { return v[k * boundary + b]; }
};

struct EitSolverSettings {
    double cg_tol = 1e-12;
    std::size_t cg_max_iter = 50000;
};

struct EitSolution {
    Observation obs;
    std::vector<std::vector<double>> potentials;  // M x n^2, mean-zero
};

/// 5-point finite-difference forward solve with harmonic face averaging,
/// Neumann currents as boundary sources, grounded by mean-zero potential,
/// solved by preconditioned conjugate gradients.
EitSolution eit_solve(const ConductivityField& sigma, const CurrentPatternSet& patterns,
                      const EitSolverSettings& settings = {});

struct EitGradient {
    std::vector<double> grad;  // n^2 cells
    double misfit = 0.0;       // 0.5 sum_k ||V_k - V_obs_k||^2
};

/// Gradient of the data misfit via one adjoint solve per pattern.
EitGradient eit_adjoint_gradient(const ConductivityField& sigma,
                                 const CurrentPatternSet& patterns, const Observation& v_obs,
                                 const EitSolverSettings& settings = {});

/// Pullback of an arbitrary observation cotangent through the forward map
/// (adjoint solve as the reverse rule). eit_adjoint_gradient is the special
/// case cotangent = V - V_obs.
std::vector<double> eit_vjp(const ConductivityField& sigma, const CurrentPatternSet& patterns,
                            const std::vector<double>& cotangent,
                            const EitSolverSettings& settings = {});

/// Hessian-vector product of the misfit via the tangent and second-order
/// adjoint solves, assembled with the exact derivatives of the harmonic face
/// averaging so it matches finite differences of the discrete gradient.
std::vector<double> eit_hvp(const ConductivityField& sigma, const CurrentPatternSet& patterns,
                            const Observation& v_obs, const std::vector<double>& dsigma,
                            const EitSolverSettings& settings = {});

/// Dirichlet Laplace solve lifting per-node boundary values (CCW order) to a
/// full interior field.
std::vector<double> harmonic_extension(const std::vector<double>& boundary_values,
                                       std::size_t n, const EitSolverSettings& settings = {});

/// Periodic vorticity state for the 2D incompressible solver.
struct VorticityField {
    std::size_t n = 0;
    std::vector<double> w;
    double nu = 1.0 / 200.0;
};

struct NsConfig {
    std::size_t n = 32;
    double nu = 1.0 / 200.0;
    double forcing_amplitude = -4.0;  // f = amplitude * cos(forcing_k * y)
    std::size_t forcing_k = 4;
    bool advection = true;            // off: pure forced diffusion (test mode)
    double cfl_limit = 1.0;
};

/// Pseudo-spectral solve of the vorticity equation on (0, 2pi)^2:
/// streamfunction inversion, divergence-form advection with 2/3-rule
/// dealiasing, Crank-Nicolson diffusion with Adams-Bashforth advection.
std::vector<double> ns_forward(const std::vector<double>& w0, const NsConfig& config, double T,
                               double dt);

/// y + gamma * std(y) * eps with eps standard normal; std over all entries.
std::vector<double> inject_noise(const std::vector<double>& y, double gamma, Rng& rng);
Observation inject_noise(const Observation& y, double gamma, Rng& rng);

/// Background 0.2 plus 1-3 Gaussian bumps, clipped to [lo, hi].
/// Deterministic per (seed, index).
std::vector<std::vector<double>> gen_eit_blobs(std::size_t count, std::uint64_t seed,
                                               std::size_t n, double lo = 0.01,
                                               double hi = 1.0);

/// Zero-mean Gaussian random fields with spectrum (|k|^2 + tau^2)^(-alpha),
/// normalized to unit pointwise variance.
std::vector<std::vector<double>> gen_ns_grf(std::size_t count, std::uint64_t seed,
                                            std::size_t n, double alpha = 2.5,
                                            double tau = 3.0);

struct PairedEitDataset {
    std::size_t n = 0, m_patterns = 0, boundary = 0;
    std::vector<std::vector<double>> fields;        // count x n^2
    std::vector<std::vector<double>> observations;  // count x (M*B)
};

PairedEitDataset gen_eit_paired(std::size_t count, std::uint64_t seed, std::size_t n,
                                std::size_t m_patterns, double lo = 0.01, double hi = 1.0,
                                const EitSolverSettings& settings = {});

}  // namespace dilo
