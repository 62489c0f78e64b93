#pragma once

#include <memory>

#include "dilo/networks.hpp"
#include "dilo/physics.hpp"

namespace dilo {

/// Differentiable forward operator used inside the inversion loop. The
/// neural variant runs the spectral operator on the autodiff graph; the
/// exact-adjoint variant wraps the finite-difference solver with the adjoint
/// solve registered as its reverse rule, giving a zero-gap reference.
struct SurrogateHandle {
    enum class Kind { Neural, ExactAdjoint } kind = Kind::Neural;
    std::shared_ptr<const SpectralParams> net;
    std::shared_ptr<const CurrentPatternSet> patterns;
    EitSolverSettings solver;
};

SurrogateHandle make_neural_surrogate(const SpectralParams& params);
SurrogateHandle make_exact_surrogate(const CurrentPatternSet& patterns,
                                     const EitSolverSettings& settings = {});

/// a_row is a flattened field [1 x n^2]; returns observations [M x B]
/// (or a field [1 x n^2] for a Field-head neural surrogate).
Tensor surrogate_eval(Graph& g, const SurrogateHandle& h, const Tensor& a_row);

/// Pullback of an observation cotangent to the input field, without a graph.
std::vector<double> surrogate_vjp(const SurrogateHandle& h, const std::vector<double>& a,
                                  const std::vector<double>& cotangent);

struct SurrogateTrainResult {
    std::vector<double> losses;      // per-epoch mean over the training set
    double holdout_rel_l2 = -1.0;    // -1 when no holdout set was given
};

/// Minimizes the mean squared observation error of the spectral operator on
/// paired (field, observation) data.
SurrogateTrainResult train_surrogate(SpectralParams& params, const PairedEitDataset& train,
                                     const PairedEitDataset* holdout, const TrainConfig& cfg);

double surrogate_holdout_error(const SpectralParams& params, const PairedEitDataset& data);

/// Gradient and value discrepancy between two surrogate handles, both pulled
/// through the same deterministic unroll from the given latent probes.
struct GapStats {
    double grad_max = 0, grad_mean = 0;
    double value_max = 0, value_mean = 0;
};

GapStats gap_estimate(const ModelBundle& bundle, const SurrogateHandle& candidate,
                      const SurrogateHandle& reference, const Observation& y_obs,
                      const std::vector<Tensor>& zT_probes, double loss_weight = 1.0);

}  // namespace dilo
