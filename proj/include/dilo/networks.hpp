#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dilo/diffusion.hpp"
#include "dilo/grid.hpp"
#include "dilo/optim.hpp"
#include "dilo/rng.hpp"
#include "dilo/tensor.hpp"

namespace dilo {

enum class Activation { Tanh, Relu };

/// Fully-connected net. widths lists every layer width including input and
/// output, so {4, 8, 2} is one hidden layer of 8.
struct MlpArch {
    std::vector<std::size_t> widths;
    Activation act = Activation::Tanh;
    bool squash_output = false;  // affine tanh squash of the final layer
    double squash_lo = 0.0;
    double squash_hi = 1.0;
};

struct MlpParams {
    MlpArch arch;
    std::vector<Tensor> weight;  // [out x in] per layer
    std::vector<Tensor> bias;    // [out x 1] per layer
};

std::size_t mlp_param_count(const MlpArch& arch);
MlpParams init_mlp(std::uint64_t seed, const MlpArch& arch);

struct BoundMlp {
    const MlpArch* arch = nullptr;
    std::vector<Tensor> weight, bias;
};
BoundMlp bind_mlp(Graph& g, const MlpParams& p);

/// x is [in x B]; columns are batch samples.
Tensor mlp_forward(Graph& g, const BoundMlp& m, const Tensor& x);

/// Sinusoidal embedding: interleaved (sin, cos) pairs over a geometric
/// frequency ladder with base 10000.
std::vector<double> time_embedding(std::size_t dim, double t);

/// Spectral operator body: lift, k spectral blocks with pointwise
/// nonlinearity, then a channel projection. Transforms use dense DFT
/// matrices restricted to the retained modes, so differentiation reduces to
/// matmul.
struct SpectralArch {
    std::size_t grid_n = 16;
    std::size_t channels = 8;
    std::size_t layers = 3;
    std::size_t modes = 5;  // retained modes per axis (wraparound |k| < modes)
    Activation act = Activation::Tanh;
    enum class Head { Field, Boundary } head = Head::Field;
    std::size_t out_channels = 1;  // patterns M for the Boundary head
};

/// Retained-mode DFT synthesis/analysis matrices shared per (n, modes).
struct DftConstants {
    std::size_t n = 0, modes = 0, n_kept = 0;     // n_kept = (2 modes - 1 capped at n)^2
    Tensor fwd_re, fwd_im;                        // [n^2 x K], right-multiplied
    Tensor inv_re, inv_im;                        // [K x n^2]
};
const DftConstants& dft_constants(std::size_t n, std::size_t modes);

struct SpectralParams {
    SpectralArch arch;
    Tensor lift_w, lift_b;                  // [C x 1], [C x 1]
    std::vector<Tensor> conv_w, conv_b;     // per layer [C x C], [C x 1]
    std::vector<Tensor> spec_re, spec_im;   // per layer [C x K]
    Tensor proj_w, proj_b;                  // [out x C], [out x 1]
    // fixed data normalization constants set at training time
    double in_shift = 0.0, in_scale = 1.0;
    double out_scale = 1.0;
};

std::size_t spectral_param_count(const SpectralArch& arch);
SpectralParams init_spectral(std::uint64_t seed, const SpectralArch& arch);

struct BoundSpectral {
    const SpectralArch* arch = nullptr;
    Tensor lift_w, lift_b;
    std::vector<Tensor> conv_w, conv_b, spec_re, spec_im;
    Tensor proj_w, proj_b;
    double in_shift = 0.0, in_scale = 1.0;
    double out_scale = 1.0;
};
BoundSpectral bind_spectral(Graph& g, const SpectralParams& p);

/// x is [1 x n^2] (one flattened field). Field head returns [1 x n^2];
/// Boundary head returns mean-removed boundary voltages [M x B].
Tensor spectral_forward(Graph& g, const BoundSpectral& sp, const Tensor& x);

/// Matrix restricting a flattened field to the CCW boundary cells,
/// optionally folding in per-pattern mean removal.
Tensor boundary_restriction_matrix(std::size_t n, bool remove_mean);  // [n^2 x B]

/// All trained components plus the schedule they were trained against.
struct ModelBundle {
    MlpParams score, encoder, decoder;
    SpectralParams surrogate;
    DiffusionSchedule schedule;
    std::size_t latent_dim = 16;
    std::size_t grid_n = 16;
    std::size_t time_embed_dim = 16;
    double sigma_min = 0.01, sigma_max = 1.0;
    // latent normalization applied inside encode/decode: z = (E(a)-shift)/scl
    std::vector<double> latent_shift, latent_scale;
};

ModelBundle make_bundle(std::uint64_t seed, std::size_t grid_n, std::size_t latent_dim,
                        const std::vector<std::size_t>& enc_hidden,
                        const std::vector<std::size_t>& dec_hidden,
                        const std::vector<std::size_t>& score_hidden,
                        const SpectralArch& surrogate_arch, const DiffusionSchedule& schedule,
                        double sigma_min, double sigma_max, std::size_t time_embed_dim = 16);

struct BoundBundle {
    const ModelBundle* bundle = nullptr;
    BoundMlp score, encoder, decoder;
    BoundSpectral surrogate;
    Tensor latent_shift, latent_inv_scale, latent_scale;  // [latent x 1]
};
BoundBundle bind_bundle(Graph& g, const ModelBundle& b);

Tensor score_forward(Graph& g, const BoundBundle& bb, const Tensor& z_t, int t);
Tensor encode(Graph& g, const BoundBundle& bb, const Tensor& a);   // [n^2 x B] -> [d x B]
Tensor decode(Graph& g, const BoundBundle& bb, const Tensor& z);   // [d x B] -> [n^2 x B]
Tensor surrogate_body_forward(Graph& g, const BoundBundle& bb, const Tensor& a_row);

ScoreFn make_score_fn(const ModelBundle& b);

/// Deterministic unroll driven by the bundle's score network.
Tensor sample_deterministic(Graph& g, const BoundBundle& bb, const Tensor& z_T,
                            const DiffusionSchedule& s, TrajectoryRecord* record = nullptr);

std::vector<Tensor*> mlp_param_ptrs(MlpParams& p);
std::vector<Tensor*> spectral_param_ptrs(SpectralParams& p);
std::vector<Tensor> collect_grads(const Gradients& grads, const BoundMlp& m);
std::vector<Tensor> collect_grads(const Gradients& grads, const BoundSpectral& sp);

struct TrainConfig {
    std::size_t epochs = 200;
    std::size_t batch = 32;
    OptimizerConfig opt;
    std::uint64_t seed = 0;
};

/// Joint encoder/decoder training on reconstruction error. Returns the
/// per-epoch mean loss series.
std::vector<double> train_autoencoder(ModelBundle& b,
                                      const std::vector<std::vector<double>>& fields,
                                      const TrainConfig& cfg);

/// Computes latent mean/std over a dataset and stores them in the bundle so
/// encoded codes are unit-scale. Call after autoencoder training.
void finalize_latent_stats(ModelBundle& b, const std::vector<std::vector<double>>& fields);

/// Epsilon-matching training of the score network on encoded fields.
std::vector<double> train_score(ModelBundle& b, const std::vector<std::vector<double>>& fields,
                                const TrainConfig& cfg);

std::vector<double> encode_raw(const ModelBundle& b, const std::vector<double>& field);
std::vector<double> decode_raw(const ModelBundle& b, const std::vector<double>& z);

/// Largest observed spectral norm of d eps/d z_t over sampled (z_t, t),
/// estimated by power iteration. An empirical smoothness probe.
double score_lipschitz_probe(const ModelBundle& b, std::size_t samples, std::uint64_t seed,
                             std::size_t power_iters = 12);

}  // namespace dilo
