#pragma once

#include "dilo/dilo.hpp"
#include "dilo/io.hpp"

namespace dilo {

/// Everything the inversion stage needs, produced by the offline stage:
/// trained bundle, both surrogate handles, and the datasets used.
struct EitTestbed {
    ModelBundle bundle;
    SurrogateHandle neural, exact;
    CurrentPatternSet patterns;
    PairedEitDataset train, test;
    std::vector<double> dataset_mean_field;
    double ae_holdout_rel = -1;
    double surrogate_holdout_rel = -1;
    std::vector<double> ae_losses, ldm_losses, surr_losses;
};

std::vector<std::size_t> parse_widths(const std::string& csv);

ModelBundle bundle_from_config(const RunConfig& c, std::uint64_t seed);

/// Generates data and trains autoencoder, score network and neural surrogate
/// at the configured sizes. With train_networks = false only data and the
/// untrained bundle are produced.
EitTestbed build_eit_testbed(const RunConfig& c, std::uint64_t seed,
                             bool train_networks = true);

/// Mean over fields of relative reconstruction error through the
/// autoencoder.
double ae_reconstruction_error(const ModelBundle& b,
                               const std::vector<std::vector<double>>& fields);

// Checkpoint packing: one flat tensor per component, shapes recovered from
// the arch descriptor.
Tensor pack_mlp(const MlpParams& p);
void unpack_mlp(const Tensor& packed, MlpParams& p);
Tensor pack_spectral(const SpectralParams& p);
void unpack_spectral(const Tensor& packed, SpectralParams& p);

std::string mlp_arch_string(const MlpArch& a);
MlpArch parse_mlp_arch(const std::string& s);
std::string spectral_arch_string(const SpectralArch& a);
SpectralArch parse_spectral_arch(const std::string& s);

void save_bundle(const std::string& dir, const ModelBundle& b);
ModelBundle load_bundle(const std::string& dir);

void save_paired_dataset(const std::string& dir, const PairedEitDataset& ds);
PairedEitDataset load_paired_dataset(const std::string& dir);

}  // namespace dilo
