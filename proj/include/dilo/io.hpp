#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "dilo/tensor.hpp"

namespace dilo {

/// Binary tensor file: magic "DILOTNSR", version byte 1, dtype byte
/// (1 = f32, 2 = f64), ndim byte, ndim little-endian u64 dims, then the
/// row-major payload in little-endian order regardless of host.
enum class TensorIoErrorKind { BadMagic, BadVersion, BadDtype, Truncated, Io };

struct TensorIoError : std::runtime_error {
    TensorIoErrorKind kind;
    TensorIoError(TensorIoErrorKind k, const std::string& msg)
        : std::runtime_error(msg), kind(k) {}
};

void write_tensor(const std::string& path, const Tensor& t);
Tensor read_tensor(const std::string& path);

std::vector<std::uint8_t> encode_tensor(const Tensor& t);
Tensor decode_tensor(const std::vector<std::uint8_t>& bytes);

/// Whole-file atomic write (temp file + rename).
void atomic_write_file(const std::string& path, const void* data, std::size_t size);
void atomic_write_text(const std::string& path, const std::string& text);
std::string read_text_file(const std::string& path);

/// Sectioned key=value run configuration. Unknown sections or keys are
/// rejected; serialize/parse round-trips exactly.
struct RunConfig {
    // [schedule]
    std::size_t t_train = 1000;
    double beta_start = 1e-4;
    double beta_end = 0.02;
    std::size_t substeps = 50;
    // [ae]
    std::size_t grid = 16;
    std::size_t latent = 16;
    std::string ae_hidden = "128";           // comma-separated widths
    std::size_t ae_epochs = 1500;
    std::size_t ae_batch = 32;
    double ae_lr = 2e-3;
    // [ldm]
    std::string score_hidden = "96,96";
    std::size_t ldm_epochs = 800;
    std::size_t ldm_batch = 32;
    double ldm_lr = 2e-3;
    std::size_t time_embed_dim = 16;
    // [surrogate]
    std::string variant = "neural";          // neural | exact-adjoint
    std::size_t channels = 8;
    std::size_t layers = 3;
    std::size_t modes = 5;
    std::size_t surr_epochs = 60;
    std::size_t surr_batch = 16;
    double surr_lr = 2e-3;
    // [physics]
    std::string kind = "eit-blobs";          // eit-blobs | ns-grf
    std::size_t n_train = 200;
    std::size_t n_test = 40;
    std::size_t patterns = 8;
    double sigma_min = 0.01;
    double sigma_max = 1.0;
    double cg_tol = 1e-12;
    std::size_t ns_grid = 32;
    double ns_nu = 0.005;
    double ns_T = 0.5;
    double ns_dt = 1e-3;
    // [invert]
    std::size_t iterations = 3000;
    std::string optimizer = "adamw";         // adam | adamw | gd-1-over-L
    double lr = 5e-3;
    double loss_weight = 1.0;
    double noise_gamma = 0.0;
    double dps_gamma = 1.0;
    std::size_t invert_substeps = 50;
    std::uint64_t seed = 0;
};

std::string serialize_config(const RunConfig& c);
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::string& path);

/// Text manifest mapping component name -> tensor file + arch descriptor +
/// FNV-1a content hash. Hashes are verified on load.
struct ManifestEntry {
    std::string file;
    std::string arch;
    std::uint64_t hash = 0;
};

struct CheckpointManifest {
    std::map<std::string, ManifestEntry> components;
};

std::string serialize_manifest(const CheckpointManifest& m);
CheckpointManifest parse_manifest(const std::string& text);

std::uint64_t fnv1a_bytes(const void* data, std::size_t size);

/// Writes one component: tensor file next to the manifest dir plus the entry.
void manifest_add(CheckpointManifest& m, const std::string& dir, const std::string& name,
                  const std::string& arch, const Tensor& packed);
/// Reads and hash-checks one component.
Tensor manifest_read(const CheckpointManifest& m, const std::string& dir,
                     const std::string& name, std::string* arch_out = nullptr);

/// Per-iteration metrics rows. Optional columns are empty, never omitted;
/// doubles are printed with 17 significant digits so re-parsing is exact.
struct MetricsRow {
    std::size_t iter = 0;
    double loss = 0;
    double grad_norm = 0;
    bool has_grad_norm_exact = false;
    double grad_norm_exact = 0;
    bool has_mae = false;
    double mae = 0;
    bool has_wallclock = false;
    double wallclock_ms = 0;
};

extern const char* const kMetricsHeader;  // "iter,loss,grad_norm,..."

void emit_metrics(const std::string& path, const std::vector<MetricsRow>& rows);
std::vector<MetricsRow> parse_metrics(const std::string& text);

std::string format_g17(double v);

}  // namespace dilo
