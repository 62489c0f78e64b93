#include "dilo/pipeline.hpp"

#include <cmath>
#include <filesystem>
#include <sstream>
#include <stdexcept>

namespace dilo {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::size_t pos = 0;
    while (true) {
        const auto p = s.find(sep, pos);
        if (p == std::string::npos) {
            out.push_back(s.substr(pos));
            return out;
        }
        out.push_back(s.substr(pos, p - pos));
        pos = p + 1;
    }
}

std::string kv_get(const std::string& arch, const std::string& key) {
    for (const std::string& part : split(arch, ';')) {
        const auto eq = part.find('=');
        if (eq != std::string::npos && part.substr(0, eq) == key) return part.substr(eq + 1);
    }
    fail("arch descriptor '" + arch + "': missing field '" + key + "'");
}

void append_tensor(std::vector<double>& out, const Tensor& t) {
    out.insert(out.end(), t.vals().begin(), t.vals().end());
}

Tensor take(const Tensor& packed, std::size_t& off, std::vector<std::size_t> shape) {
    const std::size_t n = numel_of(shape);
    if (off + n > packed.numel()) fail("checkpoint: packed tensor too short");
    std::vector<double> v(packed.vals().begin() + static_cast<std::ptrdiff_t>(off),
                          packed.vals().begin() + static_cast<std::ptrdiff_t>(off + n));
    off += n;
    return Tensor::from_vec(std::move(v), std::move(shape));
}

}  // namespace

std::vector<std::size_t> parse_widths(const std::string& csv) {
    std::vector<std::size_t> out;
    for (const std::string& part : split(csv, ',')) {
        if (part.empty()) continue;
        out.push_back(std::stoull(part));
    }
    return out;
}

ModelBundle bundle_from_config(const RunConfig& c, std::uint64_t seed) {
    SpectralArch sa;
    sa.grid_n = c.grid;
    sa.channels = c.channels;
    sa.layers = c.layers;
    sa.modes = c.modes;
    sa.head = SpectralArch::Head::Boundary;
    sa.out_channels = c.patterns;
    DiffusionSchedule sched = make_schedule(c.t_train, c.beta_start, c.beta_end, c.substeps);
    return make_bundle(seed, c.grid, c.latent, parse_widths(c.ae_hidden),
                       parse_widths(c.ae_hidden), parse_widths(c.score_hidden), sa, sched,
                       c.sigma_min, c.sigma_max, c.time_embed_dim);
}

double ae_reconstruction_error(const ModelBundle& b,
                               const std::vector<std::vector<double>>& fields) {
    double acc = 0;
    for (const auto& f : fields) {
        const std::vector<double> rec = decode_raw(b, encode_raw(b, f));
        double num = 0, den = 0;
        for (std::size_t i = 0; i < f.size(); ++i) {
            num += (rec[i] - f[i]) * (rec[i] - f[i]);
            den += f[i] * f[i];
        }
        acc += std::sqrt(num / den);
    }
    return acc / static_cast<double>(fields.size());
}

EitTestbed build_eit_testbed(const RunConfig& c, std::uint64_t seed, bool train_networks) {
    EitTestbed tb;
    EitSolverSettings st;
    st.cg_tol = c.cg_tol;
    tb.train = gen_eit_paired(c.n_train, derive_seed(seed, "data-train"), c.grid, c.patterns,
                              c.sigma_min, c.sigma_max, st);
    tb.test = gen_eit_paired(c.n_test, derive_seed(seed, "data-test"), c.grid, c.patterns,
                             c.sigma_min, c.sigma_max, st);
    tb.patterns = make_trig_patterns(c.grid, c.patterns);
    tb.bundle = bundle_from_config(c, seed);

    tb.dataset_mean_field.assign(c.grid * c.grid, 0.0);
    for (const auto& f : tb.train.fields)
        for (std::size_t i = 0; i < f.size(); ++i) tb.dataset_mean_field[i] += f[i];
    for (double& x : tb.dataset_mean_field) x /= static_cast<double>(tb.train.fields.size());

    if (train_networks) {
        TrainConfig ae;
        ae.epochs = c.ae_epochs;
        ae.batch = c.ae_batch;
        ae.opt.lr = c.ae_lr;
        ae.seed = derive_seed(seed, "ae");
        tb.ae_losses = train_autoencoder(tb.bundle, tb.train.fields, ae);
        finalize_latent_stats(tb.bundle, tb.train.fields);
        tb.ae_holdout_rel = ae_reconstruction_error(tb.bundle, tb.test.fields);

        TrainConfig ldm;
        ldm.epochs = c.ldm_epochs;
        ldm.batch = c.ldm_batch;
        ldm.opt.lr = c.ldm_lr;
        ldm.seed = derive_seed(seed, "ldm");
        tb.ldm_losses = train_score(tb.bundle, tb.train.fields, ldm);

        TrainConfig surr;
        surr.epochs = c.surr_epochs;
        surr.batch = c.surr_batch;
        surr.opt.lr = c.surr_lr;
        surr.seed = derive_seed(seed, "surrogate");
        SurrogateTrainResult res = train_surrogate(tb.bundle.surrogate, tb.train, &tb.test, surr);
        tb.surr_losses = res.losses;
        tb.surrogate_holdout_rel = res.holdout_rel_l2;
    }

    tb.neural = make_neural_surrogate(tb.bundle.surrogate);
    tb.exact = make_exact_surrogate(tb.patterns, st);
    return tb;
}

Tensor pack_mlp(const MlpParams& p) {
    std::vector<double> v;
    for (std::size_t l = 0; l < p.weight.size(); ++l) {
        append_tensor(v, p.weight[l]);
        append_tensor(v, p.bias[l]);
    }
    const std::size_t n = v.size();
    return Tensor::from_vec(std::move(v), {n});
}

void unpack_mlp(const Tensor& packed, MlpParams& p) {
    std::size_t off = 0;
    for (std::size_t l = 0; l + 1 < p.arch.widths.size(); ++l) {
        const std::size_t in = p.arch.widths[l], out = p.arch.widths[l + 1];
        if (p.weight.size() <= l) {
            p.weight.emplace_back();
            p.bias.emplace_back();
        }
        p.weight[l] = take(packed, off, {out, in});
        p.bias[l] = take(packed, off, {out, 1});
    }
    if (off != packed.numel()) fail("checkpoint: mlp payload size mismatch");
}

Tensor pack_spectral(const SpectralParams& p) {
    std::vector<double> v;
    v.push_back(p.out_scale);
    v.push_back(p.in_shift);
    v.push_back(p.in_scale);
    append_tensor(v, p.lift_w);
    append_tensor(v, p.lift_b);
    for (std::size_t l = 0; l < p.conv_w.size(); ++l) {
        append_tensor(v, p.conv_w[l]);
        append_tensor(v, p.conv_b[l]);
        append_tensor(v, p.spec_re[l]);
        append_tensor(v, p.spec_im[l]);
    }
    append_tensor(v, p.proj_w);
    append_tensor(v, p.proj_b);
    const std::size_t n = v.size();
    return Tensor::from_vec(std::move(v), {n});
}

void unpack_spectral(const Tensor& packed, SpectralParams& p) {
    const std::size_t C = p.arch.channels;
    const std::size_t K = dft_constants(p.arch.grid_n, p.arch.modes).n_kept;
    std::size_t off = 0;
    p.out_scale = take(packed, off, {1}).at(0);
    p.in_shift = take(packed, off, {1}).at(0);
    p.in_scale = take(packed, off, {1}).at(0);
    p.lift_w = take(packed, off, {C, 1});
    p.lift_b = take(packed, off, {C, 1});
    p.conv_w.assign(p.arch.layers, Tensor());
    p.conv_b.assign(p.arch.layers, Tensor());
    p.spec_re.assign(p.arch.layers, Tensor());
    p.spec_im.assign(p.arch.layers, Tensor());
    for (std::size_t l = 0; l < p.arch.layers; ++l) {
        p.conv_w[l] = take(packed, off, {C, C});
        p.conv_b[l] = take(packed, off, {C, 1});
        p.spec_re[l] = take(packed, off, {C, K});
        p.spec_im[l] = take(packed, off, {C, K});
    }
    p.proj_w = take(packed, off, {p.arch.out_channels, C});
    p.proj_b = take(packed, off, {p.arch.out_channels, 1});
    if (off != packed.numel()) fail("checkpoint: spectral payload size mismatch");
}

std::string mlp_arch_string(const MlpArch& a) {
    std::ostringstream os;
    os << "mlp;widths=";
    for (std::size_t i = 0; i < a.widths.size(); ++i) {
        if (i) os << ",";
        os << a.widths[i];
    }
    os << ";act=" << (a.act == Activation::Tanh ? "tanh" : "relu");
    os << ";squash=" << (a.squash_output ? 1 : 0);
    os << ";lo=" << format_g17(a.squash_lo) << ";hi=" << format_g17(a.squash_hi);
    return os.str();
}

MlpArch parse_mlp_arch(const std::string& s) {
    MlpArch a;
    a.widths = parse_widths(kv_get(s, "widths"));
    a.act = kv_get(s, "act") == "relu" ? Activation::Relu : Activation::Tanh;
    a.squash_output = kv_get(s, "squash") == "1";
    a.squash_lo = std::stod(kv_get(s, "lo"));
    a.squash_hi = std::stod(kv_get(s, "hi"));
    return a;
}

std::string spectral_arch_string(const SpectralArch& a) {
    std::ostringstream os;
    os << "spectral;grid=" << a.grid_n << ";ch=" << a.channels << ";layers=" << a.layers
       << ";modes=" << a.modes << ";act=" << (a.act == Activation::Tanh ? "tanh" : "relu")
       << ";head=" << (a.head == SpectralArch::Head::Boundary ? "boundary" : "field")
       << ";out=" << a.out_channels;
    return os.str();
}

SpectralArch parse_spectral_arch(const std::string& s) {
    SpectralArch a;
    a.grid_n = std::stoull(kv_get(s, "grid"));
    a.channels = std::stoull(kv_get(s, "ch"));
    a.layers = std::stoull(kv_get(s, "layers"));
    a.modes = std::stoull(kv_get(s, "modes"));
    a.act = kv_get(s, "act") == "relu" ? Activation::Relu : Activation::Tanh;
    a.head = kv_get(s, "head") == "boundary" ? SpectralArch::Head::Boundary
                                             : SpectralArch::Head::Field;
    a.out_channels = std::stoull(kv_get(s, "out"));
    return a;
}

void save_bundle(const std::string& dir, const ModelBundle& b) {
    std::filesystem::create_directories(dir);
    CheckpointManifest m;
    manifest_add(m, dir, "score", mlp_arch_string(b.score.arch), pack_mlp(b.score));
    manifest_add(m, dir, "encoder", mlp_arch_string(b.encoder.arch), pack_mlp(b.encoder));
    manifest_add(m, dir, "decoder", mlp_arch_string(b.decoder.arch), pack_mlp(b.decoder));
    manifest_add(m, dir, "surrogate", spectral_arch_string(b.surrogate.arch),
                 pack_spectral(b.surrogate));

    std::vector<double> latent;
    latent.insert(latent.end(), b.latent_shift.begin(), b.latent_shift.end());
    latent.insert(latent.end(), b.latent_scale.begin(), b.latent_scale.end());
    manifest_add(m, dir, "latent", "latent-stats",
                 Tensor::from_vec(std::move(latent), {2, b.latent_dim}));

    manifest_add(m, dir, "schedule", "schedule",
                 Tensor::from_vec({static_cast<double>(b.schedule.t_train),
                                   b.schedule.beta.front(), b.schedule.beta.back(),
                                   static_cast<double>(b.schedule.substeps.size())},
                                  {4}));
    manifest_add(m, dir, "meta", "meta",
                 Tensor::from_vec({static_cast<double>(b.grid_n),
                                   static_cast<double>(b.latent_dim),
                                   static_cast<double>(b.time_embed_dim), b.sigma_min,
                                   b.sigma_max},
                                  {5}));
    atomic_write_text(dir + "/manifest.txt", serialize_manifest(m));
}

ModelBundle load_bundle(const std::string& dir) {
    const CheckpointManifest m = parse_manifest(read_text_file(dir + "/manifest.txt"));
    ModelBundle b;

    const Tensor meta = manifest_read(m, dir, "meta");
    b.grid_n = static_cast<std::size_t>(meta.at(0));
    b.latent_dim = static_cast<std::size_t>(meta.at(1));
    b.time_embed_dim = static_cast<std::size_t>(meta.at(2));
    b.sigma_min = meta.at(3);
    b.sigma_max = meta.at(4);

    const Tensor sched = manifest_read(m, dir, "schedule");
    b.schedule = make_schedule(static_cast<std::size_t>(sched.at(0)), sched.at(1), sched.at(2),
                               static_cast<std::size_t>(sched.at(3)));

    std::string arch;
    Tensor packed = manifest_read(m, dir, "score", &arch);
    b.score.arch = parse_mlp_arch(arch);
    unpack_mlp(packed, b.score);
    packed = manifest_read(m, dir, "encoder", &arch);
    b.encoder.arch = parse_mlp_arch(arch);
    unpack_mlp(packed, b.encoder);
    packed = manifest_read(m, dir, "decoder", &arch);
    b.decoder.arch = parse_mlp_arch(arch);
    unpack_mlp(packed, b.decoder);
    packed = manifest_read(m, dir, "surrogate", &arch);
    b.surrogate.arch = parse_spectral_arch(arch);
    unpack_spectral(packed, b.surrogate);

    const Tensor latent = manifest_read(m, dir, "latent");
    if (latent.numel() != 2 * b.latent_dim) fail("checkpoint: latent stats shape mismatch");
    b.latent_shift.assign(latent.vals().begin(),
                          latent.vals().begin() + static_cast<std::ptrdiff_t>(b.latent_dim));
    b.latent_scale.assign(latent.vals().begin() + static_cast<std::ptrdiff_t>(b.latent_dim),
                          latent.vals().end());
    return b;
}

void save_paired_dataset(const std::string& dir, const PairedEitDataset& ds) {
    std::filesystem::create_directories(dir);
    std::ostringstream index;
    index << "dilo-dataset v1\n";
    index << "n=" << ds.n << " patterns=" << ds.m_patterns << " boundary=" << ds.boundary
          << " count=" << ds.fields.size() << "\n";
    for (std::size_t i = 0; i < ds.fields.size(); ++i) {
        char name[64];
        std::snprintf(name, sizeof(name), "a_%04zu.tnsr", i);
        write_tensor(dir + "/" + name, Tensor::from_vec(ds.fields[i], {ds.n, ds.n}));
        char obs[64];
        std::snprintf(obs, sizeof(obs), "y_%04zu.tnsr", i);
        write_tensor(dir + "/" + obs,
                     Tensor::from_vec(ds.observations[i], {ds.m_patterns, ds.boundary}));
        index << name << "\t" << obs << "\n";
    }
    atomic_write_text(dir + "/index.txt", index.str());
}

PairedEitDataset load_paired_dataset(const std::string& dir) {
    std::istringstream in(read_text_file(dir + "/index.txt"));
    std::string line;
    if (!std::getline(in, line) || line != "dilo-dataset v1")
        fail("dataset index: bad header");
    if (!std::getline(in, line)) fail("dataset index: missing size line");
    PairedEitDataset ds;
    if (std::sscanf(line.c_str(), "n=%zu patterns=%zu boundary=%zu count=%*u", &ds.n,
                    &ds.m_patterns, &ds.boundary) != 3)
        fail("dataset index: malformed size line");
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos) fail("dataset index: malformed row");
        ds.fields.push_back(read_tensor(dir + "/" + line.substr(0, tab)).vals());
        ds.observations.push_back(read_tensor(dir + "/" + line.substr(tab + 1)).vals());
    }
    return ds;
}

}  // namespace dilo
