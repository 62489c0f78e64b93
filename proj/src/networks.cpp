#include "dilo/networks.hpp"

#include <cmath>
#include <map>
#include <mutex>
#include <numeric>
#include <stdexcept>
#include <unordered_map>

namespace dilo {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

Tensor kaiming_uniform(Rng& rng, std::size_t rows, std::size_t cols, std::size_t fan_in) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::vector<double> v(rows * cols);
    for (double& x : v) x = rng.uniform(-bound, bound);
    return Tensor::from_vec(std::move(v), {rows, cols});
}

Tensor ones_row(Graph& g, std::size_t n) { return g.leaf(Tensor::full({1, n}, 1.0)); }

Tensor apply_act(Graph& g, Activation act, const Tensor& x) {
    return act == Activation::Tanh ? g.tanh(x) : g.relu(x);
}

}  // namespace

std::size_t mlp_param_count(const MlpArch& arch) {
    std::size_t n = 0;
    for (std::size_t l = 0; l + 1 < arch.widths.size(); ++l)
        n += arch.widths[l + 1] * arch.widths[l] + arch.widths[l + 1];
    return n;
}

MlpParams init_mlp(std::uint64_t seed, const MlpArch& arch) {
    if (arch.widths.size() < 3) fail("mlp: need at least one hidden layer");
    for (std::size_t w : arch.widths)
        if (w == 0) fail("mlp: zero layer width");
    MlpParams p;
    p.arch = arch;
    Rng rng(derive_seed(seed, "mlp-init"));
    for (std::size_t l = 0; l + 1 < arch.widths.size(); ++l) {
        const std::size_t in = arch.widths[l], out = arch.widths[l + 1];
        p.weight.push_back(kaiming_uniform(rng, out, in, in));
        p.bias.push_back(Tensor::zeros({out, 1}));
    }
    return p;
}

BoundMlp bind_mlp(Graph& g, const MlpParams& p) {
    BoundMlp b;
    b.arch = &p.arch;
    for (const Tensor& w : p.weight) b.weight.push_back(g.leaf(w));
    for (const Tensor& t : p.bias) b.bias.push_back(g.leaf(t));
    return b;
}

Tensor mlp_forward(Graph& g, const BoundMlp& m, const Tensor& x) {
    if (x.rank() != 2 || x.shape[0] != m.arch->widths.front())
        fail("mlp_forward: input " + x.shape_str() + " does not match width " +
             std::to_string(m.arch->widths.front()));
    Tensor ones = ones_row(g, x.shape[1]);
    Tensor h = x;
    const std::size_t layers = m.weight.size();
    for (std::size_t l = 0; l < layers; ++l) {
        h = g.add(g.matmul(m.weight[l], h), g.matmul(m.bias[l], ones));
        if (l + 1 < layers) h = apply_act(g, m.arch->act, h);
    }
    if (m.arch->squash_output) {
        const double mid = 0.5 * (m.arch->squash_lo + m.arch->squash_hi);
        const double half = 0.5 * (m.arch->squash_hi - m.arch->squash_lo);
        h = g.add(g.scale(g.tanh(h), half), g.leaf(Tensor::full(h.shape, mid)));
    }
    return h;
}

std::vector<double> time_embedding(std::size_t dim, double t) {
    if (dim < 2 || dim % 2 != 0) fail("time_embedding: dim must be even and >= 2");
    std::vector<double> e(dim);
    const std::size_t half = dim / 2;
    for (std::size_t k = 0; k < half; ++k) {
        const double omega = std::pow(10000.0, -static_cast<double>(k) / static_cast<double>(half));
        e[2 * k] = std::sin(t * omega);
        e[2 * k + 1] = std::cos(t * omega);
    }
    return e;
}

const DftConstants& dft_constants(std::size_t n, std::size_t modes) {
    static std::mutex mu;
    static std::map<std::pair<std::size_t, std::size_t>, DftConstants> cache;
    std::lock_guard<std::mutex> lock(mu);
    auto key = std::make_pair(n, modes);
    auto it = cache.find(key);
    if (it != cache.end()) return it->second;

    if (modes < 1 || modes > n) fail("dft_constants: need 1 <= modes <= n");
    std::vector<std::size_t> kept;  // wraparound |k| < modes
    for (std::size_t k = 0; k < n; ++k)
        if (k < modes || k + modes > n) kept.push_back(k);
    const std::size_t r = kept.size();
    const std::size_t K = r * r;
    const std::size_t n2 = n * n;

    std::vector<double> fre(n2 * K), fim(n2 * K), ire(K * n2), iim(K * n2);
    const double two_pi = 6.283185307179586476925286766559;
    const double norm = 1.0 / static_cast<double>(n);
    for (std::size_t a = 0; a < r; ++a)
        for (std::size_t b = 0; b < r; ++b) {
            const std::size_t ky = kept[a], kx = kept[b];
            const std::size_t kcol = a * r + b;
            for (std::size_t iy = 0; iy < n; ++iy)
                for (std::size_t ix = 0; ix < n; ++ix) {
                    const std::size_t p = iy * n + ix;
                    const double phase =
                        two_pi * (static_cast<double>(ky * iy + kx * ix)) / static_cast<double>(n);
                    // analysis row uses e^{-i phase}, synthesis uses e^{+i phase}
                    fre[p * K + kcol] = std::cos(phase) * norm;
                    fim[p * K + kcol] = -std::sin(phase) * norm;
                    ire[kcol * n2 + p] = std::cos(phase) * norm;
                    iim[kcol * n2 + p] = std::sin(phase) * norm;
                }
        }

    DftConstants c;
    c.n = n;
    c.modes = modes;
    c.n_kept = K;
    c.fwd_re = Tensor::from_vec(std::move(fre), {n2, K});
    c.fwd_im = Tensor::from_vec(std::move(fim), {n2, K});
    c.inv_re = Tensor::from_vec(std::move(ire), {K, n2});
    c.inv_im = Tensor::from_vec(std::move(iim), {K, n2});
    return cache.emplace(key, std::move(c)).first->second;
}

std::size_t spectral_param_count(const SpectralArch& a) {
    const std::size_t K = dft_constants(a.grid_n, a.modes).n_kept;
    std::size_t n = a.channels * 2;  // lift
    n += a.layers * (a.channels * a.channels + a.channels + 2 * a.channels * K);
    n += a.out_channels * a.channels + a.out_channels;
    return n;
}

SpectralParams init_spectral(std::uint64_t seed, const SpectralArch& arch) {
    SpectralParams p;
    p.arch = arch;
    const std::size_t C = arch.channels;
    const std::size_t K = dft_constants(arch.grid_n, arch.modes).n_kept;
    Rng rng(derive_seed(seed, "spectral-init"));
    p.lift_w = kaiming_uniform(rng, C, 1, 1);
    p.lift_b = Tensor::zeros({C, 1});
    for (std::size_t l = 0; l < arch.layers; ++l) {
        p.conv_w.push_back(kaiming_uniform(rng, C, C, C));
        p.conv_b.push_back(Tensor::zeros({C, 1}));
        p.spec_re.push_back(kaiming_uniform(rng, C, K, C));
        p.spec_im.push_back(kaiming_uniform(rng, C, K, C));
    }
    p.proj_w = kaiming_uniform(rng, arch.out_channels, C, C);
    p.proj_b = Tensor::zeros({arch.out_channels, 1});
    return p;
}

BoundSpectral bind_spectral(Graph& g, const SpectralParams& p) {
    BoundSpectral b;
    b.arch = &p.arch;
    b.in_shift = p.in_shift;
    b.in_scale = p.in_scale;
    b.out_scale = p.out_scale;
    b.lift_w = g.leaf(p.lift_w);
    b.lift_b = g.leaf(p.lift_b);
    for (std::size_t l = 0; l < p.arch.layers; ++l) {
        b.conv_w.push_back(g.leaf(p.conv_w[l]));
        b.conv_b.push_back(g.leaf(p.conv_b[l]));
        b.spec_re.push_back(g.leaf(p.spec_re[l]));
        b.spec_im.push_back(g.leaf(p.spec_im[l]));
    }
    b.proj_w = g.leaf(p.proj_w);
    b.proj_b = g.leaf(p.proj_b);
    return b;
}

Tensor boundary_restriction_matrix(std::size_t n, bool remove_mean) {
    const std::vector<std::size_t> cells = boundary_cells_ccw(n);
    const std::size_t B = cells.size();
    const std::size_t n2 = n * n;
    std::vector<double> m(n2 * B, 0.0);
    for (std::size_t b = 0; b < B; ++b) m[cells[b] * B + b] = 1.0;
    if (remove_mean) {
        const double inv_b = 1.0 / static_cast<double>(B);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t cb : cells) m[cb * B + b] -= inv_b;
    }
    return Tensor::from_vec(std::move(m), {n2, B});
}

Tensor spectral_forward(Graph& g, const BoundSpectral& sp, const Tensor& x) {
    const SpectralArch& a = *sp.arch;
    const std::size_t n2 = a.grid_n * a.grid_n;
    if (x.rank() != 2 || x.shape[0] != 1 || x.shape[1] != n2)
        fail("spectral_forward: input " + x.shape_str() + " does not match grid " +
             std::to_string(a.grid_n) + "x" + std::to_string(a.grid_n));
    const DftConstants& dc = dft_constants(a.grid_n, a.modes);
    Tensor fwd_re = g.leaf(dc.fwd_re), fwd_im = g.leaf(dc.fwd_im);
    Tensor inv_re = g.leaf(dc.inv_re), inv_im = g.leaf(dc.inv_im);
    Tensor ones = ones_row(g, n2);

    Tensor xin = x;
    if (sp.in_shift != 0.0 || sp.in_scale != 1.0) {
        xin = g.scale(g.sub(x, g.leaf(Tensor::full(x.shape, sp.in_shift))), 1.0 / sp.in_scale);
    }
    Tensor h = g.add(g.matmul(sp.lift_w, xin), g.matmul(sp.lift_b, ones));
    for (std::size_t l = 0; l < a.layers; ++l) {
        Tensor xre = g.matmul(h, fwd_re);
        Tensor xim = g.matmul(h, fwd_im);
        Tensor yre = g.sub(g.mul(sp.spec_re[l], xre), g.mul(sp.spec_im[l], xim));
        Tensor yim = g.add(g.mul(sp.spec_re[l], xim), g.mul(sp.spec_im[l], xre));
        Tensor spec = g.sub(g.matmul(yre, inv_re), g.matmul(yim, inv_im));
        Tensor local = g.add(g.matmul(sp.conv_w[l], h), g.matmul(sp.conv_b[l], ones));
        h = apply_act(g, a.act, g.add(spec, local));
    }
    Tensor out = g.add(g.matmul(sp.proj_w, h), g.matmul(sp.proj_b, ones));
    if (sp.out_scale != 1.0) out = g.scale(out, sp.out_scale);
    if (a.head == SpectralArch::Head::Boundary)
        out = g.matmul(out, g.leaf(boundary_restriction_matrix(a.grid_n, true)));
    return out;
}

ModelBundle make_bundle(std::uint64_t seed, std::size_t grid_n, std::size_t latent_dim,
                        const std::vector<std::size_t>& enc_hidden,
                        const std::vector<std::size_t>& dec_hidden,
                        const std::vector<std::size_t>& score_hidden,
                        const SpectralArch& surrogate_arch, const DiffusionSchedule& schedule,
                        double sigma_min, double sigma_max, std::size_t time_embed_dim) {
    ModelBundle b;
    b.grid_n = grid_n;
    b.latent_dim = latent_dim;
    b.time_embed_dim = time_embed_dim;
    b.sigma_min = sigma_min;
    b.sigma_max = sigma_max;
    b.schedule = schedule;

    MlpArch enc;
    enc.widths.push_back(grid_n * grid_n);
    enc.widths.insert(enc.widths.end(), enc_hidden.begin(), enc_hidden.end());
    enc.widths.push_back(latent_dim);
    b.encoder = init_mlp(derive_seed(seed, "encoder"), enc);

    MlpArch dec;
    dec.widths.push_back(latent_dim);
    dec.widths.insert(dec.widths.end(), dec_hidden.begin(), dec_hidden.end());
    dec.widths.push_back(grid_n * grid_n);
    dec.squash_output = true;
    dec.squash_lo = sigma_min;
    dec.squash_hi = sigma_max;
    b.decoder = init_mlp(derive_seed(seed, "decoder"), dec);

    MlpArch sc;
    sc.widths.push_back(latent_dim + time_embed_dim);
    sc.widths.insert(sc.widths.end(), score_hidden.begin(), score_hidden.end());
    sc.widths.push_back(latent_dim);
    b.score = init_mlp(derive_seed(seed, "score"), sc);

    if (surrogate_arch.grid_n != grid_n) fail("make_bundle: surrogate grid mismatch");
    b.surrogate = init_spectral(derive_seed(seed, "surrogate"), surrogate_arch);

    b.latent_shift.assign(latent_dim, 0.0);
    b.latent_scale.assign(latent_dim, 1.0);
    return b;
}

BoundBundle bind_bundle(Graph& g, const ModelBundle& b) {
    BoundBundle bb;
    bb.bundle = &b;
    bb.score = bind_mlp(g, b.score);
    bb.encoder = bind_mlp(g, b.encoder);
    bb.decoder = bind_mlp(g, b.decoder);
    bb.surrogate = bind_spectral(g, b.surrogate);
    bb.latent_shift = g.leaf(Tensor::from_vec(b.latent_shift, {b.latent_dim, 1}));
    bb.latent_scale = g.leaf(Tensor::from_vec(b.latent_scale, {b.latent_dim, 1}));
    std::vector<double> inv(b.latent_dim);
    for (std::size_t i = 0; i < b.latent_dim; ++i) inv[i] = 1.0 / b.latent_scale[i];
    bb.latent_inv_scale = g.leaf(Tensor::from_vec(std::move(inv), {b.latent_dim, 1}));
    return bb;
}

Tensor score_forward(Graph& g, const BoundBundle& bb, const Tensor& z_t, int t) {
    const ModelBundle& b = *bb.bundle;
    if (t < 1 || static_cast<std::size_t>(t) > b.schedule.t_train)
        fail("score_forward: timestep " + std::to_string(t) + " outside schedule range");
    if (z_t.rank() != 2 || z_t.shape[0] != b.latent_dim)
        fail("score_forward: latent " + z_t.shape_str() + " does not match dim " +
             std::to_string(b.latent_dim));
    Tensor emb = g.leaf(Tensor::from_vec(time_embedding(b.time_embed_dim, static_cast<double>(t)),
                                         {b.time_embed_dim, 1}));
    Tensor emb_b = g.matmul(emb, ones_row(g, z_t.shape[1]));
    return mlp_forward(g, bb.score, g.concat({z_t, emb_b}, 0));
}

Tensor encode(Graph& g, const BoundBundle& bb, const Tensor& a) {
    Tensor h = mlp_forward(g, bb.encoder, a);
    Tensor ones = ones_row(g, a.shape[1]);
    Tensor shift = g.matmul(bb.latent_shift, ones);
    Tensor inv_scale = g.matmul(bb.latent_inv_scale, ones);
    return g.mul(g.sub(h, shift), inv_scale);
}

Tensor decode(Graph& g, const BoundBundle& bb, const Tensor& z) {
    Tensor ones = ones_row(g, z.shape[1]);
    Tensor shift = g.matmul(bb.latent_shift, ones);
    Tensor scl = g.matmul(bb.latent_scale, ones);
    return mlp_forward(g, bb.decoder, g.add(g.mul(z, scl), shift));
}

Tensor surrogate_body_forward(Graph& g, const BoundBundle& bb, const Tensor& a_row) {
    return spectral_forward(g, bb.surrogate, a_row);
}

ScoreFn make_score_fn(const ModelBundle& b) {
    auto cache = std::make_shared<std::unordered_map<std::uint64_t, BoundBundle>>();
    return [&b, cache](Graph& g, const Tensor& z_t, int t) {
        auto it = cache->find(g.serial());
        if (it == cache->end()) it = cache->emplace(g.serial(), bind_bundle(g, b)).first;
        return score_forward(g, it->second, z_t, t);
    };
}

Tensor sample_deterministic(Graph& g, const BoundBundle& bb, const Tensor& z_T,
                            const DiffusionSchedule& s, TrajectoryRecord* record) {
    ScoreFn fn = [&bb](Graph& gg, const Tensor& z, int t) { return score_forward(gg, bb, z, t); };
    return sample_deterministic(g, fn, z_T, s, record);
}

std::vector<Tensor*> mlp_param_ptrs(MlpParams& p) {
    std::vector<Tensor*> out;
    for (std::size_t l = 0; l < p.weight.size(); ++l) {
        out.push_back(&p.weight[l]);
        out.push_back(&p.bias[l]);
    }
    return out;
}

std::vector<Tensor*> spectral_param_ptrs(SpectralParams& p) {
    std::vector<Tensor*> out{&p.lift_w, &p.lift_b};
    for (std::size_t l = 0; l < p.conv_w.size(); ++l) {
        out.push_back(&p.conv_w[l]);
        out.push_back(&p.conv_b[l]);
        out.push_back(&p.spec_re[l]);
        out.push_back(&p.spec_im[l]);
    }
    out.push_back(&p.proj_w);
    out.push_back(&p.proj_b);
    return out;
}

namespace {

Tensor grad_or_zero(const Gradients& grads, const Tensor& leaf) {
    if (grads.has(leaf)) return grads.wrt(leaf);
    return Tensor::zeros(leaf.shape);
}

}  // namespace

std::vector<Tensor> collect_grads(const Gradients& grads, const BoundMlp& m) {
    std::vector<Tensor> out;
    for (std::size_t l = 0; l < m.weight.size(); ++l) {
        out.push_back(grad_or_zero(grads, m.weight[l]));
        out.push_back(grad_or_zero(grads, m.bias[l]));
    }
    return out;
}

std::vector<Tensor> collect_grads(const Gradients& grads, const BoundSpectral& sp) {
    std::vector<Tensor> out{grad_or_zero(grads, sp.lift_w), grad_or_zero(grads, sp.lift_b)};
    for (std::size_t l = 0; l < sp.conv_w.size(); ++l) {
        out.push_back(grad_or_zero(grads, sp.conv_w[l]));
        out.push_back(grad_or_zero(grads, sp.conv_b[l]));
        out.push_back(grad_or_zero(grads, sp.spec_re[l]));
        out.push_back(grad_or_zero(grads, sp.spec_im[l]));
    }
    out.push_back(grad_or_zero(grads, sp.proj_w));
    out.push_back(grad_or_zero(grads, sp.proj_b));
    return out;
}

namespace {

Tensor batch_columns(const std::vector<std::vector<double>>& fields,
                     const std::vector<std::size_t>& idx, std::size_t lo, std::size_t hi) {
    const std::size_t dim = fields[idx[lo]].size();
    const std::size_t bs = hi - lo;
    std::vector<double> v(dim * bs);
    for (std::size_t j = 0; j < bs; ++j) {
        const auto& f = fields[idx[lo + j]];
        for (std::size_t p = 0; p < dim; ++p) v[p * bs + j] = f[p];
    }
    return Tensor::from_vec(std::move(v), {dim, bs});
}

void shuffle_indices(std::vector<std::size_t>& idx, Rng& rng) {
    for (std::size_t i = idx.size(); i > 1; --i)
        std::swap(idx[i - 1], idx[rng.uniform_index(i)]);
}

}  // namespace

std::vector<double> train_autoencoder(ModelBundle& b,
                                      const std::vector<std::vector<double>>& fields,
                                      const TrainConfig& cfg) {
    if (fields.empty()) fail("train_autoencoder: empty dataset");
    std::vector<Tensor*> params = mlp_param_ptrs(b.encoder);
    for (Tensor* p : mlp_param_ptrs(b.decoder)) params.push_back(p);
    OptimizerState state;
    Rng rng(derive_seed(cfg.seed, "train-ae"));
    std::vector<std::size_t> idx(fields.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::vector<double> losses;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        shuffle_indices(idx, rng);
        double epoch_loss = 0;
        for (std::size_t lo = 0; lo < idx.size(); lo += cfg.batch) {
            const std::size_t hi = std::min(idx.size(), lo + cfg.batch);
            Graph g;
            BoundBundle bb = bind_bundle(g, b);
            Tensor x = g.leaf(batch_columns(fields, idx, lo, hi));
            Tensor rec = decode(g, bb, encode(g, bb, x));
            Tensor loss = g.scale(g.sum(g.square(g.sub(rec, x))),
                                  1.0 / static_cast<double>(hi - lo));
            Gradients grads = g.backward(loss);
            std::vector<Tensor> gvec = collect_grads(grads, bb.encoder);
            for (Tensor& t : collect_grads(grads, bb.decoder)) gvec.push_back(std::move(t));
            optimizer_update(state, params, gvec, cfg.opt);
            epoch_loss += loss.at(0) * static_cast<double>(hi - lo);
        }
        losses.push_back(epoch_loss / static_cast<double>(fields.size()));
        if (!std::isfinite(losses.back())) fail("train_autoencoder: loss diverged");
    }
    return losses;
}

void finalize_latent_stats(ModelBundle& b, const std::vector<std::vector<double>>& fields) {
    if (fields.empty()) fail("finalize_latent_stats: empty dataset");
    const std::size_t d = b.latent_dim;
    std::vector<double> mean(d, 0.0), var(d, 0.0);
    std::vector<std::vector<double>> raw;
    raw.reserve(fields.size());
    for (const auto& f : fields) {
        Graph g;
        BoundBundle bb = bind_bundle(g, b);
        Tensor x = g.leaf(Tensor::from_vec(f, {f.size(), 1}));
        // raw encoder output, before any normalization
        Tensor h = mlp_forward(g, bb.encoder, x);
        raw.push_back(h.vals());
    }
    for (const auto& h : raw)
        for (std::size_t i = 0; i < d; ++i) mean[i] += h[i];
    for (double& m : mean) m /= static_cast<double>(raw.size());
    for (const auto& h : raw)
        for (std::size_t i = 0; i < d; ++i) var[i] += (h[i] - mean[i]) * (h[i] - mean[i]);
    for (std::size_t i = 0; i < d; ++i) {
        var[i] /= static_cast<double>(raw.size());
        b.latent_shift[i] = mean[i];
        b.latent_scale[i] = std::max(std::sqrt(var[i]), 1e-6);
    }
}

std::vector<double> train_score(ModelBundle& b, const std::vector<std::vector<double>>& fields,
                                const TrainConfig& cfg) {
    if (fields.empty()) fail("train_score: empty dataset");
    std::vector<std::vector<double>> latents;
    latents.reserve(fields.size());
    for (const auto& f : fields) latents.push_back(encode_raw(b, f));

    std::vector<Tensor*> params = mlp_param_ptrs(b.score);
    OptimizerState state;
    Rng rng(derive_seed(cfg.seed, "train-score"));
    std::vector<std::size_t> idx(latents.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::vector<double> losses;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        shuffle_indices(idx, rng);
        double epoch_loss = 0;
        for (std::size_t lo = 0; lo < idx.size(); lo += cfg.batch) {
            const std::size_t hi = std::min(idx.size(), lo + cfg.batch);
            Graph g;
            BoundBundle bb = bind_bundle(g, b);
            ScoreFn fn = [&bb](Graph& gg, const Tensor& z, int t) {
                return score_forward(gg, bb, z, t);
            };
            std::vector<std::vector<double>> batch;
            for (std::size_t j = lo; j < hi; ++j) batch.push_back(latents[idx[j]]);
            Tensor loss = diffusion_loss(g, fn, batch, b.latent_dim, b.schedule, rng);
            Gradients grads = g.backward(loss);
            optimizer_update(state, params, collect_grads(grads, bb.score), cfg.opt);
            epoch_loss += loss.at(0) * static_cast<double>(hi - lo);
        }
        losses.push_back(epoch_loss / static_cast<double>(latents.size()));
        if (!std::isfinite(losses.back())) fail("train_score: loss diverged");
    }
    return losses;
}

std::vector<double> encode_raw(const ModelBundle& b, const std::vector<double>& field) {
    Graph g;
    BoundBundle bb = bind_bundle(g, b);
    Tensor x = g.leaf(Tensor::from_vec(field, {field.size(), 1}));
    return encode(g, bb, x).vals();
}

std::vector<double> decode_raw(const ModelBundle& b, const std::vector<double>& z) {
    Graph g;
    BoundBundle bb = bind_bundle(g, b);
    Tensor zt = g.leaf(Tensor::from_vec(z, {z.size(), 1}));
    return decode(g, bb, zt).vals();
}

double score_lipschitz_probe(const ModelBundle& b, std::size_t samples, std::uint64_t seed,
                             std::size_t power_iters) {
    Rng rng(derive_seed(seed, "lipschitz-probe"));
    const std::size_t d = b.latent_dim;
    double worst = 0.0;
    const double h = 1e-5;
    for (std::size_t s = 0; s < samples; ++s) {
        const int t = static_cast<int>(1 + rng.uniform_index(b.schedule.t_train));
        std::vector<double> z = rng.normal_vec(d);
        std::vector<double> v = rng.normal_vec(d);
        double sigma = 0.0;
        for (std::size_t it = 0; it < power_iters; ++it) {
            double nv = 0;
            for (double x : v) nv += x * x;
            nv = std::sqrt(nv);
            if (nv == 0.0) break;
            for (double& x : v) x /= nv;
            // Jv by central differences of the score
            std::vector<double> zp(d), zm(d);
            for (std::size_t i = 0; i < d; ++i) {
                zp[i] = z[i] + h * v[i];
                zm[i] = z[i] - h * v[i];
            }
            auto eval = [&](const std::vector<double>& zz) {
                Graph g;
                BoundBundle bb = bind_bundle(g, b);
                return score_forward(g, bb, g.leaf(Tensor::from_vec(zz, {d, 1})), t).vals();
            };
            const std::vector<double> fp = eval(zp), fm = eval(zm);
            std::vector<double> jv(d);
            for (std::size_t i = 0; i < d; ++i) jv[i] = (fp[i] - fm[i]) / (2.0 * h);
            // J^T (Jv) via reverse mode
            Graph g;
            BoundBundle bb = bind_bundle(g, b);
            Tensor leaf = g.leaf(Tensor::from_vec(z, {d, 1}));
            Tensor out = score_forward(g, bb, leaf, t);
            Tensor cot = g.leaf(Tensor::from_vec(jv, {d, 1}));
            Tensor lossl = g.sum(g.mul(out, cot));
            Tensor jtjv = g.backward(lossl).wrt(leaf);
            double lam = 0;
            for (std::size_t i = 0; i < d; ++i) lam += jtjv.at(i) * v[i];
            sigma = std::sqrt(std::max(0.0, lam));
            v = jtjv.vals();
        }
        worst = std::max(worst, sigma);
    }
    return worst;
}

}  // namespace dilo
