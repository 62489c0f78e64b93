#include "dilo/surrogate.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

#include "dilo/optim.hpp"

namespace dilo {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

/// Exact forward solve as a graph node; the adjoint solve is the vjp.
class EitForwardOp : public CustomOp {
  public:
    EitForwardOp(std::shared_ptr<const CurrentPatternSet> ps, EitSolverSettings st)
        : ps_(std::move(ps)), st_(st) {}

    std::string name() const override { return "eit-forward"; }

    Tensor forward(const std::vector<Tensor>& inputs) override {
        const ConductivityField f = field_from(inputs);
        const EitSolution sol = eit_solve(f, *ps_, st_);
        return Tensor::from_vec(sol.obs.v, {sol.obs.patterns, sol.obs.boundary});
    }

    std::vector<Tensor> vjp(const std::vector<Tensor>& inputs, const Tensor&,
                            const Tensor& cotangent) override {
        const ConductivityField f = field_from(inputs);
        std::vector<double> g = eit_vjp(f, *ps_, cotangent.vals(), st_);
        return {Tensor::from_vec(std::move(g), inputs[0].shape)};
    }

  private:
    ConductivityField field_from(const std::vector<Tensor>& inputs) const {
        const Tensor& a = inputs[0];
        const std::size_t n = ps_->n;
        if (a.numel() != n * n)
            fail("eit-forward: field " + a.shape_str() + " does not match grid " +
                 std::to_string(n));
        ConductivityField f;
        f.n = n;
        f.sigma = a.vals();
        return f;
    }

    std::shared_ptr<const CurrentPatternSet> ps_;
    EitSolverSettings st_;
};

}  // namespace

SurrogateHandle make_neural_surrogate(const SpectralParams& params) {
    SurrogateHandle h;
    h.kind = SurrogateHandle::Kind::Neural;
    h.net = std::make_shared<SpectralParams>(params);
    return h;
}

SurrogateHandle make_exact_surrogate(const CurrentPatternSet& patterns,
                                     const EitSolverSettings& settings) {
    SurrogateHandle h;
    h.kind = SurrogateHandle::Kind::ExactAdjoint;
    h.patterns = std::make_shared<CurrentPatternSet>(patterns);
    h.solver = settings;
    return h;
}

Tensor surrogate_eval(Graph& g, const SurrogateHandle& h, const Tensor& a_row) {
    if (h.kind == SurrogateHandle::Kind::Neural) {
        BoundSpectral bs = bind_spectral(g, *h.net);
        return spectral_forward(g, bs, a_row);
    }
    return g.custom(std::make_shared<EitForwardOp>(h.patterns, h.solver), {a_row});
}

std::vector<double> surrogate_vjp(const SurrogateHandle& h, const std::vector<double>& a,
                                  const std::vector<double>& cotangent) {
    if (h.kind == SurrogateHandle::Kind::ExactAdjoint) {
        ConductivityField f;
        f.n = h.patterns->n;
        f.sigma = a;
        return eit_vjp(f, *h.patterns, cotangent, h.solver);
    }
    // J^T c through reverse mode: differentiate sum(y * c)
    Graph g;
    Tensor leaf = g.leaf(Tensor::from_vec(a, {1, a.size()}));
    Tensor y = surrogate_eval(g, h, leaf);
    if (y.numel() != cotangent.size()) fail("surrogate_vjp: cotangent shape mismatch");
    Tensor c = g.leaf(Tensor::from_vec(cotangent, y.shape));
    Tensor pseudo = g.sum(g.mul(y, c));
    return g.backward(pseudo).wrt(leaf).vals();
}

double surrogate_holdout_error(const SpectralParams& params, const PairedEitDataset& data) {
    double num = 0, den = 0;
    for (std::size_t i = 0; i < data.fields.size(); ++i) {
        Graph g;
        BoundSpectral bs = bind_spectral(g, params);
        Tensor a = g.leaf(Tensor::from_vec(data.fields[i], {1, data.fields[i].size()}));
        Tensor y = spectral_forward(g, bs, a);
        const auto& want = data.observations[i];
        for (std::size_t j = 0; j < want.size(); ++j) {
            const double d = y.at(j) - want[j];
            num += d * d;
            den += want[j] * want[j];
        }
    }
    return std::sqrt(num / std::max(den, 1e-300));
}

SurrogateTrainResult train_surrogate(SpectralParams& params, const PairedEitDataset& train,
                                     const PairedEitDataset* holdout, const TrainConfig& cfg) {
    if (train.fields.empty()) fail("train_surrogate: empty dataset");
    {
        // calibrate fixed input/output normalization to the training data
        double sq = 0;
        std::size_t count = 0;
        for (const auto& y : train.observations) {
            for (double v : y) sq += v * v;
            count += y.size();
        }
        const double rms = std::sqrt(sq / static_cast<double>(count));
        if (rms > 0.0) params.out_scale = rms;
        double mean = 0, var = 0;
        std::size_t cells = 0;
        for (const auto& f : train.fields) {
            for (double v : f) mean += v;
            cells += f.size();
        }
        mean /= static_cast<double>(cells);
        for (const auto& f : train.fields)
            for (double v : f) var += (v - mean) * (v - mean);
        params.in_shift = mean;
        params.in_scale = std::max(std::sqrt(var / static_cast<double>(cells)), 1e-12);
    }
    std::vector<Tensor*> ptrs = spectral_param_ptrs(params);
    OptimizerState state;
    Rng rng(derive_seed(cfg.seed, "train-surrogate"));
    std::vector<std::size_t> idx(train.fields.size());
    std::iota(idx.begin(), idx.end(), 0);
    SurrogateTrainResult out;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (std::size_t i = idx.size(); i > 1; --i)
            std::swap(idx[i - 1], idx[rng.uniform_index(i)]);
        double epoch_loss = 0;
        for (std::size_t lo = 0; lo < idx.size(); lo += cfg.batch) {
            const std::size_t hi = std::min(idx.size(), lo + cfg.batch);
            Graph g;
            BoundSpectral bs = bind_spectral(g, params);
            Tensor total = g.leaf(Tensor::scalar(0.0));
            for (std::size_t j = lo; j < hi; ++j) {
                const auto& f = train.fields[idx[j]];
                const auto& yw = train.observations[idx[j]];
                Tensor a = g.leaf(Tensor::from_vec(f, {1, f.size()}));
                Tensor y = spectral_forward(g, bs, a);
                Tensor want = g.leaf(Tensor::from_vec(yw, y.shape));
                total = g.add(total, g.sum(g.square(g.sub(y, want))));
            }
            Tensor loss = g.scale(total, 1.0 / static_cast<double>(hi - lo));
            Gradients grads = g.backward(loss);
            optimizer_update(state, ptrs, collect_grads(grads, bs), cfg.opt);
            epoch_loss += loss.at(0) * static_cast<double>(hi - lo);
        }
        out.losses.push_back(epoch_loss / static_cast<double>(train.fields.size()));
        if (!std::isfinite(out.losses.back())) fail("train_surrogate: loss diverged");
    }
    if (holdout && !holdout->fields.empty())
        out.holdout_rel_l2 = surrogate_holdout_error(params, *holdout);
    return out;
}

GapStats gap_estimate(const ModelBundle& bundle, const SurrogateHandle& candidate,
                      const SurrogateHandle& reference, const Observation& y_obs,
                      const std::vector<Tensor>& zT_probes, double loss_weight) {
    GapStats stats;
    if (zT_probes.empty()) return stats;
    Tensor target = Tensor::from_vec(y_obs.v, {y_obs.patterns, y_obs.boundary});

    auto grad_of = [&](const SurrogateHandle& h, const Tensor& zT) {
        Graph g;
        BoundBundle bb = bind_bundle(g, bundle);
        Tensor leaf = g.leaf(zT);
        Tensor z0 = sample_deterministic(g, bb, leaf, bundle.schedule);
        Tensor a = g.transpose(decode(g, bb, z0));
        Tensor y = surrogate_eval(g, h, a);
        Tensor loss = g.scale(g.sum(g.square(g.sub(y, g.leaf(target)))), loss_weight);
        return std::make_pair(g.backward(loss).wrt(leaf).vals(), a.vals());
    };

    for (const Tensor& zT : zT_probes) {
        auto [g_cand, a_field] = grad_of(candidate, zT);
        auto [g_ref, a_field2] = grad_of(reference, zT);
        (void)a_field2;
        double gap2 = 0;
        for (std::size_t i = 0; i < g_cand.size(); ++i)
            gap2 += (g_cand[i] - g_ref[i]) * (g_cand[i] - g_ref[i]);
        const double gap = std::sqrt(gap2);
        stats.grad_max = std::max(stats.grad_max, gap);
        stats.grad_mean += gap;

        // value-level discrepancy on the decoded field
        Graph g;
        Tensor a = g.leaf(Tensor::from_vec(a_field, {1, a_field.size()}));
        Tensor y1 = surrogate_eval(g, candidate, a);
        Tensor y2 = surrogate_eval(g, reference, a);
        double v2 = 0;
        for (std::size_t i = 0; i < y1.numel(); ++i)
            v2 += (y1.at(i) - y2.at(i)) * (y1.at(i) - y2.at(i));
        const double vgap = std::sqrt(v2);
        stats.value_max = std::max(stats.value_max, vgap);
        stats.value_mean += vgap;
    }
    stats.grad_mean /= static_cast<double>(zT_probes.size());
    stats.value_mean /= static_cast<double>(zT_probes.size());
    return stats;
}

}  // namespace dilo
