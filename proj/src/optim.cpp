#include "dilo/optim.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace dilo {

void optimizer_update(OptimizerState& state, const std::vector<Tensor*>& params,
                      const std::vector<Tensor>& grads, const OptimizerConfig& config) {
    if (params.size() != grads.size())
        throw std::runtime_error("optimizer_update: " + std::to_string(params.size()) +
                                 " params vs " + std::to_string(grads.size()) + " grads");
    for (std::size_t i = 0; i < params.size(); ++i)
        if (!params[i]->same_shape(grads[i]))
            throw std::runtime_error("optimizer_update: shape mismatch at param " +
                                     std::to_string(i) + ": " + params[i]->shape_str() + " vs " +
                                     grads[i].shape_str());

    if (config.mode == OptMode::Gd) {
        for (std::size_t i = 0; i < params.size(); ++i) {
            Tensor& p = *params[i];
            std::vector<double> nv(p.vals());
            const auto& g = grads[i].vals();
            for (std::size_t j = 0; j < nv.size(); ++j) nv[j] -= config.lr * g[j];
            p = Tensor::from_vec(std::move(nv), p.shape, p.dtype);
        }
        return;
    }

    if (state.m.empty()) {
        state.m.resize(params.size());
        state.v.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            state.m[i].assign(params[i]->numel(), 0.0);
            state.v[i].assign(params[i]->numel(), 0.0);
        }
    }
    if (state.m.size() != params.size())
        throw std::runtime_error("optimizer_update: state was built for a different param list");

    state.step += 1;
    const double b1 = config.beta1, b2 = config.beta2;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step));

    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = *params[i];
        if (state.m[i].size() != p.numel())
            throw std::runtime_error("optimizer_update: state shape mismatch at param " +
                                     std::to_string(i));
        std::vector<double> nv(p.vals());
        const auto& g = grads[i].vals();
        auto& m = state.m[i];
        auto& v = state.v[i];
        for (std::size_t j = 0; j < nv.size(); ++j) {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            nv[j] -= config.lr * mhat / (std::sqrt(vhat) + config.eps);
            if (config.mode == OptMode::AdamW && config.weight_decay > 0.0)
                nv[j] -= config.lr * config.weight_decay * p.at(j);
        }
        p = Tensor::from_vec(std::move(nv), p.shape, p.dtype);
    }
}

}  // namespace dilo
