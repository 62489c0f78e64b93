#pragma once

#include <vector>

#include "dilo/tensor.hpp"

namespace dilo {

enum class OptMode { Gd, Adam, AdamW };

struct OptimizerConfig {
    OptMode mode = OptMode::Adam;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;  // decoupled; applied in AdamW mode only
};

/// Adam first/second moment accumulators. Gd mode keeps no state.
struct OptimizerState {
    std::size_t step = 0;
    std::vector<std::vector<double>> m, v;
};

/// One optimizer step over a parameter list. Parameter tensors receive fresh
/// data buffers so values already recorded on a graph are never mutated.
void optimizer_update(OptimizerState& state, const std::vector<Tensor*>& params,
                      const std::vector<Tensor>& grads, const OptimizerConfig& config);

}  // namespace dilo
