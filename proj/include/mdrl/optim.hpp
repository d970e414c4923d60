#pragma once

#include <map>
#include <string>

#include "mdrl/params.hpp"
#include "mdrl/tensor.hpp"

namespace mdrl {

struct AdamConfig {
    double lr = 3e-6;
    double beta1 = 0.9;
    double beta2 = 0.99;
    double weight_decay = 0.1;      // decoupled
    double max_grad_norm = 0.2;     // global, applied before the moment update
    double eps = 1e-8;
};

struct AdamState {
    int64_t step = 0;
    std::map<std::string, Tensor> m;
    std::map<std::string, Tensor> v;
};

// AdamW step with global gradient-norm clipping. The norm is taken over the
// concatenation of all gradients; if it exceeds max_grad_norm every gradient
// is scaled by max_grad_norm / norm before entering the moment estimates.
// Weight decay is decoupled (applied directly to the parameters, not mixed
// into the gradient). Returns the pre-clip global gradient norm.
double adam_step(ParamStore& params, const std::map<std::string, Tensor>& grads,
                 AdamState& state, const AdamConfig& cfg);

} // namespace mdrl
