#include "mdrl/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace mdrl {

double adam_step(ParamStore& params, const std::map<std::string, Tensor>& grads,
                 AdamState& state, const AdamConfig& cfg) {
    double sq = 0.0;
    for (const auto& name : params.names()) {
        auto it = grads.find(name);
        if (it == grads.end()) continue;
        if (!it->second.same_shape(params.at(name))) {
            throw std::invalid_argument("adam_step: shape mismatch for '" + name + "'");
        }
        for (double gv : it->second.data) sq += gv * gv;
    }
    const double norm = std::sqrt(sq);
    const double scale = (cfg.max_grad_norm > 0 && norm > cfg.max_grad_norm)
                             ? cfg.max_grad_norm / norm
                             : 1.0;

    state.step += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));

    for (const auto& name : params.names()) {
        auto it = grads.find(name);
        if (it == grads.end()) continue;
        Tensor& p = params.at(name);
        Tensor& m = state.m.try_emplace(name, Tensor(p.shape)).first->second;
        Tensor& v = state.v.try_emplace(name, Tensor(p.shape)).first->second;
        if (!m.same_shape(p) || !v.same_shape(p)) {
            throw std::invalid_argument("adam_step: state shape mismatch for '" + name + "'");
        }
        for (int64_t i = 0; i < p.numel(); ++i) {
            const double g = it->second.at(i) * scale;
            m.at(i) = cfg.beta1 * m.at(i) + (1.0 - cfg.beta1) * g;
            v.at(i) = cfg.beta2 * v.at(i) + (1.0 - cfg.beta2) * g * g;
            const double mhat = m.at(i) / bc1;
            const double vhat = v.at(i) / bc2;
            p.at(i) -= cfg.lr * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * p.at(i));
        }
    }
    return norm;
}

} // namespace mdrl
