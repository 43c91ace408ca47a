#include "tpt/adamw.hpp"

#include <cmath>
#include <string>

namespace tpt {

void adamw_step(std::span<Tensor* const> params, AdamWState& state, const AdamWOptions& options) {
    if (state.m.empty()) {
        for (const Tensor* p : params) {
            state.m.emplace_back(p->size(), 0.0);
            state.v.emplace_back(p->size(), 0.0);
        }
    }
    if (state.m.size() != params.size()) {
        throw ShapeError("adamw: optimizer state tracks " + std::to_string(state.m.size()) +
                         " tensors, got " + std::to_string(params.size()));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (!params[i]->requires_grad() || params[i]->size() != state.m[i].size()) {
            throw ShapeError("adamw: parameter " + std::to_string(i) + " with shape " +
                             shape_to_string(params[i]->shape()) +
                             " does not match optimizer state");
        }
    }

    ++state.step;
    const double t = static_cast<double>(state.step);
    const double bc1 = 1.0 - std::pow(options.beta1, t);
    const double bc2 = 1.0 - std::pow(options.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto data = params[i]->data();
        auto grad = params[i]->grad();
        auto& m = state.m[i];
        auto& v = state.v[i];
        for (std::size_t j = 0; j < data.size(); ++j) {
            const double g = grad[j];
            m[j] = options.beta1 * m[j] + (1.0 - options.beta1) * g;
            v[j] = options.beta2 * v[j] + (1.0 - options.beta2) * g * g;
            const double m_hat = m[j] / bc1;
            const double v_hat = v[j] / bc2;
            data[j] -= options.lr * options.weight_decay * data[j];
            data[j] -= options.lr * m_hat / (std::sqrt(v_hat) + options.eps);
        }
    }
}

} // namespace tpt
