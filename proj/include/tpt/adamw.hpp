#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "tpt/tensor.hpp"

namespace tpt {

struct AdamWOptions {
    double lr = 0.005;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

/// First/second moments per parameter tensor and the shared step counter.
struct AdamWState {
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
    std::size_t step = 0;

    void reset() {
        m.clear();
        v.clear();
        step = 0;
    }
};

/// One decoupled-weight-decay Adam update using each tensor's grad buffer.
/// Moments are created (zeroed) on the first call; later calls must pass the
/// same tensors in the same order.
void adamw_step(std::span<Tensor* const> params, AdamWState& state, const AdamWOptions& options);

} // namespace tpt
