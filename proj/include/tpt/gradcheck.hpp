#pragma once

#include <functional>

#include "tpt/autodiff.hpp"

namespace tpt {

/// Builds a scalar on `tape` from the leaf `x`.
using ScalarFn = std::function<ad::Var(ad::Tape& tape, ad::Var x)>;

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t worst_index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
};

/// Compares the reverse-mode gradient of `f` at `x` with central differences
/// (f(x + h e_i) - f(x - h e_i)) / 2h. Per element the error is
/// |a - n| / max(|a|, |n|, 1e-8); the maximum over elements is reported.
GradCheckResult finite_diff_check(const ScalarFn& f, const Tensor& x, double h = 1e-5);

/// Analytic gradient of `f` at `x`.
Tensor analytic_gradient(const ScalarFn& f, const Tensor& x);

} // namespace tpt
