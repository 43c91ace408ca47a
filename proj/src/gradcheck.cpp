#include "tpt/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace tpt {

namespace {

double evaluate(const ScalarFn& f, const Tensor& x) {
    ad::Tape tape;
    Tensor probe = x.detached();
    const ad::Var out = f(tape, tape.constant(probe));
    if (out.value().size() != 1) throw ContractError("finite_diff_check needs a scalar function");
    return out.value()[0];
}

} // namespace

Tensor analytic_gradient(const ScalarFn& f, const Tensor& x) {
    Tensor param = x.detached();
    param.set_requires_grad(true);
    ad::Tape tape;
    const ad::Var out = f(tape, tape.leaf(param));
    tape.backward(out);
    Tensor g(x.shape());
    std::copy(param.grad().begin(), param.grad().end(), g.data().begin());
    return g;
}

GradCheckResult finite_diff_check(const ScalarFn& f, const Tensor& x, double h) {
    const Tensor analytic = analytic_gradient(f, x);
    GradCheckResult result;
    Tensor probe = x.detached();
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = probe[i];
        probe[i] = orig + h;
        const double fp = evaluate(f, probe);
        probe[i] = orig - h;
        const double fm = evaluate(f, probe);
        probe[i] = orig;
        const double numeric = (fp - fm) / (2.0 * h);
        const double a = analytic[i];
        const double err = std::abs(a - numeric) /
                           std::max({std::abs(a), std::abs(numeric), 1e-8});
        if (err > result.max_rel_error || i == 0) {
            result.max_rel_error = std::max(result.max_rel_error, err);
            if (err >= result.max_rel_error) {
                result.worst_index = i;
                result.analytic = a;
                result.numeric = numeric;
            }
        }
    }
    return result;
}

} // namespace tpt
