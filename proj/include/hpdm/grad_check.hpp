#pragma once

#include <functional>

#include "hpdm/ops.hpp"
#include "hpdm/tape.hpp"

namespace hpdm {

// Central-finite-difference check of the tape gradient of a scalar-valued
// function. Returns the max over coordinates of
//   |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
// Run with S = double: forward evaluation under f32 has too much roundoff
// for the 1e-3 tolerances the kernels are held to.
template <class S, class F>
double grad_check(F f, TensorT<S> x, double eps) {
    // determinism guard: two identical evaluations must agree bitwise
    {
        TensorT<S> a = f(x);
        TensorT<S> b = f(x);
        if (a.numel() != 1) throw ShapeError("grad_check: f is not scalar-valued");
        if (a.item() != b.item())
            throw Error("grad_check: f is not deterministic (two evaluations differ)");
    }

    TensorT<S> xg = x.clone();
    xg.set_requires_grad(true);
    TapeT<S> tape;
    TensorT<S> analytic;
    {
        auto scope = tape.activate();
        TensorT<S> loss = f(xg);
        tape.backward(loss);
        analytic = tape.grad(xg);
    }

    double worst = 0.0;
    for (int64_t i = 0; i < x.numel(); i++) {
        TensorT<S> xp = x.clone();
        TensorT<S> xm = x.clone();
        xp.values()[i] += static_cast<S>(eps);
        xm.values()[i] -= static_cast<S>(eps);
        const double fp = static_cast<double>(f(xp).item());
        const double fm = static_cast<double>(f(xm).item());
        const double numeric = (fp - fm) / (2.0 * eps);
        const double a = static_cast<double>(analytic.values()[i]);
        const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-8});
        worst = std::max(worst, std::fabs(a - numeric) / denom);
    }
    return worst;
}

}  // namespace hpdm
