#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "hpdm/tensor.hpp"

namespace hpdm {

// Adaptive-moment optimizer with decoupled weight decay, linear warmup into
// cosine decay, and an EMA shadow of the parameters. Zero gradients leave
// parameters untouched except for the decay term; a non-finite gradient
// aborts the step loudly.
struct OptimizerConfig {
    float base_lr = 2e-3f;
    int64_t warmup_steps = 100;
    int64_t decay_steps = 2000;  // step at which the cosine reaches zero
    float weight_decay = 0.01f;
    float beta1 = 0.9f;
    float beta2 = 0.99f;
    float eps = 1e-8f;
    float ema_decay = 0.999f;
};

inline float lr_at_step(const OptimizerConfig& cfg, int64_t step) {
    if (cfg.warmup_steps > 0 && step < cfg.warmup_steps)
        return cfg.base_lr * static_cast<float>(step) / static_cast<float>(cfg.warmup_steps);
    if (step >= cfg.decay_steps) return 0.0f;
    const double span = static_cast<double>(cfg.decay_steps - cfg.warmup_steps);
    const double u = span > 0 ? static_cast<double>(step - cfg.warmup_steps) / span : 1.0;
    return cfg.base_lr * 0.5f * (1.0f + static_cast<float>(std::cos(3.141592653589793 * u)));
}

template <class S>
struct OptimizerStateT {
    OptimizerConfig cfg;
    int64_t step = 0;
    std::vector<std::vector<S>> m;    // first moments, one per parameter
    std::vector<std::vector<S>> v;    // second moments
    std::vector<TensorT<S>> ema;      // EMA parameter copies

    void init(const std::vector<TensorT<S>>& params, OptimizerConfig c) {
        cfg = c;
        step = 0;
        m.clear();
        v.clear();
        ema.clear();
        for (const auto& p : params) {
            m.emplace_back(p.numel(), S(0));
            v.emplace_back(p.numel(), S(0));
            ema.push_back(p.clone());
            ema.back().set_requires_grad(false);
        }
    }
};

using OptimizerState = OptimizerStateT<float>;

template <class S>
void optimizer_step(std::vector<TensorT<S>>& params,
                    const std::vector<std::vector<S>>& grads, OptimizerStateT<S>& st) {
    if (params.size() != grads.size() || params.size() != st.m.size())
        throw ShapeError("optimizer_step: parameter/gradient/state count mismatch");
    const S lr = static_cast<S>(lr_at_step(st.cfg, st.step));
    const S b1 = static_cast<S>(st.cfg.beta1), b2 = static_cast<S>(st.cfg.beta2);
    const S bc1 = S(1) - static_cast<S>(std::pow(static_cast<double>(b1), double(st.step + 1)));
    const S bc2 = S(1) - static_cast<S>(std::pow(static_cast<double>(b2), double(st.step + 1)));
    for (size_t i = 0; i < params.size(); i++) {
        auto& pv = params[i].values();
        const auto& g = grads[i];
        if (g.size() != pv.size())
            throw ShapeError(strcat_all("optimizer_step: grad size ", g.size(),
                                        " != param size ", pv.size()));
        auto& mi = st.m[i];
        auto& vi = st.v[i];
        auto& ev = st.ema[i].values();
        for (size_t j = 0; j < pv.size(); j++) {
            if (!std::isfinite(static_cast<double>(g[j])))
                throw NumericError(strcat_all("optimizer_step: non-finite gradient in param ", i));
            mi[j] = b1 * mi[j] + (S(1) - b1) * g[j];
            vi[j] = b2 * vi[j] + (S(1) - b2) * g[j] * g[j];
            const S mhat = mi[j] / bc1;
            const S vhat = vi[j] / bc2;
            pv[j] -= lr * (mhat / (std::sqrt(vhat) + static_cast<S>(st.cfg.eps)));
            pv[j] -= lr * static_cast<S>(st.cfg.weight_decay) * pv[j];
            ev[j] += (S(1) - static_cast<S>(st.cfg.ema_decay)) * (pv[j] - ev[j]);
        }
    }
    st.step++;
}

}  // namespace hpdm
