#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "hpdm/denoiser.hpp"
#include "hpdm/optimizer.hpp"
#include "hpdm/patchgeom.hpp"
#include "hpdm/rng.hpp"
#include "hpdm/threadpool.hpp"

namespace hpdm {

// Continuous-sigma machinery: log-normal sigma draws attenuated per pyramid
// level, variance-preserving preconditioning around the raw network, the
// joint multi-level training loss, and the reverse-process steppers.

struct NoiseSchedule {
    float p_mean = -1.2f;
    float p_std = 1.2f;
    float sigma_min = 0.002f;
    float sigma_max = 80.0f;
    float sigma_data = 0.5f;
    float level_attenuation = 0.5f;  // per-level multiplier on sigma draws

    void validate() const {
        if (!(sigma_min > 0 && sigma_min < sigma_max))
            throw ConfigError("schedule.sigma_min: need 0 < sigma_min < sigma_max");
        if (!(sigma_data > 0)) throw ConfigError("schedule.sigma_data: must be positive");
        if (!(p_std >= 0)) throw ConfigError("schedule.p_std: must be >= 0");
        if (!(level_attenuation > 0 && level_attenuation <= 1))
            throw ConfigError("schedule.level_attenuation: must be in (0, 1]");
    }

    float level_sigma_max(int level) const {
        return sigma_max * float(std::pow(double(level_attenuation), double(level)));
    }
};

// One independent sigma per level: ln sigma ~ N(p_mean + l*ln(lambda), p_std),
// clamped into [sigma_min, sigma_max].
inline std::vector<float> sample_sigmas(const NoiseSchedule& ns, int levels, Rng& rng) {
    ns.validate();
    std::vector<float> sigmas;
    for (int l = 0; l < levels; l++) {
        const double mean = double(ns.p_mean) + double(l) * std::log(double(ns.level_attenuation));
        double ln_sigma = mean + double(ns.p_std) * rng.normal();
        double sigma = std::exp(ln_sigma);
        sigma = std::clamp(sigma, double(ns.sigma_min), double(ns.sigma_max));
        sigmas.push_back(float(sigma));
    }
    return sigmas;
}

struct Precond {
    float c_in;    // network input scale
    float c_skip;  // residual passthrough
    float c_out;   // network output scale
    float c_noise; // conditioning value fed to the network
};

inline Precond precondition(float sigma, float sigma_data) {
    if (!(sigma > 0)) throw ConfigError(strcat_all("precondition: sigma ", sigma, " <= 0"));
    const double s2 = double(sigma) * sigma, d2 = double(sigma_data) * sigma_data;
    Precond p;
    p.c_in = float(1.0 / std::sqrt(s2 + d2));
    p.c_skip = float(d2 / (s2 + d2));
    p.c_out = float(double(sigma) * sigma_data / std::sqrt(s2 + d2));
    p.c_noise = float(0.25 * std::log(double(sigma)));
    return p;
}

// Effective loss weight (sigma^2 + sigma_data^2) / (sigma * sigma_data)^2,
// i.e. 1 / c_out^2: every sigma contributes at unit scale.
inline float loss_weight(float sigma, float sigma_data) {
    const double s2 = double(sigma) * sigma, d2 = double(sigma_data) * sigma_data;
    return float((s2 + d2) / (s2 * d2));
}

struct SamplerConfig {
    int steps0 = 128;     // steps at level 0; halved per level
    int min_steps = 4;
    float rho = 7.0f;
    float churn = 0.0f;      // stochastic churn, level 0 only
    bool second_order = true;  // Heun correction, level 0 only
    float guidance = 1.0f;   // label-vs-null output scaling; 1 disables

    void validate() const {
        if (steps0 < 1) throw ConfigError("sampler.steps0: must be >= 1");
        if (min_steps < 1) throw ConfigError("sampler.min_steps: must be >= 1");
        if (!(rho >= 1)) throw ConfigError("sampler.rho: must be >= 1");
        if (churn < 0) throw ConfigError("sampler.churn: must be >= 0");
        if (guidance < 0) throw ConfigError("sampler.guidance: must be >= 0");
    }

    int steps_at_level(int level) const {
        return std::max(steps0 >> level, min_steps);
    }
};

// Decreasing sigma grid for one level: N values interpolated with the
// rho-power rule from lambda^l * sigma_max down to sigma_min, then 0.
inline std::vector<float> sigma_grid(const SamplerConfig& sc, const NoiseSchedule& ns, int level) {
    sc.validate();
    ns.validate();
    const int n = sc.steps_at_level(level);
    const double hi = double(ns.level_sigma_max(level));
    const double lo = double(ns.sigma_min);
    std::vector<float> grid;
    grid.reserve(n + 1);
    if (n == 1) {
        grid.push_back(float(hi));
    } else {
        const double inv_rho = 1.0 / double(sc.rho);
        const double a = std::pow(hi, inv_rho), b = std::pow(lo, inv_rho);
        for (int i = 0; i < n; i++) {
            const double u = double(i) / double(n - 1);
            grid.push_back(float(std::pow(a + u * (b - a), double(sc.rho))));
        }
    }
    grid.push_back(0.0f);
    for (size_t i = 0; i + 1 < grid.size(); i++)
        if (!(grid[i] > grid[i + 1]))
            throw NumericError("sigma_grid: grid is not strictly decreasing");
    return grid;
}

// ----------------------------------------------------------- reverse stepper

template <class S>
using DenoiseFnT = std::function<TensorT<S>(const TensorT<S>&, float)>;

struct StepOptions {
    bool second_order = false;
    float churn = 0.0f;  // sigma inflation factor; fresh noise matches it
};

// One reverse step sigma_cur -> sigma_next on the probability-flow direction
// d = (x - D(x; sigma)) / sigma, with optional Heun correction and optional
// stochastic churn. `denoise` may be called once or twice.
template <class S>
TensorT<S> denoise_step(const TensorT<S>& x, float sigma_cur, float sigma_next,
                        const DenoiseFnT<S>& denoise, const StepOptions& opts, Rng* rng) {
    if (!(sigma_cur > sigma_next) || sigma_next < 0)
        throw ConfigError(strcat_all("denoise_step: need sigma_cur > sigma_next >= 0, got ",
                                     sigma_cur, " -> ", sigma_next));
    TensorT<S> cur = x;
    float sigma_hat = sigma_cur;
    if (opts.churn > 0.0f) {
        if (!rng) throw ConfigError("denoise_step: churn requires an rng");
        sigma_hat = sigma_cur * (1.0f + opts.churn);
        const double extra =
            std::sqrt(double(sigma_hat) * sigma_hat - double(sigma_cur) * sigma_cur);
        cur = cur.clone();
        for (auto& v : cur.values()) v += S(extra * rng->normal());
    }
    auto denoised = denoise(cur, sigma_hat);
    const double dt = double(sigma_next) - double(sigma_hat);
    TensorT<S> out = TensorT<S>::zeros(cur.shape());
    {
        const auto& cv = cur.values();
        const auto& dv = denoised.values();
        auto& ov = out.values();
        for (size_t i = 0; i < ov.size(); i++) {
            const double d = (double(cv[i]) - double(dv[i])) / double(sigma_hat);
            ov[i] = S(double(cv[i]) + dt * d);
        }
    }
    if (opts.second_order && sigma_next > 0.0f) {
        auto denoised2 = denoise(out, sigma_next);
        const auto& cv = cur.values();
        const auto& dv = denoised.values();
        const auto& d2v = denoised2.values();
        auto& ov = out.values();
        for (size_t i = 0; i < ov.size(); i++) {
            const double d1 = (double(cv[i]) - double(dv[i])) / double(sigma_hat);
            const double d2 = (double(ov[i]) - double(d2v[i])) / double(sigma_next);
            ov[i] = S(double(cv[i]) + dt * 0.5 * (d1 + d2));
        }
    }
    if (!out.all_finite()) throw NumericError("denoise_step: non-finite state");
    return out;
}

// -------------------------------------------------------------- joint loss

// D(x_noisy; sigma) = c_skip * x_noisy + c_out * F(c_in * x_noisy, sigma).
// Runs the raw pyramid network once and applies per-level preconditioning.
template <class S>
std::vector<TensorT<S>> denoise_pyramid(const DenoiserT<S>& model,
                                        const std::vector<TensorT<S>>& noisy,
                                        const std::vector<PatchCoords>& coords,
                                        const std::vector<float>& sigmas, float sigma_data,
                                        const std::vector<int64_t>& label_rows) {
    const int levels = model.cfg.levels;
    std::vector<LevelStateT<S>> states;
    std::vector<Precond> pc;
    for (int l = 0; l < levels; l++) {
        pc.push_back(precondition(sigmas[l], sigma_data));
        auto scaled = scalar_mul(noisy[l], S(pc[l].c_in));
        states.push_back(model.tokenize(scaled, sigmas[l], label_rows[l], coords[l]));
    }
    auto raw = model.forward_pyramid(std::move(states));
    std::vector<TensorT<S>> out;
    for (int l = 0; l < levels; l++)
        out.push_back(add(scalar_mul(noisy[l], S(pc[l].c_skip)), scalar_mul(raw[l], S(pc[l].c_out))));
    return out;
}

template <class S>
struct JointLossResult {
    TensorT<S> loss;             // scalar, recorded on the active tape
    std::vector<double> per_level;  // weighted per-level terms (plain values)
};

// One sample's joint denoising loss. All randomness (coords, sigmas, noise,
// conditioning dropout) comes from `rng`, so a fixed stream replays exactly.
template <class S>
JointLossResult<S> joint_loss(const DenoiserT<S>& model, const PyramidSpec& pyramid,
                              const NoiseSchedule& ns, const TensorT<S>& video, int64_t label,
                              Rng rng, bool train_mode, bool continuous_offsets = false) {
    const int levels = model.cfg.levels;
    Rng coord_rng = rng.fork("coords");
    auto coords = sample_pyramid_coords(pyramid, coord_rng, continuous_offsets);
    Rng sigma_rng = rng.fork("sigmas");
    auto sigmas = sample_sigmas(ns, levels, sigma_rng);
    std::vector<TensorT<S>> clean, noisy;
    std::vector<int64_t> label_rows;
    for (int l = 0; l < levels; l++) {
        // continuous mode resamples trilinearly except the snapped last level
        auto patch = continuous_offsets && l < pyramid.top_level()
                         ? extract_patch_trilinear(video, coords[l], pyramid.patch)
                         : extract_patch(video, coords[l], pyramid.patch);
        Rng noise_rng = rng.fork("noise").fork(uint64_t(l));
        TensorT<S> x = patch.clone();
        for (auto& v : x.values()) v += S(double(sigmas[l]) * noise_rng.normal());
        clean.push_back(std::move(patch));
        noisy.push_back(std::move(x));
        Rng drop_rng = rng.fork("dropout").fork(uint64_t(l));
        label_rows.push_back(model.resolve_label(label, drop_rng, train_mode));
    }
    auto denoised = denoise_pyramid(model, noisy, coords, sigmas, ns.sigma_data, label_rows);
    JointLossResult<S> res;
    TensorT<S> total;
    for (int l = 0; l < levels; l++) {
        auto term = scalar_mul(mse_loss(denoised[l], clean[l]),
                               S(loss_weight(sigmas[l], ns.sigma_data)));
        res.per_level.push_back(double(term.item()));
        total = l == 0 ? term : add(total, term);
    }
    res.loss = scalar_mul(total, S(1) / S(levels));
    return res;
}

// ------------------------------------------------------------ training step

template <class S>
struct TrainStepStats {
    double loss = 0;
    std::vector<double> per_level;
    double grad_norm = 0;
};

// Data-parallel training step: each sample runs forward/backward on a
// private tape; gradients are averaged in sample order and applied once.
template <class S>
TrainStepStats<S> train_step(DenoiserT<S>& model, OptimizerStateT<S>& opt,
                             const PyramidSpec& pyramid, const NoiseSchedule& ns,
                             const std::vector<TensorT<S>>& videos,
                             const std::vector<int64_t>& labels, const Rng& step_rng, int threads,
                             bool continuous_offsets = false) {
    const size_t batch = videos.size();
    if (batch == 0 || labels.size() != batch)
        throw ConfigError("train_step: empty batch or label count mismatch");
    auto params = model.parameters();
    std::vector<std::vector<std::vector<S>>> grads(batch);
    std::vector<double> losses(batch, 0.0);
    std::vector<std::vector<double>> per_level(batch);
    parallel_for(int64_t(batch), threads, [&](int64_t i) {
        TapeT<S> tape;
        auto scope = tape.activate();
        auto res = joint_loss(model, pyramid, ns, videos[i], labels[i], step_rng.fork(uint64_t(i)),
                              /*train_mode=*/true, continuous_offsets);
        losses[size_t(i)] = double(res.loss.item());
        per_level[size_t(i)] = res.per_level;
        tape.backward(res.loss);
        auto& g = grads[size_t(i)];
        g.reserve(params.size());
        for (const auto& p : params)
            g.push_back(tape.has_grad(p) ? tape.grad(p).values() : std::vector<S>(p.numel(), S(0)));
    });
    // ordered reduction: mean over the batch
    std::vector<std::vector<S>> mean_grads;
    mean_grads.reserve(params.size());
    const S inv = S(1) / S(batch);
    for (size_t pi = 0; pi < params.size(); pi++) {
        std::vector<S> acc(grads[0][pi].size(), S(0));
        for (size_t b = 0; b < batch; b++)
            for (size_t j = 0; j < acc.size(); j++) acc[j] += grads[b][pi][j];
        for (auto& v : acc) v *= inv;
        mean_grads.push_back(std::move(acc));
    }
    TrainStepStats<S> stats;
    for (size_t b = 0; b < batch; b++) stats.loss += losses[b];
    stats.loss /= double(batch);
    stats.per_level.assign(per_level[0].size(), 0.0);
    for (size_t b = 0; b < batch; b++)
        for (size_t l = 0; l < stats.per_level.size(); l++)
            stats.per_level[l] += per_level[b][l] / double(batch);
    double gn = 0;
    for (const auto& g : mean_grads)
        for (S v : g) gn += double(v) * double(v);
    stats.grad_norm = std::sqrt(gn);
    optimizer_step(params, mean_grads, opt);
    return stats;
}

}  // namespace hpdm
