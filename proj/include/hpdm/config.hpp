#pragma once

#include <algorithm>
#include <cstdio>
#include <map>
#include <string>
#include <vector>

#include "hpdm/data.hpp"
#include "hpdm/denoiser.hpp"
#include "hpdm/diffusion.hpp"
#include "hpdm/optimizer.hpp"
#include "hpdm/patchgeom.hpp"

namespace hpdm {

// One declarative run description. On disk this is flat `section.key = value`
// text (comments with '#'); every run artifact embeds the content hash of the
// resolved config so checkpoints and manifests can be matched to it.
struct RunConfig {
    uint64_t seed = 1;
    std::string out_dir = "runs/out";
    int threads = 1;
    bool deterministic = false;

    PyramidSpec pyramid{3, {4, 8, 8}, {16, 32, 32}};
    bool continuous_offsets = false;
    DenoiserConfig model;
    NoiseSchedule schedule;
    SamplerConfig sampler;
    OptimizerConfig optim;

    int64_t train_steps = 2000;
    int64_t batch = 8;
    int64_t ckpt_every = 500;
    int64_t log_every = 10;

    SyntheticSpec data;
    std::string overlap = "hw";  // "none" or a subset of "fhw"
    int64_t cache_budget_mb = 256;

    std::array<bool, 3> overlap_axes() const {
        std::array<bool, 3> ax{false, false, false};
        if (overlap == "none" || overlap.empty()) return ax;
        for (char c : overlap) {
            if (c == 'f') ax[0] = true;
            else if (c == 'h') ax[1] = true;
            else if (c == 'w') ax[2] = true;
            else throw ConfigError(strcat_all("tiled.overlap: unknown axis '", c, "'"));
        }
        return ax;
    }

    void validate() const {
        if (threads < 1) throw ConfigError("threads: must be >= 1");
        if (batch < 1) throw ConfigError("train.batch: must be >= 1");
        if (train_steps < 0) throw ConfigError("train.steps: must be >= 0");
        if (ckpt_every < 1) throw ConfigError("train.ckpt_every: must be >= 1");
        if (log_every < 1) throw ConfigError("train.log_every: must be >= 1");
        if (cache_budget_mb < 1) throw ConfigError("tiled.cache_budget_mb: must be >= 1");
        if (optim.base_lr <= 0) throw ConfigError("optim.lr: must be positive");
        if (optim.warmup_steps < 0) throw ConfigError("optim.warmup: must be >= 0");
        if (optim.decay_steps <= optim.warmup_steps)
            throw ConfigError("optim.decay_steps: must exceed optim.warmup");
        if (!(optim.ema_decay > 0 && optim.ema_decay < 1))
            throw ConfigError("optim.ema_decay: must be in (0, 1)");
        pyramid.validate();
        model.validate();
        schedule.validate();
        sampler.validate();
        data.validate();
        if (model.levels != pyramid.levels)
            throw ConfigError(strcat_all("model.load: last entry must equal pyramid.levels = ",
                                         pyramid.levels));
        if (model.patch != pyramid.patch)
            throw ConfigError("pyramid.patch: model and pyramid patch dims diverge");
        if (data.frames != pyramid.full[0] || data.height != pyramid.full[1] ||
            data.width != pyramid.full[2])
            throw ConfigError(strcat_all("data.resolution: dataset ", data.frames, "x",
                                         data.height, "x", data.width,
                                         " must match pyramid.full"));
        if (data.num_classes != model.num_classes)
            throw ConfigError("data.classes: must match model.classes");
        if (model.channels != data.channels)
            throw ConfigError("model.channels: must match the 3-channel dataset");
        const auto ax = overlap_axes();
        for (int a = 0; a < 3; a++) {
            if (!ax[a]) continue;
            if (pyramid.patch[a] % 2 != 0)
                throw ConfigError(strcat_all("tiled.overlap: patch dim ", pyramid.patch[a],
                                             " on axis ", a, " is odd"));
            if ((pyramid.patch[a] / 2) % model.tokenizer[a] != 0)
                throw ConfigError(strcat_all("tiled.overlap: half-tile stride on axis ", a,
                                             " is not a whole number of tokens"));
        }
    }

    // Sorted canonical key=value rendering; the hash below is over this text.
    std::string canonical_text() const;

    uint64_t content_hash() const {
        const std::string text = canonical_text();
        uint64_t h = 0xcbf29ce484222325ull;
        for (char c : text) {
            h ^= static_cast<unsigned char>(c);
            h *= 0x100000001b3ull;
        }
        return h;
    }
};

namespace detail {

inline std::string fmt_f32(float v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.9g", double(v));
    return buf;
}

inline std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

}  // namespace detail

inline std::string RunConfig::canonical_text() const {
    std::map<std::string, std::string> kv;
    kv["seed"] = std::to_string(seed);
    kv["out_dir"] = out_dir;
    kv["threads"] = std::to_string(threads);
    kv["deterministic"] = deterministic ? "true" : "false";
    kv["pyramid.levels"] = std::to_string(pyramid.levels);
    kv["pyramid.patch_f"] = std::to_string(pyramid.patch[0]);
    kv["pyramid.patch_h"] = std::to_string(pyramid.patch[1]);
    kv["pyramid.patch_w"] = std::to_string(pyramid.patch[2]);
    kv["pyramid.full_f"] = std::to_string(pyramid.full[0]);
    kv["pyramid.full_h"] = std::to_string(pyramid.full[1]);
    kv["pyramid.full_w"] = std::to_string(pyramid.full[2]);
    kv["pyramid.continuous_offsets"] = continuous_offsets ? "true" : "false";
    kv["model.blocks"] = std::to_string(model.num_blocks);
    kv["model.token_dim"] = std::to_string(model.token_dim);
    kv["model.latent_dim"] = std::to_string(model.latent_dim);
    kv["model.latents"] = std::to_string(model.num_latents);
    kv["model.heads"] = std::to_string(model.heads);
    kv["model.mlp_ratio"] = std::to_string(model.mlp_ratio);
    kv["model.tokenizer_f"] = std::to_string(model.tokenizer[0]);
    kv["model.tokenizer_h"] = std::to_string(model.tokenizer[1]);
    kv["model.tokenizer_w"] = std::to_string(model.tokenizer[2]);
    {
        std::string s;
        for (size_t i = 0; i < model.num_levels_per_block.size(); i++) {
            if (i) s += ",";
            s += std::to_string(model.num_levels_per_block[i]);
        }
        kv["model.load"] = s;
    }
    kv["model.classes"] = std::to_string(model.num_classes);
    kv["model.cond_dropout"] = detail::fmt_f32(model.cond_dropout);
    kv["model.noise_freqs"] = std::to_string(model.noise_freqs);
    kv["model.detach_context"] = model.detach_context ? "true" : "false";
    kv["model.single_parent_context"] = model.single_parent_context ? "true" : "false";
    kv["schedule.p_mean"] = detail::fmt_f32(schedule.p_mean);
    kv["schedule.p_std"] = detail::fmt_f32(schedule.p_std);
    kv["schedule.sigma_min"] = detail::fmt_f32(schedule.sigma_min);
    kv["schedule.sigma_max"] = detail::fmt_f32(schedule.sigma_max);
    kv["schedule.sigma_data"] = detail::fmt_f32(schedule.sigma_data);
    kv["schedule.level_attenuation"] = detail::fmt_f32(schedule.level_attenuation);
    kv["sampler.steps0"] = std::to_string(sampler.steps0);
    kv["sampler.min_steps"] = std::to_string(sampler.min_steps);
    kv["sampler.rho"] = detail::fmt_f32(sampler.rho);
    kv["sampler.churn"] = detail::fmt_f32(sampler.churn);
    kv["sampler.second_order"] = sampler.second_order ? "true" : "false";
    kv["sampler.guidance"] = detail::fmt_f32(sampler.guidance);
    kv["optim.lr"] = detail::fmt_f32(optim.base_lr);
    kv["optim.warmup"] = std::to_string(optim.warmup_steps);
    kv["optim.decay_steps"] = std::to_string(optim.decay_steps);
    kv["optim.weight_decay"] = detail::fmt_f32(optim.weight_decay);
    kv["optim.beta1"] = detail::fmt_f32(optim.beta1);
    kv["optim.beta2"] = detail::fmt_f32(optim.beta2);
    kv["optim.eps"] = detail::fmt_f32(optim.eps);
    kv["optim.ema_decay"] = detail::fmt_f32(optim.ema_decay);
    kv["train.steps"] = std::to_string(train_steps);
    kv["train.batch"] = std::to_string(batch);
    kv["train.ckpt_every"] = std::to_string(ckpt_every);
    kv["train.log_every"] = std::to_string(log_every);
    kv["data.shapes"] = std::to_string(data.shapes_per_video);
    kv["data.velocity_max"] = std::to_string(data.velocity_max);
    kv["data.seed"] = std::to_string(data.seed);
    kv["tiled.overlap"] = overlap;
    kv["tiled.cache_budget_mb"] = std::to_string(cache_budget_mb);
    std::string out;
    for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
    return out;
}

// Parse flat `key = value` text. Unknown keys and malformed values are
// config errors naming the key.
inline RunConfig parse_run_config(const std::string& text) {
    RunConfig cfg;
    auto to_i64 = [](const std::string& k, const std::string& v) -> int64_t {
        try {
            size_t pos = 0;
            int64_t r = std::stoll(v, &pos);
            if (pos != v.size()) throw std::invalid_argument("trailing");
            return r;
        } catch (...) {
            throw ConfigError(strcat_all(k, ": expected an integer, got '", v, "'"));
        }
    };
    auto to_f32 = [](const std::string& k, const std::string& v) -> float {
        try {
            size_t pos = 0;
            float r = std::stof(v, &pos);
            if (pos != v.size()) throw std::invalid_argument("trailing");
            return r;
        } catch (...) {
            throw ConfigError(strcat_all(k, ": expected a number, got '", v, "'"));
        }
    };
    auto to_bool = [](const std::string& k, const std::string& v) -> bool {
        if (v == "true" || v == "1") return true;
        if (v == "false" || v == "0") return false;
        throw ConfigError(strcat_all(k, ": expected true/false, got '", v, "'"));
    };
    size_t start = 0;
    int lineno = 0;
    while (start <= text.size()) {
        size_t end = text.find('\n', start);
        if (end == std::string::npos) end = text.size();
        std::string line = detail::trim(text.substr(start, end - start));
        start = end + 1;
        lineno++;
        if (line.empty() || line[0] == '#') continue;
        size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(strcat_all("config line ", lineno, ": missing '=' in '", line, "'"));
        const std::string key = detail::trim(line.substr(0, eq));
        const std::string val = detail::trim(line.substr(eq + 1));
        if (key == "seed") cfg.seed = uint64_t(to_i64(key, val));
        else if (key == "out_dir") cfg.out_dir = val;
        else if (key == "threads") cfg.threads = int(to_i64(key, val));
        else if (key == "deterministic") cfg.deterministic = to_bool(key, val);
        else if (key == "pyramid.levels") cfg.pyramid.levels = int(to_i64(key, val));
        else if (key == "pyramid.patch_f") cfg.pyramid.patch[0] = to_i64(key, val);
        else if (key == "pyramid.patch_h") cfg.pyramid.patch[1] = to_i64(key, val);
        else if (key == "pyramid.patch_w") cfg.pyramid.patch[2] = to_i64(key, val);
        else if (key == "pyramid.full_f") cfg.pyramid.full[0] = to_i64(key, val);
        else if (key == "pyramid.full_h") cfg.pyramid.full[1] = to_i64(key, val);
        else if (key == "pyramid.full_w") cfg.pyramid.full[2] = to_i64(key, val);
        else if (key == "pyramid.continuous_offsets") cfg.continuous_offsets = to_bool(key, val);
        else if (key == "model.blocks") cfg.model.num_blocks = int(to_i64(key, val));
        else if (key == "model.token_dim") cfg.model.token_dim = to_i64(key, val);
        else if (key == "model.latent_dim") cfg.model.latent_dim = to_i64(key, val);
        else if (key == "model.latents") cfg.model.num_latents = to_i64(key, val);
        else if (key == "model.heads") cfg.model.heads = to_i64(key, val);
        else if (key == "model.mlp_ratio") cfg.model.mlp_ratio = to_i64(key, val);
        else if (key == "model.tokenizer_f") cfg.model.tokenizer[0] = to_i64(key, val);
        else if (key == "model.tokenizer_h") cfg.model.tokenizer[1] = to_i64(key, val);
        else if (key == "model.tokenizer_w") cfg.model.tokenizer[2] = to_i64(key, val);
        else if (key == "model.load") {
            cfg.model.num_levels_per_block.clear();
            size_t p = 0;
            while (p <= val.size()) {
                size_t c = val.find(',', p);
                if (c == std::string::npos) c = val.size();
                cfg.model.num_levels_per_block.push_back(
                    int(to_i64(key, detail::trim(val.substr(p, c - p)))));
                p = c + 1;
            }
        } else if (key == "model.classes") cfg.model.num_classes = to_i64(key, val);
        else if (key == "model.cond_dropout") cfg.model.cond_dropout = to_f32(key, val);
        else if (key == "model.noise_freqs") cfg.model.noise_freqs = to_i64(key, val);
        else if (key == "model.detach_context") cfg.model.detach_context = to_bool(key, val);
        else if (key == "model.single_parent_context")
            cfg.model.single_parent_context = to_bool(key, val);
        else if (key == "schedule.p_mean") cfg.schedule.p_mean = to_f32(key, val);
        else if (key == "schedule.p_std") cfg.schedule.p_std = to_f32(key, val);
        else if (key == "schedule.sigma_min") cfg.schedule.sigma_min = to_f32(key, val);
        else if (key == "schedule.sigma_max") cfg.schedule.sigma_max = to_f32(key, val);
        else if (key == "schedule.sigma_data") cfg.schedule.sigma_data = to_f32(key, val);
        else if (key == "schedule.level_attenuation")
            cfg.schedule.level_attenuation = to_f32(key, val);
        else if (key == "sampler.steps0") cfg.sampler.steps0 = int(to_i64(key, val));
        else if (key == "sampler.min_steps") cfg.sampler.min_steps = int(to_i64(key, val));
        else if (key == "sampler.rho") cfg.sampler.rho = to_f32(key, val);
        else if (key == "sampler.churn") cfg.sampler.churn = to_f32(key, val);
        else if (key == "sampler.second_order") cfg.sampler.second_order = to_bool(key, val);
        else if (key == "sampler.guidance") cfg.sampler.guidance = to_f32(key, val);
        else if (key == "optim.lr") cfg.optim.base_lr = to_f32(key, val);
        else if (key == "optim.warmup") cfg.optim.warmup_steps = to_i64(key, val);
        else if (key == "optim.decay_steps") cfg.optim.decay_steps = to_i64(key, val);
        else if (key == "optim.weight_decay") cfg.optim.weight_decay = to_f32(key, val);
        else if (key == "optim.beta1") cfg.optim.beta1 = to_f32(key, val);
        else if (key == "optim.beta2") cfg.optim.beta2 = to_f32(key, val);
        else if (key == "optim.eps") cfg.optim.eps = to_f32(key, val);
        else if (key == "optim.ema_decay") cfg.optim.ema_decay = to_f32(key, val);
        else if (key == "train.steps") cfg.train_steps = to_i64(key, val);
        else if (key == "train.batch") cfg.batch = to_i64(key, val);
        else if (key == "train.ckpt_every") cfg.ckpt_every = to_i64(key, val);
        else if (key == "train.log_every") cfg.log_every = to_i64(key, val);
        else if (key == "data.shapes") cfg.data.shapes_per_video = to_i64(key, val);
        else if (key == "data.velocity_max") cfg.data.velocity_max = to_i64(key, val);
        else if (key == "data.seed") cfg.data.seed = uint64_t(to_i64(key, val));
        else if (key == "tiled.overlap") cfg.overlap = val;
        else if (key == "tiled.cache_budget_mb") cfg.cache_budget_mb = to_i64(key, val);
        else throw ConfigError(strcat_all("config line ", lineno, ": unknown key '", key, "'"));
    }
    // derived couplings: the model mirrors the pyramid geometry, the dataset
    // mirrors the model's conditioning and the full resolution
    cfg.model.levels = cfg.pyramid.levels;
    cfg.model.patch = cfg.pyramid.patch;
    cfg.model.channels = 3;
    cfg.data.frames = cfg.pyramid.full[0];
    cfg.data.height = cfg.pyramid.full[1];
    cfg.data.width = cfg.pyramid.full[2];
    cfg.data.num_classes = cfg.model.num_classes;
    cfg.data.seed = cfg.data.seed ? cfg.data.seed : cfg.seed;
    cfg.validate();
    return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
    std::string text;
    try {
        text = read_text_file(path);
    } catch (const DataError& e) {
        throw ConfigError(e.what());
    }
    return parse_run_config(text);
}

}  // namespace hpdm
