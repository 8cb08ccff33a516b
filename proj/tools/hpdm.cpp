// hpdm: train, sample, benchmark and inspect hierarchical patch diffusion
// runs driven by one flat config file.
//
// Exit codes: 0 success, 2 config error, 3 data error, 4 numeric abort.

#include <CLI11.hpp>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>

#include "hpdm/checkpoint.hpp"
#include "hpdm/config.hpp"
#include "hpdm/data.hpp"
#include "hpdm/diffusion.hpp"
#include "hpdm/tiled.hpp"

using namespace hpdm;

namespace {

int resolve_threads(const RunConfig& cfg, bool deterministic) {
    if (deterministic) return 1;
    if (const char* env = std::getenv("HPDM_THREADS")) {
        try {
            return std::max(1, std::stoi(env));
        } catch (...) {
            throw ConfigError("HPDM_THREADS: not an integer");
        }
    }
    return cfg.threads;
}

void dump_sigmas(const RunConfig& cfg, const std::string& path) {
    std::string text;
    for (int level = 0; level < cfg.pyramid.levels; level++) {
        auto grid = sigma_grid(cfg.sampler, cfg.schedule, level);
        text += strcat_all("level ", level);
        for (float s : grid) text += strcat_all(" ", detail::fmt_f32(s));
        text += "\n";
    }
    write_text_file(path, text);
}

// ------------------------------------------------------------------- train

int cmd_train(const std::string& config_path, int64_t steps_override, bool steps_set,
              const std::string& resume_path, int64_t log_every_override, bool deterministic,
              bool want_sigma_dump) {
    RunConfig cfg = load_run_config(config_path);
    if (deterministic) cfg.deterministic = true;
    const int threads = resolve_threads(cfg, cfg.deterministic);
    const int64_t total_steps = steps_set ? steps_override : cfg.train_steps;
    const int64_t log_every = log_every_override > 0 ? log_every_override : cfg.log_every;

    std::filesystem::create_directories(cfg.out_dir);
    if (want_sigma_dump) dump_sigmas(cfg, cfg.out_dir + "/sigmas.txt");

    Denoiser model(cfg.model, cfg.seed);
    OptimizerState opt;
    auto params = model.parameters();
    opt.init(params, cfg.optim);

    if (!resume_path.empty()) {
        auto restored = load_checkpoint(resume_path, /*use_ema=*/false);
        if (restored.config.content_hash() != cfg.content_hash())
            throw DataError("resume: checkpoint config hash does not match this config");
        model.load_values([&] {
            std::vector<std::vector<float>> vals;
            for (const auto& [name, t] : restored.model.registry()) vals.push_back(t.values());
            return vals;
        }());
        opt = std::move(restored.opt);
        std::printf("resumed from %s at step %lld\n", resume_path.c_str(),
                    static_cast<long long>(opt.step));
    }

    const std::string metrics_path = cfg.out_dir + "/metrics.csv";
    FILE* metrics = std::fopen(metrics_path.c_str(), opt.step > 0 ? "a" : "w");
    if (!metrics) throw DataError(strcat_all("cannot open ", metrics_path));
    if (opt.step == 0) {
        std::fprintf(metrics, "step,loss");
        for (int l = 0; l < cfg.pyramid.levels; l++) std::fprintf(metrics, ",loss_l%d", l);
        std::fprintf(metrics, ",lr,wall_s,videos_per_s\n");
    }

    const std::string latest = cfg.out_dir + "/ckpt_latest.hpdmckpt";
    auto save = [&](int64_t step) {
        const std::string path =
            strcat_all(cfg.out_dir, "/ckpt_step", step, ".hpdmckpt");
        save_checkpoint(path, model, opt, cfg);
        save_checkpoint(latest, model, opt, cfg);
        std::printf("checkpoint %s\n", path.c_str());
    };

    if (total_steps == 0 || opt.step >= total_steps) {
        save(opt.step);
        std::fclose(metrics);
        std::printf("no optimizer steps requested (step %lld of %lld)\n",
                    static_cast<long long>(opt.step), static_cast<long long>(total_steps));
        return 0;
    }

    const auto wall0 = std::chrono::steady_clock::now();
    auto window0 = wall0;
    int64_t window_videos = 0;
    try {
        while (opt.step < total_steps) {
            const int64_t step = opt.step;
            std::vector<Tensor> videos;
            std::vector<int64_t> labels;
            for (int64_t b = 0; b < cfg.batch; b++) {
                auto rec = generate_video(cfg.data, uint64_t(step * cfg.batch + b));
                videos.push_back(std::move(rec.video));
                labels.push_back(rec.class_id);
            }
            auto stats = train_step<float>(model, opt, cfg.pyramid, cfg.schedule, videos, labels,
                                           Rng(cfg.seed).fork("train").fork(uint64_t(step)),
                                           threads, cfg.continuous_offsets);
            window_videos += cfg.batch;
            if ((step + 1) % log_every == 0 || step + 1 == total_steps) {
                const auto now = std::chrono::steady_clock::now();
                const double wall = std::chrono::duration<double>(now - wall0).count();
                const double window = std::chrono::duration<double>(now - window0).count();
                const double vps = window > 0 ? double(window_videos) / window : 0.0;
                std::fprintf(metrics, "%lld,%.6f", static_cast<long long>(step + 1), stats.loss);
                for (double l : stats.per_level) std::fprintf(metrics, ",%.6f", l);
                std::fprintf(metrics, ",%.8f,%.3f,%.3f\n", double(lr_at_step(opt.cfg, step)),
                             wall, vps);
                std::fflush(metrics);
                std::printf("step %lld loss %.5f (%.1f videos/s)\n",
                            static_cast<long long>(step + 1), stats.loss, vps);
                window0 = now;
                window_videos = 0;
            }
            if ((step + 1) % cfg.ckpt_every == 0) save(step + 1);
        }
    } catch (const NumericError&) {
        std::fclose(metrics);
        throw;  // last-good checkpoint stays on disk
    }
    if (opt.step % cfg.ckpt_every != 0) save(opt.step);
    std::fclose(metrics);
    return 0;
}

// ------------------------------------------------------------------ sample

int cmd_sample(const std::string& ckpt_path, int64_t label, uint64_t seed, bool seed_set,
               std::string overlap, const std::string& out_dir, bool use_ema, bool use_cache,
               bool deterministic, bool want_sigma_dump) {
    auto restored = load_checkpoint(ckpt_path, use_ema);
    RunConfig cfg = restored.config;
    if (deterministic) cfg.deterministic = true;
    const int threads = resolve_threads(cfg, cfg.deterministic);
    if (!seed_set) seed = cfg.seed;
    if (overlap.empty()) overlap = cfg.overlap;
    cfg.overlap = overlap;
    cfg.validate();
    if (label < 0 || label >= cfg.model.num_classes)
        throw ConfigError(strcat_all("--class ", label, ": config has ",
                                     cfg.model.num_classes, " classes"));

    const std::string dir = out_dir.empty() ? cfg.out_dir + "/sample" : out_dir;
    std::filesystem::create_directories(dir);
    if (want_sigma_dump) dump_sigmas(cfg, dir + "/sigmas.txt");

    TiledSampler sampler(restored.model, cfg.pyramid, cfg.schedule, cfg.sampler,
                         cfg.overlap_axes(), threads, cfg.cache_budget_mb << 20,
                         dir + "/cache_spill", use_cache);
    auto res = sampler.generate(label, seed);
    res.manifest.config_hash = cfg.content_hash();
    res.manifest.overlap = overlap.empty() ? "none" : overlap;

    VideoRecord rec;
    rec.video = res.video;
    rec.class_id = label;
    write_video(dir + "/sample.hpdmvid", rec);
    export_frames(rec, dir + "/frames");
    write_text_file(dir + "/manifest.txt", res.manifest.serialize());
    std::printf("sampled class %lld seed %llu -> %s\n", static_cast<long long>(label),
                static_cast<unsigned long long>(seed), dir.c_str());
    std::printf("wall %.2f s, denoiser calls %lld, cache high water %.1f MiB, %lld spills\n",
                res.stats.wall_seconds, static_cast<long long>(res.stats.denoiser_calls),
                double(res.stats.cache_high_water) / (1 << 20),
                static_cast<long long>(res.stats.cache_spills));
    return 0;
}

// ------------------------------------------------------------------- bench

// Analytic MAC count of one level-block processing (fusion + RIN block).
int64_t level_block_macs(const DenoiserConfig& cfg) {
    const int64_t t = cfg.tokens(), d = cfg.token_dim, dl = cfg.latent_dim,
                  n = cfg.num_latents, m = cfg.mlp_ratio;
    int64_t macs = 0;
    macs += t * (2 * d + 3) * d;                         // fusion projection
    macs += 2 * t * d * dl + n * dl * dl + 2 * n * t * dl + n * dl * dl;   // read
    macs += 2 * (4 * n * dl * dl + 2 * n * n * dl + 2 * n * dl * m * dl);  // compute
    macs += t * d * dl + 2 * n * dl * dl + 2 * t * n * dl + t * dl * d;    // write
    macs += 2 * t * d * m * d;                                             // token mlp
    return macs;
}

double timed_joint_step(Denoiser& model, const RunConfig& cfg, const Tensor& video, int reps,
                        int threads) {
    OptimizerConfig oc = cfg.optim;
    oc.base_lr = 0.0f;  // timing only; keep the weights fixed
    oc.weight_decay = 0.0f;
    OptimizerState opt;
    auto params = model.parameters();
    opt.init(params, oc);
    std::vector<Tensor> videos{video};
    std::vector<int64_t> labels{0};
    // warmup
    train_step<float>(model, opt, cfg.pyramid, cfg.schedule, videos, labels, Rng(1), threads);
    const auto t0 = std::chrono::steady_clock::now();
    for (int r = 0; r < reps; r++)
        train_step<float>(model, opt, cfg.pyramid, cfg.schedule, videos, labels,
                          Rng(2).fork(uint64_t(r)), threads);
    const auto t1 = std::chrono::steady_clock::now();
    return std::chrono::duration<double>(t1 - t0).count() / reps;
}

int cmd_bench(const std::string& config_path, const std::string& mode, int reps) {
    RunConfig cfg = load_run_config(config_path);
    const int threads = resolve_threads(cfg, false);
    Rng rng(cfg.seed);
    auto video = Tensor::randn({3, cfg.pyramid.full[0], cfg.pyramid.full[1], cfg.pyramid.full[2]},
                               rng);
    if (mode == "adaptive" || mode == "no-adaptive") {
        RunConfig flat = cfg;
        flat.model.num_levels_per_block.assign(size_t(cfg.model.num_blocks), cfg.pyramid.levels);
        Denoiser adaptive_model(cfg.model, cfg.seed);
        Denoiser flat_model(flat.model, cfg.seed);
        const int64_t macs = level_block_macs(cfg.model);
        const int64_t la = cfg.model.level_block_processings();
        const int64_t lf = flat.model.level_block_processings();
        const double ta = timed_joint_step(adaptive_model, cfg, video, reps, threads);
        const double tf = timed_joint_step(flat_model, flat, video, reps, threads);
        std::printf("mode            level-blocks  block-GMAC   ms/step   speedup\n");
        std::printf("adaptive        %12lld  %10.3f  %8.2f  %8.2fx\n", static_cast<long long>(la),
                    double(la * macs) / 1e9, ta * 1e3, tf / ta);
        std::printf("flat            %12lld  %10.3f  %8.2f  %8.2fx\n", static_cast<long long>(lf),
                    double(lf * macs) / 1e9, tf * 1e3, 1.0);
        std::printf("analytic level-block ratio %.3f, measured speedup %.3f\n",
                    double(lf) / double(la), tf / ta);
    } else if (mode == "patch-size") {
        RunConfig half = cfg;
        for (int a = 0; a < 3; a++) {
            if (cfg.pyramid.patch[a] % 2 == 0 &&
                (cfg.pyramid.patch[a] / 2) % cfg.model.tokenizer[a] == 0) {
                half.pyramid.patch[a] /= 2;
                half.pyramid.full[a] /= 2;
            }
        }
        half.model.patch = half.pyramid.patch;
        half.data.frames = half.pyramid.full[0];
        half.data.height = half.pyramid.full[1];
        half.data.width = half.pyramid.full[2];
        Denoiser base_model(cfg.model, cfg.seed);
        Denoiser half_model(half.model, cfg.seed);
        auto half_video = Tensor::randn(
            {3, half.pyramid.full[0], half.pyramid.full[1], half.pyramid.full[2]}, rng);
        const double tb = timed_joint_step(base_model, cfg, video, reps, threads);
        const double th = timed_joint_step(half_model, half, half_video, reps, threads);
        std::printf("patch             voxels   ms/step   videos/s\n");
        std::printf("%2lldx%2lldx%2lld  %12lld  %8.2f  %9.2f\n",
                    static_cast<long long>(cfg.pyramid.patch[0]),
                    static_cast<long long>(cfg.pyramid.patch[1]),
                    static_cast<long long>(cfg.pyramid.patch[2]),
                    static_cast<long long>(volume(cfg.pyramid.patch)), tb * 1e3, 1.0 / tb);
        std::printf("%2lldx%2lldx%2lld  %12lld  %8.2f  %9.2f\n",
                    static_cast<long long>(half.pyramid.patch[0]),
                    static_cast<long long>(half.pyramid.patch[1]),
                    static_cast<long long>(half.pyramid.patch[2]),
                    static_cast<long long>(volume(half.pyramid.patch)), th * 1e3, 1.0 / th);
        std::printf("throughput ratio (small/large) %.3f\n", tb / th);
    } else {
        throw ConfigError(strcat_all("--mode ", mode, ": expected adaptive or patch-size"));
    }
    return 0;
}

// ----------------------------------------------------------------- inspect

int cmd_inspect(const std::string& path) {
    auto bytes = read_file(path);
    if (bytes.size() >= 8 && std::memcmp(bytes.data(), kCheckpointMagic, 8) == 0) {
        auto ck = decode_checkpoint(bytes);
        std::printf("checkpoint %s\n", path.c_str());
        std::printf("  parameters: %zu records, %lld values\n", ck.params.size(),
                    static_cast<long long>(ck.total_parameters()));
        std::printf("  step: %lld\n", static_cast<long long>(ck.step));
        std::printf("  config hash: %016llx\n",
                    static_cast<unsigned long long>(ck.config_hash));
        std::printf("  lr %.5g, warmup %lld, decay %lld, wd %.4g, ema %.5g\n",
                    double(ck.optim.base_lr), static_cast<long long>(ck.optim.warmup_steps),
                    static_cast<long long>(ck.optim.decay_steps), double(ck.optim.weight_decay),
                    double(ck.optim.ema_decay));
        auto cfg = parse_run_config(ck.config_text);
        std::printf("  pyramid %d levels, patch %lldx%lldx%lld, full %lldx%lldx%lld\n",
                    cfg.pyramid.levels, static_cast<long long>(cfg.pyramid.patch[0]),
                    static_cast<long long>(cfg.pyramid.patch[1]),
                    static_cast<long long>(cfg.pyramid.patch[2]),
                    static_cast<long long>(cfg.pyramid.full[0]),
                    static_cast<long long>(cfg.pyramid.full[1]),
                    static_cast<long long>(cfg.pyramid.full[2]));
        return 0;
    }
    if (bytes.size() >= 8 && std::memcmp(bytes.data(), kVideoMagic, 8) == 0) {
        auto rec = decode_video(bytes);
        float lo = rec.video.values()[0], hi = lo;
        for (float v : rec.video.values()) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        std::printf("video %s\n", path.c_str());
        std::printf("  class %lld, dims %lldx%lldx%lldx%lld, range [%.4f, %.4f]\n",
                    static_cast<long long>(rec.class_id),
                    static_cast<long long>(rec.video.dim(0)),
                    static_cast<long long>(rec.video.dim(1)),
                    static_cast<long long>(rec.video.dim(2)),
                    static_cast<long long>(rec.video.dim(3)), double(lo), double(hi));
        return 0;
    }
    const std::string text(bytes.begin(), bytes.end());
    if (text.rfind("hpdm-manifest v1", 0) == 0) {
        auto m = Manifest::parse(text);
        std::printf("manifest %s\n", path.c_str());
        std::printf("  config hash %016llx, seed %llu, label %lld, overlap %s\n",
                    static_cast<unsigned long long>(m.config_hash),
                    static_cast<unsigned long long>(m.seed), static_cast<long long>(m.label),
                    m.overlap.c_str());
        for (const auto& lv : m.levels) {
            int64_t ms = 0;
            for (int64_t v : lv.step_ms) ms += v;
            std::printf("  level %d: %zu steps, %zu tiles, sigma %.4g..%.4g, %lld ms\n", lv.level,
                        lv.sigmas.size() - 1, lv.tiles.size(), double(lv.sigmas.front()),
                        double(lv.sigmas[lv.sigmas.size() - 2]), static_cast<long long>(ms));
            if (lv.step_ms.size() + 1 != lv.sigmas.size())
                throw DataError(strcat_all("manifest: level ", lv.level, " has ",
                                           lv.step_ms.size(), " timings for ",
                                           lv.sigmas.size() - 1, " steps"));
        }
        return 0;
    }
    throw DataError(strcat_all(path, ": unrecognized artifact (not a checkpoint, video, or "
                                     "manifest)"));
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"hierarchical patch diffusion for video, desk scale"};
    app.require_subcommand(1);

    std::string config_path, resume_path, ckpt_path, out_dir, overlap, inspect_path;
    std::string bench_mode = "adaptive";
    int64_t steps = -1, log_every = 0, label = 0;
    uint64_t seed = 0;
    int reps = 3;
    bool deterministic = false, no_ema = false, no_cache = false, sigmas = false;

    auto* train = app.add_subcommand("train", "run the training loop");
    train->add_option("--config", config_path, "run config file")->required();
    train->add_option("--steps", steps, "stop after this many optimizer steps");
    train->add_option("--resume", resume_path, "checkpoint to resume from");
    train->add_option("--log-every", log_every, "metrics cadence");
    train->add_flag("--deterministic", deterministic, "single-threaded bitwise mode");
    train->add_flag("--dump-sigmas", sigmas, "write per-level sigma grids");

    auto* sample = app.add_subcommand("sample", "generate a video from a checkpoint");
    sample->add_option("--checkpoint", ckpt_path, "trained checkpoint")->required();
    sample->add_option("--class", label, "class label to condition on");
    auto* seed_opt = sample->add_option("--seed", seed, "sampling seed");
    sample->add_option("--overlap", overlap, "tile overlap axes: none or subset of fhw");
    sample->add_option("--out", out_dir, "output directory");
    sample->add_flag("--no-ema", no_ema, "use raw weights instead of EMA");
    sample->add_flag("--no-cache", no_cache, "recompute parent activations every step");
    sample->add_flag("--deterministic", deterministic, "single-threaded bitwise mode");
    sample->add_flag("--dump-sigmas", sigmas, "write per-level sigma grids");

    auto* bench = app.add_subcommand("bench", "measure training-step cost");
    bench->add_option("--config", config_path, "run config file")->required();
    bench->add_option("--mode", bench_mode, "adaptive | patch-size");
    bench->add_option("--reps", reps, "timed repetitions");

    auto* inspect = app.add_subcommand("inspect", "describe an artifact file");
    inspect->add_option("path", inspect_path, "checkpoint, video, or manifest")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (train->parsed())
            return cmd_train(config_path, steps, steps >= 0, resume_path, log_every,
                             deterministic, sigmas);
        if (sample->parsed())
            return cmd_sample(ckpt_path, label, seed, seed_opt->count() > 0, overlap, out_dir,
                              !no_ema, !no_cache, deterministic, sigmas);
        if (bench->parsed()) return cmd_bench(config_path, bench_mode, reps);
        if (inspect->parsed()) return cmd_inspect(inspect_path);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "numeric abort: %s\n", e.what());
        return 4;
    } catch (const DataError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 3;
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    }
    return 0;
}
