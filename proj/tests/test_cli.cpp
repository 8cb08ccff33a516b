#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>

#include "hpdm/checkpoint.hpp"
#include "hpdm/config.hpp"
#include "hpdm/data.hpp"
#include "hpdm/diffusion.hpp"
#include "hpdm/tiled.hpp"

using namespace hpdm;

static const char* kBaseConfig = R"(
seed = 7
out_dir = test_cli_out
threads = 1
pyramid.levels = 2
pyramid.patch_f = 2
pyramid.patch_h = 4
pyramid.patch_w = 4
pyramid.full_f = 4
pyramid.full_h = 8
pyramid.full_w = 8
model.blocks = 2
model.token_dim = 8
model.latent_dim = 8
model.latents = 4
model.heads = 2
model.mlp_ratio = 2
model.tokenizer_f = 1
model.tokenizer_h = 2
model.tokenizer_w = 2
model.load = 1,2
model.classes = 2
model.noise_freqs = 2
sampler.steps0 = 8
sampler.min_steps = 2
train.steps = 4
train.batch = 2
train.ckpt_every = 2
tiled.overlap = hw
)";

TEST_CASE("config: parse -> canonical -> parse is a fixed point") {
    auto cfg = parse_run_config(kBaseConfig);
    auto text = cfg.canonical_text();
    auto cfg2 = parse_run_config(text);
    CHECK(cfg2.canonical_text() == text);
    CHECK(cfg2.content_hash() == cfg.content_hash());
    CHECK(cfg.pyramid.levels == 2);
    CHECK(cfg.model.num_levels_per_block == std::vector<int>{1, 2});
    CHECK(cfg.data.num_classes == 2);       // mirrors model.classes
    CHECK(cfg.data.frames == 4);            // mirrors pyramid.full
    CHECK(cfg.data.seed == 7);              // defaults to the run seed
}

TEST_CASE("config hash is sensitive to every meaningful change") {
    auto base = parse_run_config(kBaseConfig);
    auto changed = parse_run_config(std::string(kBaseConfig) + "\nsampler.steps0 = 16\n");
    CHECK(base.content_hash() != changed.content_hash());
}

// Property: every invariant violation is rejected with a message naming the
// offending field.
TEST_CASE("config validation names the offending field") {
    struct Bad {
        const char* line;
        const char* expect;
    };
    const Bad cases[] = {
        {"pyramid.full_w = 64", "pyramid.full"},
        {"model.load = 1,2,2", "model.load"},
        {"model.load = 2,1", "model.load"},
        {"model.load = 1,1", "model.load"},
        {"model.load = 0,2", "model.load"},
        {"model.heads = 3", "model.heads"},
        {"model.tokenizer_h = 3", "model.tokenizer"},
        {"model.cond_dropout = 1.5", "model.cond_dropout"},
        {"schedule.sigma_min = 200", "schedule.sigma_min"},
        {"schedule.level_attenuation = 0", "schedule.level_attenuation"},
        {"sampler.steps0 = 0", "sampler.steps0"},
        {"sampler.rho = 0.5", "sampler.rho"},
        {"optim.lr = 0", "optim.lr"},
        {"optim.decay_steps = 50\noptim.warmup = 60", "optim.decay_steps"},
        {"optim.ema_decay = 1.0", "optim.ema_decay"},
        {"train.batch = 0", "train.batch"},
        {"train.ckpt_every = 0", "train.ckpt_every"},
        {"tiled.overlap = hx", "tiled.overlap"},
        {"tiled.cache_budget_mb = 0", "tiled.cache_budget_mb"},
        {"data.velocity_max = -1", "data.velocity_max"},
        {"model.blocks = 0", "model.blocks"},
        {"nonsense.key = 1", "unknown key"},
        {"threads = 0", "threads"},
    };
    for (const auto& c : cases) {
        const std::string text = std::string(kBaseConfig) + "\n" + c.line + "\n";
        try {
            parse_run_config(text);
            FAIL("expected rejection for: ", c.line);
        } catch (const ConfigError& e) {
            INFO("line: ", c.line, " -> ", e.what());
            CHECK(std::string(e.what()).find(c.expect) != std::string::npos);
        }
    }
}

TEST_CASE("half overlap on an odd patch axis is rejected with the field name") {
    std::string text = kBaseConfig;
    // make the f axis odd but keep the pyramid consistent
    auto patch_at = text.find("pyramid.patch_f = 2");
    text.replace(patch_at, 19, "pyramid.patch_f = 3");
    auto full_at = text.find("pyramid.full_f = 4");
    text.replace(full_at, 18, "pyramid.full_f = 6");
    auto tok = text.find("tiled.overlap = hw");
    text.replace(tok, 18, "tiled.overlap = fhw");
    try {
        parse_run_config(text);
        FAIL("expected rejection");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("tiled.overlap") != std::string::npos);
    }
}

static RunConfig small_cfg() { return parse_run_config(kBaseConfig); }

static void short_train(Denoiser& model, OptimizerState& opt, const RunConfig& cfg, int64_t from,
                        int64_t to) {
    for (int64_t step = from; step < to; step++) {
        std::vector<Tensor> videos;
        std::vector<int64_t> labels;
        for (int64_t b = 0; b < cfg.batch; b++) {
            auto rec = generate_video(cfg.data, uint64_t(step * cfg.batch + b));
            videos.push_back(std::move(rec.video));
            labels.push_back(rec.class_id);
        }
        train_step<float>(model, opt, cfg.pyramid, cfg.schedule, videos, labels,
                          Rng(cfg.seed).fork("train").fork(uint64_t(step)), 1);
    }
}

TEST_CASE("checkpoint: encode/decode round trip is bitwise") {
    auto cfg = small_cfg();
    Denoiser model(cfg.model, cfg.seed);
    OptimizerState opt;
    auto params = model.parameters();
    opt.init(params, cfg.optim);
    short_train(model, opt, cfg, 0, 3);
    auto ck = snapshot_checkpoint(model, opt, cfg);
    auto bytes = encode_checkpoint(ck);
    auto back = decode_checkpoint(bytes);
    CHECK(encode_checkpoint(back) == bytes);
    CHECK(back.step == 3);
    CHECK(back.config_hash == cfg.content_hash());
    CHECK(back.params.size() == model.registry().size());
}

TEST_CASE("checkpoint: single-byte corruption fails closed everywhere") {
    auto cfg = small_cfg();
    Denoiser model(cfg.model, cfg.seed);
    OptimizerState opt;
    auto params = model.parameters();
    opt.init(params, cfg.optim);
    auto bytes = encode_checkpoint(snapshot_checkpoint(model, opt, cfg));
    Rng rng(9);
    for (int trial = 0; trial < 50; trial++) {
        auto corrupt = bytes;
        const size_t at = size_t(rng.uniform_int(0, int64_t(bytes.size()) - 1));
        corrupt[at] ^= uint8_t(1 + rng.uniform_int(0, 254));
        CHECK_THROWS_AS(decode_checkpoint(corrupt), DataError);
    }
}

TEST_CASE("checkpoint restore rebuilds the exact model, raw or EMA") {
    auto cfg = small_cfg();
    Denoiser model(cfg.model, cfg.seed);
    OptimizerState opt;
    auto params = model.parameters();
    opt.init(params, cfg.optim);
    short_train(model, opt, cfg, 0, 3);
    auto ck = snapshot_checkpoint(model, opt, cfg);

    auto raw = restore_checkpoint(ck, /*use_ema=*/false);
    for (size_t i = 0; i < raw.model.registry().size(); i++)
        CHECK(raw.model.registry()[i].second.values() == model.registry()[i].second.values());

    auto ema = restore_checkpoint(ck, /*use_ema=*/true);
    for (size_t i = 0; i < ema.model.registry().size(); i++)
        CHECK(ema.model.registry()[i].second.values() == opt.ema[i].values());
    CHECK(raw.opt.step == 3);
}

TEST_CASE("resumed training equals uninterrupted training bitwise") {
    auto cfg = small_cfg();
    // uninterrupted: 8 steps
    Denoiser a(cfg.model, cfg.seed);
    OptimizerState oa;
    auto pa = a.parameters();
    oa.init(pa, cfg.optim);
    short_train(a, oa, cfg, 0, 8);
    // interrupted at 4, restored, continued
    Denoiser b(cfg.model, cfg.seed);
    OptimizerState ob;
    auto pb = b.parameters();
    ob.init(pb, cfg.optim);
    short_train(b, ob, cfg, 0, 4);
    auto restored = restore_checkpoint(snapshot_checkpoint(b, ob, cfg), false);
    short_train(restored.model, restored.opt, cfg, 4, 8);
    for (size_t i = 0; i < a.registry().size(); i++)
        CHECK(a.registry()[i].second.values() == restored.model.registry()[i].second.values());
    for (size_t i = 0; i < oa.ema.size(); i++)
        CHECK(oa.ema[i].values() == restored.opt.ema[i].values());
}

#ifdef HPDM_CLI_PATH
static int run_cli(const std::string& args) {
    const std::string cmd = std::string(HPDM_CLI_PATH) + " " + args + " >/dev/null 2>&1";
    const int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

TEST_CASE("cli exit codes follow the contract") {
    namespace fs = std::filesystem;
    fs::remove_all("test_cli_out");
    write_text_file("test_cli_bad.cfg", "model.blocks = 0\n");
    CHECK(run_cli("train --config test_cli_bad.cfg") == 2);
    CHECK(run_cli("train --config test_cli_missing.cfg") == 2);
    write_text_file("test_cli_garbage.bin", "not an artifact at all");
    CHECK(run_cli("inspect test_cli_garbage.bin") == 3);

    write_text_file("test_cli_run.cfg", kBaseConfig);
    CHECK(run_cli("train --config test_cli_run.cfg --steps 0") == 0);
    CHECK(fs::exists("test_cli_out/ckpt_step0.hpdmckpt"));
    CHECK(run_cli("inspect test_cli_out/ckpt_step0.hpdmckpt") == 0);

    // every artifact a subcommand produces is readable by inspect
    CHECK(run_cli("train --config test_cli_run.cfg --steps 2") == 0);
    CHECK(run_cli(
              "sample --checkpoint test_cli_out/ckpt_latest.hpdmckpt --class 1 --seed 5 "
              "--out test_cli_out/s1") == 0);
    CHECK(run_cli("inspect test_cli_out/s1/sample.hpdmvid") == 0);
    CHECK(run_cli("inspect test_cli_out/s1/manifest.txt") == 0);
    CHECK(run_cli("sample --checkpoint test_cli_out/ckpt_latest.hpdmckpt --class 7") == 2);

    // overlap variants on the same seed both succeed and record their plans
    CHECK(run_cli(
              "sample --checkpoint test_cli_out/ckpt_latest.hpdmckpt --class 0 --seed 4 "
              "--overlap none --out test_cli_out/ov_none") == 0);
    CHECK(run_cli(
              "sample --checkpoint test_cli_out/ckpt_latest.hpdmckpt --class 0 --seed 4 "
              "--overlap fhw --out test_cli_out/ov_fhw") == 0);
    {
        auto none = Manifest::parse(read_text_file("test_cli_out/ov_none/manifest.txt"));
        auto fhw = Manifest::parse(read_text_file("test_cli_out/ov_fhw/manifest.txt"));
        CHECK(none.levels[1].tiles.size() == 8);    // n^3 tiles
        CHECK(fhw.levels[1].tiles.size() == 27);    // (2n-1)^3 tiles
    }

    // corrupt checkpoint -> data error
    auto bytes = read_file("test_cli_out/ckpt_step0.hpdmckpt");
    bytes[bytes.size() / 3] ^= 0x08;
    write_file("test_cli_out/ckpt_bad.hpdmckpt", bytes);
    CHECK(run_cli("inspect test_cli_out/ckpt_bad.hpdmckpt") == 3);

    // both bench modes run on the same config
    CHECK(run_cli("bench --config test_cli_run.cfg --mode adaptive --reps 1") == 0);
    CHECK(run_cli("bench --config test_cli_run.cfg --mode patch-size --reps 1") == 0);
    CHECK(run_cli("bench --config test_cli_run.cfg --mode bogus") == 2);

    fs::remove_all("test_cli_out");
    fs::remove("test_cli_bad.cfg");
    fs::remove("test_cli_garbage.bin");
    fs::remove("test_cli_run.cfg");
}

TEST_CASE("cli determinism: same seed twice gives identical video files") {
    namespace fs = std::filesystem;
    fs::remove_all("test_cli_det");
    std::string cfg_text = kBaseConfig;
    auto at = cfg_text.find("out_dir = test_cli_out");
    cfg_text.replace(at, 22, "out_dir = test_cli_det");
    write_text_file("test_cli_det.cfg", cfg_text);
    REQUIRE(run_cli("train --config test_cli_det.cfg --steps 2 --deterministic") == 0);
    REQUIRE(run_cli(
                "sample --checkpoint test_cli_det/ckpt_latest.hpdmckpt --class 0 --seed 11 "
                "--out test_cli_det/a --deterministic") == 0);
    REQUIRE(run_cli(
                "sample --checkpoint test_cli_det/ckpt_latest.hpdmckpt --class 0 --seed 11 "
                "--out test_cli_det/b --deterministic") == 0);
    CHECK(read_file("test_cli_det/a/sample.hpdmvid") == read_file("test_cli_det/b/sample.hpdmvid"));
    // different seed -> different file
    REQUIRE(run_cli(
                "sample --checkpoint test_cli_det/ckpt_latest.hpdmckpt --class 0 --seed 12 "
                "--out test_cli_det/c --deterministic") == 0);
    CHECK(read_file("test_cli_det/a/sample.hpdmvid") != read_file("test_cli_det/c/sample.hpdmvid"));
    fs::remove_all("test_cli_det");
    fs::remove("test_cli_det.cfg");
}
#endif
