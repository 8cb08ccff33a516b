#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "hpdm/denoiser.hpp"
#include "hpdm/grad_check.hpp"

using namespace hpdm;

static DenoiserConfig tiny_config() {
    DenoiserConfig cfg;
    cfg.num_blocks = 2;
    cfg.token_dim = 8;
    cfg.latent_dim = 8;
    cfg.num_latents = 4;
    cfg.heads = 2;
    cfg.mlp_ratio = 2;
    cfg.tokenizer = {1, 2, 2};
    cfg.num_levels_per_block = {1, 2};
    cfg.num_classes = 2;
    cfg.levels = 2;
    cfg.channels = 2;
    cfg.patch = {2, 4, 4};
    cfg.noise_freqs = 2;
    return cfg;
}

static DenoiserConfig paper_shaped_config() {
    DenoiserConfig cfg;
    cfg.num_blocks = 6;
    cfg.token_dim = 16;
    cfg.latent_dim = 16;
    cfg.num_latents = 8;
    cfg.heads = 4;
    cfg.mlp_ratio = 2;
    cfg.tokenizer = {1, 4, 4};
    cfg.num_levels_per_block = {1, 1, 2, 2, 3, 3};
    cfg.num_classes = 4;
    cfg.levels = 3;
    cfg.channels = 3;
    cfg.patch = {4, 8, 8};
    cfg.noise_freqs = 4;
    return cfg;
}

TEST_CASE("tokenize shape contract") {
    DenoiserConfig cfg = paper_shaped_config();
    cfg.patch = {4, 8, 8};
    cfg.tokenizer = {1, 4, 4};
    Denoiser model(cfg, 1);
    CHECK(cfg.token_grid() == Dims3{4, 2, 2});
    CHECK(cfg.tokens() == 16);
    Rng rng(2);
    auto patch = Tensor::randn({3, 4, 8, 8}, rng);
    auto st = model.tokenize(patch, 1.0f, 0, PatchCoords{});
    CHECK(st.tokens.shape() == std::vector<int64_t>{16, 16});
    CHECK(st.latents.shape() == std::vector<int64_t>{8, 16});
}

TEST_CASE("tokenize of a zero patch is the input-independent embedding part") {
    Denoiser model(tiny_config(), 3);
    auto zero = Tensor::zeros({2, 2, 4, 4});
    auto st = model.tokenize(zero, 0.7f, 1, PatchCoords{});
    auto cond = model.conditioning(0.7f, 1);
    const int64_t d = model.cfg.token_dim;
    for (int64_t t = 0; t < model.cfg.tokens(); t++)
        for (int64_t j = 0; j < d; j++)
            CHECK(st.tokens.values()[t * d + j] ==
                  doctest::Approx(model.tok_b.values()[j] + cond.values()[j]).epsilon(1e-6));
}

TEST_CASE("unknown class ids are rejected") {
    Denoiser model(tiny_config(), 4);
    auto patch = Tensor::zeros({2, 2, 4, 4});
    CHECK_THROWS_AS(model.tokenize(patch, 1.0f, 99, PatchCoords{}), ConfigError);
    Rng rng(1);
    CHECK_THROWS_AS(model.resolve_label(-1, rng, true), ConfigError);
}

TEST_CASE("conditioning dropout replaces the label at the configured rate") {
    DenoiserConfig cfg = tiny_config();
    cfg.cond_dropout = 0.1f;
    Denoiser model(cfg, 5);
    Rng rng(6);
    int64_t nulls = 0;
    const int64_t n = 10000;
    for (int64_t i = 0; i < n; i++)
        if (model.resolve_label(0, rng, true) == cfg.num_classes) nulls++;
    const double sd = std::sqrt(n * 0.1 * 0.9);
    CHECK(std::fabs(double(nulls) - 0.1 * n) < 4 * sd);
    // never drops at inference
    for (int64_t i = 0; i < 100; i++) CHECK(model.resolve_label(1, rng, false) == 1);
}

TEST_CASE("fuse_context with no parents projects [tokens, 0, coords]") {
    DenoiserConfig cfg = tiny_config();
    Denoiser model(cfg, 7);
    Rng rng(8);
    const int64_t t = cfg.tokens(), d = cfg.token_dim;
    auto tokens = Tensor::randn({t, d}, rng);
    PatchCoords coords{};
    auto fused = model.fuse_context(0, tokens, coords, {});
    auto manual = linear(concat<float>({tokens, Tensor::zeros({t, d}), model.coord_tokens(coords)}, 1),
                         model.blocks[0].fuse_w, model.blocks[0].fuse_b);
    CHECK(fused.values() == manual.values());
    CHECK(model.blocks[0].fuse_w.dim(0) == 2 * d + 3);  // fused channel count is 2d+3
}

TEST_CASE("context of a constant parent lattice is that constant") {
    DenoiserConfig cfg = tiny_config();
    Denoiser model(cfg, 9);
    const int64_t t = cfg.tokens(), d = cfg.token_dim;
    // surgically make the fusion projection pick out the ctx block
    auto& fw = model.blocks[0].fuse_w.values();
    std::fill(fw.begin(), fw.end(), 0.0f);
    for (int64_t j = 0; j < d; j++) fw[(d + j) * d + j] = 1.0f;  // rows d..2d-1 = identity
    std::fill(model.blocks[0].fuse_b.values().begin(), model.blocks[0].fuse_b.values().end(), 0.f);

    ParentViewT<float> parent;
    parent.grid = Tensor::full({d, 2, 4, 4}, 2.5f);
    parent.coords = PatchCoords{};
    parent.grid_dims = {2, 4, 4};
    PatchCoords child;
    child.scale = 0.5f;
    child.offsets = {0.25f, 0.5f, 0.0f};
    auto fused = model.fuse_context(0, Tensor::zeros({t, d}), child, {parent});
    for (float v : fused.values()) CHECK(v == doctest::Approx(2.5f).epsilon(1e-6));
}

TEST_CASE("two-parent context equals the mean of direct grid samples") {
    DenoiserConfig cfg = tiny_config();
    cfg.levels = 3;
    cfg.num_levels_per_block = {1, 3};
    Denoiser model(cfg, 10);
    const int64_t t = cfg.tokens(), d = cfg.token_dim;
    auto& fw = model.blocks[1].fuse_w.values();
    std::fill(fw.begin(), fw.end(), 0.0f);
    for (int64_t j = 0; j < d; j++) fw[(d + j) * d + j] = 1.0f;
    std::fill(model.blocks[1].fuse_b.values().begin(), model.blocks[1].fuse_b.values().end(), 0.f);

    Rng rng(11);
    ParentViewT<float> p0, p1;
    p0.grid = Tensor::randn({d, 2, 2, 2}, rng);
    p0.coords = PatchCoords{};
    p0.grid_dims = {2, 2, 2};
    p1.grid = Tensor::randn({d, 2, 2, 2}, rng);
    p1.coords.scale = 0.5f;
    p1.coords.offsets = {0.5f, 0.25f, 0.25f};
    p1.grid_dims = {2, 2, 2};
    PatchCoords child;
    child.scale = 0.25f;
    child.offsets = {0.5f, 0.25f, 0.25f};

    auto fused = model.fuse_context(1, Tensor::zeros({t, d}), child, {p0, p1});
    auto q0 = fusion_queries<float>(child, p0.coords, cfg.token_grid(), p0.grid_dims);
    auto q1 = fusion_queries<float>(child, p1.coords, cfg.token_grid(), p1.grid_dims);
    auto s0 = grid_sample_3d(p0.grid, q0);
    auto s1 = grid_sample_3d(p1.grid, q1);
    for (int64_t i = 0; i < fused.numel(); i++)
        CHECK(fused.values()[i] ==
              doctest::Approx(0.5f * (s0.values()[i] + s1.values()[i])).epsilon(1e-5));
}

TEST_CASE("a fresh block is the identity on its token input") {
    Denoiser model(tiny_config(), 12);
    Rng rng(13);
    auto tokens = Tensor::randn({model.cfg.tokens(), model.cfg.token_dim}, rng);
    auto latents = Tensor::randn({model.cfg.num_latents, model.cfg.latent_dim}, rng);
    auto t2 = tokens;
    auto l2 = latents;
    model.rin_block(0, t2, l2);
    CHECK(t2.values() == tokens.values());     // write projections are zero at init
    CHECK(l2.values() != latents.values());    // latents do compute
    CHECK(t2.shape() == tokens.shape());
    CHECK(l2.shape() == latents.shape());
}

TEST_CASE("full RIN block passes finite differences") {
    DenoiserConfig cfg = tiny_config();
    DenoiserT<double> model(cfg, 14);
    // un-zero the write projections so the token path carries gradient
    for (auto& [name, t] : const_cast<std::vector<std::pair<std::string, TensorT<double>>>&>(
             model.registry())) {
        if (name.find(".write.o.w") != std::string::npos ||
            name.find(".tok_mlp.fc2.w") != std::string::npos) {
            Rng r = Rng(99).fork(name);
            for (auto& v : t.values()) v = 0.2 * r.normal();
        }
    }
    Rng rng(15);
    const int64_t t = 6, d = cfg.token_dim;
    auto latents0 = TensorT<double>::randn({cfg.num_latents, cfg.latent_dim}, rng);
    Rng wr = rng.fork("w");
    auto wt = TensorT<double>::randn({t, d}, wr);
    auto wl = TensorT<double>::randn({cfg.num_latents, cfg.latent_dim}, wr);
    auto f = [&](const TensorT<double>& tok) {
        TensorT<double> tk = tok;
        TensorT<double> lt = latents0;
        model.rin_block(0, tk, lt);
        return add(sum_all(mul(tk, wt)), sum_all(mul(lt, wl)));
    };
    double worst = 0;
    for (uint64_t seed = 1; seed <= 3; seed++) {
        Rng xr(seed);
        worst = std::max(worst, grad_check<double>(f, TensorT<double>::randn({t, d}, xr), 1e-4));
    }
    CHECK(worst <= 1e-3);
}

TEST_CASE("adaptive computation counts follow the load vector") {
    DenoiserConfig cfg = paper_shaped_config();
    // blocks processing each level
    std::vector<int> processed(cfg.levels, 0);
    for (int b = 0; b < cfg.num_blocks; b++)
        for (int l = 0; l < cfg.levels; l++)
            if (cfg.num_levels_per_block[b] > l) processed[l]++;
    CHECK(processed == std::vector<int>{6, 4, 2});
    CHECK(cfg.level_block_processings() == 12);
    DenoiserConfig flat = cfg;
    flat.num_levels_per_block = {3, 3, 3, 3, 3, 3};
    CHECK(flat.level_block_processings() == 18);
    CHECK(double(flat.level_block_processings()) / double(cfg.level_block_processings()) ==
          doctest::Approx(1.5));
}

static std::vector<LevelStateT<float>> make_states(const Denoiser& model, Rng& rng,
                                                   const PyramidSpec& spec,
                                                   float perturb_last = 0.0f) {
    auto coord_rng = rng.fork("coords");
    auto coords = sample_pyramid_coords(spec, coord_rng);
    std::vector<LevelStateT<float>> states;
    for (int l = 0; l < model.cfg.levels; l++) {
        Rng pr = rng.fork("patch").fork(uint64_t(l));
        auto patch = Tensor::randn({model.cfg.channels, model.cfg.patch[0], model.cfg.patch[1],
                                    model.cfg.patch[2]},
                                   pr);
        if (perturb_last != 0.0f && l == model.cfg.levels - 1)
            patch.values()[0] += perturb_last;
        states.push_back(model.tokenize(patch, 0.5f + 0.2f * float(l), 0, coords[l]));
    }
    return states;
}

TEST_CASE("coarse-to-fine causality is bitwise") {
    for (auto load : std::vector<std::vector<int>>{{1, 1, 2, 2, 3, 3},
                                                   {1, 2, 2, 3, 3, 3},
                                                   {3, 3, 3, 3, 3, 3},
                                                   {1, 1, 1, 1, 1, 3}}) {
        DenoiserConfig cfg = paper_shaped_config();
        cfg.num_levels_per_block = load;
        Denoiser model(cfg, 16);
        PyramidSpec spec;
        spec.levels = cfg.levels;
        spec.patch = cfg.patch;
        spec.full = {cfg.patch[0] << 2, cfg.patch[1] << 2, cfg.patch[2] << 2};
        Rng rng(17);
        auto base = model.forward_pyramid(make_states(model, rng, spec));
        Rng rng2(17);
        auto pert = model.forward_pyramid(make_states(model, rng2, spec, 10.0f));
        CHECK(base[0].values() == pert[0].values());
        CHECK(base[1].values() == pert[1].values());
        CHECK(base[2].values() != pert[2].values());
    }
}

TEST_CASE("truncated pyramids reproduce prefix levels bitwise") {
    DenoiserConfig cfg = paper_shaped_config();
    Denoiser full_model(cfg, 18);
    DenoiserConfig cfg2 = cfg;
    cfg2.levels = 2;
    for (auto& v : cfg2.num_levels_per_block) v = std::min(v, 2);
    Denoiser trunc_model(cfg2, 18);  // same seed -> identical shared weights

    PyramidSpec spec;
    spec.levels = cfg.levels;
    spec.patch = cfg.patch;
    spec.full = {cfg.patch[0] << 2, cfg.patch[1] << 2, cfg.patch[2] << 2};
    Rng rng(19);
    auto states = make_states(full_model, rng, spec);
    auto full_preds = full_model.forward_pyramid(states);
    std::vector<LevelStateT<float>> prefix(states.begin(), states.begin() + 2);
    auto trunc_preds = trunc_model.forward_pyramid(prefix);
    CHECK(full_preds[0].values() == trunc_preds[0].values());
    CHECK(full_preds[1].values() == trunc_preds[1].values());
}

TEST_CASE("detach_context stops gradients into parent activations only") {
    for (bool detach : {false, true}) {
        DenoiserConfig cfg = tiny_config();
        cfg.detach_context = detach;
        Denoiser model(cfg, 20);
        PyramidSpec spec;
        spec.levels = cfg.levels;
        spec.patch = cfg.patch;
        spec.full = {cfg.patch[0] << 1, cfg.patch[1] << 1, cfg.patch[2] << 1};
        Rng rng(21);
        auto coord_rng = rng.fork("c");
        auto coords = sample_pyramid_coords(spec, coord_rng);
        Rng pr = rng.fork("p");
        auto parent_patch = Tensor::randn({2, 2, 4, 4}, pr);
        parent_patch.set_requires_grad(true);
        auto child_patch = Tensor::randn({2, 2, 4, 4}, pr);
        Tape tape;
        {
            auto scope = tape.activate();
            std::vector<LevelStateT<float>> states;
            states.push_back(model.tokenize(parent_patch, 0.5f, 0, coords[0]));
            states.push_back(model.tokenize(child_patch, 0.3f, 0, coords[1]));
            auto preds = model.forward_pyramid(states);
            auto child_only_loss = mse_loss(preds[1], Tensor::zeros(preds[1].shape()));
            tape.backward(child_only_loss);
        }
        double gsum = 0;
        if (tape.has_grad(parent_patch)) {
            auto g = tape.grad(parent_patch);
            for (float v : g.values()) gsum += std::fabs(double(v));
        }
        if (detach)
            CHECK(gsum == 0.0);  // detached: the slot is never even touched
        else
            CHECK(gsum > 0.0);
    }
}

TEST_CASE("detach_context does not change the forward pass") {
    DenoiserConfig cfg = tiny_config();
    Denoiser a(cfg, 22);
    cfg.detach_context = true;
    Denoiser b(cfg, 22);
    PyramidSpec spec;
    spec.levels = cfg.levels;
    spec.patch = cfg.patch;
    spec.full = {cfg.patch[0] << 1, cfg.patch[1] << 1, cfg.patch[2] << 1};
    Rng rng(23);
    auto sa = make_states(a, rng, spec);
    Rng rng2(23);
    auto sb = make_states(b, rng2, spec);
    auto pa = a.forward_pyramid(sa);
    auto pb = b.forward_pyramid(sb);
    for (int l = 0; l < cfg.levels; l++) CHECK(pa[l].values() == pb[l].values());
}

TEST_CASE("registry matches the closed-form parameter count") {
    for (auto cfg : {tiny_config(), paper_shaped_config()}) {
        Denoiser model(cfg, 24);
        int64_t total = 0;
        for (const auto& [name, t] : model.registry()) total += t.numel();
        CHECK(total == cfg.parameter_count());
    }
}

TEST_CASE("config validation rejects bad load vectors") {
    DenoiserConfig cfg = tiny_config();
    cfg.num_levels_per_block = {2, 1};
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg.num_levels_per_block = {1, 1};
    CHECK_THROWS_AS(cfg.validate(), ConfigError);  // last != levels
    cfg.num_levels_per_block = {1};
    CHECK_THROWS_AS(cfg.validate(), ConfigError);  // wrong length
    cfg = tiny_config();
    cfg.heads = 3;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = tiny_config();
    cfg.tokenizer = {1, 3, 2};
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("detokenize inverts the token layout") {
    Denoiser model(tiny_config(), 25);
    Rng rng(26);
    auto patch = Tensor::randn({2, 2, 4, 4}, rng);
    auto st = model.tokenize(patch, 1.0f, 0, PatchCoords{});
    auto pred = model.detokenize(st.tokens);
    CHECK(pred.shape() == patch.shape());
}

TEST_CASE("single-parent ablation uses only the immediate parent") {
    DenoiserConfig cfg = tiny_config();
    cfg.levels = 3;
    cfg.num_levels_per_block = {1, 3};
    cfg.single_parent_context = true;
    Denoiser model(cfg, 27);
    const int64_t d = cfg.token_dim;
    auto& fw = model.blocks[1].fuse_w.values();
    std::fill(fw.begin(), fw.end(), 0.0f);
    for (int64_t j = 0; j < d; j++) fw[(d + j) * d + j] = 1.0f;
    std::fill(model.blocks[1].fuse_b.values().begin(), model.blocks[1].fuse_b.values().end(), 0.f);
    ParentViewT<float> far, near;
    far.grid = Tensor::full({d, 2, 2, 2}, -3.0f);
    far.coords = PatchCoords{};
    far.grid_dims = {2, 2, 2};
    near.grid = Tensor::full({d, 2, 2, 2}, 4.0f);
    near.coords.scale = 0.5f;
    near.coords.offsets = {0.25f, 0.25f, 0.25f};
    near.grid_dims = {2, 2, 2};
    PatchCoords child;
    child.scale = 0.25f;
    child.offsets = {0.375f, 0.375f, 0.375f};
    auto fused = model.fuse_context(1, Tensor::zeros({cfg.tokens(), d}), child, {far, near});
    for (float v : fused.values()) CHECK(v == doctest::Approx(4.0f).epsilon(1e-6));
}
