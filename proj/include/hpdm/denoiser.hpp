#pragma once

#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "hpdm/ops.hpp"
#include "hpdm/patchgeom.hpp"
#include "hpdm/rng.hpp"

namespace hpdm {

// Joint multi-level denoiser: a ViT-like tokenizer, a stack of identical
// read-compute-write blocks over learnable latent tokens, context fusion
// before every block, and a linear detokenizer. All parameters are shared
// across pyramid levels; adaptive computation applies each block only to the
// first num_levels_per_block[b] levels.
struct DenoiserConfig {
    int num_blocks = 6;
    int64_t token_dim = 64;    // d
    int64_t latent_dim = 64;   // width of latents and of every attention
    int64_t num_latents = 32;
    int64_t heads = 4;
    int64_t mlp_ratio = 4;
    Dims3 tokenizer{1, 4, 4};
    std::vector<int> num_levels_per_block{1, 1, 2, 2, 3, 3};
    int64_t num_classes = 4;
    float cond_dropout = 0.1f;
    int levels = 3;  // L + 1
    int64_t channels = 3;
    Dims3 patch{4, 8, 8};
    int64_t noise_freqs = 8;  // Fourier pairs embedding log sigma
    bool detach_context = false;
    bool single_parent_context = false;  // ablation: fuse only the immediate parent

    Dims3 token_grid() const {
        return {patch[0] / tokenizer[0], patch[1] / tokenizer[1], patch[2] / tokenizer[2]};
    }
    int64_t tokens() const { return volume(token_grid()); }
    int64_t token_pixels() const { return channels * volume(tokenizer); }

    void validate() const {
        if (num_blocks < 1) throw ConfigError("model.blocks: must be >= 1");
        if (static_cast<int>(num_levels_per_block.size()) != num_blocks)
            throw ConfigError(strcat_all("model.load: has ", num_levels_per_block.size(),
                                         " entries, expected model.blocks = ", num_blocks));
        for (int b = 0; b < num_blocks; b++) {
            if (num_levels_per_block[b] < 1)
                throw ConfigError("model.load: entries must be >= 1");
            if (b > 0 && num_levels_per_block[b] < num_levels_per_block[b - 1])
                throw ConfigError("model.load: entries must be non-decreasing");
        }
        if (num_levels_per_block.back() != levels)
            throw ConfigError(strcat_all("model.load: last entry ", num_levels_per_block.back(),
                                         " must equal pyramid.levels = ", levels));
        for (int a = 0; a < 3; a++)
            if (tokenizer[a] < 1 || patch[a] % tokenizer[a] != 0)
                throw ConfigError(strcat_all("model.tokenizer: axis ", a, " size ", tokenizer[a],
                                             " does not divide patch dim ", patch[a]));
        if (token_dim < 1) throw ConfigError("model.token_dim: must be >= 1");
        if (latent_dim < 1) throw ConfigError("model.latent_dim: must be >= 1");
        if (num_latents < 1) throw ConfigError("model.latents: must be >= 1");
        if (heads < 1 || latent_dim % heads != 0)
            throw ConfigError(strcat_all("model.heads: ", heads, " does not divide latent_dim ",
                                         latent_dim));
        if (mlp_ratio < 1) throw ConfigError("model.mlp_ratio: must be >= 1");
        if (num_classes < 1) throw ConfigError("model.classes: must be >= 1");
        if (cond_dropout < 0.0f || cond_dropout >= 1.0f)
            throw ConfigError("model.cond_dropout: must be in [0, 1)");
        if (noise_freqs < 1) throw ConfigError("model.noise_freqs: must be >= 1");
    }

    // Total level-block processings for one joint forward (the adaptive
    // computation load). A flat stack would cost num_blocks * levels.
    int64_t level_block_processings() const {
        int64_t total = 0;
        for (int v : num_levels_per_block) total += v;
        return total;
    }

    // Closed-form parameter count; kept in sync with the registry by a test.
    int64_t parameter_count() const {
        const int64_t d = token_dim, dl = latent_dim, k = token_pixels(), m = mlp_ratio;
        int64_t n = 0;
        n += k * d + d;                      // tokenizer
        n += 2 * noise_freqs * d + d;        // noise embedding
        n += (num_classes + 1) * d;          // class embedding incl. null row
        n += num_latents * dl;               // latent init
        n += d * dl + dl;                    // latent conditioning
        n += d * k + k;                      // detokenizer
        int64_t blk = 0;
        blk += (2 * d + 3) * d + d;                          // fusion projection
        blk += 2 * d + 2 * dl;                               // read LNs
        blk += (dl * dl + dl) + 2 * (d * dl + dl) + (dl * dl + dl);  // read q,k,v,o
        blk += 2 * (2 * dl + 4 * (dl * dl + dl) + 2 * dl +   // compute: sa ln,qkvo, mlp ln
                    (dl * m * dl + m * dl) + (m * dl * dl + dl));    // compute: mlp
        blk += 2 * d + 2 * dl;                               // write LNs
        blk += (d * dl + dl) + 2 * (dl * dl + dl) + (dl * d + d);    // write q,k,v,o
        blk += 2 * d + (d * m * d + m * d) + (m * d * d + d);        // token mlp
        return n + blk * num_blocks;
    }
};

// Per-level activations travelling through the block stack.
template <class S>
struct LevelStateT {
    TensorT<S> tokens;   // [T, d]
    TensorT<S> latents;  // [num_latents, dl]
    PatchCoords coords;
    float sigma = 1.0f;
};

// A containing level's token lattice, as seen by context fusion.
template <class S>
struct ParentViewT {
    TensorT<S> grid;  // [d, gf, gh, gw]
    PatchCoords coords;
    Dims3 grid_dims;
};

template <class S>
using ContextProviderT = std::function<std::vector<ParentViewT<S>>(int block)>;

template <class S>
struct RinBlockParamsT {
    TensorT<S> fuse_w, fuse_b;
    TensorT<S> read_ln_tok_g, read_ln_tok_b, read_ln_lat_g, read_ln_lat_b;
    TensorT<S> read_q_w, read_q_b, read_k_w, read_k_b, read_v_w, read_v_b, read_o_w, read_o_b;
    struct Compute {
        TensorT<S> sa_ln_g, sa_ln_b;
        TensorT<S> sa_q_w, sa_q_b, sa_k_w, sa_k_b, sa_v_w, sa_v_b, sa_o_w, sa_o_b;
        TensorT<S> mlp_ln_g, mlp_ln_b;
        TensorT<S> mlp_w1, mlp_b1, mlp_w2, mlp_b2;
    };
    Compute compute[2];
    TensorT<S> write_ln_tok_g, write_ln_tok_b, write_ln_lat_g, write_ln_lat_b;
    TensorT<S> write_q_w, write_q_b, write_k_w, write_k_b, write_v_w, write_v_b;
    TensorT<S> write_o_w, write_o_b;  // zero-initialized: block starts as identity on tokens
    TensorT<S> tok_mlp_ln_g, tok_mlp_ln_b;
    TensorT<S> tok_mlp_w1, tok_mlp_b1, tok_mlp_w2, tok_mlp_b2;  // w2/b2 zero-initialized
};

template <class S>
class DenoiserT {
   public:
    DenoiserConfig cfg;

    TensorT<S> tok_w, tok_b;
    TensorT<S> noise_w, noise_b;
    TensorT<S> class_emb;  // rows: classes then the learned null embedding
    TensorT<S> latent_init;
    TensorT<S> latent_cond_w, latent_cond_b;
    TensorT<S> detok_w, detok_b;
    std::vector<RinBlockParamsT<S>> blocks;

    DenoiserT() = default;

    explicit DenoiserT(DenoiserConfig config, uint64_t seed) : cfg(std::move(config)) {
        cfg.validate();
        build(seed);
        build_index_maps();
    }

    const std::vector<std::pair<std::string, TensorT<S>>>& registry() const { return registry_; }

    std::vector<TensorT<S>> parameters() const {
        std::vector<TensorT<S>> out;
        for (const auto& [name, t] : registry_) out.push_back(t);
        return out;
    }

    // Replace parameter payload values in registry order (checkpoint load).
    void load_values(const std::vector<std::vector<S>>& values) {
        if (values.size() != registry_.size())
            throw DataError(strcat_all("denoiser: checkpoint has ", values.size(),
                                       " parameters, model expects ", registry_.size()));
        for (size_t i = 0; i < values.size(); i++) {
            auto& t = registry_[i].second;
            if (static_cast<int64_t>(values[i].size()) != t.numel())
                throw DataError(strcat_all("denoiser: parameter ", registry_[i].first,
                                           " size mismatch"));
            t.values() = values[i];
        }
    }

    // Conditioning vector for one (sigma, class) pair.
    TensorT<S> conditioning(float sigma, int64_t class_row) const {
        if (class_row < 0 || class_row > cfg.num_classes)
            throw ConfigError(strcat_all("denoiser: unknown class id ", class_row));
        const double c_noise = 0.25 * std::log(double(sigma));
        std::vector<S> feats(2 * cfg.noise_freqs);
        for (int64_t i = 0; i < cfg.noise_freqs; i++) {
            const double f = std::ldexp(1.0, int(i));
            feats[2 * i] = S(std::sin(6.283185307179586 * f * c_noise));
            feats[2 * i + 1] = S(std::cos(6.283185307179586 * f * c_noise));
        }
        auto fourier = TensorT<S>::from_values({2 * cfg.noise_freqs}, std::move(feats));
        auto noise_emb = linear(fourier, noise_w, noise_b);
        return add(noise_emb, embedding_row(class_emb, class_row));
    }

    // Resolve conditioning dropout: with probability cond_dropout a training
    // draw replaces the label with the learned null embedding row.
    int64_t resolve_label(int64_t label, Rng& rng, bool train) const {
        if (label < 0 || label >= cfg.num_classes)
            throw ConfigError(strcat_all("denoiser: unknown class id ", label));
        if (train && rng.uniform() < double(cfg.cond_dropout)) return cfg.num_classes;
        return label;
    }

    LevelStateT<S> tokenize(const TensorT<S>& patch, float sigma, int64_t class_row,
                            const PatchCoords& coords) const {
        if (patch.rank() != 4 || patch.dim(0) != cfg.channels || patch.dim(1) != cfg.patch[0] ||
            patch.dim(2) != cfg.patch[1] || patch.dim(3) != cfg.patch[2])
            throw ShapeError(strcat_all("tokenize: got ", shape_str(patch.shape()),
                                        ", expected [", cfg.channels, ",", cfg.patch[0], ",",
                                        cfg.patch[1], ",", cfg.patch[2], "]"));
        auto cond = conditioning(sigma, class_row);
        auto pixels = permute_gather(patch, patchify_idx_, {cfg.tokens(), cfg.token_pixels()});
        auto tokens = add_rowvec(linear(pixels, tok_w, tok_b), cond);
        auto latents = add_rowvec(latent_init, linear(cond, latent_cond_w, latent_cond_b));
        LevelStateT<S> st;
        st.tokens = std::move(tokens);
        st.latents = std::move(latents);
        st.coords = coords;
        st.sigma = sigma;
        return st;
    }

    // Token-major per-token global center coordinates, [T, 3].
    TensorT<S> coord_tokens(const PatchCoords& coords) const {
        const Dims3 g = cfg.token_grid();
        TensorT<S> out = TensorT<S>::zeros({cfg.tokens(), 3});
        auto& ov = out.values();
        int64_t at = 0;
        for (int64_t i = 0; i < g[0]; i++)
            for (int64_t j = 0; j < g[1]; j++)
                for (int64_t k = 0; k < g[2]; k++) {
                    ov[at * 3 + 0] = S(coords.offsets[0] +
                                       coords.scale * (double(i) + 0.5) / double(g[0]));
                    ov[at * 3 + 1] = S(coords.offsets[1] +
                                       coords.scale * (double(j) + 0.5) / double(g[1]));
                    ov[at * 3 + 2] = S(coords.offsets[2] +
                                       coords.scale * (double(k) + 0.5) / double(g[2]));
                    at++;
                }
        return out;
    }

    // [T, d] token stream -> [d, gf, gh, gw] lattice for grid sampling.
    TensorT<S> tokens_to_grid(const TensorT<S>& tokens) const {
        const Dims3 g = cfg.token_grid();
        return permute_gather(tokens, grid_idx_, {cfg.token_dim, g[0], g[1], g[2]});
    }

    // Deep context fusion before block b: trilinearly sample every parent's
    // token lattice at this patch's token centers, average, concatenate with
    // the token stream and raw coordinates (2d+3 channels), project to d.
    TensorT<S> fuse_context(int block, const TensorT<S>& tokens, const PatchCoords& coords,
                            const std::vector<ParentViewT<S>>& parents) const {
        const int64_t t = cfg.tokens();
        TensorT<S> ctx;
        if (parents.empty()) {
            ctx = TensorT<S>::zeros({t, cfg.token_dim});
        } else {
            size_t first = 0;
            if (cfg.single_parent_context && parents.size() > 1) first = parents.size() - 1;
            std::vector<TensorT<S>> sampled;
            for (size_t p = first; p < parents.size(); p++) {
                if (parents[p].grid.dim(0) != cfg.token_dim)
                    throw ShapeError(strcat_all("fuse_context: parent lattice has ",
                                                parents[p].grid.dim(0), " channels, expected ",
                                                cfg.token_dim));
                auto queries = fusion_queries<S>(coords, parents[p].coords, cfg.token_grid(),
                                                 parents[p].grid_dims);
                auto s = grid_sample_3d(parents[p].grid, queries);
                if (cfg.detach_context) s = detach(s);
                sampled.push_back(std::move(s));
            }
            ctx = sampled[0];
            for (size_t p = 1; p < sampled.size(); p++) ctx = add(ctx, sampled[p]);
            if (sampled.size() > 1) ctx = scalar_mul(ctx, S(1) / S(sampled.size()));
        }
        auto fused = concat<S>({tokens, ctx, coord_tokens(coords)}, 1);
        if (fused.dim(1) != 2 * cfg.token_dim + 3)
            throw ShapeError("fuse_context: fused width is not 2d+3");
        const auto& bp = blocks[block];
        return linear(fused, bp.fuse_w, bp.fuse_b);
    }

    // One read-compute-write block. Pre-norm residual branches; the write
    // projections are zero at init, so a fresh block is the identity on its
    // token input.
    void rin_block(int block, TensorT<S>& tokens, TensorT<S>& latents) const {
        const auto& bp = blocks[block];
        {
            auto q = linear(layer_norm(latents, bp.read_ln_lat_g, bp.read_ln_lat_b), bp.read_q_w,
                            bp.read_q_b);
            auto tok_n = layer_norm(tokens, bp.read_ln_tok_g, bp.read_ln_tok_b);
            auto k = linear(tok_n, bp.read_k_w, bp.read_k_b);
            auto v = linear(tok_n, bp.read_v_w, bp.read_v_b);
            auto attn = scaled_dot_attention(q, k, v, cfg.heads);
            latents = add(latents, linear(attn, bp.read_o_w, bp.read_o_b));
        }
        for (const auto& cp : bp.compute) {
            auto x = layer_norm(latents, cp.sa_ln_g, cp.sa_ln_b);
            auto attn = scaled_dot_attention(linear(x, cp.sa_q_w, cp.sa_q_b),
                                             linear(x, cp.sa_k_w, cp.sa_k_b),
                                             linear(x, cp.sa_v_w, cp.sa_v_b), cfg.heads);
            latents = add(latents, linear(attn, cp.sa_o_w, cp.sa_o_b));
            auto y = layer_norm(latents, cp.mlp_ln_g, cp.mlp_ln_b);
            latents = add(latents, linear(gelu(linear(y, cp.mlp_w1, cp.mlp_b1)), cp.mlp_w2,
                                          cp.mlp_b2));
        }
        {
            auto q = linear(layer_norm(tokens, bp.write_ln_tok_g, bp.write_ln_tok_b), bp.write_q_w,
                            bp.write_q_b);
            auto lat_n = layer_norm(latents, bp.write_ln_lat_g, bp.write_ln_lat_b);
            auto k = linear(lat_n, bp.write_k_w, bp.write_k_b);
            auto v = linear(lat_n, bp.write_v_w, bp.write_v_b);
            auto attn = scaled_dot_attention(q, k, v, cfg.heads);
            tokens = add(tokens, linear(attn, bp.write_o_w, bp.write_o_b));
            auto z = layer_norm(tokens, bp.tok_mlp_ln_g, bp.tok_mlp_ln_b);
            tokens = add(tokens, linear(gelu(linear(z, bp.tok_mlp_w1, bp.tok_mlp_b1)),
                                        bp.tok_mlp_w2, bp.tok_mlp_b2));
        }
    }

    TensorT<S> detokenize(const TensorT<S>& tokens) const {
        auto pixels = linear(tokens, detok_w, detok_b);
        return permute_gather(pixels, unpatchify_idx_,
                              {cfg.channels, cfg.patch[0], cfg.patch[1], cfg.patch[2]});
    }

    // Joint forward over the pyramid. Blocks run in order; block b processes
    // only levels below num_levels_per_block[b], fusing each against the
    // block-input token lattices of its containing levels. Information flows
    // strictly coarse to fine.
    std::vector<TensorT<S>> forward_pyramid(std::vector<LevelStateT<S>> states) const {
        if (static_cast<int>(states.size()) != cfg.levels)
            throw ShapeError(strcat_all("forward_pyramid: got ", states.size(),
                                        " levels, expected ", cfg.levels));
        for (int b = 0; b < cfg.num_blocks; b++) {
            const int nlvl = cfg.num_levels_per_block[b];
            std::vector<ParentViewT<S>> views;
            for (int k = 0; k + 1 < nlvl; k++) {
                ParentViewT<S> v;
                v.grid = tokens_to_grid(states[k].tokens);
                v.coords = states[k].coords;
                v.grid_dims = cfg.token_grid();
                views.push_back(std::move(v));
            }
            std::vector<LevelStateT<S>> next = states;
            for (int l = 0; l < nlvl; l++) {
                std::vector<ParentViewT<S>> parents(views.begin(), views.begin() + l);
                auto fused = fuse_context(b, states[l].tokens, states[l].coords, parents);
                auto latents = states[l].latents;
                rin_block(b, fused, latents);
                next[l].tokens = std::move(fused);
                next[l].latents = std::move(latents);
            }
            states = std::move(next);
        }
        std::vector<TensorT<S>> preds;
        for (const auto& st : states) preds.push_back(detokenize(st.tokens));
        return preds;
    }

    // Single-level path for tiled inference: runs the block suffix that
    // processes `level`, fusing against provider-supplied parent lattices.
    // `recorder`, when set, receives each block's input token stream (the
    // activations a later level's fusion would read).
    TensorT<S> forward_level(int level, LevelStateT<S> state, const ContextProviderT<S>& provider,
                             const std::function<void(int, const TensorT<S>&)>& recorder = {}) const {
        for (int b = 0; b < cfg.num_blocks; b++) {
            if (cfg.num_levels_per_block[b] <= level) continue;
            if (recorder) recorder(b, state.tokens);
            std::vector<ParentViewT<S>> parents =
                level > 0 ? provider(b) : std::vector<ParentViewT<S>>{};
            if (level > 0 && static_cast<int>(parents.size()) != level)
                throw ShapeError(strcat_all("forward_level: provider returned ", parents.size(),
                                            " parents for level ", level));
            auto fused = fuse_context(b, state.tokens, state.coords, parents);
            rin_block(b, fused, state.latents);
            state.tokens = std::move(fused);
        }
        return detokenize(state.tokens);
    }

   private:
    std::vector<std::pair<std::string, TensorT<S>>> registry_;
    std::shared_ptr<const std::vector<int64_t>> patchify_idx_;
    std::shared_ptr<const std::vector<int64_t>> unpatchify_idx_;
    std::shared_ptr<const std::vector<int64_t>> grid_idx_;

    TensorT<S> make_param(const std::string& name, std::vector<int64_t> shape, uint64_t seed,
                          double scale) {
        Rng rng = Rng(seed).fork("model").fork(name);
        TensorT<S> t;
        if (scale == 0.0) {
            t = TensorT<S>::zeros(std::move(shape));
        } else {
            t = TensorT<S>::randn(std::move(shape), rng, S(scale));
        }
        t.set_requires_grad(true);
        registry_.emplace_back(name, t);
        return t;
    }

    TensorT<S> make_const_param(const std::string& name, std::vector<int64_t> shape, S value) {
        TensorT<S> t = TensorT<S>::full(std::move(shape), value);
        t.set_requires_grad(true);
        registry_.emplace_back(name, t);
        return t;
    }

    void make_ln(const std::string& prefix, int64_t dim, TensorT<S>& g, TensorT<S>& b) {
        g = make_const_param(prefix + ".g", {dim}, S(1));
        b = make_const_param(prefix + ".b", {dim}, S(0));
    }

    void make_linear(const std::string& prefix, int64_t in, int64_t out, uint64_t seed,
                     TensorT<S>& w, TensorT<S>& b, bool zero = false) {
        const double scale = zero ? 0.0 : 1.0 / std::sqrt(double(in));
        w = make_param(prefix + ".w", {in, out}, seed, scale);
        b = make_const_param(prefix + ".b", {out}, S(0));
    }

    void build(uint64_t seed) {
        const int64_t d = cfg.token_dim, dl = cfg.latent_dim, k = cfg.token_pixels();
        make_linear("tok", k, d, seed, tok_w, tok_b);
        make_linear("noise", 2 * cfg.noise_freqs, d, seed, noise_w, noise_b);
        class_emb = make_param("class.emb", {cfg.num_classes + 1, d}, seed, 0.02);
        latent_init = make_param("latent.init", {cfg.num_latents, dl}, seed,
                                 1.0 / std::sqrt(double(dl)));
        make_linear("latent.cond", d, dl, seed, latent_cond_w, latent_cond_b);
        make_linear("detok", d, k, seed, detok_w, detok_b);
        blocks.resize(cfg.num_blocks);
        for (int b = 0; b < cfg.num_blocks; b++) {
            auto& bp = blocks[b];
            const std::string p = strcat_all("block", b);
            make_linear(p + ".fuse", 2 * d + 3, d, seed, bp.fuse_w, bp.fuse_b);
            make_ln(p + ".read.ln_tok", d, bp.read_ln_tok_g, bp.read_ln_tok_b);
            make_ln(p + ".read.ln_lat", dl, bp.read_ln_lat_g, bp.read_ln_lat_b);
            make_linear(p + ".read.q", dl, dl, seed, bp.read_q_w, bp.read_q_b);
            make_linear(p + ".read.k", d, dl, seed, bp.read_k_w, bp.read_k_b);
            make_linear(p + ".read.v", d, dl, seed, bp.read_v_w, bp.read_v_b);
            make_linear(p + ".read.o", dl, dl, seed, bp.read_o_w, bp.read_o_b);
            for (int c = 0; c < 2; c++) {
                auto& cp = bp.compute[c];
                const std::string q = strcat_all(p, ".c", c);
                make_ln(q + ".sa.ln", dl, cp.sa_ln_g, cp.sa_ln_b);
                make_linear(q + ".sa.q", dl, dl, seed, cp.sa_q_w, cp.sa_q_b);
                make_linear(q + ".sa.k", dl, dl, seed, cp.sa_k_w, cp.sa_k_b);
                make_linear(q + ".sa.v", dl, dl, seed, cp.sa_v_w, cp.sa_v_b);
                make_linear(q + ".sa.o", dl, dl, seed, cp.sa_o_w, cp.sa_o_b);
                make_ln(q + ".mlp.ln", dl, cp.mlp_ln_g, cp.mlp_ln_b);
                make_linear(q + ".mlp.fc1", dl, cfg.mlp_ratio * dl, seed, cp.mlp_w1, cp.mlp_b1);
                make_linear(q + ".mlp.fc2", cfg.mlp_ratio * dl, dl, seed, cp.mlp_w2, cp.mlp_b2);
            }
            make_ln(p + ".write.ln_tok", d, bp.write_ln_tok_g, bp.write_ln_tok_b);
            make_ln(p + ".write.ln_lat", dl, bp.write_ln_lat_g, bp.write_ln_lat_b);
            make_linear(p + ".write.q", d, dl, seed, bp.write_q_w, bp.write_q_b);
            make_linear(p + ".write.k", dl, dl, seed, bp.write_k_w, bp.write_k_b);
            make_linear(p + ".write.v", dl, dl, seed, bp.write_v_w, bp.write_v_b);
            make_linear(p + ".write.o", dl, d, seed, bp.write_o_w, bp.write_o_b, /*zero=*/true);
            make_ln(p + ".tok_mlp.ln", d, bp.tok_mlp_ln_g, bp.tok_mlp_ln_b);
            make_linear(p + ".tok_mlp.fc1", d, cfg.mlp_ratio * d, seed, bp.tok_mlp_w1,
                        bp.tok_mlp_b1);
            make_linear(p + ".tok_mlp.fc2", cfg.mlp_ratio * d, d, seed, bp.tok_mlp_w2,
                        bp.tok_mlp_b2, /*zero=*/true);
        }
    }

    void build_index_maps() {
        const Dims3 g = cfg.token_grid();
        const Dims3 tz = cfg.tokenizer;
        const Dims3 r = cfg.patch;
        const int64_t C = cfg.channels;
        auto patchify = std::make_shared<std::vector<int64_t>>();
        patchify->reserve(cfg.tokens() * cfg.token_pixels());
        for (int64_t a = 0; a < g[0]; a++)
            for (int64_t b = 0; b < g[1]; b++)
                for (int64_t c = 0; c < g[2]; c++)
                    for (int64_t ch = 0; ch < C; ch++)
                        for (int64_t df = 0; df < tz[0]; df++)
                            for (int64_t dh = 0; dh < tz[1]; dh++)
                                for (int64_t dw = 0; dw < tz[2]; dw++)
                                    patchify->push_back(
                                        ((ch * r[0] + a * tz[0] + df) * r[1] + b * tz[1] + dh) *
                                            r[2] +
                                        c * tz[2] + dw);
        patchify_idx_ = patchify;
        // inverse permutation: video voxel <- (token, token-pixel) position
        auto unpatchify = std::make_shared<std::vector<int64_t>>(patchify->size());
        for (size_t i = 0; i < patchify->size(); i++) (*unpatchify)[(*patchify)[i]] = int64_t(i);
        unpatchify_idx_ = unpatchify;
        auto grid = std::make_shared<std::vector<int64_t>>();
        grid->reserve(cfg.token_dim * cfg.tokens());
        const int64_t t = cfg.tokens();
        for (int64_t ch = 0; ch < cfg.token_dim; ch++)
            for (int64_t tok = 0; tok < t; tok++) grid->push_back(tok * cfg.token_dim + ch);
        grid_idx_ = grid;
    }
};

using Denoiser = DenoiserT<float>;

}  // namespace hpdm
