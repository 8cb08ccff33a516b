#pragma once

#include <chrono>
#include <cinttypes>
#include <map>
#include <mutex>
#include <string>
#include <vector>

#include "hpdm/checkpoint.hpp"
#include "hpdm/config.hpp"
#include "hpdm/diffusion.hpp"
#include "hpdm/threadpool.hpp"

namespace hpdm {

// ------------------------------------------------------------ pixel canvas

inline Tensor crop_canvas(const Tensor& canvas, const PatchCoords& tile, const Dims3& tile_dims) {
    return extract_patch(canvas, tile, tile_dims);  // tile factors are 1: pure crop
}

// Average overlapping tile predictions into one canvas (x0-form fusion).
inline Tensor fuse_tile_predictions(const std::vector<Tensor>& preds, const TilePlan& plan,
                                    int64_t channels) {
    if (preds.size() != plan.tiles.size())
        throw ShapeError(strcat_all("fuse_tile_predictions: ", preds.size(), " predictions for ",
                                    plan.tiles.size(), " tiles"));
    const Dims3& cv = plan.canvas;
    Tensor out = Tensor::zeros({channels, cv[0], cv[1], cv[2]});
    auto& ov = out.values();
    const int64_t plane = cv[0] * cv[1] * cv[2];
    for (size_t t = 0; t < preds.size(); t++) {
        const auto& tile = plan.tiles[t];
        Dims3 s;
        for (int a = 0; a < 3; a++)
            s[a] = llround(double(tile.offsets[a]) * double(cv[a]));
        const auto& pv = preds[t].values();
        for (int64_t c = 0; c < channels; c++)
            for (int64_t i = 0; i < plan.tile[0]; i++)
                for (int64_t j = 0; j < plan.tile[1]; j++)
                    for (int64_t k = 0; k < plan.tile[2]; k++)
                        ov[c * plane + ((s[0] + i) * cv[1] + s[1] + j) * cv[2] + s[2] + k] +=
                            pv[((c * plan.tile[0] + i) * plan.tile[1] + j) * plan.tile[2] + k];
    }
    for (int64_t c = 0; c < channels; c++)
        for (int64_t v = 0; v < plane; v++) {
            const int32_t cov = plan.coverage[v];
            if (cov < 1) throw NumericError("fuse_tile_predictions: uncovered voxel");
            ov[c * plane + v] /= float(cov);
        }
    return out;
}

// --------------------------------------------------------- activation cache

// Stitched block-input token canvases of completed levels, keyed by
// (level, block). Holds at most `budget` bytes resident; least-recently-used
// canvases spill to disk ("HPDMCACH" files with a CRC) and reload on demand.
class ActivationCache {
   public:
    ActivationCache() = default;
    ActivationCache(int64_t budget_bytes, std::string spill_dir)
        : budget_(budget_bytes), spill_dir_(std::move(spill_dir)) {}

    bool has(int level, int block) const {
        return entries_.count({level, block}) != 0;
    }

    void store(int level, int block, Tensor canvas, const Dims3& grid_dims) {
        std::lock_guard<std::mutex> lock(mutex_);
        const int64_t bytes = canvas.numel() * int64_t(sizeof(float));
        make_room(bytes);
        Entry e;
        e.canvas = std::move(canvas);
        e.grid_dims = grid_dims;
        e.resident = true;
        e.bytes = bytes;
        e.tick = ++tick_;
        entries_[{level, block}] = std::move(e);
        resident_ += bytes;
        high_water_ = std::max(high_water_, resident_);
    }

    // Fetch a canvas (reloading a spilled one). The returned handle stays
    // valid even if the cache evicts its copy afterwards.
    Tensor fetch(int level, int block, Dims3* grid_dims = nullptr) {
        std::lock_guard<std::mutex> lock(mutex_);
        auto it = entries_.find({level, block});
        if (it == entries_.end())
            throw DataError(strcat_all("activation cache: query before store for level ", level,
                                       ", block ", block));
        Entry& e = it->second;
        e.tick = ++tick_;
        if (!e.resident) {
            make_room(e.bytes);
            e.canvas = load_spill(e.spill_path, level, block, e.grid_dims);
            e.resident = true;
            resident_ += e.bytes;
            high_water_ = std::max(high_water_, resident_);
            reloads_++;
        }
        if (grid_dims) *grid_dims = e.grid_dims;
        return e.canvas;
    }

    Tensor query(int level, int block, const Tensor& queries) {
        return grid_sample_3d(fetch(level, block), queries);
    }

    void drop_below_level(int level) {
        std::lock_guard<std::mutex> lock(mutex_);
        for (auto it = entries_.begin(); it != entries_.end();) {
            if (it->first.first >= level) {
                if (it->second.resident) resident_ -= it->second.bytes;
                it = entries_.erase(it);
            } else {
                ++it;
            }
        }
    }

    int64_t high_water_bytes() const { return high_water_; }
    int64_t resident_bytes() const { return resident_; }
    int64_t spill_count() const { return spills_; }
    int64_t reload_count() const { return reloads_; }

   private:
    struct Entry {
        Tensor canvas;
        Dims3 grid_dims{1, 1, 1};
        bool resident = false;
        std::string spill_path;
        int64_t bytes = 0;
        uint64_t tick = 0;
    };

    // Evict least-recently-used canvases until `incoming` fits in budget.
    void make_room(int64_t incoming) {
        while (resident_ + incoming > budget_) {
            std::pair<int, int> victim{-1, -1};
            uint64_t oldest = UINT64_MAX;
            for (const auto& [key, e] : entries_)
                if (e.resident && e.tick < oldest) {
                    oldest = e.tick;
                    victim = key;
                }
            if (victim.first < 0) return;  // nothing evictable; overshoot by one canvas
            spill(victim.first, victim.second, entries_[victim]);
        }
    }

    void spill(int level, int block, Entry& e) {
        if (e.spill_path.empty()) {
            std::error_code ec;
            std::filesystem::create_directories(spill_dir_, ec);
            e.spill_path = strcat_all(spill_dir_, "/cache_l", level, "_b", block, ".hpdmcach");
            ByteWriter w;
            w.raw("HPDMCACH", 8);
            w.u32(uint32_t(level));
            w.u32(uint32_t(block));
            w.u32(4);
            for (int64_t d : e.canvas.shape()) w.u32(uint32_t(d));
            w.f32_array(e.canvas.values().data(), e.canvas.values().size());
            w.append_crc();
            write_file(e.spill_path, w.bytes);
        }
        e.canvas = Tensor();
        e.resident = false;
        resident_ -= e.bytes;
        spills_++;
    }

    static Tensor load_spill(const std::string& path, int level, int block, const Dims3&) {
        auto bytes = read_file(path);
        if (bytes.size() < 8 || std::memcmp(bytes.data(), "HPDMCACH", 8) != 0)
            throw DataError(strcat_all("cache spill ", path, ": bad magic"));
        ByteReader r(bytes);
        r.check_trailing_crc(path.c_str());
        r.at = 8;
        const int got_level = int(r.u32("level"));
        const int got_block = int(r.u32("block"));
        if (got_level != level || got_block != block)
            throw DataError(strcat_all("cache spill ", path, ": holds level ", got_level,
                                       ", block ", got_block));
        const uint32_t rank = r.u32("rank");
        if (rank != 4) throw DataError(strcat_all("cache spill ", path, ": bad rank"));
        std::vector<int64_t> dims;
        int64_t numel = 1;
        for (uint32_t i = 0; i < 4; i++) {
            dims.push_back(r.u32("dim"));
            numel *= dims.back();
        }
        std::vector<float> payload(static_cast<size_t>(numel));
        r.f32_array(payload.data(), payload.size(), "payload");
        return Tensor::from_values(dims, std::move(payload));
    }

    std::map<std::pair<int, int>, Entry> entries_;
    int64_t budget_ = INT64_MAX;
    std::string spill_dir_ = ".";
    int64_t resident_ = 0;
    int64_t high_water_ = 0;
    int64_t spills_ = 0;
    int64_t reloads_ = 0;
    uint64_t tick_ = 0;
    std::mutex mutex_;
};

// -------------------------------------------------------------- manifest

struct ManifestLevel {
    int level = 0;
    std::vector<float> sigmas;
    std::vector<PatchCoords> tiles;
    std::vector<int64_t> step_ms;
};

struct Manifest {
    uint64_t config_hash = 0;
    uint64_t seed = 0;
    PyramidSpec pyramid;
    int64_t label = 0;
    std::string overlap = "none";
    std::vector<ManifestLevel> levels;

    std::string serialize() const;
    static Manifest parse(const std::string& text);
};

namespace detail {

inline std::string coords_hex(const PatchCoords& c) {
    auto one = [](float v) {
        uint32_t bits;
        std::memcpy(&bits, &v, 4);
        char buf[16];
        // little-endian byte order, two hex digits per byte
        std::snprintf(buf, sizeof(buf), "%02x%02x%02x%02x", bits & 0xff, (bits >> 8) & 0xff,
                      (bits >> 16) & 0xff, (bits >> 24) & 0xff);
        return std::string(buf);
    };
    return one(c.scale) + " " + one(c.offsets[0]) + " " + one(c.offsets[1]) + " " +
           one(c.offsets[2]);
}

inline float hex_f32(const std::string& s) {
    if (s.size() != 8) throw DataError(strcat_all("manifest: bad coord field '", s, "'"));
    uint32_t bits = 0;
    for (int byte = 0; byte < 4; byte++) {
        unsigned v = 0;
        if (std::sscanf(s.c_str() + 2 * byte, "%2x", &v) != 1)
            throw DataError(strcat_all("manifest: bad coord field '", s, "'"));
        bits |= uint32_t(v) << (8 * byte);
    }
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
}

}  // namespace detail

inline std::string Manifest::serialize() const {
    std::string out = "hpdm-manifest v1\n";
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%016" PRIx64, config_hash);
    out += strcat_all("config_hash ", buf, "\n");
    out += strcat_all("seed ", seed, "\n");
    out += strcat_all("pyramid ", pyramid.levels, " ", pyramid.patch[0], " ", pyramid.patch[1],
                      " ", pyramid.patch[2], " ", pyramid.full[0], " ", pyramid.full[1], " ",
                      pyramid.full[2], "\n");
    out += strcat_all("label ", label, "\n");
    out += strcat_all("overlap ", overlap, "\n");
    for (const auto& lv : levels) {
        out += strcat_all("level ", lv.level, " steps ", lv.sigmas.size() - 1, " tiles ",
                          lv.tiles.size(), "\n");
        out += strcat_all("sigmas ", lv.level);
        for (float s : lv.sigmas) out += strcat_all(" ", detail::fmt_f32(s));
        out += "\n";
        for (size_t t = 0; t < lv.tiles.size(); t++)
            out += strcat_all("tile ", lv.level, " ", t, " ", detail::coords_hex(lv.tiles[t]),
                              "\n");
        for (size_t s = 0; s < lv.step_ms.size(); s++)
            out += strcat_all("timing ", lv.level, " ", s, " ", lv.step_ms[s], "\n");
    }
    char crcbuf[16];
    std::snprintf(crcbuf, sizeof(crcbuf), "%08x", crc32_of(out.data(), out.size()));
    out += strcat_all("crc32 ", crcbuf, "\n");
    return out;
}

inline Manifest Manifest::parse(const std::string& text) {
    // split into lines; the last non-empty line must be the checksum
    std::vector<std::string> lines;
    size_t start = 0;
    while (start < text.size()) {
        size_t end = text.find('\n', start);
        if (end == std::string::npos) end = text.size();
        lines.push_back(text.substr(start, end - start));
        start = end + 1;
    }
    while (!lines.empty() && lines.back().empty()) lines.pop_back();
    if (lines.empty() || lines[0] != "hpdm-manifest v1")
        throw DataError("manifest: bad header");
    if (lines.back().rfind("crc32 ", 0) != 0) throw DataError("manifest: missing checksum");
    {
        std::string body;
        for (size_t i = 0; i + 1 < lines.size(); i++) body += lines[i] + "\n";
        unsigned stored = 0;
        if (std::sscanf(lines.back().c_str(), "crc32 %8x", &stored) != 1)
            throw DataError("manifest: bad checksum line");
        if (crc32_of(body.data(), body.size()) != stored)
            throw DataError("manifest: checksum mismatch");
    }
    Manifest m;
    for (size_t i = 1; i + 1 < lines.size(); i++) {
        const std::string& ln = lines[i];
        char word[32];
        if (std::sscanf(ln.c_str(), "%31s", word) != 1)
            throw DataError(strcat_all("manifest: bad line '", ln, "'"));
        const std::string tag = word;
        if (tag == "config_hash") {
            uint64_t v = 0;
            if (std::sscanf(ln.c_str(), "config_hash %" SCNx64, &v) != 1)
                throw DataError("manifest: bad config_hash");
            m.config_hash = v;
        } else if (tag == "seed") {
            if (std::sscanf(ln.c_str(), "seed %" SCNu64, &m.seed) != 1)
                throw DataError("manifest: bad seed");
        } else if (tag == "pyramid") {
            long long l, a, b, c, d, e, f;
            if (std::sscanf(ln.c_str(), "pyramid %lld %lld %lld %lld %lld %lld %lld", &l, &a, &b,
                            &c, &d, &e, &f) != 7)
                throw DataError("manifest: bad pyramid line");
            m.pyramid.levels = int(l);
            m.pyramid.patch = {a, b, c};
            m.pyramid.full = {d, e, f};
        } else if (tag == "label") {
            long long v;
            if (std::sscanf(ln.c_str(), "label %lld", &v) != 1)
                throw DataError("manifest: bad label");
            m.label = v;
        } else if (tag == "overlap") {
            char ov[16];
            if (std::sscanf(ln.c_str(), "overlap %15s", ov) != 1)
                throw DataError("manifest: bad overlap");
            m.overlap = ov;
        } else if (tag == "level") {
            ManifestLevel lv;
            long long level, steps, tiles;
            if (std::sscanf(ln.c_str(), "level %lld steps %lld tiles %lld", &level, &steps,
                            &tiles) != 3)
                throw DataError("manifest: bad level line");
            lv.level = int(level);
            m.levels.push_back(lv);
        } else if (tag == "sigmas") {
            if (m.levels.empty()) throw DataError("manifest: sigmas before level");
            std::vector<float> vals;
            size_t pos = ln.find(' ');
            pos = ln.find(' ', pos + 1);  // skip "sigmas <level>"
            while (pos != std::string::npos && pos + 1 < ln.size()) {
                size_t next = ln.find(' ', pos + 1);
                vals.push_back(std::stof(ln.substr(pos + 1, next - pos - 1)));
                pos = next;
            }
            m.levels.back().sigmas = std::move(vals);
        } else if (tag == "tile") {
            if (m.levels.empty()) throw DataError("manifest: tile before level");
            char h0[16], h1[16], h2[16], h3[16];
            long long level, idx;
            if (std::sscanf(ln.c_str(), "tile %lld %lld %15s %15s %15s %15s", &level, &idx, h0, h1,
                            h2, h3) != 6)
                throw DataError("manifest: bad tile line");
            PatchCoords c;
            c.scale = detail::hex_f32(h0);
            c.offsets = {detail::hex_f32(h1), detail::hex_f32(h2), detail::hex_f32(h3)};
            m.levels.back().tiles.push_back(c);
        } else if (tag == "timing") {
            if (m.levels.empty()) throw DataError("manifest: timing before level");
            long long level, idx, ms;
            if (std::sscanf(ln.c_str(), "timing %lld %lld %lld", &level, &idx, &ms) != 3)
                throw DataError("manifest: bad timing line");
            m.levels.back().step_ms.push_back(ms);
        } else {
            throw DataError(strcat_all("manifest: unknown line tag '", tag, "'"));
        }
    }
    return m;
}

// --------------------------------------------------------------- sampler

struct GenerateStats {
    double wall_seconds = 0;
    int64_t cache_high_water = 0;
    int64_t cache_spills = 0;
    int64_t denoiser_calls = 0;
};

struct GenerateResult {
    Tensor video;
    Manifest manifest;
    GenerateStats stats;
};

// Hierarchical tiled sampler. Levels are generated coarse to fine; each
// level's tiles read parent context from the stitched clean-pass activation
// canvases (cached by default, rebuilt every step in recompute mode).
class TiledSampler {
   public:
    TiledSampler(const Denoiser& model, const PyramidSpec& pyramid, const NoiseSchedule& ns,
                 const SamplerConfig& sc, std::array<bool, 3> overlap, int threads,
                 int64_t cache_budget_bytes, std::string spill_dir, bool use_cache = true)
        : model_(model),
          pyramid_(pyramid),
          ns_(ns),
          sc_(sc),
          overlap_(overlap),
          threads_(threads),
          use_cache_(use_cache),
          cache_(cache_budget_bytes, std::move(spill_dir)) {}

    ActivationCache& cache() { return cache_; }
    int64_t denoiser_calls() const { return denoiser_calls_; }

    // Clean pixel canvas of a completed level (valid after sample_level).
    const Tensor& clean_canvas(int level) const {
        if (size_t(level) >= clean_canvases_.size() || !clean_canvases_[size_t(level)].defined())
            throw DataError(strcat_all("tiled: level ", level, " has not been sampled"));
        return clean_canvases_[size_t(level)];
    }

    Dims3 level_token_dims(int level) const {
        const Dims3 g = model_.cfg.token_grid();
        return {g[0] << level, g[1] << level, g[2] << level};
    }

    // Sample one level's full canvas; parents of levels < level must be done.
    Tensor sample_level(int level, int64_t label, Rng rng, ManifestLevel* record = nullptr) {
        const Dims3 canvas_dims = pyramid_.canvas_dims(level);
        TilePlan plan = plan_tiles(canvas_dims, pyramid_.patch, overlap_);
        plan.level = level;
        auto grid = sigma_grid(sc_, ns_, level);
        if (record) {
            record->level = level;
            record->sigmas = grid;
            record->tiles = plan.tiles;
        }
        Rng init_rng = rng.fork("init");
        Tensor canvas = Tensor::zeros({model_.cfg.channels, canvas_dims[0], canvas_dims[1],
                                       canvas_dims[2]});
        for (auto& v : canvas.values()) v = float(double(grid[0]) * init_rng.normal());

        DenoiseFnT<float> canvas_denoise = [&](const Tensor& x, float sigma) {
            return denoise_canvas(level, x, sigma, plan, label);
        };
        StepOptions opts;
        opts.second_order = (level == 0) && sc_.second_order;
        opts.churn = (level == 0) ? sc_.churn : 0.0f;
        Rng churn_rng = rng.fork("churn");
        for (size_t i = 0; i + 1 < grid.size(); i++) {
            const auto t0 = std::chrono::steady_clock::now();
            canvas = denoise_step<float>(canvas, grid[i], grid[i + 1], canvas_denoise, opts,
                                         &churn_rng);
            const auto t1 = std::chrono::steady_clock::now();
            if (record)
                record->step_ms.push_back(
                    std::chrono::duration_cast<std::chrono::milliseconds>(t1 - t0).count());
        }
        // stitch activations only when a finer level will consume them
        if (use_cache_ && level + 1 < pyramid_.levels)
            stitch_level_activations(level, canvas, plan, label);
        clean_canvases_.resize(std::max<size_t>(clean_canvases_.size(), size_t(level) + 1));
        clean_canvases_[size_t(level)] = canvas;
        return canvas;
    }

    GenerateResult generate(int64_t label, uint64_t seed) {
        const auto t0 = std::chrono::steady_clock::now();
        cache_.drop_below_level(0);
        clean_canvases_.clear();
        GenerateResult res;
        res.manifest.seed = seed;
        res.manifest.pyramid = pyramid_;
        res.manifest.label = label;
        Rng rng(seed);
        Tensor canvas;
        for (int level = 0; level < pyramid_.levels; level++) {
            ManifestLevel lv;
            canvas = sample_level(level, label, rng.fork("level").fork(uint64_t(level)), &lv);
            res.manifest.levels.push_back(std::move(lv));
        }
        res.video = canvas;
        const auto t1 = std::chrono::steady_clock::now();
        res.stats.wall_seconds = std::chrono::duration<double>(t1 - t0).count();
        res.stats.cache_high_water = cache_.high_water_bytes();
        res.stats.cache_spills = cache_.spill_count();
        res.stats.denoiser_calls = denoiser_calls_;
        return res;
    }

   private:
    // Parent context for a tile of `level` at block `b`: the full-canvas
    // token lattices of every completed coarser level (coords are the whole
    // frame, so recompute_coords reduces to the tile's own coords).
    ContextProviderT<float> make_provider(int level,
                                          std::map<std::pair<int, int>, Tensor>* recomputed) {
        return [this, level, recomputed](int block) {
            std::vector<ParentViewT<float>> views;
            for (int k = 0; k < level; k++) {
                ParentViewT<float> v;
                v.coords = PatchCoords{};
                v.grid_dims = level_token_dims(k);
                if (recomputed) {
                    auto it = recomputed->find({k, block});
                    if (it == recomputed->end())
                        throw DataError("tiled: missing recomputed parent canvas");
                    v.grid = it->second;
                } else {
                    v.grid = cache_.fetch(k, block);
                }
                views.push_back(std::move(v));
            }
            return views;
        };
    }

    Tensor denoise_canvas(int level, const Tensor& x, float sigma, const TilePlan& plan,
                          int64_t label) {
        // recompute mode rebuilds parent activations from the clean pixel
        // canvases at every step; the cache mode reads the stitched copies
        std::map<std::pair<int, int>, Tensor> recomputed;
        if (!use_cache_ && level > 0) {
            for (int k = 0; k < level; k++) rebuild_parent(k, label, &recomputed);
        }
        auto provider = make_provider(level, use_cache_ ? nullptr : &recomputed);
        const auto pc = precondition(sigma, ns_.sigma_data);
        const float g = sc_.guidance;
        std::vector<Tensor> preds(plan.tiles.size());
        parallel_for(int64_t(plan.tiles.size()), threads_, [&](int64_t t) {
            const auto& tile = plan.tiles[size_t(t)];
            auto noisy = crop_canvas(x, tile, pyramid_.patch);
            auto scaled = scalar_mul(noisy, pc.c_in);
            auto raw = model_.forward_level(level, model_.tokenize(scaled, sigma, label, tile),
                                            provider);
            if (g != 1.0f) {
                // unvalidated guidance stub: scale away from the null-label output
                auto raw_null = model_.forward_level(
                    level,
                    model_.tokenize(scaled, sigma, model_.cfg.num_classes, tile), provider);
                raw = add(raw_null, scalar_mul(sub(raw, raw_null), g));
            }
            preds[size_t(t)] = add(scalar_mul(noisy, pc.c_skip), scalar_mul(raw, pc.c_out));
        });
        denoiser_calls_ += int64_t(plan.tiles.size()) * (g != 1.0f ? 2 : 1);
        return fuse_tile_predictions(preds, plan, model_.cfg.channels);
    }

    // Final clean pass at sigma_min recording each processed block's input
    // token stream, stitched (uniform average in overlaps) into full-canvas
    // lattices for the next level's context fusion.
    void stitch_level_activations(int level, const Tensor& canvas, const TilePlan& plan,
                                  int64_t label) {
        std::map<std::pair<int, int>, Tensor> recomputed;
        if (!use_cache_ && level > 0)
            for (int k = 0; k < level; k++) rebuild_parent(k, label, &recomputed);
        auto provider = make_provider(level, use_cache_ ? nullptr : &recomputed);
        auto canvases = build_block_canvases(level, canvas, plan, label, provider);
        for (auto& [key, grid] : canvases)
            cache_.store(key.first, key.second, std::move(grid.first), grid.second);
    }

    // Shared by the cache fill and the recompute oracle: run the clean pass
    // over every tile of `level` and stitch block-input token lattices.
    std::map<std::pair<int, int>, std::pair<Tensor, Dims3>> build_block_canvases(
        int level, const Tensor& canvas, const TilePlan& plan, int64_t label,
        const ContextProviderT<float>& provider) {
        const float sigma = ns_.sigma_min;
        const auto pc = precondition(sigma, ns_.sigma_data);
        const Dims3 tg = model_.cfg.token_grid();
        const Dims3 full_tg = level_token_dims(level);
        const int64_t d = model_.cfg.token_dim;
        struct Acc {
            std::vector<double> sum;
            std::vector<int32_t> count;
        };
        std::map<int, Acc> accs;  // block -> token-canvas accumulator
        for (int b = 0; b < model_.cfg.num_blocks; b++)
            if (model_.cfg.num_levels_per_block[b] > level) {
                Acc a;
                a.sum.assign(size_t(d * volume(full_tg)), 0.0);
                a.count.assign(size_t(volume(full_tg)), 0);
                accs.emplace(b, std::move(a));
            }
        std::vector<std::map<int, Tensor>> tile_tokens(plan.tiles.size());
        parallel_for(int64_t(plan.tiles.size()), threads_, [&](int64_t t) {
            const auto& tile = plan.tiles[size_t(t)];
            auto noisy = crop_canvas(canvas, tile, pyramid_.patch);
            auto scaled = scalar_mul(noisy, pc.c_in);
            auto state = model_.tokenize(scaled, sigma, label, tile);
            std::map<int, Tensor>& grabbed = tile_tokens[size_t(t)];
            model_.forward_level(level, std::move(state), provider,
                                 [&grabbed](int block, const Tensor& tokens) {
                                     grabbed.emplace(block, tokens);
                                 });
        });
        denoiser_calls_ += int64_t(plan.tiles.size());
        for (size_t t = 0; t < plan.tiles.size(); t++) {
            const auto& tile = plan.tiles[t];
            Dims3 tok_start;
            for (int a = 0; a < 3; a++) {
                const int64_t vox = llround(double(tile.offsets[a]) * double(plan.canvas[a]));
                tok_start[a] = vox / model_.cfg.tokenizer[a];
            }
            for (auto& [block, tokens] : tile_tokens[t]) {
                Acc& acc = accs.at(block);
                const auto& tv = tokens.values();
                int64_t at = 0;
                for (int64_t i = 0; i < tg[0]; i++)
                    for (int64_t j = 0; j < tg[1]; j++)
                        for (int64_t k = 0; k < tg[2]; k++) {
                            const int64_t pos = ((tok_start[0] + i) * full_tg[1] + tok_start[1] +
                                                 j) * full_tg[2] +
                                                tok_start[2] + k;
                            for (int64_t c = 0; c < d; c++)
                                acc.sum[size_t(c * volume(full_tg) + pos)] +=
                                    double(tv[at * d + c]);
                            acc.count[size_t(pos)]++;
                            at++;
                        }
            }
        }
        std::map<std::pair<int, int>, std::pair<Tensor, Dims3>> out;
        for (auto& [block, acc] : accs) {
            Tensor grid = Tensor::zeros({d, full_tg[0], full_tg[1], full_tg[2]});
            auto& gv = grid.values();
            const int64_t plane = volume(full_tg);
            for (int64_t pos = 0; pos < plane; pos++) {
                const int32_t cov = acc.count[size_t(pos)];
                if (cov < 1) throw NumericError("activation stitch: uncovered token");
                for (int64_t c = 0; c < d; c++)
                    gv[c * plane + pos] = float(acc.sum[size_t(c * plane + pos)] / cov);
            }
            out.emplace(std::pair<int, int>{level, block},
                        std::pair<Tensor, Dims3>{std::move(grid), full_tg});
        }
        return out;
    }

    // Recompute-on-the-fly oracle path: rebuild parent level k's stitched
    // block canvases from its stored clean pixel canvas.
    void rebuild_parent(int k, int64_t label, std::map<std::pair<int, int>, Tensor>* out) {
        if (size_t(k) >= clean_canvases_.size() || !clean_canvases_[size_t(k)].defined())
            throw DataError(strcat_all("tiled: missing clean canvas for level ", k));
        // parents of level k itself come from earlier rebuilt entries
        std::map<std::pair<int, int>, Tensor> lower(out->begin(), out->end());
        auto provider = make_provider(k, &lower);
        TilePlan plan = plan_tiles(pyramid_.canvas_dims(k), pyramid_.patch, overlap_);
        auto canvases =
            build_block_canvases(k, clean_canvases_[size_t(k)], plan, label, provider);
        for (auto& [key, grid] : canvases) (*out)[key] = std::move(grid.first);
    }

    const Denoiser& model_;
    PyramidSpec pyramid_;
    NoiseSchedule ns_;
    SamplerConfig sc_;
    std::array<bool, 3> overlap_;
    int threads_;
    bool use_cache_;
    ActivationCache cache_;
    std::vector<Tensor> clean_canvases_;
    int64_t denoiser_calls_ = 0;
};

// Seam metric: mean absolute finite difference across tile-boundary planes
// minus the same statistic over interior planes, on the h and w axes.
inline double seam_metric(const Tensor& canvas, const Dims3& tile) {
    const int64_t C = canvas.dim(0), F = canvas.dim(1), H = canvas.dim(2), W = canvas.dim(3);
    double seam_sum = 0, seam_n = 0, in_sum = 0, in_n = 0;
    auto at = [&](int64_t c, int64_t f, int64_t h, int64_t w) {
        return double(canvas.values()[((c * F + f) * H + h) * W + w]);
    };
    for (int64_t c = 0; c < C; c++)
        for (int64_t f = 0; f < F; f++) {
            for (int64_t h = 1; h < H; h++)
                for (int64_t w = 0; w < W; w++) {
                    const double diff = std::fabs(at(c, f, h, w) - at(c, f, h - 1, w));
                    if (h % tile[1] == 0) {
                        seam_sum += diff;
                        seam_n++;
                    } else {
                        in_sum += diff;
                        in_n++;
                    }
                }
            for (int64_t w = 1; w < W; w++)
                for (int64_t h = 0; h < H; h++) {
                    const double diff = std::fabs(at(c, f, h, w) - at(c, f, h, w - 1));
                    if (w % tile[2] == 0) {
                        seam_sum += diff;
                        seam_n++;
                    } else {
                        in_sum += diff;
                        in_n++;
                    }
                }
        }
    if (seam_n == 0 || in_n == 0) throw ConfigError("seam_metric: no boundary planes");
    return seam_sum / seam_n - in_sum / in_n;
}

}  // namespace hpdm
