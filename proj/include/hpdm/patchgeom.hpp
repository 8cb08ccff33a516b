#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "hpdm/ops.hpp"
#include "hpdm/rng.hpp"
#include "hpdm/tensor.hpp"

namespace hpdm {

using Dims3 = std::array<int64_t, 3>;

inline int64_t volume(const Dims3& d) { return d[0] * d[1] * d[2]; }

// Normalized region of the full video: scale s in (0,1] plus per-axis
// offsets in [0, 1-s]. The per-axis scale is uniform; offsets are snapped to
// full-resolution voxel boundaries by the sampler, which is what makes
// extraction and the re-projection round trip exact.
struct PatchCoords {
    float scale = 1.0f;
    std::array<float, 3> offsets{0.0f, 0.0f, 0.0f};

    void validate() const {
        if (!(scale > 0.0f && scale <= 1.0f))
            throw ConfigError(strcat_all("PatchCoords: scale ", scale, " not in (0,1]"));
        for (float d : offsets)
            if (d < -1e-6f || d > 1.0f - scale + 1e-6f)
                throw ConfigError(strcat_all("PatchCoords: offset ", d, " not in [0, 1-s] for s=",
                                             scale));
    }

    bool contains(const PatchCoords& inner, float tol = 1e-5f) const {
        if (inner.scale > scale + tol) return false;
        for (int a = 0; a < 3; a++) {
            if (inner.offsets[a] < offsets[a] - tol) return false;
            if (inner.offsets[a] + inner.scale > offsets[a] + scale + tol) return false;
        }
        return true;
    }
};

// L+1 levels of fixed patch resolution r over a full resolution R = 2^L * r.
// Level l covers scale 2^-l: level 0 is the whole video, level L is native.
struct PyramidSpec {
    int levels = 1;  // L + 1
    Dims3 patch{1, 1, 1};
    Dims3 full{1, 1, 1};

    int top_level() const { return levels - 1; }

    float level_scale(int level) const { return std::ldexp(1.0f, -level); }

    // Downsample factor from native resolution at this level.
    int64_t level_factor(int level) const { return int64_t(1) << (top_level() - level); }

    Dims3 canvas_dims(int level) const {
        return {patch[0] << level, patch[1] << level, patch[2] << level};
    }

    void validate() const {
        if (levels < 1) throw ConfigError("pyramid.levels: must be >= 1");
        for (int a = 0; a < 3; a++) {
            if (patch[a] < 1) throw ConfigError("pyramid.patch: dims must be positive");
            if (full[a] != (patch[a] << top_level()))
                throw ConfigError(strcat_all("pyramid.full: axis ", a, " is ", full[a],
                                             ", expected 2^", top_level(), " * ", patch[a], " = ",
                                             patch[a] << top_level()));
        }
    }

    double pixel_budget_fraction() const {
        return double(levels) * double(volume(patch)) / double(volume(full));
    }
};

namespace detail {

inline int64_t exact_voxel(double normalized, int64_t extent, const char* what) {
    double v = normalized * double(extent);
    int64_t k = llround(v);
    if (std::fabs(v - double(k)) > 1e-3)
        throw ConfigError(strcat_all(what, ": coordinate ", normalized,
                                     " is not voxel-aligned for extent ", extent));
    return k;
}

}  // namespace detail

// One nested draw: level 0 is the full video; each deeper level halves the
// scale and lands fully inside its parent. Default mode snaps every offset
// to native voxel boundaries (which makes extraction exact); continuous mode
// draws real-valued offsets and snaps only the last level to integer voxels.
inline std::vector<PatchCoords> sample_pyramid_coords(const PyramidSpec& spec, Rng& rng,
                                                      bool continuous = false) {
    spec.validate();
    std::vector<PatchCoords> coords;
    coords.push_back(PatchCoords{});
    for (int level = 1; level < spec.levels; level++) {
        const PatchCoords& parent = coords.back();
        PatchCoords c;
        c.scale = spec.level_scale(level);
        const bool snap = !continuous || level == spec.top_level();
        for (int a = 0; a < 3; a++) {
            if (snap) {
                const int64_t extent = spec.full[a];
                double lo_real = double(parent.offsets[a]) * double(extent);
                double hi_real =
                    double(parent.offsets[a] + parent.scale - c.scale) * double(extent);
                const int64_t lo = int64_t(std::ceil(lo_real - 1e-6));
                const int64_t hi = int64_t(std::floor(hi_real + 1e-6));
                const int64_t k = rng.uniform_int(lo, std::max(lo, hi));
                c.offsets[a] = float(double(k) / double(extent));
            } else {
                c.offsets[a] = float(
                    rng.uniform(parent.offsets[a], parent.offsets[a] + parent.scale - c.scale));
            }
        }
        coords.push_back(c);
    }
    return coords;
}

// Express a child region in its parent's normalized frame.
inline PatchCoords recompute_coords(const PatchCoords& child, const PatchCoords& parent) {
    if (!parent.contains(child))
        throw ConfigError("recompute_coords: child region not contained in parent");
    PatchCoords out;
    out.scale = child.scale / parent.scale;
    for (int a = 0; a < 3; a++)
        out.offsets[a] = (child.offsets[a] - parent.offsets[a]) / parent.scale;
    return out;
}

// Crop the coords region out of `video` and average-pool it down to `r`.
// The crop must sit on voxel boundaries and the pool factor must be an
// integer per axis; a factor of 1 is a pure crop.
template <class S>
TensorT<S> extract_patch(const TensorT<S>& video, const PatchCoords& c, const Dims3& r) {
    if (video.rank() != 4)
        throw ShapeError(strcat_all("extract_patch: expected [C,F,H,W], got ",
                                    shape_str(video.shape())));
    const int64_t ch = video.dim(0);
    const Dims3 dims{video.dim(1), video.dim(2), video.dim(3)};
    Dims3 start, len, factor;
    for (int a = 0; a < 3; a++) {
        start[a] = detail::exact_voxel(c.offsets[a], dims[a], "extract_patch");
        len[a] = detail::exact_voxel(c.scale, dims[a], "extract_patch");
        if (len[a] <= 0 || start[a] < 0 || start[a] + len[a] > dims[a])
            throw ConfigError(strcat_all("extract_patch: crop [", start[a], ",", start[a] + len[a],
                                         ") outside axis ", a, " extent ", dims[a]));
        if (len[a] % r[a] != 0)
            throw ConfigError(strcat_all("extract_patch: crop extent ", len[a],
                                         " not divisible by patch dim ", r[a], " on axis ", a));
        factor[a] = len[a] / r[a];
    }
    TensorT<S> out = TensorT<S>::zeros({ch, r[0], r[1], r[2]});
    auto& ov = out.values();
    const auto& vv = video.values();
    const double inv = 1.0 / double(factor[0] * factor[1] * factor[2]);
    for (int64_t cc = 0; cc < ch; cc++)
        for (int64_t i = 0; i < r[0]; i++)
            for (int64_t j = 0; j < r[1]; j++)
                for (int64_t k = 0; k < r[2]; k++) {
                    double acc = 0.0;
                    for (int64_t di = 0; di < factor[0]; di++)
                        for (int64_t dj = 0; dj < factor[1]; dj++)
                            for (int64_t dk = 0; dk < factor[2]; dk++) {
                                const int64_t fi = start[0] + i * factor[0] + di;
                                const int64_t hj = start[1] + j * factor[1] + dj;
                                const int64_t wk = start[2] + k * factor[2] + dk;
                                acc += double(vv[((cc * dims[0] + fi) * dims[1] + hj) * dims[2] +
                                                 wk]);
                            }
                    ov[((cc * r[0] + i) * r[1] + j) * r[2] + k] = S(acc * inv);
                }
    return out;
}

// Continuous-offset extraction: trilinear resample of the region at the
// output voxel centers (clamped stencil at the video border). At a factor of
// exactly 2 with aligned offsets this coincides with average pooling.
template <class S>
TensorT<S> extract_patch_trilinear(const TensorT<S>& video, const PatchCoords& c, const Dims3& r) {
    if (video.rank() != 4)
        throw ShapeError(strcat_all("extract_patch_trilinear: expected [C,F,H,W], got ",
                                    shape_str(video.shape())));
    const int64_t ch = video.dim(0);
    const Dims3 dims{video.dim(1), video.dim(2), video.dim(3)};
    TensorT<S> out = TensorT<S>::zeros({ch, r[0], r[1], r[2]});
    auto& ov = out.values();
    const auto& vv = video.values();
    auto locate = [](double center, int64_t n, int64_t& lo, double& frac) {
        double t = center * double(n) - 0.5;
        if (t < 0) t = 0;
        if (t > double(n - 1)) t = double(n - 1);
        lo = std::min(int64_t(std::floor(t)), n - 1);
        frac = t - double(lo);
    };
    for (int64_t cc = 0; cc < ch; cc++)
        for (int64_t i = 0; i < r[0]; i++)
            for (int64_t j = 0; j < r[1]; j++)
                for (int64_t k = 0; k < r[2]; k++) {
                    const double gf = c.offsets[0] + c.scale * (double(i) + 0.5) / double(r[0]);
                    const double gh = c.offsets[1] + c.scale * (double(j) + 0.5) / double(r[1]);
                    const double gw = c.offsets[2] + c.scale * (double(k) + 0.5) / double(r[2]);
                    int64_t f0, h0, w0;
                    double df, dh, dw;
                    locate(gf, dims[0], f0, df);
                    locate(gh, dims[1], h0, dh);
                    locate(gw, dims[2], w0, dw);
                    double acc = 0.0;
                    for (int a = 0; a < 2; a++)
                        for (int b = 0; b < 2; b++)
                            for (int d = 0; d < 2; d++) {
                                const int64_t fi = std::min(f0 + a, dims[0] - 1);
                                const int64_t hj = std::min(h0 + b, dims[1] - 1);
                                const int64_t wk = std::min(w0 + d, dims[2] - 1);
                                const double wt = (a ? df : 1 - df) * (b ? dh : 1 - dh) *
                                                  (d ? dw : 1 - dw);
                                acc += wt * double(vv[((cc * dims[0] + fi) * dims[1] + hj) *
                                                          dims[2] +
                                                      wk]);
                            }
                    ov[((cc * r[0] + i) * r[1] + j) * r[2] + k] = S(acc);
                }
    return out;
}

// Per-voxel global center positions of a patch: three channels of affine
// ramps spanning (offset, offset + scale) exclusive of the region edges.
template <class S>
TensorT<S> coord_channels(const PatchCoords& c, const Dims3& r) {
    TensorT<S> out = TensorT<S>::zeros({3, r[0], r[1], r[2]});
    auto& ov = out.values();
    const int64_t plane = r[0] * r[1] * r[2];
    for (int64_t i = 0; i < r[0]; i++)
        for (int64_t j = 0; j < r[1]; j++)
            for (int64_t k = 0; k < r[2]; k++) {
                const int64_t at = (i * r[1] + j) * r[2] + k;
                ov[0 * plane + at] = S(c.offsets[0] + c.scale * (double(i) + 0.5) / double(r[0]));
                ov[1 * plane + at] = S(c.offsets[1] + c.scale * (double(j) + 0.5) / double(r[1]));
                ov[2 * plane + at] = S(c.offsets[2] + c.scale * (double(k) + 0.5) / double(r[2]));
            }
    return out;
}

// Map a voxel-center position in a region's [0,1] frame onto the
// align-corners sample coordinate of an n-voxel lattice over that region.
// Boundary-flush children land up to half a voxel outside [0,1]; that band
// is exactly what grid_sample_3d's extrapolation margin admits.
inline double center_to_grid(double x, int64_t n) {
    if (n <= 1) return 0.5;
    return (x * double(n) - 0.5) / double(n - 1);
}

// Sample queries that read a child patch's voxel centers out of a parent's
// feature lattice: recompute the child in the parent frame, then convert
// each child center to the parent lattice coordinate.
template <class S>
TensorT<S> fusion_queries(const PatchCoords& child, const PatchCoords& parent,
                          const Dims3& child_dims, const Dims3& parent_dims) {
    const PatchCoords rel = recompute_coords(child, parent);
    const int64_t total = volume(child_dims);
    TensorT<S> out = TensorT<S>::zeros({total, 3});
    auto& ov = out.values();
    int64_t at = 0;
    for (int64_t i = 0; i < child_dims[0]; i++)
        for (int64_t j = 0; j < child_dims[1]; j++)
            for (int64_t k = 0; k < child_dims[2]; k++) {
                const double xs[3] = {
                    rel.offsets[0] + rel.scale * (double(i) + 0.5) / double(child_dims[0]),
                    rel.offsets[1] + rel.scale * (double(j) + 0.5) / double(child_dims[1]),
                    rel.offsets[2] + rel.scale * (double(k) + 0.5) / double(child_dims[2]),
                };
                for (int a = 0; a < 3; a++) ov[at * 3 + a] = S(center_to_grid(xs[a], parent_dims[a]));
                at++;
            }
    return out;
}

// Tiling of a level canvas by patch-sized tiles, optionally overlapped by
// half a tile per axis. Tile coords are expressed in the canvas frame, which
// for a level canvas is also the global frame.
struct TilePlan {
    int level = -1;
    Dims3 canvas{1, 1, 1};
    Dims3 tile{1, 1, 1};
    std::array<bool, 3> half_overlap{false, false, false};
    Dims3 tiles_per_axis{1, 1, 1};
    std::vector<PatchCoords> tiles;
    std::vector<int32_t> coverage;  // per canvas voxel

    int64_t tile_count() const { return static_cast<int64_t>(tiles.size()); }
};

inline TilePlan plan_tiles(const Dims3& canvas, const Dims3& tile,
                           const std::array<bool, 3>& half_overlap) {
    TilePlan plan;
    plan.canvas = canvas;
    plan.tile = tile;
    plan.half_overlap = half_overlap;
    const double ratio0 = double(canvas[0]) / double(tile[0]);
    std::array<std::vector<int64_t>, 3> starts;
    for (int a = 0; a < 3; a++) {
        if (canvas[a] % tile[a] != 0)
            throw ConfigError(strcat_all("plan_tiles: canvas ", canvas[a],
                                         " not divisible by tile ", tile[a], " on axis ", a));
        if (std::fabs(double(canvas[a]) / double(tile[a]) - ratio0) > 1e-9)
            throw ConfigError("plan_tiles: canvas/tile ratio must be uniform across axes");
        const int64_t n = canvas[a] / tile[a];
        if (half_overlap[a]) {
            if (tile[a] % 2 != 0)
                throw ConfigError(strcat_all("plan_tiles: tile dim ", tile[a],
                                             " is odd; half overlap impossible on axis ", a));
            for (int64_t k = 0; k < 2 * n - 1; k++) starts[a].push_back(k * tile[a] / 2);
        } else {
            for (int64_t k = 0; k < n; k++) starts[a].push_back(k * tile[a]);
        }
        plan.tiles_per_axis[a] = static_cast<int64_t>(starts[a].size());
    }
    const float scale = float(double(tile[0]) / double(canvas[0]));
    for (int64_t sf : starts[0])
        for (int64_t sh : starts[1])
            for (int64_t sw : starts[2]) {
                PatchCoords c;
                c.scale = scale;
                c.offsets = {float(double(sf) / double(canvas[0])),
                             float(double(sh) / double(canvas[1])),
                             float(double(sw) / double(canvas[2]))};
                plan.tiles.push_back(c);
            }
    plan.coverage.assign(volume(canvas), 0);
    for (const auto& t : plan.tiles) {
        Dims3 s;
        for (int a = 0; a < 3; a++) s[a] = detail::exact_voxel(t.offsets[a], canvas[a], "plan_tiles");
        for (int64_t i = 0; i < tile[0]; i++)
            for (int64_t j = 0; j < tile[1]; j++)
                for (int64_t k = 0; k < tile[2]; k++)
                    plan.coverage[((s[0] + i) * canvas[1] + (s[1] + j)) * canvas[2] + (s[2] + k)]++;
    }
    for (int32_t cov : plan.coverage)
        if (cov < 1) throw ConfigError("plan_tiles: uncovered voxel in tile plan");
    return plan;
}

}  // namespace hpdm
