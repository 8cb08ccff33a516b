#pragma once

#include <cmath>
#include <initializer_list>
#include <memory>
#include <vector>

#include "hpdm/tape.hpp"
#include "hpdm/tensor.hpp"

// Differentiable kernel catalog. Every op:
//   - validates shapes up front (errors name the op and the shapes),
//   - computes a fresh output tensor,
//   - rejects non-finite outputs,
//   - records a backward closure onto the active tape when any input
//     requires grad.
// Ops are pure: inputs are never mutated.

namespace hpdm {

namespace detail {

template <class S>
inline bool recording(std::initializer_list<const TensorT<S>*> ins) {
    if (!TapeT<S>::active()) return false;
    for (const TensorT<S>* t : ins)
        if (t->defined() && t->requires_grad()) return true;
    return false;
}

template <class S>
inline void finalize(const char* op, TensorT<S>& out,
                     std::initializer_list<const TensorT<S>*> ins,
                     typename TapeT<S>::BackwardFn fn) {
    if (!out.all_finite())
        throw NumericError(strcat_all(op, ": non-finite value in output"));
    if (recording<S>(ins)) {
        out.set_requires_grad(true);
        TapeT<S>::active()->record(op, out, std::move(fn));
    }
}

template <class S>
inline void require_same_shape(const char* op, const TensorT<S>& a, const TensorT<S>& b) {
    if (!a.same_shape(b))
        throw ShapeError(strcat_all(op, ": shape mismatch ", shape_str(a.shape()),
                                    " vs ", shape_str(b.shape())));
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <class S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
    detail::require_same_shape("add", a, b);
    TensorT<S> out = TensorT<S>::zeros(a.shape());
    const auto& av = a.values();
    const auto& bv = b.values();
    auto& ov = out.values();
    for (size_t i = 0; i < ov.size(); i++) ov[i] = av[i] + bv[i];
    detail::finalize<S>("add", out, {&a, &b}, [a, b](TapeT<S>& tp, const std::vector<S>& g) {
        if (a.requires_grad()) {
            auto& ga = tp.grad_slot(a);
            for (size_t i = 0; i < g.size(); i++) ga[i] += g[i];
        }
        if (b.requires_grad()) {
            auto& gb = tp.grad_slot(b);
            for (size_t i = 0; i < g.size(); i++) gb[i] += g[i];
        }
    });
    return out;
}

template <class S>
TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b) {
    detail::require_same_shape("sub", a, b);
    TensorT<S> out = TensorT<S>::zeros(a.shape());
    const auto& av = a.values();
    const auto& bv = b.values();
    auto& ov = out.values();
    for (size_t i = 0; i < ov.size(); i++) ov[i] = av[i] - bv[i];
    detail::finalize<S>("sub", out, {&a, &b}, [a, b](TapeT<S>& tp, const std::vector<S>& g) {
        if (a.requires_grad()) {
            auto& ga = tp.grad_slot(a);
            for (size_t i = 0; i < g.size(); i++) ga[i] += g[i];
        }
        if (b.requires_grad()) {
            auto& gb = tp.grad_slot(b);
            for (size_t i = 0; i < g.size(); i++) gb[i] -= g[i];
        }
    });
    return out;
}

template <class S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
    detail::require_same_shape("mul", a, b);
    TensorT<S> out = TensorT<S>::zeros(a.shape());
    const auto& av = a.values();
    const auto& bv = b.values();
    auto& ov = out.values();
    for (size_t i = 0; i < ov.size(); i++) ov[i] = av[i] * bv[i];
    detail::finalize<S>("mul", out, {&a, &b}, [a, b](TapeT<S>& tp, const std::vector<S>& g) {
        if (a.requires_grad()) {
            auto& ga = tp.grad_slot(a);
            const auto& bv2 = b.values();
            for (size_t i = 0; i < g.size(); i++) ga[i] += g[i] * bv2[i];
        }
        if (b.requires_grad()) {
            auto& gb = tp.grad_slot(b);
            const auto& av2 = a.values();
            for (size_t i = 0; i < g.size(); i++) gb[i] += g[i] * av2[i];
        }
    });
    return out;
}

template <class S>
TensorT<S> scalar_mul(const TensorT<S>& a, S c) {
    TensorT<S> out = TensorT<S>::zeros(a.shape());
    const auto& av = a.values();
    auto& ov = out.values();
    for (size_t i = 0; i < ov.size(); i++) ov[i] = av[i] * c;
    detail::finalize<S>("scalar_mul", out, {&a}, [a, c](TapeT<S>& tp, const std::vector<S>& g) {
        if (!a.requires_grad()) return;
        auto& ga = tp.grad_slot(a);
        for (size_t i = 0; i < g.size(); i++) ga[i] += g[i] * c;
    });
    return out;
}

// x[..., M] + v[M], v broadcast over every row.
template <class S>
TensorT<S> add_rowvec(const TensorT<S>& x, const TensorT<S>& v) {
    if (x.rank() < 1 || v.rank() != 1 || x.shape().back() != v.dim(0))
        throw ShapeError(strcat_all("add_rowvec: shape mismatch ", shape_str(x.shape()),
                                    " vs ", shape_str(v.shape())));
    const int64_t m = v.dim(0);
    const int64_t rows = x.numel() / m;
    TensorT<S> out = TensorT<S>::zeros(x.shape());
    const auto& xv = x.values();
    const auto& vv = v.values();
    auto& ov = out.values();
    for (int64_t r = 0; r < rows; r++)
        for (int64_t j = 0; j < m; j++) ov[r * m + j] = xv[r * m + j] + vv[j];
    detail::finalize<S>("add_rowvec", out, {&x, &v},
                        [x, v, rows, m](TapeT<S>& tp, const std::vector<S>& g) {
                            if (x.requires_grad()) {
                                auto& gx = tp.grad_slot(x);
                                for (size_t i = 0; i < g.size(); i++) gx[i] += g[i];
                            }
                            if (v.requires_grad()) {
                                auto& gv = tp.grad_slot(v);
                                for (int64_t r = 0; r < rows; r++)
                                    for (int64_t j = 0; j < m; j++) gv[j] += g[r * m + j];
                            }
                        });
    return out;
}

// ---------------------------------------------------------------- linear maps

template <class S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw ShapeError(strcat_all("matmul: shape mismatch ", shape_str(a.shape()),
                                    " vs ", shape_str(b.shape())));
    const int64_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
    TensorT<S> out = TensorT<S>::zeros({n, m});
    const S* av = a.values().data();
    const S* bv = b.values().data();
    S* ov = out.values().data();
    for (int64_t i = 0; i < n; i++) {
        const S* arow = av + i * k;
        S* orow = ov + i * m;
        for (int64_t p = 0; p < k; p++) {
            const S s = arow[p];
            const S* brow = bv + p * m;
            for (int64_t j = 0; j < m; j++) orow[j] += s * brow[j];
        }
    }
    detail::finalize<S>("matmul", out, {&a, &b},
                        [a, b, n, k, m](TapeT<S>& tp, const std::vector<S>& g) {
                            if (a.requires_grad()) {
                                auto& ga = tp.grad_slot(a);
                                const S* bv2 = b.values().data();
                                for (int64_t i = 0; i < n; i++)
                                    for (int64_t p = 0; p < k; p++) {
                                        S acc = 0;
                                        const S* grow = g.data() + i * m;
                                        const S* brow = bv2 + p * m;
                                        for (int64_t j = 0; j < m; j++) acc += grow[j] * brow[j];
                                        ga[i * k + p] += acc;
                                    }
                            }
                            if (b.requires_grad()) {
                                auto& gb = tp.grad_slot(b);
                                const S* av2 = a.values().data();
                                for (int64_t i = 0; i < n; i++) {
                                    const S* grow = g.data() + i * m;
                                    for (int64_t p = 0; p < k; p++) {
                                        const S s = av2[i * k + p];
                                        S* gbrow = gb.data() + p * m;
                                        for (int64_t j = 0; j < m; j++) gbrow[j] += s * grow[j];
                                    }
                                }
                            }
                        });
    return out;
}

template <class S>
TensorT<S> transpose2d(const TensorT<S>& a) {
    if (a.rank() != 2)
        throw ShapeError(strcat_all("transpose2d: expected rank 2, got ", shape_str(a.shape())));
    const int64_t n = a.dim(0), m = a.dim(1);
    TensorT<S> out = TensorT<S>::zeros({m, n});
    const auto& av = a.values();
    auto& ov = out.values();
    for (int64_t i = 0; i < n; i++)
        for (int64_t j = 0; j < m; j++) ov[j * n + i] = av[i * m + j];
    detail::finalize<S>("transpose2d", out, {&a},
                        [a, n, m](TapeT<S>& tp, const std::vector<S>& g) {
                            if (!a.requires_grad()) return;
                            auto& ga = tp.grad_slot(a);
                            for (int64_t i = 0; i < n; i++)
                                for (int64_t j = 0; j < m; j++) ga[i * m + j] += g[j * n + i];
                        });
    return out;
}

// Affine map on the last axis: x[..., K] * w[K, M] + b[M].
template <class S>
TensorT<S> linear(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>& b) {
    if (x.rank() < 1 || w.rank() != 2 || b.rank() != 1 || x.shape().back() != w.dim(0) ||
        w.dim(1) != b.dim(0))
        throw ShapeError(strcat_all("linear: shape mismatch x", shape_str(x.shape()), " w",
                                    shape_str(w.shape()), " b", shape_str(b.shape())));
    const int64_t k = w.dim(0), m = w.dim(1);
    const int64_t rows = x.numel() / k;
    std::vector<int64_t> out_shape = x.shape();
    out_shape.back() = m;
    TensorT<S> out = TensorT<S>::zeros(out_shape);
    const S* xv = x.values().data();
    const S* wv = w.values().data();
    const S* bv = b.values().data();
    S* ov = out.values().data();
    for (int64_t r = 0; r < rows; r++) {
        S* orow = ov + r * m;
        for (int64_t j = 0; j < m; j++) orow[j] = bv[j];
        const S* xrow = xv + r * k;
        for (int64_t p = 0; p < k; p++) {
            const S s = xrow[p];
            const S* wrow = wv + p * m;
            for (int64_t j = 0; j < m; j++) orow[j] += s * wrow[j];
        }
    }
    detail::finalize<S>("linear", out, {&x, &w, &b},
                        [x, w, b, rows, k, m](TapeT<S>& tp, const std::vector<S>& g) {
                            if (x.requires_grad()) {
                                auto& gx = tp.grad_slot(x);
                                const S* wv2 = w.values().data();
                                for (int64_t r = 0; r < rows; r++)
                                    for (int64_t p = 0; p < k; p++) {
                                        S acc = 0;
                                        const S* grow = g.data() + r * m;
                                        const S* wrow = wv2 + p * m;
                                        for (int64_t j = 0; j < m; j++) acc += grow[j] * wrow[j];
                                        gx[r * k + p] += acc;
                                    }
                            }
                            if (w.requires_grad()) {
                                auto& gw = tp.grad_slot(w);
                                const S* xv2 = x.values().data();
                                for (int64_t r = 0; r < rows; r++) {
                                    const S* grow = g.data() + r * m;
                                    for (int64_t p = 0; p < k; p++) {
                                        const S s = xv2[r * k + p];
                                        S* gwrow = gw.data() + p * m;
                                        for (int64_t j = 0; j < m; j++) gwrow[j] += s * grow[j];
                                    }
                                }
                            }
                            if (b.requires_grad()) {
                                auto& gb = tp.grad_slot(b);
                                for (int64_t r = 0; r < rows; r++)
                                    for (int64_t j = 0; j < m; j++) gb[j] += g[r * m + j];
                            }
                        });
    return out;
}

// ------------------------------------------------------------- normalization

inline constexpr double kLayerNormEps = 1e-5;  // variance floor

template <class S>
TensorT<S> layer_norm(const TensorT<S>& x, const TensorT<S>& gamma, const TensorT<S>& beta) {
    if (x.rank() < 1 || gamma.rank() != 1 || beta.rank() != 1 ||
        x.shape().back() != gamma.dim(0) || gamma.dim(0) != beta.dim(0))
        throw ShapeError(strcat_all("layer_norm: shape mismatch x", shape_str(x.shape()),
                                    " gamma", shape_str(gamma.shape()), " beta",
                                    shape_str(beta.shape())));
    const int64_t m = gamma.dim(0);
    const int64_t rows = x.numel() / m;
    TensorT<S> out = TensorT<S>::zeros(x.shape());
    // normalized rows are saved for backward
    auto norm = std::make_shared<std::vector<S>>(x.numel());
    auto inv_sd = std::make_shared<std::vector<S>>(rows);
    const auto& xv = x.values();
    const auto& gv = gamma.values();
    const auto& bv = beta.values();
    auto& ov = out.values();
    for (int64_t r = 0; r < rows; r++) {
        S mean = 0;
        for (int64_t j = 0; j < m; j++) mean += xv[r * m + j];
        mean /= static_cast<S>(m);
        S var = 0;
        for (int64_t j = 0; j < m; j++) {
            S d = xv[r * m + j] - mean;
            var += d * d;
        }
        var /= static_cast<S>(m);
        const S isd = S(1) / std::sqrt(var + static_cast<S>(kLayerNormEps));
        (*inv_sd)[r] = isd;
        for (int64_t j = 0; j < m; j++) {
            S y = (xv[r * m + j] - mean) * isd;
            (*norm)[r * m + j] = y;
            ov[r * m + j] = y * gv[j] + bv[j];
        }
    }
    detail::finalize<S>(
        "layer_norm", out, {&x, &gamma, &beta},
        [x, gamma, beta, norm, inv_sd, rows, m](TapeT<S>& tp, const std::vector<S>& g) {
            const auto& gv2 = gamma.values();
            if (gamma.requires_grad()) {
                auto& gg = tp.grad_slot(gamma);
                for (int64_t r = 0; r < rows; r++)
                    for (int64_t j = 0; j < m; j++) gg[j] += g[r * m + j] * (*norm)[r * m + j];
            }
            if (beta.requires_grad()) {
                auto& gb = tp.grad_slot(beta);
                for (int64_t r = 0; r < rows; r++)
                    for (int64_t j = 0; j < m; j++) gb[j] += g[r * m + j];
            }
            if (x.requires_grad()) {
                auto& gx = tp.grad_slot(x);
                for (int64_t r = 0; r < rows; r++) {
                    S mean_dy = 0, mean_dyy = 0;
                    for (int64_t j = 0; j < m; j++) {
                        S dy = g[r * m + j] * gv2[j];
                        mean_dy += dy;
                        mean_dyy += dy * (*norm)[r * m + j];
                    }
                    mean_dy /= static_cast<S>(m);
                    mean_dyy /= static_cast<S>(m);
                    for (int64_t j = 0; j < m; j++) {
                        S dy = g[r * m + j] * gv2[j];
                        gx[r * m + j] +=
                            (dy - mean_dy - (*norm)[r * m + j] * mean_dyy) * (*inv_sd)[r];
                    }
                }
            }
        });
    return out;
}

// --------------------------------------------------------------- activations

template <class S>
TensorT<S> gelu(const TensorT<S>& x) {
    TensorT<S> out = TensorT<S>::zeros(x.shape());
    const auto& xv = x.values();
    auto& ov = out.values();
    const S inv_sqrt2 = static_cast<S>(0.7071067811865475244);
    for (size_t i = 0; i < ov.size(); i++)
        ov[i] = S(0.5) * xv[i] * (S(1) + std::erf(xv[i] * inv_sqrt2));
    detail::finalize<S>("gelu", out, {&x}, [x](TapeT<S>& tp, const std::vector<S>& g) {
        if (!x.requires_grad()) return;
        auto& gx = tp.grad_slot(x);
        const auto& xv2 = x.values();
        const S inv_sqrt2 = static_cast<S>(0.7071067811865475244);
        const S inv_sqrt2pi = static_cast<S>(0.3989422804014326779);
        for (size_t i = 0; i < g.size(); i++) {
            S cdf = S(0.5) * (S(1) + std::erf(xv2[i] * inv_sqrt2));
            S pdf = inv_sqrt2pi * std::exp(S(-0.5) * xv2[i] * xv2[i]);
            gx[i] += g[i] * (cdf + xv2[i] * pdf);
        }
    });
    return out;
}

template <class S>
TensorT<S> softmax(const TensorT<S>& x) {
    if (x.rank() < 1) throw ShapeError("softmax: expected rank >= 1");
    const int64_t m = x.shape().back();
    const int64_t rows = x.numel() / m;
    TensorT<S> out = TensorT<S>::zeros(x.shape());
    const auto& xv = x.values();
    auto& ov = out.values();
    for (int64_t r = 0; r < rows; r++) {
        S mx = xv[r * m];
        for (int64_t j = 1; j < m; j++) mx = std::max(mx, xv[r * m + j]);
        S sum = 0;
        for (int64_t j = 0; j < m; j++) {
            S e = std::exp(xv[r * m + j] - mx);
            ov[r * m + j] = e;
            sum += e;
        }
        for (int64_t j = 0; j < m; j++) ov[r * m + j] /= sum;
    }
    detail::finalize<S>("softmax", out, {&x},
                        [x, out, rows, m](TapeT<S>& tp, const std::vector<S>& g) {
                            if (!x.requires_grad()) return;
                            auto& gx = tp.grad_slot(x);
                            const auto& yv = out.values();
                            for (int64_t r = 0; r < rows; r++) {
                                S dot = 0;
                                for (int64_t j = 0; j < m; j++)
                                    dot += g[r * m + j] * yv[r * m + j];
                                for (int64_t j = 0; j < m; j++)
                                    gx[r * m + j] += yv[r * m + j] * (g[r * m + j] - dot);
                            }
                        });
    return out;
}

// ------------------------------------------------------------ shape plumbing

template <class S>
TensorT<S> concat(const std::vector<TensorT<S>>& parts, size_t axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const size_t rank = parts[0].rank();
    if (axis >= rank) throw ShapeError(strcat_all("concat: axis ", axis, " out of rank ", rank));
    std::vector<int64_t> out_shape = parts[0].shape();
    out_shape[axis] = 0;
    for (const auto& p : parts) {
        if (p.rank() != rank)
            throw ShapeError(strcat_all("concat: rank mismatch ", shape_str(p.shape()), " vs ",
                                        shape_str(parts[0].shape())));
        for (size_t d = 0; d < rank; d++)
            if (d != axis && p.dim(d) != parts[0].dim(d))
                throw ShapeError(strcat_all("concat: shape mismatch ", shape_str(p.shape()),
                                            " vs ", shape_str(parts[0].shape())));
        out_shape[axis] += p.dim(axis);
    }
    int64_t outer = 1;
    for (size_t d = 0; d < axis; d++) outer *= out_shape[d];
    int64_t tail = 1;
    for (size_t d = axis + 1; d < rank; d++) tail *= out_shape[d];
    TensorT<S> out = TensorT<S>::zeros(out_shape);
    auto& ov = out.values();
    const int64_t out_stride = out_shape[axis] * tail;
    int64_t off = 0;
    for (const auto& p : parts) {
        const int64_t block = p.dim(axis) * tail;
        const auto& pv = p.values();
        for (int64_t o = 0; o < outer; o++)
            std::copy(pv.begin() + o * block, pv.begin() + (o + 1) * block,
                      ov.begin() + o * out_stride + off);
        off += block;
    }
    if (!out.all_finite()) throw NumericError("concat: non-finite value in output");
    bool want = false;
    for (const auto& p : parts) want = want || p.requires_grad();
    if (TapeT<S>::active() && want) {
        out.set_requires_grad(true);
        auto parts_copy = parts;
        TapeT<S>::active()->record(
            "concat", out,
            [parts_copy, outer, out_stride](TapeT<S>& tp, const std::vector<S>& g) {
                int64_t off2 = 0;
                for (const auto& p : parts_copy) {
                    const int64_t block = p.numel() / outer;
                    if (p.requires_grad()) {
                        auto& gp = tp.grad_slot(p);
                        for (int64_t o = 0; o < outer; o++)
                            for (int64_t i = 0; i < block; i++)
                                gp[o * block + i] += g[o * out_stride + off2 + i];
                    }
                    off2 += block;
                }
            });
    }
    return out;
}

template <class S>
std::vector<TensorT<S>> split(const TensorT<S>& x, const std::vector<int64_t>& sizes,
                              size_t axis) {
    if (axis >= x.rank())
        throw ShapeError(strcat_all("split: axis ", axis, " out of rank ", x.rank()));
    int64_t total = 0;
    for (int64_t s : sizes) total += s;
    if (total != x.dim(axis))
        throw ShapeError(strcat_all("split: sizes sum ", total, " != dim ", x.dim(axis),
                                    " of ", shape_str(x.shape())));
    int64_t outer = 1;
    for (size_t d = 0; d < axis; d++) outer *= x.dim(d);
    int64_t tail = 1;
    for (size_t d = axis + 1; d < x.rank(); d++) tail *= x.dim(d);
    const int64_t in_stride = x.dim(axis) * tail;
    std::vector<TensorT<S>> outs;
    int64_t off = 0;
    for (int64_t s : sizes) {
        std::vector<int64_t> shp = x.shape();
        shp[axis] = s;
        TensorT<S> out = TensorT<S>::zeros(shp);
        auto& ov = out.values();
        const auto& xv = x.values();
        const int64_t block = s * tail;
        for (int64_t o = 0; o < outer; o++)
            std::copy(xv.begin() + o * in_stride + off, xv.begin() + o * in_stride + off + block,
                      ov.begin() + o * block);
        const int64_t off_here = off;
        detail::finalize<S>("split", out, {&x},
                            [x, outer, in_stride, off_here, block](TapeT<S>& tp,
                                                                   const std::vector<S>& g) {
                                if (!x.requires_grad()) return;
                                auto& gx = tp.grad_slot(x);
                                for (int64_t o = 0; o < outer; o++)
                                    for (int64_t i = 0; i < block; i++)
                                        gx[o * in_stride + off_here + i] += g[o * block + i];
                            });
        outs.push_back(std::move(out));
        off += block;
    }
    return outs;
}

template <class S>
std::vector<TensorT<S>> split_equal(const TensorT<S>& x, int64_t parts, size_t axis) {
    if (parts <= 0 || x.dim(axis) % parts != 0)
        throw ShapeError(strcat_all("split_equal: dim ", x.dim(axis), " not divisible by ",
                                    parts));
    return split(x, std::vector<int64_t>(parts, x.dim(axis) / parts), axis);
}

// Gather through a precomputed index map: out[i] = x[idx[i]]. The adjoint is
// the scatter-add, so permutations (patchify, layout changes) are exact.
template <class S>
TensorT<S> permute_gather(const TensorT<S>& x,
                          const std::shared_ptr<const std::vector<int64_t>>& idx,
                          std::vector<int64_t> out_shape) {
    if (numel_of(out_shape) != static_cast<int64_t>(idx->size()))
        throw ShapeError(strcat_all("permute_gather: index count ", idx->size(),
                                    " != out shape ", shape_str(out_shape)));
    TensorT<S> out = TensorT<S>::zeros(std::move(out_shape));
    const auto& xv = x.values();
    auto& ov = out.values();
    for (size_t i = 0; i < ov.size(); i++) ov[i] = xv[(*idx)[i]];
    detail::finalize<S>("permute_gather", out, {&x},
                        [x, idx](TapeT<S>& tp, const std::vector<S>& g) {
                            if (!x.requires_grad()) return;
                            auto& gx = tp.grad_slot(x);
                            for (size_t i = 0; i < g.size(); i++) gx[(*idx)[i]] += g[i];
                        });
    return out;
}

template <class S>
TensorT<S> embedding_row(const TensorT<S>& table, int64_t row) {
    if (table.rank() != 2 || row < 0 || row >= table.dim(0))
        throw ShapeError(strcat_all("embedding_row: row ", row, " out of table ",
                                    shape_str(table.shape())));
    const int64_t m = table.dim(1);
    TensorT<S> out = TensorT<S>::zeros({m});
    std::copy(table.values().begin() + row * m, table.values().begin() + (row + 1) * m,
              out.values().begin());
    detail::finalize<S>("embedding_row", out, {&table},
                        [table, row, m](TapeT<S>& tp, const std::vector<S>& g) {
                            if (!table.requires_grad()) return;
                            auto& gt = tp.grad_slot(table);
                            for (int64_t j = 0; j < m; j++) gt[row * m + j] += g[j];
                        });
    return out;
}

// Graph cut: same values, fresh identity, no gradient flow.
template <class S>
TensorT<S> detach(const TensorT<S>& x) {
    return TensorT<S>::from_values(x.shape(), x.values());
}

// -------------------------------------------------------------- reductions

template <class S>
TensorT<S> sum_all(const TensorT<S>& x) {
    S acc = 0;
    for (S v : x.values()) acc += v;
    TensorT<S> out = TensorT<S>::scalar(acc);
    detail::finalize<S>("sum_all", out, {&x}, [x](TapeT<S>& tp, const std::vector<S>& g) {
        if (!x.requires_grad()) return;
        auto& gx = tp.grad_slot(x);
        for (size_t i = 0; i < gx.size(); i++) gx[i] += g[0];
    });
    return out;
}

template <class S>
TensorT<S> mean_axis(const TensorT<S>& x, size_t axis) {
    if (axis >= x.rank())
        throw ShapeError(strcat_all("mean_axis: axis ", axis, " out of rank ", x.rank()));
    int64_t outer = 1;
    for (size_t d = 0; d < axis; d++) outer *= x.dim(d);
    const int64_t n = x.dim(axis);
    int64_t tail = 1;
    for (size_t d = axis + 1; d < x.rank(); d++) tail *= x.dim(d);
    std::vector<int64_t> out_shape;
    for (size_t d = 0; d < x.rank(); d++)
        if (d != axis) out_shape.push_back(x.dim(d));
    TensorT<S> out = TensorT<S>::zeros(out_shape);
    const auto& xv = x.values();
    auto& ov = out.values();
    for (int64_t o = 0; o < outer; o++)
        for (int64_t i = 0; i < n; i++)
            for (int64_t t = 0; t < tail; t++)
                ov[o * tail + t] += xv[(o * n + i) * tail + t] / static_cast<S>(n);
    detail::finalize<S>("mean_axis", out, {&x},
                        [x, outer, n, tail](TapeT<S>& tp, const std::vector<S>& g) {
                            if (!x.requires_grad()) return;
                            auto& gx = tp.grad_slot(x);
                            for (int64_t o = 0; o < outer; o++)
                                for (int64_t i = 0; i < n; i++)
                                    for (int64_t t = 0; t < tail; t++)
                                        gx[(o * n + i) * tail + t] +=
                                            g[o * tail + t] / static_cast<S>(n);
                        });
    return out;
}

// Mean squared error over all elements (mean convention: grad is 2(a-b)/N).
template <class S>
TensorT<S> mse_loss(const TensorT<S>& a, const TensorT<S>& b) {
    detail::require_same_shape("mse_loss", a, b);
    const auto& av = a.values();
    const auto& bv = b.values();
    S acc = 0;
    for (size_t i = 0; i < av.size(); i++) {
        S d = av[i] - bv[i];
        acc += d * d;
    }
    const S n = static_cast<S>(av.size());
    TensorT<S> out = TensorT<S>::scalar(acc / n);
    detail::finalize<S>("mse_loss", out, {&a, &b},
                        [a, b, n](TapeT<S>& tp, const std::vector<S>& g) {
                            const auto& av2 = a.values();
                            const auto& bv2 = b.values();
                            const S c = S(2) / n * g[0];
                            if (a.requires_grad()) {
                                auto& ga = tp.grad_slot(a);
                                for (size_t i = 0; i < ga.size(); i++)
                                    ga[i] += c * (av2[i] - bv2[i]);
                            }
                            if (b.requires_grad()) {
                                auto& gb = tp.grad_slot(b);
                                for (size_t i = 0; i < gb.size(); i++)
                                    gb[i] -= c * (av2[i] - bv2[i]);
                            }
                        });
    return out;
}

// ---------------------------------------------------------- trilinear sample

// Per-axis mapping of a normalized query to the interpolation lattice.
// Convention: 0 is the center of the first voxel, 1 the center of the last
// (align-corners-on); a single-voxel axis always returns that voxel.
// Queries may overhang the lattice by up to half a voxel per axis — the
// stencil is then the boundary pair with an out-of-[0,1] weight, i.e. linear
// extrapolation. Nested-region center queries of boundary-flush children
// land in exactly that band; beyond it the query is an error.
struct GridAxis {
    int64_t i0;
    double w;  // weight of i0+1 (may be in [-0.5, 1.5] at the boundary band)
};

inline GridAxis grid_axis_locate(double q, int64_t n, const char* op, int64_t query_index) {
    if (n == 1) {
        if (q < -0.5 - 1e-6 || q > 1.5 + 1e-6)
            throw Error(strcat_all(op, ": query ", query_index, " out of range (", q,
                                   " on single-voxel axis)"));
        return {0, 0.0};
    }
    const double margin = 0.5 / static_cast<double>(n - 1);
    if (q < -margin - 1e-6 || q > 1.0 + margin + 1e-6)
        throw Error(strcat_all(op, ": query ", query_index, " out of range (", q,
                               " not in [0,1] + half-voxel band)"));
    double t = q * static_cast<double>(n - 1);
    int64_t i0 = static_cast<int64_t>(std::floor(t));
    if (i0 < 0) i0 = 0;
    if (i0 > n - 2) i0 = n - 2;
    return {i0, t - static_cast<double>(i0)};
}

// features [C, F, H, W], queries [Q, 3] in (f, h, w) order -> [Q, C].
// Differentiable w.r.t. features only (gradient is the weight scatter).
template <class S>
TensorT<S> grid_sample_3d(const TensorT<S>& features, const TensorT<S>& queries) {
    if (features.rank() != 4 || queries.rank() != 2 || queries.dim(1) != 3)
        throw ShapeError(strcat_all("grid_sample_3d: shape mismatch features ",
                                    shape_str(features.shape()), " queries ",
                                    shape_str(queries.shape())));
    if (queries.requires_grad())
        throw Error("grid_sample_3d: gradients w.r.t. queries are not supported");
    const int64_t c = features.dim(0), f = features.dim(1), h = features.dim(2),
                  w = features.dim(3);
    const int64_t q = queries.dim(0);
    TensorT<S> out = TensorT<S>::zeros({q, c});
    // corner indices and weights saved for backward: 8 per query
    auto corners = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(q) * 8);
    auto weights = std::make_shared<std::vector<S>>(static_cast<size_t>(q) * 8);
    const auto& fv = features.values();
    const auto& qv = queries.values();
    auto& ov = out.values();
    for (int64_t qi = 0; qi < q; qi++) {
        GridAxis af = grid_axis_locate(static_cast<double>(qv[qi * 3 + 0]), f, "grid_sample_3d", qi);
        GridAxis ah = grid_axis_locate(static_cast<double>(qv[qi * 3 + 1]), h, "grid_sample_3d", qi);
        GridAxis aw = grid_axis_locate(static_cast<double>(qv[qi * 3 + 2]), w, "grid_sample_3d", qi);
        const int64_t f1 = (f == 1) ? af.i0 : af.i0 + 1;
        const int64_t h1 = (h == 1) ? ah.i0 : ah.i0 + 1;
        const int64_t w1 = (w == 1) ? aw.i0 : aw.i0 + 1;
        const double wf1 = af.w, wh1 = ah.w, ww1 = aw.w;
        const int64_t idxs[8] = {
            (af.i0 * h + ah.i0) * w + aw.i0, (af.i0 * h + ah.i0) * w + w1,
            (af.i0 * h + h1) * w + aw.i0,    (af.i0 * h + h1) * w + w1,
            (f1 * h + ah.i0) * w + aw.i0,    (f1 * h + ah.i0) * w + w1,
            (f1 * h + h1) * w + aw.i0,       (f1 * h + h1) * w + w1,
        };
        const double wts[8] = {
            (1 - wf1) * (1 - wh1) * (1 - ww1), (1 - wf1) * (1 - wh1) * ww1,
            (1 - wf1) * wh1 * (1 - ww1),       (1 - wf1) * wh1 * ww1,
            wf1 * (1 - wh1) * (1 - ww1),       wf1 * (1 - wh1) * ww1,
            wf1 * wh1 * (1 - ww1),             wf1 * wh1 * ww1,
        };
        for (int k = 0; k < 8; k++) {
            (*corners)[qi * 8 + k] = idxs[k];
            (*weights)[qi * 8 + k] = static_cast<S>(wts[k]);
        }
        const int64_t plane = f * h * w;
        for (int64_t ch = 0; ch < c; ch++) {
            S acc = 0;
            const S* base = fv.data() + ch * plane;
            for (int k = 0; k < 8; k++) acc += static_cast<S>(wts[k]) * base[idxs[k]];
            ov[qi * c + ch] = acc;
        }
    }
    detail::finalize<S>("grid_sample_3d", out, {&features, &queries},
                        [features, corners, weights, q, c, f, h, w](TapeT<S>& tp,
                                                                    const std::vector<S>& g) {
                            if (!features.requires_grad()) return;
                            auto& gf = tp.grad_slot(features);
                            const int64_t plane = f * h * w;
                            for (int64_t qi = 0; qi < q; qi++)
                                for (int64_t ch = 0; ch < c; ch++) {
                                    const S go = g[qi * c + ch];
                                    S* base = gf.data() + ch * plane;
                                    for (int k = 0; k < 8; k++)
                                        base[(*corners)[qi * 8 + k]] +=
                                            go * (*weights)[qi * 8 + k];
                                }
                        });
    return out;
}

// -------------------------------------------------------------- attention

// Multi-head scaled dot-product attention on already-projected q/k/v.
// Composed from catalog primitives, so the backward pass needs no extra code.
template <class S>
TensorT<S> scaled_dot_attention(const TensorT<S>& q, const TensorT<S>& k, const TensorT<S>& v,
                                int64_t heads) {
    if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || q.dim(1) != k.dim(1) ||
        k.dim(0) != v.dim(0) || v.dim(1) != q.dim(1))
        throw ShapeError(strcat_all("attention: shape mismatch q", shape_str(q.shape()), " k",
                                    shape_str(k.shape()), " v", shape_str(v.shape())));
    if (heads <= 0 || q.dim(1) % heads != 0)
        throw ShapeError(strcat_all("attention: width ", q.dim(1), " not divisible by ", heads,
                                    " heads"));
    const int64_t hd = q.dim(1) / heads;
    const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(hd)));
    auto qh = split_equal(q, heads, 1);
    auto kh = split_equal(k, heads, 1);
    auto vh = split_equal(v, heads, 1);
    std::vector<TensorT<S>> outs;
    for (int64_t i = 0; i < heads; i++) {
        auto scores = scalar_mul(matmul(qh[i], transpose2d(kh[i])), scale);
        outs.push_back(matmul(softmax(scores), vh[i]));
    }
    return heads == 1 ? outs[0] : concat(outs, 1);
}

}  // namespace hpdm
