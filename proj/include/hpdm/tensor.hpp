#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <memory>
#include <vector>

#include "hpdm/common.hpp"
#include "hpdm/rng.hpp"

namespace hpdm {

// Dense row-major n-d array of S. A Tensor is a cheap handle onto a shared
// payload; ops never mutate payloads, they allocate fresh outputs. Identity
// (the id) is what the autodiff tape keys gradients on.
template <class S>
struct TensorPayloadT {
    std::vector<int64_t> shape;
    std::vector<S> values;
    bool requires_grad = false;
    uint64_t id = 0;
};

inline uint64_t next_tensor_id() {
    static std::atomic<uint64_t> counter{1};
    return counter.fetch_add(1, std::memory_order_relaxed);
}

template <class S>
class TensorT {
   public:
    TensorT() = default;

    static TensorT zeros(std::vector<int64_t> shape) {
        TensorT t;
        t.p_ = std::make_shared<TensorPayloadT<S>>();
        t.p_->shape = std::move(shape);
        t.p_->values.assign(numel_of(t.p_->shape), S(0));
        t.p_->id = next_tensor_id();
        return t;
    }

    static TensorT full(std::vector<int64_t> shape, S v) {
        TensorT t = zeros(std::move(shape));
        for (S& x : t.values()) x = v;
        return t;
    }

    static TensorT scalar(S v) { return full({}, v); }

    static TensorT from_values(std::vector<int64_t> shape, std::vector<S> v) {
        if (numel_of(shape) != static_cast<int64_t>(v.size()))
            throw ShapeError(strcat_all("from_values: shape ", shape_str(shape),
                                        " does not hold ", v.size(), " values"));
        TensorT t;
        t.p_ = std::make_shared<TensorPayloadT<S>>();
        t.p_->shape = std::move(shape);
        t.p_->values = std::move(v);
        t.p_->id = next_tensor_id();
        return t;
    }

    static TensorT randn(std::vector<int64_t> shape, Rng& rng, S stddev = S(1)) {
        TensorT t = zeros(std::move(shape));
        for (S& x : t.values()) x = static_cast<S>(rng.normal()) * stddev;
        return t;
    }

    bool defined() const { return static_cast<bool>(p_); }
    const std::vector<int64_t>& shape() const& { return p_->shape; }
    std::vector<int64_t> shape() const&& { return p_->shape; }
    int64_t dim(size_t i) const { return p_->shape[i]; }
    size_t rank() const { return p_->shape.size(); }
    int64_t numel() const { return static_cast<int64_t>(p_->values.size()); }
    uint64_t id() const { return p_->id; }

    // Rvalue access copies: iterating values() of a temporary must not dangle.
    const std::vector<S>& values() const& { return p_->values; }
    std::vector<S>& values() & { return p_->values; }
    std::vector<S> values() const&& { return p_->values; }
    S item() const {
        if (numel() != 1) throw ShapeError("item: tensor is not scalar");
        return p_->values[0];
    }

    bool requires_grad() const { return p_->requires_grad; }
    TensorT& set_requires_grad(bool v) {
        p_->requires_grad = v;
        return *this;
    }

    bool same_shape(const TensorT& o) const { return p_->shape == o.p_->shape; }

    // Deep copy with a fresh identity.
    TensorT clone() const {
        TensorT t = from_values(p_->shape, p_->values);
        t.p_->requires_grad = p_->requires_grad;
        return t;
    }

    template <class T>
    TensorT<T> cast() const {
        std::vector<T> v(p_->values.size());
        for (size_t i = 0; i < v.size(); i++) v[i] = static_cast<T>(p_->values[i]);
        return TensorT<T>::from_values(p_->shape, std::move(v));
    }

    bool all_finite() const {
        for (S v : p_->values)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    const std::shared_ptr<TensorPayloadT<S>>& payload() const { return p_; }

   private:
    std::shared_ptr<TensorPayloadT<S>> p_;
};

using Tensor = TensorT<float>;

}  // namespace hpdm
