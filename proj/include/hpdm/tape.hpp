#pragma once

#include <functional>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "hpdm/tensor.hpp"

namespace hpdm {

// Define-by-run reverse-mode tape. Ops append nodes in execution order, so
// the node list is topologically sorted by construction. Gradients live in
// per-tensor-id slots owned by the tape, which lets data-parallel workers
// each run a private tape over shared (read-only) parameters and reduce
// gradients afterwards.
//
// A tape is installed for the current thread via activate(); ops record onto
// the innermost active tape when any input requires grad. backward() may be
// called once; the tape is consumed.
template <class S>
class TapeT {
   public:
    TapeT() = default;
    TapeT(const TapeT&) = delete;
    TapeT& operator=(const TapeT&) = delete;

    static TapeT*& active_slot() {
        thread_local TapeT* slot = nullptr;
        return slot;
    }
    static TapeT* active() { return active_slot(); }

    class Scope {
       public:
        explicit Scope(TapeT& t) : prev_(active_slot()) { active_slot() = &t; }
        ~Scope() { active_slot() = prev_; }
        Scope(const Scope&) = delete;
        Scope& operator=(const Scope&) = delete;

       private:
        TapeT* prev_;
    };
    Scope activate() { return Scope(*this); }

    using BackwardFn = std::function<void(TapeT&, const std::vector<S>&)>;

    void record(const char* op, const TensorT<S>& out, BackwardFn fn) {
        nodes_.push_back(Node{op, out.id(), std::move(fn)});
        produced_.insert(out.id());
    }

    size_t size() const { return nodes_.size(); }
    bool produced(uint64_t id) const { return produced_.count(id) != 0; }

    // Accumulation slot for a tensor's gradient, created on first touch.
    std::vector<S>& grad_slot(const TensorT<S>& t) {
        auto it = grads_.find(t.id());
        if (it == grads_.end())
            it = grads_.emplace(t.id(), std::vector<S>(t.numel(), S(0))).first;
        return it->second;
    }

    bool has_grad(const TensorT<S>& t) const { return grads_.count(t.id()) != 0; }

    TensorT<S> grad(const TensorT<S>& t) const {
        auto it = grads_.find(t.id());
        if (it == grads_.end())
            throw Error(strcat_all("tape: no gradient recorded for tensor id ", t.id()));
        return TensorT<S>::from_values(t.shape(), it->second);
    }

    // Reverse sweep from a scalar loss. Populates gradient slots for every
    // requires_grad tensor reachable from the loss, then drops the node list.
    void backward(const TensorT<S>& loss) {
        if (consumed_) throw Error("tape: backward called on a consumed tape");
        if (loss.numel() != 1) throw ShapeError("backward: loss is not scalar");
        if (!produced_.count(loss.id()))
            throw Error("backward: loss was not produced on this tape");
        consumed_ = true;
        grad_slot(loss)[0] = S(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            auto g = grads_.find(it->out_id);
            if (g == grads_.end()) continue;  // branch not reachable from loss
            it->backward(*this, g->second);
        }
        nodes_.clear();
        produced_.clear();
    }

   private:
    struct Node {
        const char* op;
        uint64_t out_id;
        BackwardFn backward;
    };

    std::vector<Node> nodes_;
    std::unordered_map<uint64_t, std::vector<S>> grads_;
    std::unordered_set<uint64_t> produced_;
    bool consumed_ = false;
};

using Tape = TapeT<float>;

}  // namespace hpdm
