// Copyright 2026 The zamba2-desk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <unordered_map>
#include <utility>
#include <vector>

#include "zamba2/params.hpp"
#include "zamba2/tensor.hpp"

namespace zamba2 {

template <class T> class GradTape;

// Handle to a node on a GradTape. Cheap to copy; valid while its tape lives.
template <class T>
struct Var {
    GradTape<T> * tape = nullptr;
    std::uint32_t id = 0;

    const Tensor<T> & value() const { return tape->value(id); }
    const Shape & shape() const { return value().shape(); }
    std::size_t numel() const { return value().numel(); }
    bool requires_grad() const { return tape->requires_grad(id); }
};

// Records primitive operations of one forward pass in execution order, which
// is already a topological order for the reverse sweep.
template <class T>
class GradTape {
public:
    using BackFn = std::function<void(GradTape &, std::uint32_t)>;

    explicit GradTape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
    GradTape(const GradTape &) = delete;
    GradTape & operator=(const GradTape &) = delete;

    bool grad_enabled() const noexcept { return grad_enabled_; }
    std::size_t size() const noexcept { return nodes_.size(); }

    Var<T> constant(Tensor<T> t) { return push(std::move(t), nullptr, false, {}); }

    // Trainable leaf owned by the tape (used for gradient checks).
    Var<T> leaf(Tensor<T> t) { return push(std::move(t), nullptr, grad_enabled_, {}); }

    // Leaf that aliases a stored parameter. Repeated requests for the same
    // parameter return the same node, so tied uses accumulate into one grad.
    // A tape reads parameters from one store only; ids are store-local.
    Var<T> param(const ParameterStore<T> & store, ParamId pid) {
        if (store_ && store_ != &store) throw ContractError("GradTape::param: tape already bound to another store");
        store_ = &store;
        auto it = param_nodes_.find(pid);
        if (it != param_nodes_.end()) return {this, it->second};
        const auto & p = store[pid];
        const bool rg = grad_enabled_ && !p.frozen;
        Var<T> v = p.quantized ? push(dequantize<T>(*p.quantized), nullptr, rg, {})
                               : push(Tensor<T>{}, &p.value, rg, {});
        nodes_[v.id].param = static_cast<std::int64_t>(pid);
        param_nodes_.emplace(pid, v.id);
        return v;
    }

    // Adds an op result. The backward closure is kept only if some input
    // requires a gradient.
    Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackFn back) {
        bool rg = false;
        if (grad_enabled_) {
            for (const auto & in : inputs) rg = rg || requires_grad(in.id);
        }
        return push(std::move(value), nullptr, rg, rg ? std::move(back) : BackFn{});
    }

    const Tensor<T> & value(std::uint32_t id) const {
        const auto & n = nodes_[id];
        return n.ref ? *n.ref : n.owned;
    }
    bool requires_grad(std::uint32_t id) const { return nodes_[id].requires_grad; }

    // Gradient w.r.t. node `id`; null if nothing flowed into it.
    const Tensor<T> * grad(std::uint32_t id) const {
        const auto & g = grads_.at(id);
        return g.empty() ? nullptr : &g;
    }

    // Zero-initialized accumulation buffer for node `id`.
    Tensor<T> & grad_buffer(std::uint32_t id) {
        auto & g = grads_[id];
        if (g.empty()) g = Tensor<T>(value(id).shape());
        return g;
    }

    void backward(Var<T> root) {
        if (value(root.id).numel() != 1) throw ContractError("backward: root must be a scalar");
        grads_.assign(nodes_.size(), Tensor<T>{});
        if (!requires_grad(root.id)) return;
        grads_[root.id] = Tensor<T>(value(root.id).shape(), T(1));
        for (std::uint32_t i = root.id + 1; i-- > 0;) {
            auto & n = nodes_[i];
            if (!n.requires_grad || !n.back || grads_[i].empty()) continue;
            n.back(*this, i);
        }
    }

    // (parameter id, gradient) pairs for every parameter leaf that received
    // a gradient in the last backward pass.
    std::vector<std::pair<ParamId, const Tensor<T> *>> param_grads() const {
        std::vector<std::pair<ParamId, const Tensor<T> *>> out;
        for (const auto & [pid, nid] : param_nodes_) {
            if (nid < grads_.size() && !grads_[nid].empty()) out.emplace_back(pid, &grads_[nid]);
        }
        return out;
    }

private:
    struct Node {
        Tensor<T> owned;
        const Tensor<T> * ref = nullptr;
        bool requires_grad = false;
        BackFn back;
        std::int64_t param = -1;
    };

    Var<T> push(Tensor<T> t, const Tensor<T> * ref, bool rg, BackFn back) {
        nodes_.push_back(Node{std::move(t), ref, rg, std::move(back), -1});
        grads_.emplace_back();
        return {this, static_cast<std::uint32_t>(nodes_.size() - 1)};
    }

    bool grad_enabled_;
    std::deque<Node> nodes_;
    std::deque<Tensor<T>> grads_;
    std::unordered_map<ParamId, std::uint32_t> param_nodes_;
    const ParameterStore<T> * store_ = nullptr;
};

} // namespace zamba2
