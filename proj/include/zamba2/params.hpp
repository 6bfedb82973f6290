// Copyright 2026 The zamba2-desk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstddef>
#include <deque>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>

#include "zamba2/q4.hpp"
#include "zamba2/rng.hpp"
#include "zamba2/tensor.hpp"

namespace zamba2 {

// What a parameter tensor does in the network. The quantizer's precision
// policy is expressed over these roles.
enum class ParamRole : std::uint8_t {
    embedding,
    unembedding,
    norm,
    ssm_in_proj,
    ssm_out_proj,
    ssm_dt_proj,
    ssm_dt_bias,
    ssm_a_log,
    ssm_d,
    ssm_conv_kernel,
    ssm_conv_bias,
    attn_q,
    attn_k,
    attn_v,
    attn_o,
    mlp_gate,
    mlp_up,
    mlp_down,
    site_in_proj,
    site_out_proj,
    lora_a,
    lora_b,
    // adapters added on top of a frozen (typically quantized) base
    qlora_a,
    qlora_b,
};

inline constexpr std::array<ParamRole, 24> kAllRoles = {
    ParamRole::embedding,     ParamRole::unembedding,   ParamRole::norm,         ParamRole::ssm_in_proj,
    ParamRole::ssm_out_proj,  ParamRole::ssm_dt_proj,   ParamRole::ssm_dt_bias,  ParamRole::ssm_a_log,
    ParamRole::ssm_d,         ParamRole::ssm_conv_kernel, ParamRole::ssm_conv_bias, ParamRole::attn_q,
    ParamRole::attn_k,        ParamRole::attn_v,        ParamRole::attn_o,       ParamRole::mlp_gate,
    ParamRole::mlp_up,        ParamRole::mlp_down,      ParamRole::site_in_proj, ParamRole::site_out_proj,
    ParamRole::lora_a,        ParamRole::lora_b,        ParamRole::qlora_a,      ParamRole::qlora_b,
};

inline const char * role_name(ParamRole r) {
    switch (r) {
        case ParamRole::embedding:       return "embedding";
        case ParamRole::unembedding:     return "unembedding";
        case ParamRole::norm:            return "norm";
        case ParamRole::ssm_in_proj:     return "ssm_in_proj";
        case ParamRole::ssm_out_proj:    return "ssm_out_proj";
        case ParamRole::ssm_dt_proj:     return "ssm_dt_proj";
        case ParamRole::ssm_dt_bias:     return "ssm_dt_bias";
        case ParamRole::ssm_a_log:       return "ssm_a_log";
        case ParamRole::ssm_d:           return "ssm_d";
        case ParamRole::ssm_conv_kernel: return "ssm_conv_kernel";
        case ParamRole::ssm_conv_bias:   return "ssm_conv_bias";
        case ParamRole::attn_q:          return "attn_q";
        case ParamRole::attn_k:          return "attn_k";
        case ParamRole::attn_v:          return "attn_v";
        case ParamRole::attn_o:          return "attn_o";
        case ParamRole::mlp_gate:        return "mlp_gate";
        case ParamRole::mlp_up:          return "mlp_up";
        case ParamRole::mlp_down:        return "mlp_down";
        case ParamRole::site_in_proj:    return "site_in_proj";
        case ParamRole::site_out_proj:   return "site_out_proj";
        case ParamRole::lora_a:          return "lora_a";
        case ParamRole::lora_b:          return "lora_b";
        case ParamRole::qlora_a:         return "qlora_a";
        case ParamRole::qlora_b:         return "qlora_b";
    }
    return "?";
}

inline std::optional<ParamRole> role_from_name(std::string_view s) {
    for (auto r : kAllRoles) {
        if (s == role_name(r)) return r;
    }
    return std::nullopt;
}

using ParamId = std::size_t;

template <class T>
struct Parameter {
    std::string name;
    ParamRole role = ParamRole::norm;
    Tensor<T> value;
    bool frozen = false;
    // When set, `value` is released and the weight is dequantized on use.
    std::shared_ptr<const QuantizedTensor> quantized;

    const Shape & shape() const { return quantized ? quantized->shape : value.shape(); }
    std::size_t numel() const { return numel_of(shape()); }
};

// Owns every parameter tensor of a model exactly once. Modules refer to their
// weights by ParamId, so tied weights are tied by construction.
template <class T>
class ParameterStore {
public:
    ParamId add(std::string name, ParamRole role, Tensor<T> value) {
        if (by_name_.count(name)) throw InvariantError("duplicate parameter name: " + name);
        by_name_.emplace(name, params_.size());
        params_.push_back(Parameter<T>{std::move(name), role, std::move(value), false, nullptr});
        return params_.size() - 1;
    }

    std::size_t size() const noexcept { return params_.size(); }
    Parameter<T> & operator[](ParamId id) { return params_.at(id); }
    const Parameter<T> & operator[](ParamId id) const { return params_.at(id); }

    std::optional<ParamId> find(const std::string & name) const {
        auto it = by_name_.find(name);
        if (it == by_name_.end()) return std::nullopt;
        return it->second;
    }

    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }

    std::size_t total_numel() const {
        std::size_t n = 0;
        for (const auto & p : params_) n += p.numel();
        return n;
    }

private:
    std::deque<Parameter<T>> params_;
    std::unordered_map<std::string, ParamId> by_name_;
};

template <class T>
Tensor<T> randn(Shape shape, Rng & rng, double stddev) {
    Tensor<T> t(std::move(shape));
    for (auto & v : t.vec()) v = static_cast<T>(rng.normal() * stddev);
    return t;
}

template <class T>
Tensor<T> rand_uniform(Shape shape, Rng & rng, double lo, double hi) {
    Tensor<T> t(std::move(shape));
    for (auto & v : t.vec()) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
}

} // namespace zamba2
