// Copyright 2026 The zamba2-desk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "zamba2/q4.hpp"
#include "zamba2/training.hpp"

namespace zamba2 {

// Which parameter roles are stored in 4 bits. Runtime states (SSM state, conv
// window, KV cache) are not parameters and are never quantized.
struct PrecisionPolicy {
    std::set<ParamRole> quantize;
    std::set<ParamRole> keep_high_precision;

    // Every linear projection is 4-bit except the embeddings and the SSM's
    // sensitive pieces (A, dt projection, conv, skip), which stay in the
    // training dtype along with norms. Adapters added on a frozen base stay
    // trainable until quantize_adapters.
    static PrecisionPolicy standard() {
        PrecisionPolicy p;
        p.quantize = {ParamRole::ssm_in_proj, ParamRole::ssm_out_proj, ParamRole::attn_q,      ParamRole::attn_k,
                      ParamRole::attn_v,      ParamRole::attn_o,       ParamRole::mlp_gate,    ParamRole::mlp_up,
                      ParamRole::mlp_down,    ParamRole::site_in_proj, ParamRole::site_out_proj, ParamRole::lora_a,
                      ParamRole::lora_b};
        p.keep_high_precision = {ParamRole::embedding,    ParamRole::unembedding,     ParamRole::norm,
                                 ParamRole::ssm_dt_proj,  ParamRole::ssm_dt_bias,     ParamRole::ssm_a_log,
                                 ParamRole::ssm_d,        ParamRole::ssm_conv_kernel, ParamRole::ssm_conv_bias,
                                 ParamRole::qlora_a,      ParamRole::qlora_b};
        return p;
    }

    void validate() const {
        for (auto r : kAllRoles) {
            const bool q = quantize.count(r) != 0, k = keep_high_precision.count(r) != 0;
            if (q && k) throw PolicyError(std::string("role '") + role_name(r) + "' is in both precision sets");
            if (!q && !k) throw PolicyError(std::string("role '") + role_name(r) + "' is not covered by the policy");
        }
    }

    bool quantizes(ParamRole r) const { return quantize.count(r) != 0; }
};

// Replaces every parameter whose role the policy quantizes by its 4-bit form
// and freezes it. Other parameters are copied unchanged.
template <class T>
Model<T> quantize_model(const Model<T> & model, const PrecisionPolicy & policy,
                        std::size_t block_size = kDefaultQuantBlock) {
    policy.validate();
    if (block_size < 1) throw ContractError("quantize_model: block_size must be >= 1");
    Model<T> q = model;
    for (auto & p : q.params) {
        if (!policy.quantizes(p.role) || p.quantized) continue;
        p.quantized = std::make_shared<const QuantizedTensor>(quantize_tensor(p.value, block_size));
        p.value = Tensor<T>{};
        p.frozen = true;
    }
    return q;
}

// ---- footprint -------------------------------------------------------------

struct Footprint {
    std::map<std::string, std::size_t> bytes_by_role;
    std::size_t quantized_bytes = 0;
    std::size_t dense_bytes = 0;
    std::size_t total = 0;
};

// Bytes of parameter storage. Quantized tensors count packed codes plus f16
// scales; dense ones count numel * dense_width (sizeof(T) unless given, e.g.
// 2 to account a 16-bit original).
template <class T>
Footprint footprint(const Model<T> & m, std::size_t dense_width = sizeof(T)) {
    Footprint f;
    for (const auto & p : m.params) {
        const std::size_t b = p.quantized ? p.quantized->bytes() : p.numel() * dense_width;
        (p.quantized ? f.quantized_bytes : f.dense_bytes) += b;
        f.bytes_by_role[role_name(p.role)] += b;
        f.total += b;
    }
    return f;
}

// ---- distribution drift ----------------------------------------------------

// Mean over rows of KL(softmax(p) || softmax(q)) for logits [rows, vocab].
template <class T>
double mean_kl_divergence(const Tensor<T> & p_logits, const Tensor<T> & q_logits) {
    if (p_logits.shape() != q_logits.shape() || p_logits.rank() != 2) {
        throw DimensionError("mean_kl_divergence: logits must share a [rows, vocab] shape");
    }
    const std::size_t rows = p_logits.dim(0), V = p_logits.dim(1);
    auto log_softmax = [V](const T * x, std::vector<double> & out) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < V; ++j) mx = std::max(mx, static_cast<double>(x[j]));
        double s = 0.0;
        for (std::size_t j = 0; j < V; ++j) s += std::exp(static_cast<double>(x[j]) - mx);
        const double lse = mx + std::log(s);
        for (std::size_t j = 0; j < V; ++j) out[j] = static_cast<double>(x[j]) - lse;
    };
    std::vector<double> lp(V), lq(V);
    double total = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        log_softmax(p_logits.data() + r * V, lp);
        log_softmax(q_logits.data() + r * V, lq);
        double kl = 0.0;
        for (std::size_t j = 0; j < V; ++j) kl += std::exp(lp[j]) * (lp[j] - lq[j]);
        total += kl;
    }
    return rows ? total / static_cast<double>(rows) : 0.0;
}

// ---- QLoRA -----------------------------------------------------------------

struct QloraConfig {
    std::vector<LoraTarget> targets{LoraTarget::up, LoraTarget::down};
    std::size_t rank = kDefaultLoraRank;
    double alpha = kDefaultLoraAlpha;
    std::size_t steps = 200;
    double lr = 1e-2;
    std::uint64_t seed = 0;
    AdamConfig adam{0.9, 0.95, 1e-8, 0.0, 1.0};
};

struct QloraReport {
    std::vector<double> losses; // loss before each step
    double initial_loss = 0.0;
    double final_loss = 0.0;    // after the last step
};

namespace detail {

inline std::uint64_t fnv_bytes(std::uint64_t h, const void * data, std::size_t n) {
    const auto * p = static_cast<const unsigned char *>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

// Fingerprint of every base (non-qlora) parameter: quantized codes and scales,
// or dense values.
template <class T>
std::vector<std::uint64_t> base_fingerprints(const Model<T> & m) {
    std::vector<std::uint64_t> out;
    for (const auto & p : m.params) {
        if (p.role == ParamRole::qlora_a || p.role == ParamRole::qlora_b) continue;
        std::uint64_t h = 0xcbf29ce484222325ull;
        if (p.quantized) {
            h = fnv_bytes(h, p.quantized->codes.data(), p.quantized->codes.size());
            h = fnv_bytes(h, p.quantized->scales.data(), p.quantized->scales.size() * sizeof(std::uint16_t));
        } else {
            h = fnv_bytes(h, p.value.data(), p.value.numel() * sizeof(T));
        }
        out.push_back(h);
    }
    return out;
}

} // namespace detail

// Adds fresh qlora adapters (B = 0, so the model function is unchanged) to
// every site. Throws if the model already carries qlora adapters.
template <class T>
void add_qlora_adapters(Model<T> & m, const QloraConfig & cfg) {
    if (!m.config.qlora_targets.empty()) throw ContractError("add_qlora_adapters: model already has qlora adapters");
    if (cfg.targets.empty()) throw ConfigError("qlora.targets", "must name at least one target");
    if (cfg.rank == 0) throw ConfigError("qlora.rank", "must be positive");
    m.config.qlora_targets = cfg.targets;
    m.config.qlora_rank = cfg.rank;
    m.config.qlora_alpha = cfg.alpha;
    Rng rng(cfg.seed);
    attach_qlora(m, rng);
}

// Freezes the base, adds fresh adapters and trains only them on `data`.
// Every base tensor is fingerprinted before and after; any change raises
// InvariantError.
template <class T>
QloraReport qlora_finetune(Model<T> & m, const QloraConfig & cfg, BatchSource & data, std::size_t seq_len) {
    add_qlora_adapters(m, cfg);
    for (auto & p : m.params) p.frozen = !(p.role == ParamRole::qlora_a || p.role == ParamRole::qlora_b);
    const auto before = detail::base_fingerprints(m);
    OptimizerState<T> opt;
    opt.cfg = cfg.adam;
    opt.cfg.validate();
    QloraReport rep;
    const Batch * last = nullptr;
    Batch batch;
    for (std::size_t s = 0; s < cfg.steps; ++s) {
        batch = data.next(seq_len);
        last = &batch;
        auto st = train_step(m, batch, opt, cfg.lr);
        rep.losses.push_back(st.loss);
    }
    if (detail::base_fingerprints(m) != before) throw InvariantError("qlora_finetune: a base weight changed");
    if (!rep.losses.empty()) {
        rep.initial_loss = rep.losses.front();
        rep.final_loss = batch_loss_and_grads(m, *last).first;
    }
    return rep;
}

// Quantizes the qlora adapters with the same scheme as the base.
template <class T>
void quantize_adapters(Model<T> & m, std::size_t block_size = kDefaultQuantBlock) {
    for (auto & p : m.params) {
        if ((p.role != ParamRole::qlora_a && p.role != ParamRole::qlora_b) || p.quantized) continue;
        p.quantized = std::make_shared<const QuantizedTensor>(quantize_tensor(p.value, block_size));
        p.value = Tensor<T>{};
        p.frozen = true;
    }
}

// Role audit: for each role, whether all / none of its tensors are quantized.
struct RoleAudit {
    std::map<std::string, std::size_t> quantized, high_precision;
};

template <class T>
RoleAudit audit_roles(const Model<T> & m) {
    RoleAudit a;
    for (const auto & p : m.params) (p.quantized ? a.quantized : a.high_precision)[role_name(p.role)] += 1;
    return a;
}

} // namespace zamba2
