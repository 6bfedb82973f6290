// Copyright 2026 The zamba2-desk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <type_traits>
#include <vector>

#include "zamba2/model.hpp"

namespace zamba2 {

// Layer-matched pure transformer: every Mamba2 block of the hybrid becomes an
// untied attention + MLP layer, and each invocation site keeps one attention
// layer too, so it has n_mamba_layers + n_sites attention layers at the same
// d_model, head count, MLP width and rotary settings.
template <class T>
struct PureTransformer {
    ModelConfig config; // the hybrid config it is matched to
    ParameterStore<T> params;
    ParamId embedding = 0;
    std::vector<SharedBlockParams> layers;
    ParamId final_norm = 0;
    ParamId unembedding = 0;

    std::size_t n_layers() const { return layers.size(); }
};

inline std::size_t pure_layer_count(const ModelConfig & c) { return c.n_mamba_layers + c.n_sites(); }

template <class T>
PureTransformer<T> build_pure_baseline(const ModelConfig & config, std::uint64_t seed) {
    config.validate();
    PureTransformer<T> m;
    m.config = config;
    Rng rng(seed);
    const std::size_t d = config.d_model, n = pure_layer_count(config);
    m.embedding = m.params.add("embedding", ParamRole::embedding, randn<T>({config.vocab_size, d}, rng, 1.0));
    for (std::size_t i = 0; i < n; ++i) {
        m.layers.push_back(make_shared_block(m.params, "layers." + std::to_string(i), d, config.attn_heads,
                                             config.mlp_expansion, rng, std::max<std::size_t>(n, 1)));
    }
    m.final_norm = m.params.add("final_norm", ParamRole::norm, Tensor<T>({d}, T(1)));
    m.unembedding = m.params.add("unembedding", ParamRole::unembedding,
                                 randn<T>({config.vocab_size, d}, rng, 1.0 / std::sqrt(double(d))));
    return m;
}

template <class T>
struct PureCaches {
    std::vector<KvCache<T>> kv; // one per layer
    std::size_t position = 0;

    std::size_t ssm_bytes() const { return 0; }
    std::size_t kv_bytes() const {
        std::size_t b = 0;
        for (const auto & c : kv) b += c.bytes();
        return b;
    }
    std::size_t bytes() const { return kv_bytes(); }
};

template <class T>
PureCaches<T> make_caches(const PureTransformer<T> & m, std::size_t capacity) {
    PureCaches<T> c;
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
        c.kv.emplace_back(m.config.attn_heads, m.config.attn_head_dim(), capacity);
    }
    return c;
}

// Same calling convention as the hybrid forward; `mode` only checks the
// one-token-per-decode-step contract since attention has a single form.
template <class T>
Tensor<T> forward(const PureTransformer<T> & m, const std::vector<std::int32_t> & tokens, Mode mode = Mode::parallel,
                  std::type_identity_t<PureCaches<T>> * caches = nullptr) {
    if (tokens.empty()) throw InputError("forward: empty token sequence");
    if (mode == Mode::recurrent && (!caches || tokens.size() != 1)) {
        throw ContractError("forward: recurrent mode requires caches and exactly one token");
    }
    const std::size_t L = tokens.size();
    if (caches) {
        for (const auto & kv : caches->kv) kv.check_room(L);
    }
    const std::size_t start = caches ? caches->position : 0;
    std::vector<std::int64_t> positions(L);
    for (std::size_t i = 0; i < L; ++i) positions[i] = static_cast<std::int64_t>(start + i);
    GradTape<T> tape(false);
    auto P_ = [&](ParamId id) { return tape.param(m.params, id); };
    auto h = embedding(P_(m.embedding), tokens);
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
        h = shared_block_forward(tape, m.params, m.layers[i], {}, m.config.rotary, caches ? &caches->kv[i] : nullptr,
                                 positions, h);
    }
    if (caches) caches->position += L;
    return linear(rmsnorm(h, P_(m.final_norm), static_cast<T>(kNormEps)), P_(m.unembedding)).value();
}

} // namespace zamba2
