// Copyright 2026 The zamba2-desk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "zamba2/shared_attention.hpp"
#include "zamba2/ssm_block.hpp"

namespace zamba2 {

// Byte-level vocabulary: 256 byte values followed by special tokens.
inline constexpr std::int32_t kBos = 256;
inline constexpr std::int32_t kEos = 257;
inline constexpr std::int32_t kPad = 258;
inline constexpr std::int32_t kSep = 259;
inline constexpr std::size_t kByteVocab = 260;

struct ModelConfig {
    std::string name = "custom";
    std::size_t vocab_size = kByteVocab;
    std::size_t d_model = 128;
    std::size_t n_mamba_layers = 12;
    // A shared-block invocation follows every attn_every-th Mamba2 block.
    std::size_t attn_every = 6;
    std::size_t n_shared_blocks = 2;
    std::size_t attn_heads = 4;
    std::size_t mlp_expansion = kDefaultMlpExpansion;
    std::size_t ssm_expand = 2;
    std::size_t ssm_heads = 4;
    std::size_t ssm_d_state = 64;
    std::size_t conv_width = 4;
    RotaryConfig rotary{};
    std::vector<LoraTarget> lora_targets{LoraTarget::up, LoraTarget::down};
    std::size_t lora_rank = kDefaultLoraRank;
    double lora_alpha = kDefaultLoraAlpha;
    // Extra per-site adapters trained on a frozen base; empty unless added.
    std::vector<LoraTarget> qlora_targets{};
    std::size_t qlora_rank = kDefaultLoraRank;
    double qlora_alpha = kDefaultLoraAlpha;
    std::size_t max_seq_len = 4096;
    DType dtype = DType::f32;

    std::size_t n_sites() const { return attn_every == 0 ? 0 : n_mamba_layers / attn_every; }
    std::size_t attn_head_dim() const { return attn_heads ? d_model / attn_heads : 0; }

    SsmDims ssm_dims() const {
        SsmDims d;
        d.d_model = d_model;
        d.expand = ssm_expand;
        d.n_heads = ssm_heads;
        d.d_head = ssm_heads ? ssm_expand * d_model / ssm_heads : 0;
        d.d_state = ssm_d_state;
        d.conv_width = conv_width;
        return d;
    }

    void validate() const {
        if (vocab_size == 0) throw ConfigError("vocab_size", "must be positive");
        if (d_model == 0) throw ConfigError("d_model", "must be positive");
        if (attn_every < 1) throw ConfigError("attn_every", "must be >= 1");
        if (n_shared_blocks < 1 || n_shared_blocks > 2) throw ConfigError("n_shared_blocks", "must be 1 or 2");
        if (attn_heads == 0 || d_model % attn_heads != 0) throw ConfigError("attn_heads", "must divide d_model");
        if (mlp_expansion == 0) throw ConfigError("mlp_expansion", "must be positive");
        if (ssm_heads == 0 || (ssm_expand * d_model) % ssm_heads != 0) {
            throw ConfigError("ssm_heads", "must divide ssm_expand * d_model");
        }
        if (lora_rank == 0) throw ConfigError("lora_rank", "must be positive");
        if (qlora_rank == 0) throw ConfigError("qlora_rank", "must be positive");
        if (max_seq_len == 0) throw ConfigError("max_seq_len", "must be positive");
        if (rotary.d_emb != attn_head_dim()) throw ConfigError("rotary.d_emb", "must equal the attention head dim");
        rotary.validate();
        ssm_dims().validate();
    }
};

// Desk-scale configs carrying the structural flags of the three production
// variants: single shared block + attention and MLP adapters; no rotary;
// rotary with MLP-only adapters.
inline ModelConfig preset(const std::string & name) {
    ModelConfig c;
    c.name = name;
    c.rotary.d_emb = c.attn_head_dim();
    if (name == "tiny-1p2b-style") {
        c.n_shared_blocks = 1;
        c.rotary.enabled = true;
        c.lora_targets = {LoraTarget::q, LoraTarget::k, LoraTarget::v, LoraTarget::o, LoraTarget::up, LoraTarget::down};
    } else if (name == "tiny-2p7b-style") {
        c.n_shared_blocks = 2;
        c.rotary.enabled = false;
        c.lora_targets = {LoraTarget::up, LoraTarget::down};
    } else if (name == "tiny-7b-style") {
        c.n_shared_blocks = 2;
        c.rotary.enabled = true;
        c.lora_targets = {LoraTarget::up, LoraTarget::down};
    } else {
        throw ConfigError("preset", "unknown preset '" + name + "'");
    }
    c.validate();
    return c;
}

inline const std::vector<std::string> & preset_names() {
    static const std::vector<std::string> names{"tiny-1p2b-style", "tiny-2p7b-style", "tiny-7b-style"};
    return names;
}

struct MambaLayer {
    ParamId norm = 0;
    SsmBlockParams ssm;
};

// One invocation of a shared block. Projections and adapters are private to
// the site; the block weights are referenced by index.
struct InvocationSite {
    std::size_t after_layer = 0;
    std::size_t block = 0;
    ParamId in_proj = 0;  // [d_model, 2 d_model]: concat(residual, embedding) -> block input
    ParamId out_proj = 0; // [d_model, d_model]
    std::vector<LoraAdapter> loras;
};

template <class T>
struct Model {
    using value_type = T;
    ModelConfig config;
    ParameterStore<T> params;
    ParamId embedding = 0;
    std::vector<MambaLayer> layers;
    std::vector<SharedBlockParams> blocks;
    std::vector<InvocationSite> sites;
    ParamId final_norm = 0;
    ParamId unembedding = 0;

    // Site attached after Mamba layer `layer`, if any.
    const InvocationSite * site_after(std::size_t layer) const {
        for (const auto & s : sites) {
            if (s.after_layer == layer) return &s;
        }
        return nullptr;
    }
};

// Appends the qlora adapters named by m.config to every site. They go after
// all base parameters so base ParamIds do not depend on them.
template <class T>
void attach_qlora(Model<T> & m, Rng & rng) {
    const auto & c = m.config;
    for (std::size_t s = 0; s < m.sites.size(); ++s) {
        auto & site = m.sites[s];
        const auto & blk = m.blocks[site.block];
        for (auto tgt : c.qlora_targets) {
            const auto [din, dout] = blk.io_dims(tgt);
            site.loras.push_back(make_lora(m.params, "sites." + std::to_string(s) + ".qlora", tgt, din, dout,
                                           c.qlora_rank, c.qlora_alpha, rng, ParamRole::qlora_a, ParamRole::qlora_b));
        }
    }
}

template <class T>
Model<T> build_model(const ModelConfig & config, std::uint64_t seed) {
    config.validate();
    Model<T> m;
    m.config = config;
    Rng rng(seed);
    const std::size_t d = config.d_model;
    const std::size_t n_depth = config.n_mamba_layers + config.n_sites();
    m.embedding = m.params.add("embedding", ParamRole::embedding, randn<T>({config.vocab_size, d}, rng, 1.0));
    for (std::size_t i = 0; i < config.n_mamba_layers; ++i) {
        const std::string pre = "layers." + std::to_string(i);
        MambaLayer layer;
        layer.norm = m.params.add(pre + ".norm", ParamRole::norm, Tensor<T>({d}, T(1)));
        layer.ssm = make_ssm_block(m.params, pre + ".mamba", config.ssm_dims(), rng, std::max<std::size_t>(n_depth, 1));
        m.layers.push_back(layer);
    }
    for (std::size_t b = 0; b < config.n_shared_blocks; ++b) {
        m.blocks.push_back(make_shared_block(m.params, "shared." + std::to_string(b), d, config.attn_heads,
                                             config.mlp_expansion, rng, std::max<std::size_t>(n_depth, 1)));
    }
    for (std::size_t s = 0; s < config.n_sites(); ++s) {
        const std::string pre = "sites." + std::to_string(s);
        InvocationSite site;
        site.after_layer = (s + 1) * config.attn_every - 1;
        site.block = s % config.n_shared_blocks;
        site.in_proj = m.params.add(pre + ".in_proj", ParamRole::site_in_proj,
                                    randn<T>({d, 2 * d}, rng, 1.0 / std::sqrt(2.0 * double(d))));
        site.out_proj = m.params.add(pre + ".out_proj", ParamRole::site_out_proj,
                                     randn<T>({d, d}, rng, 1.0 / std::sqrt(double(d) * 2.0 * double(n_depth))));
        const auto & blk = m.blocks[site.block];
        for (auto tgt : config.lora_targets) {
            const auto [din, dout] = blk.io_dims(tgt);
            site.loras.push_back(make_lora(m.params, pre, tgt, din, dout, config.lora_rank, config.lora_alpha, rng));
        }
        m.sites.push_back(std::move(site));
    }
    m.final_norm = m.params.add("final_norm", ParamRole::norm, Tensor<T>({d}, T(1)));
    m.unembedding = m.params.add("unembedding", ParamRole::unembedding,
                                 randn<T>({config.vocab_size, d}, rng, 1.0 / std::sqrt(double(d))));
    attach_qlora(m, rng);
    return m;
}

// ---- inference state -------------------------------------------------------

template <class T>
struct InferenceCaches {
    std::vector<SsmState<T>> ssm; // one per Mamba2 block
    std::vector<KvCache<T>> kv;   // one per invocation site
    std::size_t position = 0;

    std::size_t ssm_bytes() const {
        std::size_t b = 0;
        for (const auto & s : ssm) b += s.bytes();
        return b;
    }
    std::size_t kv_bytes() const {
        std::size_t b = 0;
        for (const auto & c : kv) b += c.bytes();
        return b;
    }
    std::size_t bytes() const { return ssm_bytes() + kv_bytes(); }
};

template <class T>
InferenceCaches<T> make_caches(const Model<T> & m, std::size_t capacity) {
    InferenceCaches<T> c;
    const auto dims = m.config.ssm_dims();
    for (std::size_t i = 0; i < m.layers.size(); ++i) c.ssm.push_back(SsmState<T>::zeros(dims));
    for (std::size_t s = 0; s < m.sites.size(); ++s) {
        c.kv.emplace_back(m.config.attn_heads, m.config.attn_head_dim(), capacity);
    }
    return c;
}

// Differentiable forward over a token sequence. With caches, SSM states and
// KV caches are read and advanced in place (prefill in parallel mode, one
// decode step in recurrent mode).
template <class T>
Var<T> forward_graph(GradTape<T> & tape, const Model<T> & m, const std::vector<std::int32_t> & tokens, Mode mode,
                     std::type_identity_t<InferenceCaches<T>> * caches, std::size_t chunk_len = kDefaultChunk) {
    const auto & cfg = m.config;
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
    auto P_ = [&](ParamId id) { return tape.param(m.params, id); };
    const T eps = static_cast<T>(kNormEps);

    auto emb = embedding(P_(m.embedding), tokens);
    auto h = emb;
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
        const auto & layer = m.layers[i];
        auto r = mamba2_block_forward(tape, m.params, layer.ssm, rmsnorm(h, P_(layer.norm), eps), mode,
                                      caches ? &caches->ssm[i] : nullptr, chunk_len);
        h = add(h, r.y);
        if (caches) caches->ssm[i] = std::move(r.state);
        if (const auto * site = m.site_after(i)) {
            const std::size_t s = static_cast<std::size_t>(site - m.sites.data());
            auto in = linear(concat_lastdim(h, emb), P_(site->in_proj));
            auto o = shared_block_forward(tape, m.params, m.blocks[site->block], site->loras, cfg.rotary,
                                          caches ? &caches->kv[s] : nullptr, positions, in);
            h = add(h, linear(o, P_(site->out_proj)));
        }
    }
    if (caches) caches->position += L;
    return linear(rmsnorm(h, P_(m.final_norm), eps), P_(m.unembedding));
}

template <class T>
Tensor<T> forward(const Model<T> & m, const std::vector<std::int32_t> & tokens, Mode mode = Mode::parallel,
                  std::type_identity_t<InferenceCaches<T>> * caches = nullptr) {
    GradTape<T> tape(false);
    return forward_graph(tape, m, tokens, mode, caches).value();
}

// ---- analytic memory model -------------------------------------------------

struct CacheBytes {
    std::size_t kv_bytes = 0;
    std::size_t ssm_state_bytes = 0;
    std::size_t total = 0;
    // Layer-matched pure transformer: every Mamba2 block replaced by an
    // attention layer, plus the attention layers at the sites.
    std::size_t pure_transformer_kv_bytes = 0;
    double ratio = 0.0;
    // Counting convention where the pure baseline has one attention layer per
    // backbone layer (n_mamba_layers), i.e. ratio = layers per site.
    std::size_t pure_convention_kv_bytes = 0;
    double ratio_convention = 0.0;
};

inline std::size_t kv_bytes_per_token_per_layer(const ModelConfig & c, std::size_t dtype_bytes) {
    return c.attn_heads * c.attn_head_dim() * 2 * dtype_bytes;
}

inline CacheBytes analytic_cache_bytes(const ModelConfig & c, std::size_t ctx_len, std::size_t dtype_bytes) {
    CacheBytes r;
    const std::size_t per = kv_bytes_per_token_per_layer(c, dtype_bytes);
    const auto d = c.ssm_dims();
    r.kv_bytes = c.n_sites() * ctx_len * per;
    r.ssm_state_bytes =
        c.n_mamba_layers * (d.n_heads * d.d_head * d.d_state + (d.conv_width - 1) * d.conv_channels()) * dtype_bytes;
    r.total = r.kv_bytes + r.ssm_state_bytes;
    const std::size_t pure_layers = c.n_mamba_layers + c.n_sites();
    r.pure_transformer_kv_bytes = pure_layers * ctx_len * per;
    r.pure_convention_kv_bytes = c.n_mamba_layers * ctx_len * per;
    const double inf = std::numeric_limits<double>::infinity();
    // per-token ratios, so they are defined at ctx_len == 0 as well
    r.ratio = c.n_sites() ? static_cast<double>(pure_layers) / static_cast<double>(c.n_sites()) : inf;
    r.ratio_convention = c.n_sites() ? static_cast<double>(c.n_mamba_layers) / static_cast<double>(c.n_sites()) : inf;
    return r;
}

} // namespace zamba2
