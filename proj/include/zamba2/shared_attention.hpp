// Copyright 2026 The zamba2-desk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "zamba2/ops.hpp"
#include "zamba2/ssm_block.hpp"

namespace zamba2 {

// ---- rotary embeddings -----------------------------------------------------

struct RotaryConfig {
    std::size_t d_emb = 32;
    double base = 10000.0;
    double s = 1.0;
    bool enabled = true;
    // Replaces s^(d_emb/(d_emb-1)) as the angle divisor when set.
    std::optional<double> divisor_override;

    void validate() const {
        if (d_emb < 2 || d_emb % 2 != 0) throw ConfigError("rotary.d_emb", "must be even and >= 2");
        if (!(s >= 1.0)) throw ConfigError("rotary.s", "scaling factor must be >= 1");
        if (!(base > 1.0)) throw ConfigError("rotary.base", "must be > 1");
        if (divisor_override && !(*divisor_override > 0.0)) throw ConfigError("rotary.divisor_override", "must be > 0");
    }
};

// theta_d = base^(-2d / d_emb), d = 0 .. d_emb/2 - 1
inline std::vector<double> rotary_angles(const RotaryConfig & cfg) {
    if (cfg.d_emb < 2 || cfg.d_emb % 2 != 0) throw ConfigError("rotary.d_emb", "must be even and >= 2");
    std::vector<double> th(cfg.d_emb / 2);
    for (std::size_t d = 0; d < th.size(); ++d) {
        th[d] = std::pow(cfg.base, -2.0 * static_cast<double>(d) / static_cast<double>(cfg.d_emb));
    }
    return th;
}

inline double ntk_divisor(double s, std::size_t d_emb) {
    return std::pow(s, static_cast<double>(d_emb) / (static_cast<double>(d_emb) - 1.0));
}

// Uniform NTK-aware rescale: every angle is divided by s^(d_emb/(d_emb-1)).
inline std::vector<double> ntk_rescale(const std::vector<double> & theta, double s, std::size_t d_emb) {
    if (!(s >= 1.0)) throw ConfigError("rotary.s", "scaling factor must be >= 1");
    if (d_emb < 2) throw ConfigError("rotary.d_emb", "must be >= 2");
    if (s == 1.0) return theta;
    const double div = ntk_divisor(s, d_emb);
    std::vector<double> out(theta.size());
    for (std::size_t i = 0; i < theta.size(); ++i) out[i] = theta[i] / div;
    return out;
}

inline std::vector<double> effective_angles(const RotaryConfig & cfg) {
    cfg.validate();
    auto th = rotary_angles(cfg);
    if (cfg.divisor_override) {
        for (auto & v : th) v /= *cfg.divisor_override;
        return th;
    }
    return ntk_rescale(th, cfg.s, cfg.d_emb);
}

// Rotates channel pairs (2i, 2i+1) of x[L, H, d] by positions[l] * theta[i].
template <class T>
Var<T> apply_rotary(Var<T> x, const std::vector<std::int64_t> & positions, const std::vector<double> & theta) {
    const auto & xv = x.value();
    if (xv.rank() != 3) throw DimensionError("apply_rotary: expected [L, H, d]");
    const std::size_t L = xv.dim(0), H = xv.dim(1), d = xv.dim(2);
    if (positions.size() != L) throw DimensionError("apply_rotary: one position per row required");
    if (theta.size() * 2 != d) throw DimensionError("apply_rotary: angle count must be d/2");
    std::vector<T> cs(L * d / 2), sn(L * d / 2);
    for (std::size_t l = 0; l < L; ++l) {
        if (positions[l] < 0) throw InputError("apply_rotary: negative position");
        for (std::size_t i = 0; i < d / 2; ++i) {
            const double phi = static_cast<double>(positions[l]) * theta[i];
            cs[l * d / 2 + i] = static_cast<T>(std::cos(phi));
            sn[l * d / 2 + i] = static_cast<T>(std::sin(phi));
        }
    }
    auto rotate = [L, H, d](const Tensor<T> & in, Tensor<T> & out, const std::vector<T> & c, const std::vector<T> & s, T sign) {
        for (std::size_t l = 0; l < L; ++l)
            for (std::size_t h = 0; h < H; ++h) {
                const T * a = in.data() + (l * H + h) * d;
                T * o = out.data() + (l * H + h) * d;
                for (std::size_t i = 0; i < d / 2; ++i) {
                    const T cc = c[l * d / 2 + i], ss = sign * s[l * d / 2 + i];
                    const T x0 = a[2 * i], x1 = a[2 * i + 1];
                    o[2 * i] += x0 * cc - x1 * ss;
                    o[2 * i + 1] += x0 * ss + x1 * cc;
                }
            }
    };
    Tensor<T> out(xv.shape());
    rotate(xv, out, cs, sn, T(1));
    return x.tape->record(std::move(out), {x}, [x, cs = std::move(cs), sn = std::move(sn), rotate](GradTape<T> & t, std::uint32_t self) {
        rotate(*t.grad(self), t.grad_buffer(x.id), cs, sn, T(-1));
    });
}

// ---- low-rank adapters -----------------------------------------------------

enum class LoraTarget : std::uint8_t { q, k, v, o, gate, up, down };

inline const char * lora_target_name(LoraTarget t) {
    switch (t) {
        case LoraTarget::q: return "q";
        case LoraTarget::k: return "k";
        case LoraTarget::v: return "v";
        case LoraTarget::o: return "o";
        case LoraTarget::gate: return "gate";
        case LoraTarget::up: return "up";
        case LoraTarget::down: return "down";
    }
    return "?";
}

inline std::optional<LoraTarget> lora_target_from_name(std::string_view s) {
    for (auto t : {LoraTarget::q, LoraTarget::k, LoraTarget::v, LoraTarget::o, LoraTarget::gate, LoraTarget::up,
                   LoraTarget::down}) {
        if (s == lora_target_name(t)) return t;
    }
    return std::nullopt;
}

inline constexpr std::size_t kDefaultLoraRank = 16;
inline constexpr double kDefaultLoraAlpha = 32.0;

// Delta (alpha / rank) * B A on one linear of a shared block, private to an
// invocation site.
struct LoraAdapter {
    LoraTarget target = LoraTarget::q;
    std::size_t rank = kDefaultLoraRank;
    double alpha = kDefaultLoraAlpha;
    ParamId a = 0; // [rank, d_in]
    ParamId b = 0; // [d_out, rank]

    double scaling() const { return alpha / static_cast<double>(rank); }
};

template <class T>
LoraAdapter make_lora(ParameterStore<T> & store, const std::string & prefix, LoraTarget target, std::size_t d_in,
                      std::size_t d_out, std::size_t rank, double alpha, Rng & rng,
                      ParamRole role_a = ParamRole::lora_a, ParamRole role_b = ParamRole::lora_b) {
    if (rank == 0) throw ConfigError("lora.rank", "must be positive");
    LoraAdapter ad;
    ad.target = target;
    ad.rank = rank;
    ad.alpha = alpha;
    const std::string base = prefix + ".lora." + lora_target_name(target);
    ad.a = store.add(base + ".A", role_a, randn<T>({rank, d_in}, rng, 1.0 / std::sqrt(double(d_in))));
    ad.b = store.add(base + ".B", role_b, Tensor<T>({d_out, rank}));
    return ad;
}

// y = x W^T + sum over matching adapters of (alpha/r) (x A^T) B^T. W is untouched.
template <class T>
Var<T> lora_linear(GradTape<T> & tape, const ParameterStore<T> & store, Var<T> x, ParamId w, LoraTarget target,
                   std::span<const LoraAdapter> adapters) {
    auto y = linear(x, tape.param(store, w));
    for (const auto & ad : adapters) {
        if (ad.target != target) continue;
        const auto & wshape = store[w].shape();
        if (store[ad.a].shape() != Shape{ad.rank, wshape[1]} || store[ad.b].shape() != Shape{wshape[0], ad.rank}) {
            throw DimensionError(std::string("lora adapter shape does not match the ") + lora_target_name(target) + " projection");
        }
        auto delta = linear(linear(x, tape.param(store, ad.a)), tape.param(store, ad.b));
        y = add(y, scale(delta, static_cast<T>(ad.scaling())));
    }
    return y;
}

// ---- KV cache --------------------------------------------------------------

// Keys and values of one attention invocation site, row-major [len, H, d].
// Storage is reserved up front so decode steps do not reallocate.
template <class T>
class KvCache {
public:
    KvCache() = default;
    KvCache(std::size_t n_heads, std::size_t d_head, std::size_t capacity)
        : n_heads_(n_heads), d_head_(d_head), capacity_(capacity) {
        k_.reserve(capacity * n_heads * d_head);
        v_.reserve(capacity * n_heads * d_head);
    }

    std::size_t size() const noexcept { return len_; }
    std::size_t capacity() const noexcept { return capacity_; }
    std::size_t n_heads() const noexcept { return n_heads_; }
    std::size_t d_head() const noexcept { return d_head_; }
    std::size_t row_elems() const noexcept { return n_heads_ * d_head_; }
    const T * keys() const noexcept { return k_.data(); }
    const T * values() const noexcept { return v_.data(); }

    // Bytes held by cached entries: len * H * d * 2 * sizeof(T).
    std::size_t bytes() const noexcept { return (k_.size() + v_.size()) * sizeof(T); }

    void check_room(std::size_t n) const {
        if (len_ + n > capacity_) {
            throw CapacityError("kv cache capacity " + std::to_string(capacity_) + " exceeded (have " +
                                std::to_string(len_) + ", adding " + std::to_string(n) + ")");
        }
    }

    void append(const Tensor<T> & k, const Tensor<T> & v) {
        const std::size_t n = k.numel() / row_elems();
        check_room(n);
        k_.insert(k_.end(), k.vec().begin(), k.vec().end());
        v_.insert(v_.end(), v.vec().begin(), v.vec().end());
        len_ += n;
    }

    void clear() {
        k_.clear();
        v_.clear();
        len_ = 0;
    }

private:
    std::size_t n_heads_ = 0, d_head_ = 0, capacity_ = 0, len_ = 0;
    std::vector<T> k_, v_;
};

// ---- attention -------------------------------------------------------------

// Causal multi-head attention. Keys/values are the cached prefix (constant)
// followed by the new rows k, v; query row i sits at absolute position
// prefix_len + i and sees keys 0 .. prefix_len + i.
template <class T>
Var<T> causal_attention(Var<T> q, Var<T> k, Var<T> v, const std::type_identity_t<KvCache<T>> * prefix = nullptr) {
    const auto & qv = q.value();
    if (qv.rank() != 3 || k.value().shape() != qv.shape() || v.value().shape() != qv.shape()) {
        throw DimensionError("causal_attention: q, k, v must share shape [L, H, d]");
    }
    const std::size_t L = qv.dim(0), H = qv.dim(1), Dh = qv.dim(2);
    const std::size_t S0 = prefix ? prefix->size() : 0;
    const std::size_t S = S0 + L;
    const T sc = T(1) / std::sqrt(static_cast<T>(Dh));
    const std::size_t HD = H * Dh;
    // probabilities are kept for backward only
    const bool keep = q.requires_grad() || k.requires_grad() || v.requires_grad();
    std::vector<T> probs(keep ? H * L * S : 0, T(0));
    Tensor<T> out(qv.shape());
    RowMat<T> Qh(L, Dh), Kh(S, Dh), Vh(S, Dh), Sc, O;
    for (std::size_t h = 0; h < H; ++h) {
        for (std::size_t i = 0; i < L; ++i)
            for (std::size_t c = 0; c < Dh; ++c) Qh(i, c) = qv[i * HD + h * Dh + c];
        for (std::size_t j = 0; j < S; ++j) {
            const T * kr = j < S0 ? prefix->keys() + j * HD : k.value().data() + (j - S0) * HD;
            const T * vr = j < S0 ? prefix->values() + j * HD : v.value().data() + (j - S0) * HD;
            for (std::size_t c = 0; c < Dh; ++c) {
                Kh(j, c) = kr[h * Dh + c];
                Vh(j, c) = vr[h * Dh + c];
            }
        }
        Sc.noalias() = (Qh * Kh.transpose()) * sc;
        for (std::size_t i = 0; i < L; ++i) {
            const std::size_t lim = S0 + i + 1;
            T m = Sc(i, 0);
            for (std::size_t j = 1; j < lim; ++j) m = std::max(m, Sc(i, j));
            T s = 0;
            for (std::size_t j = 0; j < lim; ++j) s += (Sc(i, j) = std::exp(Sc(i, j) - m));
            for (std::size_t j = 0; j < lim; ++j) Sc(i, j) /= s;
            for (std::size_t j = lim; j < S; ++j) Sc(i, j) = T(0);
            if (keep) std::copy_n(Sc.row(i).data(), S, probs.data() + (h * L + i) * S);
        }
        O.noalias() = Sc * Vh;
        for (std::size_t i = 0; i < L; ++i)
            for (std::size_t c = 0; c < Dh; ++c) out[i * HD + h * Dh + c] = O(i, c);
    }
    const T * pk = prefix ? prefix->keys() : nullptr;
    const T * pv = prefix ? prefix->values() : nullptr;
    return q.tape->record(std::move(out), {q, k, v},
                          [q, k, v, probs = std::move(probs), L, H, Dh, S0, S, sc, pk, pv](GradTape<T> & t, std::uint32_t self) {
        const std::size_t HD = H * Dh;
        const auto & g = *t.grad(self);
        const auto & qv = t.value(q.id);
        const auto & kv = t.value(k.id);
        const auto & vv = t.value(v.id);
        const bool gq = t.requires_grad(q.id), gk = t.requires_grad(k.id), gv = t.requires_grad(v.id);
        RowMat<T> Qh(L, Dh), Kh(S, Dh), Vh(S, Dh), G(L, Dh), dP, dS, dQ, dK, dV;
        for (std::size_t h = 0; h < H; ++h) {
            CMapMat<T> Ph(probs.data() + h * L * S, L, S);
            for (std::size_t i = 0; i < L; ++i)
                for (std::size_t c = 0; c < Dh; ++c) {
                    Qh(i, c) = qv[i * HD + h * Dh + c];
                    G(i, c) = g[i * HD + h * Dh + c];
                }
            for (std::size_t j = 0; j < S; ++j) {
                const T * kr = j < S0 ? pk + j * HD : kv.data() + (j - S0) * HD;
                const T * vr = j < S0 ? pv + j * HD : vv.data() + (j - S0) * HD;
                for (std::size_t c = 0; c < Dh; ++c) {
                    Kh(j, c) = kr[h * Dh + c];
                    Vh(j, c) = vr[h * Dh + c];
                }
            }
            dP.noalias() = G * Vh.transpose();
            dS.resize(L, S);
            for (std::size_t i = 0; i < L; ++i) {
                T dot = 0;
                for (std::size_t j = 0; j < S; ++j) dot += Ph(i, j) * dP(i, j);
                for (std::size_t j = 0; j < S; ++j) dS(i, j) = Ph(i, j) * (dP(i, j) - dot) * sc;
            }
            if (gq) {
                dQ.noalias() = dS * Kh;
                auto & gqb = t.grad_buffer(q.id);
                for (std::size_t i = 0; i < L; ++i)
                    for (std::size_t c = 0; c < Dh; ++c) gqb[i * HD + h * Dh + c] += dQ(i, c);
            }
            if (gk) {
                dK.noalias() = dS.transpose() * Qh;
                auto & gkb = t.grad_buffer(k.id);
                for (std::size_t j = S0; j < S; ++j)
                    for (std::size_t c = 0; c < Dh; ++c) gkb[(j - S0) * HD + h * Dh + c] += dK(j, c);
            }
            if (gv) {
                dV.noalias() = Ph.transpose() * G;
                auto & gvb = t.grad_buffer(v.id);
                for (std::size_t j = S0; j < S; ++j)
                    for (std::size_t c = 0; c < Dh; ++c) gvb[(j - S0) * HD + h * Dh + c] += dV(j, c);
            }
        }
    });
}

// ---- shared transformer block ---------------------------------------------

inline constexpr std::size_t kDefaultMlpExpansion = 4;

struct SharedBlockParams {
    std::size_t d_model = 0;
    std::size_t n_heads = 0;
    std::size_t d_head = 0;
    std::size_t mlp_hidden = 0;
    ParamId norm_attn = 0, wq = 0, wk = 0, wv = 0, wo = 0;
    ParamId norm_mlp = 0, w_gate = 0, w_up = 0, w_down = 0;

    std::pair<std::size_t, std::size_t> io_dims(LoraTarget t) const {
        switch (t) {
            case LoraTarget::q:
            case LoraTarget::k:
            case LoraTarget::v:
            case LoraTarget::o: return {d_model, d_model};
            case LoraTarget::gate:
            case LoraTarget::up: return {d_model, mlp_hidden};
            case LoraTarget::down: return {mlp_hidden, d_model};
        }
        return {0, 0};
    }
};

template <class T>
SharedBlockParams make_shared_block(ParameterStore<T> & store, const std::string & prefix, std::size_t d_model,
                                    std::size_t n_heads, std::size_t mlp_expansion, Rng & rng,
                                    std::size_t n_layers_for_init = 1) {
    if (n_heads == 0 || d_model % n_heads != 0) throw ConfigError("attn.n_heads", "must divide d_model");
    SharedBlockParams b;
    b.d_model = d_model;
    b.n_heads = n_heads;
    b.d_head = d_model / n_heads;
    b.mlp_hidden = mlp_expansion * d_model;
    const double sd = 1.0 / std::sqrt(double(d_model));
    const double out_sd_attn = 1.0 / std::sqrt(double(d_model) * 2.0 * double(n_layers_for_init));
    const double out_sd_mlp = 1.0 / std::sqrt(double(b.mlp_hidden) * 2.0 * double(n_layers_for_init));
    b.norm_attn = store.add(prefix + ".attn_norm", ParamRole::norm, Tensor<T>({d_model}, T(1)));
    b.wq = store.add(prefix + ".attn.q", ParamRole::attn_q, randn<T>({d_model, d_model}, rng, sd));
    b.wk = store.add(prefix + ".attn.k", ParamRole::attn_k, randn<T>({d_model, d_model}, rng, sd));
    b.wv = store.add(prefix + ".attn.v", ParamRole::attn_v, randn<T>({d_model, d_model}, rng, sd));
    b.wo = store.add(prefix + ".attn.o", ParamRole::attn_o, randn<T>({d_model, d_model}, rng, out_sd_attn));
    b.norm_mlp = store.add(prefix + ".mlp_norm", ParamRole::norm, Tensor<T>({d_model}, T(1)));
    b.w_gate = store.add(prefix + ".mlp.gate", ParamRole::mlp_gate, randn<T>({b.mlp_hidden, d_model}, rng, sd));
    b.w_up = store.add(prefix + ".mlp.up", ParamRole::mlp_up, randn<T>({b.mlp_hidden, d_model}, rng, sd));
    b.w_down = store.add(prefix + ".mlp.down", ParamRole::mlp_down, randn<T>({d_model, b.mlp_hidden}, rng, out_sd_mlp));
    return b;
}

// Pre-norm causal attention followed by a pre-norm silu-gated MLP, each
// with a residual connection. With a cache, `positions` must continue from
// the cached length and the cache is extended by the new keys/values.
template <class T>
Var<T> shared_block_forward(GradTape<T> & tape, const ParameterStore<T> & store, const SharedBlockParams & blk,
                            std::span<const LoraAdapter> loras, const RotaryConfig & rotary,
                            std::type_identity_t<KvCache<T>> * cache,
                            const std::vector<std::int64_t> & positions, Var<T> x) {
    const auto & xv = x.value();
    if (xv.rank() != 2 || xv.dim(1) != blk.d_model) throw DimensionError("shared_block_forward: x must be [L, d_model]");
    const std::size_t L = xv.dim(0);
    if (positions.size() != L) throw ContractError("shared_block_forward: one position per row required");
    if (cache) {
        for (std::size_t i = 0; i < L; ++i) {
            if (positions[i] != static_cast<std::int64_t>(cache->size() + i)) {
                throw ContractError("shared_block_forward: positions must continue from the cache length");
            }
        }
        cache->check_room(L);
    }
    const T eps = static_cast<T>(kNormEps);
    auto P_ = [&](ParamId id) { return tape.param(store, id); };
    const Shape heads{L, blk.n_heads, blk.d_head};

    auto hn = rmsnorm(x, P_(blk.norm_attn), eps);
    auto q = reshape(lora_linear(tape, store, hn, blk.wq, LoraTarget::q, loras), heads);
    auto k = reshape(lora_linear(tape, store, hn, blk.wk, LoraTarget::k, loras), heads);
    auto v = reshape(lora_linear(tape, store, hn, blk.wv, LoraTarget::v, loras), heads);
    if (rotary.enabled) {
        const auto theta = effective_angles(rotary);
        q = apply_rotary(q, positions, theta);
        k = apply_rotary(k, positions, theta);
    }
    auto att = causal_attention(q, k, v, cache);
    if (cache) cache->append(k.value(), v.value());
    auto o = lora_linear(tape, store, reshape(att, {L, blk.d_model}), blk.wo, LoraTarget::o, loras);
    auto x2 = add(x, o);

    auto hm = rmsnorm(x2, P_(blk.norm_mlp), eps);
    auto gate = silu(lora_linear(tape, store, hm, blk.w_gate, LoraTarget::gate, loras));
    auto up = lora_linear(tape, store, hm, blk.w_up, LoraTarget::up, loras);
    auto down = lora_linear(tape, store, mul(gate, up), blk.w_down, LoraTarget::down, loras);
    return add(x2, down);
}

} // namespace zamba2
