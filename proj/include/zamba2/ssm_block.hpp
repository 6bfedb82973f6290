// Copyright 2026 The zamba2-desk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "zamba2/ops.hpp"

namespace zamba2 {

inline constexpr double kNormEps = 1e-5;

enum class Mode { parallel, recurrent };

struct SsmDims {
    std::size_t d_model = 128;
    std::size_t expand = 2;
    std::size_t n_heads = 4;
    std::size_t d_head = 64;
    std::size_t d_state = 64;
    std::size_t conv_width = 4;

    std::size_t d_inner() const { return n_heads * d_head; }
    // x, B and C all pass through the short convolution.
    std::size_t conv_channels() const { return d_inner() + 2 * n_heads * d_state; }
    std::size_t in_proj_out() const { return d_inner() + conv_channels(); }

    void validate() const {
        if (d_model == 0) throw ConfigError("ssm.d_model", "must be positive");
        if (n_heads == 0 || d_head == 0) throw ConfigError("ssm.n_heads", "heads and head width must be positive");
        if (d_state == 0) throw ConfigError("ssm.d_state", "must be positive");
        if (conv_width == 0) throw ConfigError("ssm.conv_width", "must be >= 1");
        if (n_heads * d_head != expand * d_model) {
            throw ConfigError("ssm.d_head", "n_heads * d_head must equal expand * d_model");
        }
    }
};

// Weight ids of one Mamba2 block inside a ParameterStore.
struct SsmBlockParams {
    SsmDims dims;
    ParamId in_proj = 0;     // [d_inner + conv_channels, d_model] -> z | x B C
    ParamId conv_kernel = 0; // [conv_width, conv_channels]
    ParamId conv_bias = 0;   // [conv_channels]
    ParamId dt_proj = 0;     // [n_heads, d_model]
    ParamId dt_bias = 0;     // [n_heads]
    ParamId a_log = 0;       // [n_heads], A = -exp(a_log)
    ParamId d_skip = 0;      // [n_heads]
    ParamId norm = 0;        // [d_inner]
    ParamId out_proj = 0;    // [d_model, d_inner]
};

// Inverse of softplus, for initializing dt_bias from a target dt.
inline double inverse_softplus(double y) { return y + std::log(-std::expm1(-y)); }

template <class T>
SsmBlockParams make_ssm_block(ParameterStore<T> & store, const std::string & prefix, const SsmDims & dims,
                              Rng & rng, std::size_t n_layers_for_init = 1) {
    dims.validate();
    SsmBlockParams p;
    p.dims = dims;
    const std::size_t H = dims.n_heads, Di = dims.d_inner(), Cc = dims.conv_channels(), dm = dims.d_model;
    p.in_proj = store.add(prefix + ".in_proj", ParamRole::ssm_in_proj,
                          randn<T>({dims.in_proj_out(), dm}, rng, 1.0 / std::sqrt(double(dm))));
    const double kb = 1.0 / std::sqrt(double(dims.conv_width));
    p.conv_kernel = store.add(prefix + ".conv.kernel", ParamRole::ssm_conv_kernel,
                              rand_uniform<T>({dims.conv_width, Cc}, rng, -kb, kb));
    p.conv_bias = store.add(prefix + ".conv.bias", ParamRole::ssm_conv_bias, Tensor<T>({Cc}));
    p.dt_proj = store.add(prefix + ".dt_proj.weight", ParamRole::ssm_dt_proj,
                          randn<T>({H, dm}, rng, 0.1 / std::sqrt(double(dm))));
    Tensor<T> dt_bias({H});
    for (std::size_t h = 0; h < H; ++h) {
        // initial dt log-uniform in [0.001, 0.1]
        const double dt = std::exp(rng.uniform(std::log(0.001), std::log(0.1)));
        dt_bias[h] = static_cast<T>(inverse_softplus(dt));
    }
    p.dt_bias = store.add(prefix + ".dt_proj.bias", ParamRole::ssm_dt_bias, std::move(dt_bias));
    Tensor<T> a_log({H});
    for (std::size_t h = 0; h < H; ++h) a_log[h] = static_cast<T>(std::log(rng.uniform(1.0, 16.0)));
    p.a_log = store.add(prefix + ".A_log", ParamRole::ssm_a_log, std::move(a_log));
    p.d_skip = store.add(prefix + ".D", ParamRole::ssm_d, Tensor<T>({H}, T(1)));
    p.norm = store.add(prefix + ".norm", ParamRole::norm, Tensor<T>({Di}, T(1)));
    p.out_proj = store.add(prefix + ".out_proj", ParamRole::ssm_out_proj,
                           randn<T>({dm, Di}, rng, 1.0 / std::sqrt(double(Di) * 2.0 * double(n_layers_for_init))));
    return p;
}

// Recurrent state of one block. Its size depends only on the block dims.
template <class T>
struct SsmState {
    Tensor<T> h;         // [n_heads, d_head, d_state]
    Tensor<T> conv_tail; // [conv_width - 1, conv_channels]; empty when conv_width == 1

    static SsmState zeros(const SsmDims & d) {
        SsmState s;
        s.h = Tensor<T>({d.n_heads, d.d_head, d.d_state});
        if (d.conv_width > 1) s.conv_tail = Tensor<T>({d.conv_width - 1, d.conv_channels()});
        return s;
    }

    std::size_t bytes() const { return h.bytes() + conv_tail.bytes(); }

    static std::size_t bytes_for(const SsmDims & d) {
        return (d.n_heads * d.d_head * d.d_state + (d.conv_width - 1) * d.conv_channels()) * sizeof(T);
    }
};

// ---- scan kernels ----------------------------------------------------------

template <class T>
struct ScanResult {
    Tensor<T> y;       // [L, H, P]
    Tensor<T> h_final; // [H, P, N]
};

namespace detail {

struct ScanDims {
    std::size_t L, H, P, N;
};

template <class T>
ScanDims check_scan_args(const Tensor<T> & x, const Tensor<T> & dt, const Tensor<T> & A, const Tensor<T> & B,
                         const Tensor<T> & C, const Tensor<T> * D, const Tensor<T> & h0) {
    if (x.rank() != 3 || B.rank() != 3 || C.rank() != 3 || dt.rank() != 2) {
        throw DimensionError("ssd_scan: expected x[L,H,P], dt[L,H], B[L,H,N], C[L,H,N]");
    }
    const ScanDims d{x.dim(0), x.dim(1), x.dim(2), B.dim(2)};
    if (dt.dim(0) != d.L || dt.dim(1) != d.H || A.numel() != d.H || B.dim(0) != d.L || B.dim(1) != d.H ||
        C.shape() != B.shape() || (D && D->numel() != d.H)) {
        throw DimensionError("ssd_scan: inconsistent operand shapes");
    }
    if (!h0.empty() && h0.shape() != Shape{d.H, d.P, d.N}) throw DimensionError("ssd_scan: h0 must be [H,P,N]");
    for (auto v : dt.vec()) {
        if (!(v > T(0))) throw ContractError("ssd_scan: dt must be positive");
    }
    for (auto v : A.vec()) {
        if (!(v < T(0))) throw ContractError("ssd_scan: A must be negative");
    }
    return d;
}

// One recurrence step for all heads: h <- exp(dt A) h + dt x B^T; y = h C + D x.
template <class T>
void scan_step(const ScanDims & d, std::size_t t, const T * x, const T * dt, const T * A, const T * B, const T * C,
               const T * D, T * h, T * y) {
    for (std::size_t hh = 0; hh < d.H; ++hh) {
        const T dth = dt[t * d.H + hh];
        const T a = std::exp(dth * A[hh]);
        const T * xb = x + (t * d.H + hh) * d.P;
        const T * bb = B + (t * d.H + hh) * d.N;
        const T * cb = C + (t * d.H + hh) * d.N;
        T * yb = y ? y + (t * d.H + hh) * d.P : nullptr;
        for (std::size_t p = 0; p < d.P; ++p) {
            T * hp = h + (hh * d.P + p) * d.N;
            const T u = dth * xb[p];
            T acc = 0;
            for (std::size_t n = 0; n < d.N; ++n) {
                hp[n] = a * hp[n] + u * bb[n];
                acc += hp[n] * cb[n];
            }
            if (yb) yb[p] = acc + (D ? D[hh] * xb[p] : T(0));
        }
    }
}

} // namespace detail

// Token-by-token recurrence. Reference execution and the decode path.
template <class T>
ScanResult<T> ssd_scan_sequential(const Tensor<T> & x, const Tensor<T> & dt, const Tensor<T> & A, const Tensor<T> & B,
                                  const Tensor<T> & C, const Tensor<T> * D = nullptr, const Tensor<T> & h0 = {}) {
    const auto d = detail::check_scan_args(x, dt, A, B, C, D, h0);
    ScanResult<T> r;
    r.y = Tensor<T>(x.shape());
    r.h_final = h0.empty() ? Tensor<T>({d.H, d.P, d.N}) : h0;
    for (std::size_t t = 0; t < d.L; ++t) {
        detail::scan_step(d, t, x.data(), dt.data(), A.data(), B.data(), C.data(), D ? D->data() : nullptr,
                          r.h_final.data(), r.y.data());
    }
    return r;
}

// Chunked matmul form: within a chunk, outputs are a masked decay-weighted
// (C B^T) matrix applied to x plus the decayed contribution of the carried
// state; the state is then advanced once per chunk.
template <class T>
ScanResult<T> ssd_scan_chunked(const Tensor<T> & x, const Tensor<T> & dt, const Tensor<T> & A, const Tensor<T> & B,
                               const Tensor<T> & C, const Tensor<T> * D, const Tensor<T> & h0, std::size_t chunk_len) {
    if (chunk_len < 1) throw ContractError("ssd_scan_chunked: chunk_len must be >= 1");
    const auto d = detail::check_scan_args(x, dt, A, B, C, D, h0);
    ScanResult<T> r;
    r.y = Tensor<T>(x.shape());
    r.h_final = h0.empty() ? Tensor<T>({d.H, d.P, d.N}) : h0;
    const std::size_t HP = d.H * d.P, HN = d.H * d.N;
    RowMat<T> Xm, Bm, Cm, G, Y, Hn;
    std::vector<T> cum, w;
    for (std::size_t hh = 0; hh < d.H; ++hh) {
        const T Ah = A[hh];
        MapMat<T> hstate(r.h_final.data() + hh * d.P * d.N, d.P, d.N);
        for (std::size_t c0 = 0; c0 < d.L; c0 += chunk_len) {
            const std::size_t Q = std::min(chunk_len, d.L - c0);
            Xm.resize(Q, d.P);
            Bm.resize(Q, d.N);
            Cm.resize(Q, d.N);
            cum.assign(Q, T(0));
            T run = 0;
            for (std::size_t i = 0; i < Q; ++i) {
                const std::size_t t = c0 + i;
                run += dt[t * d.H + hh] * Ah;
                cum[i] = run;
                for (std::size_t p = 0; p < d.P; ++p) Xm(i, p) = x[t * HP + hh * d.P + p];
                for (std::size_t n = 0; n < d.N; ++n) {
                    Bm(i, n) = B[t * HN + hh * d.N + n];
                    Cm(i, n) = C[t * HN + hh * d.N + n];
                }
            }
            // intra-chunk: G[i,j] = exp(cum_i - cum_j) dt_j (C_i . B_j), j <= i
            G.noalias() = Cm * Bm.transpose();
            for (std::size_t i = 0; i < Q; ++i) {
                for (std::size_t j = 0; j < Q; ++j) {
                    G(i, j) = j <= i ? G(i, j) * std::exp(cum[i] - cum[j]) * dt[(c0 + j) * d.H + hh] : T(0);
                }
            }
            Y.noalias() = G * Xm;
            // inter-chunk: decayed carried state read out through C
            RowMat<T> Yc = Cm * hstate.transpose();
            for (std::size_t i = 0; i < Q; ++i) Y.row(i) += std::exp(cum[i]) * Yc.row(i);
            const T Dh = D ? (*D)[hh] : T(0);
            for (std::size_t i = 0; i < Q; ++i) {
                const std::size_t t = c0 + i;
                for (std::size_t p = 0; p < d.P; ++p) r.y[t * HP + hh * d.P + p] = Y(i, p) + Dh * Xm(i, p);
            }
            // state carry: h <- exp(cum_end) h + sum_j exp(cum_end - cum_j) dt_j x_j B_j^T
            w.assign(Q, T(0));
            for (std::size_t j = 0; j < Q; ++j) w[j] = std::exp(cum[Q - 1] - cum[j]) * dt[(c0 + j) * d.H + hh];
            for (std::size_t j = 0; j < Q; ++j) Xm.row(j) *= w[j];
            Hn.noalias() = Xm.transpose() * Bm;
            hstate = std::exp(cum[Q - 1]) * hstate + Hn;
        }
    }
    return r;
}

// Differentiable scan. chunk_len == 0 selects the sequential kernel. The
// returned final state is a plain value: gradients do not flow through it.
// The backward pass recomputes states from h0 (checkpointing every
// kCheckpoint steps) and runs the adjoint recurrence in reverse time.
template <class T>
std::pair<Var<T>, Tensor<T>> ssd_scan(Var<T> x, Var<T> dt, Var<T> A, Var<T> B, Var<T> C, Var<T> D, const Tensor<T> & h0,
                                      std::size_t chunk_len) {
    ScanResult<T> r = chunk_len == 0
                          ? ssd_scan_sequential(x.value(), dt.value(), A.value(), B.value(), C.value(), &D.value(), h0)
                          : ssd_scan_chunked(x.value(), dt.value(), A.value(), B.value(), C.value(), &D.value(), h0, chunk_len);
    Tensor<T> h0c = h0;
    auto y = x.tape->record(std::move(r.y), {x, dt, A, B, C, D}, [=](GradTape<T> & t, std::uint32_t self) {
        constexpr std::size_t kCheckpoint = 64;
        const auto & xv = t.value(x.id);
        const auto & dtv = t.value(dt.id);
        const auto & Av = t.value(A.id);
        const auto & Bv = t.value(B.id);
        const auto & Cv = t.value(C.id);
        const auto & Dv = t.value(D.id);
        const auto & gy = *t.grad(self);
        const detail::ScanDims d{xv.dim(0), xv.dim(1), xv.dim(2), Bv.dim(2)};
        const std::size_t S = d.H * d.P * d.N;
        // forward pass storing a state every kCheckpoint steps (state *before* step t)
        const std::size_t n_ck = (d.L + kCheckpoint - 1) / kCheckpoint;
        std::vector<T> ck(n_ck * S);
        std::vector<T> h(S, T(0));
        if (!h0c.empty()) std::copy(h0c.vec().begin(), h0c.vec().end(), h.begin());
        for (std::size_t t0 = 0; t0 < d.L; ++t0) {
            if (t0 % kCheckpoint == 0) std::copy(h.begin(), h.end(), ck.begin() + (t0 / kCheckpoint) * S);
            detail::scan_step<T>(d, t0, xv.data(), dtv.data(), Av.data(), Bv.data(), Cv.data(), nullptr, h.data(), nullptr);
        }
        Tensor<T> gx(xv.shape()), gdt(dtv.shape()), gA(Av.shape()), gB(Bv.shape()), gC(Cv.shape()), gD(Dv.shape());
        std::vector<T> g(S, T(0));           // dL/dh_t carried backwards
        std::vector<T> seg((kCheckpoint + 1) * S); // states h_{s-1} .. h_{e-1} within a segment
        for (std::size_t k = n_ck; k-- > 0;) {
            const std::size_t s = k * kCheckpoint, e = std::min(d.L, s + kCheckpoint);
            std::copy(ck.begin() + k * S, ck.begin() + (k + 1) * S, seg.begin());
            for (std::size_t t0 = s; t0 < e; ++t0) {
                std::copy(seg.begin() + (t0 - s) * S, seg.begin() + (t0 - s + 1) * S, seg.begin() + (t0 - s + 1) * S);
                detail::scan_step<T>(d, t0, xv.data(), dtv.data(), Av.data(), Bv.data(), Cv.data(), nullptr,
                                     seg.data() + (t0 - s + 1) * S, nullptr);
            }
            for (std::size_t t0 = e; t0-- > s;) {
                const T * hcur = seg.data() + (t0 - s + 1) * S;
                const T * hprev = seg.data() + (t0 - s) * S;
                for (std::size_t hh = 0; hh < d.H; ++hh) {
                    const std::size_t ix = (t0 * d.H + hh);
                    const T dth = dtv[ix];
                    const T a = std::exp(dth * Av[hh]);
                    const T * xb = xv.data() + ix * d.P;
                    const T * bb = Bv.data() + ix * d.N;
                    const T * cb = Cv.data() + ix * d.N;
                    const T * gyb = gy.data() + ix * d.P;
                    T ddt = 0, da = 0, dD = 0;
                    for (std::size_t p = 0; p < d.P; ++p) {
                        T * gp = g.data() + (hh * d.P + p) * d.N;
                        const T * hc = hcur + (hh * d.P + p) * d.N;
                        const T * hp = hprev + (hh * d.P + p) * d.N;
                        const T gyp = gyb[p];
                        dD += gyp * xb[p];
                        T gxB = 0;
                        for (std::size_t n = 0; n < d.N; ++n) {
                            gC[ix * d.N + n] += hc[n] * gyp;
                            gp[n] += gyp * cb[n];
                            gxB += gp[n] * bb[n];
                            gB[ix * d.N + n] += dth * gp[n] * xb[p];
                            da += gp[n] * hp[n];
                        }
                        gx[ix * d.P + p] += dth * gxB + Dv[hh] * gyp;
                        ddt += gxB * xb[p];
                        for (std::size_t n = 0; n < d.N; ++n) gp[n] *= a;
                    }
                    gdt[ix] += ddt + da * a * Av[hh];
                    gA[hh] += da * a * dth;
                    gD[hh] += dD;
                }
            }
        }
        auto acc = [&t](Var<T> v, const Tensor<T> & gsrc) {
            if (t.requires_grad(v.id)) detail::axpy(t.grad_buffer(v.id), gsrc);
        };
        acc(x, gx);
        acc(dt, gdt);
        acc(A, gA);
        acc(B, gB);
        acc(C, gC);
        acc(D, gD);
    });
    return {y, std::move(r.h_final)};
}

template <class T>
struct SsmForward {
    Var<T> y;
    SsmState<T> state;
};

inline constexpr std::size_t kDefaultChunk = 64;

// in_proj -> causal conv + silu -> selective scan -> silu(z) gate -> norm -> out_proj.
template <class T>
SsmForward<T> mamba2_block_forward(GradTape<T> & tape, const ParameterStore<T> & store, const SsmBlockParams & p,
                                   Var<T> x, Mode mode, const std::type_identity_t<SsmState<T>> * state,
                                   std::size_t chunk_len = kDefaultChunk) {
    const auto & dm = p.dims;
    if (x.value().rank() != 2 || x.value().dim(1) != dm.d_model) throw DimensionError("mamba2_block_forward: x must be [L, d_model]");
    const std::size_t L = x.value().dim(0);
    if (mode == Mode::recurrent) {
        if (!state) throw ContractError("mamba2_block_forward: recurrent mode requires a state");
        if (L != 1) throw ContractError("mamba2_block_forward: recurrent mode processes exactly one token");
    }
    const std::size_t H = dm.n_heads, P = dm.d_head, N = dm.d_state, Di = dm.d_inner(), Cc = dm.conv_channels();
    const std::size_t w = dm.conv_width;
    auto P_ = [&](ParamId id) { return tape.param(store, id); };

    auto zxbc = linear(x, P_(p.in_proj));
    auto z = slice_lastdim(zxbc, 0, Di);
    auto xbc = slice_lastdim(zxbc, Di, Cc);
    auto dt = softplus(linear(x, P_(p.dt_proj), P_(p.dt_bias)));

    const Tensor<T> empty_tail;
    const Tensor<T> & tail = state ? state->conv_tail : empty_tail;
    SsmState<T> next;
    if (w > 1) {
        // last w-1 rows of [tail ; xbc]
        next.conv_tail = Tensor<T>({w - 1, Cc});
        const auto & xv = xbc.value();
        for (std::size_t r = 0; r < w - 1; ++r) {
            const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(L + r) - static_cast<std::ptrdiff_t>(w - 1);
            if (src >= 0) {
                std::copy_n(xv.data() + static_cast<std::size_t>(src) * Cc, Cc, next.conv_tail.data() + r * Cc);
            } else if (!tail.empty()) {
                std::copy_n(tail.data() + static_cast<std::size_t>(static_cast<std::ptrdiff_t>(w - 1) + src) * Cc, Cc,
                            next.conv_tail.data() + r * Cc);
            }
        }
    }
    auto conv = silu(causal_conv1d(xbc, P_(p.conv_kernel), P_(p.conv_bias), tail));
    auto xs = reshape(slice_lastdim(conv, 0, Di), {L, H, P});
    auto Bs = reshape(slice_lastdim(conv, Di, H * N), {L, H, N});
    auto Cs = reshape(slice_lastdim(conv, Di + H * N, H * N), {L, H, N});
    auto A = neg(exp(P_(p.a_log)));
    const Tensor<T> empty_h;
    auto [ys, hT] = ssd_scan(xs, reshape(dt, {L, H}), A, Bs, Cs, P_(p.d_skip), state ? state->h : empty_h,
                             mode == Mode::recurrent ? 0 : chunk_len);
    next.h = std::move(hT);
    auto y = mul(reshape(ys, {L, Di}), silu(z));
    y = rmsnorm(y, P_(p.norm), static_cast<T>(kNormEps));
    return {linear(y, P_(p.out_proj)), std::move(next)};
}

} // namespace zamba2
