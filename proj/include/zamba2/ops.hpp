// Copyright 2026 The zamba2-desk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "zamba2/autodiff.hpp"

// Differentiable primitives. Every op computes its forward value eagerly and
// records a closure that accumulates input gradients during the reverse sweep.

namespace zamba2 {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using CMapMat = Eigen::Map<const RowMat<T>>;

namespace detail {

template <class T>
void require_same_shape(const Tensor<T> & a, const Tensor<T> & b, const char * op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
}

template <class T>
void axpy(Tensor<T> & dst, const Tensor<T> & src, T alpha = T(1)) {
    T * d = dst.data();
    const T * s = src.data();
    const std::size_t n = dst.numel();
    for (std::size_t i = 0; i < n; ++i) d[i] += alpha * s[i];
}

inline Shape with_last(Shape s, std::size_t last) {
    s.back() = last;
    return s;
}

template <class T> T sigmoid(T x) { return T(1) / (T(1) + std::exp(-x)); }

template <class T> T softplus(T x) {
    if (x > T(20)) return x;
    if (x < T(-20)) return std::exp(x);
    return std::log1p(std::exp(x));
}

} // namespace detail

// ---- elementwise ----------------------------------------------------------

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
    detail::require_same_shape(a.value(), b.value(), "add");
    Tensor<T> out = a.value();
    detail::axpy(out, b.value());
    return a.tape->record(std::move(out), {a, b}, [a, b](GradTape<T> & t, std::uint32_t self) {
        const auto & g = *t.grad(self);
        if (t.requires_grad(a.id)) detail::axpy(t.grad_buffer(a.id), g);
        if (t.requires_grad(b.id)) detail::axpy(t.grad_buffer(b.id), g);
    });
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
    detail::require_same_shape(a.value(), b.value(), "sub");
    Tensor<T> out = a.value();
    detail::axpy(out, b.value(), T(-1));
    return a.tape->record(std::move(out), {a, b}, [a, b](GradTape<T> & t, std::uint32_t self) {
        const auto & g = *t.grad(self);
        if (t.requires_grad(a.id)) detail::axpy(t.grad_buffer(a.id), g);
        if (t.requires_grad(b.id)) detail::axpy(t.grad_buffer(b.id), g, T(-1));
    });
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
    detail::require_same_shape(a.value(), b.value(), "mul");
    Tensor<T> out = a.value();
    const auto & bv = b.value();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
    return a.tape->record(std::move(out), {a, b}, [a, b](GradTape<T> & t, std::uint32_t self) {
        const auto & g = *t.grad(self);
        if (t.requires_grad(a.id)) {
            auto & ga = t.grad_buffer(a.id);
            const auto & bv = t.value(b.id);
            for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * bv[i];
        }
        if (t.requires_grad(b.id)) {
            auto & gb = t.grad_buffer(b.id);
            const auto & av = t.value(a.id);
            for (std::size_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * av[i];
        }
    });
}

template <class T>
Var<T> scale(Var<T> a, T s) {
    Tensor<T> out = a.value();
    for (auto & v : out.vec()) v *= s;
    return a.tape->record(std::move(out), {a}, [a, s](GradTape<T> & t, std::uint32_t self) {
        detail::axpy(t.grad_buffer(a.id), *t.grad(self), s);
    });
}

// a[..., d] + v[d]
template <class T>
Var<T> add_lastdim(Var<T> a, Var<T> v) {
    const auto & av = a.value();
    const auto & vv = v.value();
    if (vv.numel() != av.cols()) throw DimensionError("add_lastdim: vector length does not match last dim");
    Tensor<T> out = av;
    const std::size_t d = av.cols();
    for (std::size_t r = 0; r < av.rows(); ++r) {
        for (std::size_t c = 0; c < d; ++c) out[r * d + c] += vv[c];
    }
    return a.tape->record(std::move(out), {a, v}, [a, v](GradTape<T> & t, std::uint32_t self) {
        const auto & g = *t.grad(self);
        if (t.requires_grad(a.id)) detail::axpy(t.grad_buffer(a.id), g);
        if (t.requires_grad(v.id)) {
            auto & gv = t.grad_buffer(v.id);
            const std::size_t d = gv.numel();
            for (std::size_t r = 0; r < g.numel() / d; ++r) {
                for (std::size_t c = 0; c < d; ++c) gv[c] += g[r * d + c];
            }
        }
    });
}

// a[..., d] * v[d]
template <class T>
Var<T> mul_lastdim(Var<T> a, Var<T> v) {
    const auto & av = a.value();
    const auto & vv = v.value();
    if (vv.numel() != av.cols()) throw DimensionError("mul_lastdim: vector length does not match last dim");
    Tensor<T> out = av;
    const std::size_t d = av.cols();
    for (std::size_t r = 0; r < av.rows(); ++r) {
        for (std::size_t c = 0; c < d; ++c) out[r * d + c] *= vv[c];
    }
    return a.tape->record(std::move(out), {a, v}, [a, v](GradTape<T> & t, std::uint32_t self) {
        const auto & g = *t.grad(self);
        const auto & av = t.value(a.id);
        const auto & vv = t.value(v.id);
        const std::size_t d = vv.numel();
        const std::size_t rows = g.numel() / d;
        if (t.requires_grad(a.id)) {
            auto & ga = t.grad_buffer(a.id);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < d; ++c) ga[r * d + c] += g[r * d + c] * vv[c];
        }
        if (t.requires_grad(v.id)) {
            auto & gv = t.grad_buffer(v.id);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < d; ++c) gv[c] += g[r * d + c] * av[r * d + c];
        }
    });
}

namespace detail {

// Shared scaffolding for pointwise unary ops: f gives the value, df the
// derivative given (input, output).
template <class T, class F, class DF>
Var<T> unary(Var<T> a, F f, DF df) {
    Tensor<T> out = a.value();
    for (auto & v : out.vec()) v = f(v);
    return a.tape->record(std::move(out), {a}, [a, df](GradTape<T> & t, std::uint32_t self) {
        const auto & g = *t.grad(self);
        const auto & x = t.value(a.id);
        const auto & y = t.value(self);
        auto & ga = t.grad_buffer(a.id);
        for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * df(x[i], y[i]);
    });
}

} // namespace detail

template <class T>
Var<T> silu(Var<T> a) {
    return detail::unary(
        a, [](T x) { return x * detail::sigmoid(x); },
        [](T x, T) {
            const T s = detail::sigmoid(x);
            return s * (T(1) + x * (T(1) - s));
        });
}

template <class T>
Var<T> softplus(Var<T> a) {
    return detail::unary(a, [](T x) { return detail::softplus(x); }, [](T x, T) { return detail::sigmoid(x); });
}

template <class T>
Var<T> exp(Var<T> a) {
    return detail::unary(a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <class T>
Var<T> neg(Var<T> a) {
    return scale(a, T(-1));
}

template <class T>
Var<T> softmax_lastdim(Var<T> a) {
    const auto & x = a.value();
    Tensor<T> out(x.shape());
    const std::size_t d = x.cols();
    for (std::size_t r = 0; r < x.rows(); ++r) {
        const T * xr = x.data() + r * d;
        T * yr = out.data() + r * d;
        const T m = *std::max_element(xr, xr + d);
        T s = 0;
        for (std::size_t c = 0; c < d; ++c) s += (yr[c] = std::exp(xr[c] - m));
        for (std::size_t c = 0; c < d; ++c) yr[c] /= s;
    }
    return a.tape->record(std::move(out), {a}, [a](GradTape<T> & t, std::uint32_t self) {
        const auto & g = *t.grad(self);
        const auto & y = t.value(self);
        auto & ga = t.grad_buffer(a.id);
        const std::size_t d = y.cols();
        for (std::size_t r = 0; r < y.rows(); ++r) {
            T dot = 0;
            for (std::size_t c = 0; c < d; ++c) dot += g[r * d + c] * y[r * d + c];
            for (std::size_t c = 0; c < d; ++c) ga[r * d + c] += y[r * d + c] * (g[r * d + c] - dot);
        }
    });
}

// ---- reductions -----------------------------------------------------------

template <class T>
Var<T> sum(Var<T> a) {
    T s = 0;
    for (auto v : a.value().vec()) s += v;
    return a.tape->record(Tensor<T>::scalar(s), {a}, [a](GradTape<T> & t, std::uint32_t self) {
        const T g = (*t.grad(self))[0];
        for (auto & v : t.grad_buffer(a.id).vec()) v += g;
    });
}

template <class T>
Var<T> mean(Var<T> a) {
    return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

// ---- linear algebra -------------------------------------------------------

template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
    const auto & av = a.value();
    const auto & bv = b.value();
    if (av.rank() != 2 || bv.rank() != 2) throw DimensionError("matmul: operands must be rank 2");
    const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
    if (bv.dim(0) != k) {
        throw DimensionError("matmul: inner dims disagree " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
    }
    Tensor<T> out(Shape{m, n});
    MapMat<T>(out.data(), m, n).noalias() = CMapMat<T>(av.data(), m, k) * CMapMat<T>(bv.data(), k, n);
    return a.tape->record(std::move(out), {a, b}, [a, b, m, k, n](GradTape<T> & t, std::uint32_t self) {
        CMapMat<T> g(t.grad(self)->data(), m, n);
        if (t.requires_grad(a.id)) {
            MapMat<T>(t.grad_buffer(a.id).data(), m, k).noalias() += g * CMapMat<T>(t.value(b.id).data(), k, n).transpose();
        }
        if (t.requires_grad(b.id)) {
            MapMat<T>(t.grad_buffer(b.id).data(), k, n).noalias() += CMapMat<T>(t.value(a.id).data(), m, k).transpose() * g;
        }
    });
}

// y = x W^T with W stored [out, in]; x may have any leading shape.
template <class T>
Var<T> linear(Var<T> x, Var<T> w) {
    const auto & xv = x.value();
    const auto & wv = w.value();
    if (wv.rank() != 2 || wv.dim(1) != xv.cols()) {
        throw DimensionError("linear: weight " + shape_str(wv.shape()) + " incompatible with input " +
                             shape_str(xv.shape()));
    }
    const std::size_t rows = xv.rows(), in = wv.dim(1), outd = wv.dim(0);
    Tensor<T> out(detail::with_last(xv.shape(), outd));
    MapMat<T>(out.data(), rows, outd).noalias() = CMapMat<T>(xv.data(), rows, in) * CMapMat<T>(wv.data(), outd, in).transpose();
    return x.tape->record(std::move(out), {x, w}, [x, w, rows, in, outd](GradTape<T> & t, std::uint32_t self) {
        CMapMat<T> g(t.grad(self)->data(), rows, outd);
        if (t.requires_grad(x.id)) {
            MapMat<T>(t.grad_buffer(x.id).data(), rows, in).noalias() += g * CMapMat<T>(t.value(w.id).data(), outd, in);
        }
        if (t.requires_grad(w.id)) {
            MapMat<T>(t.grad_buffer(w.id).data(), outd, in).noalias() += g.transpose() * CMapMat<T>(t.value(x.id).data(), rows, in);
        }
    });
}

template <class T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> bias) {
    return add_lastdim(linear(x, w), bias);
}

// x * weight / sqrt(mean(x^2) + eps) along the last dim.
template <class T>
Var<T> rmsnorm(Var<T> x, Var<T> w, T eps) {
    const auto & xv = x.value();
    const auto & wv = w.value();
    const std::size_t d = xv.cols();
    if (wv.numel() != d) throw DimensionError("rmsnorm: weight length does not match last dim");
    const std::size_t rows = xv.rows();
    Tensor<T> out(xv.shape());
    std::vector<T> inv(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const T * xr = xv.data() + r * d;
        T ss = 0;
        for (std::size_t c = 0; c < d; ++c) ss += xr[c] * xr[c];
        inv[r] = T(1) / std::sqrt(ss / static_cast<T>(d) + eps);
        for (std::size_t c = 0; c < d; ++c) out[r * d + c] = xr[c] * inv[r] * wv[c];
    }
    return x.tape->record(std::move(out), {x, w}, [x, w, inv = std::move(inv), d, rows](GradTape<T> & t, std::uint32_t self) {
        const auto & g = *t.grad(self);
        const auto & xv = t.value(x.id);
        const auto & wv = t.value(w.id);
        if (t.requires_grad(w.id)) {
            auto & gw = t.grad_buffer(w.id);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < d; ++c) gw[c] += g[r * d + c] * xv[r * d + c] * inv[r];
        }
        if (t.requires_grad(x.id)) {
            auto & gx = t.grad_buffer(x.id);
            for (std::size_t r = 0; r < rows; ++r) {
                // d/dx (x * inv) with inv = (mean x^2 + eps)^-1/2
                T dot = 0;
                for (std::size_t c = 0; c < d; ++c) dot += g[r * d + c] * wv[c] * xv[r * d + c];
                const T k = dot * inv[r] * inv[r] * inv[r] / static_cast<T>(d);
                for (std::size_t c = 0; c < d; ++c) gx[r * d + c] += g[r * d + c] * wv[c] * inv[r] - k * xv[r * d + c];
            }
        }
    });
}

// ---- shape ----------------------------------------------------------------

template <class T>
Var<T> reshape(Var<T> a, Shape s) {
    Tensor<T> out = a.value().reshaped(std::move(s));
    return a.tape->record(std::move(out), {a}, [a](GradTape<T> & t, std::uint32_t self) {
        detail::axpy(t.grad_buffer(a.id), *t.grad(self));
    });
}

template <class T>
Var<T> slice_lastdim(Var<T> a, std::size_t start, std::size_t len) {
    const auto & av = a.value();
    const std::size_t d = av.cols();
    if (start + len > d || len == 0) throw DimensionError("slice_lastdim: range out of bounds");
    const std::size_t rows = av.rows();
    Tensor<T> out(detail::with_last(av.shape(), len));
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(av.data() + r * d + start, len, out.data() + r * len);
    return a.tape->record(std::move(out), {a}, [a, start, len, d, rows](GradTape<T> & t, std::uint32_t self) {
        const auto & g = *t.grad(self);
        auto & ga = t.grad_buffer(a.id);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < len; ++c) ga[r * d + start + c] += g[r * len + c];
    });
}

template <class T>
Var<T> concat_lastdim(Var<T> a, Var<T> b) {
    const auto & av = a.value();
    const auto & bv = b.value();
    if (av.rows() != bv.rows()) throw DimensionError("concat_lastdim: leading dims differ");
    const std::size_t rows = av.rows(), da = av.cols(), db = bv.cols();
    Tensor<T> out(detail::with_last(av.shape(), da + db));
    for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(av.data() + r * da, da, out.data() + r * (da + db));
        std::copy_n(bv.data() + r * db, db, out.data() + r * (da + db) + da);
    }
    return a.tape->record(std::move(out), {a, b}, [a, b, rows, da, db](GradTape<T> & t, std::uint32_t self) {
        const auto & g = *t.grad(self);
        if (t.requires_grad(a.id)) {
            auto & ga = t.grad_buffer(a.id);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < da; ++c) ga[r * da + c] += g[r * (da + db) + c];
        }
        if (t.requires_grad(b.id)) {
            auto & gb = t.grad_buffer(b.id);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < db; ++c) gb[r * db + c] += g[r * (da + db) + da + c];
        }
    });
}

// ---- sequence ops ---------------------------------------------------------

// Depthwise causal convolution over x[L, C] with kernel[w, C]. `tail` holds
// the w-1 inputs preceding x (zeros when empty); kernel row w-1 multiplies
// the current position.
template <class T>
Var<T> causal_conv1d(Var<T> x, Var<T> kernel, Var<T> bias, const Tensor<T> & tail = {}) {
    const auto & xv = x.value();
    const auto & kv = kernel.value();
    const auto & bv = bias.value();
    if (xv.rank() != 2 || kv.rank() != 2) throw DimensionError("causal_conv1d: x and kernel must be rank 2");
    const std::size_t L = xv.dim(0), C = xv.dim(1), w = kv.dim(0);
    if (kv.dim(1) != C || bv.numel() != C) throw DimensionError("causal_conv1d: channel mismatch");
    if (!tail.empty() && (tail.numel() != (w - 1) * C)) throw DimensionError("causal_conv1d: tail shape mismatch");
    // padded input: (w-1) tail rows followed by x
    std::vector<T> pad((w - 1 + L) * C, T(0));
    if (!tail.empty()) std::copy(tail.vec().begin(), tail.vec().end(), pad.begin());
    std::copy(xv.vec().begin(), xv.vec().end(), pad.begin() + static_cast<std::ptrdiff_t>((w - 1) * C));
    Tensor<T> out(Shape{L, C});
    for (std::size_t t = 0; t < L; ++t) {
        T * o = out.data() + t * C;
        for (std::size_t c = 0; c < C; ++c) o[c] = bv[c];
        for (std::size_t j = 0; j < w; ++j) {
            const T * xr = pad.data() + (t + j) * C;
            const T * kr = kv.data() + j * C;
            for (std::size_t c = 0; c < C; ++c) o[c] += kr[c] * xr[c];
        }
    }
    return x.tape->record(std::move(out), {x, kernel, bias},
                          [x, kernel, bias, pad = std::move(pad), L, C, w](GradTape<T> & t, std::uint32_t self) {
        const auto & g = *t.grad(self);
        if (t.requires_grad(bias.id)) {
            auto & gb = t.grad_buffer(bias.id);
            for (std::size_t s = 0; s < L; ++s)
                for (std::size_t c = 0; c < C; ++c) gb[c] += g[s * C + c];
        }
        if (t.requires_grad(kernel.id)) {
            auto & gk = t.grad_buffer(kernel.id);
            for (std::size_t s = 0; s < L; ++s)
                for (std::size_t j = 0; j < w; ++j)
                    for (std::size_t c = 0; c < C; ++c) gk[j * C + c] += g[s * C + c] * pad[(s + j) * C + c];
        }
        if (t.requires_grad(x.id)) {
            auto & gx = t.grad_buffer(x.id);
            const auto & kv = t.value(kernel.id);
            // x[s] sits at padded row s + w - 1 and feeds outputs s .. s + w - 1
            for (std::size_t s = 0; s < L; ++s)
                for (std::size_t j = 0; j < w; ++j) {
                    const std::size_t o = s + (w - 1) - j;
                    if (o >= L) continue;
                    for (std::size_t c = 0; c < C; ++c) gx[s * C + c] += g[o * C + c] * kv[j * C + c];
                }
        }
    });
}

// Row gather: out[i] = table[ids[i]].
template <class T>
Var<T> embedding(Var<T> table, const std::vector<std::int32_t> & ids) {
    const auto & tv = table.value();
    const std::size_t V = tv.dim(0), d = tv.dim(1);
    if (ids.empty()) throw InputError("embedding: empty id list");
    Tensor<T> out(Shape{ids.size(), d});
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= V) {
            throw InputError("token id " + std::to_string(ids[i]) + " out of range for vocab " + std::to_string(V));
        }
        std::copy_n(tv.data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
    }
    return table.tape->record(std::move(out), {table}, [table, ids, d](GradTape<T> & t, std::uint32_t self) {
        const auto & g = *t.grad(self);
        auto & gt = t.grad_buffer(table.id);
        for (std::size_t i = 0; i < ids.size(); ++i)
            for (std::size_t c = 0; c < d; ++c) gt[static_cast<std::size_t>(ids[i]) * d + c] += g[i * d + c];
    });
}

inline constexpr std::int32_t kIgnoreTarget = -1;

// Mean next-token cross-entropy over rows whose target is not kIgnoreTarget.
template <class T>
Var<T> cross_entropy(Var<T> logits, const std::vector<std::int32_t> & targets) {
    const auto & lv = logits.value();
    const std::size_t rows = lv.rows(), V = lv.cols();
    if (targets.size() != rows) throw DimensionError("cross_entropy: one target per row required");
    std::vector<T> probs(rows * V, T(0));
    T total = 0;
    std::size_t count = 0;
    for (std::size_t r = 0; r < rows; ++r) {
        if (targets[r] == kIgnoreTarget) continue;
        if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= V) throw InputError("cross_entropy: target out of range");
        const T * x = lv.data() + r * V;
        const T m = *std::max_element(x, x + V);
        T s = 0;
        for (std::size_t c = 0; c < V; ++c) s += (probs[r * V + c] = std::exp(x[c] - m));
        for (std::size_t c = 0; c < V; ++c) probs[r * V + c] /= s;
        total += std::log(s) + m - x[targets[r]];
        ++count;
    }
    const T denom = count ? static_cast<T>(count) : T(1);
    return logits.tape->record(Tensor<T>::scalar(total / denom), {logits},
                               [logits, targets, probs = std::move(probs), rows, V, denom](GradTape<T> & t, std::uint32_t self) {
        const T g = (*t.grad(self))[0] / denom;
        auto & gl = t.grad_buffer(logits.id);
        for (std::size_t r = 0; r < rows; ++r) {
            if (targets[r] == kIgnoreTarget) continue;
            for (std::size_t c = 0; c < V; ++c) gl[r * V + c] += g * probs[r * V + c];
            gl[r * V + static_cast<std::size_t>(targets[r])] -= g;
        }
    });
}

} // namespace zamba2
