// Copyright 2026 The zamba2-desk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "zamba2/errors.hpp"
#include "zamba2/half.hpp"
#include "zamba2/tensor.hpp"

namespace zamba2 {

enum class QuantScheme : std::uint8_t { symmetric_int4 = 1 };

inline const char * scheme_name(QuantScheme s) {
    return s == QuantScheme::symmetric_int4 ? "symmetric-int4" : "?";
}

inline constexpr int kQ4MaxCode = 7;
inline constexpr std::size_t kDefaultQuantBlock = 64;

// 4-bit block-quantized weight. Codes are signed integers in [-7, 7] stored
// as (code + 8) nibbles, two per byte, low nibble first. Each block of
// `block_size` consecutive elements shares one f16 scale.
struct QuantizedTensor {
    Shape shape;
    std::size_t block_size = kDefaultQuantBlock;
    QuantScheme scheme = QuantScheme::symmetric_int4;
    std::vector<std::uint8_t> codes;
    std::vector<std::uint16_t> scales;

    std::size_t numel() const { return numel_of(shape); }
    std::size_t n_blocks() const { return (numel() + block_size - 1) / block_size; }
    std::size_t code_bytes() const { return codes.size(); }
    std::size_t scale_bytes() const { return scales.size() * sizeof(std::uint16_t); }
    std::size_t bytes() const { return code_bytes() + scale_bytes(); }

    int code(std::size_t i) const {
        const std::uint8_t b = codes[i / 2];
        const int nib = (i % 2 == 0) ? (b & 0x0f) : (b >> 4);
        return nib - 8;
    }
    float scale(std::size_t block) const { return f16::to_float(scales[block]); }

    friend bool operator==(const QuantizedTensor &, const QuantizedTensor &) = default;
};

namespace detail {

// Smallest f16 value that is >= v (v finite and non-negative).
inline std::uint16_t f16_at_least(double v) {
    std::uint16_t h = f16::from_float(static_cast<float>(v));
    while (static_cast<double>(f16::to_float(h)) < v) ++h;
    return h;
}

} // namespace detail

// Per-block absmax symmetric scaling. The scale is rounded *up* to f16 so
// that |w / scale| <= 7 always holds and the error stays within half a step.
template <class T>
QuantizedTensor quantize_tensor(const Tensor<T> & w, std::size_t block_size = kDefaultQuantBlock) {
    if (block_size < 1) throw ContractError("quantize_tensor: block_size must be >= 1");
    QuantizedTensor q;
    q.shape = w.shape();
    q.block_size = block_size;
    const std::size_t n = w.numel();
    q.codes.assign((n + 1) / 2, 0);
    q.scales.assign((n + block_size - 1) / block_size, 0);
    for (std::size_t b = 0; b < q.scales.size(); ++b) {
        const std::size_t lo = b * block_size;
        const std::size_t hi = std::min(n, lo + block_size);
        double absmax = 0.0;
        for (std::size_t i = lo; i < hi; ++i) {
            const double v = static_cast<double>(w[i]);
            if (!std::isfinite(v)) throw NumericError("quantize_tensor: non-finite weight");
            absmax = std::max(absmax, std::fabs(v));
        }
        std::uint16_t sbits = 0;
        if (absmax > 0.0) {
            sbits = detail::f16_at_least(absmax / kQ4MaxCode);
            if ((sbits & 0x7c00u) == 0x7c00u) throw NumericError("quantize_tensor: scale overflows f16");
        }
        q.scales[b] = sbits;
        const double s = static_cast<double>(f16::to_float(sbits));
        for (std::size_t i = lo; i < hi; ++i) {
            int c = 0;
            if (s > 0.0) {
                c = static_cast<int>(std::nearbyint(static_cast<double>(w[i]) / s));
                c = std::clamp(c, -kQ4MaxCode, kQ4MaxCode);
            }
            const auto nib = static_cast<std::uint8_t>(c + 8);
            if (i % 2 == 0) {
                q.codes[i / 2] = static_cast<std::uint8_t>((q.codes[i / 2] & 0xf0) | nib);
            } else {
                q.codes[i / 2] = static_cast<std::uint8_t>((q.codes[i / 2] & 0x0f) | (nib << 4));
            }
        }
    }
    return q;
}

template <class T>
Tensor<T> dequantize(const QuantizedTensor & q) {
    Tensor<T> out(q.shape);
    const std::size_t n = q.numel();
    for (std::size_t i = 0; i < n; ++i) {
        const float s = q.scale(i / q.block_size);
        out[i] = static_cast<T>(static_cast<float>(q.code(i)) * s);
    }
    return out;
}

} // namespace zamba2
