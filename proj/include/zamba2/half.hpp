// Copyright 2026 The zamba2-desk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>

// IEEE-754 binary16 emulation: values are stored as 16-bit patterns and all
// arithmetic happens in f32.

namespace zamba2::f16 {

inline float to_float(std::uint16_t h) {
    const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
    const std::uint32_t exp = (h >> 10) & 0x1fu;
    std::uint32_t mant = h & 0x3ffu;
    std::uint32_t bits;
    if (exp == 0) {
        if (mant == 0) {
            bits = sign;
        } else {
            // subnormal: value = mant * 2^-24
            const float v = std::ldexp(static_cast<float>(mant), -24);
            return (h & 0x8000u) ? -v : v;
        }
    } else if (exp == 0x1f) {
        bits = sign | 0x7f800000u | (mant << 13);
    } else {
        bits = sign | ((exp + 112u) << 23) | (mant << 13);
    }
    return std::bit_cast<float>(bits);
}

// Round to nearest, ties to even.
inline std::uint16_t from_float(float f) {
    const std::uint32_t x = std::bit_cast<std::uint32_t>(f);
    const std::uint16_t sign = static_cast<std::uint16_t>((x >> 16) & 0x8000u);
    const float a = std::fabs(f);
    if (std::isnan(f)) return static_cast<std::uint16_t>(sign | 0x7e00u);
    if (a >= 65520.0f) return static_cast<std::uint16_t>(sign | 0x7c00u);
    if (a < 6.103515625e-05f) {
        // subnormal range: quantum 2^-24
        const float q = std::nearbyint(a * 16777216.0f);
        return static_cast<std::uint16_t>(sign | static_cast<std::uint16_t>(q));
    }
    const std::uint32_t ax = std::bit_cast<std::uint32_t>(a);
    std::uint32_t exp = (ax >> 23) - 112u;
    std::uint32_t mant = ax & 0x7fffffu;
    std::uint32_t half_mant = mant >> 13;
    const std::uint32_t rem = mant & 0x1fffu;
    if (rem > 0x1000u || (rem == 0x1000u && (half_mant & 1u))) {
        ++half_mant;
        if (half_mant == 0x400u) {
            half_mant = 0;
            ++exp;
        }
    }
    return static_cast<std::uint16_t>(sign | (exp << 10) | half_mant);
}

// Smallest representable f16 value >= f (for non-negative finite f).
inline std::uint16_t from_float_ceil(float f) {
    std::uint16_t h = from_float(f);
    if (to_float(h) < f) ++h; // positive f16 patterns are ordered like integers
    return h;
}

inline float round_trip(float f) { return to_float(from_float(f)); }

} // namespace zamba2::f16
