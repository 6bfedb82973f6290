// Copyright 2026 The zamba2-desk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "zamba2/errors.hpp"

namespace zamba2 {

using Shape = std::vector<std::size_t>;

enum class DType : std::uint8_t { f64 = 0, f32 = 1, f16 = 2, q4 = 3 };

template <class T> constexpr DType dtype_of() {
    static_assert(std::is_same_v<T, double> || std::is_same_v<T, float>, "tensors hold f32 or f64");
    return std::is_same_v<T, double> ? DType::f64 : DType::f32;
}

inline const char * dtype_name(DType d) {
    switch (d) {
        case DType::f64: return "f64";
        case DType::f32: return "f32";
        case DType::f16: return "f16";
        case DType::q4:  return "q4";
    }
    return "?";
}

inline std::size_t numel_of(const Shape & s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape & s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

// Dense row-major tensor. No strides: every tensor owns a contiguous buffer.
template <class T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)) {
        check_dims();
        data_.assign(numel_of(shape_), fill);
    }

    Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        check_dims();
        if (numel_of(shape_) != data_.size()) {
            throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                                 " does not match shape " + shape_str(shape_));
        }
    }

    static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }

    const Shape & shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t numel() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    // Last dimension, and the product of all leading ones.
    std::size_t cols() const noexcept { return shape_.empty() ? 0 : shape_.back(); }
    std::size_t rows() const noexcept { return cols() == 0 ? 0 : data_.size() / cols(); }

    std::size_t bytes() const noexcept { return data_.size() * sizeof(T); }

    T * data() noexcept { return data_.data(); }
    const T * data() const noexcept { return data_.data(); }
    std::span<T> span() noexcept { return data_; }
    std::span<const T> span() const noexcept { return data_; }
    std::vector<T> & vec() noexcept { return data_; }
    const std::vector<T> & vec() const noexcept { return data_; }

    T & operator[](std::size_t i) noexcept { return data_[i]; }
    const T & operator[](std::size_t i) const noexcept { return data_[i]; }

    T & at(std::size_t r, std::size_t c) noexcept { return data_[r * cols() + c]; }
    const T & at(std::size_t r, std::size_t c) const noexcept { return data_[r * cols() + c]; }

    std::span<T> row(std::size_t r) noexcept { return {data_.data() + r * cols(), cols()}; }
    std::span<const T> row(std::size_t r) const noexcept { return {data_.data() + r * cols(), cols()}; }

    Tensor reshaped(Shape s) const {
        if (numel_of(s) != numel()) {
            throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
        }
        return Tensor(std::move(s), data_);
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    template <class U> Tensor<U> cast() const {
        std::vector<U> out(data_.begin(), data_.end());
        return Tensor<U>(shape_, std::move(out));
    }

    bool same_shape(const Tensor & o) const noexcept { return shape_ == o.shape_; }

    friend bool operator==(const Tensor & a, const Tensor & b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    void check_dims() const {
        for (auto d : shape_) {
            if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape_));
        }
    }

    Shape shape_;
    std::vector<T> data_;
};

template <class T>
T max_abs_diff(const Tensor<T> & a, const Tensor<T> & b) {
    if (a.numel() != b.numel()) throw DimensionError("max_abs_diff: size mismatch");
    T m = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, static_cast<T>(std::abs(a[i] - b[i])));
    return m;
}

} // namespace zamba2
