// Copyright 2026 The zamba2-desk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "zamba2/autodiff.hpp"

namespace zamba2 {

template <class T>
using ScalarFn = std::function<Var<T>(GradTape<T> &, Var<T>)>;

struct GradCheckResult {
    double max_rel_err = 0.0;
    double max_abs_err = 0.0;
    std::size_t worst_index = 0;
};

// Compares the reverse-mode gradient of f at theta against central
// differences. Per element the error is |ad - fd| / max(|ad|, |fd|, floor);
// the floor keeps near-zero components from dominating through rounding noise.
template <class T>
GradCheckResult grad_check_detailed(const ScalarFn<T> & f, const Tensor<T> & theta, T h, T floor = T(1e-7)) {
    Tensor<T> ad(theta.shape());
    {
        GradTape<T> tape;
        auto th = tape.leaf(theta);
        auto y = f(tape, th);
        if (y.numel() != 1) throw ContractError("grad_check: function output must be scalar");
        tape.backward(y);
        if (const auto * g = tape.grad(th.id)) ad = *g;
    }
    auto eval = [&](const Tensor<T> & p) {
        GradTape<T> tape(false);
        auto y = f(tape, tape.constant(p));
        return y.value()[0];
    };
    GradCheckResult res;
    Tensor<T> p = theta;
    for (std::size_t i = 0; i < theta.numel(); ++i) {
        const T orig = p[i];
        p[i] = orig + h;
        const T fp = eval(p);
        p[i] = orig - h;
        const T fm = eval(p);
        p[i] = orig;
        const T fd = (fp - fm) / (T(2) * h);
        const double abs_err = std::fabs(static_cast<double>(ad[i] - fd));
        const double denom = std::max({std::fabs(static_cast<double>(ad[i])), std::fabs(static_cast<double>(fd)),
                                       static_cast<double>(floor)});
        const double rel = abs_err == 0.0 ? 0.0 : abs_err / denom;
        if (rel > res.max_rel_err) {
            res.max_rel_err = rel;
            res.worst_index = i;
        }
        res.max_abs_err = std::max(res.max_abs_err, abs_err);
    }
    return res;
}

template <class T>
double grad_check(const ScalarFn<T> & f, const Tensor<T> & theta, T h) {
    return grad_check_detailed(f, theta, h).max_rel_err;
}

} // namespace zamba2
