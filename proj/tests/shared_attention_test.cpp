// Copyright 2026 The zamba2-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "test_util.hpp"
#include "zamba2/grad_check.hpp"
#include "zamba2/shared_attention.hpp"

using namespace zamba2;
using zamba2::testing::probe;
using zamba2::testing::random_tensor;

namespace {

std::vector<std::int64_t> iota_positions(std::size_t n, std::int64_t start = 0) {
    std::vector<std::int64_t> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = start + static_cast<std::int64_t>(i);
    return p;
}

const Tensor<double> * grad_of(const GradTape<double> & t, ParamId id) {
    for (auto & [pid, g] : t.param_grads())
        if (pid == id) return g;
    return nullptr;
}

} // namespace

TEST(Rotary, AngleScheduleSmallExample) {
    RotaryConfig cfg;
    cfg.d_emb = 8;
    auto th = rotary_angles(cfg);
    ASSERT_EQ(th.size(), 4u);
    EXPECT_DOUBLE_EQ(th[0], 1.0);
    EXPECT_NEAR(th[1], std::pow(10000.0, -0.25), 1e-15);
    EXPECT_NEAR(th[3], 1e-3, 1e-15);
}

TEST(Rotary, NtkDivisorValue) {
    EXPECT_NEAR(ntk_divisor(16.0, 64), std::pow(16.0, 64.0 / 63.0), 1e-12);
    EXPECT_NEAR(ntk_divisor(16.0, 64), 16.71987, 1e-5);
}

TEST(Rotary, UnitScaleIsBitwiseIdentity) {
    RotaryConfig cfg;
    auto th = rotary_angles(cfg);
    EXPECT_EQ(ntk_rescale(th, 1.0, cfg.d_emb), th);
}

TEST(Rotary, RescaleDividesEveryAngleUniformly) {
    RotaryConfig cfg;
    cfg.d_emb = 16;
    auto th = rotary_angles(cfg);
    auto r = ntk_rescale(th, 4.0, 16);
    for (std::size_t i = 0; i < th.size(); ++i) EXPECT_NEAR(th[i] / r[i], std::pow(4.0, 16.0 / 15.0), 1e-12);
}

TEST(Rotary, ScaleBelowOneIsAConfigError) {
    EXPECT_THROW(ntk_rescale({1.0}, 0.5, 8), ConfigError);
}

TEST(Rotary, PreservesNorms) {
    auto x = random_tensor<double>({5, 2, 8}, 1);
    RotaryConfig cfg;
    cfg.d_emb = 8;
    GradTape<double> t(false);
    auto y = apply_rotary(t.constant(x), iota_positions(5, 3), rotary_angles(cfg)).value();
    for (std::size_t r = 0; r < 10; ++r) {
        double a = 0, b = 0;
        for (std::size_t c = 0; c < 8; ++c) {
            a += x[r * 8 + c] * x[r * 8 + c];
            b += y[r * 8 + c] * y[r * 8 + c];
        }
        EXPECT_NEAR(a, b, 1e-12);
    }
}

// <R(m) q, R(n) k> depends only on m - n.
TEST(Rotary, DotProductDependsOnRelativePosition) {
    RotaryConfig cfg;
    cfg.d_emb = 8;
    auto th = rotary_angles(cfg);
    auto q = random_tensor<double>({1, 1, 8}, 2);
    auto k = random_tensor<double>({1, 1, 8}, 3);
    auto dot_at = [&](std::int64_t m, std::int64_t n) {
        GradTape<double> t(false);
        auto a = apply_rotary(t.constant(q), {m}, th).value();
        auto b = apply_rotary(t.constant(k), {n}, th).value();
        double s = 0;
        for (std::size_t i = 0; i < 8; ++i) s += a[i] * b[i];
        return s;
    };
    for (std::int64_t off : {0, 1, 7, 100}) {
        const double ref = dot_at(off + 5, 5);
        EXPECT_NEAR(dot_at(off + 40, 40), ref, 1e-10);
        EXPECT_NEAR(dot_at(off + 1000, 1000), ref, 1e-10);
    }
}

TEST(Rotary, GradientMatchesFiniteDifferences) {
    RotaryConfig cfg;
    cfg.d_emb = 4;
    auto th = rotary_angles(cfg);
    auto x = random_tensor<double>({3, 2, 4}, 4);
    auto f = [&](GradTape<double> &, Var<double> v) { return probe(apply_rotary(v, {0, 5, 9}, th)); };
    EXPECT_LT(grad_check<double>(f, x, 1e-6), 1e-6);
}

TEST(Attention, SingleTokenReturnsItsValue) {
    auto q = random_tensor<double>({1, 2, 4}, 5);
    auto k = random_tensor<double>({1, 2, 4}, 6);
    auto v = random_tensor<double>({1, 2, 4}, 7);
    GradTape<double> t(false);
    auto out = causal_attention(t.constant(q), t.constant(k), t.constant(v)).value();
    EXPECT_LT(max_abs_diff(out, v), 1e-15);
}

// Dense reference: explicit masked softmax(q k^T / sqrt(d)) v, one element at a time.
TEST(Attention, MatchesDenseReference) {
    const std::size_t L = 6, H = 2, D = 4;
    auto q = random_tensor<double>({L, H, D}, 8);
    auto k = random_tensor<double>({L, H, D}, 9);
    auto v = random_tensor<double>({L, H, D}, 10);
    GradTape<double> t(false);
    auto out = causal_attention(t.constant(q), t.constant(k), t.constant(v)).value();
    for (std::size_t h = 0; h < H; ++h)
        for (std::size_t i = 0; i < L; ++i) {
            std::vector<double> w(i + 1);
            double z = 0;
            for (std::size_t j = 0; j <= i; ++j) {
                double s = 0;
                for (std::size_t c = 0; c < D; ++c) s += q[(i * H + h) * D + c] * k[(j * H + h) * D + c];
                w[j] = std::exp(s / 2.0);
                z += w[j];
            }
            for (std::size_t c = 0; c < D; ++c) {
                double o = 0;
                for (std::size_t j = 0; j <= i; ++j) o += w[j] / z * v[(j * H + h) * D + c];
                EXPECT_NEAR(out[(i * H + h) * D + c], o, 1e-12);
            }
        }
}

TEST(Attention, GradientsMatchFiniteDifferences) {
    auto q = random_tensor<double>({4, 2, 3}, 11);
    auto k = random_tensor<double>({4, 2, 3}, 12);
    auto v = random_tensor<double>({4, 2, 3}, 13);
    using V = Var<double>;
    using Tp = GradTape<double>;
    EXPECT_LT(grad_check<double>([&](Tp & t, V x) { return probe(causal_attention(x, t.constant(k), t.constant(v))); }, q, 1e-6), 1e-6);
    EXPECT_LT(grad_check<double>([&](Tp & t, V x) { return probe(causal_attention(t.constant(q), x, t.constant(v))); }, k, 1e-6), 1e-6);
    EXPECT_LT(grad_check<double>([&](Tp & t, V x) { return probe(causal_attention(t.constant(q), t.constant(k), x)); }, v, 1e-6), 1e-6);
}

TEST(KvCache, CapacityOverflowThrowsWithoutMutation) {
    KvCache<float> c(2, 4, 3);
    Tensor<float> kv({2, 2, 4}, 1.0f);
    c.append(kv, kv);
    EXPECT_EQ(c.size(), 2u);
    EXPECT_EQ(c.bytes(), 2u * 2 * 4 * 2 * sizeof(float));
    EXPECT_THROW(c.append(kv, kv), CapacityError);
    EXPECT_EQ(c.size(), 2u);
    EXPECT_EQ(c.bytes(), 2u * 2 * 4 * 2 * sizeof(float));
}

namespace {

struct BlockFixture {
    ParameterStore<double> store;
    SharedBlockParams blk;
    std::vector<LoraAdapter> loras;
    RotaryConfig rot;

    explicit BlockFixture(bool with_lora, std::uint64_t seed = 21) {
        Rng rng(seed);
        blk = make_shared_block(store, "shared", 16, 2, 2, rng);
        rot.d_emb = 8;
        if (with_lora) {
            for (auto tg : {LoraTarget::q, LoraTarget::v, LoraTarget::up, LoraTarget::down}) {
                auto [din, dout] = blk.io_dims(tg);
                loras.push_back(make_lora(store, "site0", tg, din, dout, 4, 8.0, rng));
            }
        }
    }
};

} // namespace

TEST(SharedBlock, ZeroInitializedAdapterIsANoOp) {
    BlockFixture with(true), without(false);
    auto x = random_tensor<double>({5, 16}, 22);
    GradTape<double> t(false), u(false);
    auto a = shared_block_forward(t, with.store, with.blk, with.loras, with.rot, nullptr, iota_positions(5), t.constant(x)).value();
    auto b = shared_block_forward(u, without.store, without.blk, {}, without.rot, nullptr, iota_positions(5), u.constant(x)).value();
    EXPECT_EQ(a, b);
}

TEST(SharedBlock, AdapterEqualsDenseWeightDelta) {
    BlockFixture f(true);
    Rng rng(23);
    for (auto & ad : f.loras) f.store[ad.b].value = randn<double>(f.store[ad.b].shape(), rng, 0.1);
    auto x = random_tensor<double>({5, 16}, 24);
    GradTape<double> t(false);
    auto with = shared_block_forward(t, f.store, f.blk, f.loras, f.rot, nullptr, iota_positions(5), t.constant(x)).value();

    // fold (alpha/r) B A into the base weights and run without adapters
    ParameterStore<double> merged = f.store;
    auto weight_of = [&](LoraTarget tg) {
        switch (tg) {
            case LoraTarget::q: return f.blk.wq;
            case LoraTarget::v: return f.blk.wv;
            case LoraTarget::up: return f.blk.w_up;
            case LoraTarget::down: return f.blk.w_down;
            default: return ParamId(0);
        }
    };
    for (auto & ad : f.loras) {
        auto & W = merged[weight_of(ad.target)].value;
        const auto & A = f.store[ad.a].value;
        const auto & B = f.store[ad.b].value;
        for (std::size_t o = 0; o < W.dim(0); ++o)
            for (std::size_t i = 0; i < W.dim(1); ++i) {
                double s = 0;
                for (std::size_t r = 0; r < ad.rank; ++r) s += B.at(o, r) * A.at(r, i);
                W.at(o, i) += ad.scaling() * s;
            }
    }
    GradTape<double> u(false);
    auto folded = shared_block_forward(u, merged, f.blk, {}, f.rot, nullptr, iota_positions(5), u.constant(x)).value();
    EXPECT_LT(max_abs_diff(with, folded), 1e-12);
}

TEST(SharedBlock, CachedDecodeMatchesFullSequence) {
    BlockFixture f(true);
    Rng rng(25);
    for (auto & ad : f.loras) f.store[ad.b].value = randn<double>(f.store[ad.b].shape(), rng, 0.1);
    const std::size_t L = 9;
    auto x = random_tensor<double>({L, 16}, 26);
    GradTape<double> t(false);
    auto full = shared_block_forward(t, f.store, f.blk, f.loras, f.rot, nullptr, iota_positions(L), t.constant(x)).value();
    KvCache<double> cache(f.blk.n_heads, f.blk.d_head, L);
    // prefill 4, then one token at a time
    Tensor<double> head({4, 16}, std::vector<double>(x.data(), x.data() + 4 * 16));
    auto pre = shared_block_forward(t, f.store, f.blk, f.loras, f.rot, &cache, iota_positions(4), t.constant(head)).value();
    for (std::size_t i = 0; i < 4 * 16; ++i) EXPECT_NEAR(pre[i], full[i], 1e-12);
    for (std::size_t p = 4; p < L; ++p) {
        Tensor<double> xt({1, 16}, std::vector<double>(x.data() + p * 16, x.data() + (p + 1) * 16));
        auto step = shared_block_forward(t, f.store, f.blk, f.loras, f.rot, &cache,
                                         iota_positions(1, static_cast<std::int64_t>(p)), t.constant(xt)).value();
        for (std::size_t c = 0; c < 16; ++c) EXPECT_NEAR(step[c], full.at(p, c), 1e-12);
    }
    EXPECT_EQ(cache.size(), L);
    EXPECT_EQ(cache.bytes(), L * 16 * 2 * sizeof(double));
}

TEST(SharedBlock, PositionsMustContinueFromCache) {
    BlockFixture f(false);
    KvCache<double> cache(f.blk.n_heads, f.blk.d_head, 8);
    GradTape<double> t(false);
    auto x = random_tensor<double>({2, 16}, 27);
    shared_block_forward(t, f.store, f.blk, {}, f.rot, &cache, iota_positions(2), t.constant(x));
    EXPECT_THROW(shared_block_forward(t, f.store, f.blk, {}, f.rot, &cache, iota_positions(2), t.constant(x)),
                 ContractError);
    EXPECT_EQ(cache.size(), 2u);
}

// A weight used at two call sites receives the sum of the per-site gradients.
TEST(SharedBlock, TiedWeightGradientIsSumOfSiteGradients) {
    BlockFixture f(false);
    auto x1 = random_tensor<double>({3, 16}, 28);
    auto x2 = random_tensor<double>({3, 16}, 29);
    auto run = [&](GradTape<double> & t, bool first, bool second) {
        Var<double> acc = t.constant(Tensor<double>::scalar(0.0));
        if (first) acc = add(acc, probe(shared_block_forward(t, f.store, f.blk, {}, f.rot, nullptr, iota_positions(3), t.constant(x1)), 1));
        if (second) acc = add(acc, probe(shared_block_forward(t, f.store, f.blk, {}, f.rot, nullptr, iota_positions(3), t.constant(x2)), 2));
        t.backward(acc);
    };
    GradTape<double> both, a, b;
    run(both, true, true);
    run(a, true, false);
    run(b, false, true);
    for (ParamId id : {f.blk.wq, f.blk.wk, f.blk.wv, f.blk.wo, f.blk.w_gate, f.blk.w_up, f.blk.w_down, f.blk.norm_attn}) {
        const auto * g = grad_of(both, id);
        const auto * ga = grad_of(a, id);
        const auto * gb = grad_of(b, id);
        ASSERT_TRUE(g && ga && gb);
        for (std::size_t i = 0; i < g->numel(); ++i) EXPECT_NEAR((*g)[i], (*ga)[i] + (*gb)[i], 1e-12);
    }
}

TEST(SharedBlock, FrozenParametersReceiveNoGradient) {
    BlockFixture f(true);
    for (auto & p : f.store) p.frozen = p.role != ParamRole::lora_a && p.role != ParamRole::lora_b;
    GradTape<double> t;
    auto x = random_tensor<double>({3, 16}, 30);
    t.backward(probe(shared_block_forward(t, f.store, f.blk, f.loras, f.rot, nullptr, iota_positions(3), t.constant(x))));
    EXPECT_EQ(grad_of(t, f.blk.wq), nullptr);
    EXPECT_NE(grad_of(t, f.loras[0].b), nullptr);
}
