// Copyright 2026 The zamba2-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "zamba2/passkey.hpp"

using namespace zamba2;

TEST(Tokenizer, BytesRoundTrip) {
    const std::string s = "pass key 0123\n\xff";
    EXPECT_EQ(decode_bytes(encode_bytes(s)), s);
    EXPECT_EQ(decode_bytes({'a', kBos, 'b', kEos}), "ab");
}

TEST(PasskeyMake, StartIndexFormula) {
    // depth 50, 1000 tokens, 10-token needle -> round(0.5 * 990)
    EXPECT_EQ(needle_start(1000, 10, 38, 50.0), 495u);
    EXPECT_EQ(needle_start(1000, 10, 38, 0.0), 0u);
    EXPECT_EQ(needle_start(1000, 10, 38, 100.0), 1000u - 38u - 10u);
    EXPECT_EQ(needle_start(101, 10, 0, 50.0), 46u); // round(45.5) away from zero
}

TEST(PasskeyMake, BoundariesAndSpanRoundTrip) {
    for (double depth : {0.0, 25.0, 50.0, 100.0}) {
        PasskeySpec spec;
        spec.total_len = 300;
        spec.depth_percent = depth;
        spec.key = "482913";
        spec.filler_seed = 7;
        auto s = passkey_make(spec);
        ASSERT_EQ(s.tokens.size(), 300u);
        const std::vector<std::int32_t> span(s.tokens.begin() + s.needle_begin, s.tokens.begin() + s.needle_end);
        EXPECT_EQ(decode_bytes(span), needle_sentence("482913"));
        const std::string text = decode_bytes(s.tokens);
        EXPECT_EQ(text.substr(text.size() - passkey_query().size()), passkey_query());
        if (depth == 0.0) {
            EXPECT_EQ(s.needle_begin, 0u);
        }
        if (depth == 100.0) {
            EXPECT_EQ(s.needle_end, 300u - passkey_query().size());
        }
        EXPECT_EQ(s.answer, "482913");
        EXPECT_EQ(decode_bytes(s.answer_tokens), "482913");
    }
}

TEST(PasskeyMake, DeterministicAndSeedDependent) {
    PasskeySpec a;
    a.total_len = 200;
    a.filler_seed = 1;
    auto b = a;
    b.filler_seed = 2;
    EXPECT_EQ(passkey_make(a).tokens, passkey_make(a).tokens);
    EXPECT_NE(passkey_make(a).tokens, passkey_make(b).tokens);
}

TEST(PasskeyMake, Errors) {
    PasskeySpec s;
    s.total_len = 40;
    EXPECT_THROW(passkey_make(s), InputError);
    s.total_len = 200;
    s.key = "12a";
    EXPECT_THROW(passkey_make(s), InputError);
    s.key = "";
    EXPECT_THROW(passkey_make(s), InputError);
    s.key = "1";
    s.depth_percent = 101;
    EXPECT_THROW(passkey_make(s), InputError);
}

TEST(PasskeyExample, OnlyAnswerDigitsAreSupervised) {
    PasskeySpec spec;
    spec.total_len = 120;
    spec.key = "5501";
    auto s = passkey_make(spec);
    auto ex = passkey_example(s);
    ASSERT_EQ(ex.inputs.size(), 120u + 4u - 1u);
    std::vector<std::int32_t> sup;
    for (std::size_t i = 0; i < ex.targets.size(); ++i) {
        if (ex.targets[i] != kIgnoreTarget) {
            EXPECT_GE(i, 119u);
            sup.push_back(ex.targets[i]);
        }
    }
    EXPECT_EQ(decode_bytes(sup), "5501");
    Rng rng(3);
    auto b = passkey_batch(rng, 96, 3, 5);
    ASSERT_EQ(b.examples.size(), 3u);
    for (const auto & e : b.examples) EXPECT_EQ(e.inputs.size(), 96u + 4u);
}

TEST(PasskeyEval, EchoStubIsPerfectAndRandomStubIsNearZero) {
    PasskeyGrid g;
    g.lens = {64, 128, 512};
    g.depths = {0, 33, 50, 100};
    g.samples_per_cell = 25;
    auto echo = passkey_eval(echo_answerer(), g);
    for (const auto & c : echo.cells) EXPECT_EQ(c.accuracy(), 1.0) << c.len << " " << c.depth;
    auto rnd = passkey_eval(random_answerer(1), g);
    // chance is 1e-6 per sample; 300 samples
    EXPECT_EQ(rnd.mean_accuracy(0, 1u << 20), 0.0);
}

TEST(PasskeyEval, MatrixShapeAndSkippedCells) {
    PasskeyGrid g;
    g.lens = {64, 128};
    g.depths = {0, 50, 100};
    g.samples_per_cell = 2;
    g.max_len = 64;
    auto m = passkey_eval(echo_answerer(), g);
    ASSERT_EQ(m.cells.size(), 6u);
    const auto tsv = passkey_tsv(m);
    EXPECT_EQ(tsv.substr(0, tsv.find('\n')), "len\tdepth\taccuracy");
    EXPECT_EQ(std::count(tsv.begin(), tsv.end(), '\n'), 7);
    EXPECT_NE(tsv.find("128\t50\tskipped"), std::string::npos);
    EXPECT_TRUE(m.cells[3].skipped);
    EXPECT_FALSE(m.cells[0].skipped);
}

TEST(PasskeyEval, ModelAnswererRunsWithAndWithoutRescale) {
    ModelConfig c;
    c.d_model = 16;
    c.n_mamba_layers = 2;
    c.attn_every = 1;
    c.attn_heads = 2;
    c.ssm_heads = 2;
    c.ssm_d_state = 8;
    c.rotary.d_emb = 8;
    c.lora_rank = 2;
    auto m = build_model<float>(c, 1);
    PasskeyGrid g;
    g.lens = {64};
    g.depths = {50};
    g.samples_per_cell = 2;
    auto a = passkey_eval(model_answerer(m), g);
    auto b = passkey_eval(model_answerer(m, 4.0), g);
    EXPECT_EQ(a.cells[0].n, 2u);
    EXPECT_EQ(b.cells[0].n, 2u);
    EXPECT_DOUBLE_EQ(m.config.rotary.s, 1.0); // override does not touch the model
    EXPECT_THROW(model_answerer(m, 0.5), ConfigError);
}
