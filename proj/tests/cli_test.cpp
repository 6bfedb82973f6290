// Copyright 2026 The zamba2-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "zamba2/cli.hpp"

namespace fs = std::filesystem;
using namespace zamba2;

namespace {

struct Outcome {
    int code = -1;
    std::string out, err;
};

Outcome run_cli(std::vector<std::string> args) {
    args.insert(args.begin(), "zamba2");
    std::vector<const char *> argv;
    for (const auto & a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    Outcome o;
    o.code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
    o.out = out.str();
    o.err = err.str();
    return o;
}

std::string slurp(const fs::path & p) {
    std::ifstream in(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

class Cli : public ::testing::Test {
protected:
    void SetUp() override {
        dir_ = fs::temp_directory_path() /
               ("zamba2_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
        fs::remove_all(dir_);
        fs::create_directories(dir_);
        std::ofstream(dir_ / "small.json")
            << R"({"name": "small", "d_model": 16, "n_mamba_layers": 2, "attn_every": 1, "attn_heads": 2,
                   "ssm_heads": 2, "ssm_d_state": 8, "lora_rank": 2})";
        std::ofstream corpus(dir_ / "corpus.txt");
        for (int i = 0; i < 40; ++i) corpus << "the quick brown fox jumps over the lazy dog. ";
    }
    void TearDown() override { fs::remove_all(dir_); }

    std::string p(const std::string & name) const { return (dir_ / name).string(); }

    std::string build_small(const std::string & out, const std::string & dtype = "f32") {
        auto r = run_cli({"build", "--model-config", p("small.json"), "--dtype", dtype, "--out-dir", p(out)});
        EXPECT_EQ(r.code, 0) << r.err;
        return p(out) + "/model.ckpt";
    }

    fs::path dir_;
};

} // namespace

TEST_F(Cli, UsageErrorsExitTwo) {
    EXPECT_EQ(run_cli({}).code, 2);
    EXPECT_EQ(run_cli({"frobnicate"}).code, 2);
    EXPECT_EQ(run_cli({"build", "--no-such-flag", "--out-dir", p("x")}).code, 2);
    EXPECT_EQ(run_cli({"build", "--preset", "nope", "--out-dir", p("x")}).code, 2);
    EXPECT_EQ(run_cli({"build", "--preset", "tiny-7b-style"}).code, 2); // --out-dir missing
    EXPECT_EQ(run_cli({"generate", "--model", p("missing.ckpt"), "--out-dir", p("x")}).code, 2);
    EXPECT_EQ(run_cli({"passkey", "--stub", "echo", "--preset", "tiny-7b-style", "--out-dir", p("x")}).code, 2);
}

TEST_F(Cli, HelpExitsZero) {
    auto r = run_cli({"--help"});
    EXPECT_EQ(r.code, 0);
    EXPECT_NE(r.out.find("passkey"), std::string::npos);
    EXPECT_EQ(run_cli({"train", "--help"}).code, 0);
}

TEST_F(Cli, ConfigAndRuntimeErrorsExitOne) {
    auto r = run_cli({"train", "--model-config", p("small.json"), "--data", p("corpus.txt"), "--lr-min", "1",
                      "--out-dir", p("t")});
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("lr_min"), std::string::npos);
    EXPECT_EQ(run_cli({"train", "--model-config", p("small.json"), "--out-dir", p("t")}).code, 1); // no data
    std::ofstream(p("bad.json")) << R"({"d_model": 16, "attn_heads": 3})";
    r = run_cli({"build", "--model-config", p("bad.json"), "--out-dir", p("b")});
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("attn_heads"), std::string::npos);
    std::ofstream(p("garbage.ckpt")) << "not a checkpoint";
    EXPECT_EQ(run_cli({"generate", "--model", p("garbage.ckpt"), "--prompt", "a", "--out-dir", p("g")}).code, 1);
    std::ofstream(p("bad.toml")) << "[build]\nseed = \"not a number\"\n";
    EXPECT_NE(run_cli({"--config", p("bad.toml"), "build", "--preset", "tiny-7b-style", "--out-dir", p("c")}).code, 0);
}

TEST_F(Cli, BuildWritesArtifactsAndSnapshotReplays) {
    const auto ck = build_small("b");
    EXPECT_TRUE(fs::exists(ck));
    auto cfg = json::parse(slurp(p("b/model_config.json")));
    EXPECT_EQ(cfg.at("d_model"), 16);
    const std::string snap = slurp(p("b/resolved_config.toml"));
    EXPECT_EQ(snap.rfind("[build]\n", 0), 0u);
    EXPECT_NE(snap.find("seed=0"), std::string::npos);
    // Replaying the snapshot reproduces the checkpoint bit for bit.
    auto r = run_cli({"--config", p("b/resolved_config.toml"), "build", "--out-dir", p("b2")});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(slurp(ck), slurp(p("b2/model.ckpt")));
}

TEST_F(Cli, GenerateIsDeterministic) {
    const auto ck = build_small("b");
    for (const char * d : {"g1", "g2"}) {
        auto r = run_cli({"generate", "--model", ck, "--prompt", "hello", "-n", "12", "--out-dir", p(d)});
        ASSERT_EQ(r.code, 0) << r.err;
    }
    const auto a = slurp(p("g1/generation.txt"));
    EXPECT_EQ(a, slurp(p("g2/generation.txt")));
    auto j = json::parse(slurp(p("g1/generation.json")));
    EXPECT_EQ(j.at("tokens").size(), 12u);
    auto r = run_cli({"generate", "--model", ck, "--prompt", "hello", "-n", "12", "--sampler", "top_k", "--top-k",
                      "0", "--out-dir", p("g3")});
    EXPECT_EQ(r.code, 1);
}

TEST_F(Cli, DtypeFollowsTheCheckpoint) {
    const auto ck = build_small("b64", "f64");
    EXPECT_EQ(read_checkpoint(ck).header.at("param_dtype"), "f64");
    auto r = run_cli({"generate", "--model", ck, "--prompt", "xy", "-n", "4", "--out-dir", p("g")});
    ASSERT_EQ(r.code, 0) << r.err;
    auto m = load_model<double>(ck);
    const auto want = generate(m, encode_bytes("xy"), 4, Sampler::greedy(), 0);
    EXPECT_EQ(json::parse(slurp(p("g/generation.json"))).at("tokens").get<std::vector<std::int32_t>>(), want);
}

TEST_F(Cli, TrainResumeIsBitwise) {
    const std::vector<std::string> common{"train", "--model-config", p("small.json"), "--data", p("corpus.txt"),
                                          "--steps", "6", "--warmup", "1", "--seq-len", "16", "--batch-size", "2",
                                          "--checkpoint-every", "3"};
    auto full = common;
    full.insert(full.end(), {"--out-dir", p("t")});
    auto r = run_cli(full);
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_TRUE(fs::exists(p("t/metrics.jsonl")));
    EXPECT_TRUE(fs::exists(p("t/plan.json")));
    EXPECT_TRUE(fs::exists(p("t/checkpoint-00000003.ckpt")));
    std::ifstream metrics(p("t/metrics.jsonl"));
    std::size_t lines = 0;
    for (std::string l; std::getline(metrics, l);) ++lines;
    EXPECT_EQ(lines, 6u);

    auto resumed = common;
    resumed.insert(resumed.end(), {"--out-dir", p("t2"), "--resume", p("t/checkpoint-00000003.ckpt")});
    r = run_cli(resumed);
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(slurp(p("t/model.ckpt")), slurp(p("t2/model.ckpt")));

    auto other = resumed;
    other[6] = "7"; // --steps
    other.back() = p("t/checkpoint-00000003.ckpt");
    other[other.size() - 3] = p("t3");
    r = run_cli(other);
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("refusing to resume"), std::string::npos);
}

TEST_F(Cli, ExtendContextFollowsTheCurriculum) {
    const auto ck = build_small("b");
    auto r = run_cli({"extend-context", "--model", ck, "--passkey-data", "--key-digits", "2", "--batch-size", "1",
                      "--start-len", "64", "--target-len", "128", "--double-every", "2", "--out-dir", p("e")});
    ASSERT_EQ(r.code, 0) << r.err;
    std::ifstream metrics(p("e/metrics.jsonl"));
    std::vector<std::size_t> lens;
    for (std::string l; std::getline(metrics, l);) lens.push_back(json::parse(l).at("seq_len").get<std::size_t>());
    EXPECT_EQ(lens, (std::vector<std::size_t>{64, 64, 128, 128}));
    auto plan = json::parse(slurp(p("e/plan.json")));
    EXPECT_EQ(plan.at("curriculum").at("target_len"), 128);
}

TEST_F(Cli, PasskeyStubMatrixShape) {
    auto r = run_cli({"passkey", "--stub", "echo", "--depths", "0,50,100", "--lens", "64,128", "--samples", "3",
                      "--out-dir", p("pk")});
    ASSERT_EQ(r.code, 0) << r.err;
    std::istringstream tsv(slurp(p("pk/passkey.tsv")));
    std::string line;
    std::getline(tsv, line);
    EXPECT_EQ(line, "len\tdepth\taccuracy");
    std::size_t rows = 0;
    while (std::getline(tsv, line)) {
        ++rows;
        EXPECT_EQ(line.substr(line.rfind('\t') + 1), "1");
    }
    EXPECT_EQ(rows, 6u);
    r = run_cli({"passkey", "--stub", "random", "--lens", "64", "--depths", "50", "--samples", "50", "--out-dir",
                 p("pr")});
    ASSERT_EQ(r.code, 0);
    EXPECT_NE(r.out.find("64\t50\t0\n"), std::string::npos);
}

TEST_F(Cli, PasskeyOnAModelHonoursMaxLen) {
    const auto ck = build_small("b");
    auto r = run_cli({"passkey", "--model", ck, "--lens", "64,128", "--depths", "50", "--samples", "1", "--max-len",
                      "64", "--s-override", "2", "--out-dir", p("pk")});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.out.find("128\t50\tskipped"), std::string::npos);
    EXPECT_EQ(run_cli({"passkey", "--model", ck, "--s-override", "0.5", "--out-dir", p("pk2")}).code, 1);
}

TEST_F(Cli, QuantizeAndQlora) {
    const auto ck = build_small("b");
    auto r = run_cli({"quantize", "--model", ck, "--block-size", "16", "--out-dir", p("q")});
    ASSERT_EQ(r.code, 0) << r.err;
    auto fp = json::parse(slurp(p("q/footprint.json")));
    EXPECT_LT(fp.at("ratio").get<double>(), 1.0);
    EXPECT_TRUE(fp.at("probe_mean_kl").get<double>() >= 0.0);
    const auto q = load_model<float>(p("q/model.q4.ckpt"));
    const auto direct = quantize_model(load_model<float>(ck), PrecisionPolicy::standard(), 16);
    const auto audit = audit_roles(q);
    EXPECT_TRUE(audit.quantized.count("ssm_in_proj"));
    EXPECT_FALSE(audit.quantized.count("embedding"));
    for (ParamId id = 0; id < q.params.size(); ++id) {
        ASSERT_EQ(bool(q.params[id].quantized), bool(direct.params[id].quantized));
        if (q.params[id].quantized) {
            EXPECT_EQ(q.params[id].quantized->codes, direct.params[id].quantized->codes);
        }
    }

    r = run_cli({"qlora", "--model", p("q/model.q4.ckpt"), "--data", p("corpus.txt"), "--steps", "4", "--seq-len",
                 "16", "--batch-size", "2", "--rank", "2", "--block-size", "16", "--quantize-adapters", "--out-dir",
                 p("ql")});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto t = load_model<float>(p("ql/model.qlora.ckpt"));
    EXPECT_GT(t.params.size(), q.params.size());
    for (ParamId id = 0; id < q.params.size(); ++id) {
        if (q.params[id].quantized) {
            EXPECT_EQ(t.params[id].quantized->codes, q.params[id].quantized->codes) << q.params[id].name;
        } else {
            EXPECT_TRUE(t.params[id].value.data() == q.params[id].value.data() ||
                        std::equal(t.params[id].value.data(), t.params[id].value.data() + t.params[id].value.numel(),
                                   q.params[id].value.data()))
                << q.params[id].name;
        }
    }
    for (ParamId id = q.params.size(); id < t.params.size(); ++id) {
        EXPECT_TRUE(t.params[id].quantized);
    }
    auto rep = json::parse(slurp(p("ql/qlora_report.json")));
    EXPECT_EQ(rep.at("losses").size(), 4u);
    EXPECT_EQ(run_cli({"qlora", "--model", ck, "--data", p("corpus.txt"), "--targets", "up,nope", "--out-dir",
                       p("ql2")})
                  .code,
              1);
}

TEST_F(Cli, BenchWritesTables) {
    const auto ck = build_small("b");
    auto r = run_cli({"bench", "--model", ck, "--lens", "8,16,32", "--gen-len", "3", "--repeats", "1",
                      "--micro-context", "0", "--out-dir", p("bn")});
    ASSERT_EQ(r.code, 0) << r.err;
    std::istringstream tsv(slurp(p("bn/bench.tsv")));
    std::string line;
    std::getline(tsv, line);
    EXPECT_EQ(line, "context_len\tttft_s\ttps\tkv_bytes_hybrid\tkv_bytes_pure\tratio\tratio_convention\tttft_s_pure\t"
                    "tps_pure");
    std::size_t rows = 0;
    while (std::getline(tsv, line)) ++rows;
    EXPECT_EQ(rows, 3u);
    std::ifstream jl(p("bn/bench.jsonl"));
    std::size_t n_rows = 0;
    for (std::string l; std::getline(jl, l);) {
        auto j = json::parse(l);
        if (j.at("type") == "row") {
            ++n_rows;
            // small.json: 2 Mamba layers, 2 sites
            EXPECT_DOUBLE_EQ(j.at("ratio").get<double>(), 2.0);
        }
    }
    EXPECT_EQ(n_rows, 3u);
}
