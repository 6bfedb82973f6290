// Copyright 2026 The zamba2-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

#include "test_util.hpp"
#include "zamba2/checkpoint.hpp"
#include "zamba2/training.hpp"

using namespace zamba2;
using zamba2::testing::random_tokens;

namespace {

ModelConfig tiny_config() {
    ModelConfig c;
    c.vocab_size = 13;
    c.d_model = 8;
    c.n_mamba_layers = 2;
    c.attn_every = 1;
    c.n_shared_blocks = 2;
    c.attn_heads = 2;
    c.mlp_expansion = 2;
    c.ssm_heads = 2;
    c.ssm_d_state = 4;
    c.conv_width = 3;
    c.rotary.d_emb = 4;
    c.lora_rank = 2;
    return c;
}

// Standalone scalar re-statement of the schedule.
double reference_lr(double s, double lmax, double lmin, double W, double P1, double R, double A, double peak,
                    double fin) {
    const double pi = 3.14159265358979323846;
    if (s < W) return lmax * s / W;
    if (s <= P1) return lmin + (lmax - lmin) * 0.5 * (1 + std::cos(pi * (s - W) / (P1 - W)));
    if (A == 0) return lmin;
    if (s <= P1 + R) return lmin + (peak - lmin) * 0.5 * (1 - std::cos(pi * (s - P1) / R));
    if (s <= P1 + A) return fin + (peak - fin) * 0.5 * (1 + std::cos(pi * (s - P1 - R) / (A - R)));
    return fin;
}

std::string temp_dir(const std::string & name) {
    auto p = std::filesystem::temp_directory_path() / ("zamba2_test_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p.string();
}

Batch single_batch(std::size_t vocab, std::size_t len, std::uint64_t seed, std::size_t n = 1) {
    Batch b;
    for (std::size_t i = 0; i < n; ++i) b.examples.push_back(next_token_example(random_tokens(len + 1, vocab, seed + i)));
    return b;
}

} // namespace

TEST(Schedule, EndpointsAreExact) {
    ScheduleConfig c;
    c.lr_max = 1e-3;
    c.lr_min = 1e-4;
    c.warmup_steps = 10;
    c.phase1_steps = 100;
    c.rewarm_steps = 20;
    c.anneal_steps = 60;
    EXPECT_EQ(lr_at(0, c), 0.0);
    EXPECT_EQ(lr_at(10, c), 1e-3);
    EXPECT_EQ(lr_at(100, c), 1e-4);
    EXPECT_EQ(lr_at(120, c), (1e-3 + 1e-4) / 2);
    EXPECT_EQ(lr_at(160, c), 1e-5);
    EXPECT_EQ(lr_at(100000, c), 1e-5);
}

TEST(Schedule, TraceMatchesScalarReference) {
    ScheduleConfig c;
    c.lr_max = 2e-3;
    c.lr_min = 2e-4;
    c.warmup_steps = 37;
    c.phase1_steps = 700;
    c.rewarm_steps = 50;
    c.anneal_steps = 300;
    for (std::size_t s = 0; s < 1000; ++s) {
        const double ref = reference_lr(double(s), 2e-3, 2e-4, 37, 700, 50, 300, 1.1e-3, 2e-5);
        EXPECT_NEAR(lr_at(s, c), ref, 1e-12) << s;
    }
}

TEST(Schedule, InvalidConfigsAreRejected) {
    ScheduleConfig c;
    c.warmup_steps = c.phase1_steps;
    EXPECT_THROW(c.validate(), ConfigError);
    c = {};
    c.anneal_steps = 10;
    c.rewarm_steps = 11;
    EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Curriculum, DoublingSchedule) {
    CurriculumConfig c{4096, 65536, 100};
    const std::size_t want[] = {4096, 8192, 16384, 32768, 65536};
    for (std::size_t k = 0; k < 5; ++k) EXPECT_EQ(curriculum_len(k * 100, c), want[k]);
    EXPECT_EQ(curriculum_len(99, c), 4096u);
    EXPECT_EQ(curriculum_len(1000000, c), 65536u);
    CurriculumConfig d{64, 1024, 10};
    EXPECT_EQ(curriculum_len(25, d), 256u);
    // reaches target after ceil(log2(target/start)) * double_every steps
    EXPECT_EQ(curriculum_len(39, d), 512u);
    EXPECT_EQ(curriculum_len(40, d), 1024u);
}

TEST(Mixer, ReplayFractionAndDeterminism) {
    auto run = [](double frac, std::uint64_t seed) {
        BatchListSource p1("phase1", {Batch{}}), an("anneal", {Batch{}});
        ReplayMixer mix(p1, an, {frac, seed});
        std::vector<std::string> tags;
        for (int i = 0; i < 10000; ++i) tags.push_back(mix.next(0).source);
        return tags;
    };
    auto a = run(0.6, 5);
    double f = std::count(a.begin(), a.end(), "phase1") / 10000.0;
    EXPECT_GE(f, 0.59);
    EXPECT_LE(f, 0.61);
    EXPECT_EQ(a, run(0.6, 5));
    auto all = run(1.0, 5);
    EXPECT_EQ(std::count(all.begin(), all.end(), "phase1"), 10000);
    auto none = run(0.0, 5);
    EXPECT_EQ(std::count(none.begin(), none.end(), "phase1"), 0);
}

TEST(Mixer, TwoAnnealEpochsTouchEachSampleTwice) {
    std::vector<Batch> set(50);
    BatchListSource p1("phase1", {Batch{}}), an("anneal", set);
    ReplayMixer mix(p1, an, {0.6, 9});
    std::map<std::size_t, int> seen;
    while (mix.anneal_draws() < 100) {
        auto b = mix.next(0);
        if (b.source == "anneal") ++seen[b.index];
    }
    ASSERT_EQ(seen.size(), 50u);
    for (auto & [i, n] : seen) EXPECT_EQ(n, 2) << i;
}

TEST(Corpus, WrapsWithEpochIncrement) {
    std::vector<std::int32_t> toks(25);
    for (int i = 0; i < 25; ++i) toks[i] = i;
    CorpusSource src("c", toks, 2);
    auto b0 = src.next(8);
    EXPECT_EQ(b0.examples[0].inputs[0], 0);
    EXPECT_EQ(b0.examples[1].inputs[0], 8);
    EXPECT_EQ(b0.examples[1].targets.back(), 16);
    auto b1 = src.next(8);
    EXPECT_EQ(b1.examples[0].inputs[0], 16);
    EXPECT_EQ(b1.examples[1].inputs[0], 0);
    EXPECT_EQ(b1.epoch, 1u);
    EXPECT_THROW(src.next(30), InputError);
}

TEST(TrainStep, ZeroLearningRateLeavesParametersBitwise) {
    auto m = build_model<double>(tiny_config(), 1);
    auto before = m.params;
    OptimizerState<double> opt;
    auto st = train_step(m, single_batch(13, 8, 2), opt, 0.0);
    EXPECT_TRUE(std::isfinite(st.loss));
    for (ParamId i = 0; i < m.params.size(); ++i) EXPECT_EQ(m.params[i].value, before[i].value) << m.params[i].name;
}

TEST(TrainStep, ClipNormBoundsPostClipGradient) {
    auto m = build_model<double>(tiny_config(), 1);
    OptimizerState<double> opt;
    opt.cfg.clip_norm = 1e-9;
    auto st = train_step(m, single_batch(13, 8, 3), opt, 1e-3);
    EXPECT_GT(st.grad_norm, 1e-9);
    EXPECT_LE(st.clipped_norm, 1e-9 + 1e-15);
}

TEST(TrainStep, NonFiniteLossIsReported) {
    auto m = build_model<double>(tiny_config(), 1);
    m.params[m.unembedding].value[0] = std::nan("");
    OptimizerState<double> opt;
    Batch b;
    b.examples.push_back({{0, 1, 2}, {0, 1, 2}});
    EXPECT_THROW(train_step(m, b, opt, 1e-3), NumericError);
}

TEST(TrainStep, SharedBlockHasOneMomentPair) {
    auto c = tiny_config();
    c.n_mamba_layers = 4;
    c.n_shared_blocks = 1;
    auto m = build_model<double>(c, 2);
    ASSERT_EQ(m.sites.size(), 4u);
    OptimizerState<double> opt;
    train_step(m, single_batch(13, 8, 4), opt, 1e-3);
    std::size_t q_moments = 0;
    for (ParamId i = 0; i < m.params.size(); ++i) q_moments += m.params[i].role == ParamRole::attn_q && !opt.m[i].empty();
    EXPECT_EQ(q_moments, 1u);
}

TEST(TrainStep, OverfitsASingleBatch) {
    auto m = build_model<double>(tiny_config(), 3);
    OptimizerState<double> opt;
    opt.cfg.weight_decay = 0.0;
    auto b = single_batch(13, 12, 5, 2);
    double first = 0, last = 0;
    for (int s = 0; s < 200; ++s) {
        auto st = train_step(m, b, opt, 1e-2);
        if (s == 0) first = st.loss;
        last = st.loss;
    }
    EXPECT_NEAR(first, std::log(13.0), 0.5);
    EXPECT_LT(last, 0.1);
}

TEST(Checkpoint, RoundTripIsBitExact) {
    const auto dir = temp_dir("ckpt");
    auto m = build_model<float>(preset("tiny-7b-style"), 4);
    save_model(dir + "/m.ckpt", m);
    auto back = load_model<float>(dir + "/m.ckpt");
    ASSERT_EQ(back.params.size(), m.params.size());
    for (ParamId i = 0; i < m.params.size(); ++i) {
        EXPECT_EQ(back.params[i].name, m.params[i].name);
        EXPECT_EQ(back.params[i].value, m.params[i].value);
    }
    EXPECT_EQ(to_json(back.config), to_json(m.config));
    // aliases recorded for each site's block weights
    auto f = read_checkpoint(dir + "/m.ckpt");
    const auto * a = f.find("sites.1.block.attn.q");
    ASSERT_NE(a, nullptr);
    EXPECT_EQ(a->kind, RecordKind::alias);
    EXPECT_EQ(a->target, "shared.1.attn.q");
}

TEST(Checkpoint, CorruptFilesAreRejected) {
    const auto dir = temp_dir("ckpt_bad");
    auto m = build_model<double>(tiny_config(), 4);
    save_model(dir + "/m.ckpt", m);
    std::ifstream in(dir + "/m.ckpt", std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    {
        std::ofstream out(dir + "/trunc.ckpt", std::ios::binary);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
    }
    EXPECT_THROW(load_model<double>(dir + "/trunc.ckpt"), FormatError);
    bytes[0] = 'X';
    {
        std::ofstream out(dir + "/magic.ckpt", std::ios::binary);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    }
    EXPECT_THROW(load_model<double>(dir + "/magic.ckpt"), FormatError);
    EXPECT_THROW(load_model<double>(dir + "/missing.ckpt"), InputError);
}

namespace {

struct ResumeSetup {
    TrainPlan plan;
    std::vector<std::int32_t> corpus = random_tokens(400, 13, 77);
    std::vector<Batch> anneal_set;

    ResumeSetup() {
        plan.schedule.lr_max = 5e-3;
        plan.schedule.lr_min = 5e-4;
        plan.schedule.warmup_steps = 2;
        plan.schedule.phase1_steps = 8;
        plan.schedule.rewarm_steps = 2;
        plan.schedule.anneal_steps = 6;
        plan.seq_len = 10;
        plan.mixer.seed = 3;
        for (int i = 0; i < 3; ++i) anneal_set.push_back(single_batch(13, 6, 100 + i));
    }
};

} // namespace

TEST(RunTraining, ResumeReproducesUninterruptedTraceBitwise) {
    ResumeSetup su;
    auto full_model = build_model<double>(tiny_config(), 8);
    CorpusSource p1a("phase1", su.corpus, 1);
    BatchListSource ana("anneal", su.anneal_set);
    auto full = run_training(full_model, su.plan, p1a, &ana, {});

    const auto dir = temp_dir("resume");
    for (std::size_t k : {5, 10}) {
        auto m1 = build_model<double>(tiny_config(), 8);
        CorpusSource p1b("phase1", su.corpus, 1);
        BatchListSource anb("anneal", su.anneal_set);
        RunOptions o1;
        o1.out_dir = dir + "/k" + std::to_string(k);
        o1.stop_after = k;
        auto first = run_training(m1, su.plan, p1b, &anb, o1);
        ASSERT_EQ(first.checkpoints.size(), 1u);

        auto m2 = build_model<double>(tiny_config(), 999); // values replaced from the checkpoint
        CorpusSource p1c("phase1", su.corpus, 1);
        BatchListSource anc("anneal", su.anneal_set);
        RunOptions o2;
        o2.out_dir = o1.out_dir;
        o2.resume_from = first.checkpoints.back();
        auto rest = run_training(m2, su.plan, p1c, &anc, o2);
        ASSERT_EQ(first.records.size() + rest.records.size(), full.records.size());
        for (std::size_t i = 0; i < rest.records.size(); ++i) {
            const auto & a = rest.records[i];
            const auto & b = full.records[k + i];
            EXPECT_EQ(a.step, b.step);
            EXPECT_EQ(a.loss, b.loss) << "step " << a.step;
            EXPECT_EQ(a.provenance, b.provenance);
        }
        for (ParamId i = 0; i < m2.params.size(); ++i) EXPECT_EQ(m2.params[i].value, full_model.params[i].value);
    }
    // metrics log has one record per step
    std::ifstream in(dir + "/k5/metrics.jsonl");
    std::size_t lines = 0;
    for (std::string l; std::getline(in, l);) {
        auto j = json::parse(l);
        EXPECT_TRUE(j.contains("provenance") && j.contains("lr") && j.contains("seq_len"));
        ++lines;
    }
    EXPECT_EQ(lines, full.records.size());
}

TEST(RunTraining, RefusesResumeWithDifferentConfig) {
    ResumeSetup su;
    const auto dir = temp_dir("refuse");
    auto m = build_model<double>(tiny_config(), 8);
    CorpusSource p1("phase1", su.corpus, 1);
    BatchListSource an("anneal", su.anneal_set);
    RunOptions o;
    o.out_dir = dir;
    o.stop_after = 3;
    auto r = run_training(m, su.plan, p1, &an, o);
    auto other = su.plan;
    other.schedule.lr_max = 1e-2;
    CorpusSource p1b("phase1", su.corpus, 1);
    BatchListSource anb("anneal", su.anneal_set);
    RunOptions o2;
    o2.resume_from = r.checkpoints.back();
    EXPECT_THROW(run_training(m, other, p1b, &anb, o2), ContractError);
}

TEST(RunTraining, AnnealPhaseLogsReplayProvenance) {
    ResumeSetup su;
    su.plan.schedule.phase1_steps = 2;
    su.plan.schedule.warmup_steps = 1;
    su.plan.schedule.rewarm_steps = 1;
    su.plan.schedule.anneal_steps = 200;
    su.plan.seq_len = 4;
    auto c = tiny_config();
    c.n_mamba_layers = 1;
    auto m = build_model<double>(c, 8);
    CorpusSource p1("phase1", su.corpus, 1);
    BatchListSource an("anneal", su.anneal_set);
    auto r = run_training(m, su.plan, p1, &an, {});
    std::size_t replay = 0;
    for (std::size_t i = 2; i < r.records.size(); ++i) replay += r.records[i].provenance == "phase1";
    const double f = double(replay) / 200.0;
    EXPECT_GT(f, 0.45);
    EXPECT_LT(f, 0.75);
}

TEST(Plan, JsonRoundTripAndUnknownKeys) {
    ResumeSetup su;
    su.plan.curriculum = CurriculumConfig{16, 128, 5};
    auto back = train_plan_from_json(to_json(su.plan));
    EXPECT_EQ(to_json(back), to_json(su.plan));
    auto j = to_json(su.plan);
    j["schedule"]["lr_maxx"] = 1.0;
    try {
        train_plan_from_json(j);
        FAIL();
    } catch (const ConfigError & e) {
        EXPECT_EQ(e.field(), "schedule.lr_maxx");
    }
}
