// Copyright 2026 The zamba2-desk Authors
// SPDX-License-Identifier: Apache-2.0

// Command-line front end. run() parses argv, executes one subcommand and
// returns the process exit code: 0 on success, 2 on a usage error, 1 on any
// config or runtime error.

#pragma once

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <iterator>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "zamba2/baseline.hpp"
#include "zamba2/checkpoint.hpp"
#include "zamba2/config_io.hpp"
#include "zamba2/inference.hpp"
#include "zamba2/passkey.hpp"
#include "zamba2/quantize.hpp"
#include "zamba2/training.hpp"

namespace zamba2::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

namespace detail {

inline std::string read_file_bytes(const std::string & path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open " + path);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

inline std::string join_path(const std::string & dir, const std::string & name) {
    return (std::filesystem::path(dir) / name).string();
}

inline void ensure_dir(const std::string & dir) {
    if (dir.empty()) throw ConfigError("out-dir", "must not be empty");
    std::filesystem::create_directories(dir);
}

inline std::vector<LoraTarget> parse_targets(const std::vector<std::string> & names, const char * field) {
    std::vector<LoraTarget> out;
    for (const auto & n : names) {
        auto t = lora_target_from_name(n);
        if (!t) throw ConfigError(field, "unknown target '" + n + "'");
        out.push_back(*t);
    }
    return out;
}

// Where a model comes from: a checkpoint, or a fresh build from a preset or
// a JSON config.
struct ModelSource {
    std::string checkpoint;
    std::string preset;
    std::string config_path;
    std::uint64_t seed = 0;
    std::string dtype;

    void add_to(CLI::App * app, bool allow_fresh) {
        auto * ck = app->add_option("--model", checkpoint, "Model checkpoint")->check(CLI::ExistingFile);
        if (!allow_fresh) {
            ck->required();
            return;
        }
        auto * pr = app->add_option("--preset", preset, "Build a fresh model from a preset")
                        ->check(CLI::IsMember(preset_names()));
        auto * cf = app->add_option("--model-config", config_path, "Build a fresh model from a JSON config")
                        ->check(CLI::ExistingFile);
        ck->excludes(pr)->excludes(cf);
        pr->excludes(cf);
        app->add_option("--seed", seed, "Initialisation seed for a fresh model")->capture_default_str();
        app->add_option("--dtype", dtype, "Parameter dtype for a fresh model (f32 or f64)")
            ->check(CLI::IsMember({"f32", "f64"}));
    }

    bool fresh() const { return checkpoint.empty(); }

    ModelConfig fresh_config() const {
        ModelConfig c;
        if (!config_path.empty()) {
            c = model_config_from_json(read_json_file(config_path));
        } else if (!preset.empty()) {
            c = preset_config();
        } else {
            throw ConfigError("model", "one of --model, --preset or --model-config is required");
        }
        if (!dtype.empty()) c.dtype = dtype_from_name(dtype);
        c.validate();
        return c;
    }

    ModelConfig preset_config() const { return zamba2::preset(preset); }

    // Calls fn(Model<T>&) with the model in its stored or requested dtype.
    template <class F>
    int visit(F && fn) const {
        if (fresh()) {
            const ModelConfig c = fresh_config();
            if (c.dtype == DType::f64) {
                auto m = build_model<double>(c, seed);
                return fn(m);
            }
            auto m = build_model<float>(c, seed);
            return fn(m);
        }
        const auto f = read_checkpoint(checkpoint);
        const std::string dt = f.header.value("param_dtype", std::string("f32"));
        if (dt == "f64") {
            auto m = model_from_checkpoint<double>(f, checkpoint);
            return fn(m);
        }
        if (dt != "f32") throw FormatError(checkpoint + ": unsupported param_dtype '" + dt + "'");
        auto m = model_from_checkpoint<float>(f, checkpoint);
        return fn(m);
    }
};

// Training data: a byte corpus file or the synthetic passkey generator.
struct DataSource {
    std::string path;
    bool passkey = false;
    std::size_t key_digits = 6;
    std::size_t batch_size = 8;
    std::uint64_t data_seed = 0;

    void add_to(CLI::App * app) {
        auto * d = app->add_option("--data", path, "Byte corpus file")->check(CLI::ExistingFile);
        auto * p = app->add_flag("--passkey-data", passkey, "Train on synthetic passkey retrieval samples");
        d->excludes(p);
        app->add_option("--key-digits", key_digits, "Passkey length in digits")->capture_default_str();
        app->add_option("--batch-size", batch_size, "Sequences per batch")->capture_default_str();
        app->add_option("--data-seed", data_seed, "Seed for the data stream")->capture_default_str();
    }

    std::unique_ptr<BatchSource> make() const {
        if (batch_size == 0) throw ConfigError("batch-size", "must be positive");
        if (passkey) {
            if (key_digits == 0) throw ConfigError("key-digits", "must be >= 1");
            const auto bs = batch_size, kd = key_digits;
            return std::make_unique<GeneratorSource>(
                "passkey", [bs, kd](Rng & r, std::size_t L) { return passkey_batch(r, L, bs, kd); }, data_seed);
        }
        if (path.empty()) throw ConfigError("data", "one of --data or --passkey-data is required");
        return std::make_unique<CorpusSource>(std::filesystem::path(path).filename().string(),
                                              encode_bytes(read_file_bytes(path)), batch_size);
    }
};

// Optional overrides applied on top of a plan file (or the default plan).
struct PlanOverrides {
    std::string plan_path;
    std::optional<std::size_t> steps, warmup, seq_len, checkpoint_every, anneal_steps, rewarm_steps;
    std::optional<double> lr_max, lr_min, weight_decay;

    void add_to(CLI::App * app) {
        app->add_option("--plan", plan_path, "Training plan JSON")->check(CLI::ExistingFile);
        app->add_option("--steps", steps, "Phase-1 steps");
        app->add_option("--warmup", warmup, "Warmup steps");
        app->add_option("--seq-len", seq_len, "Sequence length when there is no curriculum");
        app->add_option("--checkpoint-every", checkpoint_every, "Steps between checkpoints (0: final only)");
        app->add_option("--anneal-steps", anneal_steps, "Anneal-phase steps");
        app->add_option("--rewarm-steps", rewarm_steps, "Anneal re-warm steps");
        app->add_option("--lr-max", lr_max, "Peak learning rate");
        app->add_option("--lr-min", lr_min, "Learning rate at the end of phase 1");
        app->add_option("--weight-decay", weight_decay, "AdamW weight decay");
    }

    TrainPlan resolve() const {
        TrainPlan p = plan_path.empty() ? TrainPlan{} : train_plan_from_json(read_json_file(plan_path));
        if (steps) p.schedule.phase1_steps = *steps;
        if (warmup) p.schedule.warmup_steps = *warmup;
        if (seq_len) p.seq_len = *seq_len;
        if (checkpoint_every) p.checkpoint_every = *checkpoint_every;
        if (anneal_steps) p.schedule.anneal_steps = *anneal_steps;
        if (rewarm_steps) p.schedule.rewarm_steps = *rewarm_steps;
        if (lr_max) p.schedule.lr_max = *lr_max;
        if (lr_min) p.schedule.lr_min = *lr_min;
        if (weight_decay) p.adam.weight_decay = *weight_decay;
        return p;
    }
};

// Every option of the active subcommand with its effective value, in a form
// --config reads back. Unset options are left out.
inline void write_snapshot(const CLI::App & app, const std::string & out_dir) {
    const auto * sub = app.get_subcommands().front();
    std::istringstream in(sub->config_to_str(true, false));
    std::string text = "[" + sub->get_name() + "]\n", line;
    while (std::getline(in, line)) {
        if (line.size() >= 3 && line.compare(line.size() - 3, 3, "=\"\"") == 0) continue;
        text += line + "\n";
    }
    write_text_atomic(join_path(out_dir, "resolved_config.toml"), text);
}

inline std::vector<std::int32_t> probe_tokens(std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<std::int32_t> t(n);
    for (auto & v : t) v = static_cast<std::int32_t>(rng.below(256));
    return t;
}

} // namespace detail

// ---- subcommands -----------------------------------------------------------

struct BuildCmd {
    detail::ModelSource src;
    std::string out_dir, name = "model.ckpt";

    void add(CLI::App & app) {
        auto * c = app.add_subcommand("build", "Initialise a model and write its checkpoint");
        src.add_to(c, true);
        c->add_option("--out-dir", out_dir, "Output directory")->required();
        c->add_option("--name", name, "Checkpoint file name")->capture_default_str();
    }

    int run(const CLI::App & root, std::ostream & out) const {
        if (!src.fresh()) throw ConfigError("model", "build takes --preset or --model-config, not --model");
        detail::ensure_dir(out_dir);
        detail::write_snapshot(root, out_dir);
        return src.visit([&](auto & m) {
            save_model(detail::join_path(out_dir, name), m);
            write_text_atomic(detail::join_path(out_dir, "model_config.json"), to_json(m.config).dump(2) + "\n");
            out << json{{"checkpoint", detail::join_path(out_dir, name)},
                        {"params", m.params.total_numel()},
                        {"sites", m.sites.size()},
                        {"dtype", dtype_name(m.config.dtype)}}
                       .dump()
                << "\n";
            return kExitOk;
        });
    }
};

// Shared by `train` and `extend-context`.
struct TrainCmd {
    detail::ModelSource src;
    detail::DataSource data;
    detail::PlanOverrides plan;
    std::string anneal_path, out_dir, resume;
    std::size_t stop_after = 0;
    bool extend = false;
    std::size_t start_len = 64, target_len = 512, double_every = 100;
    std::optional<double> rotary_s;

    void add(CLI::App & app, bool is_extend) {
        extend = is_extend;
        auto * c = is_extend ? app.add_subcommand("extend-context", "Long-context finetune with a doubling curriculum")
                             : app.add_subcommand("train", "Pretrain or finetune a model");
        src.add_to(c, true);
        data.add_to(c);
        plan.add_to(c);
        c->add_option("--anneal-data", anneal_path, "Byte corpus for the anneal phase")->check(CLI::ExistingFile);
        c->add_option("--out-dir", out_dir, "Output directory")->required();
        c->add_option("--resume", resume, "Resume from a training checkpoint")->check(CLI::ExistingFile);
        c->add_option("--stop-after", stop_after, "Stop after this many total steps (0: run to the end)");
        if (is_extend) {
            c->add_option("--start-len", start_len, "Curriculum start length")->capture_default_str();
            c->add_option("--target-len", target_len, "Curriculum target length")->capture_default_str();
            c->add_option("--double-every", double_every, "Steps between length doublings")->capture_default_str();
            c->add_option("--rotary-s", rotary_s, "Set the rotary rescale factor before finetuning");
        }
    }

    TrainPlan resolve_plan() const {
        TrainPlan p = plan.resolve();
        if (extend) {
            p.curriculum = CurriculumConfig{start_len, target_len, double_every};
            if (!plan.steps) {
                std::size_t doublings = 0;
                for (std::size_t L = start_len; L < target_len; L *= 2) ++doublings;
                p.schedule.phase1_steps = double_every * (doublings + 1);
            }
            if (p.schedule.warmup_steps >= p.schedule.phase1_steps) p.schedule.warmup_steps = 0;
        }
        p.validate();
        return p;
    }

    int run(const CLI::App & root, std::ostream & out) const {
        detail::ensure_dir(out_dir);
        detail::write_snapshot(root, out_dir);
        const TrainPlan p = resolve_plan();
        write_text_atomic(detail::join_path(out_dir, "plan.json"), to_json(p).dump(2) + "\n");
        detail::ModelSource from = src;
        if (from.fresh() && from.preset.empty() && from.config_path.empty() && !resume.empty()) from.checkpoint = resume;
        return from.visit([&](auto & m) {
            if (extend && rotary_s) {
                m.config.rotary.s = *rotary_s;
                m.config.rotary.validate();
            }
            auto phase1 = data.make();
            std::unique_ptr<BatchSource> anneal;
            if (!anneal_path.empty()) {
                anneal = std::make_unique<CorpusSource>(std::filesystem::path(anneal_path).filename().string(),
                                                        encode_bytes(detail::read_file_bytes(anneal_path)),
                                                        data.batch_size);
            }
            RunOptions o;
            o.out_dir = out_dir;
            o.resume_from = resume;
            o.stop_after = stop_after;
            auto res = run_training(m, p, *phase1, anneal.get(), o);
            save_model(detail::join_path(out_dir, "model.ckpt"), m);
            json summary{{"steps_done", res.steps_done}, {"checkpoints", res.checkpoints}};
            if (!res.records.empty()) {
                summary["first_loss"] = res.records.front().loss;
                summary["last_loss"] = res.records.back().loss;
            }
            out << summary.dump() << "\n";
            return kExitOk;
        });
    }
};

struct GenerateCmd {
    detail::ModelSource src;
    std::string prompt, prompt_file, out_dir, sampler = "greedy";
    std::size_t n = 64, top_k = 40;
    double temperature = 1.0;
    std::uint64_t seed = 0;
    std::optional<std::int32_t> stop_token;

    void add(CLI::App & app) {
        auto * c = app.add_subcommand("generate", "Sample a continuation of a prompt");
        src.add_to(c, true);
        auto * p = c->add_option("--prompt", prompt, "Prompt text");
        auto * pf = c->add_option("--prompt-file", prompt_file, "File holding the prompt")->check(CLI::ExistingFile);
        p->excludes(pf);
        c->add_option("-n,--tokens", n, "Tokens to generate")->capture_default_str();
        c->add_option("--sampler", sampler, "greedy, temperature or top_k")
            ->check(CLI::IsMember({"greedy", "temperature", "top_k"}))
            ->capture_default_str();
        c->add_option("--temperature", temperature, "Sampling temperature")->capture_default_str();
        c->add_option("--top-k", top_k, "k for top_k sampling")->capture_default_str();
        c->add_option("--sample-seed", seed, "Sampling seed")->capture_default_str();
        c->add_option("--stop-token", stop_token, "Stop after emitting this token id");
        c->add_option("--out-dir", out_dir, "Output directory")->required();
    }

    int run(const CLI::App & root, std::ostream & out) const {
        const std::string text = prompt_file.empty() ? prompt : detail::read_file_bytes(prompt_file);
        if (text.empty()) throw InputError("generate: empty prompt");
        Sampler s = sampler == "greedy"        ? Sampler::greedy()
                    : sampler == "temperature" ? Sampler::with_temperature(temperature)
                                               : Sampler::top_k_of(top_k, temperature);
        s.validate();
        detail::ensure_dir(out_dir);
        detail::write_snapshot(root, out_dir);
        return src.visit([&](auto & m) {
            GenerateOptions o;
            o.stop_token = stop_token;
            const auto toks = generate(m, encode_bytes(text), n, s, seed, o);
            const std::string cont = decode_bytes(toks);
            write_text_atomic(detail::join_path(out_dir, "generation.txt"), cont);
            json ids = toks;
            write_text_atomic(detail::join_path(out_dir, "generation.json"),
                              json{{"prompt", text}, {"tokens", ids}, {"text", cont}}.dump(-1, ' ', false, json::error_handler_t::replace) +
                                  "\n");
            out << cont << "\n";
            return kExitOk;
        });
    }
};

struct BenchCmd {
    detail::ModelSource src;
    std::string out_dir;
    BenchConfig cfg;
    std::uint64_t baseline_seed = 1;

    void add(CLI::App & app) {
        auto * c = app.add_subcommand("bench", "Hybrid vs layer-matched transformer: latency, throughput, cache bytes");
        src.add_to(c, true);
        c->add_option("--lens", cfg.prompt_lens, "Prompt lengths")->delimiter(',')->capture_default_str();
        c->add_option("--gen-len", cfg.gen_len, "Generated tokens per run")->capture_default_str();
        c->add_option("--repeats", cfg.repeats, "Timed repeats per length")->capture_default_str();
        c->add_option("--micro-context", cfg.micro_context, "Block microbench context (0: skip)")
            ->capture_default_str();
        c->add_option("--bench-seed", cfg.seed, "Prompt seed")->capture_default_str();
        c->add_option("--baseline-seed", baseline_seed, "Baseline initialisation seed")->capture_default_str();
        c->add_option("--out-dir", out_dir, "Output directory")->required();
    }

    int run(const CLI::App & root, std::ostream & out) const {
        detail::ensure_dir(out_dir);
        detail::write_snapshot(root, out_dir);
        return src.visit([&](auto & m) {
            using T = typename std::remove_reference_t<decltype(m)>::value_type;
            const auto pure = build_pure_baseline<T>(m.config, baseline_seed);
            const auto rep = bench(m, pure, cfg);
            write_text_atomic(detail::join_path(out_dir, "bench.jsonl"), bench_jsonl(rep));
            const std::string tsv = bench_tsv(rep);
            write_text_atomic(detail::join_path(out_dir, "bench.tsv"), tsv);
            out << tsv;
            for (const auto & w : rep.warnings) std::cerr << "warning: " << w << "\n";
            return kExitOk;
        });
    }
};

struct QuantizeCmd {
    detail::ModelSource src;
    std::string out_dir, name = "model.q4.ckpt";
    std::size_t block_size = kDefaultQuantBlock, probe_len = 64;

    void add(CLI::App & app) {
        auto * c = app.add_subcommand("quantize", "4-bit post-training quantisation");
        src.add_to(c, false);
        c->add_option("--block-size", block_size, "Elements per scale")->capture_default_str();
        c->add_option("--probe-len", probe_len, "Random byte probe for the KL report (0: skip)")
            ->capture_default_str();
        c->add_option("--name", name, "Output checkpoint name")->capture_default_str();
        c->add_option("--out-dir", out_dir, "Output directory")->required();
    }

    int run(const CLI::App & root, std::ostream & out) const {
        detail::ensure_dir(out_dir);
        detail::write_snapshot(root, out_dir);
        return src.visit([&](auto & m) {
            const auto q = quantize_model(m, PrecisionPolicy::standard(), block_size);
            save_model(detail::join_path(out_dir, name), q);
            const auto before = footprint(m, 2), after = footprint(q, 2);
            json j{{"block_size", block_size},
                   {"origin_bytes_16bit", before.total},
                   {"quantized_total_bytes", after.total},
                   {"quantized_bytes", after.quantized_bytes},
                   {"dense_bytes", after.dense_bytes},
                   {"ratio", static_cast<double>(after.total) / static_cast<double>(before.total)},
                   {"bytes_by_role", after.bytes_by_role}};
            if (probe_len) {
                const auto probe = detail::probe_tokens(probe_len, 0);
                j["probe_mean_kl"] = mean_kl_divergence(forward(m, probe), forward(q, probe));
            }
            write_text_atomic(detail::join_path(out_dir, "footprint.json"), j.dump(2) + "\n");
            out << j.dump() << "\n";
            return kExitOk;
        });
    }
};

struct QloraCmd {
    detail::ModelSource src;
    detail::DataSource data;
    std::string out_dir, name = "model.qlora.ckpt";
    std::vector<std::string> targets{"up", "down"};
    QloraConfig cfg;
    std::size_t seq_len = 64, block_size = kDefaultQuantBlock;
    bool no_quantize_base = false, quantize_adapters_after = false;

    void add(CLI::App & app) {
        auto * c = app.add_subcommand("qlora", "Train low-rank adapters on a frozen 4-bit base");
        src.add_to(c, false);
        data.add_to(c);
        c->add_option("--targets", targets, "Adapter targets")->delimiter(',')->capture_default_str();
        c->add_option("--rank", cfg.rank, "Adapter rank")->capture_default_str();
        c->add_option("--alpha", cfg.alpha, "Adapter alpha")->capture_default_str();
        c->add_option("--steps", cfg.steps, "Optimizer steps")->capture_default_str();
        c->add_option("--lr", cfg.lr, "Learning rate")->capture_default_str();
        c->add_option("--adapter-seed", cfg.seed, "Adapter initialisation seed")->capture_default_str();
        c->add_option("--seq-len", seq_len, "Sequence length")->capture_default_str();
        c->add_option("--block-size", block_size, "Quantisation block size")->capture_default_str();
        c->add_flag("--no-quantize-base", no_quantize_base, "Train on the checkpoint as stored");
        c->add_flag("--quantize-adapters", quantize_adapters_after, "Quantise the trained adapters to 4 bits");
        c->add_option("--name", name, "Output checkpoint name")->capture_default_str();
        c->add_option("--out-dir", out_dir, "Output directory")->required();
    }

    int run(const CLI::App & root, std::ostream & out) const {
        QloraConfig q = cfg;
        q.targets = detail::parse_targets(targets, "targets");
        detail::ensure_dir(out_dir);
        detail::write_snapshot(root, out_dir);
        return src.visit([&](auto & m) {
            auto base = no_quantize_base ? m : quantize_model(m, PrecisionPolicy::standard(), block_size);
            auto source = data.make();
            const auto rep = qlora_finetune(base, q, *source, seq_len);
            if (quantize_adapters_after) quantize_adapters(base, block_size);
            save_model(detail::join_path(out_dir, name), base);
            json j{{"initial_loss", rep.initial_loss},
                   {"final_loss", rep.final_loss},
                   {"losses", rep.losses},
                   {"adapters_quantized", quantize_adapters_after}};
            write_text_atomic(detail::join_path(out_dir, "qlora_report.json"), j.dump() + "\n");
            out << json{{"initial_loss", rep.initial_loss}, {"final_loss", rep.final_loss}}.dump() << "\n";
            return kExitOk;
        });
    }
};

struct PasskeyCmd {
    detail::ModelSource src;
    std::string out_dir, stub;
    PasskeyGrid grid;
    std::optional<double> s_override;

    void add(CLI::App & app) {
        auto * c = app.add_subcommand("passkey", "Passkey retrieval accuracy over context length and depth");
        src.add_to(c, true);
        auto * st = c->add_option("--stub", stub, "Harness self-test answerer instead of a model")
                        ->check(CLI::IsMember({"echo", "random"}));
        st->excludes(c->get_option("--model"))->excludes(c->get_option("--preset"));
        c->add_option("--lens", grid.lens, "Context lengths")->delimiter(',')->capture_default_str();
        c->add_option("--depths", grid.depths, "Needle depths in percent")->delimiter(',')->capture_default_str();
        c->add_option("--samples", grid.samples_per_cell, "Samples per cell")->capture_default_str();
        c->add_option("--key-digits", grid.key_digits, "Passkey length in digits")->capture_default_str();
        c->add_option("--eval-seed", grid.seed, "Sample seed")->capture_default_str();
        c->add_option("--max-len", grid.max_len, "Skip longer cells (0: none)")->capture_default_str();
        c->add_option("--s-override", s_override, "Rotary rescale factor for this evaluation");
        c->add_option("--out-dir", out_dir, "Output directory")->required();
    }

    int finish(const PasskeyMatrix & r, std::ostream & out) const {
        const std::string tsv = passkey_tsv(r);
        write_text_atomic(detail::join_path(out_dir, "passkey.tsv"), tsv);
        out << tsv;
        return kExitOk;
    }

    int run(const CLI::App & root, std::ostream & out) const {
        detail::ensure_dir(out_dir);
        detail::write_snapshot(root, out_dir);
        if (!stub.empty()) {
            if (s_override) throw ConfigError("s-override", "has no effect with --stub");
            return finish(passkey_eval(stub == "echo" ? echo_answerer() : random_answerer(grid.seed), grid), out);
        }
        return src.visit([&](auto & m) { return finish(passkey_eval(model_answerer(m, s_override), grid), out); });
    }
};

// ---- entry point -----------------------------------------------------------

inline int run(int argc, const char * const * argv, std::ostream & out = std::cout, std::ostream & err = std::cerr) {
    CLI::App app{"Desk-scale hybrid Mamba2 / shared-attention language model"};
    app.name("zamba2");
    app.require_subcommand(1);
    app.set_config("--config", "", "TOML file with option values");
    BuildCmd build;
    TrainCmd train, extend;
    GenerateCmd gen;
    BenchCmd bench_cmd;
    QuantizeCmd quant;
    QloraCmd qlora;
    PasskeyCmd pk;
    build.add(app);
    train.add(app, false);
    extend.add(app, true);
    gen.add(app);
    bench_cmd.add(app);
    quant.add(app);
    qlora.add(app);
    pk.add(app);
    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp & e) {
        return app.exit(e, out, err);
    } catch (const CLI::CallForAllHelp & e) {
        return app.exit(e, out, err);
    } catch (const CLI::CallForVersion & e) {
        return app.exit(e, out, err);
    } catch (const CLI::ConfigError & e) {
        app.exit(e, out, err);
        return kExitRuntime;
    } catch (const CLI::ParseError & e) {
        app.exit(e, out, err);
        return kExitUsage;
    }
    const auto * sub = app.get_subcommands().front();
    const std::string name = sub->get_name();
    try {
        if (name == "build") return build.run(app, out);
        if (name == "train") return train.run(app, out);
        if (name == "extend-context") return extend.run(app, out);
        if (name == "generate") return gen.run(app, out);
        if (name == "bench") return bench_cmd.run(app, out);
        if (name == "quantize") return quant.run(app, out);
        if (name == "qlora") return qlora.run(app, out);
        if (name == "passkey") return pk.run(app, out);
    } catch (const std::exception & e) {
        err << "zamba2 " << name << ": " << e.what() << "\n";
        return kExitRuntime;
    }
    err << "zamba2: unknown subcommand " << name << "\n";
    return kExitUsage;
}

} // namespace zamba2::cli
