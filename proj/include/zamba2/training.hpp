// Copyright 2026 The zamba2-desk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "zamba2/checkpoint.hpp"
#include "zamba2/config_io.hpp"
#include "zamba2/model.hpp"

namespace zamba2 {

// ---- learning-rate schedule ------------------------------------------------

// Phase 1: linear warmup to lr_max, cosine to lr_min at phase1_steps.
// Anneal: cosine re-warm from lr_min to the peak over rewarm_steps, then
// cosine decay to lr_final at phase1_steps + anneal_steps.
struct ScheduleConfig {
    double lr_max = 3e-3;
    double lr_min = 3e-4;
    std::size_t warmup_steps = 10;
    std::size_t phase1_steps = 1000;
    std::size_t rewarm_steps = 0;
    std::size_t anneal_steps = 0;
    std::optional<double> lr_final;    // default lr_max / 100
    std::optional<double> anneal_peak; // default (lr_max + lr_min) / 2

    double peak() const { return anneal_peak ? *anneal_peak : (lr_max + lr_min) / 2.0; }
    double final_lr() const { return lr_final ? *lr_final : lr_max / 100.0; }
    std::size_t total_steps() const { return phase1_steps + anneal_steps; }

    void validate() const {
        if (!(lr_max >= 0.0) || !(lr_min >= 0.0)) throw ConfigError("schedule.lr_max", "learning rates must be >= 0");
        if (lr_min > lr_max) throw ConfigError("schedule.lr_min", "must not exceed lr_max");
        if (phase1_steps == 0) throw ConfigError("schedule.phase1_steps", "must be positive");
        if (warmup_steps >= phase1_steps) throw ConfigError("schedule.warmup_steps", "must be < phase1_steps");
        if (rewarm_steps > anneal_steps) throw ConfigError("schedule.rewarm_steps", "must be <= anneal_steps");
        if (anneal_steps > 0 && rewarm_steps == anneal_steps) {
            throw ConfigError("schedule.rewarm_steps", "anneal needs at least one decay step after the re-warm");
        }
        if (lr_final && !(*lr_final >= 0.0)) throw ConfigError("schedule.lr_final", "must be >= 0");
        if (anneal_peak && !(*anneal_peak >= 0.0)) throw ConfigError("schedule.anneal_peak", "must be >= 0");
    }
};

namespace detail {
// 1 at u = 0, 0 at u = 1
inline double cosine_down(double u) { return 0.5 * (1.0 + std::cos(std::numbers::pi * u)); }
} // namespace detail

inline double lr_at(std::size_t step, const ScheduleConfig & c) {
    const std::size_t W = c.warmup_steps, P1 = c.phase1_steps, R = c.rewarm_steps, A = c.anneal_steps;
    if (step < W) return c.lr_max * static_cast<double>(step) / static_cast<double>(W);
    if (step == W) return c.lr_max;
    if (step < P1) {
        const double u = static_cast<double>(step - W) / static_cast<double>(P1 - W);
        return c.lr_min + (c.lr_max - c.lr_min) * detail::cosine_down(u);
    }
    if (step == P1) return c.lr_min;
    if (A == 0) return c.lr_min;
    const double peak = c.peak(), fin = c.final_lr();
    if (step >= P1 + A) return fin;
    if (step < P1 + R) {
        const double u = static_cast<double>(step - P1) / static_cast<double>(R);
        return peak + (c.lr_min - peak) * detail::cosine_down(u);
    }
    if (step == P1 + R) return peak;
    const double u = static_cast<double>(step - P1 - R) / static_cast<double>(A - R);
    return fin + (peak - fin) * detail::cosine_down(u);
}

// ---- context-length curriculum ---------------------------------------------

struct CurriculumConfig {
    std::size_t start_len = 64;
    std::size_t target_len = 1024;
    std::size_t double_every = 100;

    void validate() const {
        if (start_len == 0) throw ConfigError("curriculum.start_len", "must be positive");
        if (target_len < start_len) throw ConfigError("curriculum.target_len", "must be >= start_len");
        if (double_every == 0) throw ConfigError("curriculum.double_every", "must be positive");
    }
};

inline std::size_t curriculum_len(std::size_t step, const CurriculumConfig & c) {
    std::size_t len = c.start_len;
    for (std::size_t k = step / c.double_every; k > 0 && len < c.target_len; --k) len *= 2;
    return std::min(len, c.target_len);
}

// ---- data ------------------------------------------------------------------

// One training sequence: targets[i] is the label for inputs[i];
// kIgnoreTarget excludes a position from the loss.
struct Example {
    std::vector<std::int32_t> inputs;
    std::vector<std::int32_t> targets;
};

// Next-token example from a token window of length n + 1.
inline Example next_token_example(const std::vector<std::int32_t> & window) {
    if (window.size() < 2) throw InputError("next_token_example: window needs at least 2 tokens");
    return {{window.begin(), window.end() - 1}, {window.begin() + 1, window.end()}};
}

struct Batch {
    std::vector<Example> examples;
    std::string source;     // provenance tag
    std::size_t index = 0;  // position within the source's epoch
    std::size_t epoch = 0;  // completed passes over a finite source
};

class BatchSource {
public:
    virtual ~BatchSource() = default;
    virtual Batch next(std::size_t seq_len) = 0;
    virtual json state() const = 0;
    virtual void restore(const json & s) = 0;
};

// Consecutive non-overlapping windows over a token corpus; wraps to the
// start with an epoch increment.
class CorpusSource : public BatchSource {
public:
    CorpusSource(std::string tag, std::vector<std::int32_t> tokens, std::size_t batch_size)
        : tag_(std::move(tag)), tokens_(std::move(tokens)), batch_size_(batch_size) {
        if (batch_size_ == 0) throw ConfigError("batch_size", "must be positive");
    }

    Batch next(std::size_t seq_len) override {
        if (tokens_.size() < seq_len + 1) {
            throw InputError("corpus '" + tag_ + "' has " + std::to_string(tokens_.size()) +
                             " tokens, fewer than one window of " + std::to_string(seq_len + 1));
        }
        Batch b;
        b.source = tag_;
        b.index = index_;
        for (std::size_t i = 0; i < batch_size_; ++i) {
            if (cursor_ + seq_len + 1 > tokens_.size()) {
                cursor_ = 0;
                ++epoch_;
                index_ = 0;
            }
            b.examples.push_back(next_token_example(
                std::vector<std::int32_t>(tokens_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                                          tokens_.begin() + static_cast<std::ptrdiff_t>(cursor_ + seq_len + 1))));
            cursor_ += seq_len;
        }
        b.epoch = epoch_;
        ++index_;
        return b;
    }

    json state() const override { return {{"cursor", cursor_}, {"epoch", epoch_}, {"index", index_}}; }
    void restore(const json & s) override {
        cursor_ = s.at("cursor").get<std::size_t>();
        epoch_ = s.at("epoch").get<std::size_t>();
        index_ = s.at("index").get<std::size_t>();
    }

private:
    std::string tag_;
    std::vector<std::int32_t> tokens_;
    std::size_t batch_size_;
    std::size_t cursor_ = 0, epoch_ = 0, index_ = 0;
};

// A fixed list of batches, cycled with epoch counting. seq_len is ignored.
class BatchListSource : public BatchSource {
public:
    BatchListSource(std::string tag, std::vector<Batch> batches) : tag_(std::move(tag)), batches_(std::move(batches)) {
        if (batches_.empty()) throw InputError("batch source '" + tag_ + "' is empty");
    }

    Batch next(std::size_t) override {
        if (pos_ == batches_.size()) {
            pos_ = 0;
            ++epoch_;
        }
        Batch b = batches_[pos_];
        b.source = tag_;
        b.index = pos_++;
        b.epoch = epoch_;
        return b;
    }

    json state() const override { return {{"pos", pos_}, {"epoch", epoch_}}; }
    void restore(const json & s) override {
        pos_ = s.at("pos").get<std::size_t>();
        epoch_ = s.at("epoch").get<std::size_t>();
    }
    std::size_t size() const { return batches_.size(); }

private:
    std::string tag_;
    std::vector<Batch> batches_;
    std::size_t pos_ = 0, epoch_ = 0;
};

// Batches produced by a seeded generator function.
class GeneratorSource : public BatchSource {
public:
    using Fn = std::function<Batch(Rng &, std::size_t seq_len)>;
    GeneratorSource(std::string tag, Fn fn, std::uint64_t seed) : tag_(std::move(tag)), fn_(std::move(fn)), rng_(seed) {}

    Batch next(std::size_t seq_len) override {
        Batch b = fn_(rng_, seq_len);
        b.source = tag_;
        b.index = index_++;
        return b;
    }
    json state() const override { return {{"rng", rng_.save()}, {"index", index_}}; }
    void restore(const json & s) override {
        rng_.load(s.at("rng").get<std::string>());
        index_ = s.at("index").get<std::size_t>();
    }

private:
    std::string tag_;
    Fn fn_;
    Rng rng_;
    std::size_t index_ = 0;
};

struct MixerConfig {
    double replay_fraction = 0.6;
    std::uint64_t seed = 0;

    void validate() const {
        if (!(replay_fraction >= 0.0 && replay_fraction <= 1.0)) {
            throw ConfigError("mixer.replay_fraction", "must be in [0, 1]");
        }
    }
};

// Each batch comes from the phase-1 stream with probability replay_fraction,
// otherwise from the anneal stream. Batches keep their source's provenance tag.
class ReplayMixer : public BatchSource {
public:
    ReplayMixer(BatchSource & phase1, BatchSource & anneal, MixerConfig cfg)
        : phase1_(phase1), anneal_(anneal), cfg_(cfg), rng_(cfg.seed) {
        cfg_.validate();
    }

    Batch next(std::size_t seq_len) override {
        const bool replay = rng_.uniform() < cfg_.replay_fraction;
        ++(replay ? n_phase1_ : n_anneal_);
        return replay ? phase1_.next(seq_len) : anneal_.next(seq_len);
    }

    json state() const override {
        return {{"rng", rng_.save()}, {"n_phase1", n_phase1_}, {"n_anneal", n_anneal_}};
    }
    void restore(const json & s) override {
        rng_.load(s.at("rng").get<std::string>());
        n_phase1_ = s.at("n_phase1").get<std::size_t>();
        n_anneal_ = s.at("n_anneal").get<std::size_t>();
    }

    std::size_t phase1_draws() const { return n_phase1_; }
    std::size_t anneal_draws() const { return n_anneal_; }

private:
    BatchSource & phase1_;
    BatchSource & anneal_;
    MixerConfig cfg_;
    Rng rng_;
    std::size_t n_phase1_ = 0, n_anneal_ = 0;
};

// ---- optimizer -------------------------------------------------------------

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.1;
    double clip_norm = 1.0;

    void validate() const {
        if (!(beta1 >= 0 && beta1 < 1)) throw ConfigError("adam.beta1", "must be in [0, 1)");
        if (!(beta2 >= 0 && beta2 < 1)) throw ConfigError("adam.beta2", "must be in [0, 1)");
        if (!(eps > 0)) throw ConfigError("adam.eps", "must be positive");
        if (!(weight_decay >= 0)) throw ConfigError("adam.weight_decay", "must be >= 0");
        if (!(clip_norm > 0)) throw ConfigError("adam.clip_norm", "must be positive");
    }
};

// Moments are indexed by ParamId, so a tied tensor has exactly one pair.
template <class T>
struct OptimizerState {
    AdamConfig cfg;
    std::size_t step = 0;
    std::vector<Tensor<T>> m, v;
};

struct StepStats {
    double loss = 0.0;
    double grad_norm = 0.0;    // before clipping
    double clipped_norm = 0.0; // after clipping
    std::size_t tokens = 0;
};

// Token-weighted mean cross-entropy over the batch. Examples run on separate
// tapes and gradients are summed in example order.
template <class T>
std::pair<double, std::vector<Tensor<T>>> batch_loss_and_grads(const Model<T> & m, const Batch & batch,
                                                               std::size_t * n_tokens = nullptr) {
    std::size_t total = 0;
    for (const auto & ex : batch.examples) {
        if (ex.inputs.size() != ex.targets.size()) throw InputError("example inputs and targets differ in length");
        for (auto t : ex.targets) total += t != kIgnoreTarget;
    }
    if (total == 0) throw InputError("batch has no supervised positions");
    if (n_tokens) *n_tokens = total;
    std::vector<Tensor<T>> grads(m.params.size());
    double loss = 0.0;
    for (std::size_t e = 0; e < batch.examples.size(); ++e) {
        const auto & ex = batch.examples[e];
        std::size_t n = 0;
        for (auto t : ex.targets) n += t != kIgnoreTarget;
        if (n == 0) continue;
        GradTape<T> tape;
        auto ce = cross_entropy(forward_graph(tape, m, ex.inputs, Mode::parallel, nullptr), ex.targets);
        const double w = static_cast<double>(n) / static_cast<double>(total);
        const double l = static_cast<double>(ce.value()[0]);
        if (!std::isfinite(l)) {
            throw NumericError("non-finite loss " + std::to_string(l) + " on example " + std::to_string(e) +
                               " of batch from '" + batch.source + "' #" + std::to_string(batch.index));
        }
        loss += w * l;
        tape.backward(scale(ce, static_cast<T>(w)));
        for (const auto & [pid, g] : tape.param_grads()) {
            if (grads[pid].empty()) {
                grads[pid] = *g;
            } else {
                for (std::size_t i = 0; i < g->numel(); ++i) grads[pid][i] += (*g)[i];
            }
        }
    }
    return {loss, std::move(grads)};
}

// Global-norm clipping, decoupled weight decay (matrices only) and Adam.
template <class T>
StepStats apply_update(Model<T> & m, std::vector<Tensor<T>> & grads, OptimizerState<T> & opt, double lr) {
    if (!(lr >= 0.0)) throw ContractError("train_step: lr must be >= 0");
    StepStats st;
    double sq = 0.0;
    for (const auto & g : grads)
        for (std::size_t i = 0; i < g.numel(); ++i) sq += static_cast<double>(g[i]) * static_cast<double>(g[i]);
    st.grad_norm = std::sqrt(sq);
    if (!std::isfinite(st.grad_norm)) throw NumericError("non-finite gradient norm");
    const double clip = st.grad_norm > opt.cfg.clip_norm ? opt.cfg.clip_norm / st.grad_norm : 1.0;
    double sq_after = 0.0;
    if (opt.m.size() != m.params.size()) {
        opt.m.resize(m.params.size());
        opt.v.resize(m.params.size());
    }
    ++opt.step;
    const double b1 = opt.cfg.beta1, b2 = opt.cfg.beta2;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(opt.step));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(opt.step));
    for (ParamId id = 0; id < grads.size(); ++id) {
        auto & g = grads[id];
        if (g.empty()) continue;
        auto & p = m.params[id];
        if (p.frozen) continue;
        if (p.quantized) throw InvariantError("quantized parameter '" + p.name + "' received a gradient update");
        if (clip != 1.0)
            for (auto & x : g.vec()) x = static_cast<T>(static_cast<double>(x) * clip);
        for (auto x : g.vec()) sq_after += static_cast<double>(x) * static_cast<double>(x);
        if (opt.m[id].empty()) {
            opt.m[id] = Tensor<T>(p.shape());
            opt.v[id] = Tensor<T>(p.shape());
        }
        auto & mm = opt.m[id];
        auto & vv = opt.v[id];
        const bool decay = p.value.rank() >= 2 && opt.cfg.weight_decay > 0.0;
        const T wd = static_cast<T>(1.0 - lr * opt.cfg.weight_decay);
        for (std::size_t i = 0; i < g.numel(); ++i) {
            const double gi = static_cast<double>(g[i]);
            mm[i] = static_cast<T>(b1 * static_cast<double>(mm[i]) + (1.0 - b1) * gi);
            vv[i] = static_cast<T>(b2 * static_cast<double>(vv[i]) + (1.0 - b2) * gi * gi);
            const double mh = static_cast<double>(mm[i]) / bc1;
            const double vh = static_cast<double>(vv[i]) / bc2;
            if (decay) p.value[i] *= wd;
            p.value[i] -= static_cast<T>(lr * mh / (std::sqrt(vh) + opt.cfg.eps));
        }
    }
    st.clipped_norm = std::sqrt(sq_after);
    return st;
}

template <class T>
StepStats train_step(Model<T> & m, const Batch & batch, OptimizerState<T> & opt, double lr) {
    std::size_t n = 0;
    auto [loss, grads] = batch_loss_and_grads(m, batch, &n);
    auto st = apply_update(m, grads, opt, lr);
    st.loss = loss;
    st.tokens = n;
    return st;
}

// ---- training run ----------------------------------------------------------

struct TrainPlan {
    ScheduleConfig schedule;
    MixerConfig mixer;
    std::optional<CurriculumConfig> curriculum;
    AdamConfig adam;
    std::size_t seq_len = 64;       // used when there is no curriculum
    std::size_t checkpoint_every = 0; // 0: no periodic checkpoints

    std::size_t total_steps() const { return schedule.total_steps(); }
    std::size_t seq_len_at(std::size_t step) const { return curriculum ? curriculum_len(step, *curriculum) : seq_len; }

    void validate() const {
        schedule.validate();
        mixer.validate();
        adam.validate();
        if (curriculum) curriculum->validate();
        if (seq_len == 0) throw ConfigError("seq_len", "must be positive");
    }
};

inline json to_json(const TrainPlan & p) {
    json s{{"lr_max", p.schedule.lr_max},       {"lr_min", p.schedule.lr_min},
           {"warmup_steps", p.schedule.warmup_steps}, {"phase1_steps", p.schedule.phase1_steps},
           {"rewarm_steps", p.schedule.rewarm_steps}, {"anneal_steps", p.schedule.anneal_steps}};
    if (p.schedule.lr_final) s["lr_final"] = *p.schedule.lr_final;
    if (p.schedule.anneal_peak) s["anneal_peak"] = *p.schedule.anneal_peak;
    json j{{"schedule", s},
           {"mixer", {{"replay_fraction", p.mixer.replay_fraction}, {"seed", p.mixer.seed}}},
           {"adam",
            {{"beta1", p.adam.beta1},
             {"beta2", p.adam.beta2},
             {"eps", p.adam.eps},
             {"weight_decay", p.adam.weight_decay},
             {"clip_norm", p.adam.clip_norm}}},
           {"seq_len", p.seq_len},
           {"checkpoint_every", p.checkpoint_every}};
    if (p.curriculum) {
        j["curriculum"] = {{"start_len", p.curriculum->start_len},
                           {"target_len", p.curriculum->target_len},
                           {"double_every", p.curriculum->double_every}};
    }
    return j;
}

inline TrainPlan train_plan_from_json(const json & j) {
    using detail::check_keys;
    using detail::read_field;
    check_keys(j, "", {"schedule", "mixer", "adam", "curriculum", "seq_len", "checkpoint_every"});
    TrainPlan p;
    if (j.contains("schedule")) {
        const auto & s = j["schedule"];
        check_keys(s, "schedule", {"lr_max", "lr_min", "warmup_steps", "phase1_steps", "rewarm_steps", "anneal_steps",
                                   "lr_final", "anneal_peak"});
        read_field(s, "lr_max", p.schedule.lr_max, "schedule");
        read_field(s, "lr_min", p.schedule.lr_min, "schedule");
        read_field(s, "warmup_steps", p.schedule.warmup_steps, "schedule");
        read_field(s, "phase1_steps", p.schedule.phase1_steps, "schedule");
        read_field(s, "rewarm_steps", p.schedule.rewarm_steps, "schedule");
        read_field(s, "anneal_steps", p.schedule.anneal_steps, "schedule");
        if (s.contains("lr_final")) {
            double v = 0;
            read_field(s, "lr_final", v, "schedule");
            p.schedule.lr_final = v;
        }
        if (s.contains("anneal_peak")) {
            double v = 0;
            read_field(s, "anneal_peak", v, "schedule");
            p.schedule.anneal_peak = v;
        }
    }
    if (j.contains("mixer")) {
        check_keys(j["mixer"], "mixer", {"replay_fraction", "seed"});
        read_field(j["mixer"], "replay_fraction", p.mixer.replay_fraction, "mixer");
        read_field(j["mixer"], "seed", p.mixer.seed, "mixer");
    }
    if (j.contains("adam")) {
        check_keys(j["adam"], "adam", {"beta1", "beta2", "eps", "weight_decay", "clip_norm"});
        read_field(j["adam"], "beta1", p.adam.beta1, "adam");
        read_field(j["adam"], "beta2", p.adam.beta2, "adam");
        read_field(j["adam"], "eps", p.adam.eps, "adam");
        read_field(j["adam"], "weight_decay", p.adam.weight_decay, "adam");
        read_field(j["adam"], "clip_norm", p.adam.clip_norm, "adam");
    }
    if (j.contains("curriculum") && !j["curriculum"].is_null()) {
        check_keys(j["curriculum"], "curriculum", {"start_len", "target_len", "double_every"});
        CurriculumConfig c;
        read_field(j["curriculum"], "start_len", c.start_len, "curriculum");
        read_field(j["curriculum"], "target_len", c.target_len, "curriculum");
        read_field(j["curriculum"], "double_every", c.double_every, "curriculum");
        p.curriculum = c;
    }
    read_field(j, "seq_len", p.seq_len, "");
    read_field(j, "checkpoint_every", p.checkpoint_every, "");
    p.validate();
    return p;
}

struct StepRecord {
    std::size_t step = 0;
    double loss = 0.0;
    double lr = 0.0;
    std::size_t seq_len = 0;
    std::string provenance;
    std::size_t epoch = 0;
    std::size_t index = 0;
    double grad_norm = 0.0;
    double clipped_norm = 0.0;

    json to_json() const {
        return {{"step", step},         {"loss", loss},   {"lr", lr},
                {"seq_len", seq_len},   {"provenance", provenance}, {"epoch", epoch},
                {"index", index},       {"grad_norm", grad_norm}, {"clipped_norm", clipped_norm}};
    }
};

struct RunOptions {
    std::string out_dir;      // checkpoints and metrics; empty: nothing written
    std::string resume_from;  // checkpoint path; empty: fresh start
    std::size_t stop_after = 0; // stop once this many total steps are done (0: run to the end)
    std::function<void(const StepRecord &)> on_step;
};

// Fingerprint of everything that must match for a bitwise resume.
template <class T>
std::string run_fingerprint(const Model<T> & m, const TrainPlan & plan) {
    json j{{"model", to_json(m.config)}, {"plan", to_json(plan)}, {"dtype", dtype_name(dtype_of<T>())}};
    return hex64(fnv1a64(j.dump()));
}

inline std::string checkpoint_name(std::size_t step) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "checkpoint-%08zu.ckpt", step);
    return buf;
}

template <class T>
void save_training_checkpoint(const std::string & path, const Model<T> & m, const OptimizerState<T> & opt,
                              const TrainPlan & plan, std::size_t steps_done, const BatchSource & phase1,
                              const BatchSource * anneal, const BatchSource * mixer) {
    json meta{{"trainer",
               {{"fingerprint", run_fingerprint(m, plan)},
                {"steps_done", steps_done},
                {"opt_step", opt.step},
                {"plan", to_json(plan)},
                {"phase1", phase1.state()},
                {"anneal", anneal ? anneal->state() : json()},
                {"mixer", mixer ? mixer->state() : json()}}}};
    auto f = model_checkpoint(m, meta);
    for (ParamId id = 0; id < opt.m.size(); ++id) {
        if (opt.m[id].empty()) continue;
        f.records.push_back(TensorRecord::dense_of("opt.m." + m.params[id].name, opt.m[id]));
        f.records.push_back(TensorRecord::dense_of("opt.v." + m.params[id].name, opt.v[id]));
    }
    write_checkpoint(path, f);
}

struct TrainResult {
    std::vector<StepRecord> records;
    std::size_t steps_done = 0;
    std::vector<std::string> checkpoints;
};

// Phase 1 draws from `phase1`; the anneal phase (if any) draws through a
// replay mixer over `phase1` and `anneal`. Resuming restores parameters,
// optimizer moments, stream positions and RNG states, and refuses a
// checkpoint whose fingerprint differs from this run.
template <class T>
TrainResult run_training(Model<T> & m, const TrainPlan & plan, BatchSource & phase1, BatchSource * anneal,
                         const RunOptions & opts = {}) {
    plan.validate();
    if (plan.schedule.anneal_steps > 0 && !anneal) throw ConfigError("schedule.anneal_steps", "anneal data required");
    OptimizerState<T> opt;
    opt.cfg = plan.adam;
    std::unique_ptr<ReplayMixer> mixer;
    if (anneal) mixer = std::make_unique<ReplayMixer>(phase1, *anneal, plan.mixer);
    TrainResult res;
    if (!opts.resume_from.empty()) {
        auto f = read_checkpoint(opts.resume_from);
        const auto & meta = f.header.at("meta");
        if (!meta.contains("trainer")) throw FormatError(opts.resume_from + ": not a training checkpoint");
        const auto & tr = meta.at("trainer");
        const std::string want = run_fingerprint(m, plan);
        if (tr.at("fingerprint").get<std::string>() != want) {
            throw ContractError("refusing to resume: checkpoint config hash " + tr.at("fingerprint").get<std::string>() +
                                " differs from this run's " + want);
        }
        Model<T> loaded = model_from_checkpoint<T>(f, opts.resume_from);
        for (ParamId id = 0; id < m.params.size(); ++id) {
            m.params[id].value = loaded.params[id].value;
            m.params[id].quantized = loaded.params[id].quantized;
            m.params[id].frozen = loaded.params[id].frozen;
        }
        opt.m.assign(m.params.size(), {});
        opt.v.assign(m.params.size(), {});
        for (ParamId id = 0; id < m.params.size(); ++id) {
            if (const auto * r = f.find("opt.m." + m.params[id].name)) opt.m[id] = r->template to_tensor<T>();
            if (const auto * r = f.find("opt.v." + m.params[id].name)) opt.v[id] = r->template to_tensor<T>();
        }
        opt.step = tr.at("opt_step").get<std::size_t>();
        res.steps_done = tr.at("steps_done").get<std::size_t>();
        phase1.restore(tr.at("phase1"));
        if (anneal && !tr.at("anneal").is_null()) anneal->restore(tr.at("anneal"));
        if (mixer && !tr.at("mixer").is_null()) mixer->restore(tr.at("mixer"));
    }
    std::ofstream metrics;
    if (!opts.out_dir.empty()) {
        std::filesystem::create_directories(opts.out_dir);
        metrics.open(opts.out_dir + "/metrics.jsonl", opts.resume_from.empty() ? std::ios::trunc : std::ios::app);
        if (!metrics) throw InputError("cannot write metrics in " + opts.out_dir);
    }
    const std::size_t total = plan.total_steps();
    const std::size_t end = opts.stop_after ? std::min(opts.stop_after, total) : total;
    for (std::size_t s = res.steps_done; s < end; ++s) {
        const std::size_t len = plan.seq_len_at(s);
        Batch b = s < plan.schedule.phase1_steps ? phase1.next(len) : mixer->next(len);
        const double lr = lr_at(s, plan.schedule);
        StepStats st;
        try {
            st = train_step(m, b, opt, lr);
        } catch (const NumericError & e) {
            throw NumericError(std::string(e.what()) + " at step " + std::to_string(s) + " (lr " + std::to_string(lr) + ")");
        }
        StepRecord rec{s, st.loss, lr, len, b.source, b.epoch, b.index, st.grad_norm, st.clipped_norm};
        if (metrics.is_open()) metrics << rec.to_json().dump() << "\n" << std::flush;
        if (opts.on_step) opts.on_step(rec);
        res.records.push_back(std::move(rec));
        res.steps_done = s + 1;
        const bool periodic = plan.checkpoint_every && res.steps_done % plan.checkpoint_every == 0;
        if (!opts.out_dir.empty() && (periodic || res.steps_done == end)) {
            const std::string path = opts.out_dir + "/" + checkpoint_name(res.steps_done);
            save_training_checkpoint(path, m, opt, plan, res.steps_done, phase1, anneal, mixer.get());
            res.checkpoints.push_back(path);
        }
    }
    return res;
}

} // namespace zamba2
