// Copyright 2026 The zamba2-desk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <sys/utsname.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "zamba2/baseline.hpp"
#include "zamba2/checkpoint.hpp"
#include "zamba2/model.hpp"

namespace zamba2 {

using json = nlohmann::json;

// Works for Model<T> and PureTransformer<T>.
template <class M>
using caches_of = decltype(make_caches(std::declval<const M &>(), std::size_t{}));
template <class M>
using logits_of = decltype(forward(std::declval<const M &>(), std::vector<std::int32_t>{}));

template <class M>
struct PrefillResult {
    caches_of<M> caches;
    logits_of<M> last_logits; // [vocab]
};

namespace detail {

template <class T>
Tensor<T> last_row(const Tensor<T> & logits) {
    const std::size_t L = logits.dim(0), V = logits.dim(1);
    Tensor<T> r({V});
    std::copy_n(logits.data() + (L - 1) * V, V, r.data());
    return r;
}

} // namespace detail

// Parallel forward over the prompt that leaves every SSM state at the final
// position and every KV cache holding all prompt positions. `capacity` is
// the KV capacity in tokens (0 means prompt length).
template <class M>
PrefillResult<M> prefill(const M & m, const std::vector<std::int32_t> & prompt, std::size_t capacity = 0) {
    if (prompt.empty()) throw InputError("prefill: empty prompt");
    if (capacity == 0) capacity = prompt.size();
    PrefillResult<M> r{make_caches(m, capacity), {}};
    r.last_logits = detail::last_row(forward(m, prompt, Mode::parallel, &r.caches));
    return r;
}

template <class M>
logits_of<M> decode_step(const M & m, std::int32_t token, caches_of<M> & caches) {
    const std::size_t ssm_before = caches.ssm_bytes();
    auto lg = forward(m, {token}, Mode::recurrent, &caches);
    if (caches.ssm_bytes() != ssm_before) throw InvariantError("decode_step: SSM state size changed");
    return detail::last_row(lg);
}

// ---- sampling --------------------------------------------------------------

enum class SamplerKind : std::uint8_t { greedy, temperature, top_k };

struct Sampler {
    SamplerKind kind = SamplerKind::greedy;
    double temperature = 1.0;
    std::size_t k = 0;

    static Sampler greedy() { return {}; }
    static Sampler with_temperature(double tau) { return {SamplerKind::temperature, tau, 0}; }
    static Sampler top_k_of(std::size_t k, double tau = 1.0) { return {SamplerKind::top_k, tau, k}; }

    void validate() const {
        if (kind != SamplerKind::greedy && !(temperature > 0.0)) {
            throw ConfigError("sampler.temperature", "must be positive");
        }
        if (kind == SamplerKind::top_k && k == 0) throw ConfigError("sampler.k", "must be >= 1");
    }
};

// Lowest index wins ties, so greedy decoding is fully deterministic.
template <class T>
std::int32_t argmax_token(const Tensor<T> & logits) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < logits.numel(); ++j) {
        if (logits[j] > logits[best]) best = j;
    }
    return static_cast<std::int32_t>(best);
}

template <class T>
std::int32_t sample_token(const Tensor<T> & logits, const Sampler & s, Rng & rng) {
    if (s.kind == SamplerKind::greedy) return argmax_token(logits);
    const std::size_t V = logits.numel();
    std::vector<std::size_t> idx(V);
    for (std::size_t j = 0; j < V; ++j) idx[j] = j;
    std::size_t keep = V;
    if (s.kind == SamplerKind::top_k) {
        keep = std::min(s.k, V);
        std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return logits[a] > logits[b]; });
    }
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < keep; ++j) mx = std::max(mx, static_cast<double>(logits[idx[j]]));
    std::vector<double> w(keep);
    double total = 0.0;
    for (std::size_t j = 0; j < keep; ++j) {
        w[j] = std::exp((static_cast<double>(logits[idx[j]]) - mx) / s.temperature);
        total += w[j];
    }
    double u = rng.uniform() * total;
    for (std::size_t j = 0; j < keep; ++j) {
        if (u < w[j]) return static_cast<std::int32_t>(idx[j]);
        u -= w[j];
    }
    // rounding left u just past the end; take the last candidate with mass
    for (std::size_t j = keep; j-- > 0;) {
        if (w[j] > 0) return static_cast<std::int32_t>(idx[j]);
    }
    return static_cast<std::int32_t>(idx[0]);
}

struct GenerationTimings {
    double ttft_s = 0.0;            // prefill through the first sampled token
    std::vector<double> step_s;     // one per decode step
};

struct GenerateOptions {
    std::size_t capacity = 0;                // 0: prompt + n_tokens
    std::optional<std::int32_t> stop_token;  // generation ends after emitting it
    GenerationTimings * timings = nullptr;
};

// Prefill, then n_tokens - 1 decode steps. Returns the continuation only.
template <class M>
std::vector<std::int32_t> generate(const M & m, const std::vector<std::int32_t> & prompt, std::size_t n_tokens,
                                   const Sampler & sampler, std::uint64_t seed, const GenerateOptions & opts = {}) {
    sampler.validate();
    if (prompt.empty()) throw InputError("generate: empty prompt");
    std::vector<std::int32_t> out;
    if (n_tokens == 0) return out;
    using clock = std::chrono::steady_clock;
    Rng rng(seed);
    const auto t0 = clock::now();
    auto pre = prefill(m, prompt, opts.capacity ? opts.capacity : prompt.size() + n_tokens);
    out.push_back(sample_token(pre.last_logits, sampler, rng));
    if (opts.timings) opts.timings->ttft_s = std::chrono::duration<double>(clock::now() - t0).count();
    while (out.size() < n_tokens && !(opts.stop_token && out.back() == *opts.stop_token)) {
        const auto s0 = clock::now();
        auto lg = decode_step(m, out.back(), pre.caches);
        out.push_back(sample_token(lg, sampler, rng));
        if (opts.timings) opts.timings->step_s.push_back(std::chrono::duration<double>(clock::now() - s0).count());
    }
    return out;
}

// ---- statistics ------------------------------------------------------------

inline double median_of(std::vector<double> v) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline double coeff_of_variation(const std::vector<double> & v) {
    if (v.size() < 2) return 0.0;
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double var = 0.0;
    for (double x : v) var += (x - mean) * (x - mean);
    var /= static_cast<double>(v.size() - 1);
    return mean > 0 ? std::sqrt(var) / mean : 0.0;
}

// Ordinary least squares y = intercept + slope x.
struct SlopeFit {
    double slope = 0.0;
    double intercept = 0.0;
    double slope_stderr = 0.0;
    double t_stat = 0.0;
    double mean_y = 0.0;
    double x_range = 0.0;
    // predicted change across the x range relative to the mean of y
    double relative_change() const { return mean_y != 0.0 ? slope * x_range / mean_y : 0.0; }
};

inline SlopeFit fit_slope(const std::vector<double> & x, const std::vector<double> & y) {
    if (x.size() != y.size() || x.size() < 3) throw InputError("fit_slope: need >= 3 paired points");
    const double n = static_cast<double>(x.size());
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < x.size(); ++i) mx += x[i], my += y[i];
    mx /= n;
    my /= n;
    double sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxx += (x[i] - mx) * (x[i] - mx);
        sxy += (x[i] - mx) * (y[i] - my);
    }
    if (sxx == 0) throw InputError("fit_slope: x has no spread");
    SlopeFit f;
    f.slope = sxy / sxx;
    f.intercept = my - f.slope * mx;
    double sse = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double r = y[i] - f.intercept - f.slope * x[i];
        sse += r * r;
    }
    f.slope_stderr = std::sqrt(sse / (n - 2.0) / sxx);
    f.t_stat = f.slope_stderr > 0 ? f.slope / f.slope_stderr : (f.slope == 0 ? 0.0 : std::copysign(1e300, f.slope));
    f.mean_y = my;
    f.x_range = *std::max_element(x.begin(), x.end()) - *std::min_element(x.begin(), x.end());
    return f;
}

// ---- decode profile --------------------------------------------------------

struct DecodeProfile {
    std::vector<double> bin_position; // mean position of each bin
    std::vector<double> bin_median_s; // median step time in the bin
    SlopeFit fit;                     // seconds per position, over bin medians
    double mean_step_s = 0.0;
};

// Decode step time as a function of position. Caches are snapshotted at each
// bin centre, then bins are timed in a fresh random order every round, so slow
// drift of the host shows up as noise rather than as a slope. The fit runs over
// per-bin medians (medians damp scheduler spikes).
template <class M>
DecodeProfile profile_decode(const M & m, std::size_t max_position, std::size_t bins = 32, std::uint64_t seed = 0,
                             std::size_t rounds = 24, std::size_t steps_per_sample = 4) {
    if (max_position < 2 * bins || bins < 3) throw InputError("profile_decode: need max_position >= 2 * bins >= 6");
    if (rounds == 0 || steps_per_sample == 0) throw InputError("profile_decode: rounds and steps_per_sample must be positive");
    using clock = std::chrono::steady_clock;
    Rng rng(seed);
    const auto V = m.config.vocab_size;
    auto pre = prefill(m, {static_cast<std::int32_t>(rng.below(V))}, max_position + steps_per_sample + 1);
    const std::size_t per = max_position / bins;
    std::vector<std::size_t> at(bins);
    for (std::size_t b = 0; b < bins; ++b) at[b] = b * per + per / 2 + 1;
    std::vector<decltype(pre.caches)> snap;
    snap.reserve(bins);
    for (std::size_t b = 0; b < bins; ++b) {
        while (pre.caches.position < at[b]) decode_step(m, static_cast<std::int32_t>(rng.below(V)), pre.caches);
        snap.push_back(pre.caches);
    }
    std::vector<std::vector<double>> t(bins);
    std::vector<std::size_t> order(bins);
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t r = 0; r < rounds; ++r) {
        for (std::size_t i = bins; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
        for (std::size_t b : order) {
            auto caches = snap[b];
            for (std::size_t k = 0; k < steps_per_sample; ++k) {
                const auto tok = static_cast<std::int32_t>(rng.below(V));
                const auto s0 = clock::now();
                auto lg = decode_step(m, tok, caches);
                t[b].push_back(std::chrono::duration<double>(clock::now() - s0).count());
                (void)lg;
            }
        }
    }
    DecodeProfile d;
    double sum = 0;
    std::size_t n = 0;
    for (std::size_t b = 0; b < bins; ++b) {
        for (double v : t[b]) sum += v, ++n;
        d.bin_median_s.push_back(median_of(t[b]));
        d.bin_position.push_back(static_cast<double>(at[b]) + 0.5 * static_cast<double>(steps_per_sample - 1));
    }
    d.mean_step_s = sum / static_cast<double>(n);
    d.fit = fit_slope(d.bin_position, d.bin_median_s);
    return d;
}

// ---- benchmark -------------------------------------------------------------

struct BenchConfig {
    std::vector<std::size_t> prompt_lens{64, 128, 256, 512};
    std::size_t gen_len = 32;
    std::size_t repeats = 3;
    std::uint64_t seed = 0;
    std::size_t micro_context = 4096; // 0 skips the block microbench
    double cv_warn = 0.25;            // warn when repeats vary more than this
};

struct BenchRow {
    std::size_t context_len = 0;
    double ttft_s = 0, tps = 0;           // hybrid, medians over repeats
    double ttft_s_pure = 0, tps_pure = 0; // layer-matched pure transformer
    std::size_t kv_bytes_hybrid = 0, kv_bytes_pure = 0;         // measured after prefill
    std::size_t kv_analytic_hybrid = 0, kv_analytic_pure = 0;   // analytic at context_len
    std::size_t ssm_bytes_hybrid = 0;
    std::size_t peak_bytes_hybrid = 0, peak_bytes_pure = 0;     // measured after generation
    double ratio = 0;            // pure : hybrid KV, layer-matched
    double ratio_convention = 0; // pure : hybrid KV, one attention layer per backbone layer
};

struct BlockMicrobench {
    std::size_t context = 0;
    double mamba_s = 0, attention_s = 0;
    double mamba_tps = 0, attention_tps = 0;
    double throughput_ratio = 0; // mamba / attention
};

struct BenchReport {
    json env;
    std::vector<BenchRow> rows;
    std::optional<BlockMicrobench> micro;
    std::vector<std::string> warnings;
};

inline json environment_info(const std::string & dtype) {
    json e{{"dtype", dtype}, {"eigen_threads", Eigen::nbThreads()},
           {"hardware_threads", std::thread::hardware_concurrency()}};
    utsname u{};
    if (uname(&u) == 0) e["host"] = std::string(u.sysname) + " " + u.release + " " + u.machine;
#ifdef __VERSION__
    e["compiler"] = __VERSION__;
#endif
#ifdef NDEBUG
    e["build"] = "release";
#else
    e["build"] = "debug";
#endif
    return e;
}

namespace detail {

struct TimedRun {
    double ttft_s = 0, tps = 0;
    std::size_t kv_after_prefill = 0, ssm_after_prefill = 0, peak_bytes = 0;
};

template <class M>
TimedRun timed_run(const M & m, const std::vector<std::int32_t> & prompt, std::size_t gen_len) {
    using clock = std::chrono::steady_clock;
    TimedRun r;
    const auto t0 = clock::now();
    auto pre = prefill(m, prompt, prompt.size() + gen_len);
    std::int32_t tok = argmax_token(pre.last_logits);
    r.ttft_s = std::chrono::duration<double>(clock::now() - t0).count();
    r.kv_after_prefill = pre.caches.kv_bytes();
    r.ssm_after_prefill = pre.caches.ssm_bytes();
    const auto t1 = clock::now();
    for (std::size_t i = 0; i < gen_len; ++i) tok = argmax_token(decode_step(m, tok, pre.caches));
    const double dt = std::chrono::duration<double>(clock::now() - t1).count();
    r.tps = gen_len && dt > 0 ? static_cast<double>(gen_len) / dt : 0.0;
    r.peak_bytes = pre.caches.bytes();
    return r;
}

} // namespace detail

// Times one Mamba2 block and one attention block over `context` tokens in
// parallel (prefill) form at the model's dims.
template <class T>
BlockMicrobench block_microbench(const ModelConfig & c, std::size_t context, std::size_t repeats,
                                 std::uint64_t seed) {
    using clock = std::chrono::steady_clock;
    Rng rng(seed);
    ParameterStore<T> store;
    const auto ssm = make_ssm_block(store, "mamba", c.ssm_dims(), rng, 1);
    const auto att = make_shared_block(store, "attn", c.d_model, c.attn_heads, c.mlp_expansion, rng, 1);
    const auto x = randn<T>({context, c.d_model}, rng, 1.0);
    std::vector<std::int64_t> pos(context);
    for (std::size_t i = 0; i < context; ++i) pos[i] = static_cast<std::int64_t>(i);
    std::vector<double> tm, ta;
    for (std::size_t r = 0; r < std::max<std::size_t>(repeats, 1); ++r) {
        {
            GradTape<T> tape(false);
            const auto t0 = clock::now();
            (void)mamba2_block_forward(tape, store, ssm, tape.constant(x), Mode::parallel, nullptr);
            tm.push_back(std::chrono::duration<double>(clock::now() - t0).count());
        }
        {
            GradTape<T> tape(false);
            const auto t0 = clock::now();
            (void)shared_block_forward(tape, store, att, {}, c.rotary, nullptr, pos, tape.constant(x));
            ta.push_back(std::chrono::duration<double>(clock::now() - t0).count());
        }
    }
    BlockMicrobench b;
    b.context = context;
    b.mamba_s = median_of(tm);
    b.attention_s = median_of(ta);
    b.mamba_tps = static_cast<double>(context) / b.mamba_s;
    b.attention_tps = static_cast<double>(context) / b.attention_s;
    b.throughput_ratio = b.mamba_tps / b.attention_tps;
    return b;
}

template <class T>
BenchReport bench(const Model<T> & hybrid, const PureTransformer<T> & pure, const BenchConfig & cfg) {
    const auto & c = hybrid.config;
    if (pure.n_layers() != pure_layer_count(c) || pure.config.d_model != c.d_model ||
        pure.config.attn_heads != c.attn_heads) {
        throw ContractError("bench: baseline is not layer-matched to the hybrid");
    }
    if (cfg.repeats == 0) throw ConfigError("bench.repeats", "must be >= 1");
    BenchReport rep;
    rep.env = environment_info(dtype_name(dtype_of<T>()));
    rep.env["model"] = c.name;
    rep.env["hybrid_params"] = hybrid.params.total_numel();
    rep.env["pure_params"] = pure.params.total_numel();
    rep.env["pure_layers"] = pure.n_layers();
    Rng rng(cfg.seed);
    for (std::size_t L : cfg.prompt_lens) {
        if (L == 0) throw ConfigError("bench.prompt_lens", "lengths must be positive");
        std::vector<std::int32_t> prompt(L);
        for (auto & t : prompt) t = static_cast<std::int32_t>(rng.below(c.vocab_size));
        std::vector<double> th, ph, tp, pp;
        detail::TimedRun hr, pr;
        for (std::size_t r = 0; r < cfg.repeats; ++r) {
            hr = detail::timed_run(hybrid, prompt, cfg.gen_len);
            pr = detail::timed_run(pure, prompt, cfg.gen_len);
            th.push_back(hr.ttft_s);
            ph.push_back(hr.tps);
            tp.push_back(pr.ttft_s);
            pp.push_back(pr.tps);
        }
        BenchRow row;
        row.context_len = L;
        row.ttft_s = median_of(th);
        row.tps = median_of(ph);
        row.ttft_s_pure = median_of(tp);
        row.tps_pure = median_of(pp);
        row.kv_bytes_hybrid = hr.kv_after_prefill;
        row.kv_bytes_pure = pr.kv_after_prefill;
        row.ssm_bytes_hybrid = hr.ssm_after_prefill;
        row.peak_bytes_hybrid = hr.peak_bytes;
        row.peak_bytes_pure = pr.peak_bytes;
        const auto an = analytic_cache_bytes(c, L, sizeof(T));
        row.kv_analytic_hybrid = an.kv_bytes;
        row.kv_analytic_pure = an.pure_transformer_kv_bytes;
        row.ratio = an.ratio;
        row.ratio_convention = an.ratio_convention;
        if (row.kv_bytes_hybrid != row.kv_analytic_hybrid || row.kv_bytes_pure != row.kv_analytic_pure) {
            rep.warnings.push_back("measured KV bytes differ from analytic at context " + std::to_string(L));
        }
        for (const auto & [name, v] : {std::pair{"ttft", &th}, {"tps", &ph}, {"ttft_pure", &tp}, {"tps_pure", &pp}}) {
            const double cv = coeff_of_variation(*v);
            if (cv > cfg.cv_warn) {
                rep.warnings.push_back(std::string("high variance in ") + name + " at context " + std::to_string(L) +
                                       " (cv " + std::to_string(cv) + ")");
            }
        }
        rep.rows.push_back(row);
    }
    if (cfg.micro_context) rep.micro = block_microbench<T>(c, cfg.micro_context, cfg.repeats, cfg.seed);
    return rep;
}

inline json to_json(const BenchRow & r) {
    return json{{"context_len", r.context_len},
                {"ttft_s", r.ttft_s},
                {"tps", r.tps},
                {"ttft_s_pure", r.ttft_s_pure},
                {"tps_pure", r.tps_pure},
                {"kv_bytes_hybrid", r.kv_bytes_hybrid},
                {"kv_bytes_pure", r.kv_bytes_pure},
                {"kv_analytic_hybrid", r.kv_analytic_hybrid},
                {"kv_analytic_pure", r.kv_analytic_pure},
                {"ssm_bytes_hybrid", r.ssm_bytes_hybrid},
                {"peak_bytes_hybrid", r.peak_bytes_hybrid},
                {"peak_bytes_pure", r.peak_bytes_pure},
                {"ratio", r.ratio},
                {"ratio_convention", r.ratio_convention}};
}

inline json to_json(const BlockMicrobench & b) {
    return json{{"context", b.context},         {"mamba_s", b.mamba_s},         {"attention_s", b.attention_s},
                {"mamba_tps", b.mamba_tps},     {"attention_tps", b.attention_tps},
                {"throughput_ratio", b.throughput_ratio}};
}

// One record per line: env, rows, microbench, warnings.
inline std::string bench_jsonl(const BenchReport & r) {
    std::ostringstream os;
    os << json{{"type", "env"}, {"env", r.env}}.dump() << "\n";
    for (const auto & row : r.rows) {
        auto j = to_json(row);
        j["type"] = "row";
        os << j.dump() << "\n";
    }
    if (r.micro) {
        auto j = to_json(*r.micro);
        j["type"] = "block_microbench";
        os << j.dump() << "\n";
    }
    for (const auto & w : r.warnings) os << json{{"type", "warning"}, {"message", w}}.dump() << "\n";
    return os.str();
}

// Plot-ready table; the first six columns are the stable interface.
inline std::string bench_tsv(const BenchReport & r) {
    std::ostringstream os;
    os.precision(9);
    os << "context_len\tttft_s\ttps\tkv_bytes_hybrid\tkv_bytes_pure\tratio\tratio_convention\tttft_s_pure\ttps_pure\n";
    for (const auto & x : r.rows) {
        os << x.context_len << "\t" << x.ttft_s << "\t" << x.tps << "\t" << x.kv_bytes_hybrid << "\t"
           << x.kv_bytes_pure << "\t" << x.ratio << "\t" << x.ratio_convention << "\t" << x.ttft_s_pure << "\t"
           << x.tps_pure << "\n";
    }
    return os.str();
}

} // namespace zamba2
