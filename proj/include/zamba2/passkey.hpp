// Copyright 2026 The zamba2-desk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "zamba2/inference.hpp"
#include "zamba2/training.hpp"

namespace zamba2 {

// ---- byte tokenizer --------------------------------------------------------

inline std::vector<std::int32_t> encode_bytes(std::string_view s) {
    std::vector<std::int32_t> t;
    t.reserve(s.size());
    for (unsigned char c : s) t.push_back(static_cast<std::int32_t>(c));
    return t;
}

// Special tokens decode to nothing.
inline std::string decode_bytes(const std::vector<std::int32_t> & t) {
    std::string s;
    s.reserve(t.size());
    for (auto v : t) {
        if (v >= 0 && v < 256) s.push_back(static_cast<char>(v));
    }
    return s;
}

// ---- haystack construction -------------------------------------------------

// Filler never contains digits or the word "is", so the needle's cue
// appears only in the needle and the query.
inline const std::vector<std::string> & filler_sentences() {
    static const std::vector<std::string> s{
        "The grass grows green. ",           "The sky turns blue. ",
        "The sun sets slowly. ",             "Here we go. ",
        "There and back again. ",            "The river runs past the old mill. ",
        "A cat sleeps on the warm wall. ",   "Rain fell on the quiet town. ",
        "The road bends toward the hills. ", "Bread comes out of the oven each morning. ",
        "The lamp stays on all night. ",     "Boats drift slowly in the harbor. ",
    };
    return s;
}

inline std::string needle_sentence(const std::string & key) { return "The pass key is " + key + ". "; }
inline const std::string & passkey_query() {
    static const std::string q = "What is the pass key? The pass key is ";
    return q;
}

struct PasskeySpec {
    std::size_t total_len = 256; // tokens, query included
    double depth_percent = 50.0;
    std::string key = "000000";
    std::uint64_t filler_seed = 0;
};

struct PasskeySample {
    std::vector<std::int32_t> tokens; // haystack with needle, then the query
    std::string answer;
    std::vector<std::int32_t> answer_tokens;
    std::size_t needle_begin = 0, needle_end = 0; // [begin, end)
};

// Needle start for a sequence of `total` tokens: round(depth/100 * (total -
// needle)), clamped so the needle ends at or before the query.
inline std::size_t needle_start(std::size_t total, std::size_t needle, std::size_t query, double depth_percent) {
    const double raw = std::round(depth_percent / 100.0 * static_cast<double>(total - needle));
    const std::size_t hi = total - query - needle;
    return std::min(static_cast<std::size_t>(std::max(raw, 0.0)), hi);
}

inline PasskeySample passkey_make(const PasskeySpec & spec) {
    if (spec.key.empty()) throw InputError("passkey: empty key");
    for (char c : spec.key) {
        if (c < '0' || c > '9') throw InputError("passkey: key must be digits");
    }
    if (!(spec.depth_percent >= 0.0 && spec.depth_percent <= 100.0)) {
        throw InputError("passkey: depth_percent must be in [0, 100]");
    }
    const std::string needle = needle_sentence(spec.key);
    const std::string & query = passkey_query();
    if (spec.total_len < needle.size() + query.size()) {
        throw InputError("passkey: total_len " + std::to_string(spec.total_len) + " is shorter than needle + query (" +
                         std::to_string(needle.size() + query.size()) + ")");
    }
    const std::size_t start = needle_start(spec.total_len, needle.size(), query.size(), spec.depth_percent);
    const std::size_t filler_len = spec.total_len - needle.size() - query.size();
    Rng rng(spec.filler_seed);
    const auto & pool = filler_sentences();
    std::string filler;
    while (filler.size() < filler_len) filler += pool[rng.below(pool.size())];
    filler.resize(filler_len);
    PasskeySample s;
    s.tokens = encode_bytes(filler.substr(0, start) + needle + filler.substr(start) + query);
    s.answer = spec.key;
    s.answer_tokens = encode_bytes(spec.key);
    s.needle_begin = start;
    s.needle_end = start + needle.size();
    return s;
}

inline std::string random_key(Rng & rng, std::size_t digits) {
    std::string k(digits, '0');
    for (auto & c : k) c = static_cast<char>('0' + rng.below(10));
    return k;
}

// Training example: the loss covers only the answer digits.
inline Example passkey_example(const PasskeySample & s) {
    std::vector<std::int32_t> full = s.tokens;
    full.insert(full.end(), s.answer_tokens.begin(), s.answer_tokens.end());
    Example ex = next_token_example(full);
    for (std::size_t i = 0; i + 1 < s.tokens.size(); ++i) ex.targets[i] = kIgnoreTarget;
    return ex;
}

// Batch of random passkey examples of length seq_len (random depth, key,
// filler); for GeneratorSource.
inline Batch passkey_batch(Rng & rng, std::size_t seq_len, std::size_t batch_size, std::size_t key_digits) {
    Batch b;
    for (std::size_t i = 0; i < batch_size; ++i) {
        PasskeySpec spec;
        spec.total_len = seq_len;
        spec.depth_percent = rng.uniform(0.0, 100.0);
        spec.key = random_key(rng, key_digits);
        spec.filler_seed = rng.next_u64();
        b.examples.push_back(passkey_example(passkey_make(spec)));
    }
    return b;
}

// ---- evaluation ------------------------------------------------------------

// Produces n answer tokens for a prompt.
using PasskeyAnswerer = std::function<std::vector<std::int32_t>(const std::vector<std::int32_t> &, std::size_t)>;

struct PasskeyGrid {
    std::vector<std::size_t> lens{64, 128, 256};
    std::vector<double> depths{0, 50, 100};
    std::size_t samples_per_cell = 10;
    std::size_t key_digits = 6;
    std::uint64_t seed = 0;
    std::size_t max_len = 0; // cells longer than this are skipped (0: none)
};

struct PasskeyCell {
    std::size_t len = 0;
    double depth = 0;
    std::size_t correct = 0, n = 0;
    bool skipped = false;
    double accuracy() const { return n ? static_cast<double>(correct) / static_cast<double>(n) : 0.0; }
};

struct PasskeyMatrix {
    std::vector<PasskeyCell> cells; // lens-major

    // Mean accuracy over evaluated cells with len in [lo, hi].
    double mean_accuracy(std::size_t lo, std::size_t hi) const {
        std::size_t c = 0, n = 0;
        for (const auto & x : cells) {
            if (x.skipped || x.len < lo || x.len > hi) continue;
            c += x.correct;
            n += x.n;
        }
        return n ? static_cast<double>(c) / static_cast<double>(n) : 0.0;
    }
};

// Each sample draws its key and filler from a stream seeded by (seed, len,
// depth, sample), so a cell is reproducible in any grid.
inline PasskeyMatrix passkey_eval(const PasskeyAnswerer & answer, const PasskeyGrid & g) {
    if (g.key_digits == 0) throw ConfigError("passkey.key_digits", "must be >= 1");
    PasskeyMatrix m;
    for (std::size_t li = 0; li < g.lens.size(); ++li) {
        for (std::size_t di = 0; di < g.depths.size(); ++di) {
            PasskeyCell cell;
            cell.len = g.lens[li];
            cell.depth = g.depths[di];
            if (g.max_len && cell.len > g.max_len) {
                cell.skipped = true;
                m.cells.push_back(cell);
                continue;
            }
            for (std::size_t s = 0; s < g.samples_per_cell; ++s) {
                const auto depth_key = static_cast<std::uint64_t>(std::llround(cell.depth * 1000.0));
                Rng rng(g.seed ^ (0x9e3779b97f4a7c15ull * (1 + cell.len * 1000003 + depth_key * 7919 + s)));
                PasskeySpec spec;
                spec.total_len = cell.len;
                spec.depth_percent = cell.depth;
                spec.key = random_key(rng, g.key_digits);
                spec.filler_seed = rng.next_u64();
                const auto sample = passkey_make(spec);
                std::vector<std::int32_t> got;
                try {
                    got = answer(sample.tokens, sample.answer_tokens.size());
                } catch (const CapacityError &) {
                    cell.skipped = true;
                    break;
                }
                cell.correct += got == sample.answer_tokens;
                ++cell.n;
            }
            if (cell.skipped) cell.correct = cell.n = 0;
            m.cells.push_back(cell);
        }
    }
    return m;
}

inline std::string passkey_tsv(const PasskeyMatrix & m) {
    std::ostringstream os;
    os << "len\tdepth\taccuracy\n";
    for (const auto & c : m.cells) {
        os << c.len << "\t" << c.depth << "\t";
        if (c.skipped) {
            os << "skipped";
        } else {
            os << c.accuracy();
        }
        os << "\n";
    }
    return os.str();
}

// Greedy decoding with the model; with s_override the rotary angles are
// NTK-rescaled by that factor for the evaluation only.
template <class T>
PasskeyAnswerer model_answerer(const Model<T> & m, std::optional<double> s_override = std::nullopt) {
    std::shared_ptr<const Model<T>> mp;
    if (s_override) {
        auto copy = std::make_shared<Model<T>>(m);
        copy->config.rotary.s = *s_override;
        copy->config.rotary.validate();
        mp = copy;
    } else {
        mp = std::shared_ptr<const Model<T>>(&m, [](const Model<T> *) {});
    }
    return [mp](const std::vector<std::int32_t> & prompt, std::size_t n) {
        return generate(*mp, prompt, n, Sampler::greedy(), 0);
    };
}

// Harness self-test stubs.
inline PasskeyAnswerer echo_answerer() {
    return [](const std::vector<std::int32_t> & prompt, std::size_t n) {
        const auto pre = encode_bytes("The pass key is ");
        auto it = std::search(prompt.begin(), prompt.end(), pre.begin(), pre.end());
        if (it == prompt.end()) return std::vector<std::int32_t>(n, 0);
        it += static_cast<std::ptrdiff_t>(pre.size());
        std::vector<std::int32_t> out;
        for (std::size_t i = 0; i < n && it != prompt.end(); ++i) out.push_back(*it++);
        return out;
    };
}

inline PasskeyAnswerer random_answerer(std::uint64_t seed) {
    auto rng = std::make_shared<Rng>(seed);
    return [rng](const std::vector<std::int32_t> &, std::size_t n) {
        std::vector<std::int32_t> out(n);
        for (auto & t : out) t = static_cast<std::int32_t>('0' + rng->below(10));
        return out;
    };
}

} // namespace zamba2
