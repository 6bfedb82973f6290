// Copyright 2026 The zamba2-desk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "zamba2/model.hpp"

namespace zamba2 {

using json = nlohmann::json;

namespace detail {

// Rejects keys outside `allowed` so typos in config files fail loudly.
inline void check_keys(const json & j, const std::string & where, std::initializer_list<const char *> allowed) {
    if (!j.is_object()) throw ConfigError(where, "expected an object");
    std::set<std::string> ok(allowed.begin(), allowed.end());
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (!ok.count(it.key())) throw ConfigError(where.empty() ? it.key() : where + "." + it.key(), "unknown key");
    }
}

template <class V>
void read_field(const json & j, const char * key, V & out, const std::string & where) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<V>();
    } catch (const json::exception & e) {
        throw ConfigError(where.empty() ? std::string(key) : where + "." + key, e.what());
    }
}

inline void read_targets(const json & j, const char * key, std::vector<LoraTarget> & out) {
    if (!j.contains(key)) return;
    out.clear();
    if (!j[key].is_array()) throw ConfigError(key, "expected an array of names");
    for (const auto & t : j[key]) {
        if (!t.is_string()) throw ConfigError(key, "expected target names");
        auto tg = lora_target_from_name(t.get<std::string>());
        if (!tg) throw ConfigError(key, "unknown target '" + t.get<std::string>() + "'");
        out.push_back(*tg);
    }
}

} // namespace detail

inline json to_json(const RotaryConfig & r) {
    json j{{"d_emb", r.d_emb}, {"base", r.base}, {"s", r.s}, {"enabled", r.enabled}};
    if (r.divisor_override) j["divisor_override"] = *r.divisor_override;
    return j;
}

inline RotaryConfig rotary_from_json(const json & j, RotaryConfig r = {}) {
    detail::check_keys(j, "rotary", {"d_emb", "base", "s", "enabled", "divisor_override"});
    detail::read_field(j, "d_emb", r.d_emb, "rotary");
    detail::read_field(j, "base", r.base, "rotary");
    detail::read_field(j, "s", r.s, "rotary");
    detail::read_field(j, "enabled", r.enabled, "rotary");
    if (j.contains("divisor_override")) {
        if (j["divisor_override"].is_null()) {
            r.divisor_override.reset();
        } else {
            double d = 0;
            detail::read_field(j, "divisor_override", d, "rotary");
            r.divisor_override = d;
        }
    }
    return r;
}

inline json to_json(const ModelConfig & c) {
    json targets = json::array();
    for (auto t : c.lora_targets) targets.push_back(lora_target_name(t));
    json qtargets = json::array();
    for (auto t : c.qlora_targets) qtargets.push_back(lora_target_name(t));
    return json{{"name", c.name},
                {"vocab_size", c.vocab_size},
                {"d_model", c.d_model},
                {"n_mamba_layers", c.n_mamba_layers},
                {"attn_every", c.attn_every},
                {"n_shared_blocks", c.n_shared_blocks},
                {"attn_heads", c.attn_heads},
                {"mlp_expansion", c.mlp_expansion},
                {"ssm_expand", c.ssm_expand},
                {"ssm_heads", c.ssm_heads},
                {"ssm_d_state", c.ssm_d_state},
                {"conv_width", c.conv_width},
                {"rotary", to_json(c.rotary)},
                {"lora_targets", targets},
                {"lora_rank", c.lora_rank},
                {"lora_alpha", c.lora_alpha},
                {"qlora_targets", qtargets},
                {"qlora_rank", c.qlora_rank},
                {"qlora_alpha", c.qlora_alpha},
                {"max_seq_len", c.max_seq_len},
                {"dtype", dtype_name(c.dtype)}};
}

inline DType dtype_from_name(const std::string & s) {
    if (s == "f64") return DType::f64;
    if (s == "f32") return DType::f32;
    throw ConfigError("dtype", "must be f32 or f64, got '" + s + "'");
}

// Fields absent from `j` keep their values from `base` (a preset when the
// file names one via "preset").
inline ModelConfig model_config_from_json(const json & j) {
    detail::check_keys(j, "", {"preset", "name", "vocab_size", "d_model", "n_mamba_layers", "attn_every",
                               "n_shared_blocks", "attn_heads", "mlp_expansion", "ssm_expand", "ssm_heads",
                               "ssm_d_state", "conv_width", "rotary", "lora_targets", "lora_rank", "lora_alpha",
                               "qlora_targets", "qlora_rank", "qlora_alpha", "max_seq_len", "dtype"});
    ModelConfig c;
    if (j.contains("preset")) {
        c = preset(j.at("preset").get<std::string>());
    } else {
        c.rotary.d_emb = c.attn_head_dim();
    }
    detail::read_field(j, "name", c.name, "");
    detail::read_field(j, "vocab_size", c.vocab_size, "");
    detail::read_field(j, "d_model", c.d_model, "");
    detail::read_field(j, "n_mamba_layers", c.n_mamba_layers, "");
    detail::read_field(j, "attn_every", c.attn_every, "");
    detail::read_field(j, "n_shared_blocks", c.n_shared_blocks, "");
    detail::read_field(j, "attn_heads", c.attn_heads, "");
    detail::read_field(j, "mlp_expansion", c.mlp_expansion, "");
    detail::read_field(j, "ssm_expand", c.ssm_expand, "");
    detail::read_field(j, "ssm_heads", c.ssm_heads, "");
    detail::read_field(j, "ssm_d_state", c.ssm_d_state, "");
    detail::read_field(j, "conv_width", c.conv_width, "");
    detail::read_field(j, "lora_rank", c.lora_rank, "");
    detail::read_field(j, "lora_alpha", c.lora_alpha, "");
    detail::read_field(j, "qlora_rank", c.qlora_rank, "");
    detail::read_field(j, "qlora_alpha", c.qlora_alpha, "");
    detail::read_field(j, "max_seq_len", c.max_seq_len, "");
    if (j.contains("rotary")) {
        c.rotary = rotary_from_json(j.at("rotary"), c.rotary);
    } else if (j.contains("d_model") || j.contains("attn_heads")) {
        c.rotary.d_emb = c.attn_head_dim();
    }
    detail::read_targets(j, "lora_targets", c.lora_targets);
    detail::read_targets(j, "qlora_targets", c.qlora_targets);
    if (j.contains("dtype")) {
        if (!j["dtype"].is_string()) throw ConfigError("dtype", "expected a string");
        c.dtype = dtype_from_name(j["dtype"].get<std::string>());
    }
    c.validate();
    return c;
}

inline json read_json_file(const std::string & path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open " + path);
    try {
        return json::parse(in);
    } catch (const json::parse_error & e) {
        throw ConfigError("file", path + ": " + e.what());
    }
}

// FNV-1a 64; stable across platforms, used to fingerprint resolved configs.
inline std::uint64_t fnv1a64(const std::string & s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex;
    os.width(16);
    os.fill('0');
    os << v;
    return os.str();
}

} // namespace zamba2
