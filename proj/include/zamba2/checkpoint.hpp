// Copyright 2026 The zamba2-desk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Binary container, all integers little-endian:
//
//   "ZMB2CKPT"            8 bytes magic
//   u32 version           kCheckpointVersion
//   u64 header_len, header bytes (JSON: format, param_dtype, config, meta)
//   u64 n_records, then n_records of:
//     u32 name_len, name
//     u8 kind (0 dense, 1 alias, 2 q4), u8 dtype, u8 flags (bit0 frozen), u8 0
//     u32 rank, u64 dims[rank]
//     dense: u64 n_bytes, raw element data
//     alias: u32 target_len, target name
//     q4:    u8 scheme, u8 0 x3, u64 block_size, u64 n_code_bytes, codes,
//            u64 n_scales, u16 scales[n_scales]
//
// Parameters appear in declaration order. Shared-block weights are stored
// once; each invocation site adds alias records naming the weights it uses.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "zamba2/config_io.hpp"
#include "zamba2/model.hpp"

namespace zamba2 {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr char kCheckpointMagic[8] = {'Z', 'M', 'B', '2', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class RecordKind : std::uint8_t { dense = 0, alias = 1, q4 = 2 };

struct TensorRecord {
    std::string name;
    RecordKind kind = RecordKind::dense;
    DType dtype = DType::f32;
    bool frozen = false;
    Shape shape;
    std::vector<std::uint8_t> raw; // dense payload
    std::string target;            // alias payload
    QuantizedTensor q;             // q4 payload

    template <class T>
    static TensorRecord dense_of(std::string name, const Tensor<T> & t, bool frozen = false) {
        TensorRecord r;
        r.name = std::move(name);
        r.kind = RecordKind::dense;
        r.dtype = dtype_of<T>();
        r.frozen = frozen;
        r.shape = t.shape();
        r.raw.resize(t.bytes());
        if (!t.empty()) std::memcpy(r.raw.data(), t.data(), t.bytes());
        return r;
    }

    template <class T>
    Tensor<T> to_tensor() const {
        if (kind != RecordKind::dense) throw FormatError("record '" + name + "' is not dense");
        if (dtype == dtype_of<T>()) {
            Tensor<T> t(shape);
            if (raw.size() != t.bytes()) throw FormatError("record '" + name + "' has a wrong payload size");
            std::memcpy(t.data(), raw.data(), raw.size());
            return t;
        }
        auto conv = [&](auto tag) {
            using U = decltype(tag);
            Tensor<U> u(shape);
            if (raw.size() != u.bytes()) throw FormatError("record '" + name + "' has a wrong payload size");
            std::memcpy(u.data(), raw.data(), raw.size());
            return u.template cast<T>();
        };
        if (dtype == DType::f32) return conv(float{});
        if (dtype == DType::f64) return conv(double{});
        throw FormatError("record '" + name + "' has an unsupported dtype");
    }
};

struct CheckpointFile {
    json header;
    std::vector<TensorRecord> records;

    const TensorRecord * find(const std::string & name) const {
        for (const auto & r : records)
            if (r.name == name) return &r;
        return nullptr;
    }
};

namespace detail {

class Writer {
public:
    void bytes(const void * p, std::size_t n) {
        const auto * b = static_cast<const std::uint8_t *>(p);
        buf_.insert(buf_.end(), b, b + n);
    }
    template <class I>
    void put(I v) {
        bytes(&v, sizeof v);
    }
    void str32(const std::string & s) {
        put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }
    const std::vector<std::uint8_t> & buffer() const { return buf_; }

private:
    std::vector<std::uint8_t> buf_;
};

class Reader {
public:
    explicit Reader(std::vector<std::uint8_t> data) : d_(std::move(data)) {}
    void bytes(void * p, std::size_t n) {
        if (n > d_.size() - pos_) throw FormatError("checkpoint truncated");
        std::memcpy(p, d_.data() + pos_, n);
        pos_ += n;
    }
    template <class I>
    I get() {
        I v;
        bytes(&v, sizeof v);
        return v;
    }
    std::string str(std::size_t n) {
        if (n > d_.size() - pos_) throw FormatError("checkpoint truncated");
        std::string s(reinterpret_cast<const char *>(d_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    std::string str32() { return str(get<std::uint32_t>()); }
    std::size_t remaining() const { return d_.size() - pos_; }

private:
    std::vector<std::uint8_t> d_;
    std::size_t pos_ = 0;
};

} // namespace detail

// Writes to `path.tmp` then renames, so readers never see a partial file.
inline void write_file_atomic(const std::string & path, const void * data, std::size_t n) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw InputError("cannot write " + tmp);
        out.write(static_cast<const char *>(data), static_cast<std::streamsize>(n));
        if (!out) throw InputError("write failed: " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

inline void write_text_atomic(const std::string & path, const std::string & text) {
    write_file_atomic(path, text.data(), text.size());
}

inline void write_checkpoint(const std::string & path, const CheckpointFile & f) {
    detail::Writer w;
    w.bytes(kCheckpointMagic, 8);
    w.put<std::uint32_t>(kCheckpointVersion);
    const std::string hdr = f.header.dump();
    w.put<std::uint64_t>(hdr.size());
    w.bytes(hdr.data(), hdr.size());
    w.put<std::uint64_t>(f.records.size());
    for (const auto & r : f.records) {
        w.str32(r.name);
        w.put<std::uint8_t>(static_cast<std::uint8_t>(r.kind));
        w.put<std::uint8_t>(static_cast<std::uint8_t>(r.dtype));
        w.put<std::uint8_t>(r.frozen ? 1 : 0);
        w.put<std::uint8_t>(0);
        w.put<std::uint32_t>(static_cast<std::uint32_t>(r.shape.size()));
        for (auto d : r.shape) w.put<std::uint64_t>(d);
        switch (r.kind) {
            case RecordKind::dense:
                w.put<std::uint64_t>(r.raw.size());
                w.bytes(r.raw.data(), r.raw.size());
                break;
            case RecordKind::alias: w.str32(r.target); break;
            case RecordKind::q4:
                w.put<std::uint8_t>(static_cast<std::uint8_t>(r.q.scheme));
                for (int i = 0; i < 3; ++i) w.put<std::uint8_t>(0);
                w.put<std::uint64_t>(r.q.block_size);
                w.put<std::uint64_t>(r.q.codes.size());
                w.bytes(r.q.codes.data(), r.q.codes.size());
                w.put<std::uint64_t>(r.q.scales.size());
                w.bytes(r.q.scales.data(), r.q.scales.size() * sizeof(std::uint16_t));
                break;
        }
    }
    write_file_atomic(path, w.buffer().data(), w.buffer().size());
}

inline CheckpointFile read_checkpoint(const std::string & path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open checkpoint " + path);
    std::vector<std::uint8_t> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    detail::Reader r(std::move(data));
    char magic[8];
    r.bytes(magic, 8);
    if (std::memcmp(magic, kCheckpointMagic, 8) != 0) throw FormatError(path + ": not a checkpoint (bad magic)");
    const auto version = r.get<std::uint32_t>();
    if (version != kCheckpointVersion) throw FormatError(path + ": unsupported version " + std::to_string(version));
    CheckpointFile f;
    try {
        f.header = json::parse(r.str(r.get<std::uint64_t>()));
    } catch (const json::parse_error & e) {
        throw FormatError(path + ": corrupt header: " + e.what());
    }
    const auto n = r.get<std::uint64_t>();
    for (std::uint64_t i = 0; i < n; ++i) {
        TensorRecord t;
        t.name = r.str32();
        const auto kind = r.get<std::uint8_t>();
        if (kind > 2) throw FormatError(path + ": unknown record kind");
        t.kind = static_cast<RecordKind>(kind);
        t.dtype = static_cast<DType>(r.get<std::uint8_t>());
        t.frozen = (r.get<std::uint8_t>() & 1) != 0;
        r.get<std::uint8_t>();
        const auto rank = r.get<std::uint32_t>();
        if (rank > 8) throw FormatError(path + ": implausible rank");
        t.shape.resize(rank);
        for (auto & d : t.shape) d = r.get<std::uint64_t>();
        switch (t.kind) {
            case RecordKind::dense: {
                const auto nb = r.get<std::uint64_t>();
                if (nb > r.remaining()) throw FormatError("checkpoint truncated");
                t.raw.resize(nb);
                r.bytes(t.raw.data(), nb);
                break;
            }
            case RecordKind::alias: t.target = r.str32(); break;
            case RecordKind::q4: {
                t.q.shape = t.shape;
                t.q.scheme = static_cast<QuantScheme>(r.get<std::uint8_t>());
                for (int k = 0; k < 3; ++k) r.get<std::uint8_t>();
                t.q.block_size = r.get<std::uint64_t>();
                const auto nc = r.get<std::uint64_t>();
                if (nc > r.remaining()) throw FormatError("checkpoint truncated");
                t.q.codes.resize(nc);
                r.bytes(t.q.codes.data(), nc);
                const auto ns = r.get<std::uint64_t>();
                if (ns * 2 > r.remaining()) throw FormatError("checkpoint truncated");
                t.q.scales.resize(ns);
                r.bytes(t.q.scales.data(), ns * 2);
                if (t.q.block_size == 0 || nc != (t.q.numel() + 1) / 2 || ns != t.q.n_blocks()) {
                    throw FormatError(path + ": inconsistent q4 record '" + t.name + "'");
                }
                break;
            }
        }
        f.records.push_back(std::move(t));
    }
    if (r.remaining() != 0) throw FormatError(path + ": trailing bytes");
    return f;
}

namespace detail {

inline std::vector<std::pair<std::string, ParamId>> block_fields(const SharedBlockParams & b) {
    return {{"attn_norm", b.norm_attn}, {"attn.q", b.wq},     {"attn.k", b.wk},
            {"attn.v", b.wv},           {"attn.o", b.wo},     {"mlp_norm", b.norm_mlp},
            {"mlp.gate", b.w_gate},     {"mlp.up", b.w_up},   {"mlp.down", b.w_down}};
}

} // namespace detail

// Model parameters (dense or q4) plus per-site alias records.
template <class T>
CheckpointFile model_checkpoint(const Model<T> & m, const json & meta = json::object()) {
    CheckpointFile f;
    f.header = json{{"format", "zamba2-desk"},
                    {"param_dtype", dtype_name(dtype_of<T>())},
                    {"config", to_json(m.config)},
                    {"meta", meta}};
    for (const auto & p : m.params) {
        if (p.quantized) {
            TensorRecord r;
            r.name = p.name;
            r.kind = RecordKind::q4;
            r.dtype = DType::q4;
            r.frozen = p.frozen;
            r.shape = p.quantized->shape;
            r.q = *p.quantized;
            f.records.push_back(std::move(r));
        } else {
            f.records.push_back(TensorRecord::dense_of(p.name, p.value, p.frozen));
        }
    }
    for (std::size_t s = 0; s < m.sites.size(); ++s) {
        for (const auto & [field, id] : detail::block_fields(m.blocks[m.sites[s].block])) {
            TensorRecord r;
            r.name = "sites." + std::to_string(s) + ".block." + field;
            r.kind = RecordKind::alias;
            r.dtype = dtype_of<T>();
            r.shape = m.params[id].shape();
            r.target = m.params[id].name;
            f.records.push_back(std::move(r));
        }
    }
    return f;
}

// Rebuilds the model skeleton from the stored config and fills every
// parameter from its record. Missing, extra or mis-shaped records are errors.
template <class T>
Model<T> model_from_checkpoint(const CheckpointFile & f, const std::string & origin = "checkpoint") {
    if (!f.header.contains("config")) throw FormatError(origin + ": header has no config");
    ModelConfig cfg;
    try {
        cfg = model_config_from_json(f.header.at("config"));
    } catch (const ConfigError & e) {
        throw FormatError(origin + ": stored config invalid: " + e.what());
    }
    Model<T> m = build_model<T>(cfg, 0);
    std::vector<bool> seen(m.params.size(), false);
    for (const auto & r : f.records) {
        if (r.kind == RecordKind::alias) {
            const auto target = m.params.find(r.target);
            if (!target) throw FormatError(origin + ": alias '" + r.name + "' names unknown tensor '" + r.target + "'");
            continue;
        }
        auto id = m.params.find(r.name);
        if (!id) {
            if (r.name.rfind("opt.", 0) == 0) continue; // optimizer state, read by the trainer
            throw FormatError(origin + ": unexpected tensor '" + r.name + "'");
        }
        auto & p = m.params[*id];
        if (r.shape != p.shape()) {
            throw FormatError(origin + ": tensor '" + r.name + "' has shape " + shape_str(r.shape) + ", expected " +
                              shape_str(p.shape()));
        }
        if (r.kind == RecordKind::q4) {
            p.quantized = std::make_shared<const QuantizedTensor>(r.q);
            p.value = Tensor<T>{};
        } else {
            p.value = r.to_tensor<T>();
        }
        p.frozen = r.frozen;
        seen[*id] = true;
    }
    for (std::size_t i = 0; i < seen.size(); ++i) {
        if (!seen[i]) throw FormatError(origin + ": missing tensor '" + m.params[i].name + "'");
    }
    // site bindings must agree with the rebuilt layout
    for (std::size_t s = 0; s < m.sites.size(); ++s) {
        for (const auto & [field, id] : detail::block_fields(m.blocks[m.sites[s].block])) {
            const auto * r = f.find("sites." + std::to_string(s) + ".block." + field);
            if (r && r->target != m.params[id].name) {
                throw FormatError(origin + ": site " + std::to_string(s) + " bound to '" + r->target + "', expected '" +
                                  m.params[id].name + "'");
            }
        }
    }
    return m;
}

template <class T>
void save_model(const std::string & path, const Model<T> & m, const json & meta = json::object()) {
    write_checkpoint(path, model_checkpoint(m, meta));
}

template <class T>
Model<T> load_model(const std::string & path) {
    return model_from_checkpoint<T>(read_checkpoint(path), path);
}

} // namespace zamba2
