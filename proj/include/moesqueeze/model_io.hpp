// SPDX-License-Identifier: Apache-2.0
#pragma once

// Binary containers. Weights ("TMOE1"): config header plus dense f32 tensor
// records. Quantized models ("TMOEQ1"): manifest header plus per-tensor scheme
// id and packed payload. Everything little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "moesqueeze/corpus.hpp"
#include "moesqueeze/manifest.hpp"
#include "moesqueeze/qcodec.hpp"
#include "moesqueeze/tinymoe.hpp"

namespace moesq {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

inline constexpr std::string_view kWeightsMagic = "TMOE1";
inline constexpr std::string_view kQuantMagic = "TMOEQ1";
inline constexpr std::uint8_t kDtypeF32 = 0;

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
    nlohmann::json j;
    j["vocab"] = c.vocab;
    j["d_model"] = c.d_model;
    j["d_head"] = c.d_head;
    j["d_ff"] = c.d_ff;
    j["d_ff_shared"] = c.d_ff_shared;
    j["n_layers"] = c.n_layers;
    j["n_experts"] = c.n_experts;
    j["shared_experts"] = c.shared_experts;
    j["k"] = c.k;
    j["n_group"] = c.n_group;
    j["topk_group"] = c.topk_group;
    j["group_score"] = c.group_score == GroupScore::max ? "max" : "top2_sum";
    j["context"] = c.context;
    j["layer_k"] = c.layer_k;
    j["seed"] = c.seed;
    j["norm_eps"] = c.norm_eps;
    return j;
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    try {
        ModelConfig c;
        c.vocab = j.at("vocab").get<int>();
        c.d_model = j.at("d_model").get<int>();
        c.d_head = j.at("d_head").get<int>();
        c.d_ff = j.at("d_ff").get<int>();
        c.d_ff_shared = j.at("d_ff_shared").get<int>();
        c.n_layers = j.at("n_layers").get<int>();
        c.n_experts = j.at("n_experts").get<int>();
        c.shared_experts = j.value("shared_experts", 1);
        c.k = j.at("k").get<int>();
        c.n_group = j.at("n_group").get<int>();
        c.topk_group = j.at("topk_group").get<int>();
        const auto rule = j.value("group_score", std::string("max"));
        if (rule != "max" && rule != "top2_sum") throw ValidationError("unknown group_score '" + rule + "'");
        c.group_score = rule == "max" ? GroupScore::max : GroupScore::top2_sum;
        c.context = j.value("context", 64);
        c.layer_k = j.value("layer_k", std::vector<int>{});
        c.seed = j.value("seed", std::uint64_t{42});
        c.norm_eps = j.value("norm_eps", 1e-5f);
        c.validate();
        return c;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("model config: ") + e.what());
    }
}

namespace io {

class Writer {
public:
    template <class U>
    void put(U v) {
        const auto* p = reinterpret_cast<const char*>(&v);
        buf.append(p, sizeof(U));
    }
    void bytes(std::string_view s) { buf.append(s); }
    void str(std::string_view s) {
        put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
        bytes(s);
    }
    std::string buf;
};

class Reader {
public:
    explicit Reader(std::string_view data) : data_(data) {}
    template <class U>
    U get() {
        need(sizeof(U));
        U v;
        std::memcpy(&v, data_.data() + pos_, sizeof(U));
        pos_ += sizeof(U);
        return v;
    }
    std::string_view bytes(std::size_t n) {
        need(n);
        auto s = data_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    std::string str() { return std::string(bytes(get<std::uint32_t>())); }
    [[nodiscard]] bool done() const { return pos_ == data_.size(); }

private:
    void need(std::size_t n) const {
        if (data_.size() - pos_ < n) throw ParseError("truncated container");
    }
    std::string_view data_;
    std::size_t pos_ = 0;
};

inline void put_shape(Writer& w, const std::vector<std::int64_t>& shape) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(shape.size()));
    for (auto d : shape) w.put<std::int64_t>(d);
}

inline std::vector<std::int64_t> get_shape(Reader& r) {
    const auto n = r.get<std::uint32_t>();
    if (n > 8) throw ParseError("implausible tensor rank");
    std::vector<std::int64_t> s(n);
    for (auto& d : s) d = r.get<std::int64_t>();
    return s;
}

} // namespace io

inline std::string serialize_weights(const Model<float>& m) {
    io::Writer w;
    w.bytes(kWeightsMagic);
    w.str(model_config_to_json(m.config).dump());
    w.put<std::uint32_t>(static_cast<std::uint32_t>(m.tensors.size()));
    for (std::size_t i = 0; i < m.tensors.size(); ++i) {
        w.str(m.names[i]);
        w.put<std::uint8_t>(kDtypeF32);
        io::put_shape(w, m.tensors[i].shape);
        w.bytes({reinterpret_cast<const char*>(m.tensors[i].data.data()), m.tensors[i].data.size() * sizeof(float)});
    }
    return std::move(w.buf);
}

inline Model<float> parse_weights(std::string_view data) {
    io::Reader r(data);
    if (r.bytes(kWeightsMagic.size()) != kWeightsMagic) throw ParseError("not a TMOE1 weights file");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(r.str());
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("weights header: ") + e.what());
    }
    Model<float> m(model_config_from_json(header));
    const auto n = r.get<std::uint32_t>();
    if (n != m.tensors.size()) throw ValidationError("weights file tensor count does not match its config");
    for (std::size_t i = 0; i < n; ++i) {
        const auto name = r.str();
        if (name != m.names[i]) throw ValidationError("weights file: expected tensor '" + m.names[i] + "', found '" + name + "'");
        if (r.get<std::uint8_t>() != kDtypeF32) throw ParseError("weights file: unsupported dtype for '" + name + "'");
        if (io::get_shape(r) != m.tensors[i].shape) throw ValidationError("weights file: shape mismatch for '" + name + "'");
        auto raw = r.bytes(m.tensors[i].data.size() * sizeof(float));
        std::memcpy(m.tensors[i].data.data(), raw.data(), raw.size());
    }
    if (!r.done()) throw ParseError("weights file: trailing bytes");
    return m;
}

inline void save_weights(const Model<float>& m, const std::string& path) { write_file_bytes(path, serialize_weights(m)); }
inline Model<float> load_weights(const std::string& path) { return parse_weights(read_file_bytes(path)); }

// ---------------------------------------------------------------------------
// Scheme assignments and quantized views

using Assignment = std::map<std::string, Scheme>;

inline Assignment assignment_of(const ModelManifest& m) {
    Assignment a;
    for (const auto& t : m.tensors) a[t.name] = t.scheme;
    return a;
}

inline ModelManifest with_assignment(ModelManifest m, const Assignment& a) {
    for (const auto& [name, s] : a) {
        auto* t = m.find(name);
        if (!t) throw ValidationError("assignment names unknown tensor '" + name + "'");
        t->scheme = s;
    }
    return m;
}

/// Dense model whose weights are the dequantized image of each tensor under
/// its assigned scheme. F32 tensors are copied unchanged.
inline Model<float> quantized_view(const Model<float>& model, const ModelManifest& assigned) {
    Model<float> v = model;
    for (std::size_t i = 0; i < v.tensors.size(); ++i) {
        const auto& spec = assigned.at(v.names[i]);
        if (spec.scheme != Scheme::F32) v.tensors[i].data = fake_quantize(v.tensors[i].data, spec.scheme);
    }
    return v;
}

// ---------------------------------------------------------------------------
// TMOEQ1 quantized model

struct QuantizedModel {
    ModelConfig config;
    ModelManifest manifest; // schemes record the assignment
    std::vector<QuantizedTensor> tensors; // manifest order

    [[nodiscard]] std::int64_t payload_bytes() const {
        std::int64_t n = 0;
        for (const auto& t : tensors) n += static_cast<std::int64_t>(t.payload.size());
        return n;
    }
};

inline QuantizedModel quantize_model(const Model<float>& model, const ModelManifest& assigned) {
    QuantizedModel q;
    q.config = model.config;
    q.manifest = assigned;
    for (const auto& spec : assigned.tensors) q.tensors.push_back(quantize(model.at(spec.name).data, spec.shape, spec.scheme));
    return q;
}

inline Model<float> dequantize_model(const QuantizedModel& q) {
    Model<float> m(q.config);
    for (std::size_t i = 0; i < q.tensors.size(); ++i) m.at(q.manifest.tensors[i].name).data = dequantize(q.tensors[i]);
    return m;
}

inline std::string serialize_quantized(const QuantizedModel& q) {
    io::Writer w;
    w.bytes(kQuantMagic);
    nlohmann::json header;
    header["config"] = model_config_to_json(q.config);
    header["manifest"] = manifest_to_json(q.manifest);
    w.str(header.dump());
    w.put<std::uint32_t>(static_cast<std::uint32_t>(q.tensors.size()));
    for (std::size_t i = 0; i < q.tensors.size(); ++i) {
        w.str(q.manifest.tensors[i].name);
        w.put<std::uint8_t>(static_cast<std::uint8_t>(q.tensors[i].scheme));
        io::put_shape(w, q.tensors[i].shape);
        w.put<std::uint64_t>(q.tensors[i].payload.size());
        w.bytes({reinterpret_cast<const char*>(q.tensors[i].payload.data()), q.tensors[i].payload.size()});
    }
    return std::move(w.buf);
}

/// Parses a TMOEQ1 container; every payload must be exactly the size the
/// scheme table assigns to its tensor.
inline QuantizedModel parse_quantized(std::string_view data) {
    io::Reader r(data);
    if (r.bytes(kQuantMagic.size()) != kQuantMagic) throw ParseError("not a TMOEQ1 quantized model");
    QuantizedModel q;
    try {
        const auto header = nlohmann::json::parse(r.str());
        q.config = model_config_from_json(header.at("config"));
        q.manifest = manifest_from_json(header.at("manifest"));
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("quantized header: ") + e.what());
    }
    const auto n = r.get<std::uint32_t>();
    if (n != q.manifest.tensors.size()) throw ValidationError("quantized model: tensor count does not match manifest");
    for (const auto& spec : q.manifest.tensors) {
        if (r.str() != spec.name) throw ValidationError("quantized model: record order differs from manifest at '" + spec.name + "'");
        const auto sid = r.get<std::uint8_t>();
        if (sid > static_cast<std::uint8_t>(Scheme::F32) || static_cast<Scheme>(sid) != spec.scheme)
            throw ValidationError("quantized model: scheme mismatch for '" + spec.name + "'");
        if (io::get_shape(r) != spec.shape) throw ValidationError("quantized model: shape mismatch for '" + spec.name + "'");
        const auto len = r.get<std::uint64_t>();
        if (static_cast<std::int64_t>(len) != size_bytes(spec.count, spec.scheme))
            throw ValidationError("quantized model: payload size mismatch for '" + spec.name + "'");
        auto raw = r.bytes(static_cast<std::size_t>(len));
        q.tensors.push_back(QuantizedTensor{spec.scheme, spec.shape, std::vector<std::uint8_t>(raw.begin(), raw.end())});
    }
    if (!r.done()) throw ParseError("quantized model: trailing bytes");
    return q;
}

inline void save_quantized(const QuantizedModel& q, const std::string& path) { write_file_bytes(path, serialize_quantized(q)); }
inline QuantizedModel load_quantized(const std::string& path) { return parse_quantized(read_file_bytes(path)); }

} // namespace moesq
