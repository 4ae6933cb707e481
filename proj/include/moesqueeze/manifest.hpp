// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "moesqueeze/common.hpp"
#include "moesqueeze/scheme.hpp"

namespace moesq {

enum class Role : std::uint8_t {
    norm,
    attn_kb,
    attn_vb,
    attn_other,
    router,
    shared_expert_ffn,
    routed_expert_gate,
    routed_expert_up,
    routed_expert_down,
    token_embd,
    output,
    dense_ffn,
};

inline constexpr std::string_view role_name(Role r) {
    switch (r) {
    case Role::norm: return "norm";
    case Role::attn_kb: return "attn_kb";
    case Role::attn_vb: return "attn_vb";
    case Role::attn_other: return "attn_other";
    case Role::router: return "router";
    case Role::shared_expert_ffn: return "shared_expert_ffn";
    case Role::routed_expert_gate: return "routed_expert_gate";
    case Role::routed_expert_up: return "routed_expert_up";
    case Role::routed_expert_down: return "routed_expert_down";
    case Role::token_embd: return "token_embd";
    case Role::output: return "output";
    case Role::dense_ffn: return "dense_ffn";
    }
    return "?";
}

inline Role role_from_string(std::string_view s) {
    for (int i = 0; i <= static_cast<int>(Role::dense_ffn); ++i) {
        auto r = static_cast<Role>(i);
        if (role_name(r) == s) return r;
    }
    throw ValidationError("unknown tensor role '" + std::string(s) + "'");
}

inline constexpr bool is_routed(Role r) {
    return r == Role::routed_expert_gate || r == Role::routed_expert_up || r == Role::routed_expert_down;
}

struct TensorSpec {
    std::string name;
    std::optional<int> layer;  // nullopt: GLOBAL
    Role role = Role::attn_other;
    std::optional<int> expert; // nullopt: NONE
    std::vector<std::int64_t> shape;
    std::int64_t count = 0;
    Scheme scheme = Scheme::F32;

    friend bool operator==(const TensorSpec&, const TensorSpec&) = default;
};

inline std::int64_t shape_count(const std::vector<std::int64_t>& shape) {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

/// Architecture-level hyperparameters. `n_layers` counts MoE layers only;
/// dense layers (if any) precede them in block numbering.
struct ManifestConfig {
    std::string arch = "tinymoe";
    std::int64_t vocab = 256;
    std::int64_t d_model = 64;
    std::int64_t d_ff = 256;
    std::int64_t d_ff_shared = 256;
    std::int64_t d_head = 32;
    int n_layers = 4;
    int n_experts = 16;
    int n_shared_experts = 1;
    int k_orig = 4;
    int n_group = 4;
    int topk_group = 2;
    int n_dense_layers = 0;
    std::int64_t d_ff_dense = 0;

    friend bool operator==(const ManifestConfig&, const ManifestConfig&) = default;
};

class ModelManifest {
public:
    ManifestConfig config;
    std::vector<TensorSpec> tensors;

    ModelManifest() = default;
    ModelManifest(ManifestConfig cfg, std::vector<TensorSpec> ts) : config(std::move(cfg)), tensors(std::move(ts)) {
        reindex();
    }

    void reindex() {
        index_.clear();
        for (std::size_t i = 0; i < tensors.size(); ++i) index_[tensors[i].name] = i;
    }

    [[nodiscard]] const TensorSpec* find(const std::string& name) const {
        auto it = index_.find(name);
        return it == index_.end() ? nullptr : &tensors[it->second];
    }
    [[nodiscard]] TensorSpec* find(const std::string& name) {
        auto it = index_.find(name);
        return it == index_.end() ? nullptr : &tensors[it->second];
    }
    [[nodiscard]] const TensorSpec& at(const std::string& name) const {
        const auto* t = find(name);
        if (!t) throw ValidationError("tensor '" + name + "' not in manifest");
        return *t;
    }

    /// Block indices holding routed experts, ascending.
    [[nodiscard]] std::vector<int> moe_layers() const {
        std::set<int> layers;
        for (const auto& t : tensors)
            if (is_routed(t.role) && t.layer) layers.insert(*t.layer);
        return {layers.begin(), layers.end()};
    }

    void validate() const;

    friend bool operator==(const ModelManifest& a, const ModelManifest& b) {
        return a.config == b.config && a.tensors == b.tensors;
    }

private:
    std::unordered_map<std::string, std::size_t> index_;
};

inline void ModelManifest::validate() const {
    if (config.n_experts < 1) throw ValidationError("n_experts must be >= 1");
    if (config.n_group < 1 || config.n_experts % config.n_group != 0)
        throw ValidationError("n_experts (" + std::to_string(config.n_experts) + ") not divisible by n_group (" +
                              std::to_string(config.n_group) + ")");
    if (config.topk_group < 1 || config.topk_group > config.n_group)
        throw ValidationError("topk_group must lie in [1, n_group]");
    if (config.k_orig < 1 || config.k_orig > config.n_experts) throw ValidationError("k_orig must lie in [1, E]");

    std::set<std::string> names;
    std::map<int, int> routed_per_layer;
    for (const auto& t : tensors) {
        if (!names.insert(t.name).second) throw ValidationError("duplicate tensor name '" + t.name + "'");
        if (t.shape.empty()) throw ValidationError("tensor '" + t.name + "' has empty shape");
        for (auto d : t.shape)
            if (d <= 0) throw ValidationError("tensor '" + t.name + "' has non-positive dimension");
        if (shape_count(t.shape) != t.count)
            throw ValidationError("tensor '" + t.name + "' count does not match shape");
        if (is_routed(t.role) != t.expert.has_value())
            throw ValidationError("tensor '" + t.name + "' role/expert mismatch");
        if (t.expert) {
            if (!t.layer) throw ValidationError("routed tensor '" + t.name + "' must belong to a layer");
            if (*t.expert < 0 || *t.expert >= config.n_experts)
                throw ValidationError("tensor '" + t.name + "' expert id out of range");
            ++routed_per_layer[*t.layer];
        }
    }
    if (!routed_per_layer.empty()) {
        if (static_cast<int>(routed_per_layer.size()) != config.n_layers)
            throw ValidationError("number of MoE layers does not match config");
        for (auto [layer, n] : routed_per_layer)
            if (n != 3 * config.n_experts)
                throw ValidationError("layer " + std::to_string(layer) + " has " + std::to_string(n) +
                                      " routed tensors, expected " + std::to_string(3 * config.n_experts));
    }
}

// ---------------------------------------------------------------------------
// JSON (de)serialization

inline nlohmann::json config_to_json(const ManifestConfig& c) {
    return {{"arch", c.arch},
            {"vocab", c.vocab},
            {"d_model", c.d_model},
            {"d_ff", c.d_ff},
            {"d_ff_shared", c.d_ff_shared},
            {"d_head", c.d_head},
            {"n_layers", c.n_layers},
            {"n_experts", c.n_experts},
            {"n_shared_experts", c.n_shared_experts},
            {"k_orig", c.k_orig},
            {"n_group", c.n_group},
            {"topk_group", c.topk_group},
            {"n_dense_layers", c.n_dense_layers},
            {"d_ff_dense", c.d_ff_dense}};
}

namespace detail {
template <class T>
T json_int(const nlohmann::json& j, const char* key, std::optional<T> fallback = std::nullopt) {
    if (!j.contains(key)) {
        if (fallback) return *fallback;
        throw ParseError(std::string("missing key '") + key + "'");
    }
    const auto& v = j.at(key);
    if (!v.is_number_integer()) throw ParseError(std::string("key '") + key + "' must be an integer");
    return static_cast<T>(v.get<std::int64_t>());
}
} // namespace detail

inline ManifestConfig config_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ParseError("config must be an object");
    ManifestConfig c;
    c.arch = j.value("arch", std::string("tinymoe"));
    c.vocab = detail::json_int<std::int64_t>(j, "vocab");
    c.d_model = detail::json_int<std::int64_t>(j, "d_model");
    c.d_ff = detail::json_int<std::int64_t>(j, "d_ff");
    c.d_ff_shared = detail::json_int<std::int64_t>(j, "d_ff_shared", c.d_ff);
    c.d_head = detail::json_int<std::int64_t>(j, "d_head", std::int64_t{0});
    c.n_layers = detail::json_int<int>(j, "n_layers");
    c.n_experts = detail::json_int<int>(j, "n_experts");
    c.n_shared_experts = detail::json_int<int>(j, "n_shared_experts", 1);
    c.k_orig = detail::json_int<int>(j, "k_orig");
    c.n_group = detail::json_int<int>(j, "n_group");
    c.topk_group = detail::json_int<int>(j, "topk_group");
    c.n_dense_layers = detail::json_int<int>(j, "n_dense_layers", 0);
    c.d_ff_dense = detail::json_int<std::int64_t>(j, "d_ff_dense", std::int64_t{0});
    return c;
}

inline nlohmann::json manifest_to_json(const ModelManifest& m) {
    nlohmann::json tensors = nlohmann::json::array();
    for (const auto& t : m.tensors) {
        nlohmann::json jt;
        jt["name"] = t.name;
        jt["layer"] = t.layer ? nlohmann::json(*t.layer) : nlohmann::json("GLOBAL");
        jt["role"] = role_name(t.role);
        jt["expert"] = t.expert ? nlohmann::json(*t.expert) : nlohmann::json("NONE");
        jt["shape"] = t.shape;
        jt["scheme"] = scheme_name(t.scheme);
        tensors.push_back(std::move(jt));
    }
    return {{"config", config_to_json(m.config)}, {"tensors", std::move(tensors)}};
}

inline std::string serialize_manifest(const ModelManifest& m) { return manifest_to_json(m).dump(1) + "\n"; }

inline ModelManifest manifest_from_json(const nlohmann::json& j) {
    if (!j.is_object() || !j.contains("config") || !j.contains("tensors"))
        throw ParseError("manifest must have top-level 'config' and 'tensors'");
    ModelManifest m;
    m.config = config_from_json(j.at("config"));
    const auto& ts = j.at("tensors");
    if (!ts.is_array()) throw ParseError("'tensors' must be an array");
    m.tensors.reserve(ts.size());
    for (const auto& jt : ts) {
        if (!jt.is_object()) throw ParseError("tensor entry must be an object");
        TensorSpec t;
        if (!jt.contains("name") || !jt.at("name").is_string()) throw ParseError("tensor entry missing 'name'");
        t.name = jt.at("name").get<std::string>();
        const auto& jl = jt.at("layer");
        if (jl.is_string()) {
            if (jl.get<std::string>() != "GLOBAL") throw ParseError("tensor '" + t.name + "': bad layer");
        } else if (jl.is_number_integer()) {
            t.layer = jl.get<int>();
        } else {
            throw ParseError("tensor '" + t.name + "': layer must be an integer or \"GLOBAL\"");
        }
        t.role = role_from_string(jt.at("role").get<std::string>());
        const auto& je = jt.at("expert");
        if (je.is_string()) {
            if (je.get<std::string>() != "NONE") throw ParseError("tensor '" + t.name + "': bad expert");
        } else if (je.is_number_integer()) {
            t.expert = je.get<int>();
        } else {
            throw ParseError("tensor '" + t.name + "': expert must be an integer or \"NONE\"");
        }
        const auto& js = jt.at("shape");
        if (!js.is_array()) throw ParseError("tensor '" + t.name + "': shape must be an array");
        for (const auto& d : js) {
            if (!d.is_number_integer()) throw ParseError("tensor '" + t.name + "': shape entries must be integers");
            t.shape.push_back(d.get<std::int64_t>());
        }
        t.count = shape_count(t.shape);
        if (jt.contains("count")) {
            const auto& jc = jt.at("count");
            if (!jc.is_number_integer() || jc.get<std::int64_t>() != t.count)
                throw ValidationError("tensor '" + t.name + "' count does not match shape");
        }
        t.scheme = scheme_from_string(jt.value("scheme", std::string("F32")));
        m.tensors.push_back(std::move(t));
    }
    m.reindex();
    m.validate();
    return m;
}

inline ModelManifest load_manifest(std::string_view text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(std::string("manifest: ") + e.what());
    }
    try {
        return manifest_from_json(j);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("manifest: ") + e.what());
    }
}

inline ModelManifest load_manifest_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open manifest '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return load_manifest(ss.str());
}

// ---------------------------------------------------------------------------
// Accounting

using TensorFilter = std::function<bool(const TensorSpec&)>;

namespace filters {
inline bool all(const TensorSpec&) { return true; }
inline bool routed(const TensorSpec& t) { return is_routed(t.role); }
inline TensorFilter role(Role r) {
    return [r](const TensorSpec& t) { return t.role == r; };
}
inline TensorFilter layer(std::optional<int> l) {
    return [l](const TensorSpec& t) { return t.layer == l; };
}
inline TensorFilter negate(TensorFilter f) {
    return [f = std::move(f)](const TensorSpec& t) { return !f(t); };
}
} // namespace filters

inline std::int64_t total_params(const ModelManifest& m, const TensorFilter& filter = filters::all) {
    std::int64_t n = 0;
    for (const auto& t : m.tensors)
        if (filter(t)) n += t.count;
    return n;
}

inline std::int64_t model_size_bytes(const ModelManifest& m, const SchemeTable& table = SchemeTable::builtin()) {
    std::int64_t bytes = 0;
    for (const auto& t : m.tensors) bytes += table.size_bytes(t.count, t.scheme);
    return bytes;
}

/// Parameter count of a single routed expert (gate+up+down) in `layer`.
inline std::int64_t single_expert_params(const ModelManifest& m, int layer) {
    std::int64_t n = 0;
    std::optional<int> first;
    for (const auto& t : m.tensors) {
        if (!is_routed(t.role) || t.layer != layer) continue;
        if (!first) first = t.expert;
        if (t.expert == first) n += t.count;
    }
    return n;
}

// ---------------------------------------------------------------------------
// Tensor naming shared by the generator and the runtime

namespace names {
inline std::string blk(int l, std::string_view what) { return "blk." + std::to_string(l) + "." + std::string(what) + ".weight"; }
inline std::string expert(int l, std::string_view what, int e) {
    return "blk." + std::to_string(l) + "." + std::string(what) + "." + std::to_string(e) + ".weight";
}
inline constexpr std::string_view token_embd = "token_embd.weight";
inline constexpr std::string_view output_norm = "output_norm.weight";
inline constexpr std::string_view output = "output.weight";
} // namespace names

namespace detail {
inline void add_tensor(std::vector<TensorSpec>& out, std::string name, std::optional<int> layer, Role role,
                       std::vector<std::int64_t> shape, std::optional<int> expert = std::nullopt) {
    TensorSpec t;
    t.name = std::move(name);
    t.layer = layer;
    t.role = role;
    t.expert = expert;
    t.shape = std::move(shape);
    t.count = shape_count(t.shape);
    t.scheme = Scheme::F32;
    out.push_back(std::move(t));
}

inline void add_routed(std::vector<TensorSpec>& out, int l, int n_experts, std::int64_t d_model, std::int64_t d_ff) {
    for (int e = 0; e < n_experts; ++e) {
        add_tensor(out, names::expert(l, "ffn_gate", e), l, Role::routed_expert_gate, {d_ff, d_model}, e);
        add_tensor(out, names::expert(l, "ffn_up", e), l, Role::routed_expert_up, {d_ff, d_model}, e);
        add_tensor(out, names::expert(l, "ffn_down", e), l, Role::routed_expert_down, {d_model, d_ff}, e);
    }
}
} // namespace detail

/// Manifest of the desk-scale runtime architecture: single-head attention with
/// named k_b/v_b projections, one shared expert and E routed SwiGLU experts per layer.
inline ModelManifest tinymoe_manifest(const ManifestConfig& c) {
    std::vector<TensorSpec> ts;
    const auto d = c.d_model;
    detail::add_tensor(ts, std::string(names::token_embd), std::nullopt, Role::token_embd, {c.vocab, d});
    for (int l = 0; l < c.n_layers; ++l) {
        detail::add_tensor(ts, names::blk(l, "attn_norm"), l, Role::norm, {d});
        detail::add_tensor(ts, names::blk(l, "attn_q"), l, Role::attn_other, {c.d_head, d});
        detail::add_tensor(ts, names::blk(l, "attn_k_b"), l, Role::attn_kb, {c.d_head, d});
        detail::add_tensor(ts, names::blk(l, "attn_v_b"), l, Role::attn_vb, {c.d_head, d});
        detail::add_tensor(ts, names::blk(l, "attn_output"), l, Role::attn_other, {d, c.d_head});
        detail::add_tensor(ts, names::blk(l, "ffn_norm"), l, Role::norm, {d});
        detail::add_tensor(ts, names::blk(l, "ffn_gate_inp"), l, Role::router, {c.n_experts, d});
        detail::add_tensor(ts, names::blk(l, "ffn_gate_shexp"), l, Role::shared_expert_ffn, {c.d_ff_shared, d});
        detail::add_tensor(ts, names::blk(l, "ffn_up_shexp"), l, Role::shared_expert_ffn, {c.d_ff_shared, d});
        detail::add_tensor(ts, names::blk(l, "ffn_down_shexp"), l, Role::shared_expert_ffn, {d, c.d_ff_shared});
        detail::add_routed(ts, l, c.n_experts, d, c.d_ff);
    }
    detail::add_tensor(ts, std::string(names::output_norm), std::nullopt, Role::norm, {d});
    detail::add_tensor(ts, std::string(names::output), std::nullopt, Role::output, {c.vocab, d});
    ModelManifest m(c, std::move(ts));
    m.validate();
    return m;
}

/// DeepSeek-V3-shaped manifest (metadata only): 3 dense + 58 MoE blocks, MLA
/// attention, 256 routed experts of 7168x2048, one shared expert, vocab 129280.
inline ModelManifest dsv3_shape_manifest() {
    ManifestConfig c;
    c.arch = "dsv3-shape";
    c.vocab = 129280;
    c.d_model = 7168;
    c.d_ff = 2048;
    c.d_ff_shared = 2048;
    c.d_head = 128;
    c.n_layers = 58;
    c.n_experts = 256;
    c.k_orig = 8;
    c.n_group = 8;
    c.topk_group = 4;
    c.n_dense_layers = 3;
    c.d_ff_dense = 18432;

    constexpr std::int64_t q_lora = 1536, kv_lora = 512, n_head = 128, nope = 128, rope = 64, v_head = 128;
    const auto d = c.d_model;
    std::vector<TensorSpec> ts;
    detail::add_tensor(ts, std::string(names::token_embd), std::nullopt, Role::token_embd, {c.vocab, d});
    const int n_blocks = c.n_dense_layers + c.n_layers;
    for (int l = 0; l < n_blocks; ++l) {
        detail::add_tensor(ts, names::blk(l, "attn_norm"), l, Role::norm, {d});
        detail::add_tensor(ts, names::blk(l, "attn_q_a_norm"), l, Role::norm, {q_lora});
        detail::add_tensor(ts, names::blk(l, "attn_kv_a_norm"), l, Role::norm, {kv_lora});
        detail::add_tensor(ts, names::blk(l, "attn_q_a"), l, Role::attn_other, {q_lora, d});
        detail::add_tensor(ts, names::blk(l, "attn_q_b"), l, Role::attn_other, {n_head * (nope + rope), q_lora});
        detail::add_tensor(ts, names::blk(l, "attn_kv_a_mqa"), l, Role::attn_other, {kv_lora + rope, d});
        detail::add_tensor(ts, names::blk(l, "attn_k_b"), l, Role::attn_kb, {n_head, kv_lora, nope});
        detail::add_tensor(ts, names::blk(l, "attn_v_b"), l, Role::attn_vb, {n_head, v_head, kv_lora});
        detail::add_tensor(ts, names::blk(l, "attn_output"), l, Role::attn_other, {d, n_head * v_head});
        detail::add_tensor(ts, names::blk(l, "ffn_norm"), l, Role::norm, {d});
        if (l < c.n_dense_layers) {
            detail::add_tensor(ts, names::blk(l, "ffn_gate"), l, Role::dense_ffn, {c.d_ff_dense, d});
            detail::add_tensor(ts, names::blk(l, "ffn_up"), l, Role::dense_ffn, {c.d_ff_dense, d});
            detail::add_tensor(ts, names::blk(l, "ffn_down"), l, Role::dense_ffn, {d, c.d_ff_dense});
            continue;
        }
        detail::add_tensor(ts, names::blk(l, "ffn_gate_inp"), l, Role::router, {c.n_experts, d});
        detail::add_tensor(ts, names::blk(l, "ffn_gate_shexp"), l, Role::shared_expert_ffn, {c.d_ff_shared, d});
        detail::add_tensor(ts, names::blk(l, "ffn_up_shexp"), l, Role::shared_expert_ffn, {c.d_ff_shared, d});
        detail::add_tensor(ts, names::blk(l, "ffn_down_shexp"), l, Role::shared_expert_ffn, {d, c.d_ff_shared});
        detail::add_routed(ts, l, c.n_experts, d, c.d_ff);
    }
    detail::add_tensor(ts, std::string(names::output_norm), std::nullopt, Role::norm, {d});
    detail::add_tensor(ts, std::string(names::output), std::nullopt, Role::output, {c.vocab, d});
    ModelManifest m(c, std::move(ts));
    m.validate();
    return m;
}

/// Toy preset: L=4, E=16, d_model=64, k=4, 4 groups (2 selected).
inline ManifestConfig toy_manifest_config() { return ManifestConfig{}; }

inline ModelManifest generate_manifest(std::string_view preset) {
    if (preset == "toy") return tinymoe_manifest(toy_manifest_config());
    if (preset == "dsv3-shape") return dsv3_shape_manifest();
    throw ValidationError("unknown manifest preset '" + std::string(preset) + "'");
}

} // namespace moesq
