// SPDX-License-Identifier: Apache-2.0
#pragma once

// Activation adjustment after pruning: k_pruned = ceil(r * k_orig), active
// expert FLOPs, a peak activation-memory estimate, and per-layer k_i fitted to
// a device profile.

#include <algorithm>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "moesqueeze/manifest.hpp"
#include "moesqueeze/prune.hpp"

namespace moesq {

inline int scale_activation(int k_orig, double r) {
    if (k_orig < 1) throw ValidationError("k_orig must be >= 1");
    if (!(r > 0.0 && r <= 1.0)) throw ValidationError("retention ratio r must lie in (0, 1]");
    return ceil_ratio(r, k_orig);
}

/// 2 * sum_i k_i * P_i, with P_i the parameter count of one routed expert in layer i.
inline std::int64_t flops_active(const std::vector<int>& k, const std::vector<std::int64_t>& P) {
    if (k.size() != P.size()) throw ValidationError("flops_active: k and P lengths differ");
    std::int64_t f = 0;
    for (std::size_t i = 0; i < k.size(); ++i) f += 2 * static_cast<std::int64_t>(k[i]) * P[i];
    return f;
}

/// Live d_model-sized per-token buffers during a block: residual stream,
/// normalized input, shared/accumulated FFN output, one expert output.
inline constexpr std::int64_t kLiveModelBuffers = 4;
inline constexpr std::int64_t kActivationBytes = 4; // 32-bit activations

/// Per-token peak activation bytes: 4 * (c1 * d_model + max_i k_i * d_ff).
inline std::int64_t activation_peak_mem(std::int64_t d_model, std::int64_t d_ff, const std::vector<int>& k) {
    const int k_max = k.empty() ? 0 : *std::max_element(k.begin(), k.end());
    return kActivationBytes * (kLiveModelBuffers * d_model + static_cast<std::int64_t>(k_max) * d_ff);
}

inline std::int64_t activation_peak_mem(const ModelConfig& c, const std::vector<int>& k) {
    return activation_peak_mem(c.d_model, c.d_ff, k);
}

struct DeviceProfile {
    std::string name;
    std::int64_t mem_limit_bytes = 0;
    std::optional<std::int64_t> flops_per_token_budget;
};

inline DeviceProfile device_preset(std::string_view name) {
    if (name == "strix-halo-128gb") return {"strix-halo-128gb", 128'000'000'000LL, std::nullopt}; // 128 GB total memory
    throw ValidationError("unknown device preset '" + std::string(name) + "'");
}

inline nlohmann::json profile_to_json(const DeviceProfile& p) {
    nlohmann::json j;
    j["name"] = p.name;
    j["mem_limit_bytes"] = p.mem_limit_bytes;
    j["flops_per_token_budget"] = p.flops_per_token_budget ? nlohmann::json(*p.flops_per_token_budget) : nlohmann::json(nullptr);
    return j;
}

inline DeviceProfile profile_from_json(const nlohmann::json& j) {
    try {
        DeviceProfile p;
        p.name = j.value("name", std::string("custom"));
        const auto& m = j.at("mem_limit_bytes");
        if (!m.is_number_integer()) throw ValidationError("mem_limit_bytes must be an integer");
        p.mem_limit_bytes = m.get<std::int64_t>();
        if (p.mem_limit_bytes <= 0) throw ValidationError("mem_limit_bytes must be > 0");
        if (j.contains("flops_per_token_budget") && !j.at("flops_per_token_budget").is_null()) {
            if (!j.at("flops_per_token_budget").is_number_integer()) throw ValidationError("flops_per_token_budget must be an integer");
            p.flops_per_token_budget = j.at("flops_per_token_budget").get<std::int64_t>();
        }
        return p;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("device profile: ") + e.what());
    }
}

struct ActivationConfig {
    std::vector<int> k;  // per MoE layer
    int topk_group_new = 1;
    std::int64_t flops = 0;
    std::int64_t peak_mem = 0;
    friend bool operator==(const ActivationConfig&, const ActivationConfig&) = default;
};

inline nlohmann::json activation_to_json(const ActivationConfig& a) {
    nlohmann::json j;
    j["k"] = a.k;
    j["topk_group_new"] = a.topk_group_new;
    j["flops_active"] = a.flops;
    j["activation_peak_mem"] = a.peak_mem;
    return j;
}

inline ActivationConfig activation_from_json(const nlohmann::json& j) {
    try {
        ActivationConfig a;
        a.k = j.at("k").get<std::vector<int>>();
        a.topk_group_new = j.at("topk_group_new").get<int>();
        a.flops = j.value("flops_active", std::int64_t{0});
        a.peak_mem = j.value("activation_peak_mem", std::int64_t{0});
        return a;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("activation config: ") + e.what());
    }
}

/// Largest uniform k <= k_pruned within both budgets, then greedy per-layer
/// raises (lowest layer first) while the budgets still hold.
inline ActivationConfig fit_to_device(const DeviceProfile& profile, const ModelManifest& m, int k_pruned) {
    if (k_pruned < 1) throw ValidationError("k_pruned must be >= 1");
    if (profile.mem_limit_bytes <= 0) throw ValidationError("mem_limit_bytes must be > 0");
    const auto layers = m.moe_layers();
    if (layers.empty()) throw ValidationError("manifest has no MoE layers");
    const int e = m.config.n_experts;
    const int k_cap = std::min(k_pruned, e);
    std::vector<std::int64_t> P;
    for (int l : layers) P.push_back(single_expert_params(m, l));

    auto mem_of = [&](const std::vector<int>& k) { return activation_peak_mem(m.config.d_model, m.config.d_ff, k); };
    auto flops_ok = [&](const std::vector<int>& k) {
        return !profile.flops_per_token_budget || flops_active(k, P) <= *profile.flops_per_token_budget;
    };
    auto mem_ok = [&](const std::vector<int>& k) { return mem_of(k) <= profile.mem_limit_bytes; };

    std::vector<int> k;
    for (int u = k_cap; u >= 1; --u) {
        std::vector<int> cand(layers.size(), u);
        if (flops_ok(cand) && mem_ok(cand)) {
            k = std::move(cand);
            break;
        }
    }
    if (k.empty()) {
        const std::vector<int> ones(layers.size(), 1);
        if (!flops_ok(ones))
            throw InfeasibleError("flops budget violated even with k_i = 1 (" + std::to_string(flops_active(ones, P)) + " > " +
                                      std::to_string(*profile.flops_per_token_budget) + ")",
                                  flops_active(ones, P) - *profile.flops_per_token_budget);
        throw InfeasibleError("activation memory violated even with k_i = 1 (" + std::to_string(mem_of(ones)) + " > " +
                                  std::to_string(profile.mem_limit_bytes) + " bytes)",
                              mem_of(ones) - profile.mem_limit_bytes);
    }
    for (std::size_t i = 0; i < k.size(); ++i) {
        while (k[i] < k_cap) {
            ++k[i];
            if (!flops_ok(k) || !mem_ok(k)) {
                --k[i];
                break;
            }
        }
    }

    ActivationConfig a;
    a.k = k;
    const int g = m.config.n_group;
    const int k_max = *std::max_element(k.begin(), k.end());
    a.topk_group_new = std::min(m.config.topk_group, g);
    while ((e / g) * a.topk_group_new < k_max) ++a.topk_group_new; // selected groups must hold k experts
    a.flops = flops_active(k, P);
    a.peak_mem = mem_of(k);
    return a;
}

} // namespace moesq
