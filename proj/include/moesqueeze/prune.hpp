// SPDX-License-Identifier: Apache-2.0
#pragma once

// Expert importance I_e = alpha * f_e + (1 - alpha) * s_bar_e, per-layer
// top-ceil(rE) retention, and rewriting of manifests/models onto the kept pool.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "moesqueeze/calib.hpp"
#include "moesqueeze/manifest.hpp"
#include "moesqueeze/tinymoe.hpp"

namespace moesq {

/// ceil(r * n) that does not overshoot when r * n is an integer up to
/// floating-point noise (0.7 * 10 must give 7, not 8).
inline int ceil_ratio(double r, int n) {
    const double x = r * static_cast<double>(n);
    const double nearest = std::round(x);
    if (std::abs(x - nearest) <= 1e-9 * std::max(1.0, std::abs(x))) return static_cast<int>(nearest);
    return static_cast<int>(std::ceil(x));
}

struct ImportanceTable {
    std::vector<int> layers;
    std::vector<std::vector<double>> value; // [layer][expert]
};

inline ImportanceTable importance(const ExpertStats& stats, double alpha) {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ValidationError("alpha must lie in [0, 1]");
    ImportanceTable t;
    t.layers = stats.layers;
    for (int li = 0; li < stats.n_layers(); ++li) {
        std::vector<double> row;
        for (int e = 0; e < stats.n_experts(); ++e) row.push_back(alpha * stats.f(li, e) + (1.0 - alpha) * stats.s_bar(li, e));
        t.value.push_back(std::move(row));
    }
    return t;
}

/// Equal importance everywhere; the plan then keeps the lowest ids. Useful for
/// manifest-only size arithmetic.
inline ImportanceTable uniform_importance(std::vector<int> layers, int n_experts) {
    ImportanceTable t;
    t.layers = std::move(layers);
    t.value.assign(t.layers.size(), std::vector<double>(static_cast<std::size_t>(n_experts), 1.0));
    return t;
}

struct LayerPrune {
    int layer = 0;
    std::vector<int> kept;       // ascending original ids
    std::map<int, int> remap;    // original id -> new id
    friend bool operator==(const LayerPrune&, const LayerPrune&) = default;
};

struct PruningPlan {
    double alpha = 0.5;
    double r = 0.75;
    int n_experts = 0; // before pruning
    int kept_per_layer = 0;
    int n_group = 0;       // before pruning; 0 if unknown
    int n_group_after = 0; // divisor fallback actually used
    std::vector<LayerPrune> layers;
    std::vector<std::vector<double>> importance; // [layer][expert], informational
    friend bool operator==(const PruningPlan&, const PruningPlan&) = default;
};

/// Per layer: the ceil(rE) highest-importance experts, ties to the lower id.
inline int group_count_after_prune(int e, int n_group);

inline PruningPlan plan_prune(const ImportanceTable& I, double r, int n_experts, double alpha = 0.5, int n_group = 0) {
    if (!(r > 0.0 && r <= 1.0)) throw ValidationError("retention ratio r must lie in (0, 1]");
    const int keep = ceil_ratio(r, n_experts);
    if (keep < 1) throw DomainError("ceil(rE) < 1: nothing would be kept");
    PruningPlan plan;
    plan.alpha = alpha;
    plan.r = r;
    plan.n_experts = n_experts;
    plan.kept_per_layer = keep;
    if (n_group > 0) {
        plan.n_group = n_group;
        plan.n_group_after = group_count_after_prune(keep, n_group);
    }
    plan.importance = I.value;
    for (std::size_t li = 0; li < I.layers.size(); ++li) {
        const auto& v = I.value[li];
        if (static_cast<int>(v.size()) != n_experts) throw ValidationError("importance table width differs from E");
        std::vector<int> order(v.size());
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return v[static_cast<std::size_t>(a)] > v[static_cast<std::size_t>(b)]; });
        LayerPrune lp;
        lp.layer = I.layers[li];
        lp.kept.assign(order.begin(), order.begin() + keep);
        std::sort(lp.kept.begin(), lp.kept.end());
        for (std::size_t i = 0; i < lp.kept.size(); ++i) lp.remap[lp.kept[i]] = static_cast<int>(i);
        plan.layers.push_back(std::move(lp));
    }
    return plan;
}

/// Largest divisor of `e` that does not exceed `n_group`.
inline int group_count_after_prune(int e, int n_group) {
    for (int g = std::min(n_group, e); g >= 1; --g)
        if (e % g == 0) return g;
    return 1;
}

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::json plan_to_json(const PruningPlan& p) {
    nlohmann::json j;
    j["alpha"] = p.alpha;
    j["r"] = p.r;
    j["n_experts"] = p.n_experts;
    j["kept_per_layer"] = p.kept_per_layer;
    if (p.n_group > 0) {
        j["n_group"] = p.n_group;
        j["n_group_after"] = p.n_group_after;
    }
    auto layers = nlohmann::json::array();
    for (const auto& lp : p.layers) {
        nlohmann::json jl;
        jl["layer"] = lp.layer;
        jl["kept"] = lp.kept;
        nlohmann::json remap = nlohmann::json::object();
        for (const auto& [o, n] : lp.remap) remap[std::to_string(o)] = n;
        jl["remap"] = remap;
        layers.push_back(std::move(jl));
    }
    j["layers"] = std::move(layers);
    j["importance"] = p.importance;
    return j;
}

inline PruningPlan plan_from_json(const nlohmann::json& j) {
    try {
        PruningPlan p;
        p.alpha = j.at("alpha").get<double>();
        p.r = j.at("r").get<double>();
        p.n_experts = j.at("n_experts").get<int>();
        p.kept_per_layer = j.value("kept_per_layer", 0);
        p.n_group = j.value("n_group", 0);
        p.n_group_after = j.value("n_group_after", 0);
        for (const auto& jl : j.at("layers")) {
            LayerPrune lp;
            lp.layer = jl.at("layer").get<int>();
            lp.kept = jl.at("kept").get<std::vector<int>>();
            for (auto it = jl.at("remap").begin(); it != jl.at("remap").end(); ++it) lp.remap[std::stoi(it.key())] = it.value().get<int>();
            if (!std::is_sorted(lp.kept.begin(), lp.kept.end())) throw ValidationError("plan: kept ids must be ascending");
            if (lp.remap.size() != lp.kept.size()) throw ValidationError("plan: remap must cover exactly the kept experts");
            for (std::size_t i = 0; i < lp.kept.size(); ++i) {
                auto it = lp.remap.find(lp.kept[i]);
                if (it == lp.remap.end() || it->second != static_cast<int>(i)) throw ValidationError("plan: remap is not kept -> [0, |kept|)");
            }
            if (p.kept_per_layer == 0) p.kept_per_layer = static_cast<int>(lp.kept.size());
            if (static_cast<int>(lp.kept.size()) != p.kept_per_layer) throw ValidationError("plan: layers keep different expert counts");
            p.layers.push_back(std::move(lp));
        }
        if (j.contains("importance")) p.importance = j.at("importance").get<std::vector<std::vector<double>>>();
        return p;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("pruning plan: ") + e.what());
    } catch (const std::invalid_argument&) {
        throw ParseError("pruning plan: remap keys must be integers");
    }
}

// ---------------------------------------------------------------------------
// Application

namespace detail {
inline const LayerPrune& plan_for_layer(const PruningPlan& plan, int layer) {
    for (const auto& lp : plan.layers)
        if (lp.layer == layer) return lp;
    throw ValidationError("pruning plan has no entry for MoE layer " + std::to_string(layer));
}

// Name rewrite "blk.L.ffn_x.OLD.weight" -> "blk.L.ffn_x.NEW.weight".
inline std::string renamed_expert(const TensorSpec& t, int new_id) {
    const std::string what = t.role == Role::routed_expert_gate ? "ffn_gate" : t.role == Role::routed_expert_up ? "ffn_up" : "ffn_down";
    return names::expert(*t.layer, what, new_id);
}
} // namespace detail

/// Manifest restricted to the kept experts, renumbered densely; routers shrink
/// to |kept| rows and n_group falls back to a divisor of the new E.
inline ModelManifest apply_prune(const ModelManifest& m, const PruningPlan& plan) {
    if (plan.n_experts != m.config.n_experts) throw ValidationError("pruning plan E does not match the manifest");
    const auto moe = m.moe_layers();
    if (moe.size() != plan.layers.size()) throw ValidationError("pruning plan layer count does not match the manifest");
    const int e_new = plan.kept_per_layer;
    std::vector<TensorSpec> out;
    for (const auto& t : m.tensors) {
        if (is_routed(t.role)) {
            const auto& lp = detail::plan_for_layer(plan, *t.layer);
            auto it = lp.remap.find(*t.expert);
            if (it == lp.remap.end()) continue;
            TensorSpec nt = t;
            nt.expert = it->second;
            nt.name = detail::renamed_expert(t, it->second);
            out.push_back(std::move(nt));
        } else if (t.role == Role::router) {
            TensorSpec nt = t;
            nt.shape[0] = e_new;
            nt.count = shape_count(nt.shape);
            out.push_back(std::move(nt));
        } else {
            out.push_back(t);
        }
    }
    ManifestConfig c = m.config;
    c.n_experts = e_new;
    c.n_group = group_count_after_prune(e_new, m.config.n_group);
    c.topk_group = std::min(c.topk_group, c.n_group);
    ModelManifest pm(c, std::move(out));
    pm.validate();
    return pm;
}

/// Pruned runtime model. Non-expert tensors are copied bit-exactly, routers keep
/// the rows of the kept experts in remap order, and topk_group is raised if the
/// selected groups could no longer hold k experts.
inline Model<float> apply_prune(const Model<float>& model, const PruningPlan& plan) {
    const auto& c0 = model.config;
    if (plan.n_experts != c0.n_experts) throw ValidationError("pruning plan E does not match the model");
    if (static_cast<int>(plan.layers.size()) != c0.n_layers) throw ValidationError("pruning plan layer count does not match the model");
    ModelConfig c = c0;
    c.n_experts = plan.kept_per_layer;
    c.n_group = group_count_after_prune(c.n_experts, c0.n_group);
    c.topk_group = std::min(c0.topk_group, c.n_group);
    int k_max = c.k;
    for (int kk : c.layer_k) k_max = std::max(k_max, kk);
    if (k_max > c.n_experts) throw DomainError("pruned pool smaller than k; lower k before pruning");
    while ((c.n_experts / c.n_group) * c.topk_group < k_max) ++c.topk_group;
    Model<float> out(c);
    const auto d = static_cast<std::size_t>(c.d_model);
    for (std::size_t i = 0; i < out.names.size(); ++i) {
        const auto& name = out.names[i];
        // routers and experts are rewritten below
        if (const auto* t = model.find(name); t && t->shape == out.tensors[i].shape) out.tensors[i].data = t->data;
    }
    for (int l = 0; l < c.n_layers; ++l) {
        const auto& lp = detail::plan_for_layer(plan, l);
        const auto& router = model.at(names::blk(l, "ffn_gate_inp")).data;
        auto& nr = out.at(names::blk(l, "ffn_gate_inp")).data;
        for (const auto& [old_id, new_id] : lp.remap) {
            std::copy_n(router.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(old_id) * d), d,
                        nr.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(new_id) * d));
            for (const char* what : {"ffn_gate", "ffn_up", "ffn_down"})
                out.at(names::expert(l, what, new_id)).data = model.at(names::expert(l, what, old_id)).data;
        }
    }
    return out;
}

} // namespace moesq
