// SPDX-License-Identifier: Apache-2.0
#pragma once

// Budget-constrained mixed-precision allocation. Tensors are upgraded from the
// low-precision baseline in sensitivity order; when an upgrade would exceed the
// memory limit a deterministic back-off runs: (1) lower the pending target one,
// then two levels; (2) step down the largest previously upgraded tensor, never
// below Q4; (3) drop routed experts IQ1_M -> IQ1_S in binary-partition layer
// order, gate/up before down. Every step lands in a replayable action log.

#include <algorithm>
#include <cstdint>
#include <deque>
#include <map>
#include <optional>
#include <tuple>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "moesqueeze/manifest.hpp"
#include "moesqueeze/scheme.hpp"
#include "moesqueeze/sense.hpp"

namespace moesq {

struct BudgetLedger {
    std::int64_t m_limit = 0;
    std::int64_t s_low = 0;
    std::int64_t b_base = 0;  // m_limit - s_low, may be negative
    std::int64_t b_delta = 0; // bytes freed by applied downgrades
    std::int64_t b_total = 0; // b_base + b_delta
    std::int64_t spent = 0;   // bytes consumed by applied upgrades
    friend bool operator==(const BudgetLedger&, const BudgetLedger&) = default;
};

enum class Reason { upgrade, backoff_local, backoff_global, backoff_expert };

inline std::string_view reason_name(Reason r) {
    switch (r) {
    case Reason::upgrade: return "upgrade";
    case Reason::backoff_local: return "backoff_local";
    case Reason::backoff_global: return "backoff_global";
    case Reason::backoff_expert: return "backoff_expert";
    }
    return "?";
}

inline Reason reason_from_string(std::string_view s) {
    for (auto r : {Reason::upgrade, Reason::backoff_local, Reason::backoff_global, Reason::backoff_expert})
        if (reason_name(r) == s) return r;
    throw ParseError("unknown action reason '" + std::string(s) + "'");
}

/// `backoff_local` entries record a rejected or lowered target for the pending
/// upgrade; they change no assignment and are skipped on replay.
struct Action {
    int step = 0;
    std::string tensor;
    Scheme from = Scheme::IQ1_M;
    Scheme to = Scheme::IQ1_M;
    Reason reason = Reason::upgrade;
    friend bool operator==(const Action&, const Action&) = default;
};

struct AllocationPlan {
    std::map<std::string, Scheme> assignments;
    std::vector<Action> actions;
    std::vector<std::string> skipped; // upgrades that could not fit even after back-off
    std::int64_t final_size = 0;
    BudgetLedger ledger;
    bool success = false;
    friend bool operator==(const AllocationPlan&, const AllocationPlan&) = default;
};

inline std::int64_t s_low(const ModelManifest& baseline, const SchemeTable& table = SchemeTable::builtin()) {
    return model_size_bytes(baseline, table);
}

/// Upgrade class by size: small -> Q8, medium -> Q6, large and routed -> none.
inline std::optional<Scheme> upgrade_target(const TensorSpec& t, const Thresholds& th) {
    th.validate();
    if (is_routed(t.role)) return std::nullopt;
    if (t.count < th.small) return Scheme::Q8;
    if (t.count <= th.medium) return Scheme::Q6;
    return std::nullopt;
}

/// One step down the upgrade ladder Q8 -> Q6 -> Q5 -> Q4; nothing below Q4.
inline std::optional<Scheme> step_down(Scheme s) {
    switch (s) {
    case Scheme::Q8: return Scheme::Q6;
    case Scheme::Q6: return Scheme::Q5;
    case Scheme::Q5: return Scheme::Q4;
    default: return std::nullopt;
    }
}

/// Breadth-first midpoints of [0, L): mid = min(ceil((lo+hi)/2), hi-1), left
/// half before right half.
inline std::vector<int> binary_partition_order(int L) {
    if (L < 1) throw ValidationError("binary_partition_order: L must be >= 1");
    std::vector<int> out;
    std::deque<std::pair<int, int>> q{{0, L}};
    while (!q.empty()) {
        auto [lo, hi] = q.front();
        q.pop_front();
        if (lo >= hi) continue;
        const int mid = std::min((lo + hi + 1) / 2, hi - 1);
        out.push_back(mid);
        q.emplace_back(lo, mid);
        q.emplace_back(mid + 1, hi);
    }
    return out;
}

/// Stage-3 order: MoE layers by binary partition over their ordinals; within
/// a layer every expert's gate and up, then every down.
inline std::vector<std::string> expert_downgrade_order(const ModelManifest& m) {
    const auto moe = m.moe_layers();
    std::vector<std::string> out;
    if (moe.empty()) return out;
    for (int ord : binary_partition_order(static_cast<int>(moe.size()))) {
        const int l = moe[static_cast<std::size_t>(ord)];
        std::vector<const TensorSpec*> gu, down;
        for (const auto& t : m.tensors) {
            if (t.layer != l || !is_routed(t.role)) continue;
            (t.role == Role::routed_expert_down ? down : gu).push_back(&t);
        }
        auto by_expert = [](const TensorSpec* a, const TensorSpec* b) {
            if (*a->expert != *b->expert) return *a->expert < *b->expert;
            return a->role < b->role; // gate before up
        };
        std::sort(gu.begin(), gu.end(), by_expert);
        std::sort(down.begin(), down.end(), by_expert);
        for (const auto* t : gu) out.push_back(t->name);
        for (const auto* t : down) out.push_back(t->name);
    }
    return out;
}

namespace detail {

class Allocator {
public:
    Allocator(const ModelManifest& baseline, std::int64_t m_limit, const Thresholds& th, const SchemeTable& table)
        : base_(baseline), th_(th), table_(table), expert_order_(expert_downgrade_order(baseline)) {
        for (const auto& t : base_.tensors) cur_[t.name] = t.scheme;
        plan_.ledger.m_limit = m_limit;
        plan_.ledger.s_low = s_low(base_, table_);
        plan_.ledger.b_base = m_limit - plan_.ledger.s_low;
        size_ = plan_.ledger.s_low;
    }

    AllocationPlan run(std::vector<SensitivityRecord> records) {
        sort_records(records);
        // deficit in the baseline itself: only routed experts can give way
        if (size_ > plan_.ledger.m_limit) {
            expert_stage(0);
            if (size_ > plan_.ledger.m_limit)
                throw InfeasibleError("baseline exceeds the memory limit even with every routed expert at IQ1_S (shortfall " +
                                          std::to_string(size_ - plan_.ledger.m_limit) + " bytes)",
                                      size_ - plan_.ledger.m_limit);
        }
        for (const auto& r : records) {
            const auto* spec = base_.find(r.tensor);
            if (!spec) throw ValidationError("sensitivity record for unknown tensor '" + r.tensor + "'");
            const auto target = upgrade_target(*spec, th_);
            if (!target || ladder_rank(cur_[spec->name]) >= ladder_rank(*target)) continue;
            try_upgrade(*spec, *target);
        }
        plan_.assignments = cur_;
        plan_.final_size = size_;
        plan_.ledger.b_total = plan_.ledger.b_base + plan_.ledger.b_delta;
        plan_.success = size_ <= plan_.ledger.m_limit;
        return std::move(plan_);
    }

private:
    std::int64_t bytes(const TensorSpec& t, Scheme s) const { return table_.size_bytes(t.count, s); }
    bool fits(const TensorSpec& t, Scheme s) const { return size_ + bytes(t, s) - bytes(t, cur_.at(t.name)) <= plan_.ledger.m_limit; }

    void log(const std::string& name, Scheme from, Scheme to, Reason why) {
        plan_.actions.push_back({static_cast<int>(plan_.actions.size()), name, from, to, why});
    }

    void downgrade(const TensorSpec& t, Scheme to, Reason why) {
        const Scheme from = cur_[t.name];
        const auto freed = bytes(t, from) - bytes(t, to);
        size_ -= freed;
        plan_.ledger.b_delta += freed;
        cur_[t.name] = to;
        log(t.name, from, to, why);
    }

    void apply_upgrade(const TensorSpec& t, Scheme to) {
        const Scheme from = cur_[t.name];
        const auto cost = bytes(t, to) - bytes(t, from);
        size_ += cost;
        plan_.ledger.spent += cost;
        cur_[t.name] = to;
        upgraded_.push_back(&t);
        log(t.name, from, to, Reason::upgrade);
    }

    // Stage 3; returns once `pending` fits (if given) or the order is exhausted.
    bool expert_stage(const TensorSpec* pending, std::optional<Scheme> want = std::nullopt) {
        while (expert_next_ < expert_order_.size()) {
            if (pending ? fits(*pending, *want) : size_ <= plan_.ledger.m_limit) return true;
            const auto& t = base_.at(expert_order_[expert_next_++]);
            if (cur_[t.name] == Scheme::IQ1_M) downgrade(t, Scheme::IQ1_S, Reason::backoff_expert);
        }
        return pending ? fits(*pending, *want) : size_ <= plan_.ledger.m_limit;
    }

    // Largest previously upgraded tensor still above Q4; GLOBAL tensors rank
    // before layer 0, then by layer, then by name.
    const TensorSpec* global_candidate() const {
        const TensorSpec* best = nullptr;
        auto key = [](const TensorSpec* t) { return std::make_tuple(-t->count, t->layer ? *t->layer : -1, t->name); };
        for (const auto* t : upgraded_) {
            if (!step_down(cur_.at(t->name))) continue;
            if (!best || key(t) < key(best)) best = t;
        }
        return best;
    }

    void try_upgrade(const TensorSpec& t, Scheme target) {
        if (fits(t, target)) {
            apply_upgrade(t, target);
            return;
        }
        // stage 1: lower this tensor's own target, one level then two
        Scheme pending = target;
        Scheme level = target;
        for (int i = 0; i < 2; ++i) {
            const auto lower = step_down(level);
            if (!lower || ladder_rank(*lower) <= ladder_rank(cur_[t.name])) break;
            log(t.name, level, *lower, Reason::backoff_local);
            level = pending = *lower;
            if (fits(t, pending)) {
                apply_upgrade(t, pending);
                return;
            }
        }
        // stage 2: step down the largest earlier upgrades
        while (!fits(t, pending)) {
            const auto* c = global_candidate();
            if (!c) break;
            downgrade(*c, *step_down(cur_[c->name]), Reason::backoff_global);
        }
        // stage 3: routed experts
        if (fits(t, pending) || expert_stage(&t, pending)) {
            apply_upgrade(t, pending);
            return;
        }
        plan_.skipped.push_back(t.name);
    }

    const ModelManifest& base_;
    Thresholds th_;
    const SchemeTable& table_;
    std::vector<std::string> expert_order_;
    std::size_t expert_next_ = 0;
    std::map<std::string, Scheme> cur_;
    std::vector<const TensorSpec*> upgraded_;
    std::int64_t size_ = 0;
    AllocationPlan plan_;
};

} // namespace detail

/// Runs the allocation. Throws InfeasibleError when even the baseline with all
/// stage-3 downgrades exceeds `m_limit`.
inline AllocationPlan allocate(const std::vector<SensitivityRecord>& records, const ModelManifest& baseline, std::int64_t m_limit,
                               const Thresholds& th, const SchemeTable& table = SchemeTable::builtin()) {
    th.validate();
    return detail::Allocator(baseline, m_limit, th, table).run(records);
}

// ---------------------------------------------------------------------------
// Replay and verification

inline std::map<std::string, Scheme> replay(const ModelManifest& baseline, const std::vector<Action>& actions,
                                            std::vector<std::string>* violations = nullptr) {
    std::map<std::string, Scheme> cur;
    for (const auto& t : baseline.tensors) cur[t.name] = t.scheme;
    for (const auto& a : actions) {
        auto it = cur.find(a.tensor);
        if (it == cur.end()) {
            if (violations) violations->push_back("action " + std::to_string(a.step) + " names unknown tensor '" + a.tensor + "'");
            continue;
        }
        if (a.reason == Reason::backoff_local) continue;
        if (it->second != a.from && violations)
            violations->push_back("action " + std::to_string(a.step) + " on '" + a.tensor + "' starts from " + std::string(scheme_name(a.from)) +
                                  " but replay has " + std::string(scheme_name(it->second)));
        it->second = a.to;
    }
    return cur;
}

struct VerifyReport {
    bool ok = true;
    std::int64_t recomputed_size = 0;
    std::vector<std::string> violations;
};

/// Independent re-check of a plan: replayed assignments, recomputed size,
/// the budget inequality, ledger identities, and the Q4 floor after Q8 upgrades.
inline VerifyReport verify_plan(const AllocationPlan& plan, const ModelManifest& baseline, std::int64_t m_limit,
                                const SchemeTable& table = SchemeTable::builtin()) {
    VerifyReport rep;
    auto& v = rep.violations;
    const auto replayed = replay(baseline, plan.actions, &v);
    if (replayed != plan.assignments) v.push_back("assignments differ from replayed action log");

    std::int64_t size = 0, up = 0, down = 0;
    for (const auto& t : baseline.tensors) {
        auto it = plan.assignments.find(t.name);
        if (it == plan.assignments.end()) {
            v.push_back("tensor '" + t.name + "' has no assignment");
            continue;
        }
        const auto now = table.size_bytes(t.count, it->second);
        const auto was = table.size_bytes(t.count, t.scheme);
        size += now;
        if (now > was) up += now - was;
        else down += was - now;
    }
    if (plan.assignments.size() != baseline.tensors.size()) v.push_back("assignments name tensors outside the manifest");
    rep.recomputed_size = size;
    if (size != plan.final_size) v.push_back("size mismatch: recomputed " + std::to_string(size) + " vs recorded " + std::to_string(plan.final_size));

    const std::int64_t base = s_low(baseline, table);
    // net form of the upgrade constraint: sum of upgrade deltas <= B_base + freed bytes
    if (plan.success && up > (m_limit - base) + down) v.push_back("upgrade sum exceeds B_total");
    if (plan.success && size > m_limit) v.push_back("final size exceeds m_limit");
    if (plan.success != (plan.final_size <= m_limit)) v.push_back("success flag inconsistent with final size");

    const auto& L = plan.ledger;
    if (L.m_limit != m_limit || L.s_low != base || L.b_base != m_limit - base) v.push_back("ledger constants inconsistent");
    if (L.b_total != L.b_base + L.b_delta) v.push_back("ledger b_total != b_base + b_delta");
    if (L.spent > L.b_total && plan.success) v.push_back("ledger spent exceeds b_total");
    if (L.s_low + L.spent - L.b_delta != plan.final_size) v.push_back("ledger does not account for final size");

    for (const auto& a : plan.actions) {
        if (a.reason != Reason::upgrade || a.to != Scheme::Q8) continue;
        auto it = plan.assignments.find(a.tensor);
        if (it != plan.assignments.end() && ladder_rank(it->second) < ladder_rank(Scheme::Q4))
            v.push_back("'" + a.tensor + "' upgraded to Q8 but ends below Q4");
    }
    for (std::size_t i = 0; i < plan.actions.size(); ++i)
        if (plan.actions[i].step != static_cast<int>(i)) {
            v.push_back("action steps are not consecutive");
            break;
        }
    rep.ok = v.empty();
    return rep;
}

// ---------------------------------------------------------------------------
// JSON (object keys sort, so dumps are byte-stable)

inline nlohmann::json ledger_to_json(const BudgetLedger& l) {
    return {{"m_limit", l.m_limit}, {"s_low", l.s_low}, {"b_base", l.b_base}, {"b_delta", l.b_delta}, {"b_total", l.b_total}, {"spent", l.spent}};
}

inline nlohmann::json alloc_plan_to_json(const AllocationPlan& p) {
    nlohmann::json j;
    nlohmann::json as = nlohmann::json::object();
    for (const auto& [n, s] : p.assignments) as[n] = std::string(scheme_name(s));
    j["assignments"] = std::move(as);
    auto acts = nlohmann::json::array();
    for (const auto& a : p.actions)
        acts.push_back({{"step", a.step}, {"tensor", a.tensor}, {"from", std::string(scheme_name(a.from))},
                        {"to", std::string(scheme_name(a.to))}, {"reason", std::string(reason_name(a.reason))}});
    j["actions"] = std::move(acts);
    j["skipped"] = p.skipped;
    j["final_size"] = p.final_size;
    j["ledger"] = ledger_to_json(p.ledger);
    j["success"] = p.success;
    return j;
}

inline AllocationPlan alloc_plan_from_json(const nlohmann::json& j) {
    try {
        AllocationPlan p;
        for (auto it = j.at("assignments").begin(); it != j.at("assignments").end(); ++it)
            p.assignments[it.key()] = scheme_from_string(it.value().get<std::string>());
        for (const auto& ja : j.at("actions"))
            p.actions.push_back({ja.at("step").get<int>(), ja.at("tensor").get<std::string>(), scheme_from_string(ja.at("from").get<std::string>()),
                                 scheme_from_string(ja.at("to").get<std::string>()), reason_from_string(ja.at("reason").get<std::string>())});
        p.skipped = j.value("skipped", std::vector<std::string>{});
        p.final_size = j.at("final_size").get<std::int64_t>();
        const auto& l = j.at("ledger");
        p.ledger = {l.at("m_limit").get<std::int64_t>(), l.at("s_low").get<std::int64_t>(), l.at("b_base").get<std::int64_t>(),
                    l.at("b_delta").get<std::int64_t>(), l.at("b_total").get<std::int64_t>(), l.at("spent").get<std::int64_t>()};
        p.success = j.at("success").get<bool>();
        return p;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("allocation plan: ") + e.what());
    }
}

inline ModelManifest apply_plan(ModelManifest m, const AllocationPlan& p) {
    for (auto& t : m.tensors) {
        auto it = p.assignments.find(t.name);
        if (it == p.assignments.end()) throw ValidationError("plan has no assignment for '" + t.name + "'");
        t.scheme = it->second;
    }
    if (p.assignments.size() != m.tensors.size()) throw ValidationError("plan assigns tensors outside the manifest");
    return m;
}

} // namespace moesq
