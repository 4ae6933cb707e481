// SPDX-License-Identifier: Apache-2.0
#pragma once

// Tensor-level sensitivity: Sens(t) = (PPL(Q_low) - PPL(Q_high, t)) / rho_t,
// where rho_t is t's share of its layer's parameters.

#include <algorithm>
#include <atomic>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "moesqueeze/calib.hpp"
#include "moesqueeze/manifest.hpp"
#include "moesqueeze/model_io.hpp"
#include "moesqueeze/qcodec.hpp"
#include "moesqueeze/tinymoe.hpp"

namespace moesq {

/// |t| over the parameters of every tensor sharing t's layer; GLOBAL tensors
/// are measured against the whole model.
inline double rho(const TensorSpec& t, const ModelManifest& m) {
    const std::int64_t denom = t.layer ? total_params(m, filters::layer(t.layer)) : total_params(m);
    if (denom <= 0) throw ValidationError("rho: empty layer for '" + t.name + "'");
    return static_cast<double>(t.count) / static_cast<double>(denom);
}

enum class BaselineMode {
    rules,   // F32 norms; Q8 for k_b, v_b, token_embd, output; IQ1_M elsewhere
    uniform, // F32 norms, IQ1_M elsewhere
    literal, // IQ1_M everywhere
};

inline std::string_view baseline_mode_name(BaselineMode m) {
    switch (m) {
    case BaselineMode::rules: return "rules";
    case BaselineMode::uniform: return "uniform";
    case BaselineMode::literal: return "literal";
    }
    return "?";
}

inline BaselineMode baseline_mode_from_string(std::string_view s) {
    for (auto m : {BaselineMode::rules, BaselineMode::uniform, BaselineMode::literal})
        if (baseline_mode_name(m) == s) return m;
    throw ValidationError("unknown baseline mode '" + std::string(s) + "'");
}

inline Scheme baseline_scheme(const TensorSpec& t, BaselineMode mode, Scheme q_low = Scheme::IQ1_M) {
    if (mode == BaselineMode::literal) return q_low;
    if (t.role == Role::norm) return Scheme::F32;
    if (mode == BaselineMode::uniform) return q_low;
    switch (t.role) {
    case Role::attn_kb:
    case Role::attn_vb:
    case Role::token_embd:
    case Role::output: return Scheme::Q8;
    default: return q_low;
    }
}

inline ModelManifest baseline_assignment(ModelManifest m, BaselineMode mode = BaselineMode::rules, Scheme q_low = Scheme::IQ1_M) {
    for (auto& t : m.tensors) t.scheme = baseline_scheme(t, mode, q_low);
    return m;
}

inline ModelManifest all_f32(ModelManifest m) {
    for (auto& t : m.tensors) t.scheme = Scheme::F32;
    return m;
}

/// Size-class thresholds on parameter counts: below `small` is the small
/// class, [small, medium] the medium class.
struct Thresholds {
    std::int64_t small = 10'000'000;
    std::int64_t medium = 50'000'000;
    static Thresholds toy() { return {10'000, 50'000}; }
    void validate() const {
        if (small <= 0 || medium <= small) throw ValidationError("thresholds must satisfy 0 < small < medium");
    }
};

using QHighRule = std::function<Scheme(const TensorSpec&)>;

/// Probe precision: Q8 below the small threshold, Q4 otherwise.
inline QHighRule default_q_high_rule(Thresholds th) {
    return [th](const TensorSpec& t) { return t.count < th.small ? Scheme::Q8 : Scheme::Q4; };
}

struct SensitivityRecord {
    std::string tensor;
    Scheme q_high = Scheme::Q8;
    double ppl_low = 0.0;
    double ppl_high = 0.0;
    double rho = 0.0;
    double sens = 0.0;
    friend bool operator==(const SensitivityRecord&, const SensitivityRecord&) = default;
};

inline double sensitivity(double ppl_low, double ppl_high, double rho_t) {
    if (!(rho_t > 0.0)) throw ValidationError("rho must be > 0");
    return (ppl_low - ppl_high) / rho_t;
}

/// Shared read-only state of a sweep: the baseline-quantized view is
/// materialized once and ppl_low is measured once.
class SenseContext {
public:
    SenseContext(const Model<float>& model, ModelManifest baseline, std::span<const int> corpus)
        : model_(model), baseline_(std::move(baseline)), corpus_(corpus.begin(), corpus.end()),
          view_(quantized_view(model, baseline_)) {
        ppl_low_ = perplexity(view_, corpus_);
    }

    [[nodiscard]] double ppl_low() const { return ppl_low_; }
    [[nodiscard]] const ModelManifest& baseline() const { return baseline_; }
    [[nodiscard]] const Model<float>& view() const { return view_; }

    [[nodiscard]] bool eligible(const TensorSpec& t, Scheme q_high) const {
        return ladder_rank(baseline_.at(t.name).scheme) < ladder_rank(q_high);
    }

    /// One probe on a caller-owned copy of the baseline view: swap the
    /// upgraded tensor in, evaluate, swap it back.
    SensitivityRecord probe(Model<float>& scratch, const std::string& name, Scheme q_high) const {
        const auto& spec = baseline_.at(name);
        if (!eligible(spec, q_high))
            throw ValidationError("tensor '" + name + "' is already at or above " + std::string(scheme_name(q_high)) + " in the baseline");
        auto& slot = scratch.at(name).data;
        std::vector<float> saved = std::move(slot);
        slot = fake_quantize(model_.at(name).data, q_high);
        SensitivityRecord r;
        r.tensor = name;
        r.q_high = q_high;
        r.ppl_low = ppl_low_;
        r.ppl_high = perplexity(scratch, corpus_);
        r.rho = rho(spec, baseline_);
        r.sens = sensitivity(r.ppl_low, r.ppl_high, r.rho);
        slot = std::move(saved);
        return r;
    }

    [[nodiscard]] SensitivityRecord measure(const std::string& name, Scheme q_high) const {
        Model<float> scratch = view_;
        return probe(scratch, name, q_high);
    }

private:
    const Model<float>& model_;
    ModelManifest baseline_;
    std::vector<int> corpus_;
    Model<float> view_;
    double ppl_low_ = 0.0;
};

/// Perplexity of the model quantized per `assigned`.
inline double assigned_ppl(const Model<float>& model, const ModelManifest& assigned, std::span<const int> corpus) {
    return perplexity(quantized_view(model, assigned), corpus);
}

inline double baseline_ppl(const Model<float>& model, const ModelManifest& baseline, std::span<const int> corpus) {
    return assigned_ppl(model, baseline, corpus);
}

inline SensitivityRecord measure_sensitivity(const Model<float>& model, const ModelManifest& baseline, std::span<const int> corpus,
                                             const std::string& tensor, Scheme q_high) {
    return SenseContext(model, baseline, corpus).measure(tensor, q_high);
}

inline void sort_records(std::vector<SensitivityRecord>& rs) {
    std::sort(rs.begin(), rs.end(), [](const SensitivityRecord& a, const SensitivityRecord& b) {
        if (a.sens != b.sens) return a.sens > b.sens;
        return a.tensor < b.tensor;
    });
}

struct SweepOptions {
    bool include_routed = false; // routed experts are never upgraded, so probing them is optional
    int jobs = 0;                // 0: MOESQ_JOBS or 1
};

inline std::vector<SensitivityRecord> sensitivity_sweep(const SenseContext& ctx, const QHighRule& rule, SweepOptions opt = {}) {
    std::vector<std::pair<std::string, Scheme>> work;
    for (const auto& t : ctx.baseline().tensors) {
        if (is_routed(t.role) && !opt.include_routed) continue;
        const Scheme q = rule(t);
        if (q != Scheme::Q8 && q != Scheme::Q4) throw ValidationError("q_high rule must map to Q8 or Q4");
        if (ctx.eligible(t, q)) work.emplace_back(t.name, q);
    }
    std::vector<SensitivityRecord> out(work.size());
    const int jobs = std::max(1, std::min(resolve_jobs(opt.jobs), static_cast<int>(work.size())));
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(jobs));
    auto worker = [&](int id) {
        try {
            Model<float> scratch = ctx.view();
            for (std::size_t i; (i = next.fetch_add(1)) < work.size();) out[i] = ctx.probe(scratch, work[i].first, work[i].second);
        } catch (...) {
            errors[static_cast<std::size_t>(id)] = std::current_exception();
        }
    };
    if (jobs == 1) {
        worker(0);
    } else {
        std::vector<std::thread> pool;
        for (int j = 0; j < jobs; ++j) pool.emplace_back(worker, j);
        for (auto& t : pool) t.join();
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    sort_records(out);
    return out;
}

inline std::vector<SensitivityRecord> sensitivity_sweep(const Model<float>& model, const ModelManifest& baseline,
                                                        std::span<const int> corpus, const QHighRule& rule, SweepOptions opt = {}) {
    return sensitivity_sweep(SenseContext(model, baseline, corpus), rule, opt);
}

// ---------------------------------------------------------------------------
// CSV

inline std::string records_to_csv(const std::vector<SensitivityRecord>& rs) {
    std::string out = "tensor,q_high,ppl_low,ppl_high,rho,sens\n";
    for (const auto& r : rs)
        out += r.tensor + "," + std::string(scheme_name(r.q_high)) + "," + format_real(r.ppl_low) + "," + format_real(r.ppl_high) + "," +
               format_real(r.rho) + "," + format_real(r.sens) + "\n";
    return out;
}

inline std::vector<SensitivityRecord> records_from_csv(std::string_view text) {
    std::stringstream in{std::string(text)};
    std::string line;
    if (!std::getline(in, line) || line != "tensor,q_high,ppl_low,ppl_high,rho,sens") throw ParseError("records CSV: missing or wrong header");
    std::vector<SensitivityRecord> rs;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto f = detail::split_csv_line(line);
        if (f.size() != 6) throw ParseError("records CSV: expected 6 fields in '" + line + "'");
        SensitivityRecord r;
        r.tensor = f[0];
        r.q_high = scheme_from_string(f[1]);
        r.ppl_low = detail::parse_real(f[2], "ppl_low");
        r.ppl_high = detail::parse_real(f[3], "ppl_high");
        r.rho = detail::parse_real(f[4], "rho");
        r.sens = detail::parse_real(f[5], "sens");
        if (!(r.rho > 0.0)) throw ValidationError("records CSV: rho must be > 0 for '" + r.tensor + "'");
        rs.push_back(std::move(r));
    }
    return rs;
}

} // namespace moesq
