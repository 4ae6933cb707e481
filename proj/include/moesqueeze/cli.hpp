// SPDX-License-Identifier: Apache-2.0
#pragma once

// Command-line front end. Each subcommand reads and writes plain files in the
// output directory, so the pipeline can be resumed or re-run stage by stage.

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "moesqueeze/actadj.hpp"
#include "moesqueeze/alloc.hpp"
#include "moesqueeze/calib.hpp"
#include "moesqueeze/corpus.hpp"
#include "moesqueeze/manifest.hpp"
#include "moesqueeze/model_io.hpp"
#include "moesqueeze/prune.hpp"
#include "moesqueeze/sense.hpp"
#include "moesqueeze/train.hpp"

#ifndef MOESQ_VERSION
#define MOESQ_VERSION "0.0.0"
#endif

namespace moesq::cli {

namespace fs = std::filesystem;

/// Bad flags, missing inputs the user must name, malformed config: exit 2.
class UsageError : public Error {
public:
    using Error::Error;
};

inline constexpr int kExitOk = 0;
inline constexpr int kExitDomain = 1;
inline constexpr int kExitUsage = 2;

namespace files {
inline constexpr const char* manifest = "manifest.json";
inline constexpr const char* init_weights = "model.init.tmoe";
inline constexpr const char* weights = "model.tmoe";
inline constexpr const char* pruned_weights = "model.pruned.tmoe";
inline constexpr const char* adjusted_weights = "model.adjusted.tmoe";
inline constexpr const char* pruned_manifest = "manifest.pruned.json";
inline constexpr const char* train_corpus = "corpus.train.txt";
inline constexpr const char* calib_corpus = "corpus.calib.txt";
inline constexpr const char* eval_corpus = "corpus.eval.txt";
inline constexpr const char* stats = "stats.csv";
inline constexpr const char* stats_summary = "stats_summary.csv";
inline constexpr const char* prune_plan = "prune_plan.json";
inline constexpr const char* activation = "activation.json";
inline constexpr const char* records = "records.csv";
inline constexpr const char* alloc_plan = "alloc_plan.json";
inline constexpr const char* quantized = "model.tmoeq";
inline constexpr const char* eval = "eval.json";
inline constexpr const char* report = "report.txt";
inline constexpr const char* fig2 = "fig2.csv";
inline constexpr const char* size_ppl = "size_ppl.csv";
inline constexpr const char* meta = "report.meta.json";
} // namespace files

struct Settings {
    std::optional<std::string> config, manifest, corpus, out, weights, stats, records, plan, quantized, preset, device, baseline, label,
        mem_limit, thresholds;
    std::optional<double> alpha, ratio, lr;
    std::optional<std::uint64_t> seed;
    std::optional<int> jobs, steps;

    [[nodiscard]] double alpha_v() const { return alpha.value_or(0.5); }
    [[nodiscard]] double ratio_v() const { return ratio.value_or(0.75); }
    [[nodiscard]] std::uint64_t seed_v() const { return seed.value_or(42); }
    [[nodiscard]] fs::path out_v() const { return out.value_or("."); }
};

// ---------------------------------------------------------------------------
// Parsing helpers

inline std::int64_t parse_count(const std::string& s, const char* what) {
    double v = 0;
    std::size_t pos = 0;
    try {
        v = std::stod(s, &pos);
    } catch (const std::exception&) {
        throw UsageError(std::string("bad value for ") + what + ": '" + s + "'");
    }
    if (pos != s.size() || !(v >= 0) || v > 9.2e18 || v != std::floor(v)) throw UsageError(std::string("bad value for ") + what + ": '" + s + "'");
    return static_cast<std::int64_t>(v);
}

/// "1e4,5e4" -> {10000, 50000}.
inline Thresholds parse_thresholds(const std::string& s) {
    const auto comma = s.find(',');
    if (comma == std::string::npos) throw UsageError("--thresholds expects SMALL,MEDIUM");
    Thresholds t{parse_count(s.substr(0, comma), "--thresholds"), parse_count(s.substr(comma + 1), "--thresholds")};
    if (t.small <= 0 || t.medium <= t.small) throw UsageError("--thresholds must satisfy 0 < SMALL < MEDIUM");
    return t;
}

/// Integer bytes with optional decimal suffix (KB, MB, GB, TB), or "uniform"
/// for the uniform-IQ1_M size of the manifest in use.
inline std::int64_t parse_mem_limit(const std::string& s, const ModelManifest& m) {
    if (s == "uniform") return model_size_bytes(baseline_assignment(m, BaselineMode::uniform));
    static const std::vector<std::pair<std::string, double>> suffixes = {{"TB", 1e12}, {"GB", 1e9}, {"MB", 1e6}, {"KB", 1e3}};
    for (const auto& [suf, mul] : suffixes)
        if (s.size() > suf.size() && s.compare(s.size() - suf.size(), suf.size(), suf) == 0) {
            double v = 0;
            std::size_t pos = 0;
            const auto num = s.substr(0, s.size() - suf.size());
            try {
                v = std::stod(num, &pos);
            } catch (const std::exception&) {
                pos = 0;
            }
            if (pos == 0 || pos != num.size() || !(v > 0)) throw UsageError("bad --mem-limit '" + s + "'");
            return static_cast<std::int64_t>(std::llround(v * mul));
        }
    const auto v = parse_count(s, "--mem-limit");
    if (v <= 0) throw UsageError("--mem-limit must be > 0");
    return v;
}

inline Thresholds thresholds_for(const Settings& st, const ModelManifest& m) {
    if (st.thresholds) return parse_thresholds(*st.thresholds);
    return m.config.arch == "tinymoe" ? Thresholds::toy() : Thresholds{};
}

/// Config file keys mirror the long flags (dashes or underscores).
inline void merge_config(Settings& st, const std::string& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file_bytes(path));
    } catch (const nlohmann::json::exception& e) {
        throw UsageError("config '" + path + "': " + e.what());
    } catch (const Error& e) {
        throw UsageError(e.what());
    }
    if (!j.is_object()) throw UsageError("config must be a JSON object");
    auto str = [&](std::optional<std::string>& dst, const nlohmann::json& v, const std::string& k) {
        if (dst) return;
        if (v.is_string()) dst = v.get<std::string>();
        else if (v.is_number()) dst = v.dump();
        else throw UsageError("config key '" + k + "' must be a string");
    };
    for (auto it = j.begin(); it != j.end(); ++it) {
        std::string k = it.key();
        std::replace(k.begin(), k.end(), '_', '-');
        const auto& v = it.value();
        try {
            if (k == "manifest") str(st.manifest, v, k);
            else if (k == "corpus") str(st.corpus, v, k);
            else if (k == "out") str(st.out, v, k);
            else if (k == "weights") str(st.weights, v, k);
            else if (k == "stats") str(st.stats, v, k);
            else if (k == "records") str(st.records, v, k);
            else if (k == "plan") str(st.plan, v, k);
            else if (k == "quantized") str(st.quantized, v, k);
            else if (k == "preset") str(st.preset, v, k);
            else if (k == "device") str(st.device, v, k);
            else if (k == "baseline") str(st.baseline, v, k);
            else if (k == "label") str(st.label, v, k);
            else if (k == "mem-limit") str(st.mem_limit, v, k);
            else if (k == "thresholds") {
                if (!st.thresholds) {
                    if (v.is_array() && v.size() == 2) st.thresholds = nlohmann::json(v[0]).dump() + "," + nlohmann::json(v[1]).dump();
                    else str(st.thresholds, v, k);
                }
            } else if (k == "alpha") { if (!st.alpha) st.alpha = v.get<double>(); }
            else if (k == "ratio") { if (!st.ratio) st.ratio = v.get<double>(); }
            else if (k == "lr") { if (!st.lr) st.lr = v.get<double>(); }
            else if (k == "seed") { if (!st.seed) st.seed = v.get<std::uint64_t>(); }
            else if (k == "jobs") { if (!st.jobs) st.jobs = v.get<int>(); }
            else if (k == "steps") { if (!st.steps) st.steps = v.get<int>(); }
            else throw UsageError("unknown config key '" + it.key() + "'");
        } catch (const nlohmann::json::exception&) {
            throw UsageError("config key '" + it.key() + "' has the wrong type");
        }
    }
}

inline void validate_settings(const Settings& st) {
    if (st.alpha && !(*st.alpha >= 0.0 && *st.alpha <= 1.0)) throw UsageError("--alpha must lie in [0, 1]");
    if (st.ratio && !(*st.ratio > 0.0 && *st.ratio <= 1.0)) throw UsageError("--ratio must lie in (0, 1]");
    if (st.jobs && *st.jobs < 1) throw UsageError("--jobs must be >= 1");
    if (st.steps && *st.steps < 0) throw UsageError("--steps must be >= 0");
    if (st.lr && !(*st.lr >= 0.0)) throw UsageError("--lr must be >= 0");
    if (st.thresholds) parse_thresholds(*st.thresholds);
}

// ---------------------------------------------------------------------------
// File plumbing

inline fs::path in_out(const Settings& st, const char* name) { return st.out_v() / name; }

/// Explicit flag if given, else the first default artifact that exists.
inline std::string pick(const std::optional<std::string>& flag, const Settings& st, std::initializer_list<const char*> defaults,
                        const char* what) {
    if (flag) {
        if (!fs::exists(*flag)) throw UsageError(std::string(what) + " '" + *flag + "' does not exist");
        return *flag;
    }
    for (const char* d : defaults)
        if (fs::exists(in_out(st, d))) return in_out(st, d).string();
    throw UsageError(std::string("no ") + what + " given and none found in '" + st.out_v().string() + "'");
}

inline void write_text(const fs::path& p, std::string_view s) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    write_file_bytes(p.string(), s);
}

inline void write_json(const fs::path& p, const nlohmann::json& j) { write_text(p, j.dump(1) + "\n"); }

inline nlohmann::json read_json(const std::string& path) {
    try {
        return nlohmann::json::parse(read_file_bytes(path));
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("'" + path + "': " + e.what());
    }
}

inline std::vector<int> corpus_tokens(const std::string& path) {
    auto t = bytes_to_tokens(read_file_bytes(path));
    if (t.size() < 2) throw DomainError("corpus '" + path + "' has fewer than 2 bytes");
    return t;
}

inline std::string gb(std::int64_t bytes) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f GB", to_gb(bytes));
    return buf;
}

// ---------------------------------------------------------------------------
// Stages

struct Ctx {
    Settings st;
    std::ostream& out;
};

/// Writes the manifest for a preset; the toy preset also gets initial weights
/// and train/calib/eval corpora (synthetic, or a split of --corpus).
inline void cmd_gen(Ctx& c) {
    const auto preset = c.st.preset.value_or("toy");
    const auto man = generate_manifest(preset);
    write_text(in_out(c.st, files::manifest), serialize_manifest(man));
    c.out << "manifest: " << man.tensors.size() << " tensors, " << total_params(man) << " params\n";
    if (preset != "toy") return;
    save_weights(init_model<float>(ModelConfig::toy(c.st.seed_v())), in_out(c.st, files::init_weights).string());
    std::string train, calib, eval;
    if (c.st.corpus) {
        const auto all = read_file_bytes(*c.st.corpus);
        if (all.size() < 64) throw DomainError("corpus '" + *c.st.corpus + "' is too small to split");
        const auto a = all.size() * 8 / 10, b = all.size() * 9 / 10;
        train = all.substr(0, a);
        calib = all.substr(a, b - a);
        eval = all.substr(b);
    } else {
        train = synthetic_corpus(65536, 11);
        calib = synthetic_corpus(4096, 23);
        eval = synthetic_corpus(4096, 99);
    }
    write_text(in_out(c.st, files::train_corpus), train);
    write_text(in_out(c.st, files::calib_corpus), calib);
    write_text(in_out(c.st, files::eval_corpus), eval);
    c.out << "weights: " << files::init_weights << ", corpora: " << train.size() << "/" << calib.size() << "/" << eval.size() << " bytes\n";
}

inline void cmd_train(Ctx& c) {
    const auto w = pick(c.st.weights, c.st, {files::init_weights}, "weights");
    const auto corpus = corpus_tokens(pick(c.st.corpus, c.st, {files::train_corpus}, "corpus"));
    TrainOptions opt;
    opt.steps = c.st.steps.value_or(500);
    opt.lr = c.st.lr.value_or(0.2);
    opt.seed = c.st.seed_v();
    std::vector<double> losses;
    const auto m = train(load_weights(w), corpus, opt, &losses);
    save_weights(m, in_out(c.st, files::weights).string());
    if (!losses.empty()) c.out << "loss: " << losses.front() << " -> " << losses.back() << " over " << losses.size() << " steps\n";
}

inline void cmd_calib(Ctx& c) {
    const auto m = load_weights(pick(c.st.weights, c.st, {files::weights}, "weights"));
    const auto corpus = corpus_tokens(pick(c.st.corpus, c.st, {files::calib_corpus}, "corpus"));
    const auto s = collect_stats(m, corpus);
    write_text(in_out(c.st, files::stats), stats_to_csv(s));
    write_text(in_out(c.st, files::stats_summary), summary_to_csv(stats_summary(s)));
    for (int l = 0; l < s.n_layers(); ++l) c.out << "layer " << s.layers[static_cast<std::size_t>(l)] << " max/min count " << imbalance_ratio(s, l) << "\n";
}

/// With weights: prune model and its manifest from calibration stats. With
/// only a manifest: equal importance (size arithmetic without weights).
inline void cmd_prune(Ctx& c) {
    const bool have_weights = c.st.weights || fs::exists(in_out(c.st, files::weights));
    const bool manifest_only = c.st.manifest && !c.st.weights;
    if (manifest_only || !have_weights) {
        const auto man = load_manifest_file(pick(c.st.manifest, c.st, {files::manifest}, "manifest"));
        const auto I = c.st.stats ? importance(stats_from_csv(read_file_bytes(*c.st.stats)), c.st.alpha_v())
                                  : uniform_importance(man.moe_layers(), man.config.n_experts);
        const auto plan = plan_prune(I, c.st.ratio_v(), man.config.n_experts, c.st.alpha_v(), man.config.n_group);
        const auto pm = apply_prune(man, plan);
        write_json(in_out(c.st, files::prune_plan), plan_to_json(plan));
        write_text(in_out(c.st, files::pruned_manifest), serialize_manifest(pm));
        c.out << "kept " << plan.kept_per_layer << "/" << plan.n_experts << " experts per layer; params " << total_params(man) << " -> "
              << total_params(pm) << "\n";
        return;
    }
    const auto m = load_weights(pick(c.st.weights, c.st, {files::weights}, "weights"));
    const auto stats = stats_from_csv(read_file_bytes(pick(c.st.stats, c.st, {files::stats}, "stats")));
    const auto plan = plan_prune(importance(stats, c.st.alpha_v()), c.st.ratio_v(), m.config.n_experts, c.st.alpha_v(), m.config.n_group);
    const auto pmodel = apply_prune(m, plan);
    write_json(in_out(c.st, files::prune_plan), plan_to_json(plan));
    write_text(in_out(c.st, files::pruned_manifest), serialize_manifest(pmodel.manifest()));
    save_weights(pmodel, in_out(c.st, files::pruned_weights).string());
    c.out << "kept " << plan.kept_per_layer << "/" << plan.n_experts << " experts per layer; params " << m.param_count() << " -> "
          << pmodel.param_count() << "\n";
}

inline DeviceProfile device_for(const Settings& st) {
    const auto d = st.device.value_or("strix-halo-128gb");
    if (fs::exists(d)) return profile_from_json(read_json(d));
    return device_preset(d);
}

inline void cmd_adjust(Ctx& c) {
    const auto man = load_manifest_file(pick(c.st.manifest, c.st, {files::pruned_manifest}, "manifest"));
    const int k_pruned = scale_activation(man.config.k_orig, c.st.ratio_v());
    const auto act = fit_to_device(device_for(c.st), man, k_pruned);
    write_json(in_out(c.st, files::activation), activation_to_json(act));
    c.out << "k_pruned " << k_pruned << ", topk_group " << act.topk_group_new << ", flops_active " << act.flops << ", peak activation "
          << act.peak_mem << " bytes/token\n";
    if (!c.st.weights && !fs::exists(in_out(c.st, files::pruned_weights))) return;
    auto m = load_weights(pick(c.st.weights, c.st, {files::pruned_weights}, "weights"));
    if (static_cast<int>(act.k.size()) != m.config.n_layers) throw ValidationError("activation config does not match the model layers");
    m.config.layer_k = act.k;
    m.config.k = *std::max_element(act.k.begin(), act.k.end());
    m.config.topk_group = act.topk_group_new;
    m.config.validate();
    save_weights(m, in_out(c.st, files::adjusted_weights).string());
}

inline std::string stage_weights(const Settings& st) {
    return pick(st.weights, st, {files::adjusted_weights, files::pruned_weights, files::weights}, "weights");
}

inline void cmd_sense(Ctx& c) {
    const auto m = load_weights(stage_weights(c.st));
    const auto corpus = corpus_tokens(pick(c.st.corpus, c.st, {files::calib_corpus}, "corpus"));
    const auto man = m.manifest();
    const auto base = baseline_assignment(man, baseline_mode_from_string(c.st.baseline.value_or("rules")));
    SweepOptions opt;
    opt.jobs = c.st.jobs.value_or(0);
    const auto recs = sensitivity_sweep(m, base, corpus, default_q_high_rule(thresholds_for(c.st, man)), opt);
    write_text(in_out(c.st, files::records), records_to_csv(recs));
    c.out << recs.size() << " sensitivity records; ppl_low " << (recs.empty() ? 0.0 : recs.front().ppl_low) << "\n";
}

inline ModelManifest stage_manifest(const Settings& st) {
    if (st.manifest) return load_manifest_file(*st.manifest);
    return load_weights(stage_weights(st)).manifest();
}

inline void cmd_allocate(Ctx& c) {
    const auto man = stage_manifest(c.st);
    const auto recs = records_from_csv(read_file_bytes(pick(c.st.records, c.st, {files::records}, "records")));
    if (!c.st.mem_limit) throw UsageError("allocate needs --mem-limit");
    const auto limit = parse_mem_limit(*c.st.mem_limit, man);
    const auto base = baseline_assignment(man, baseline_mode_from_string(c.st.baseline.value_or("rules")));
    const auto plan = allocate(recs, base, limit, thresholds_for(c.st, man));
    write_json(in_out(c.st, files::alloc_plan), alloc_plan_to_json(plan));
    c.out << "final size " << plan.final_size << " bytes (" << gb(plan.final_size) << ") of limit " << limit << "; " << plan.actions.size()
          << " actions, " << plan.skipped.size() << " skipped\n";
    if (!plan.success) throw DomainError("allocation exceeds the memory limit");
}

inline void cmd_apply(Ctx& c) {
    const auto m = load_weights(stage_weights(c.st));
    const auto plan = alloc_plan_from_json(read_json(pick(c.st.plan, c.st, {files::alloc_plan}, "plan")));
    const auto q = quantize_model(m, apply_plan(m.manifest(), plan));
    save_quantized(q, in_out(c.st, files::quantized).string());
    c.out << "quantized payload " << q.payload_bytes() << " bytes\n";
}

struct EvalPoint {
    std::int64_t size_bytes = 0;
    double ppl = 0.0;
};

inline void record_eval(const Settings& st, const std::string& label, const EvalPoint& p) {
    const auto path = in_out(st, files::eval);
    nlohmann::json j = fs::exists(path) ? read_json(path.string()) : nlohmann::json::object();
    j[label] = {{"size_bytes", p.size_bytes}, {"ppl", p.ppl}};
    write_json(path, j);
}

/// PPL of a quantized model file, or of dense weights optionally viewed
/// through an allocation plan.
inline void cmd_eval(Ctx& c) {
    const auto corpus = corpus_tokens(pick(c.st.corpus, c.st, {files::eval_corpus}, "corpus"));
    EvalPoint p;
    std::string label = c.st.label.value_or("");
    if (c.st.quantized || (!c.st.weights && fs::exists(in_out(c.st, files::quantized)))) {
        const auto q = load_quantized(pick(c.st.quantized, c.st, {files::quantized}, "quantized model"));
        p.size_bytes = q.payload_bytes();
        p.ppl = perplexity(dequantize_model(q), corpus);
        if (label.empty()) label = "mixed";
    } else {
        const auto m = load_weights(stage_weights(c.st));
        p.size_bytes = 4 * m.param_count();
        p.ppl = perplexity(m, corpus);
        if (label.empty()) label = "f32";
    }
    record_eval(c.st, label, p);
    char buf[128];
    std::snprintf(buf, sizeof buf, "%s: ppl %.6f, %lld bytes\n", label.c_str(), p.ppl, static_cast<long long>(p.size_bytes));
    c.out << buf;
}

// ---------------------------------------------------------------------------
// Report

inline std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

/// Text report plus plotting CSVs. Missing artifacts are listed as absent and
/// make the command fail after writing whatever is available.
inline int emit_report(const Settings& st, std::ostream& log) {
    std::ostringstream r;
    std::vector<std::string> absent;
    r << "moesqueeze report\n=================\n\n";
    r << "Reference row: DeepSeek-V3 BF16 ~1.3TB -> 103GB target (reference, not reproduced)\n";
    r << "Scheme bpw values are stand-ins for llama.cpp formats (16-bit scale per 32-weight block); "
         "GB = bytes / 1e9. No importance-matrix weighting inside the codecs.\n\n";

    {
        const auto full = dsv3_shape_manifest();
        const auto plan = plan_prune(uniform_importance(full.moe_layers(), full.config.n_experts), st.ratio_v(), full.config.n_experts);
        const auto pm = apply_prune(full, plan);
        r << "Full-scale arithmetic (dsv3-shape manifest, no weights)\n";
        r << "  params: " << total_params(full) << " -> " << total_params(pm) << " at r=" << st.ratio_v() << " (" << plan.kept_per_layer
          << " experts/layer, k " << full.config.k_orig << " -> " << scale_activation(full.config.k_orig, st.ratio_v()) << ")\n";
        for (Scheme s : {Scheme::IQ1_M, Scheme::IQ1_S}) {
            ModelManifest u = pm;
            for (auto& t : u.tensors) t.scheme = s;
            r << "  uniform " << scheme_name(s) << ": " << model_size_bytes(u) << " bytes (" << gb(model_size_bytes(u)) << ")\n";
        }
        r << "\n";
    }

    const auto eval_path = in_out(st, files::eval);
    if (fs::exists(eval_path)) {
        const auto j = read_json(eval_path.string());
        std::string csv = "config,size_bytes,ppl\n";
        r << "Perplexity (held-out)\n";
        r << "  config           size_bytes         size_GB     ppl\n";
        for (const char* key : {"f32", "uniform_iq1m", "mixed"}) {
            if (!j.contains(key)) {
                r << "  " << key << ": absent\n";
                absent.push_back(std::string("eval.") + key);
                continue;
            }
            const auto sb = j[key].at("size_bytes").get<std::int64_t>();
            const auto ppl = j[key].at("ppl").get<double>();
            char line[160];
            std::snprintf(line, sizeof line, "  %-14s %12lld  %14.9f  %10.4f\n", key, static_cast<long long>(sb), to_gb(sb), ppl);
            r << line;
            csv += std::string(key) + "," + std::to_string(sb) + "," + format_real(ppl) + "\n";
        }
        write_text(in_out(st, files::size_ppl), csv);
        r << "\n";
    } else {
        r << "Perplexity: absent (no " << files::eval << ")\n\n";
        absent.emplace_back(files::eval);
    }

    const auto plan_path = in_out(st, files::alloc_plan);
    if (fs::exists(plan_path)) {
        const auto p = alloc_plan_from_json(read_json(plan_path.string()));
        const auto& L = p.ledger;
        std::map<std::string, int> by_reason;
        for (const auto& a : p.actions) by_reason[std::string(reason_name(a.reason))]++;
        r << "Allocation\n";
        r << "  M_limit " << L.m_limit << " (" << gb(L.m_limit) << "), S_low " << L.s_low << " (" << gb(L.s_low) << ")\n";
        r << "  B_base " << L.b_base << ", B_delta " << L.b_delta << ", B_total " << L.b_total << ", spent " << L.spent << "\n";
        r << "  final size " << p.final_size << " (" << gb(p.final_size) << "), " << (p.success ? "within" : "OVER") << " limit\n";
        r << "  actions:";
        for (const auto& [k, n] : by_reason) r << " " << k << "=" << n;
        r << ", skipped=" << p.skipped.size() << "\n\n";
    } else {
        r << "Allocation: absent (no " << files::alloc_plan << ")\n\n";
        absent.emplace_back(files::alloc_plan);
    }

    const auto stats_path = in_out(st, files::stats);
    bool fig2 = false;
    if (fs::exists(stats_path)) {
        try {
            const auto s = stats_from_csv(read_file_bytes(stats_path.string()));
            const auto rows = stats_summary(s);
            write_text(in_out(st, files::fig2), summary_to_csv(rows));
            r << "Expert activation counts (" << files::fig2 << ")\n";
            for (int l = 0; l < s.n_layers(); ++l) r << "  layer " << s.layers[static_cast<std::size_t>(l)] << ": max/min count " << fmt("%.3f", imbalance_ratio(s, l)) << "\n";
            r << "\n";
            fig2 = true;
        } catch (const Error& e) {
            log << "stats unusable: " << e.what() << "\n";
        }
    }
    if (!fig2) {
        r << "Expert activation counts: absent\n\n";
        absent.emplace_back(files::stats);
    }

    write_text(in_out(st, files::report), r.str());
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    char ts[32];
    std::strftime(ts, sizeof ts, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
    write_json(in_out(st, files::meta), {{"generated_at", ts}, {"version", MOESQ_VERSION}});
    for (const auto& a : absent) log << "absent: " << a << "\n";
    return absent.empty() ? kExitOk : kExitDomain;
}

/// gen -> train -> calib -> prune -> adjust -> sense -> allocate -> apply -> eval -> report.
inline int cmd_pipeline(Ctx& c) {
    Settings st = c.st;
    if (!st.mem_limit) st.mem_limit = "uniform";
    Ctx cc{st, c.out};
    cmd_gen(cc);
    cmd_train(cc);
    cmd_calib(cc);
    cmd_prune(cc);
    cmd_adjust(cc);
    cmd_sense(cc);
    cmd_allocate(cc);
    cmd_apply(cc);

    const auto m = load_weights(stage_weights(st));
    const auto eval = corpus_tokens(in_out(st, files::eval_corpus).string());
    const auto man = m.manifest();
    const auto uni = baseline_assignment(man, BaselineMode::uniform);
    record_eval(st, "f32", {4 * m.param_count(), perplexity(m, eval)});
    record_eval(st, "uniform_iq1m", {model_size_bytes(uni), assigned_ppl(m, uni, eval)});
    const auto q = load_quantized(in_out(st, files::quantized).string());
    record_eval(st, "mixed", {q.payload_bytes(), perplexity(dequantize_model(q), eval)});
    return emit_report(st, c.out);
}

// ---------------------------------------------------------------------------

inline int dispatch(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"moesqueeze: MoE compression by expert pruning, activation adjustment and mixed-precision allocation", "moesqueeze"};
    app.set_version_flag("--version", std::string("moesqueeze ") + MOESQ_VERSION);
    app.require_subcommand(1, 1);
    app.fallthrough();

    Settings st;
    app.add_option("--config", st.config, "JSON config mirroring the flags; flags win");
    app.add_option("--manifest", st.manifest, "manifest JSON");
    app.add_option("--corpus", st.corpus, "corpus file (raw bytes)");
    app.add_option("--alpha", st.alpha, "importance blend (default 0.5)");
    app.add_option("--ratio", st.ratio, "expert retention ratio r (default 0.75)");
    app.add_option("--mem-limit", st.mem_limit, "memory limit: bytes, 103GB style, or 'uniform'");
    app.add_option("--thresholds", st.thresholds, "size classes SMALL,MEDIUM in params");
    app.add_option("--seed", st.seed, "seed (default 42)");
    app.add_option("--out", st.out, "output directory (default .)");
    app.add_option("--jobs", st.jobs, "sensitivity workers (default MOESQ_JOBS or 1)");
    app.add_option("--weights", st.weights, "TMOE1 weights");
    app.add_option("--stats", st.stats, "calibration stats CSV");
    app.add_option("--records", st.records, "sensitivity records CSV");
    app.add_option("--plan", st.plan, "allocation plan JSON");
    app.add_option("--quantized", st.quantized, "TMOEQ1 quantized model");
    app.add_option("--preset", st.preset, "manifest preset: toy | dsv3-shape");
    app.add_option("--device", st.device, "device preset or profile JSON");
    app.add_option("--baseline", st.baseline, "baseline rules: rules | uniform | literal");
    app.add_option("--label", st.label, "eval label");
    app.add_option("--steps", st.steps, "training steps (default 500)");
    app.add_option("--lr", st.lr, "learning rate (default 0.2)");

    const std::vector<std::pair<const char*, const char*>> subs = {
        {"gen", "write a preset manifest (toy: also initial weights and corpora)"},
        {"train", "SGD-train weights on a corpus"},
        {"calib", "collect per-expert activation statistics"},
        {"prune", "rank experts and keep the top ceil(rE) per layer"},
        {"adjust", "scale k and fit per-layer activation to a device"},
        {"sense", "per-tensor sensitivity sweep"},
        {"allocate", "budgeted mixed-precision allocation with back-off"},
        {"apply", "quantize weights per an allocation plan"},
        {"eval", "perplexity of weights or a quantized model"},
        {"report", "text report and plotting CSVs"},
        {"pipeline", "run every stage in order"}};
    for (const auto& [name, desc] : subs) app.add_subcommand(name, desc);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForVersion& e) {
        out << e.what() << "\n";
        return kExitOk;
    } catch (const CLI::CallForHelp& e) {
        app.exit(e, out, err);
        return kExitOk;
    } catch (const CLI::Success&) {
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        app.exit(e, err, err);
        err << app.help();
        return kExitUsage;
    }

    try {
        if (st.config) merge_config(st, *st.config);
        validate_settings(st);
        Ctx c{st, out};
        const auto* sub = app.get_subcommands().front();
        const std::string name = sub->get_name();
        if (name == "gen") cmd_gen(c);
        else if (name == "train") cmd_train(c);
        else if (name == "calib") cmd_calib(c);
        else if (name == "prune") cmd_prune(c);
        else if (name == "adjust") cmd_adjust(c);
        else if (name == "sense") cmd_sense(c);
        else if (name == "allocate") cmd_allocate(c);
        else if (name == "apply") cmd_apply(c);
        else if (name == "eval") cmd_eval(c);
        else if (name == "report") return emit_report(st, err);
        else if (name == "pipeline") return cmd_pipeline(c);
        return kExitOk;
    } catch (const UsageError& e) {
        err << "usage error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const InfeasibleError& e) {
        err << "infeasible: " << e.what() << " [shortfall " << e.shortfall() << " bytes]\n";
        return kExitDomain;
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return kExitDomain;
    } catch (const std::filesystem::filesystem_error& e) {
        err << "error: " << e.what() << "\n";
        return kExitDomain;
    }
}

} // namespace moesq::cli
