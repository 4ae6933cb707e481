// SPDX-License-Identifier: Apache-2.0
#pragma once

// Per-(layer, expert) activation counts and cumulative routing scores over a
// calibration corpus.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "moesqueeze/tinymoe.hpp"

namespace moesq {

struct ExpertStats {
    std::int64_t token_total = 0;
    std::vector<int> layers;                        // block index per row of the tables below
    std::vector<std::vector<std::int64_t>> count;   // [layer][expert]
    std::vector<std::vector<double>> score_sum;     // [layer][expert]

    [[nodiscard]] int n_layers() const { return static_cast<int>(layers.size()); }
    [[nodiscard]] int n_experts() const { return count.empty() ? 0 : static_cast<int>(count.front().size()); }

    // Activation frequency per calibration token (so it can reach 1).
    [[nodiscard]] double f(int li, int e) const {
        if (token_total == 0) return 0.0;
        return static_cast<double>(count[static_cast<std::size_t>(li)][static_cast<std::size_t>(e)]) / static_cast<double>(token_total);
    }
    // Mean gate score when selected; 0 for experts that never fired.
    [[nodiscard]] double s_bar(int li, int e) const {
        const auto c = count[static_cast<std::size_t>(li)][static_cast<std::size_t>(e)];
        return c == 0 ? 0.0 : score_sum[static_cast<std::size_t>(li)][static_cast<std::size_t>(e)] / static_cast<double>(c);
    }

    static ExpertStats empty(std::vector<int> layers, int n_experts) {
        ExpertStats s;
        s.layers = std::move(layers);
        s.count.assign(s.layers.size(), std::vector<std::int64_t>(static_cast<std::size_t>(n_experts), 0));
        s.score_sum.assign(s.layers.size(), std::vector<double>(static_cast<std::size_t>(n_experts), 0.0));
        return s;
    }

    friend bool operator==(const ExpertStats&, const ExpertStats&) = default;
};

/// Counts and score sums are additive, so shards can be collected separately.
inline ExpertStats merge(const ExpertStats& a, const ExpertStats& b) {
    if (a.layers != b.layers || a.n_experts() != b.n_experts()) throw ValidationError("merge: stats dimensions differ");
    ExpertStats out = a;
    out.token_total += b.token_total;
    for (std::size_t l = 0; l < out.layers.size(); ++l)
        for (std::size_t e = 0; e < out.count[l].size(); ++e) {
            out.count[l][e] += b.count[l][e];
            out.score_sum[l][e] += b.score_sum[l][e];
        }
    return out;
}

/// Routes the corpus in consecutive non-overlapping chunks of the model's
/// context so every token is counted exactly once.
inline ExpertStats collect_stats(const Model<float>& model, std::span<const int> corpus, std::span<const int> k_overrides = {}) {
    if (corpus.size() < 2) throw ValidationError("collect_stats: corpus needs at least 2 tokens");
    const auto& c = model.config;
    std::vector<int> layers(static_cast<std::size_t>(c.n_layers));
    std::iota(layers.begin(), layers.end(), 0);
    auto stats = ExpertStats::empty(layers, c.n_experts);
    const auto ctx = static_cast<std::size_t>(c.context);
    for (std::size_t start = 0; start < corpus.size(); start += ctx) {
        auto chunk = corpus.subspan(start, std::min(ctx, corpus.size() - start));
        auto fr = forward(model, chunk, k_overrides);
        for (std::size_t l = 0; l < fr.trace.layers.size(); ++l) {
            const auto& lr = fr.trace.layers[l];
            for (std::size_t i = 0; i < lr.experts.size(); ++i) {
                const auto e = static_cast<std::size_t>(lr.experts[i]);
                stats.count[l][e] += 1;
                stats.score_sum[l][e] += static_cast<double>(lr.scores[i]);
            }
        }
        stats.token_total += static_cast<std::int64_t>(chunk.size());
    }
    return stats;
}

// ---------------------------------------------------------------------------
// CSV

inline std::string format_real(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::string stats_to_csv(const ExpertStats& s) {
    std::string out = "layer,expert,count,score_sum,token_total\n";
    for (std::size_t l = 0; l < s.layers.size(); ++l)
        for (std::size_t e = 0; e < s.count[l].size(); ++e)
            out += std::to_string(s.layers[l]) + "," + std::to_string(e) + "," + std::to_string(s.count[l][e]) + "," +
                   format_real(s.score_sum[l][e]) + "," + std::to_string(s.token_total) + "\n";
    return out;
}

namespace detail {
inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (!line.empty() && line.back() == ',') f.emplace_back();
    return f;
}

inline std::int64_t parse_int(const std::string& s, const char* what) {
    std::size_t pos = 0;
    std::int64_t v = 0;
    try {
        v = std::stoll(s, &pos);
    } catch (const std::exception&) {
        pos = 0;
    }
    if (pos == 0 || pos != s.size()) throw ParseError(std::string("bad integer for ") + what + ": '" + s + "'");
    return v;
}

inline double parse_real(const std::string& s, const char* what) {
    std::size_t pos = 0;
    double v = 0;
    try {
        v = std::stod(s, &pos);
    } catch (const std::exception&) {
        pos = 0;
    }
    if (pos == 0 || pos != s.size()) throw ParseError(std::string("bad number for ") + what + ": '" + s + "'");
    return v;
}
} // namespace detail

/// Parses the stats CSV. Row order is irrelevant; every (layer, expert) pair
/// must appear exactly once and token_total must agree across rows.
inline ExpertStats stats_from_csv(std::string_view text) {
    std::stringstream in{std::string(text)};
    std::string line;
    if (!std::getline(in, line) || line != "layer,expert,count,score_sum,token_total")
        throw ParseError("stats CSV: missing or wrong header");
    struct Row {
        int layer, expert;
        std::int64_t count;
        double score;
    };
    std::vector<Row> rows;
    std::optional<std::int64_t> total;
    std::set<int> layer_set;
    int max_expert = -1;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto f = detail::split_csv_line(line);
        if (f.size() != 5) throw ParseError("stats CSV: expected 5 fields in '" + line + "'");
        Row r{static_cast<int>(detail::parse_int(f[0], "layer")), static_cast<int>(detail::parse_int(f[1], "expert")),
              detail::parse_int(f[2], "count"), detail::parse_real(f[3], "score_sum")};
        const auto tt = detail::parse_int(f[4], "token_total");
        if (total && *total != tt) throw ValidationError("stats CSV: inconsistent token_total");
        total = tt;
        if (r.layer < 0 || r.expert < 0 || r.count < 0) throw ValidationError("stats CSV: negative field");
        layer_set.insert(r.layer);
        max_expert = std::max(max_expert, r.expert);
        rows.push_back(r);
    }
    if (rows.empty()) throw DomainError("stats CSV: no calibration data");
    auto s = ExpertStats::empty({layer_set.begin(), layer_set.end()}, max_expert + 1);
    s.token_total = *total;
    std::vector<std::vector<bool>> seen(s.layers.size(), std::vector<bool>(static_cast<std::size_t>(max_expert + 1), false));
    for (const auto& r : rows) {
        const auto li = static_cast<std::size_t>(std::lower_bound(s.layers.begin(), s.layers.end(), r.layer) - s.layers.begin());
        const auto e = static_cast<std::size_t>(r.expert);
        if (seen[li][e]) throw ValidationError("stats CSV: duplicate row for layer " + std::to_string(r.layer));
        seen[li][e] = true;
        s.count[li][e] = r.count;
        s.score_sum[li][e] = r.score;
    }
    for (const auto& l : seen)
        for (bool b : l)
            if (!b) throw ValidationError("stats CSV: missing (layer, expert) rows");
    return s;
}

struct SummaryRow {
    int layer = 0;
    int expert = 0;
    std::int64_t count = 0;
    double score_sum = 0.0;
    double f = 0.0;
    double s_bar = 0.0;
    friend bool operator==(const SummaryRow&, const SummaryRow&) = default;
};

/// One row per (layer, expert), sorted by layer then expert.
inline std::vector<SummaryRow> stats_summary(const ExpertStats& s) {
    if (s.token_total == 0) throw DomainError("no calibration data (token_total = 0)");
    std::vector<SummaryRow> rows;
    for (int li = 0; li < s.n_layers(); ++li)
        for (int e = 0; e < s.n_experts(); ++e)
            rows.push_back({s.layers[static_cast<std::size_t>(li)], e, s.count[static_cast<std::size_t>(li)][static_cast<std::size_t>(e)],
                            s.score_sum[static_cast<std::size_t>(li)][static_cast<std::size_t>(e)], s.f(li, e), s.s_bar(li, e)});
    return rows;
}

inline std::string summary_to_csv(const std::vector<SummaryRow>& rows) {
    std::string out = "layer,expert,count,cumulative_score,f,s_bar\n";
    for (const auto& r : rows)
        out += std::to_string(r.layer) + "," + std::to_string(r.expert) + "," + std::to_string(r.count) + "," + format_real(r.score_sum) +
               "," + format_real(r.f) + "," + format_real(r.s_bar) + "\n";
    return out;
}

inline std::vector<SummaryRow> summary_from_csv(std::string_view text) {
    std::stringstream in{std::string(text)};
    std::string line;
    if (!std::getline(in, line) || line != "layer,expert,count,cumulative_score,f,s_bar")
        throw ParseError("summary CSV: missing or wrong header");
    std::vector<SummaryRow> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto f = detail::split_csv_line(line);
        if (f.size() != 6) throw ParseError("summary CSV: expected 6 fields");
        rows.push_back({static_cast<int>(detail::parse_int(f[0], "layer")), static_cast<int>(detail::parse_int(f[1], "expert")),
                        detail::parse_int(f[2], "count"), detail::parse_real(f[3], "cumulative_score"), detail::parse_real(f[4], "f"),
                        detail::parse_real(f[5], "s_bar")});
    }
    return rows;
}

/// max/min activation count within one layer (infinite if an expert never fired).
inline double imbalance_ratio(const ExpertStats& s, int li) {
    const auto& c = s.count[static_cast<std::size_t>(li)];
    const auto [lo, hi] = std::minmax_element(c.begin(), c.end());
    if (*lo == 0) return std::numeric_limits<double>::infinity();
    return static_cast<double>(*hi) / static_cast<double>(*lo);
}

} // namespace moesq
