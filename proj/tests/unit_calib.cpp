#include <gtest/gtest.h>

#include "fixtures.hpp"
#include "moesqueeze/calib.hpp"

using namespace moesq;

TEST(Calib, CountsConserveTokensTimesK) {
    const auto m = init_model<float>(ModelConfig::toy(5));
    const auto corpus = bytes_to_tokens(synthetic_corpus(500, 2));
    const auto s = collect_stats(m, corpus);
    EXPECT_EQ(s.token_total, 500);
    for (int li = 0; li < s.n_layers(); ++li) {
        std::int64_t sum = 0;
        for (auto c : s.count[static_cast<std::size_t>(li)]) sum += c;
        EXPECT_EQ(sum, 500 * 4);
    }
    const std::vector<int> k = {1, 2, 5, 8};
    const auto s2 = collect_stats(m, corpus, k);
    for (int li = 0; li < 4; ++li) {
        std::int64_t sum = 0;
        for (auto c : s2.count[static_cast<std::size_t>(li)]) sum += c;
        EXPECT_EQ(sum, 500 * k[static_cast<std::size_t>(li)]);
    }
}

TEST(Calib, FrequencyAndScoreRanges) {
    const auto m = init_model<float>(ModelConfig::toy(6));
    const auto s = collect_stats(m, bytes_to_tokens(synthetic_corpus(300, 3)));
    for (int li = 0; li < s.n_layers(); ++li)
        for (int e = 0; e < s.n_experts(); ++e) {
            EXPECT_GE(s.f(li, e), 0.0);
            EXPECT_LE(s.f(li, e), 1.0);
            EXPECT_GE(s.s_bar(li, e), 0.0);
            EXPECT_LE(s.s_bar(li, e), 1.0);
        }
}

TEST(Calib, ZeroRouterFollowsTieRule) {
    auto m = init_model<float>(ModelConfig::toy(6));
    for (int l = 0; l < 4; ++l) {
        auto& r = m.at(names::blk(l, "ffn_gate_inp")).data;
        std::fill(r.begin(), r.end(), 0.0f);
    }
    const auto s = collect_stats(m, bytes_to_tokens(synthetic_corpus(200, 3)));
    for (int li = 0; li < 4; ++li)
        for (int e = 0; e < 16; ++e) {
            EXPECT_EQ(s.f(li, e), e < 4 ? 1.0 : 0.0) << "layer " << li << " expert " << e;
            if (e < 4) EXPECT_NEAR(s.s_bar(li, e), 1.0 / 16.0, 1e-7);
        }
}

TEST(Calib, TrainedModelIsImbalanced) {
    const auto s = collect_stats(fixtures::trained_toy(0), fixtures::train_tokens());
    for (int li = 0; li < s.n_layers(); ++li) EXPECT_GT(imbalance_ratio(s, li), 1.5) << "layer " << li;
}

TEST(Calib, ShardsMergeToWhole) {
    const auto m = init_model<float>(ModelConfig::toy(7));
    const auto corpus = bytes_to_tokens(synthetic_corpus(640, 4));
    const std::span<const int> all(corpus);
    const auto whole = collect_stats(m, all);
    const auto merged = merge(collect_stats(m, all.first(256)), collect_stats(m, all.subspan(256)));
    EXPECT_EQ(merged.token_total, whole.token_total);
    EXPECT_EQ(merged.count, whole.count);
    for (std::size_t l = 0; l < whole.score_sum.size(); ++l)
        for (std::size_t e = 0; e < whole.score_sum[l].size(); ++e) EXPECT_NEAR(merged.score_sum[l][e], whole.score_sum[l][e], 1e-9);
}

TEST(Calib, SummaryCardinalityAndRoundTrip) {
    const auto s = collect_stats(init_model<float>(ModelConfig::toy(8)), bytes_to_tokens(synthetic_corpus(300, 5)));
    const auto rows = stats_summary(s);
    EXPECT_EQ(rows.size(), 4u * 16u);
    for (std::size_t i = 1; i < rows.size(); ++i)
        EXPECT_TRUE(std::pair(rows[i - 1].layer, rows[i - 1].expert) < std::pair(rows[i].layer, rows[i].expert));
    EXPECT_EQ(summary_from_csv(summary_to_csv(rows)), rows);
    EXPECT_EQ(stats_from_csv(stats_to_csv(s)), s);
}

TEST(Calib, EmptyStatsHaveNoSummary) {
    const auto s = ExpertStats::empty({0, 1}, 4);
    EXPECT_THROW(stats_summary(s), DomainError);
}

TEST(Calib, MalformedCsvRejected) {
    EXPECT_THROW(stats_from_csv("nonsense\n"), ParseError);
    EXPECT_THROW(stats_from_csv("layer,expert,count,score_sum,token_total\n0,0,x,0.5,10\n"), ParseError);
    EXPECT_THROW(summary_from_csv(""), ParseError);
}
