#include <gtest/gtest.h>

#include "fixtures.hpp"
#include "moesqueeze/sense.hpp"

using namespace moesq;

namespace {

TensorSpec spec(std::string name, std::optional<int> layer, std::int64_t n, Role role = Role::attn_other) {
    TensorSpec t;
    t.name = std::move(name);
    t.layer = layer;
    t.role = role;
    t.shape = {n};
    t.count = n;
    return t;
}

ModelManifest hand_manifest(std::vector<TensorSpec> ts) {
    ModelManifest m;
    m.tensors = std::move(ts);
    m.reindex();
    return m;
}

} // namespace

TEST(Sense, RhoDefinition) {
    const auto m = hand_manifest({spec("a", 0, 50), spec("b", 0, 30), spec("c", 0, 20), spec("solo", 1, 7), spec("g", std::nullopt, 93)});
    EXPECT_DOUBLE_EQ(rho(m.at("a"), m), 0.5);
    EXPECT_DOUBLE_EQ(rho(m.at("solo"), m), 1.0);
    EXPECT_DOUBLE_EQ(rho(m.at("g"), m), 93.0 / 200.0);
}

TEST(Sense, RhoGlobalAgainstWholeModel) {
    const auto m = generate_manifest("toy");
    std::int64_t sum = 0;
    for (const auto& t : m.tensors) sum += t.count;
    const auto& e = m.at(std::string(names::token_embd));
    EXPECT_DOUBLE_EQ(rho(e, m), static_cast<double>(e.count) / static_cast<double>(sum));
}

TEST(Sense, SensitivityArithmetic) {
    EXPECT_DOUBLE_EQ(sensitivity(10.0, 9.5, 0.25), 2.0);
    EXPECT_EQ(sensitivity(7.0, 7.0, 0.1), 0.0);
    EXPECT_THROW(sensitivity(1, 1, 0.0), ValidationError);
}

TEST(Sense, F32BaselineIsIdentityView) {
    const auto m = init_model<float>(ModelConfig::toy(12));
    const auto corpus = bytes_to_tokens(synthetic_corpus(400, 8));
    EXPECT_EQ(baseline_ppl(m, all_f32(m.manifest()), corpus), perplexity(m, corpus));
}

TEST(Sense, QuantizedBaselineHurtsTrainedModel) {
    const auto m = fixtures::trained_toy(0);
    const auto& corpus = fixtures::eval_tokens();
    const double f32 = perplexity(m, corpus);
    const auto base = baseline_assignment(m.manifest());
    const double low = baseline_ppl(m, base, corpus);
    EXPECT_GT(low, f32);
    EXPECT_EQ(baseline_ppl(m, base, corpus), low);
}

TEST(Sense, BaselineRules) {
    const auto b = baseline_assignment(generate_manifest("toy"));
    EXPECT_EQ(b.at(names::blk(1, "attn_norm")).scheme, Scheme::F32);
    EXPECT_EQ(b.at(names::blk(1, "attn_k_b")).scheme, Scheme::Q8);
    EXPECT_EQ(b.at(names::blk(1, "attn_v_b")).scheme, Scheme::Q8);
    EXPECT_EQ(b.at(std::string(names::token_embd)).scheme, Scheme::Q8);
    EXPECT_EQ(b.at(std::string(names::output)).scheme, Scheme::Q8);
    EXPECT_EQ(b.at(names::blk(1, "attn_q")).scheme, Scheme::IQ1_M);
    EXPECT_EQ(b.at(names::expert(1, "ffn_down", 3)).scheme, Scheme::IQ1_M);
    const auto u = baseline_assignment(generate_manifest("toy"), BaselineMode::uniform);
    EXPECT_EQ(u.at(names::blk(1, "attn_norm")).scheme, Scheme::F32);
    EXPECT_EQ(u.at(std::string(names::output)).scheme, Scheme::IQ1_M);
    const auto l = baseline_assignment(generate_manifest("toy"), BaselineMode::literal);
    for (const auto& t : l.tensors) EXPECT_EQ(t.scheme, Scheme::IQ1_M);
}

TEST(Sense, ZeroTensorUpgradeHasZeroSensitivity) {
    auto m = init_model<float>(ModelConfig::toy(13));
    auto& q = m.at(names::blk(2, "attn_q")).data;
    std::fill(q.begin(), q.end(), 0.0f);
    const auto corpus = bytes_to_tokens(synthetic_corpus(300, 9));
    const auto r = measure_sensitivity(m, baseline_assignment(m.manifest()), corpus, names::blk(2, "attn_q"), Scheme::Q8);
    EXPECT_EQ(r.ppl_high, r.ppl_low);
    EXPECT_EQ(r.sens, 0.0);
}

TEST(Sense, IneligibleProbeRejected) {
    const auto m = init_model<float>(ModelConfig::toy(13));
    const auto corpus = bytes_to_tokens(synthetic_corpus(100, 9));
    EXPECT_THROW(measure_sensitivity(m, baseline_assignment(m.manifest()), corpus, names::blk(0, "attn_k_b"), Scheme::Q8), ValidationError);
}

TEST(Sense, SweepCardinalityAndOrder) {
    const auto m = init_model<float>(ModelConfig::toy(14));
    const auto corpus = bytes_to_tokens(synthetic_corpus(200, 10));
    const auto base = baseline_assignment(m.manifest());
    const auto th = Thresholds::toy();
    std::size_t eligible = 0;
    for (const auto& t : base.tensors) {
        if (is_routed(t.role)) continue;
        const Scheme q = t.count < th.small ? Scheme::Q8 : Scheme::Q4;
        eligible += ladder_rank(t.scheme) < ladder_rank(q);
    }
    const auto recs = sensitivity_sweep(m, base, corpus, default_q_high_rule(th));
    EXPECT_EQ(recs.size(), eligible);
    EXPECT_EQ(eligible, 4u * 6u); // attn_q, attn_output, router, 3 shared per layer
    for (std::size_t i = 1; i < recs.size(); ++i)
        EXPECT_TRUE(recs[i - 1].sens > recs[i].sens || (recs[i - 1].sens == recs[i].sens && recs[i - 1].tensor < recs[i].tensor));
    for (const auto& r : recs) EXPECT_EQ(r.q_high, base.at(r.tensor).count < th.small ? Scheme::Q8 : Scheme::Q4);
}

TEST(Sense, SerialAndParallelSweepsIdentical) {
    const auto m = init_model<float>(ModelConfig::toy(15));
    const auto corpus = bytes_to_tokens(synthetic_corpus(200, 11));
    const auto base = baseline_assignment(m.manifest());
    SweepOptions one, four;
    one.jobs = 1;
    four.jobs = 4;
    const auto rule = default_q_high_rule(Thresholds::toy());
    EXPECT_EQ(records_to_csv(sensitivity_sweep(m, base, corpus, rule, one)), records_to_csv(sensitivity_sweep(m, base, corpus, rule, four)));
}

TEST(Sense, ConstantOutputOrdersByName) {
    auto m = init_model<float>(ModelConfig::toy(16));
    auto& out = m.at(std::string(names::output)).data;
    std::fill(out.begin(), out.end(), 0.0f);
    const auto corpus = bytes_to_tokens(synthetic_corpus(150, 12));
    const auto recs = sensitivity_sweep(m, baseline_assignment(m.manifest()), corpus, default_q_high_rule(Thresholds::toy()));
    ASSERT_FALSE(recs.empty());
    for (std::size_t i = 0; i < recs.size(); ++i) {
        EXPECT_EQ(recs[i].sens, 0.0);
        if (i) EXPECT_LT(recs[i - 1].tensor, recs[i].tensor);
    }
}

TEST(Sense, RecordsCsvRoundTrip) {
    const std::vector<SensitivityRecord> rs = {{"blk.0.attn_q.weight", Scheme::Q8, 12.5, 12.25, 0.01, 25.0},
                                               {"blk.1.ffn_up_shexp.weight", Scheme::Q4, 12.5, 12.4999999999, 0.07, 1e-9}};
    EXPECT_EQ(records_from_csv(records_to_csv(rs)), rs);
    EXPECT_THROW(records_from_csv("bad header\n"), ParseError);
}

TEST(Sense, UsageTracksSensitivity) {
    int wins = 0;
    for (int s = 0; s < 5; ++s) {
        const auto m = fixtures::trained_toy(s);
        const auto& corpus = fixtures::calib_tokens();
        const auto stats = collect_stats(m, corpus);
        // most- and least-used expert over all layers
        int best_l = 0, best_e = 0, worst_l = 0, worst_e = 0; // row indices into stats
        for (int l = 0; l < stats.n_layers(); ++l)
            for (int e = 0; e < stats.n_experts(); ++e) {
                const auto c = stats.count[static_cast<std::size_t>(l)][static_cast<std::size_t>(e)];
                if (c > stats.count[static_cast<std::size_t>(best_l)][static_cast<std::size_t>(best_e)]) best_l = l, best_e = e;
                if (c < stats.count[static_cast<std::size_t>(worst_l)][static_cast<std::size_t>(worst_e)]) worst_l = l, worst_e = e;
            }
        const SenseContext ctx(m, baseline_assignment(m.manifest()), corpus);
        const auto hi = ctx.measure(names::expert(stats.layers[static_cast<std::size_t>(best_l)], "ffn_gate", best_e), Scheme::Q4);
        const auto lo = ctx.measure(names::expert(stats.layers[static_cast<std::size_t>(worst_l)], "ffn_gate", worst_e), Scheme::Q4);
        wins += hi.sens > lo.sens;
    }
    EXPECT_GE(wins, 4);
}
