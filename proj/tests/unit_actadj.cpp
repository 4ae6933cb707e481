#include <gtest/gtest.h>

#include "fixtures.hpp"
#include "moesqueeze/actadj.hpp"

using namespace moesq;

TEST(ActAdj, ScaleActivation) {
    EXPECT_EQ(scale_activation(8, 0.75), 6);
    EXPECT_EQ(scale_activation(8, 1.0), 8);
    EXPECT_EQ(scale_activation(3, 0.5), 2);
    EXPECT_EQ(scale_activation(4, 0.75), 3);
    EXPECT_THROW(scale_activation(0, 0.5), ValidationError);
    EXPECT_THROW(scale_activation(8, 1.5), ValidationError);
}

TEST(ActAdj, FlopsArithmetic) {
    EXPECT_EQ(flops_active({3, 3}, {100, 100}), 1200);
    EXPECT_EQ(flops_active({0, 0}, {100, 100}), 0);
    EXPECT_THROW(flops_active({1}, {1, 2}), ValidationError);
}

TEST(ActAdj, FlopsMatchInstrumentedMacs) {
    const auto m = fixtures::trained_toy(0);
    const std::vector<int> k = {4, 3, 3, 2};
    const auto toks = std::span<const int>(fixtures::eval_tokens()).first(64);
    ForwardProbe probe;
    forward(m, toks, std::span<const int>(k), static_cast<ForwardCache<float>*>(nullptr), &probe);
    const auto man = m.manifest();
    std::vector<std::int64_t> P;
    for (int l : man.moe_layers()) P.push_back(single_expert_params(man, l));
    const double estimate = static_cast<double>(flops_active(k, P)) * static_cast<double>(toks.size());
    const double counted = 2.0 * static_cast<double>(probe.expert_macs);
    EXPECT_NEAR(counted / estimate, 1.0, 0.05);
}

TEST(ActAdj, PeakMemoryShape) {
    const std::int64_t d = 64, ff = 256;
    const auto full = activation_peak_mem(d, ff, {4, 4, 4});
    const auto half = activation_peak_mem(d, ff, {2, 2, 2});
    const auto base = 4 * kLiveModelBuffers * d;
    EXPECT_EQ(full - base, 2 * (half - base));
    EXPECT_EQ(activation_peak_mem(d, 0, {4, 4}), 4 * kLiveModelBuffers * d);
    EXPECT_EQ(activation_peak_mem(d, ff, {1, 4, 2}), 4 * (kLiveModelBuffers * d + 4 * ff));
}

TEST(ActAdj, ProbeHighWaterCoversExpertTerm) {
    const auto m = init_model<float>(ModelConfig::toy(5));
    const auto toks = bytes_to_tokens("peak memory probe");
    ForwardProbe probe;
    forward(m, std::span<const int>(toks), std::span<const int>{}, static_cast<ForwardCache<float>*>(nullptr), &probe);
    const std::int64_t expert_term = 4LL * m.config.k * m.config.d_ff;
    EXPECT_GE(probe.peak_bytes, expert_term);
    EXPECT_EQ(probe.live_bytes, 0);
}

TEST(ActAdj, FitAmpleBudget) {
    const auto man = generate_manifest("toy");
    const auto a = fit_to_device(device_preset("strix-halo-128gb"), man, 3);
    EXPECT_EQ(a.k, (std::vector<int>{3, 3, 3, 3}));
    EXPECT_EQ(a.peak_mem, activation_peak_mem(64, 256, a.k));
}

TEST(ActAdj, FitFlopsBudgetInverts) {
    const auto man = generate_manifest("toy");
    const std::int64_t P = 3 * 64 * 256;
    DeviceProfile p{"tight", 1'000'000'000, 2 * 3 * P * 4};
    const auto a = fit_to_device(p, man, 4);
    EXPECT_EQ(a.k, (std::vector<int>{3, 3, 3, 3}));
    EXPECT_EQ(a.flops, 2 * 3 * P * 4);
    // room for one more expert in one layer: the lowest layer gets it
    p.flops_per_token_budget = 2 * 3 * P * 4 + 2 * P;
    EXPECT_EQ(fit_to_device(p, man, 4).k, (std::vector<int>{4, 3, 3, 3}));
}

TEST(ActAdj, FitInfeasible) {
    const auto man = generate_manifest("toy");
    DeviceProfile flops{"f", 1'000'000'000, 10};
    EXPECT_THROW(fit_to_device(flops, man, 3), InfeasibleError);
    DeviceProfile mem{"m", 100, std::nullopt};
    try {
        fit_to_device(mem, man, 3);
        FAIL() << "expected InfeasibleError";
    } catch (const InfeasibleError& e) {
        EXPECT_EQ(e.shortfall(), activation_peak_mem(64, 256, {1, 1, 1, 1}) - 100);
    }
}

TEST(ActAdj, TopkGroupCoversK) {
    auto man = generate_manifest("toy"); // 4 groups of 4, 2 selected
    const auto a = fit_to_device(device_preset("strix-halo-128gb"), man, 12);
    EXPECT_EQ(a.k.front(), 12);
    EXPECT_EQ(a.topk_group_new, 3);
    EXPECT_EQ(fit_to_device(device_preset("strix-halo-128gb"), man, 3).topk_group_new, 2);
}

TEST(ActAdj, ProfileJson) {
    const auto p = device_preset("strix-halo-128gb");
    EXPECT_EQ(p.mem_limit_bytes, 128'000'000'000LL);
    const auto back = profile_from_json(profile_to_json(p));
    EXPECT_EQ(back.mem_limit_bytes, p.mem_limit_bytes);
    EXPECT_FALSE(back.flops_per_token_budget.has_value());
    EXPECT_THROW(profile_from_json(nlohmann::json{{"mem_limit_bytes", -1}}), Error);
    EXPECT_THROW(device_preset("nope"), ValidationError);
}
