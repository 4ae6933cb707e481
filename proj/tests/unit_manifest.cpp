#include <gtest/gtest.h>

#include <json.hpp>

#include "moesqueeze/manifest.hpp"
#include "moesqueeze/qcodec.hpp"

using namespace moesq;

namespace {

ManifestConfig one_layer_four_experts() {
    ManifestConfig c;
    c.n_layers = 1;
    c.n_experts = 4;
    c.k_orig = 2;
    c.n_group = 2;
    c.topk_group = 1;
    return c;
}

// DeepSeek-V3 architecture constants, typed in by hand rather than read from
// the generator.
std::int64_t dsv3_param_oracle() {
    const std::int64_t d = 7168, vocab = 129280, ff = 2048, ff_dense = 18432, E = 256;
    const std::int64_t attn = d + 1536 + 512          // attn_norm, q_a_norm, kv_a_norm
                              + 1536 * d              // q down-projection
                              + 128 * 192 * 1536      // q up-projection, 128 heads of 128+64
                              + 576 * d               // kv down-projection incl. rope key
                              + 128 * 512 * 128 * 2   // k_b and v_b
                              + d * 128 * 128         // output
                              + d;                    // ffn_norm
    const std::int64_t dense_block = attn + 3 * d * ff_dense;
    const std::int64_t moe_block = attn + E * d + 3 * d * ff + E * 3 * d * ff;
    return 2 * vocab * d + d + 3 * dense_block + 58 * moe_block;
}

} // namespace

TEST(Manifest, MinimalRoundTrip) {
    const auto m = tinymoe_manifest(one_layer_four_experts());
    int gate = 0, up = 0, down = 0, router = 0, shared = 0, norms = 0;
    for (const auto& t : m.tensors) {
        gate += t.role == Role::routed_expert_gate;
        up += t.role == Role::routed_expert_up;
        down += t.role == Role::routed_expert_down;
        router += t.role == Role::router;
        shared += t.role == Role::shared_expert_ffn;
        norms += t.role == Role::norm;
    }
    EXPECT_EQ(gate, 4);
    EXPECT_EQ(up, 4);
    EXPECT_EQ(down, 4);
    EXPECT_EQ(router, 1);
    EXPECT_EQ(shared, 3);
    EXPECT_EQ(norms, 3);

    const auto back = load_manifest(serialize_manifest(m));
    ASSERT_EQ(back.tensors.size(), m.tensors.size());
    for (std::size_t i = 0; i < m.tensors.size(); ++i) EXPECT_EQ(back.tensors[i], m.tensors[i]) << m.tensors[i].name;
    EXPECT_EQ(serialize_manifest(back), serialize_manifest(m));
}

TEST(Manifest, DuplicateNameRejected) {
    auto j = manifest_to_json(tinymoe_manifest(one_layer_four_experts()));
    j["tensors"].push_back(j["tensors"][1]);
    EXPECT_THROW(load_manifest(j.dump()), ValidationError);
}

TEST(Manifest, CountMismatchRejected) {
    auto j = manifest_to_json(tinymoe_manifest(one_layer_four_experts()));
    j["tensors"][0]["count"] = 7;
    EXPECT_THROW(load_manifest(j.dump()), ValidationError);
}

TEST(Manifest, RoutedRoleRequiresExpert) {
    auto j = manifest_to_json(tinymoe_manifest(one_layer_four_experts()));
    for (auto& t : j["tensors"])
        if (t["role"] == "routed_expert_gate") {
            t["expert"] = "NONE";
            break;
        }
    EXPECT_THROW(load_manifest(j.dump()), ValidationError);
}

TEST(Manifest, GroupsMustDivideExperts) {
    auto c = one_layer_four_experts();
    c.n_group = 3;
    c.topk_group = 1;
    EXPECT_THROW(tinymoe_manifest(c), ValidationError);
}

TEST(Manifest, MalformedTextIsParseError) { EXPECT_THROW(load_manifest("{\"config\": "), ParseError); }

TEST(Manifest, CountIsShapeProductAndRolesMatchExperts) {
    for (const auto& m : {generate_manifest("toy"), generate_manifest("dsv3-shape")})
        for (const auto& t : m.tensors) {
            std::int64_t p = 1;
            for (auto d : t.shape) p *= d;
            ASSERT_EQ(t.count, p) << t.name;
            ASSERT_EQ(is_routed(t.role), t.expert.has_value()) << t.name;
        }
}

TEST(Manifest, DsvShapeTotalMatchesHandCount) {
    const auto m = dsv3_shape_manifest();
    const auto total = total_params(m);
    EXPECT_EQ(total, dsv3_param_oracle());
    EXPECT_NEAR(static_cast<double>(total), 671e9, 0.02 * 671e9);
    EXPECT_EQ(m.moe_layers().size(), 58u);
}

TEST(Manifest, TotalParamsFilters) {
    const auto m = generate_manifest("toy");
    std::int64_t all = 0, routed = 0, layer2 = 0, global = 0;
    for (const auto& t : m.tensors) {
        all += t.count;
        if (t.role == Role::routed_expert_gate || t.role == Role::routed_expert_up || t.role == Role::routed_expert_down) routed += t.count;
        if (t.layer == 2) layer2 += t.count;
        if (!t.layer) global += t.count;
    }
    EXPECT_EQ(total_params(m), all);
    EXPECT_EQ(total_params(m, filters::routed), routed);
    EXPECT_EQ(total_params(m, filters::negate(filters::routed)), all - routed);
    EXPECT_EQ(total_params(m, filters::layer(2)), layer2);
    EXPECT_EQ(total_params(m, filters::layer(std::nullopt)), global);
    // 4 layers x 16 experts x 3 tensors of 64x256
    EXPECT_EQ(routed, 4 * 16 * 3 * 64 * 256);
}

TEST(Manifest, SizeArithmetic) {
    EXPECT_EQ(size_bytes(32, Scheme::Q8), 34);
    EXPECT_DOUBLE_EQ(SchemeTable::builtin().bpw(Scheme::Q8), 8.5);
    EXPECT_DOUBLE_EQ(SchemeTable::builtin().bpw(Scheme::IQ1_S), 1.5625);
    EXPECT_DOUBLE_EQ(SchemeTable::builtin().bpw(Scheme::IQ1_M), 1.75);

    // 508e9 params at 1.5625 bpw = 508e9 * 25 / 128 bytes
    const std::int64_t p = 508'000'000'000LL;
    EXPECT_EQ(size_bytes(p, Scheme::IQ1_S), p * 25 / 128);
    EXPECT_EQ(size_bytes(p, Scheme::IQ1_S), 99'218'750'000LL);
    EXPECT_NEAR(to_gb(size_bytes(p, Scheme::IQ1_S)), 99.21, 0.01);

    auto m = generate_manifest("toy");
    for (auto& t : m.tensors) t.scheme = Scheme::F32;
    EXPECT_EQ(model_size_bytes(m), 4 * total_params(m));
}

TEST(Manifest, SizeIsCeilOfBits) {
    // bits per 32-weight block, in ladder order
    const std::int64_t block_bits[] = {50, 56, 80, 112, 144, 176, 208, 272, 1024};
    for (std::size_t i = 0; i < kAllSchemes.size(); ++i)
        for (std::int64_t n : {0, 1, 7, 31, 32, 33, 1000, 4097})
            EXPECT_EQ(size_bytes(n, kAllSchemes[i]), (n * block_bits[i] + 255) / 256) << scheme_name(kAllSchemes[i]) << " n=" << n;
}

TEST(Manifest, LadderStrictlyOrdered) {
    const auto& tab = SchemeTable::builtin();
    for (std::size_t i = 1; i < kAllSchemes.size(); ++i) {
        EXPECT_LT(ladder_rank(kAllSchemes[i - 1]), ladder_rank(kAllSchemes[i]));
        EXPECT_LT(tab.bpw(kAllSchemes[i - 1]), tab.bpw(kAllSchemes[i]));
    }
}

TEST(Manifest, SchemeTableJsonRoundTripAndValidation) {
    const auto j = SchemeTable::builtin().to_json();
    const auto t = SchemeTable::from_json(j);
    for (Scheme s : kAllSchemes) EXPECT_EQ(t.block_bits(s), SchemeTable::builtin().block_bits(s));
    auto bad = j;
    bad["Q4"] = 9.0; // above Q5
    EXPECT_THROW(SchemeTable::from_json(bad), Error);
}
