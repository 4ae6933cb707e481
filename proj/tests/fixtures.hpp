#pragma once

// Shared corpora, the on-disk cache of trained toy models, and independent
// oracles used by both the unit suite and the acceptance binary.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <unistd.h>

#include "moesqueeze/calib.hpp"
#include "moesqueeze/corpus.hpp"
#include "moesqueeze/model_io.hpp"
#include "moesqueeze/prune.hpp"
#include "moesqueeze/tinymoe.hpp"
#include "moesqueeze/train.hpp"

#ifndef MOESQ_TEST_CACHE
#define MOESQ_TEST_CACHE "."
#endif

namespace moesq::fixtures {

inline const std::vector<int>& train_tokens() {
    static const auto t = bytes_to_tokens(synthetic_corpus(65536, 11));
    return t;
}
inline const std::vector<int>& calib_tokens() {
    static const auto t = bytes_to_tokens(synthetic_corpus(4096, 23));
    return t;
}
inline const std::vector<int>& eval_tokens() {
    static const auto t = bytes_to_tokens(synthetic_corpus(4096, 99));
    return t;
}

inline constexpr int kTrainSteps = 500;
inline constexpr double kTrainLr = 0.2;

/// Toy model for seed index s, trained 500 steps. Training takes ~20 s, so
/// results are cached in the build tree (written to a temp name, then renamed).
inline Model<float> trained_toy(int s = 0) {
    namespace fs = std::filesystem;
    const fs::path dir = MOESQ_TEST_CACHE;
    const auto path = dir / ("toy_s" + std::to_string(s) + "_n" + std::to_string(kTrainSteps) + ".tmoe");
    if (fs::exists(path)) return load_weights(path.string());
    TrainOptions opt;
    opt.steps = kTrainSteps;
    opt.lr = kTrainLr;
    opt.seed = 200 + static_cast<std::uint64_t>(s);
    auto m = train(init_model<float>(ModelConfig::toy(100 + static_cast<std::uint64_t>(s))), train_tokens(), opt);
    fs::create_directories(dir);
    const auto tmp = path.string() + ".tmp" + std::to_string(::getpid());
    save_weights(m, tmp);
    fs::rename(tmp, path);
    return m;
}

/// Perplexity recomputed without corpus_nll/nll_of_logits: every transition
/// i -> i+1 is scored once from a window ending at or after i+1, with a
/// long-double log-sum-exp.
inline double oracle_perplexity(const Model<float>& m, const std::vector<int>& corpus) {
    const std::size_t ctx = static_cast<std::size_t>(m.config.context);
    const auto V = static_cast<std::size_t>(m.config.vocab);
    long double nll = 0;
    std::size_t n = 0, pos = 0;
    while (pos + 1 < corpus.size()) {
        const std::size_t len = std::min(ctx, corpus.size() - pos);
        std::vector<int> seq(corpus.begin() + static_cast<std::ptrdiff_t>(pos), corpus.begin() + static_cast<std::ptrdiff_t>(pos + len));
        const auto fr = forward(m, std::span<const int>(seq));
        for (std::size_t t = 0; t + 1 < len; ++t) {
            const float* row = fr.logits.data() + t * V;
            long double mx = row[0];
            for (std::size_t v = 1; v < V; ++v) mx = std::max<long double>(mx, row[v]);
            long double z = 0;
            for (std::size_t v = 0; v < V; ++v) z += std::exp(static_cast<long double>(row[v]) - mx);
            nll += mx + std::log(z) - static_cast<long double>(row[static_cast<std::size_t>(seq[t + 1])]);
            ++n;
        }
        pos += len - 1;
    }
    return static_cast<double>(std::exp(nll / static_cast<long double>(n)));
}

/// Masked-expert case: a model with grouping disabled, a short sequence, and a
/// pruning plan that drops only experts the sequence never routes to.
struct MaskedCase {
    Model<float> model;
    std::vector<int> tokens;
    PruningPlan plan;
};

inline MaskedCase masked_case(int i) {
    ModelConfig c = ModelConfig::toy(300 + static_cast<std::uint64_t>(i));
    c.topk_group = c.n_group; // grouping off: selection then depends only on scores
    const double r = i % 2 == 0 ? 0.75 : 0.5;
    c.k = r > 0.6 ? 3 : 2;
    MaskedCase mc{init_model<float>(c), {}, {}};
    // 4 tokens route to at most 4k <= ceil(rE) distinct experts per layer
    const auto text = synthetic_corpus(64, 400 + static_cast<std::uint64_t>(i));
    mc.tokens = bytes_to_tokens(std::string_view(text).substr(static_cast<std::size_t>(i), 4));
    // importance = observed usage on this very sequence, so unused experts rank last
    const auto stats = collect_stats(mc.model, mc.tokens);
    mc.plan = plan_prune(importance(stats, 1.0), r, c.n_experts, 1.0, c.n_group);
    for (std::size_t li = 0; li < mc.plan.layers.size(); ++li)
        for (int e = 0; e < c.n_experts; ++e)
            if (!mc.plan.layers[li].remap.count(e) && stats.count[li][static_cast<std::size_t>(e)] != 0)
                throw std::logic_error("masked case " + std::to_string(i) + " would drop a used expert");
    return mc;
}

} // namespace moesq::fixtures
