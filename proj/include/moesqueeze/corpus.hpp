// SPDX-License-Identifier: Apache-2.0
#pragma once

// Deterministic synthetic byte corpora. Three interleaved registers (prose,
// arithmetic, key/value records) give the router something to specialize on.

#include <array>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "moesqueeze/common.hpp"

namespace moesq {

inline std::string synthetic_corpus(std::size_t n_bytes, std::uint64_t seed) {
    static constexpr std::array<std::string_view, 24> kWords = {
        "the",   "expert", "router", "token", "layer", "model",  "weights", "small", "large",  "each",  "selects", "group",
        "keeps", "drops",  "memory", "bits",  "scale", "budget", "fast",    "slow",  "before", "after", "with",    "and"};
    static constexpr std::array<std::string_view, 8> kKeys = {"name", "size", "mode", "rate", "port", "user", "level", "id"};
    std::mt19937_64 rng(seed);
    auto pick = [&](std::size_t n) { return static_cast<std::size_t>(rng() % n); };
    std::string out;
    out.reserve(n_bytes + 64);
    while (out.size() < n_bytes) {
        switch (pick(3)) {
        case 0: { // prose
            const std::size_t n = 4 + pick(6);
            for (std::size_t i = 0; i < n; ++i) {
                std::string w(kWords[pick(kWords.size())]);
                if (i == 0) w[0] = static_cast<char>(w[0] - 'a' + 'A');
                out += w;
                out += i + 1 < n ? ' ' : '.';
            }
            out += '\n';
            break;
        }
        case 1: { // arithmetic
            const auto a = pick(50), b = pick(50);
            out += std::to_string(a) + "+" + std::to_string(b) + "=" + std::to_string(a + b) + ";\n";
            break;
        }
        default: { // records
            const std::string_view key = kKeys[pick(kKeys.size())];
            out += std::string(key) + "=" + (pick(2) ? std::to_string(pick(1000)) : std::string(kWords[pick(kWords.size())])) + "\n";
            break;
        }
        }
    }
    out.resize(n_bytes);
    return out;
}

inline std::string read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open '" + path + "'");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::string& path, std::string_view bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write '" + path + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("write failed for '" + path + "'");
}

} // namespace moesq
