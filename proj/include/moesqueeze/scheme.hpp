// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

#include <json.hpp>

#include "moesqueeze/common.hpp"

namespace moesq {

// Ordered by ladder rank, lowest precision first.
enum class Scheme : std::uint8_t { IQ1_S = 0, IQ1_M, Q2, Q3, Q4, Q5, Q6, Q8, F32 };

inline constexpr std::array<Scheme, 9> kAllSchemes = {
    Scheme::IQ1_S, Scheme::IQ1_M, Scheme::Q2, Scheme::Q3, Scheme::Q4,
    Scheme::Q5,    Scheme::Q6,    Scheme::Q8, Scheme::F32};

inline constexpr int ladder_rank(Scheme s) { return static_cast<int>(s); }

inline constexpr std::string_view scheme_name(Scheme s) {
    switch (s) {
    case Scheme::IQ1_S: return "IQ1_S";
    case Scheme::IQ1_M: return "IQ1_M";
    case Scheme::Q2: return "Q2";
    case Scheme::Q3: return "Q3";
    case Scheme::Q4: return "Q4";
    case Scheme::Q5: return "Q5";
    case Scheme::Q6: return "Q6";
    case Scheme::Q8: return "Q8";
    case Scheme::F32: return "F32";
    }
    return "?";
}

inline std::optional<Scheme> parse_scheme(std::string_view name) {
    for (Scheme s : kAllSchemes)
        if (scheme_name(s) == name) return s;
    return std::nullopt;
}

inline Scheme scheme_from_string(std::string_view name) {
    if (auto s = parse_scheme(name)) return *s;
    throw ValidationError("unknown quantization scheme '" + std::string(name) + "'");
}

/// Bits-per-weight table. Stored as bits per 32-weight block so that all size
/// arithmetic stays in exact integers: bpw = block_bits / 32.
///
/// The defaults are stand-ins for the llama.cpp formats (16-bit scale per
/// 32-weight block); IQ1_S is 1.5625 bpw, IQ1_M 1.75 bpw.
class SchemeTable {
public:
    static constexpr std::int64_t kBlock = 32;

    SchemeTable() = default;

    static const SchemeTable& builtin() {
        static const SchemeTable table;
        return table;
    }

    [[nodiscard]] std::int64_t block_bits(Scheme s) const {
        auto bits = bits_[static_cast<std::size_t>(s)];
        if (bits <= 0)
            throw ValidationError("scheme " + std::string(scheme_name(s)) + " missing from table");
        return bits;
    }

    [[nodiscard]] double bpw(Scheme s) const { return static_cast<double>(block_bits(s)) / kBlock; }

    /// ceil(count * bpw / 8), exact.
    [[nodiscard]] std::int64_t size_bytes(std::int64_t count, Scheme s) const {
        if (count < 0) throw ValidationError("negative parameter count");
        const auto bits = static_cast<unsigned __int128>(count) * static_cast<unsigned __int128>(block_bits(s));
        const unsigned __int128 denom = kBlock * 8;
        return static_cast<std::int64_t>((bits + denom - 1) / denom);
    }

    /// Table from JSON `{ "Q8": 8.5, ... }`. Every bpw must be a multiple of 1/32
    /// and the table must strictly decrease along the ladder.
    static SchemeTable from_json(const nlohmann::json& j) {
        SchemeTable t;
        t.bits_.fill(0);
        for (auto it = j.begin(); it != j.end(); ++it) {
            Scheme s = scheme_from_string(it.key());
            if (!it.value().is_number()) throw ParseError("bpw for " + it.key() + " is not a number");
            const double bpw = it.value().get<double>();
            const double bits = bpw * kBlock;
            const auto rounded = static_cast<std::int64_t>(bits + 0.5);
            if (bpw <= 0 || static_cast<double>(rounded) != bits)
                throw ValidationError("bpw for " + it.key() + " must be a positive multiple of 1/32");
            t.bits_[static_cast<std::size_t>(s)] = rounded;
        }
        std::int64_t prev = 0;
        for (Scheme s : kAllSchemes) {
            auto b = t.bits_[static_cast<std::size_t>(s)];
            if (b == 0) continue;
            if (b <= prev) throw ValidationError("bpw must strictly increase with ladder rank");
            prev = b;
        }
        return t;
    }

    [[nodiscard]] nlohmann::json to_json() const {
        nlohmann::json j = nlohmann::json::object();
        for (Scheme s : kAllSchemes)
            if (bits_[static_cast<std::size_t>(s)] > 0) j[std::string(scheme_name(s))] = bpw(s);
        return j;
    }

private:
    std::array<std::int64_t, 9> bits_ = {50, 56, 80, 112, 144, 176, 208, 272, 1024};
};

} // namespace moesq
