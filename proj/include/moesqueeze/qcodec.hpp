// SPDX-License-Identifier: Apache-2.0
#pragma once

// Simulated block quantization for every scheme on the ladder.
//
// Full 32-weight blocks:
//   Qc     : 16-bit scale, 32 codes of c bits on the symmetric grid [-M, M], M = 2^(c-1)-1
//   IQ1_S  : 16-bit scale, 32 sign bits, 2 pad bits
//   IQ1_M  : 16-bit scale, 2 x 4-bit half-block magnitude selectors, 32 sign bits
//
// Scales are non-negative fp16 bit patterns rounded toward zero. A partial tail
// block gets whatever bits remain of ceil(count*bpw/8) bytes; its code width and
// scale precision shrink to fit (scale keeps the top bits of the fp16 pattern),
// or it borrows the preceding block's scale when too few bits are left.
// The payload size therefore always equals SchemeTable::size_bytes exactly.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "moesqueeze/common.hpp"
#include "moesqueeze/scheme.hpp"

namespace moesq {

struct QuantizedTensor {
    Scheme scheme = Scheme::F32;
    std::vector<std::int64_t> shape;
    std::vector<std::uint8_t> payload;

    [[nodiscard]] std::int64_t count() const {
        std::int64_t n = 1;
        for (auto d : shape) n *= d;
        return n;
    }
    friend bool operator==(const QuantizedTensor&, const QuantizedTensor&) = default;
};

inline std::int64_t size_bytes(std::int64_t count, Scheme s) { return SchemeTable::builtin().size_bytes(count, s); }

namespace codec {

inline constexpr int kBlock = 32;
inline constexpr int kHalf = 16;

// --- fp16 helpers ----------------------------------------------------------

/// Largest fp16 value <= x, as a 15-bit pattern (sign dropped). x must be >= 0.
inline std::uint16_t half_floor(float x) {
    if (!(x > 0.0f)) return 0;
    if (x >= 65504.0f) return 0x7BFF;
    const auto bits = std::bit_cast<std::uint32_t>(x);
    const int exp = static_cast<int>((bits >> 23) & 0xFF) - 127;
    if (exp >= -14) {
        const auto hexp = static_cast<std::uint32_t>(exp + 15);
        const auto mant = (bits & 0x7FFFFFu) >> 13;
        return static_cast<std::uint16_t>((hexp << 10) | mant);
    }
    const float sub = std::floor(x * 16777216.0f); // units of 2^-24
    return static_cast<std::uint16_t>(sub);
}

inline float half_to_float(std::uint16_t h) {
    const std::uint32_t exp = (h >> 10) & 0x1F;
    const std::uint32_t mant = h & 0x3FF;
    if (exp == 0) return static_cast<float>(mant) / 16777216.0f;
    const std::uint32_t bits = ((exp + 112) << 23) | (mant << 13);
    return std::bit_cast<float>(bits);
}

/// Scale stored with `keep` significant bits of the 15-bit pattern.
inline std::uint16_t encode_scale(float a, int keep) {
    const int drop = 15 - keep;
    return static_cast<std::uint16_t>(half_floor(a) >> drop);
}
inline float decode_scale(std::uint32_t stored, int keep) {
    return half_to_float(static_cast<std::uint16_t>(stored << (15 - keep)));
}
inline float round_scale(float a, int keep) { return decode_scale(encode_scale(a, keep), keep); }

// --- bit streams -------------------------------------------------------------

class BitWriter {
public:
    explicit BitWriter(std::vector<std::uint8_t>& out) : out_(out) {}
    void put(std::uint32_t value, int nbits) {
        for (int i = 0; i < nbits; ++i) {
            if (pos_ % 8 == 0) out_.push_back(0);
            if ((value >> i) & 1u) out_.back() |= static_cast<std::uint8_t>(1u << (pos_ % 8));
            ++pos_;
        }
    }
    [[nodiscard]] std::int64_t bits() const { return pos_; }

private:
    std::vector<std::uint8_t>& out_;
    std::int64_t pos_ = 0;
};

class BitReader {
public:
    explicit BitReader(std::span<const std::uint8_t> in) : in_(in) {}
    std::uint32_t get(int nbits) {
        std::uint32_t v = 0;
        for (int i = 0; i < nbits; ++i) {
            const auto byte = in_[static_cast<std::size_t>(pos_ / 8)];
            if ((byte >> (pos_ % 8)) & 1u) v |= 1u << i;
            ++pos_;
        }
        return v;
    }

private:
    std::span<const std::uint8_t> in_;
    std::int64_t pos_ = 0;
};

// --- block layouts -----------------------------------------------------------

enum class BlockKind { Grid, Sign, SignSel };

struct BlockLayout {
    BlockKind kind = BlockKind::Grid;
    int n = kBlock;      // weights in block
    int code_bits = 8;   // per weight
    int scale_field = 16;
    int scale_keep = 15; // significant bits of the fp16 pattern
    int pad_bits = 0;
    [[nodiscard]] int selectors() const { return kind == BlockKind::SignSel ? (n + kHalf - 1) / kHalf : 0; }
    [[nodiscard]] int total_bits() const { return scale_field + 4 * selectors() + n * code_bits + pad_bits; }
};

inline int native_code_bits(Scheme s) {
    switch (s) {
    case Scheme::Q8: return 8;
    case Scheme::Q6: return 6;
    case Scheme::Q5: return 5;
    case Scheme::Q4: return 4;
    case Scheme::Q3: return 3;
    case Scheme::Q2: return 2;
    default: return 1;
    }
}

inline BlockLayout full_layout(Scheme s) {
    BlockLayout lay;
    switch (s) {
    case Scheme::IQ1_S:
        lay.kind = BlockKind::Sign;
        lay.code_bits = 1;
        lay.pad_bits = 2;
        break;
    case Scheme::IQ1_M:
        lay.kind = BlockKind::SignSel;
        lay.code_bits = 1;
        break;
    default:
        lay.kind = BlockKind::Grid;
        lay.code_bits = native_code_bits(s);
        break;
    }
    return lay;
}

/// Layout for a tail of n < 32 weights that must fit in `budget` bits. Scale
/// precision comes first (up to a full 16-bit field), then code width. When a
/// full block precedes the tail and the budget cannot carry a full scale next
/// to native codes, the tail reuses that block's scale (scale_field = 0).
inline BlockLayout tail_layout(Scheme s, int n, std::int64_t budget, bool after_full_block) {
    BlockLayout lay;
    lay.n = n;
    const int native = s == Scheme::IQ1_S || s == Scheme::IQ1_M ? 1 : native_code_bits(s);
    const int sel_bits = s == Scheme::IQ1_M ? 4 * ((n + kHalf - 1) / kHalf) : 0;
    const bool inherit = after_full_block && budget < 16 + sel_bits + static_cast<std::int64_t>(n) * native;
    const std::int64_t scale_want = inherit ? 0 : std::min<std::int64_t>(16, budget - n);
    int code_bits = 1;
    BlockKind kind = BlockKind::Sign;
    int sel = 0;
    if (s == Scheme::IQ1_M) {
        if (n + sel_bits + scale_want <= budget) {
            kind = BlockKind::SignSel;
            sel = sel_bits;
        }
    } else if (s != Scheme::IQ1_S) {
        const auto fit = (budget - scale_want) / n;
        code_bits = static_cast<int>(std::clamp<std::int64_t>(fit, 1, native));
        kind = code_bits >= 2 ? BlockKind::Grid : BlockKind::Sign;
    }
    lay.kind = kind;
    lay.code_bits = code_bits;
    const auto left = budget - sel - static_cast<std::int64_t>(n) * code_bits;
    lay.scale_field = inherit ? 0 : static_cast<int>(std::min<std::int64_t>(16, left));
    lay.scale_keep = std::min(15, lay.scale_field);
    lay.pad_bits = static_cast<int>(left - lay.scale_field);
    if (!inherit && lay.scale_keep < 1) throw Error("internal: tail block has no room for a scale");
    return lay;
}

struct TensorLayout {
    std::int64_t full_blocks = 0;
    BlockLayout full;
    std::optional<BlockLayout> tail;
    std::int64_t trailing_pad = 0;
};

inline TensorLayout layout_for(std::int64_t count, Scheme s) {
    TensorLayout tl;
    tl.full = full_layout(s);
    tl.full_blocks = count / kBlock;
    const int n = static_cast<int>(count % kBlock);
    const std::int64_t total = 8 * size_bytes(count, s);
    const std::int64_t used = tl.full_blocks * SchemeTable::builtin().block_bits(s);
    if (n > 0) {
        tl.tail = tail_layout(s, n, total - used, tl.full_blocks > 0);
    } else {
        tl.trailing_pad = total - used;
    }
    return tl;
}

// --- block codecs ------------------------------------------------------------

inline int grid_max(int code_bits) { return (1 << (code_bits - 1)) - 1; }

inline float amax_of(std::span<const float> w) {
    float m = 0.0f;
    for (float v : w) m = std::max(m, std::fabs(v));
    return m;
}

inline std::int32_t grid_code(float w, float a, int M) {
    if (a <= 0.0f) return 0;
    const float q = std::round((w / a) * static_cast<float>(M));
    return static_cast<std::int32_t>(std::clamp(q, -static_cast<float>(M), static_cast<float>(M)));
}

inline float grid_value(float a, std::int32_t q, int M) { return (a * static_cast<float>(q)) / static_cast<float>(M); }

/// Grid scale: block max for >= 3-bit codes; for the 3-level grid a short
/// deterministic search over shrink factors picks the lowest squared error.
inline float choose_grid_scale(std::span<const float> w, int code_bits, int keep) {
    const float amax = amax_of(w);
    if (code_bits != 2) return round_scale(amax, keep);
    float best_a = round_scale(amax, keep);
    double best_err = -1.0;
    for (int i = 0; i <= 12; ++i) {
        const float t = static_cast<float>(20 - i) / 20.0f;
        const float a = round_scale(amax * t, keep);
        double err = 0.0;
        for (float v : w) {
            const float r = v - grid_value(a, grid_code(v, a, 1), 1);
            err += static_cast<double>(r) * r;
        }
        if (best_err < 0.0 || err < best_err) {
            best_err = err;
            best_a = a;
        }
    }
    return best_a;
}

inline float mean_abs(std::span<const float> w) {
    float s = 0.0f;
    for (float v : w) s += std::fabs(v);
    return w.empty() ? 0.0f : s / static_cast<float>(w.size());
}

/// `scale` carries the previous block's decoded scale in and this block's out.
inline void encode_block(std::span<const float> w, const BlockLayout& lay, BitWriter& bw, float& scale) {
    const bool own = lay.scale_field > 0;
    switch (lay.kind) {
    case BlockKind::Grid: {
        const int M = grid_max(lay.code_bits);
        const float a = own ? choose_grid_scale(w, lay.code_bits, lay.scale_keep) : scale;
        if (own) bw.put(encode_scale(a, lay.scale_keep), lay.scale_field);
        scale = a;
        for (float v : w) bw.put(static_cast<std::uint32_t>(grid_code(v, a, M) + M), lay.code_bits);
        break;
    }
    case BlockKind::Sign: {
        const float a = own ? round_scale(mean_abs(w), lay.scale_keep) : scale;
        if (own) bw.put(encode_scale(a, lay.scale_keep), lay.scale_field);
        scale = a;
        for (float v : w) bw.put(v < 0.0f ? 1u : 0u, 1);
        break;
    }
    case BlockKind::SignSel: {
        const int halves = lay.selectors();
        std::vector<float> means(static_cast<std::size_t>(halves));
        float top = 0.0f;
        for (int h = 0; h < halves; ++h) {
            const auto begin = static_cast<std::size_t>(h * kHalf);
            const auto len = std::min<std::size_t>(kHalf, w.size() - begin);
            means[static_cast<std::size_t>(h)] = mean_abs(w.subspan(begin, len));
            top = std::max(top, means[static_cast<std::size_t>(h)]);
        }
        const float a = own ? round_scale(top, lay.scale_keep) : scale;
        if (own) bw.put(encode_scale(a, lay.scale_keep), lay.scale_field);
        scale = a;
        for (int h = 0; h < halves; ++h) {
            int sel = 0;
            if (a > 0.0f) {
                const float r = std::round(means[static_cast<std::size_t>(h)] * 16.0f / a) - 1.0f;
                sel = static_cast<int>(std::clamp(r, 0.0f, 15.0f));
            }
            bw.put(static_cast<std::uint32_t>(sel), 4);
        }
        for (float v : w) bw.put(v < 0.0f ? 1u : 0u, 1);
        break;
    }
    }
    bw.put(0, lay.pad_bits);
}

inline void decode_block(BitReader& br, const BlockLayout& lay, std::span<float> out, float& scale) {
    const float a = lay.scale_field > 0 ? decode_scale(br.get(lay.scale_field), lay.scale_keep) : scale;
    scale = a;
    switch (lay.kind) {
    case BlockKind::Grid: {
        const int M = grid_max(lay.code_bits);
        for (auto& v : out) v = grid_value(a, static_cast<std::int32_t>(br.get(lay.code_bits)) - M, M);
        break;
    }
    case BlockKind::Sign:
        for (auto& v : out) v = br.get(1) ? -a : a;
        break;
    case BlockKind::SignSel: {
        const int halves = lay.selectors();
        std::vector<float> mag(static_cast<std::size_t>(halves));
        for (int h = 0; h < halves; ++h)
            mag[static_cast<std::size_t>(h)] = (a * static_cast<float>(br.get(4) + 1)) / 16.0f;
        for (std::size_t i = 0; i < out.size(); ++i) {
            const float m = mag[i / kHalf];
            out[i] = br.get(1) ? -m : m;
        }
        break;
    }
    }
    br.get(lay.pad_bits);
}

} // namespace codec

inline QuantizedTensor quantize(std::span<const float> w, const std::vector<std::int64_t>& shape, Scheme s) {
    QuantizedTensor qt;
    qt.scheme = s;
    qt.shape = shape;
    if (qt.count() != static_cast<std::int64_t>(w.size())) throw ValidationError("quantize: shape/data size mismatch");
    for (float v : w)
        if (!std::isfinite(v)) throw ValidationError("quantize: non-finite input value");
    if (s == Scheme::F32) {
        qt.payload.resize(w.size() * sizeof(float));
        for (std::size_t i = 0; i < w.size(); ++i) {
            const auto bits = std::bit_cast<std::uint32_t>(w[i]);
            for (int b = 0; b < 4; ++b) qt.payload[4 * i + b] = static_cast<std::uint8_t>(bits >> (8 * b));
        }
        return qt;
    }
    const auto tl = codec::layout_for(qt.count(), s);
    qt.payload.reserve(static_cast<std::size_t>(size_bytes(qt.count(), s)));
    codec::BitWriter bw(qt.payload);
    std::size_t off = 0;
    float scale = 0.0f;
    for (std::int64_t b = 0; b < tl.full_blocks; ++b, off += codec::kBlock)
        codec::encode_block(w.subspan(off, codec::kBlock), tl.full, bw, scale);
    if (tl.tail) codec::encode_block(w.subspan(off), *tl.tail, bw, scale);
    bw.put(0, static_cast<int>(tl.trailing_pad));
    return qt;
}

inline QuantizedTensor quantize(std::span<const float> w, Scheme s) {
    return quantize(w, {static_cast<std::int64_t>(w.size())}, s);
}

inline std::vector<float> dequantize(const QuantizedTensor& qt) {
    const auto n = qt.count();
    if (static_cast<std::int64_t>(qt.payload.size()) != size_bytes(n, qt.scheme))
        throw ValidationError("dequantize: corrupted payload length (" + std::to_string(qt.payload.size()) +
                              " bytes, expected " + std::to_string(size_bytes(n, qt.scheme)) + ")");
    std::vector<float> out(static_cast<std::size_t>(n));
    if (qt.scheme == Scheme::F32) {
        for (std::size_t i = 0; i < out.size(); ++i) {
            std::uint32_t bits = 0;
            for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(qt.payload[4 * i + b]) << (8 * b);
            out[i] = std::bit_cast<float>(bits);
        }
        return out;
    }
    const auto tl = codec::layout_for(n, qt.scheme);
    codec::BitReader br(qt.payload);
    std::span<float> view(out);
    std::size_t off = 0;
    float scale = 0.0f;
    for (std::int64_t b = 0; b < tl.full_blocks; ++b, off += codec::kBlock)
        codec::decode_block(br, tl.full, view.subspan(off, codec::kBlock), scale);
    if (tl.tail) codec::decode_block(br, *tl.tail, view.subspan(off), scale);
    return out;
}

/// Quantize-dequantize in one step.
inline std::vector<float> fake_quantize(std::span<const float> w, Scheme s) {
    if (s == Scheme::F32) return {w.begin(), w.end()};
    return dequantize(quantize(w, s));
}

} // namespace moesq
