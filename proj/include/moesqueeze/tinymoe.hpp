// SPDX-License-Identifier: Apache-2.0
#pragma once

// Desk-scale MoE transformer: byte vocabulary, pre-norm blocks of single-head
// causal attention followed by a shared expert plus grouped top-k routed SwiGLU
// experts. Templated on the scalar type so gradient checks can run in double.

#include <algorithm>
#include <cmath>
#include <limits>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "moesqueeze/common.hpp"
#include "moesqueeze/manifest.hpp"

namespace moesq {

enum class GroupScore : std::uint8_t { max = 0, top2_sum = 1 };

struct ModelConfig {
    int vocab = 256;
    int d_model = 64;
    int d_head = 32;
    int d_ff = 256;
    int d_ff_shared = 256;
    int n_layers = 4;
    int n_experts = 16;
    int shared_experts = 1;
    int k = 4;
    int n_group = 4;
    int topk_group = 2;
    GroupScore group_score = GroupScore::max;
    int context = 64;
    std::vector<int> layer_k; // optional per-layer override of k
    std::uint64_t seed = 42;
    float norm_eps = 1e-5f;

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;

    [[nodiscard]] int k_at(int layer) const {
        return layer_k.empty() ? k : layer_k[static_cast<std::size_t>(layer)];
    }

    void validate() const {
        auto fail = [](const std::string& m) { throw ValidationError("model config: " + m); };
        if (vocab < 1 || d_model < 1 || d_head < 1 || d_ff < 0 || d_ff_shared < 0 || n_layers < 1)
            fail("dimensions must be positive");
        if (shared_experts != 1) fail("exactly one shared expert is supported");
        if (n_experts < 1) fail("n_experts must be >= 1");
        if (k < 1 || k > n_experts) fail("k must lie in [1, E]");
        if (topk_group < 1 || topk_group > n_group) fail("topk_group must lie in [1, n_group]");
        if (n_group < 1 || n_experts % n_group != 0) fail("n_group must divide E");
        if (context < 2) fail("context must be >= 2");
        if (!layer_k.empty()) {
            if (static_cast<int>(layer_k.size()) != n_layers) fail("layer_k must have one entry per layer");
            for (int kk : layer_k)
                if (kk < 1 || kk > n_experts) fail("per-layer k must lie in [1, E]");
        }
        const int capacity = (n_experts / n_group) * topk_group;
        for (int l = 0; l < n_layers; ++l)
            if (k_at(l) > capacity) fail("k exceeds experts available in the selected groups");
    }

    [[nodiscard]] ManifestConfig manifest_config() const {
        ManifestConfig c;
        c.arch = "tinymoe";
        c.vocab = vocab;
        c.d_model = d_model;
        c.d_ff = d_ff;
        c.d_ff_shared = d_ff_shared;
        c.d_head = d_head;
        c.n_layers = n_layers;
        c.n_experts = n_experts;
        c.k_orig = k;
        c.n_group = n_group;
        c.topk_group = topk_group;
        return c;
    }

    [[nodiscard]] static ModelConfig toy(std::uint64_t seed = 42) {
        ModelConfig c;
        c.seed = seed;
        return c;
    }

    /// Small enough for finite-difference gradient checks.
    [[nodiscard]] static ModelConfig micro(std::uint64_t seed = 7) {
        ModelConfig c;
        c.d_model = 16;
        c.d_head = 8;
        c.d_ff = 8;
        c.d_ff_shared = 8;
        c.n_layers = 2;
        c.n_experts = 4;
        c.k = 2;
        c.n_group = 2;
        c.topk_group = 1;
        c.context = 16;
        c.seed = seed;
        return c;
    }
};

template <class T>
struct Tensor {
    std::vector<std::int64_t> shape;
    std::vector<T> data;
    friend bool operator==(const Tensor&, const Tensor&) = default;
};

template <class T>
class Model {
public:
    ModelConfig config;
    std::vector<std::string> names;
    std::vector<Tensor<T>> tensors;

    Model() = default;

    /// Zero-filled model laid out per the manifest derived from `cfg`.
    explicit Model(ModelConfig cfg) : config(std::move(cfg)) {
        config.validate();
        const auto man = tinymoe_manifest(config.manifest_config());
        for (const auto& t : man.tensors) {
            names.push_back(t.name);
            tensors.push_back(Tensor<T>{t.shape, std::vector<T>(static_cast<std::size_t>(t.count), T(0))});
        }
        reindex();
    }

    void reindex() {
        index_.clear();
        for (std::size_t i = 0; i < names.size(); ++i) index_[names[i]] = i;
    }

    [[nodiscard]] const Tensor<T>* find(const std::string& name) const {
        auto it = index_.find(name);
        return it == index_.end() ? nullptr : &tensors[it->second];
    }
    [[nodiscard]] Tensor<T>* find(const std::string& name) {
        auto it = index_.find(name);
        return it == index_.end() ? nullptr : &tensors[it->second];
    }
    [[nodiscard]] const Tensor<T>& at(const std::string& name) const {
        if (const auto* t = find(name)) return *t;
        throw ValidationError("model has no tensor '" + name + "'");
    }
    [[nodiscard]] Tensor<T>& at(const std::string& name) {
        if (auto* t = find(name)) return *t;
        throw ValidationError("model has no tensor '" + name + "'");
    }

    [[nodiscard]] ModelManifest manifest() const { return tinymoe_manifest(config.manifest_config()); }

    [[nodiscard]] std::int64_t param_count() const {
        std::int64_t n = 0;
        for (const auto& t : tensors) n += static_cast<std::int64_t>(t.data.size());
        return n;
    }

    /// FNV-1a over the raw bytes of every tensor, in manifest order.
    [[nodiscard]] std::uint64_t checksum() const {
        std::uint64_t h = 1469598103934665603ull;
        for (const auto& t : tensors) {
            const auto* bytes = reinterpret_cast<const unsigned char*>(t.data.data());
            for (std::size_t i = 0; i < t.data.size() * sizeof(T); ++i) {
                h ^= bytes[i];
                h *= 1099511628211ull;
            }
        }
        return h;
    }

    template <class U>
    [[nodiscard]] Model<U> cast() const {
        Model<U> out;
        out.config = config;
        out.names = names;
        for (const auto& t : tensors) out.tensors.push_back(Tensor<U>{t.shape, std::vector<U>(t.data.begin(), t.data.end())});
        out.reindex();
        return out;
    }

    friend bool operator==(const Model& a, const Model& b) {
        return a.config == b.config && a.names == b.names && a.tensors == b.tensors;
    }

private:
    std::unordered_map<std::string, std::size_t> index_;
};

namespace detail {
// Portable uniform in [0, 1): top 24 bits of a 64-bit Mersenne Twister draw.
inline double unit_uniform(std::mt19937_64& rng) { return static_cast<double>(rng() >> 40) * (1.0 / 16777216.0); }
} // namespace detail

/// Seeded scaled-uniform initialization: norms 1, embeddings U(-1,1), every
/// projection U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
template <class T = float>
Model<T> init_model(const ModelConfig& config) {
    Model<T> m(config);
    std::mt19937_64 rng(config.seed);
    const auto man = m.manifest();
    for (std::size_t i = 0; i < man.tensors.size(); ++i) {
        const auto& spec = man.tensors[i];
        auto& data = m.tensors[i].data;
        if (spec.role == Role::norm) {
            std::fill(data.begin(), data.end(), T(1));
            continue;
        }
        const double bound = spec.role == Role::token_embd ? 1.0 : 1.0 / std::sqrt(static_cast<double>(spec.shape.back()));
        for (auto& v : data) v = static_cast<T>((2.0 * detail::unit_uniform(rng) - 1.0) * bound);
    }
    return m;
}

// ---------------------------------------------------------------------------
// Routing

template <class T>
struct Selection {
    std::vector<int> experts; // ascending
    std::vector<T> weights;   // renormalized, sum 1
};

/// Grouped top-k: pick `topk_group` groups by group score (ties: lower group),
/// then the top-k experts among them (ties: lower expert id). Weights are the
/// selected scores renormalized to sum to one.
template <class T>
Selection<T> route(std::span<const T> scores, int k, int n_group, int topk_group, GroupScore rule = GroupScore::max) {
    const int E = static_cast<int>(scores.size());
    if (n_group < 1 || E % n_group != 0) throw ValidationError("route: E not divisible by n_group");
    if (topk_group < 1 || topk_group > n_group) throw ValidationError("route: topk_group out of range");
    const int gs = E / n_group;
    if (k < 1 || k > gs * topk_group) throw DomainError("route: k exceeds experts available in selected groups");

    std::vector<T> group_score(static_cast<std::size_t>(n_group));
    for (int g = 0; g < n_group; ++g) {
        const T* s = scores.data() + g * gs;
        if (rule == GroupScore::max || gs < 2) {
            group_score[static_cast<std::size_t>(g)] = *std::max_element(s, s + gs);
        } else {
            T a = T(-1), b = T(-1);
            for (int i = 0; i < gs; ++i) {
                if (s[i] > a) {
                    b = a;
                    a = s[i];
                } else if (s[i] > b) {
                    b = s[i];
                }
            }
            group_score[static_cast<std::size_t>(g)] = a + b;
        }
    }
    std::vector<int> groups(static_cast<std::size_t>(n_group));
    std::iota(groups.begin(), groups.end(), 0);
    std::stable_sort(groups.begin(), groups.end(), [&](int x, int y) {
        return group_score[static_cast<std::size_t>(x)] > group_score[static_cast<std::size_t>(y)];
    });

    std::vector<int> candidates;
    candidates.reserve(static_cast<std::size_t>(gs * topk_group));
    for (int i = 0; i < topk_group; ++i)
        for (int e = 0; e < gs; ++e) candidates.push_back(groups[static_cast<std::size_t>(i)] * gs + e);
    std::sort(candidates.begin(), candidates.end());
    std::stable_sort(candidates.begin(), candidates.end(), [&](int x, int y) {
        return scores[static_cast<std::size_t>(x)] > scores[static_cast<std::size_t>(y)];
    });

    Selection<T> sel;
    sel.experts.assign(candidates.begin(), candidates.begin() + k);
    std::sort(sel.experts.begin(), sel.experts.end());
    T sum = T(0);
    for (int e : sel.experts) sum += scores[static_cast<std::size_t>(e)];
    sel.weights.reserve(static_cast<std::size_t>(k));
    for (int e : sel.experts)
        sel.weights.push_back(sum > T(0) ? scores[static_cast<std::size_t>(e)] / sum : T(1) / static_cast<T>(k));
    return sel;
}

// ---------------------------------------------------------------------------
// Kernels

namespace kernel {

template <class T>
inline T dot(const T* a, const T* b, std::size_t n) {
    T acc[8] = {};
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8)
        for (int j = 0; j < 8; ++j) acc[j] += a[i + j] * b[i + j];
    T s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for (; i < n; ++i) s += a[i] * b[i];
    return s;
}

// y[o] = W[o,:] . x for a row-major [out, in] matrix.
template <class T>
inline void matvec(const T* W, const T* x, T* y, std::size_t out, std::size_t in) {
    for (std::size_t o = 0; o < out; ++o) y[o] = dot(W + o * in, x, in);
}

// y += a * x
template <class T>
inline void axpy(T* y, const T* x, T a, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

// x += W^T dy
template <class T>
inline void matvec_t_acc(const T* W, const T* dy, T* x, std::size_t out, std::size_t in) {
    for (std::size_t o = 0; o < out; ++o)
        if (dy[o] != T(0)) axpy(x, W + o * in, dy[o], in);
}

// dW += dy x^T
template <class T>
inline void outer_acc(T* dW, const T* dy, const T* x, std::size_t out, std::size_t in) {
    for (std::size_t o = 0; o < out; ++o)
        if (dy[o] != T(0)) axpy(dW + o * in, x, dy[o], in);
}

template <class T>
inline T sigmoid(T z) {
    return T(1) / (T(1) + std::exp(-z));
}
template <class T>
inline T silu(T z) {
    return z * sigmoid(z);
}

/// RMS-normalize `n` values; returns 1/rms.
template <class T>
inline T rmsnorm(const T* h, const T* gain, T* out, std::size_t n, T eps) {
    T ss = dot(h, h, n);
    const T inv = T(1) / std::sqrt(ss / static_cast<T>(n) + eps);
    for (std::size_t i = 0; i < n; ++i) out[i] = h[i] * inv * gain[i];
    return inv;
}

} // namespace kernel

// ---------------------------------------------------------------------------
// Forward

struct LayerRoute {
    int k = 0;
    std::vector<int> experts;   // [token * k + slot], ascending per token
    std::vector<float> weights; // renormalized routing weights
    std::vector<float> scores;  // softmax gate probability over all experts
};

struct RoutingTrace {
    int n_tokens = 0;
    std::vector<LayerRoute> layers;
};

/// Optional instrumentation: routed-expert multiply-accumulates and the
/// high-water mark of live activation buffers.
struct ForwardProbe {
    std::int64_t expert_macs = 0;
    std::int64_t tokens = 0;
    std::int64_t live_bytes = 0;
    std::int64_t peak_bytes = 0;
    void alloc(std::int64_t b) {
        live_bytes += b;
        peak_bytes = std::max(peak_bytes, live_bytes);
    }
    void release(std::int64_t b) { live_bytes -= b; }
};

template <class T>
struct LayerCache {
    std::vector<T> h_in, inv_a, a, q, k, v, p, o, h_mid, inv_f, x, logits;
    std::vector<T> sh_g, sh_u, sh_act;
    int k_sel = 0;
    std::vector<int> sel;
    std::vector<T> w;
    std::vector<T> ex_g, ex_u, ex_act, ex_y;
};

template <class T>
struct ForwardCache {
    std::vector<LayerCache<T>> layers;
    std::vector<T> h_final, inv_o, y;
};

template <class T>
struct LayerView {
    const T *attn_norm, *wq, *wk, *wv, *wo, *ffn_norm, *router, *sh_gate, *sh_up, *sh_down;
    std::vector<const T*> gate, up, down;
};

template <class T>
LayerView<T> layer_view(const Model<T>& m, int l) {
    LayerView<T> v{};
    v.attn_norm = m.at(names::blk(l, "attn_norm")).data.data();
    v.wq = m.at(names::blk(l, "attn_q")).data.data();
    v.wk = m.at(names::blk(l, "attn_k_b")).data.data();
    v.wv = m.at(names::blk(l, "attn_v_b")).data.data();
    v.wo = m.at(names::blk(l, "attn_output")).data.data();
    v.ffn_norm = m.at(names::blk(l, "ffn_norm")).data.data();
    v.router = m.at(names::blk(l, "ffn_gate_inp")).data.data();
    v.sh_gate = m.at(names::blk(l, "ffn_gate_shexp")).data.data();
    v.sh_up = m.at(names::blk(l, "ffn_up_shexp")).data.data();
    v.sh_down = m.at(names::blk(l, "ffn_down_shexp")).data.data();
    for (int e = 0; e < m.config.n_experts; ++e) {
        v.gate.push_back(m.at(names::expert(l, "ffn_gate", e)).data.data());
        v.up.push_back(m.at(names::expert(l, "ffn_up", e)).data.data());
        v.down.push_back(m.at(names::expert(l, "ffn_down", e)).data.data());
    }
    return v;
}

template <class T>
struct ForwardResult {
    int n_tokens = 0;
    int vocab = 0;
    std::vector<T> logits; // [token * vocab + v]
    RoutingTrace trace;
};

/// Full forward pass over one sequence. Each block computes
/// h += attn(norm(h)); h += shared(norm(h)) + sum_e w_e * expert_e(norm(h)).
template <class T>
ForwardResult<T> forward(const Model<T>& model, std::span<const int> tokens, std::span<const int> k_overrides = {},
                         ForwardCache<T>* cache = nullptr, ForwardProbe* probe = nullptr) {
    const auto& c = model.config;
    if (tokens.empty()) throw ValidationError("forward: empty token sequence");
    for (int t : tokens)
        if (t < 0 || t >= c.vocab) throw ValidationError("forward: token id " + std::to_string(t) + " out of range");
    if (!k_overrides.empty() && static_cast<int>(k_overrides.size()) != c.n_layers)
        throw ValidationError("forward: k_overrides must have one entry per layer");
    for (int kk : k_overrides)
        if (kk < 1 || kk > c.n_experts) throw ValidationError("forward: k override out of [1, E]");

    const std::size_t T_ = tokens.size();
    const auto d = static_cast<std::size_t>(c.d_model);
    const auto dh = static_cast<std::size_t>(c.d_head);
    const auto dff = static_cast<std::size_t>(c.d_ff);
    const auto dfs = static_cast<std::size_t>(c.d_ff_shared);
    const auto E = static_cast<std::size_t>(c.n_experts);
    const auto V = static_cast<std::size_t>(c.vocab);
    const T eps = static_cast<T>(c.norm_eps);
    const T att_scale = T(1) / std::sqrt(static_cast<T>(dh));

    ForwardResult<T> res;
    res.n_tokens = static_cast<int>(T_);
    res.vocab = c.vocab;
    res.trace.n_tokens = static_cast<int>(T_);
    if (cache) cache->layers.assign(static_cast<std::size_t>(c.n_layers), {});
    if (probe) {
        probe->tokens += static_cast<std::int64_t>(T_);
        probe->alloc(static_cast<std::int64_t>(4 * T_ * d * sizeof(T)));
    }

    std::vector<T> h(T_ * d);
    const auto& embd = model.at(std::string(names::token_embd)).data;
    for (std::size_t t = 0; t < T_; ++t)
        std::copy_n(embd.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(tokens[t]) * d), d,
                    h.begin() + static_cast<std::ptrdiff_t>(t * d));

    std::vector<T> a(T_ * d), q(T_ * dh), kk(T_ * dh), vv(T_ * dh), o(T_ * dh), p(T_ * T_), inv_a(T_), inv_f(T_);
    std::vector<T> x(T_ * d), logits_r(T_ * E), acc(d), tmp(d), sh_g(dfs), sh_u(dfs), sh_act(dfs), gate_s(E), y_e(d);

    for (int l = 0; l < c.n_layers; ++l) {
        const auto lv = layer_view(model, l);
        const int k_l = k_overrides.empty() ? c.k_at(l) : k_overrides[static_cast<std::size_t>(l)];
        LayerCache<T>* lc = cache ? &cache->layers[static_cast<std::size_t>(l)] : nullptr;
        if (lc) lc->h_in = h;

        // attention
        for (std::size_t t = 0; t < T_; ++t) {
            inv_a[t] = kernel::rmsnorm(&h[t * d], lv.attn_norm, &a[t * d], d, eps);
            kernel::matvec(lv.wq, &a[t * d], &q[t * dh], dh, d);
            kernel::matvec(lv.wk, &a[t * d], &kk[t * dh], dh, d);
            kernel::matvec(lv.wv, &a[t * d], &vv[t * dh], dh, d);
        }
        for (std::size_t i = 0; i < T_; ++i) {
            T* pi = &p[i * T_];
            T mx = -std::numeric_limits<T>::infinity();
            for (std::size_t j = 0; j <= i; ++j) {
                pi[j] = kernel::dot(&q[i * dh], &kk[j * dh], dh) * att_scale;
                mx = std::max(mx, pi[j]);
            }
            T z = T(0);
            for (std::size_t j = 0; j <= i; ++j) {
                pi[j] = std::exp(pi[j] - mx);
                z += pi[j];
            }
            for (std::size_t j = 0; j <= i; ++j) pi[j] /= z;
            for (std::size_t j = i + 1; j < T_; ++j) pi[j] = T(0);
            std::fill_n(&o[i * dh], dh, T(0));
            for (std::size_t j = 0; j <= i; ++j) kernel::axpy(&o[i * dh], &vv[j * dh], pi[j], dh);
        }
        for (std::size_t t = 0; t < T_; ++t) {
            kernel::matvec(lv.wo, &o[t * dh], tmp.data(), d, dh);
            for (std::size_t i = 0; i < d; ++i) h[t * d + i] += tmp[i];
        }
        if (lc) {
            lc->inv_a = inv_a;
            lc->a = a;
            lc->q = q;
            lc->k = kk;
            lc->v = vv;
            lc->p = p;
            lc->o = o;
            lc->h_mid = h;
            lc->k_sel = k_l;
            lc->sh_g.resize(T_ * dfs);
            lc->sh_u.resize(T_ * dfs);
            lc->sh_act.resize(T_ * dfs);
            lc->sel.resize(T_ * static_cast<std::size_t>(k_l));
            lc->w.resize(T_ * static_cast<std::size_t>(k_l));
            lc->ex_g.resize(T_ * static_cast<std::size_t>(k_l) * dff);
            lc->ex_u.resize(lc->ex_g.size());
            lc->ex_act.resize(lc->ex_g.size());
            lc->ex_y.resize(T_ * static_cast<std::size_t>(k_l) * d);
        }

        // mixture of experts
        LayerRoute lr;
        lr.k = k_l;
        lr.experts.resize(T_ * static_cast<std::size_t>(k_l));
        lr.weights.resize(lr.experts.size());
        lr.scores.resize(lr.experts.size());
        for (std::size_t t = 0; t < T_; ++t) {
            inv_f[t] = kernel::rmsnorm(&h[t * d], lv.ffn_norm, &x[t * d], d, eps);
            const T* xt = &x[t * d];
            T* lg = &logits_r[t * E];
            kernel::matvec(lv.router, xt, lg, E, d);
            const T mx = *std::max_element(lg, lg + E);
            T z = T(0);
            for (std::size_t e = 0; e < E; ++e) {
                gate_s[e] = std::exp(lg[e] - mx);
                z += gate_s[e];
            }
            auto sel = route<T>(gate_s, k_l, c.n_group, c.topk_group, c.group_score);

            // shared expert
            kernel::matvec(lv.sh_gate, xt, sh_g.data(), dfs, d);
            kernel::matvec(lv.sh_up, xt, sh_u.data(), dfs, d);
            for (std::size_t i = 0; i < dfs; ++i) sh_act[i] = kernel::silu(sh_g[i]) * sh_u[i];
            kernel::matvec(lv.sh_down, sh_act.data(), acc.data(), d, dfs);
            if (lc) {
                std::copy(sh_g.begin(), sh_g.end(), lc->sh_g.begin() + static_cast<std::ptrdiff_t>(t * dfs));
                std::copy(sh_u.begin(), sh_u.end(), lc->sh_u.begin() + static_cast<std::ptrdiff_t>(t * dfs));
                std::copy(sh_act.begin(), sh_act.end(), lc->sh_act.begin() + static_cast<std::ptrdiff_t>(t * dfs));
            }

            // routed experts: the k hidden activations are live together
            const auto hidden_bytes = static_cast<std::int64_t>(static_cast<std::size_t>(k_l) * dff * sizeof(T));
            std::vector<T> ex_g(static_cast<std::size_t>(k_l) * dff), ex_u(ex_g.size()), ex_act(ex_g.size());
            if (probe) probe->alloc(hidden_bytes);
            for (int s = 0; s < k_l; ++s) {
                const auto e = static_cast<std::size_t>(sel.experts[static_cast<std::size_t>(s)]);
                T* g_ = &ex_g[static_cast<std::size_t>(s) * dff];
                T* u_ = &ex_u[static_cast<std::size_t>(s) * dff];
                T* act = &ex_act[static_cast<std::size_t>(s) * dff];
                kernel::matvec(lv.gate[e], xt, g_, dff, d);
                kernel::matvec(lv.up[e], xt, u_, dff, d);
                for (std::size_t i = 0; i < dff; ++i) act[i] = kernel::silu(g_[i]) * u_[i];
            }
            for (int s = 0; s < k_l; ++s) {
                const auto e = static_cast<std::size_t>(sel.experts[static_cast<std::size_t>(s)]);
                const T w = sel.weights[static_cast<std::size_t>(s)];
                kernel::matvec(lv.down[e], &ex_act[static_cast<std::size_t>(s) * dff], y_e.data(), d, dff);
                kernel::axpy(acc.data(), y_e.data(), w, d);
                const std::size_t slot = t * static_cast<std::size_t>(k_l) + static_cast<std::size_t>(s);
                lr.experts[slot] = static_cast<int>(e);
                lr.weights[slot] = static_cast<float>(w);
                lr.scores[slot] = static_cast<float>(gate_s[e] / z);
                if (lc) {
                    lc->sel[slot] = static_cast<int>(e);
                    lc->w[slot] = w;
                    std::copy_n(&ex_g[static_cast<std::size_t>(s) * dff], dff, &lc->ex_g[slot * dff]);
                    std::copy_n(&ex_u[static_cast<std::size_t>(s) * dff], dff, &lc->ex_u[slot * dff]);
                    std::copy_n(&ex_act[static_cast<std::size_t>(s) * dff], dff, &lc->ex_act[slot * dff]);
                    std::copy_n(y_e.data(), d, &lc->ex_y[slot * d]);
                }
            }
            if (probe) {
                probe->expert_macs += static_cast<std::int64_t>(k_l) * 3 * static_cast<std::int64_t>(d * dff);
                probe->release(hidden_bytes);
            }
            for (std::size_t i = 0; i < d; ++i) h[t * d + i] += acc[i];
        }
        if (lc) {
            lc->inv_f = inv_f;
            lc->x = x;
            lc->logits = logits_r;
        }
        res.trace.layers.push_back(std::move(lr));
    }

    // head
    const auto* gout = model.at(std::string(names::output_norm)).data.data();
    const auto* wout = model.at(std::string(names::output)).data.data();
    std::vector<T> y(T_ * d), inv_o(T_);
    res.logits.resize(T_ * V);
    for (std::size_t t = 0; t < T_; ++t) {
        inv_o[t] = kernel::rmsnorm(&h[t * d], gout, &y[t * d], d, eps);
        kernel::matvec(wout, &y[t * d], &res.logits[t * V], V, d);
    }
    if (cache) {
        cache->h_final = std::move(h);
        cache->inv_o = std::move(inv_o);
        cache->y = std::move(y);
    }
    if (probe) probe->release(static_cast<std::int64_t>(4 * T_ * d * sizeof(T)));
    return res;
}

// ---------------------------------------------------------------------------
// Perplexity

struct NllSum {
    double sum = 0.0;
    std::int64_t count = 0;
    [[nodiscard]] double perplexity() const { return std::exp(sum / static_cast<double>(count)); }
};

/// Negative log-likelihood of tokens[t+1] under logits row t, summed in double.
template <class T>
NllSum nll_of_logits(std::span<const T> logits, std::span<const int> tokens, int vocab) {
    NllSum s;
    const auto V = static_cast<std::size_t>(vocab);
    for (std::size_t t = 0; t + 1 < tokens.size(); ++t) {
        const T* row = logits.data() + t * V;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t v = 0; v < V; ++v) mx = std::max(mx, static_cast<double>(row[v]));
        double z = 0.0;
        for (std::size_t v = 0; v < V; ++v) z += std::exp(static_cast<double>(row[v]) - mx);
        s.sum += mx + std::log(z) - static_cast<double>(row[static_cast<std::size_t>(tokens[t + 1])]);
        ++s.count;
    }
    return s;
}

/// Window starts for scoring a corpus with a fixed context: consecutive windows
/// overlap by one token so each transition is predicted exactly once.
inline std::vector<std::pair<std::size_t, std::size_t>> eval_windows(std::size_t n, int context) {
    std::vector<std::pair<std::size_t, std::size_t>> w;
    const auto ctx = static_cast<std::size_t>(context);
    for (std::size_t s = 0; s + 1 < n; s += ctx - 1) w.emplace_back(s, std::min(ctx, n - s));
    return w;
}

template <class T>
NllSum corpus_nll(const Model<T>& model, std::span<const int> corpus, std::span<const int> k_overrides = {}) {
    if (corpus.size() < 2) throw ValidationError("perplexity: corpus needs at least 2 tokens");
    NllSum total;
    for (auto [start, len] : eval_windows(corpus.size(), model.config.context)) {
        auto seq = corpus.subspan(start, len);
        auto fr = forward(model, seq, k_overrides);
        auto s = nll_of_logits<T>(fr.logits, seq, model.config.vocab);
        total.sum += s.sum;
        total.count += s.count;
    }
    return total;
}

/// exp(mean next-token NLL) over every transition of the corpus.
template <class T>
double perplexity(const Model<T>& model, std::span<const int> corpus, std::span<const int> k_overrides = {}) {
    return corpus_nll(model, corpus, k_overrides).perplexity();
}

inline std::vector<int> bytes_to_tokens(std::string_view bytes) {
    std::vector<int> t;
    t.reserve(bytes.size());
    for (char ch : bytes) t.push_back(static_cast<unsigned char>(ch));
    return t;
}

} // namespace moesq
