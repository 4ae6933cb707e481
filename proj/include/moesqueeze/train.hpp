// SPDX-License-Identifier: Apache-2.0
#pragma once

// Manual backpropagation through the tinymoe forward pass, a plain SGD
// trainer, and a finite-difference gradient check.

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <sstream>
#include <vector>

#include "moesqueeze/tinymoe.hpp"

namespace moesq {

namespace detail {

// Gradient of out = h * inv * g with inv = 1/sqrt(mean(h^2) + eps).
template <class T>
void rmsnorm_backward(const T* h, const T* g, T inv, const T* dout, T* dh, T* dg, std::size_t n) {
    T hu = T(0);
    for (std::size_t i = 0; i < n; ++i) {
        dg[i] += dout[i] * h[i] * inv;
        hu += dout[i] * g[i] * h[i];
    }
    const T c = inv * inv * inv * hu / static_cast<T>(n);
    for (std::size_t i = 0; i < n; ++i) dh[i] += inv * dout[i] * g[i] - c * h[i];
}

// Backprop through down(silu(gate x) * up x); accumulates weight grads and dx.
template <class T>
void swiglu_backward(const T* Wg, const T* Wu, const T* Wd, T* dWg, T* dWu, T* dWd, const T* x, const T* g, const T* u,
                     const T* act, const T* dout, T* dx, std::size_t d, std::size_t dff, std::vector<T>& scratch) {
    scratch.assign(3 * dff, T(0));
    T* dact = scratch.data();
    T* dg = dact + dff;
    T* du = dg + dff;
    kernel::outer_acc(dWd, dout, act, d, dff);
    kernel::matvec_t_acc(Wd, dout, dact, d, dff);
    for (std::size_t i = 0; i < dff; ++i) {
        const T s = kernel::sigmoid(g[i]);
        du[i] = dact[i] * g[i] * s;
        dg[i] = dact[i] * u[i] * s * (T(1) + g[i] * (T(1) - s));
    }
    kernel::outer_acc(dWg, dg, x, dff, d);
    kernel::outer_acc(dWu, du, x, dff, d);
    kernel::matvec_t_acc(Wg, dg, dx, dff, d);
    kernel::matvec_t_acc(Wu, du, dx, dff, d);
}

template <class T>
struct LayerGrad {
    T *attn_norm, *wq, *wk, *wv, *wo, *ffn_norm, *router, *sh_gate, *sh_up, *sh_down;
    std::vector<T*> gate, up, down;
};

template <class T>
LayerGrad<T> layer_grad(Model<T>& g, int l) {
    LayerGrad<T> v{};
    v.attn_norm = g.at(names::blk(l, "attn_norm")).data.data();
    v.wq = g.at(names::blk(l, "attn_q")).data.data();
    v.wk = g.at(names::blk(l, "attn_k_b")).data.data();
    v.wv = g.at(names::blk(l, "attn_v_b")).data.data();
    v.wo = g.at(names::blk(l, "attn_output")).data.data();
    v.ffn_norm = g.at(names::blk(l, "ffn_norm")).data.data();
    v.router = g.at(names::blk(l, "ffn_gate_inp")).data.data();
    v.sh_gate = g.at(names::blk(l, "ffn_gate_shexp")).data.data();
    v.sh_up = g.at(names::blk(l, "ffn_up_shexp")).data.data();
    v.sh_down = g.at(names::blk(l, "ffn_down_shexp")).data.data();
    for (int e = 0; e < g.config.n_experts; ++e) {
        v.gate.push_back(g.at(names::expert(l, "ffn_gate", e)).data.data());
        v.up.push_back(g.at(names::expert(l, "ffn_up", e)).data.data());
        v.down.push_back(g.at(names::expert(l, "ffn_down", e)).data.data());
    }
    return v;
}

} // namespace detail

/// Mean next-token cross-entropy of `tokens` and its gradient, accumulated
/// into `grad` (which must share the model's layout). Routing decisions are
/// treated as constants; gradients flow through the renormalized weights.
template <class T>
T loss_and_grad(const Model<T>& model, std::span<const int> tokens, Model<T>& grad) {
    if (tokens.size() < 2) throw ValidationError("loss_and_grad: need at least 2 tokens");
    const auto& c = model.config;
    ForwardCache<T> cache;
    auto fr = forward(model, tokens, {}, &cache);

    const std::size_t T_ = tokens.size();
    const auto d = static_cast<std::size_t>(c.d_model);
    const auto dh = static_cast<std::size_t>(c.d_head);
    const auto dff = static_cast<std::size_t>(c.d_ff);
    const auto dfs = static_cast<std::size_t>(c.d_ff_shared);
    const auto E = static_cast<std::size_t>(c.n_experts);
    const auto V = static_cast<std::size_t>(c.vocab);
    const T att_scale = T(1) / std::sqrt(static_cast<T>(dh));
    const T inv_n = T(1) / static_cast<T>(T_ - 1);

    // head
    T loss = T(0);
    std::vector<T> dlog(V), dy(d), dH(T_ * d, T(0));
    const auto* gout = model.at(std::string(names::output_norm)).data.data();
    const auto* wout = model.at(std::string(names::output)).data.data();
    auto* d_gout = grad.at(std::string(names::output_norm)).data.data();
    auto* d_wout = grad.at(std::string(names::output)).data.data();
    for (std::size_t t = 0; t + 1 < T_; ++t) {
        const T* row = &fr.logits[t * V];
        const T mx = *std::max_element(row, row + V);
        T z = T(0);
        for (std::size_t v = 0; v < V; ++v) {
            dlog[v] = std::exp(row[v] - mx);
            z += dlog[v];
        }
        const auto target = static_cast<std::size_t>(tokens[t + 1]);
        loss += (mx + std::log(z) - row[target]) * inv_n;
        for (std::size_t v = 0; v < V; ++v) dlog[v] = dlog[v] / z * inv_n;
        dlog[target] -= inv_n;
        kernel::outer_acc(d_wout, dlog.data(), &cache.y[t * d], V, d);
        std::fill(dy.begin(), dy.end(), T(0));
        kernel::matvec_t_acc(wout, dlog.data(), dy.data(), V, d);
        detail::rmsnorm_backward(&cache.h_final[t * d], gout, cache.inv_o[t], dy.data(), &dH[t * d], d_gout, d);
    }

    std::vector<T> scratch, dx(d), dacc(d), dw, dl(E), dO(T_ * dh), dQ(T_ * dh), dK(T_ * dh), dV(T_ * dh), dA(T_ * d), dp(T_);
    for (int l = c.n_layers - 1; l >= 0; --l) {
        const auto& lc = cache.layers[static_cast<std::size_t>(l)];
        const auto lv = layer_view(model, l);
        auto lg = detail::layer_grad(grad, l);
        const auto k_l = static_cast<std::size_t>(lc.k_sel);
        dw.resize(k_l);

        // mixture of experts: h_out = h_mid + moe(norm(h_mid))
        for (std::size_t t = 0; t < T_; ++t) {
            const T* xt = &lc.x[t * d];
            const T* dout = &dH[t * d];
            std::fill(dx.begin(), dx.end(), T(0));
            detail::swiglu_backward(lv.sh_gate, lv.sh_up, lv.sh_down, lg.sh_gate, lg.sh_up, lg.sh_down, xt, &lc.sh_g[t * dfs],
                                    &lc.sh_u[t * dfs], &lc.sh_act[t * dfs], dout, dx.data(), d, dfs, scratch);
            T wdw = T(0);
            for (std::size_t s = 0; s < k_l; ++s) {
                const std::size_t slot = t * k_l + s;
                const auto e = static_cast<std::size_t>(lc.sel[slot]);
                const T w = lc.w[slot];
                dw[s] = kernel::dot(dout, &lc.ex_y[slot * d], d);
                wdw += w * dw[s];
                for (std::size_t i = 0; i < d; ++i) dacc[i] = w * dout[i];
                detail::swiglu_backward(lv.gate[e], lv.up[e], lv.down[e], lg.gate[e], lg.up[e], lg.down[e], xt, &lc.ex_g[slot * dff],
                                        &lc.ex_u[slot * dff], &lc.ex_act[slot * dff], dacc.data(), dx.data(), d, dff, scratch);
            }
            // weights are a softmax over the selected router logits
            std::fill(dl.begin(), dl.end(), T(0));
            for (std::size_t s = 0; s < k_l; ++s) {
                const std::size_t slot = t * k_l + s;
                dl[static_cast<std::size_t>(lc.sel[slot])] = lc.w[slot] * (dw[s] - wdw);
            }
            kernel::outer_acc(lg.router, dl.data(), xt, E, d);
            kernel::matvec_t_acc(lv.router, dl.data(), dx.data(), E, d);
            detail::rmsnorm_backward(&lc.h_mid[t * d], lv.ffn_norm, lc.inv_f[t], dx.data(), &dH[t * d], lg.ffn_norm, d);
        }

        // attention: h_mid = h_in + Wo attn(norm(h_in))
        std::fill(dO.begin(), dO.end(), T(0));
        std::fill(dQ.begin(), dQ.end(), T(0));
        std::fill(dK.begin(), dK.end(), T(0));
        std::fill(dV.begin(), dV.end(), T(0));
        std::fill(dA.begin(), dA.end(), T(0));
        for (std::size_t t = 0; t < T_; ++t) {
            kernel::outer_acc(lg.wo, &dH[t * d], &lc.o[t * dh], d, dh);
            kernel::matvec_t_acc(lv.wo, &dH[t * d], &dO[t * dh], d, dh);
        }
        for (std::size_t i = 0; i < T_; ++i) {
            const T* pi = &lc.p[i * T_];
            T pdp = T(0);
            for (std::size_t j = 0; j <= i; ++j) {
                dp[j] = kernel::dot(&dO[i * dh], &lc.v[j * dh], dh);
                pdp += pi[j] * dp[j];
                kernel::axpy(&dV[j * dh], &dO[i * dh], pi[j], dh);
            }
            for (std::size_t j = 0; j <= i; ++j) {
                const T ds = pi[j] * (dp[j] - pdp) * att_scale;
                kernel::axpy(&dQ[i * dh], &lc.k[j * dh], ds, dh);
                kernel::axpy(&dK[j * dh], &lc.q[i * dh], ds, dh);
            }
        }
        for (std::size_t t = 0; t < T_; ++t) {
            const T* at = &lc.a[t * d];
            kernel::outer_acc(lg.wq, &dQ[t * dh], at, dh, d);
            kernel::outer_acc(lg.wk, &dK[t * dh], at, dh, d);
            kernel::outer_acc(lg.wv, &dV[t * dh], at, dh, d);
            kernel::matvec_t_acc(lv.wq, &dQ[t * dh], &dA[t * d], dh, d);
            kernel::matvec_t_acc(lv.wk, &dK[t * dh], &dA[t * d], dh, d);
            kernel::matvec_t_acc(lv.wv, &dV[t * dh], &dA[t * d], dh, d);
            detail::rmsnorm_backward(&lc.h_in[t * d], lv.attn_norm, lc.inv_a[t], &dA[t * d], &dH[t * d], lg.attn_norm, d);
        }
    }

    auto* d_embd = grad.at(std::string(names::token_embd)).data.data();
    for (std::size_t t = 0; t < T_; ++t) kernel::axpy(d_embd + static_cast<std::size_t>(tokens[t]) * d, &dH[t * d], T(1), d);
    return loss;
}

template <class T>
Model<T> zeros_like(const Model<T>& m) {
    Model<T> g = m;
    for (auto& t : g.tensors) std::fill(t.data.begin(), t.data.end(), T(0));
    return g;
}

struct TrainOptions {
    int steps = 500;
    double lr = 0.05;
    std::uint64_t seed = 1;
    int context = 0; // 0: model context
};

/// Plain SGD on next-token cross-entropy; one randomly placed window per step.
/// `losses`, if given, receives the per-step training loss.
template <class T>
Model<T> train(Model<T> model, std::span<const int> corpus, const TrainOptions& opt, std::vector<double>* losses = nullptr) {
    if (opt.steps < 0) throw ValidationError("train: steps must be >= 0");
    if (opt.steps == 0) return model;
    if (corpus.size() < 2) throw ValidationError("train: corpus needs at least 2 tokens");
    const auto ctx = static_cast<std::size_t>(opt.context > 0 ? opt.context : model.config.context);
    const std::size_t len = std::min(ctx, corpus.size());
    std::mt19937_64 rng(opt.seed);
    const auto lr = static_cast<T>(opt.lr);
    Model<T> grad = zeros_like(model);
    for (int step = 0; step < opt.steps; ++step) {
        const std::size_t span_n = corpus.size() - len + 1;
        const std::size_t start = static_cast<std::size_t>(rng() % span_n);
        for (auto& t : grad.tensors) std::fill(t.data.begin(), t.data.end(), T(0));
        const T loss = loss_and_grad(model, corpus.subspan(start, len), grad);
        if (!std::isfinite(static_cast<double>(loss))) {
            std::ostringstream os;
            os << "train: non-finite loss at step " << step << " (window start " << start << ", lr " << opt.lr << ")";
            throw DomainError(os.str());
        }
        if (losses) losses->push_back(static_cast<double>(loss));
        for (std::size_t i = 0; i < model.tensors.size(); ++i) {
            auto& w = model.tensors[i].data;
            const auto& g = grad.tensors[i].data;
            for (std::size_t j = 0; j < w.size(); ++j) w[j] -= lr * g[j];
        }
    }
    return model;
}

/// Loss of one sequence without gradients.
template <class T>
T sequence_loss(const Model<T>& model, std::span<const int> tokens) {
    auto fr = forward(model, tokens);
    auto s = nll_of_logits<T>(fr.logits, tokens, model.config.vocab);
    return static_cast<T>(s.sum / static_cast<double>(s.count));
}

struct GradCheckResult {
    double max_rel_error = 0.0;
    int checked = 0;
    int skipped = 0; // coordinates whose perturbation flipped a routing decision
};

namespace detail {
inline bool same_routing(const RoutingTrace& a, const RoutingTrace& b) {
    for (std::size_t l = 0; l < a.layers.size(); ++l)
        if (a.layers[l].experts != b.layers[l].experts) return false;
    return true;
}
} // namespace detail

/// Compares analytic gradients against central differences on `n_coords`
/// seeded random weight coordinates. Relative error uses
/// |a - n| / max(|a| + |n|, floor) so vanishing gradients do not blow up.
inline GradCheckResult grad_check(const Model<double>& model, std::span<const int> sample, int n_coords = 256, std::uint64_t seed = 1,
                                  double floor = 1e-6) {
    GradCheckResult res;
    if (n_coords <= 0) return res;
    Model<double> grad = zeros_like(model);
    loss_and_grad(model, sample, grad);
    const auto base_trace = forward(model, sample).trace;

    std::int64_t total = model.param_count();
    std::mt19937_64 rng(seed);
    Model<double> probe = model;
    while (res.checked < n_coords) {
        auto flat = static_cast<std::int64_t>(rng() % static_cast<std::uint64_t>(total));
        std::size_t ti = 0;
        while (flat >= static_cast<std::int64_t>(probe.tensors[ti].data.size())) {
            flat -= static_cast<std::int64_t>(probe.tensors[ti].data.size());
            ++ti;
        }
        auto& w = probe.tensors[ti].data[static_cast<std::size_t>(flat)];
        const double w0 = w;
        const double eps = 1e-4 * std::max(1.0, std::abs(w0));
        w = w0 + eps;
        auto fp = forward(probe, sample);
        w = w0 - eps;
        auto fm = forward(probe, sample);
        w = w0;
        if (!detail::same_routing(fp.trace, base_trace) || !detail::same_routing(fm.trace, base_trace)) {
            ++res.skipped;
            if (res.skipped > 50 * n_coords) break;
            continue;
        }
        const auto lp = nll_of_logits<double>(fp.logits, sample, model.config.vocab);
        const auto lm = nll_of_logits<double>(fm.logits, sample, model.config.vocab);
        const double numeric = (lp.sum / static_cast<double>(lp.count) - lm.sum / static_cast<double>(lm.count)) / (2 * eps);
        const double analytic = grad.tensors[ti].data[static_cast<std::size_t>(flat)];
        const double rel = std::abs(analytic - numeric) / std::max(std::abs(analytic) + std::abs(numeric), floor);
        res.max_rel_error = std::max(res.max_rel_error, rel);
        ++res.checked;
    }
    return res;
}

} // namespace moesq
