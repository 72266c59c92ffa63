#pragma once

#include "robustcaps/layers.hpp"

namespace rcaps {

// Norm-bounding nonlinearity: (|v|^2 / (1+|v|^2)) * v/|v|, eps-guarded norm.
// `axis` is the pose-dimension axis.
template <class T>
Var<T> squash(const Var<T>& v, int axis) {
    auto n2 = ad::sum(ad::mul(v, v), {axis}, true);
    auto factor = ad::div_(n2, ad::mul(ad::shift(n2, T(1)),
                                       ad::shift(ad::sqrt_(n2), static_cast<T>(ad::kEps))));
    return ad::mul(v, factor);
}

// Pairwise dot products over the pose axis.
// S: (N, Nj, d, rest...) -> D: (N, N, Nj, rest...) with
// D[i,k,j,...] = sum_p S[i,j,p,...] * S[k,j,p,...].
template <class T>
Var<T> pairwise_dot(const Var<T>& S) {
    const auto& sh = S->value.shape;
    if (sh.size() < 3) throw std::invalid_argument("pairwise_dot: want (N,Nj,d,...), got " + shape_str(sh));
    int64_t N = sh[0], Nj = sh[1], d = sh[2];
    int64_t M = 1;
    for (size_t i = 3; i < sh.size(); ++i) M *= sh[i];
    std::vector<int64_t> oshape = {N, N, Nj};
    for (size_t i = 3; i < sh.size(); ++i) oshape.push_back(sh[i]);
    Tensor<T> D(oshape);
    const T* sp = S->value.data.data();
#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t i = 0; i < N; ++i)
        for (int64_t k = 0; k < N; ++k)
            for (int64_t j = 0; j < Nj; ++j) {
                T* dp = &D.data[static_cast<size_t>(((i * N + k) * Nj + j) * M)];
                for (int64_t p = 0; p < d; ++p) {
                    const T* a = sp + ((i * Nj + j) * d + p) * M;
                    const T* b = sp + ((k * Nj + j) * d + p) * M;
                    for (int64_t m = 0; m < M; ++m) dp[m] += a[m] * b[m];
                }
            }
    return ad::make_node<T>(std::move(D), {S}, [S, N, Nj, d, M](ad::Node<T>& n) {
        Tensor<T> gS(S->value.shape);
        const T* sp = S->value.data.data();
        const T* gd = n.grad.data.data();
#pragma omp parallel for schedule(static)
        for (int64_t i = 0; i < N; ++i)
            for (int64_t j = 0; j < Nj; ++j)
                for (int64_t k = 0; k < N; ++k) {
                    const T* g1 = gd + ((i * N + k) * Nj + j) * M;
                    const T* g2 = gd + ((k * N + i) * Nj + j) * M;
                    for (int64_t p = 0; p < d; ++p) {
                        T* out = &gS.data[static_cast<size_t>(((i * Nj + j) * d + p) * M)];
                        const T* b = sp + ((k * Nj + j) * d + p) * M;
                        for (int64_t m = 0; m < M; ++m) out[m] += (g1[m] + g2[m]) * b[m];
                    }
                }
        S->accumulate(gS);
    });
}

// PrimaryCaps: one group correlation producing all type/dimension channels,
// then layernorm across (type, dimension, rotation) per spatial site.
// features: (1,C,4,H,W), w: (N*d, C, 4, k, k) -> (N, d, 4, H, W)
template <class T>
Var<T> primary_caps(const Var<T>& features, const Var<T>& w, const Var<T>& b,
                    int64_t types, int64_t dim, const Var<T>& gamma, const Var<T>& beta) {
    auto h = group_correlation(features, w, b, 1);
    int64_t H = h->value.dim(3), W = h->value.dim(4);
    auto caps = ad::reshape(h, {types, dim, 4, H, W});
    return layer_norm(caps, {0, 1, 2}, gamma, beta);
}

// Prediction tensor S_ij = f_i * Psi_j, one k x k group filter bank per deeper
// type shared across shallow types; no bias.
// capsules: (N, d, 4, H, W), w: (Nj*dj, d, 4, k, k) -> (N, Nj, dj, 4, H, W)
template <class T>
Var<T> predict(const Var<T>& capsules, const Var<T>& w, int64_t deeper_types, int64_t deeper_dim) {
    int64_t N = capsules->value.dim(0);
    auto zero_b = ad::constant(Tensor<T>({deeper_types * deeper_dim}));
    auto S = group_correlation(capsules, w, zero_b, 1);  // (N, Nj*dj, 4, H', W')
    int64_t H = S->value.dim(3), W = S->value.dim(4);
    return ad::reshape(S, {N, deeper_types, deeper_dim, 4, H, W});
}

// Standardize predictions over (shallow type, dimension, state) jointly per
// deeper type (optionally pooled over deeper types too), then a learnable
// per-dimension affine.
// S: (N, Nj, d, 4, H, W); gamma/beta: (d)
template <class T>
Var<T> global_con_norm(const Var<T>& S, const Var<T>& gamma, const Var<T>& beta,
                       bool pool_over_deeper = false) {
    std::vector<int> axes = {0, 2, 3, 4, 5};
    if (pool_over_deeper) axes = {0, 1, 2, 3, 4, 5};
    int64_t d = S->value.dim(2);
    auto g = ad::reshape(gamma, {1, 1, d, 1, 1, 1});
    auto be = ad::reshape(beta, {1, 1, d, 1, 1, 1});
    auto m = ad::mean(S, axes, true);
    auto c = ad::sub(S, m);
    auto v = ad::mean(ad::mul(c, c), axes, true);
    auto xh = ad::div_(c, ad::sqrt_(ad::shift(v, static_cast<T>(ad::kEps))));
    return ad::add(ad::mul(g, xh), be);
}

// Degree-centrality routing weights, vectorized over deeper types and states.
// S: (N, Nj, d, 4, H, W) -> c: (N, Nj, 4, H, W); softmax over the shallow axis.
template <class T>
Var<T> routing_weights(const Var<T>& S) {
    const auto& sh = S->value.shape;
    int64_t N = sh[0], Nj = sh[1];
    auto dots = pairwise_dot(S);  // (N, N, Nj, 4, H, W)
    auto n = ad::sqrt_(ad::sum(ad::mul(S, S), {2}, false));  // (N, Nj, 4, H, W)
    auto ni = ad::reshape(n, {N, 1, Nj, sh[3], sh[4], sh[5]});
    auto nk = ad::reshape(n, {1, N, Nj, sh[3], sh[4], sh[5]});
    auto denom = ad::shift(ad::mul(ni, nk), static_cast<T>(ad::kEps));
    auto A = ad::div_(dots, denom);
    auto degree = ad::sum(A, {1}, false);  // (N, Nj, 4, H, W)
    return ad::softmax(degree, 0);
}

// Weighted sum of normalized predictions followed by squash.
// S: (N, Nj, d, 4, H, W), c: (N, Nj, 4, H, W) -> (Nj, d, 4, H, W)
template <class T>
Var<T> route(const Var<T>& S, const Var<T>& c) {
    const auto& sh = S->value.shape;
    auto ce = ad::reshape(c, {sh[0], sh[1], 1, sh[3], sh[4], sh[5]});
    auto f = ad::sum(ad::mul(S, ce), {0}, false);  // (Nj, d, 4, H, W)
    return squash(f, 1);
}

template <class T>
struct ConvCapsParams {
    Var<T> pred_w;  // (Nj*dj, d, 4, k, k)
    Var<T> gcn_gamma, gcn_beta;
    int64_t deeper_types = 0, deeper_dim = 0;
    bool pool_over_deeper = false;
};

// predict -> GlobalConNorm -> degree routing -> weighted sum + squash.
template <class T>
Var<T> conv_caps_forward(const Var<T>& capsules, const ConvCapsParams<T>& p,
                         Var<T>* weights_out = nullptr) {
    auto S = predict(capsules, p.pred_w, p.deeper_types, p.deeper_dim);
    auto Sn = global_con_norm(S, p.gcn_gamma, p.gcn_beta, p.pool_over_deeper);
    auto c = routing_weights(Sn);
    if (weights_out) *weights_out = c;
    return route(Sn, c);
}

// Shared 1x1 scalar projection; class score is the max over all
// transformational states (rotations x spatial positions).
// capsules: (Ncls, d, 4, H, W), w: (1, d, 4, 1, 1) -> scores (Ncls)
template <class T>
Var<T> proj_caps(const Var<T>& capsules, const Var<T>& w, const Var<T>& b) {
    auto proj = group_correlation(capsules, w, b, 1);  // (Ncls, 1, 4, H, W)
    return ad::max_reduce(proj, {1, 2, 3, 4}, false);
}

// NoProjCaps ablation: capsule 2-norm maximized over states.
template <class T>
Var<T> norm_scores(const Var<T>& capsules) {
    auto n = ad::sqrt_(ad::sum(ad::mul(capsules, capsules), {1}, false));  // (Ncls, 4, H, W)
    return ad::max_reduce(n, {1, 2, 3}, false);
}

// Plain (non-differentiated) degree-centrality weights for a single
// (deeper type, state) slot, per the per-slot contract.
template <class T>
std::vector<T> degree_score(const std::vector<std::vector<T>>& preds) {
    size_t n = preds.size();
    if (n == 0) throw std::invalid_argument("degree_score: need at least one prediction");
    std::vector<T> norm(n), degree(n, T(0));
    for (size_t i = 0; i < n; ++i) {
        double s = 0;
        for (T v : preds[i]) s += static_cast<double>(v) * v;
        norm[i] = static_cast<T>(std::sqrt(s));
    }
    for (size_t i = 0; i < n; ++i)
        for (size_t k = 0; k < n; ++k) {
            double dot = 0;
            for (size_t p = 0; p < preds[i].size(); ++p)
                dot += static_cast<double>(preds[i][p]) * preds[k][p];
            degree[i] += static_cast<T>(dot / (static_cast<double>(norm[i]) * norm[k] + ad::kEps));
        }
    T mx = *std::max_element(degree.begin(), degree.end());
    double z = 0;
    std::vector<T> c(n);
    for (size_t i = 0; i < n; ++i) z += std::exp(static_cast<double>(degree[i] - mx));
    for (size_t i = 0; i < n; ++i) c[i] = static_cast<T>(std::exp(static_cast<double>(degree[i] - mx)) / z);
    return c;
}

}  // namespace rcaps
