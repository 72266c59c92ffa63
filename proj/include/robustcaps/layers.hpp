#pragma once

#include "robustcaps/autodiff.hpp"
#include "robustcaps/kernels.hpp"

namespace rcaps {

using ad::Var;

// Lifting correlation as a differentiable op.
// in: (B,C,H,W), w: (O,C,k,k), b: (O) -> (B,O,4,Ho,Wo)
template <class T>
Var<T> lift_correlation(const Var<T>& in, const Var<T>& w, const Var<T>& b, int stride) {
    Tensor<T> out = kernels::lift_forward(in->value, w->value, b->value, stride);
    return ad::make_node<T>(std::move(out), {in, w, b}, [in, w, b, stride](ad::Node<T>& n) {
        Tensor<T> gin, gw, gb;
        kernels::lift_backward(in->value, w->value, stride, n.grad, gin, gw, gb);
        if (in->requires_grad) in->accumulate(gin);
        if (w->requires_grad) w->accumulate(gw);
        if (b->requires_grad) b->accumulate(gb);
    });
}

// Group correlation as a differentiable op.
// in: (B,C,4,H,W), w: (O,C,4,k,k), b: (O) -> (B,O,4,Ho,Wo)
template <class T>
Var<T> group_correlation(const Var<T>& in, const Var<T>& w, const Var<T>& b, int stride) {
    Tensor<T> out = kernels::group_forward(in->value, w->value, b->value, stride);
    return ad::make_node<T>(std::move(out), {in, w, b}, [in, w, b, stride](ad::Node<T>& n) {
        Tensor<T> gin, gw, gb;
        kernels::group_backward(in->value, w->value, stride, n.grad, gin, gw, gb);
        if (in->requires_grad) in->accumulate(gin);
        if (w->requires_grad) w->accumulate(gw);
        if (b->requires_grad) b->accumulate(gb);
    });
}

// Plain planar correlation (NoPreCaps ablation path).
template <class T>
Var<T> plane_correlation(const Var<T>& in, const Var<T>& w, const Var<T>& b, int stride) {
    Tensor<T> out = kernels::plane_forward(in->value, w->value, b->value, stride);
    return ad::make_node<T>(std::move(out), {in, w, b}, [in, w, b, stride](ad::Node<T>& n) {
        Tensor<T> gin, gw, gb;
        kernels::plane_backward(in->value, w->value, stride, n.grad, gin, gw, gb);
        if (in->requires_grad) in->accumulate(gin);
        if (w->requires_grad) w->accumulate(gw);
        if (b->requires_grad) b->accumulate(gb);
    });
}

// gamma * (x - mean) / sqrt(var + eps) + beta, statistics over `axes`
// (biased variance). gamma/beta must broadcast against x.
template <class T>
Var<T> layer_norm(const Var<T>& x, std::vector<int> axes, const Var<T>& gamma, const Var<T>& beta) {
    auto m = ad::mean(x, axes, true);
    auto d = ad::sub(x, m);
    auto v = ad::mean(ad::mul(d, d), axes, true);
    auto xh = ad::div_(d, ad::sqrt_(ad::shift(v, static_cast<T>(ad::kEps))));
    return ad::add(ad::mul(gamma, xh), beta);
}

template <class T>
struct ResidualBlockParams {
    Var<T> w1, b1, g1, be1;  // gconv1 + norm
    Var<T> w2, b2, g2, be2;  // gconv2 + norm
    Var<T> wskip, bskip;     // 1x1 skip path, present iff needed
    int stride = 1;
    bool has_skip() const { return static_cast<bool>(wskip); }
};

// gconv(3x3, stride) -> norm -> relu -> gconv(3x3) -> norm, additive skip,
// final relu. Norm is layer normalization over (channel, rotation) per site.
template <class T>
Var<T> residual_block(const Var<T>& x, const ResidualBlockParams<T>& p) {
    auto h = group_correlation(x, p.w1, p.b1, p.stride);
    h = layer_norm(h, {1, 2}, p.g1, p.be1);
    h = ad::relu(h);
    h = group_correlation(h, p.w2, p.b2, 1);
    h = layer_norm(h, {1, 2}, p.g2, p.be2);
    Var<T> skip = p.has_skip() ? group_correlation(x, p.wskip, p.bskip, p.stride) : x;
    if (skip->value.shape != h->value.shape)
        throw std::invalid_argument("residual_block: skip shape " + shape_str(skip->value.shape) +
                                    " != main path " + shape_str(h->value.shape));
    return ad::relu(ad::add(h, skip));
}

template <class T>
struct PreCapsParams {
    Var<T> stem_w, stem_b;
    int stem_stride = 1;
    std::vector<ResidualBlockParams<T>> blocks;
};

// Lifting stem followed by the residual GCNN stack.
// image: (B,C,H,W) -> (B,Cout,4,H',W')
template <class T>
Var<T> precaps_forward(const Var<T>& image, const PreCapsParams<T>& p) {
    auto h = lift_correlation(image, p.stem_w, p.stem_b, p.stem_stride);
    for (const auto& blk : p.blocks) h = residual_block(h, blk);
    return h;
}

}  // namespace rcaps
