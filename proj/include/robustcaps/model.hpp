#pragma once

#include "robustcaps/capsules.hpp"

#include <map>
#include <string>

namespace rcaps {

struct BlockSpec {
    int channels = 32;
    int stride = 1;
};

struct ModelConfig {
    int in_channels = 3;
    int image_size = 32;
    int num_classes = 10;
    int stem_channels = 32;
    int stem_stride = 1;
    std::vector<BlockSpec> blocks = {{32, 1}, {32, 1}, {64, 2}, {64, 1}, {128, 2}, {128, 1}, {128, 1}};
    int caps_types = 32;
    int caps_dim = 16;
    int conv_caps_layers = 4;
    int pred_kernel = 3;
    bool no_precaps = false;
    bool no_projcaps = false;
    bool gcn_global_pool = false;

    int deeper_types(int layer) const {
        return layer == conv_caps_layers - 1 ? num_classes : caps_types;
    }
    int feature_channels() const { return blocks.empty() ? stem_channels : blocks.back().channels; }
    // NoPreCaps substitute: three planar convolutions whose strides reproduce
    // the PreCaps downsampling, then a lifting correlation.
    std::array<int, 3> nopre_strides() const {
        std::array<int, 3> s = {1, 1, 1};
        size_t j = 0;
        for (const auto& b : blocks)
            if (b.stride != 1 && j < 3) s[j++] = b.stride;
        return s;
    }
};

// Ordered named parameter tensors.
template <class T>
struct ParamStore {
    std::vector<std::string> names;
    std::map<std::string, Tensor<T>> values;

    void add(const std::string& name, Tensor<T> t) {
        if (values.count(name)) throw std::invalid_argument("duplicate parameter " + name);
        names.push_back(name);
        values.emplace(name, std::move(t));
    }
    Tensor<T>& get(const std::string& name) {
        auto it = values.find(name);
        if (it == values.end()) throw std::invalid_argument("unknown parameter " + name);
        return it->second;
    }
    const Tensor<T>& get(const std::string& name) const {
        auto it = values.find(name);
        if (it == values.end()) throw std::invalid_argument("unknown parameter " + name);
        return it->second;
    }
    int64_t total() const {
        int64_t n = 0;
        for (auto& [k, v] : values) n += v.numel();
        return n;
    }
};

template <class T>
using Leaves = std::map<std::string, Var<T>>;

template <class T>
Leaves<T> make_leaves(const ParamStore<T>& store, bool requires_grad = true) {
    Leaves<T> out;
    for (auto& [k, v] : store.values) out.emplace(k, ad::leaf(v, requires_grad));
    return out;
}

namespace detail {

template <class T>
Tensor<T> he_init(std::vector<int64_t> shape, int64_t fan_in, std::mt19937_64& rng) {
    return randn_tensor<T>(std::move(shape), rng, std::sqrt(2.0 / static_cast<double>(fan_in)));
}

}  // namespace detail

template <class T>
ParamStore<T> init_params(const ModelConfig& cfg, uint64_t seed) {
    std::mt19937_64 rng(seed);
    ParamStore<T> ps;
    int64_t k = 3;
    if (!cfg.no_precaps) {
        ps.add("precaps.stem.w", detail::he_init<T>({cfg.stem_channels, cfg.in_channels, k, k},
                                                    cfg.in_channels * k * k, rng));
        ps.add("precaps.stem.b", Tensor<T>({cfg.stem_channels}));
        int in_c = cfg.stem_channels;
        for (size_t i = 0; i < cfg.blocks.size(); ++i) {
            const auto& b = cfg.blocks[i];
            std::string pre = "precaps.block" + std::to_string(i) + ".";
            ps.add(pre + "w1", detail::he_init<T>({b.channels, in_c, 4, k, k}, in_c * 4 * k * k, rng));
            ps.add(pre + "b1", Tensor<T>({b.channels}));
            ps.add(pre + "g1", Tensor<T>({1, b.channels, 1, 1, 1}, T(1)));
            ps.add(pre + "be1", Tensor<T>({1, b.channels, 1, 1, 1}));
            ps.add(pre + "w2", detail::he_init<T>({b.channels, b.channels, 4, k, k}, b.channels * 4 * k * k, rng));
            ps.add(pre + "b2", Tensor<T>({b.channels}));
            ps.add(pre + "g2", Tensor<T>({1, b.channels, 1, 1, 1}, T(1)));
            ps.add(pre + "be2", Tensor<T>({1, b.channels, 1, 1, 1}));
            if (b.stride != 1 || b.channels != in_c) {
                ps.add(pre + "wskip", detail::he_init<T>({b.channels, in_c, 4, 1, 1}, in_c * 4, rng));
                ps.add(pre + "bskip", Tensor<T>({b.channels}));
            }
            in_c = b.channels;
        }
    } else {
        auto strides = cfg.nopre_strides();
        int out_c = cfg.feature_channels();
        std::array<int, 3> chans = {cfg.stem_channels, out_c, out_c};
        int in_c = cfg.in_channels;
        for (int i = 0; i < 3; ++i) {
            std::string pre = "nopre.conv" + std::to_string(i) + ".";
            ps.add(pre + "w", detail::he_init<T>({chans[static_cast<size_t>(i)], in_c, k, k}, in_c * k * k, rng));
            ps.add(pre + "b", Tensor<T>({chans[static_cast<size_t>(i)]}));
            ps.add(pre + "g", Tensor<T>({1, chans[static_cast<size_t>(i)], 1, 1}, T(1)));
            ps.add(pre + "be", Tensor<T>({1, chans[static_cast<size_t>(i)], 1, 1}));
            in_c = chans[static_cast<size_t>(i)];
        }
        ps.add("nopre.lift.w", detail::he_init<T>({out_c, out_c, k, k}, out_c * k * k, rng));
        ps.add("nopre.lift.b", Tensor<T>({out_c}));
        (void)strides;
    }
    int feat_c = cfg.feature_channels();
    ps.add("primary.w", detail::he_init<T>({static_cast<int64_t>(cfg.caps_types) * cfg.caps_dim, feat_c, 4, k, k},
                                           feat_c * 4 * k * k, rng));
    ps.add("primary.b", Tensor<T>({static_cast<int64_t>(cfg.caps_types) * cfg.caps_dim}));
    ps.add("primary.g", Tensor<T>({cfg.caps_types, cfg.caps_dim, 1, 1, 1}, T(1)));
    ps.add("primary.be", Tensor<T>({cfg.caps_types, cfg.caps_dim, 1, 1, 1}));
    int pk = cfg.pred_kernel;
    for (int L = 0; L < cfg.conv_caps_layers; ++L) {
        std::string pre = "convcaps" + std::to_string(L) + ".";
        int nj = cfg.deeper_types(L);
        ps.add(pre + "pred.w", detail::he_init<T>({static_cast<int64_t>(nj) * cfg.caps_dim, cfg.caps_dim, 4, pk, pk},
                                                  cfg.caps_dim * 4 * pk * pk, rng));
        ps.add(pre + "gcn.g", Tensor<T>({cfg.caps_dim}, T(1)));
        ps.add(pre + "gcn.be", Tensor<T>({cfg.caps_dim}));
    }
    if (!cfg.no_projcaps) {
        ps.add("proj.w", detail::he_init<T>({1, cfg.caps_dim, 4, 1, 1}, cfg.caps_dim * 4, rng));
        ps.add("proj.b", Tensor<T>({1}));
    }
    return ps;
}

template <class T>
PreCapsParams<T> precaps_params(const ModelConfig& cfg, const Leaves<T>& lv) {
    PreCapsParams<T> p;
    p.stem_w = lv.at("precaps.stem.w");
    p.stem_b = lv.at("precaps.stem.b");
    p.stem_stride = cfg.stem_stride;
    int in_c = cfg.stem_channels;
    for (size_t i = 0; i < cfg.blocks.size(); ++i) {
        const auto& b = cfg.blocks[i];
        std::string pre = "precaps.block" + std::to_string(i) + ".";
        ResidualBlockParams<T> rb;
        rb.w1 = lv.at(pre + "w1");
        rb.b1 = lv.at(pre + "b1");
        rb.g1 = lv.at(pre + "g1");
        rb.be1 = lv.at(pre + "be1");
        rb.w2 = lv.at(pre + "w2");
        rb.b2 = lv.at(pre + "b2");
        rb.g2 = lv.at(pre + "g2");
        rb.be2 = lv.at(pre + "be2");
        rb.stride = b.stride;
        if (b.stride != 1 || b.channels != in_c) {
            rb.wskip = lv.at(pre + "wskip");
            rb.bskip = lv.at(pre + "bskip");
        }
        p.blocks.push_back(rb);
        in_c = b.channels;
    }
    return p;
}

// Full forward for one sample. image: (C,H,W) -> class scores (num_classes).
// When `routing_traces` is given, the per-layer routing weights are appended.
template <class T>
Var<T> model_forward(const ModelConfig& cfg, const Leaves<T>& lv, const Tensor<T>& image,
                     std::vector<Var<T>>* routing_traces = nullptr) {
    auto img = ad::constant(image);
    auto x4 = ad::reshape(img, {1, image.dim(0), image.dim(1), image.dim(2)});
    Var<T> feat;
    if (!cfg.no_precaps) {
        feat = precaps_forward(x4, precaps_params(cfg, lv));
    } else {
        auto strides = cfg.nopre_strides();
        auto h = x4;
        for (int i = 0; i < 3; ++i) {
            std::string pre = "nopre.conv" + std::to_string(i) + ".";
            int st = strides[static_cast<size_t>(i)] * (i == 0 ? cfg.stem_stride : 1);
            h = plane_correlation(h, lv.at(pre + "w"), lv.at(pre + "b"), st);
            h = layer_norm(h, {1}, lv.at(pre + "g"), lv.at(pre + "be"));
            h = ad::relu(h);
        }
        feat = lift_correlation(h, lv.at("nopre.lift.w"), lv.at("nopre.lift.b"), 1);
    }
    auto caps = primary_caps(feat, lv.at("primary.w"), lv.at("primary.b"), cfg.caps_types,
                             cfg.caps_dim, lv.at("primary.g"), lv.at("primary.be"));
    for (int L = 0; L < cfg.conv_caps_layers; ++L) {
        std::string pre = "convcaps" + std::to_string(L) + ".";
        ConvCapsParams<T> cp;
        cp.pred_w = lv.at(pre + "pred.w");
        cp.gcn_gamma = lv.at(pre + "gcn.g");
        cp.gcn_beta = lv.at(pre + "gcn.be");
        cp.deeper_types = cfg.deeper_types(L);
        cp.deeper_dim = cfg.caps_dim;
        cp.pool_over_deeper = cfg.gcn_global_pool;
        Var<T> weights;
        caps = conv_caps_forward(caps, cp, routing_traces ? &weights : nullptr);
        if (routing_traces) routing_traces->push_back(weights);
    }
    if (cfg.no_projcaps) return norm_scores(caps);
    return proj_caps(caps, lv.at("proj.w"), lv.at("proj.b"));
}

// Argmax with ties broken by lowest class index.
template <class T>
int predict_class(const Tensor<T>& scores) {
    int best = 0;
    for (int64_t i = 1; i < scores.numel(); ++i)
        if (scores[i] > scores[best]) best = static_cast<int>(i);
    return best;
}

}  // namespace rcaps
