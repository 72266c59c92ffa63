#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "robustcaps/layers.hpp"

#include <numeric>

using namespace rcaps;
using V = ad::Var<double>;

namespace {

V sum_sq(const V& v) {
    std::vector<int> axes(v->value.rank());
    std::iota(axes.begin(), axes.end(), 0);
    return ad::sum(ad::mul(v, v), axes, false);
}

Tensor<double> rnd(std::vector<int64_t> shape, uint64_t seed) {
    std::mt19937_64 rng(seed);
    return random_tensor<double>(std::move(shape), rng);
}

ResidualBlockParams<double> random_block(int in_c, int out_c, int stride, uint64_t seed) {
    std::mt19937_64 rng(seed);
    ResidualBlockParams<double> p;
    p.w1 = ad::leaf(randn_tensor<double>({out_c, in_c, 4, 3, 3}, rng, 0.2));
    p.b1 = ad::leaf(Tensor<double>({out_c}));
    p.g1 = ad::leaf(Tensor<double>({1, out_c, 1, 1, 1}, 1.0));
    p.be1 = ad::leaf(Tensor<double>({1, out_c, 1, 1, 1}));
    p.w2 = ad::leaf(randn_tensor<double>({out_c, out_c, 4, 3, 3}, rng, 0.2));
    p.b2 = ad::leaf(Tensor<double>({out_c}));
    p.g2 = ad::leaf(Tensor<double>({1, out_c, 1, 1, 1}, 1.0));
    p.be2 = ad::leaf(Tensor<double>({1, out_c, 1, 1, 1}));
    p.stride = stride;
    if (stride != 1 || in_c != out_c) {
        p.wskip = ad::leaf(randn_tensor<double>({out_c, in_c, 4, 1, 1}, rng, 0.2));
        p.bskip = ad::leaf(Tensor<double>({out_c}));
    }
    return p;
}

}  // namespace

TEST_CASE("layer_norm standardizes over the requested axes") {
    auto x = ad::leaf(rnd({1, 3, 4, 2, 2}, 1));
    auto g = ad::leaf(Tensor<double>({1, 3, 1, 1, 1}, 1.0));
    auto b = ad::leaf(Tensor<double>({1, 3, 1, 1, 1}));
    auto y = layer_norm(x, {1, 2}, g, b);
    // per spatial site, mean 0 and variance 1 over (channel, rotation)
    for (int64_t yy = 0; yy < 2; ++yy)
        for (int64_t xx = 0; xx < 2; ++xx) {
            double m = 0, v = 0;
            for (int64_t c = 0; c < 3; ++c)
                for (int64_t s = 0; s < 4; ++s) m += y->value.at({0, c, s, yy, xx});
            m /= 12;
            for (int64_t c = 0; c < 3; ++c)
                for (int64_t s = 0; s < 4; ++s) {
                    double d = y->value.at({0, c, s, yy, xx}) - m;
                    v += d * d;
                }
            v /= 12;
            CHECK(m == doctest::Approx(0.0).epsilon(1e-9));
            CHECK(v == doctest::Approx(1.0).epsilon(1e-6));
        }
}

TEST_CASE("layer_norm hand example") {
    // values {1, 3}: mean 2, sd 1 -> {-1, 1}; gamma 2, beta 0.5 -> {-1.5, 2.5}
    Tensor<double> t({1, 2});
    t[0] = 1;
    t[1] = 3;
    auto y = layer_norm(ad::leaf(t), {1}, ad::leaf(Tensor<double>({1, 1}, 2.0)),
                        ad::leaf(Tensor<double>({1, 1}, 0.5)));
    CHECK(y->value[0] == doctest::Approx(-1.5).epsilon(1e-4));
    CHECK(y->value[1] == doctest::Approx(2.5).epsilon(1e-4));
}

TEST_CASE("layer_norm is invariant to input shift and scale") {
    auto x = rnd({1, 4, 4, 3, 3}, 2);
    Tensor<double> x2 = x;
    for (auto& v : x2.data) v = v * 7.0 + 11.0;
    auto g = ad::leaf(Tensor<double>({1, 4, 1, 1, 1}, 1.0));
    auto b = ad::leaf(Tensor<double>({1, 4, 1, 1, 1}));
    auto y1 = layer_norm(ad::leaf(x), {1, 2}, g, b);
    auto y2 = layer_norm(ad::leaf(x2), {1, 2}, g, b);
    // the epsilon inside the variance makes this approximate, not exact
    CHECK(max_abs_diff(y1->value, y2->value) < 1e-6);
}

TEST_CASE("correlation layer wrappers reproduce the kernels") {
    std::mt19937_64 rng(3);
    auto in = random_tensor<double>({1, 2, 5, 5}, rng);
    auto w = random_tensor<double>({3, 2, 3, 3}, rng);
    auto b = random_tensor<double>({3}, rng);
    auto out = lift_correlation(ad::leaf(in), ad::leaf(w), ad::leaf(b), 1);
    CHECK(max_abs_diff(out->value, kernels::lift_forward(in, w, b, 1)) == 0.0);
}

TEST_CASE("gradient check: correlation layers") {
    auto rep_l = ad::grad_check_multi<double>(
        [](const std::vector<V>& v) { return sum_sq(lift_correlation(v[0], v[1], v[2], 2)); },
        {rnd({1, 2, 5, 5}, 4), rnd({2, 2, 3, 3}, 5), rnd({2}, 6)}, 1e-4);
    CHECK(rep_l.pass);

    auto rep_g = ad::grad_check_multi<double>(
        [](const std::vector<V>& v) { return sum_sq(group_correlation(v[0], v[1], v[2], 1)); },
        {rnd({1, 2, 4, 4, 4}, 7), rnd({2, 2, 4, 3, 3}, 8), rnd({2}, 9)}, 1e-4);
    CHECK(rep_g.pass);

    auto rep_p = ad::grad_check_multi<double>(
        [](const std::vector<V>& v) { return sum_sq(plane_correlation(v[0], v[1], v[2], 2)); },
        {rnd({1, 2, 5, 5}, 10), rnd({2, 2, 3, 3}, 11), rnd({2}, 12)}, 1e-4);
    CHECK(rep_p.pass);
}

TEST_CASE("residual block output shapes") {
    auto x = ad::leaf(rnd({1, 3, 4, 8, 8}, 13));
    auto same = residual_block(x, random_block(3, 3, 1, 14));
    CHECK(same->value.shape == std::vector<int64_t>{1, 3, 4, 8, 8});
    auto down = residual_block(x, random_block(3, 5, 2, 15));
    CHECK(down->value.shape == std::vector<int64_t>{1, 5, 4, 4, 4});
}

TEST_CASE("identity-free skip path: zero main weights leave relu(skip)") {
    auto x = ad::leaf(rnd({1, 3, 4, 6, 6}, 16));
    auto p = random_block(3, 3, 1, 17);
    // zero the second conv and its norm gain: main path contributes only be2
    for (auto& v : p.w2->value.data) v = 0;
    for (auto& v : p.g2->value.data) v = 0;
    auto y = residual_block(x, p);
    Tensor<double> want(x->value.shape);
    for (int64_t i = 0; i < want.numel(); ++i) want[i] = std::max(x->value[i], 0.0);
    CHECK(max_abs_diff(y->value, want) < 1e-12);
}

TEST_CASE("gradient check: residual block") {
    auto x = rnd({1, 2, 4, 4, 4}, 18);
    auto p = random_block(2, 3, 2, 19);
    std::vector<V> leaves = {p.w1, p.b1, p.g1, p.be1, p.w2, p.b2, p.g2, p.be2, p.wskip, p.bskip};
    std::vector<Tensor<double>> init;
    init.push_back(x);
    for (auto& l : leaves) init.push_back(l->value);
    auto rep = ad::grad_check_multi<double>(
        [&p](const std::vector<V>& v) {
            ResidualBlockParams<double> q;
            q.w1 = v[1];
            q.b1 = v[2];
            q.g1 = v[3];
            q.be1 = v[4];
            q.w2 = v[5];
            q.b2 = v[6];
            q.g2 = v[7];
            q.be2 = v[8];
            q.wskip = v[9];
            q.bskip = v[10];
            q.stride = p.stride;
            return sum_sq(residual_block(v[0], q));
        },
        init, 5e-4);
    CHECK(rep.pass);
}

TEST_CASE("feature stack shapes follow the stride plan") {
    // 32x32 input through the full-scale stride plan lands on an 8x8 grid
    std::mt19937_64 rng(20);
    PreCapsParams<double> p;
    p.stem_w = ad::leaf(randn_tensor<double>({4, 3, 3, 3}, rng, 0.2));
    p.stem_b = ad::leaf(Tensor<double>({4}));
    int in_c = 4;
    std::vector<std::pair<int, int>> plan = {{4, 1}, {6, 2}, {6, 1}, {8, 2}};
    uint64_t seed = 21;
    for (auto [c, s] : plan) {
        p.blocks.push_back(random_block(in_c, c, s, seed++));
        in_c = c;
    }
    auto img = ad::leaf(rnd({1, 3, 32, 32}, 22));
    auto out = precaps_forward(img, p);
    CHECK(out->value.shape == std::vector<int64_t>{1, 8, 4, 8, 8});
}

TEST_CASE("odd input sizes round up under same padding") {
    std::mt19937_64 rng(23);
    PreCapsParams<double> p;
    p.stem_w = ad::leaf(randn_tensor<double>({2, 1, 3, 3}, rng, 0.3));
    p.stem_b = ad::leaf(Tensor<double>({2}));
    p.blocks.push_back(random_block(2, 2, 2, 24));
    auto img = ad::leaf(rnd({1, 1, 28, 28}, 25));
    auto out = precaps_forward(img, p);
    CHECK(out->value.shape == std::vector<int64_t>{1, 2, 4, 14, 14});
    p.blocks.push_back(random_block(2, 2, 2, 26));
    auto out2 = precaps_forward(img, p);
    CHECK(out2->value.shape == std::vector<int64_t>{1, 2, 4, 7, 7});
}
