#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "robustcaps/model.hpp"
#include "naive_reference.hpp"

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

}  // namespace

TEST_CASE("squash hand value and norm bound") {
    Tensor<double> t({1, 2});
    t[0] = 3;
    t[1] = 4;  // norm 5 -> factor 25 / (26 * 5)
    auto y = squash(ad::leaf(t), 1);
    CHECK(y->value[0] == doctest::Approx(0.576923).epsilon(1e-5));
    CHECK(y->value[1] == doctest::Approx(0.769231).epsilon(1e-5));

    std::mt19937_64 rng(1);
    for (int trial = 0; trial < 50; ++trial) {
        auto v = random_tensor<double>({1, 6}, rng, -10, 10);
        auto s = squash(ad::leaf(v), 1);
        double n = 0;
        for (auto x : s->value.data) n += x * x;
        n = std::sqrt(n);
        CHECK(n < 1.0);
        CHECK(n >= 0.0);
    }
    // tiny vectors shrink towards zero, no blowup at the origin
    Tensor<double> small({1, 2}, 1e-12);
    auto ys = squash(ad::leaf(small), 1);
    CHECK(std::abs(ys->value[0]) < 1e-12);
}

TEST_CASE("squash keeps direction") {
    auto v = rnd({1, 4}, 2);
    auto y = squash(ad::leaf(v), 1);
    double dot = 0, nv = 0, ny = 0;
    for (int64_t i = 0; i < 4; ++i) {
        dot += v[i] * y->value[i];
        nv += v[i] * v[i];
        ny += y->value[i] * y->value[i];
    }
    CHECK(dot / std::sqrt(nv * ny) == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("gradient check: squash") {
    auto rep = ad::grad_check<double>(
        [](const V& v) { return sum_sq(squash(v, 1)); }, rnd({2, 3, 2}, 3), 1e-4);
    CHECK(rep.pass);
}

TEST_CASE("degree_score agreement example") {
    // two agreeing predictions and one off-axis: c = softmax(2, 2, 1)
    std::vector<std::vector<double>> preds = {{1, 0}, {1, 0}, {0, 1}};
    auto c = degree_score(preds);
    CHECK(c[0] == doctest::Approx(0.42232).epsilon(1e-4));
    CHECK(c[1] == doctest::Approx(0.42232).epsilon(1e-4));
    CHECK(c[2] == doctest::Approx(0.15536).epsilon(1e-4));
    CHECK(c[0] + c[1] + c[2] == doctest::Approx(1.0));
}

TEST_CASE("degree_score favors the majority cluster") {
    std::vector<std::vector<double>> preds = {{1, 0, 0}, {0.9, 0.1, 0}, {-0.2, 0.9, 0.1}};
    auto c = degree_score(preds);
    CHECK(c[0] > c[2]);
    CHECK(c[1] > c[2]);
}

TEST_CASE("pairwise_dot matches explicit loops and its gradient passes") {
    auto s = rnd({3, 2, 4, 2}, 4);
    auto D = pairwise_dot(ad::leaf(s));
    for (int64_t i = 0; i < 3; ++i)
        for (int64_t k = 0; k < 3; ++k)
            for (int64_t j = 0; j < 2; ++j)
                for (int64_t m = 0; m < 2; ++m) {
                    double want = 0;
                    for (int64_t p = 0; p < 4; ++p) want += s.at({i, j, p, m}) * s.at({k, j, p, m});
                    CHECK(D->value.at({i, k, j, m}) == doctest::Approx(want).epsilon(1e-9));
                }
    auto rep = ad::grad_check<double>(
        [](const V& v) { return sum_sq(pairwise_dot(v)); }, rnd({3, 2, 3, 2}, 5), 1e-4);
    CHECK(rep.pass);
}

TEST_CASE("global_con_norm standardizes per deeper type") {
    auto S = ad::leaf(rnd({4, 3, 5, 4, 2, 2}, 6));
    auto g = ad::leaf(Tensor<double>({5}, 1.0));
    auto b = ad::leaf(Tensor<double>({5}));
    auto out = global_con_norm(S, g, b);
    int64_t N = 4, Nj = 3, d = 5, G = 16;
    for (int64_t j = 0; j < Nj; ++j) {
        double m = 0, v = 0;
        for (int64_t i = 0; i < N; ++i)
            for (int64_t p = 0; p < d; ++p)
                for (int64_t gg = 0; gg < G; ++gg) m += out->value[((i * Nj + j) * d + p) * G + gg];
        m /= static_cast<double>(N * d * G);
        for (int64_t i = 0; i < N; ++i)
            for (int64_t p = 0; p < d; ++p)
                for (int64_t gg = 0; gg < G; ++gg) {
                    double x = out->value[((i * Nj + j) * d + p) * G + gg] - m;
                    v += x * x;
                }
        v /= static_cast<double>(N * d * G);
        CHECK(m == doctest::Approx(0.0).epsilon(1e-9));
        CHECK(v == doctest::Approx(1.0).epsilon(1e-5));
    }
}

TEST_CASE("global_con_norm affine applies per pose dimension") {
    auto S = ad::leaf(rnd({2, 2, 3, 4, 1, 1}, 7));
    Tensor<double> g({3});
    g[0] = 1;
    g[1] = 2;
    g[2] = 0;
    Tensor<double> b({3});
    b[2] = 9;
    auto out = global_con_norm(S, ad::leaf(g), ad::leaf(b));
    // dimension 2 collapses to the beta value everywhere
    for (int64_t i = 0; i < 2; ++i)
        for (int64_t j = 0; j < 2; ++j)
            for (int64_t s = 0; s < 4; ++s) CHECK(out->value.at({i, j, 2, s, 0, 0}) == doctest::Approx(9.0));
}

TEST_CASE("routing weights form a simplex over shallow types") {
    auto S = ad::leaf(rnd({5, 2, 3, 4, 2, 2}, 8));
    auto c = routing_weights(S);
    CHECK(c->value.shape == std::vector<int64_t>{5, 2, 4, 2, 2});
    int64_t N = 5, M = c->value.numel() / N;
    for (int64_t m = 0; m < M; ++m) {
        double s = 0;
        for (int64_t i = 0; i < N; ++i) {
            double x = c->value[i * M + m];
            CHECK(x >= 0.0);
            s += x;
        }
        CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
    }
}

TEST_CASE("routing weights are invariant to a global positive rescale") {
    auto s = rnd({4, 2, 3, 4, 1, 1}, 9);
    Tensor<double> s2 = s;
    for (auto& x : s2.data) x *= 5.0;
    auto c1 = routing_weights(ad::leaf(s));
    auto c2 = routing_weights(ad::leaf(s2));
    CHECK(max_abs_diff(c1->value, c2->value) < 1e-7);
}

TEST_CASE("full capsule layer matches the naive plain-loop reference") {
    std::mt19937_64 rng(10);
    for (int trial = 0; trial < 10; ++trial) {
        int64_t N = 2 + trial % 3, Nj = 2 + trial % 2, d = 3 + trial % 3, dj = d;
        int64_t H = 2 + trial % 2;
        auto caps = random_tensor<double>({N, d, 4, H, H}, rng);
        auto w = randn_tensor<double>({Nj * dj, d, 4, 3, 3}, rng, 0.4);
        auto gamma = random_tensor<double>({d}, rng, 0.5, 1.5);
        auto beta = random_tensor<double>({d}, rng, -0.3, 0.3);

        ConvCapsParams<double> p;
        p.pred_w = ad::leaf(w);
        p.gcn_gamma = ad::leaf(gamma);
        p.gcn_beta = ad::leaf(beta);
        p.deeper_types = Nj;
        p.deeper_dim = dj;
        p.pool_over_deeper = trial % 2 == 1;
        auto got = conv_caps_forward(ad::leaf(caps), p);

        naive::CapsLayerConfig cc{Nj, dj, p.pool_over_deeper};
        std::vector<double> gv(gamma.data.begin(), gamma.data.end());
        std::vector<double> bv(beta.data.begin(), beta.data.end());
        auto want = naive::conv_caps_forward(caps, w, gv, bv, cc);
        CHECK(max_abs_diff(got->value, want) < 1e-6);
    }
}

TEST_CASE("gradient check: full capsule layer") {
    auto rep = ad::grad_check_multi<double>(
        [](const std::vector<V>& v) {
            ConvCapsParams<double> p;
            p.pred_w = v[1];
            p.gcn_gamma = v[2];
            p.gcn_beta = v[3];
            p.deeper_types = 2;
            p.deeper_dim = 3;
            return sum_sq(conv_caps_forward(v[0], p));
        },
        {rnd({2, 3, 4, 2, 2}, 11), rnd({6, 3, 4, 1, 1}, 12), rnd({3}, 13), rnd({3}, 14)}, 5e-4);
    CHECK(rep.pass);
}

TEST_CASE("primary_caps shape and normalization") {
    auto feat = ad::leaf(rnd({1, 3, 4, 5, 5}, 15));
    auto w = ad::leaf(rnd({8, 3, 4, 3, 3}, 16));
    auto b = ad::leaf(Tensor<double>({8}));
    auto g = ad::leaf(Tensor<double>({2, 4, 1, 1, 1}, 1.0));
    auto be = ad::leaf(Tensor<double>({2, 4, 1, 1, 1}));
    auto caps = primary_caps(feat, w, b, 2, 4, g, be);
    CHECK(caps->value.shape == std::vector<int64_t>{2, 4, 4, 5, 5});
    // unit affine: mean 0 / var 1 over (type, dim, rotation) at each site
    for (int64_t y = 0; y < 5; ++y)
        for (int64_t x = 0; x < 5; ++x) {
            double m = 0, v = 0;
            for (int64_t t = 0; t < 2; ++t)
                for (int64_t p = 0; p < 4; ++p)
                    for (int64_t s = 0; s < 4; ++s) m += caps->value.at({t, p, s, y, x});
            m /= 32;
            for (int64_t t = 0; t < 2; ++t)
                for (int64_t p = 0; p < 4; ++p)
                    for (int64_t s = 0; s < 4; ++s) {
                        double dd = caps->value.at({t, p, s, y, x}) - m;
                        v += dd * dd;
                    }
            v /= 32;
            CHECK(m == doctest::Approx(0.0).epsilon(1e-9));
            CHECK(v == doctest::Approx(1.0).epsilon(1e-5));
        }
}

TEST_CASE("proj_caps takes the maximum over rotations and positions") {
    std::mt19937_64 rng(17);
    auto caps = random_tensor<double>({3, 2, 4, 2, 2}, rng);
    Tensor<double> w({1, 2, 4, 1, 1});
    w.at({0, 0, 0, 0, 0}) = 1.0;  // reads dim 0 at relative rotation 0
    Tensor<double> b({1});
    auto scores = proj_caps(ad::leaf(caps), ad::leaf(w), ad::leaf(b));
    CHECK(scores->value.shape == std::vector<int64_t>{3});
    for (int64_t cls = 0; cls < 3; ++cls) {
        double want = -1e30;
        for (int64_t s = 0; s < 4; ++s)
            for (int64_t y = 0; y < 2; ++y)
                for (int64_t x = 0; x < 2; ++x) want = std::max(want, caps.at({cls, 0, s, y, x}));
        CHECK(scores->value[cls] == doctest::Approx(want).epsilon(1e-9));
    }
}

TEST_CASE("norm_scores is the maximal capsule norm per class") {
    std::mt19937_64 rng(18);
    auto caps = random_tensor<double>({2, 3, 4, 2, 2}, rng);
    auto scores = norm_scores(ad::leaf(caps));
    for (int64_t cls = 0; cls < 2; ++cls) {
        double want = 0;
        for (int64_t s = 0; s < 4; ++s)
            for (int64_t y = 0; y < 2; ++y)
                for (int64_t x = 0; x < 2; ++x) {
                    double n2 = 0;
                    for (int64_t p = 0; p < 3; ++p) n2 += caps.at({cls, p, s, y, x}) * caps.at({cls, p, s, y, x});
                    want = std::max(want, std::sqrt(n2));
                }
        CHECK(scores->value[cls] == doctest::Approx(want).epsilon(1e-9));
    }
}

TEST_CASE("routing weights permute with a rotated capsule field") {
    // rotate the input capsule field by g; the routing weights of the rotated
    // input are the rotated routing weights of the original
    std::mt19937_64 rng(19);
    int64_t N = 3, d = 4, H = 4;
    auto caps = random_tensor<double>({N, d, 4, H, H}, rng);
    ConvCapsParams<double> p;
    p.pred_w = ad::leaf(randn_tensor<double>({2 * d, d, 4, 3, 3}, rng, 0.4));
    p.gcn_gamma = ad::leaf(Tensor<double>({d}, 1.0));
    p.gcn_beta = ad::leaf(Tensor<double>({d}));
    p.deeper_types = 2;
    p.deeper_dim = d;

    GroupElement g{1, 0, 0};
    Tensor<double> caps_g({N, d, 4, H, H});
    for (int64_t i = 0; i < N; ++i) {
        Tensor<double> slice({d, 4, H, H});
        std::copy_n(&caps.data[static_cast<size_t>(i * d * 4 * H * H)], d * 4 * H * H, slice.data.begin());
        auto moved = act_on_group_field(g, slice);
        std::copy_n(moved.data.begin(), d * 4 * H * H, &caps_g.data[static_cast<size_t>(i * d * 4 * H * H)]);
    }

    V c0, c1;
    conv_caps_forward(ad::leaf(caps), p, &c0);
    conv_caps_forward(ad::leaf(caps_g), p, &c1);

    // c: (N, Nj, 4, H, W) viewed as an (N * Nj)-channel group field
    Tensor<double> c0f({N * 2, 4, H, H}), want(c0f.shape);
    c0f.data = c0->value.data;
    want = act_on_group_field(g, c0f);
    Tensor<double> c1f({N * 2, 4, H, H});
    c1f.data = c1->value.data;
    CHECK(max_abs_diff(c1f, want) < 1e-9);
}
