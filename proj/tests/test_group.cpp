#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "robustcaps/group.hpp"

using namespace rcaps;

namespace {

std::vector<GroupElement> small_elements(int extent) {
    std::vector<GroupElement> els;
    for (int r = 0; r < 4; ++r)
        for (int u = -extent; u <= extent; ++u)
            for (int v = -extent; v <= extent; ++v) els.push_back({r, u, v});
    return els;
}

// 3x3 homogeneous matrix oracle for the origin-based action.
struct Mat3 {
    int m[3][3] = {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
};

Mat3 to_matrix(const GroupElement& g) {
    static const int rot[4][2][2] = {{{1, 0}, {0, 1}}, {{0, -1}, {1, 0}}, {{-1, 0}, {0, -1}}, {{0, 1}, {-1, 0}}};
    Mat3 m;
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j) m.m[i][j] = rot[g.r][i][j];
    m.m[0][2] = g.u;
    m.m[1][2] = g.v;
    return m;
}

Mat3 matmul(const Mat3& a, const Mat3& b) {
    Mat3 c;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            c.m[i][j] = 0;
            for (int k = 0; k < 3; ++k) c.m[i][j] += a.m[i][k] * b.m[k][j];
        }
    return c;
}

bool mat_equal(const Mat3& a, const Mat3& b) {
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            if (a.m[i][j] != b.m[i][j]) return false;
    return true;
}

}  // namespace

TEST_CASE("rot_vec basic directions") {
    CHECK(rot_vec(0, 1, 0) == std::array<int, 2>{1, 0});
    CHECK(rot_vec(1, 1, 0) == std::array<int, 2>{0, 1});
    CHECK(rot_vec(2, 1, 0) == std::array<int, 2>{-1, 0});
    CHECK(rot_vec(3, 1, 0) == std::array<int, 2>{0, -1});
    CHECK(rot_vec(1, 0, 1) == std::array<int, 2>{-1, 0});
    CHECK(rot_vec(-1, 1, 0) == std::array<int, 2>{0, -1});
    CHECK(rot_vec(5, 2, 3) == rot_vec(1, 2, 3));
}

TEST_CASE("group axioms hold exhaustively on a small range") {
    auto els = small_elements(2);
    const GroupElement e = group_identity();
    for (const auto& g : els) {
        CHECK(compose(g, e) == g);
        CHECK(compose(e, g) == g);
        CHECK(compose(g, inverse(g)) == e);
        CHECK(compose(inverse(g), g) == e);
    }
}

TEST_CASE("composition is associative") {
    auto els = small_elements(1);
    for (size_t i = 0; i < els.size(); i += 3)
        for (size_t j = 0; j < els.size(); j += 5)
            for (size_t k = 0; k < els.size(); k += 7)
                CHECK(compose(compose(els[i], els[j]), els[k]) ==
                      compose(els[i], compose(els[j], els[k])));
}

TEST_CASE("composition matches the homogeneous matrix oracle") {
    auto els = small_elements(2);
    for (size_t i = 0; i < els.size(); i += 3)
        for (size_t j = 0; j < els.size(); j += 5) {
            auto lhs = to_matrix(compose(els[i], els[j]));
            auto rhs = matmul(to_matrix(els[i]), to_matrix(els[j]));
            CHECK(mat_equal(lhs, rhs));
        }
}

TEST_CASE("act_on_point matches the matrix oracle") {
    for (const auto& g : small_elements(2))
        for (int x = -2; x <= 2; ++x)
            for (int y = -2; y <= 2; ++y) {
                auto m = to_matrix(g);
                Point p = act_on_point(g, {x, y});
                CHECK(p.x == m.m[0][0] * x + m.m[0][1] * y + m.m[0][2]);
                CHECK(p.y == m.m[1][0] * x + m.m[1][1] * y + m.m[1][2]);
            }
}

TEST_CASE("scalar field action moves a delta as expected") {
    // 3x3 plane, delta at top-left corner (row 0, col 0) = math coords (0, 2)
    Tensor<float> f({1, 3, 3});
    f.at({0, 0, 0}) = 1.0f;

    auto r1 = act_on_scalar_field(GroupElement{1, 0, 0}, f);
    // ccw rotation about center sends (0,2) -> (0,0), i.e. row 2, col 0
    CHECK(r1.at({0, 2, 0}) == 1.0f);
    CHECK(r1.at({0, 0, 0}) == 0.0f);

    auto tr = act_on_scalar_field(GroupElement{0, 1, 0}, f);
    CHECK(tr.at({0, 0, 1}) == 1.0f);

    auto up = act_on_scalar_field(GroupElement{0, 0, -1}, f);
    CHECK(up.at({0, 1, 0}) == 1.0f);  // moves down one row
}

TEST_CASE("field action respects composition and inverse") {
    std::mt19937_64 rng(3);
    auto f = random_tensor<float>({2, 5, 5}, rng);
    GroupElement g{1, 1, 0}, h{2, 0, -1};
    auto lhs = act_on_scalar_field(g, act_on_scalar_field(h, f));
    auto rhs = act_on_scalar_field(compose(g, h), f);
    CHECK(max_abs_diff(lhs, rhs) == 0.0);

    // pure rotations are bijections on the grid, so g then g^-1 is identity
    GroupElement rot{3, 0, 0};
    auto back = act_on_scalar_field(inverse(rot), act_on_scalar_field(rot, f));
    CHECK(max_abs_diff(back, f) == 0.0);
}

TEST_CASE("group field action cycles rotation channels") {
    Tensor<float> f({1, 4, 3, 3});
    f.at({0, 2, 1, 1}) = 5.0f;  // center pixel of rotation channel 2
    auto out = act_on_group_field(GroupElement{1, 0, 0}, f);
    CHECK(out.at({0, 3, 1, 1}) == 5.0f);
    CHECK(out.at({0, 2, 1, 1}) == 0.0f);
}

TEST_CASE("even sized grids rotate exactly about the half integer center") {
    std::mt19937_64 rng(4);
    auto f = random_tensor<float>({1, 4, 4}, rng);
    auto once = act_on_scalar_field(GroupElement{1, 0, 0}, f);
    auto back = act_on_scalar_field(GroupElement{3, 0, 0}, once);
    CHECK(max_abs_diff(back, f) == 0.0);
    double sum_f = 0, sum_r = 0;
    for (auto v : f.data) sum_f += v;
    for (auto v : once.data) sum_r += v;
    CHECK(sum_f == doctest::Approx(sum_r));  // rotation permutes pixels
}

TEST_CASE("rotate_plane_ccw single step and periodicity") {
    // 2x2: [[1,2],[3,4]] rotated ccw once -> [[2,4],[1,3]]
    float in[4] = {1, 2, 3, 4}, out[4];
    rotate_plane_ccw(in, out, 2, 1);
    CHECK(out[0] == 2);
    CHECK(out[1] == 4);
    CHECK(out[2] == 1);
    CHECK(out[3] == 3);
    float four[4];
    rotate_plane_ccw(in, four, 2, 4);
    for (int i = 0; i < 4; ++i) CHECK(four[i] == in[i]);
    // two steps equal reversal
    float two[4];
    rotate_plane_ccw(in, two, 2, 2);
    CHECK(two[0] == 4);
    CHECK(two[1] == 3);
    CHECK(two[2] == 2);
    CHECK(two[3] == 1);
}

TEST_CASE("rotate_plane_ccw agrees with repeated single steps") {
    std::mt19937_64 rng(5);
    auto t = random_tensor<float>({5, 5}, rng);
    std::vector<float> step(25), twice(25), direct(25);
    rotate_plane_ccw(t.data.data(), step.data(), 5, 1);
    rotate_plane_ccw(step.data(), twice.data(), 5, 1);
    rotate_plane_ccw(t.data.data(), direct.data(), 5, 2);
    for (int i = 0; i < 25; ++i) CHECK(twice[i] == direct[i]);
}
