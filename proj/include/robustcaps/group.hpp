#pragma once

#include "robustcaps/tensor.hpp"

#include <array>
#include <stdexcept>

namespace rcaps {

// Element of p4: a counterclockwise rotation by r*90 degrees followed by an
// integer translation (u, v). Coordinates are mathematical: x right, y up.
struct GroupElement {
    int r = 0;  // rotation index mod 4
    int u = 0;  // x translation
    int v = 0;  // y translation

    bool operator==(const GroupElement&) const = default;
};

struct Point {
    int x = 0;
    int y = 0;
    bool operator==(const Point&) const = default;
};

inline GroupElement group_identity() { return {}; }

inline int mod4(int r) { return ((r % 4) + 4) % 4; }

// Rotate an integer vector counterclockwise by r*90 degrees.
inline std::array<int, 2> rot_vec(int r, int x, int y) {
    switch (mod4(r)) {
        case 0: return {x, y};
        case 1: return {-y, x};
        case 2: return {-x, -y};
        default: return {y, -x};
    }
}

inline GroupElement compose(const GroupElement& g, const GroupElement& h) {
    auto t = rot_vec(g.r, h.u, h.v);
    return {mod4(g.r + h.r), g.u + t[0], g.v + t[1]};
}

inline GroupElement inverse(const GroupElement& g) {
    int ri = mod4(-g.r);
    auto t = rot_vec(ri, g.u, g.v);
    return {ri, -t[0], -t[1]};
}

// Origin-based action on grid points: R(r)*p + (u, v).
inline Point act_on_point(const GroupElement& g, const Point& p) {
    auto q = rot_vec(g.r, p.x, p.y);
    return {q[0] + g.u, q[1] + g.v};
}

namespace detail {

// Source pixel lookup for the centered action on an H x W plane, in doubled
// integer coordinates so half-integer centers stay exact. Returns false when
// the source is off-grid or off-lattice.
inline bool centered_source(const GroupElement& g, int W, int H, int col, int row,
                            int& src_col, int& src_row) {
    // math coords, doubled: p2 = (2x, 2y), center c2 = (W-1, H-1)
    int x2 = 2 * col;
    int y2 = 2 * (H - 1 - row);
    int cx2 = W - 1, cy2 = H - 1;
    // source = R(-r) * (p - c - t) + c
    int ax = x2 - cx2 - 2 * g.u;
    int ay = y2 - cy2 - 2 * g.v;
    auto q = rot_vec(-g.r, ax, ay);
    int sx2 = q[0] + cx2;
    int sy2 = q[1] + cy2;
    if (sx2 % 2 != 0 || sy2 % 2 != 0) return false;
    int sx = sx2 / 2, sy = sy2 / 2;
    if (sx < 0 || sx >= W || sy < 0 || sy >= H) return false;
    src_col = sx;
    src_row = H - 1 - sy;
    return true;
}

}  // namespace detail

// [L_g f](x) = f(g^{-1} x) on a C x H x W plane stack; rotation about the grid
// center ((W-1)/2, (H-1)/2), out-of-grid reads are zero.
template <class T>
Tensor<T> act_on_scalar_field(const GroupElement& g, const Tensor<T>& f) {
    if (f.rank() != 3) throw std::invalid_argument("act_on_scalar_field: want (C,H,W), got " + shape_str(f.shape));
    int64_t C = f.dim(0), H = f.dim(1), W = f.dim(2);
    Tensor<T> out(f.shape);
    for (int64_t c = 0; c < C; ++c)
        for (int64_t row = 0; row < H; ++row)
            for (int64_t col = 0; col < W; ++col) {
                int sc, sr;
                if (detail::centered_source(g, static_cast<int>(W), static_cast<int>(H),
                                            static_cast<int>(col), static_cast<int>(row), sc, sr))
                    out.at({c, row, col}) = f.at({c, sr, sc});
            }
    return out;
}

// Action on a C x 4 x H x W group field: rotation channels shift cyclically by
// g.r and each plane is transformed spatially.
template <class T>
Tensor<T> act_on_group_field(const GroupElement& g, const Tensor<T>& f) {
    if (f.rank() != 4 || f.dim(1) != 4)
        throw std::invalid_argument("act_on_group_field: want (C,4,H,W), got " + shape_str(f.shape));
    int64_t C = f.dim(0), H = f.dim(2), W = f.dim(3);
    Tensor<T> out(f.shape);
    for (int64_t c = 0; c < C; ++c)
        for (int s = 0; s < 4; ++s) {
            int src_s = mod4(s - g.r);
            for (int64_t row = 0; row < H; ++row)
                for (int64_t col = 0; col < W; ++col) {
                    int sc, sr;
                    if (detail::centered_source(g, static_cast<int>(W), static_cast<int>(H),
                                                static_cast<int>(col), static_cast<int>(row), sc, sr))
                        out.at({c, s, row, col}) = f.at({c, src_s, sr, sc});
                }
        }
    return out;
}

// Exact counterclockwise rotation of a square k x k plane stored row-major;
// one step is out[i][j] = in[j][k-1-i]. `in` and `out` must not alias.
template <class T>
void rotate_plane_ccw(const T* in, T* out, int k, int times) {
    switch (mod4(times)) {
        case 0:
            std::copy(in, in + static_cast<size_t>(k) * k, out);
            break;
        case 1:
            for (int i = 0; i < k; ++i)
                for (int j = 0; j < k; ++j) out[i * k + j] = in[j * k + (k - 1 - i)];
            break;
        case 2:
            for (int i = 0; i < k; ++i)
                for (int j = 0; j < k; ++j) out[i * k + j] = in[(k - 1 - i) * k + (k - 1 - j)];
            break;
        default:
            for (int i = 0; i < k; ++i)
                for (int j = 0; j < k; ++j) out[i * k + j] = in[(k - 1 - j) * k + i];
            break;
    }
}

}  // namespace rcaps
