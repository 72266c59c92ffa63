#pragma once

#include "robustcaps/group.hpp"
#include "robustcaps/tensor.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace rcaps::kernels {

inline int64_t conv_out_extent(int64_t n, int k, int stride) {
    int pad = k / 2;
    return (n + 2 * pad - k) / stride + 1;
}

inline void check_conv_args(int64_t in_c, int64_t filt_in_c, int k, int stride) {
    if (in_c != filt_in_c)
        throw std::invalid_argument("correlation: input channels " + std::to_string(in_c) +
                                    " != filter in_channels " + std::to_string(filt_in_c));
    if (stride < 1) throw std::invalid_argument("correlation: stride must be >= 1");
    if (k % 2 == 0) throw std::invalid_argument("correlation: filter size must be odd");
}

// Filter copies rotated counterclockwise per output rotation.
// Lift: wrot[o][r] = rot_ccw_r(w[o][c]); layout (O, 4, C, k, k).
template <class T>
Tensor<T> rotated_lift_filters(const Tensor<T>& w) {
    int64_t O = w.dim(0), C = w.dim(1);
    int k = static_cast<int>(w.dim(2));
    Tensor<T> wr({O, 4, C, w.dim(2), w.dim(3)});
    for (int64_t o = 0; o < O; ++o)
        for (int r = 0; r < 4; ++r)
            for (int64_t c = 0; c < C; ++c)
                rotate_plane_ccw(&w.data[static_cast<size_t>((o * C + c) * k * k)],
                                 &wr.data[static_cast<size_t>(((o * 4 + r) * C + c) * k * k)], k, r);
    return wr;
}

// Group: wrot[o][r][c][s] = rot_ccw_r(w[o][c][(s-r) mod 4]); layout (O, 4, C, 4, k, k).
template <class T>
Tensor<T> rotated_group_filters(const Tensor<T>& w) {
    int64_t O = w.dim(0), C = w.dim(1);
    int k = static_cast<int>(w.dim(3));
    Tensor<T> wr({O, 4, C, 4, w.dim(3), w.dim(4)});
    for (int64_t o = 0; o < O; ++o)
        for (int r = 0; r < 4; ++r)
            for (int64_t c = 0; c < C; ++c)
                for (int s = 0; s < 4; ++s) {
                    int q = mod4(s - r);
                    rotate_plane_ccw(&w.data[static_cast<size_t>(((o * C + c) * 4 + q) * k * k)],
                                     &wr.data[static_cast<size_t>((((o * 4 + r) * C + c) * 4 + s) * k * k)], k, r);
                }
    return wr;
}

namespace detail {

// out[yo][xo] += wv * in[yo*st + dy - pad][xo*st + dx - pad], bounds-clipped.
template <class T>
inline void accum_plane(T* out, const T* in, T wv, int64_t Ho, int64_t Wo, int64_t H, int64_t W,
                        int dy, int dx, int pad, int st) {
    for (int64_t yo = 0; yo < Ho; ++yo) {
        int64_t yi = yo * st + dy - pad;
        if (yi < 0 || yi >= H) continue;
        int64_t xo_lo = 0, xo_hi = Wo;
        // xi = xo*st + dx - pad in [0, W)
        while (xo_lo < Wo && xo_lo * st + dx - pad < 0) ++xo_lo;
        while (xo_hi > xo_lo && (xo_hi - 1) * st + dx - pad >= W) --xo_hi;
        const T* ip = in + yi * W + dx - pad;
        T* op = out + yo * Wo;
        if (st == 1) {
            for (int64_t xo = xo_lo; xo < xo_hi; ++xo) op[xo] += wv * ip[xo];
        } else {
            for (int64_t xo = xo_lo; xo < xo_hi; ++xo) op[xo] += wv * ip[xo * st];
        }
    }
}

}  // namespace detail

// ---- lifting correlation: (B,C,H,W) x (O,C,k,k) -> (B,O,4,Ho,Wo) -----------

template <class T>
Tensor<T> lift_forward(const Tensor<T>& in, const Tensor<T>& w, const Tensor<T>& bias, int stride) {
    int64_t B = in.dim(0), C = in.dim(1), H = in.dim(2), W = in.dim(3);
    int64_t O = w.dim(0);
    int k = static_cast<int>(w.dim(2));
    check_conv_args(C, w.dim(1), k, stride);
    int pad = k / 2;
    int64_t Ho = conv_out_extent(H, k, stride), Wo = conv_out_extent(W, k, stride);
    Tensor<T> wr = rotated_lift_filters(w);
    Tensor<T> out({B, O, 4, Ho, Wo});
#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t b = 0; b < B; ++b)
        for (int64_t o = 0; o < O; ++o)
            for (int r = 0; r < 4; ++r) {
                T* op = &out.data[static_cast<size_t>(((b * O + o) * 4 + r) * Ho * Wo)];
                for (int64_t i = 0; i < Ho * Wo; ++i) op[i] = bias[o];
                for (int64_t c = 0; c < C; ++c) {
                    const T* ip = &in.data[static_cast<size_t>((b * C + c) * H * W)];
                    const T* wp = &wr.data[static_cast<size_t>(((o * 4 + r) * C + c) * k * k)];
                    for (int dy = 0; dy < k; ++dy)
                        for (int dx = 0; dx < k; ++dx)
                            detail::accum_plane(op, ip, wp[dy * k + dx], Ho, Wo, H, W, dy, dx, pad, stride);
                }
            }
    return out;
}

template <class T>
void lift_backward(const Tensor<T>& in, const Tensor<T>& w, int stride, const Tensor<T>& gout,
                   Tensor<T>& gin, Tensor<T>& gw, Tensor<T>& gb) {
    int64_t B = in.dim(0), C = in.dim(1), H = in.dim(2), W = in.dim(3);
    int64_t O = w.dim(0);
    int k = static_cast<int>(w.dim(2));
    int pad = k / 2;
    int64_t Ho = gout.dim(3), Wo = gout.dim(4);
    Tensor<T> wr = rotated_lift_filters(w);
    gin = Tensor<T>(in.shape);
    gw = Tensor<T>(w.shape);
    gb = Tensor<T>({O});

    for (int64_t o = 0; o < O; ++o) {
        T acc = 0;
        for (int64_t b = 0; b < B; ++b) {
            const T* gp = &gout.data[static_cast<size_t>((b * O + o) * 4 * Ho * Wo)];
            for (int64_t i = 0; i < 4 * Ho * Wo; ++i) acc += gp[i];
        }
        gb[o] = acc;
    }

#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c) {
            T* gip = &gin.data[static_cast<size_t>((b * C + c) * H * W)];
            for (int64_t o = 0; o < O; ++o)
                for (int r = 0; r < 4; ++r) {
                    const T* gp = &gout.data[static_cast<size_t>(((b * O + o) * 4 + r) * Ho * Wo)];
                    const T* wp = &wr.data[static_cast<size_t>(((o * 4 + r) * C + c) * k * k)];
                    for (int dy = 0; dy < k; ++dy)
                        for (int dx = 0; dx < k; ++dx) {
                            T wv = wp[dy * k + dx];
                            if (wv == T(0)) continue;
                            for (int64_t yo = 0; yo < Ho; ++yo) {
                                int64_t yi = yo * stride + dy - pad;
                                if (yi < 0 || yi >= H) continue;
                                for (int64_t xo = 0; xo < Wo; ++xo) {
                                    int64_t xi = xo * stride + dx - pad;
                                    if (xi < 0 || xi >= W) continue;
                                    gip[yi * W + xi] += wv * gp[yo * Wo + xo];
                                }
                            }
                        }
                }
        }

#pragma omp parallel for schedule(static)
    for (int64_t o = 0; o < O; ++o) {
        std::vector<T> gwrot(static_cast<size_t>(k) * k);
        std::vector<T> unrot(static_cast<size_t>(k) * k);
        for (int64_t c = 0; c < C; ++c) {
            T* gwp = &gw.data[static_cast<size_t>((o * C + c) * k * k)];
            for (int r = 0; r < 4; ++r) {
                std::fill(gwrot.begin(), gwrot.end(), T(0));
                for (int64_t b = 0; b < B; ++b) {
                    const T* gp = &gout.data[static_cast<size_t>(((b * O + o) * 4 + r) * Ho * Wo)];
                    const T* ip = &in.data[static_cast<size_t>((b * C + c) * H * W)];
                    for (int dy = 0; dy < k; ++dy)
                        for (int dx = 0; dx < k; ++dx) {
                            T acc = 0;
                            for (int64_t yo = 0; yo < Ho; ++yo) {
                                int64_t yi = yo * stride + dy - pad;
                                if (yi < 0 || yi >= H) continue;
                                for (int64_t xo = 0; xo < Wo; ++xo) {
                                    int64_t xi = xo * stride + dx - pad;
                                    if (xi < 0 || xi >= W) continue;
                                    acc += gp[yo * Wo + xo] * ip[yi * W + xi];
                                }
                            }
                            gwrot[static_cast<size_t>(dy * k + dx)] += acc;
                        }
                }
                rotate_plane_ccw(gwrot.data(), unrot.data(), k, 4 - r);
                for (int64_t i = 0; i < k * k; ++i) gwp[i] += unrot[static_cast<size_t>(i)];
            }
        }
    }
}

// ---- group correlation: (B,C,4,H,W) x (O,C,4,k,k) -> (B,O,4,Ho,Wo) ---------

template <class T>
Tensor<T> group_forward(const Tensor<T>& in, const Tensor<T>& w, const Tensor<T>& bias, int stride) {
    int64_t B = in.dim(0), C = in.dim(1), H = in.dim(3), W = in.dim(4);
    int64_t O = w.dim(0);
    int k = static_cast<int>(w.dim(3));
    check_conv_args(C, w.dim(1), k, stride);
    int pad = k / 2;
    int64_t Ho = conv_out_extent(H, k, stride), Wo = conv_out_extent(W, k, stride);
    Tensor<T> wr = rotated_group_filters(w);
    Tensor<T> out({B, O, 4, Ho, Wo});
#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t b = 0; b < B; ++b)
        for (int64_t o = 0; o < O; ++o)
            for (int r = 0; r < 4; ++r) {
                T* op = &out.data[static_cast<size_t>(((b * O + o) * 4 + r) * Ho * Wo)];
                for (int64_t i = 0; i < Ho * Wo; ++i) op[i] = bias[o];
                for (int64_t c = 0; c < C; ++c)
                    for (int s = 0; s < 4; ++s) {
                        const T* ip = &in.data[static_cast<size_t>(((b * C + c) * 4 + s) * H * W)];
                        const T* wp = &wr.data[static_cast<size_t>((((o * 4 + r) * C + c) * 4 + s) * k * k)];
                        for (int dy = 0; dy < k; ++dy)
                            for (int dx = 0; dx < k; ++dx)
                                detail::accum_plane(op, ip, wp[dy * k + dx], Ho, Wo, H, W, dy, dx, pad, stride);
                    }
            }
    return out;
}

template <class T>
void group_backward(const Tensor<T>& in, const Tensor<T>& w, int stride, const Tensor<T>& gout,
                    Tensor<T>& gin, Tensor<T>& gw, Tensor<T>& gb) {
    int64_t B = in.dim(0), C = in.dim(1), H = in.dim(3), W = in.dim(4);
    int64_t O = w.dim(0);
    int k = static_cast<int>(w.dim(3));
    int pad = k / 2;
    int64_t Ho = gout.dim(3), Wo = gout.dim(4);
    Tensor<T> wr = rotated_group_filters(w);
    gin = Tensor<T>(in.shape);
    gw = Tensor<T>(w.shape);
    gb = Tensor<T>({O});

    for (int64_t o = 0; o < O; ++o) {
        T acc = 0;
        for (int64_t b = 0; b < B; ++b) {
            const T* gp = &gout.data[static_cast<size_t>((b * O + o) * 4 * Ho * Wo)];
            for (int64_t i = 0; i < 4 * Ho * Wo; ++i) acc += gp[i];
        }
        gb[o] = acc;
    }

#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c)
            for (int s = 0; s < 4; ++s) {
                T* gip = &gin.data[static_cast<size_t>(((b * C + c) * 4 + s) * H * W)];
                for (int64_t o = 0; o < O; ++o)
                    for (int r = 0; r < 4; ++r) {
                        const T* gp = &gout.data[static_cast<size_t>(((b * O + o) * 4 + r) * Ho * Wo)];
                        const T* wp = &wr.data[static_cast<size_t>((((o * 4 + r) * C + c) * 4 + s) * k * k)];
                        for (int dy = 0; dy < k; ++dy)
                            for (int dx = 0; dx < k; ++dx) {
                                T wv = wp[dy * k + dx];
                                if (wv == T(0)) continue;
                                for (int64_t yo = 0; yo < Ho; ++yo) {
                                    int64_t yi = yo * stride + dy - pad;
                                    if (yi < 0 || yi >= H) continue;
                                    for (int64_t xo = 0; xo < Wo; ++xo) {
                                        int64_t xi = xo * stride + dx - pad;
                                        if (xi < 0 || xi >= W) continue;
                                        gip[yi * W + xi] += wv * gp[yo * Wo + xo];
                                    }
                                }
                            }
                    }
            }

#pragma omp parallel for schedule(static)
    for (int64_t o = 0; o < O; ++o) {
        std::vector<T> gwrot(static_cast<size_t>(k) * k);
        std::vector<T> unrot(static_cast<size_t>(k) * k);
        for (int64_t c = 0; c < C; ++c)
            for (int r = 0; r < 4; ++r)
                for (int s = 0; s < 4; ++s) {
                    int q = mod4(s - r);
                    T* gwp = &gw.data[static_cast<size_t>(((o * C + c) * 4 + q) * k * k)];
                    std::fill(gwrot.begin(), gwrot.end(), T(0));
                    for (int64_t b = 0; b < B; ++b) {
                        const T* gp = &gout.data[static_cast<size_t>(((b * O + o) * 4 + r) * Ho * Wo)];
                        const T* ip = &in.data[static_cast<size_t>(((b * C + c) * 4 + s) * H * W)];
                        for (int dy = 0; dy < k; ++dy)
                            for (int dx = 0; dx < k; ++dx) {
                                T acc = 0;
                                for (int64_t yo = 0; yo < Ho; ++yo) {
                                    int64_t yi = yo * stride + dy - pad;
                                    if (yi < 0 || yi >= H) continue;
                                    for (int64_t xo = 0; xo < Wo; ++xo) {
                                        int64_t xi = xo * stride + dx - pad;
                                        if (xi < 0 || xi >= W) continue;
                                        acc += gp[yo * Wo + xo] * ip[yi * W + xi];
                                    }
                                }
                                gwrot[static_cast<size_t>(dy * k + dx)] += acc;
                            }
                    }
                    rotate_plane_ccw(gwrot.data(), unrot.data(), k, 4 - r);
                    for (int64_t i = 0; i < k * k; ++i) gwp[i] += unrot[static_cast<size_t>(i)];
                }
    }
}

// ---- planar correlation: (B,C,H,W) x (O,C,k,k) -> (B,O,Ho,Wo) --------------

template <class T>
Tensor<T> plane_forward(const Tensor<T>& in, const Tensor<T>& w, const Tensor<T>& bias, int stride) {
    int64_t B = in.dim(0), C = in.dim(1), H = in.dim(2), W = in.dim(3);
    int64_t O = w.dim(0);
    int k = static_cast<int>(w.dim(2));
    check_conv_args(C, w.dim(1), k, stride);
    int pad = k / 2;
    int64_t Ho = conv_out_extent(H, k, stride), Wo = conv_out_extent(W, k, stride);
    Tensor<T> out({B, O, Ho, Wo});
#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t b = 0; b < B; ++b)
        for (int64_t o = 0; o < O; ++o) {
            T* op = &out.data[static_cast<size_t>((b * O + o) * Ho * Wo)];
            for (int64_t i = 0; i < Ho * Wo; ++i) op[i] = bias[o];
            for (int64_t c = 0; c < C; ++c) {
                const T* ip = &in.data[static_cast<size_t>((b * C + c) * H * W)];
                const T* wp = &w.data[static_cast<size_t>((o * C + c) * k * k)];
                for (int dy = 0; dy < k; ++dy)
                    for (int dx = 0; dx < k; ++dx)
                        detail::accum_plane(op, ip, wp[dy * k + dx], Ho, Wo, H, W, dy, dx, pad, stride);
            }
        }
    return out;
}

template <class T>
void plane_backward(const Tensor<T>& in, const Tensor<T>& w, int stride, const Tensor<T>& gout,
                    Tensor<T>& gin, Tensor<T>& gw, Tensor<T>& gb) {
    int64_t B = in.dim(0), C = in.dim(1), H = in.dim(2), W = in.dim(3);
    int64_t O = w.dim(0);
    int k = static_cast<int>(w.dim(2));
    int pad = k / 2;
    int64_t Ho = gout.dim(2), Wo = gout.dim(3);
    gin = Tensor<T>(in.shape);
    gw = Tensor<T>(w.shape);
    gb = Tensor<T>({O});
    for (int64_t o = 0; o < O; ++o) {
        T acc = 0;
        for (int64_t b = 0; b < B; ++b) {
            const T* gp = &gout.data[static_cast<size_t>((b * O + o) * Ho * Wo)];
            for (int64_t i = 0; i < Ho * Wo; ++i) acc += gp[i];
        }
        gb[o] = acc;
    }
#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c) {
            T* gip = &gin.data[static_cast<size_t>((b * C + c) * H * W)];
            for (int64_t o = 0; o < O; ++o) {
                const T* gp = &gout.data[static_cast<size_t>((b * O + o) * Ho * Wo)];
                const T* wp = &w.data[static_cast<size_t>((o * C + c) * k * k)];
                for (int dy = 0; dy < k; ++dy)
                    for (int dx = 0; dx < k; ++dx) {
                        T wv = wp[dy * k + dx];
                        if (wv == T(0)) continue;
                        for (int64_t yo = 0; yo < Ho; ++yo) {
                            int64_t yi = yo * stride + dy - pad;
                            if (yi < 0 || yi >= H) continue;
                            for (int64_t xo = 0; xo < Wo; ++xo) {
                                int64_t xi = xo * stride + dx - pad;
                                if (xi < 0 || xi >= W) continue;
                                gip[yi * W + xi] += wv * gp[yo * Wo + xo];
                            }
                        }
                    }
            }
        }
#pragma omp parallel for schedule(static)
    for (int64_t o = 0; o < O; ++o)
        for (int64_t c = 0; c < C; ++c) {
            T* gwp = &gw.data[static_cast<size_t>((o * C + c) * k * k)];
            for (int64_t b = 0; b < B; ++b) {
                const T* gp = &gout.data[static_cast<size_t>((b * O + o) * Ho * Wo)];
                const T* ip = &in.data[static_cast<size_t>((b * C + c) * H * W)];
                for (int dy = 0; dy < k; ++dy)
                    for (int dx = 0; dx < k; ++dx) {
                        T acc = 0;
                        for (int64_t yo = 0; yo < Ho; ++yo) {
                            int64_t yi = yo * stride + dy - pad;
                            if (yi < 0 || yi >= H) continue;
                            for (int64_t xo = 0; xo < Wo; ++xo) {
                                int64_t xi = xo * stride + dx - pad;
                                if (xi < 0 || xi >= W) continue;
                                acc += gp[yo * Wo + xo] * ip[yi * W + xi];
                            }
                        }
                        gwp[dy * k + dx] += acc;
                    }
            }
        }
}

// ---- serial references -----------------------------------------------------
// Direct evaluation of the group-correlation sum over all y in p4, using the
// group algebra for every index computation. Kept as the slow reference the
// fast kernels are tested and benchmarked against.

namespace reference {

template <class T>
Tensor<T> lift_forward(const Tensor<T>& in, const Tensor<T>& w, const Tensor<T>& bias, int stride) {
    int64_t B = in.dim(0), C = in.dim(1), H = in.dim(2), W = in.dim(3);
    int64_t O = w.dim(0);
    int k = static_cast<int>(w.dim(2));
    check_conv_args(C, w.dim(1), k, stride);
    int p = k / 2;
    int64_t Ho = conv_out_extent(H, k, stride), Wo = conv_out_extent(W, k, stride);
    Tensor<T> out({B, O, 4, Ho, Wo});
    for (int64_t b = 0; b < B; ++b)
        for (int64_t o = 0; o < O; ++o)
            for (int r = 0; r < 4; ++r)
                for (int64_t yo = 0; yo < Ho; ++yo)
                    for (int64_t xo = 0; xo < Wo; ++xo) {
                        // output group element x = (r, center), center at input (rc, cc)
                        int64_t rc = yo * stride, cc = xo * stride;
                        double acc = bias[o];
                        for (int64_t qr = 0; qr < H; ++qr)
                            for (int64_t qc = 0; qc < W; ++qc) {
                                // x^{-1} y: offset rotated by -r (math coords, y up)
                                int dxv = static_cast<int>(qc - cc);
                                int dyv = static_cast<int>(rc - qr);
                                auto e = rot_vec(-r, dxv, dyv);
                                int fx = e[0] + p, fy = p - e[1];
                                if (fx < 0 || fx >= k || fy < 0 || fy >= k) continue;
                                for (int64_t c = 0; c < C; ++c)
                                    acc += static_cast<double>(in.at({b, c, qr, qc})) *
                                           static_cast<double>(w.at({o, c, static_cast<int64_t>(fy), static_cast<int64_t>(fx)}));
                            }
                        out.at({b, o, r, yo, xo}) = static_cast<T>(acc);
                    }
    return out;
}

// rot_mutation flips the sign of the rotation index pairing; used by the
// verification suite to confirm the equivariance check detects the fault.
template <class T>
Tensor<T> group_forward(const Tensor<T>& in, const Tensor<T>& w, const Tensor<T>& bias, int stride,
                        bool rot_mutation = false) {
    int64_t B = in.dim(0), C = in.dim(1), H = in.dim(3), W = in.dim(4);
    int64_t O = w.dim(0);
    int k = static_cast<int>(w.dim(3));
    check_conv_args(C, w.dim(1), k, stride);
    int p = k / 2;
    int64_t Ho = conv_out_extent(H, k, stride), Wo = conv_out_extent(W, k, stride);
    Tensor<T> out({B, O, 4, Ho, Wo});
    for (int64_t b = 0; b < B; ++b)
        for (int64_t o = 0; o < O; ++o)
            for (int r = 0; r < 4; ++r)
                for (int64_t yo = 0; yo < Ho; ++yo)
                    for (int64_t xo = 0; xo < Wo; ++xo) {
                        int64_t rc = yo * stride, cc = xo * stride;
                        double acc = bias[o];
                        for (int s = 0; s < 4; ++s) {
                            int q = rot_mutation ? mod4(s + r) : mod4(s - r);
                            for (int64_t qr = 0; qr < H; ++qr)
                                for (int64_t qc = 0; qc < W; ++qc) {
                                    int dxv = static_cast<int>(qc - cc);
                                    int dyv = static_cast<int>(rc - qr);
                                    auto e = rot_vec(-r, dxv, dyv);
                                    int fx = e[0] + p, fy = p - e[1];
                                    if (fx < 0 || fx >= k || fy < 0 || fy >= k) continue;
                                    for (int64_t c = 0; c < C; ++c)
                                        acc += static_cast<double>(in.at({b, c, static_cast<int64_t>(s), qr, qc})) *
                                               static_cast<double>(w.at({o, c, static_cast<int64_t>(q),
                                                                         static_cast<int64_t>(fy), static_cast<int64_t>(fx)}));
                                }
                        }
                        out.at({b, o, r, yo, xo}) = static_cast<T>(acc);
                    }
    return out;
}

}  // namespace reference

}  // namespace rcaps::kernels
