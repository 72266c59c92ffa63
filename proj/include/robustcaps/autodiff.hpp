#pragma once

#include "robustcaps/tensor.hpp"

#include <functional>
#include <memory>
#include <unordered_set>

namespace rcaps::ad {

// Global epsilon used inside every guarded sqrt / denominator.
inline constexpr double kEps = 1e-8;

template <class T>
struct Node;

template <class T>
using Var = std::shared_ptr<Node<T>>;

template <class T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;  // allocated on first accumulation
    bool requires_grad = false;
    std::vector<Var<T>> parents;
    std::function<void(Node<T>&)> backward_fn;  // reads this->grad, accumulates into parents

    void accumulate(const Tensor<T>& g) {
        if (grad.data.empty()) grad = Tensor<T>(value.shape);
        for (int64_t i = 0; i < g.numel(); ++i) grad[i] += g[i];
    }
    void zero_grad() { grad = Tensor<T>(); }
};

template <class T>
Var<T> leaf(Tensor<T> v, bool requires_grad = true) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(v);
    n->requires_grad = requires_grad;
    return n;
}

template <class T>
Var<T> constant(Tensor<T> v) {
    return leaf(std::move(v), false);
}

template <class T>
bool any_requires(const std::vector<Var<T>>& ps) {
    for (auto& p : ps)
        if (p->requires_grad) return true;
    return false;
}

template <class T>
Var<T> make_node(Tensor<T> value, std::vector<Var<T>> parents,
                 std::function<void(Node<T>&)> back) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->parents = std::move(parents);
    n->requires_grad = any_requires(n->parents);
    if (n->requires_grad) n->backward_fn = std::move(back);
    return n;
}

// Advance a row-major odometer over `shape`, updating one or more strided
// offsets incrementally.
namespace detail {
inline void advance(std::vector<int64_t>& idx, const std::vector<int64_t>& shape,
                    int64_t* offs, const std::vector<int64_t>* const* strides, int nstreams) {
    for (int i = static_cast<int>(idx.size()) - 1; i >= 0; --i) {
        ++idx[static_cast<size_t>(i)];
        for (int s = 0; s < nstreams; ++s) offs[s] += (*strides[s])[static_cast<size_t>(i)];
        if (idx[static_cast<size_t>(i)] < shape[static_cast<size_t>(i)]) return;
        for (int s = 0; s < nstreams; ++s)
            offs[s] -= shape[static_cast<size_t>(i)] * (*strides[s])[static_cast<size_t>(i)];
        idx[static_cast<size_t>(i)] = 0;
    }
}
}  // namespace detail

// ---- shape utilities -------------------------------------------------------

inline std::vector<int64_t> broadcast_shapes(const std::vector<int64_t>& a,
                                             const std::vector<int64_t>& b) {
    size_t r = std::max(a.size(), b.size());
    std::vector<int64_t> out(r);
    for (size_t i = 0; i < r; ++i) {
        int64_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
        int64_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
        if (da != db && da != 1 && db != 1)
            throw std::invalid_argument("broadcast mismatch: " + shape_str(a) + " vs " + shape_str(b));
        out[i] = std::max(da, db);
    }
    return out;
}

// Strides of `src` viewed at broadcast rank `r` (0 on size-1 axes).
template <class T>
std::vector<int64_t> broadcast_strides(const Tensor<T>& src, size_t r) {
    std::vector<int64_t> st(r, 0);
    auto ss = src.strides();
    size_t off = r - src.shape.size();
    for (size_t i = 0; i < src.shape.size(); ++i)
        st[off + i] = src.shape[i] == 1 ? 0 : ss[i];
    return st;
}

// Sum `g` (shape gshape) down to `target` shape (broadcast transpose).
template <class T>
Tensor<T> reduce_to_shape(const Tensor<T>& g, const std::vector<int64_t>& target) {
    if (g.shape == target) return g;
    Tensor<T> out(target);
    auto tst = broadcast_strides(out, g.shape.size());
    std::vector<int64_t> idx(g.shape.size(), 0);
    int64_t off = 0;
    const std::vector<int64_t>* st[1] = {&tst};
    for (int64_t c = 0; c < g.numel(); ++c) {
        out[off] += g[c];
        detail::advance(idx, g.shape, &off, st, 1);
    }
    return out;
}

// ---- elementwise binary ----------------------------------------------------

template <class T, class FwdOp, class BackA, class BackB>
Var<T> binary_op(const Var<T>& a, const Var<T>& b, FwdOp fwd, BackA da, BackB db) {
    const Tensor<T>&av = a->value, &bv = b->value;
    if (av.shape == bv.shape) {
        Tensor<T> out(av.shape);
        for (int64_t i = 0; i < av.numel(); ++i) out[i] = fwd(av[i], bv[i]);
        return make_node<T>(std::move(out), {a, b}, [a, b, da, db](Node<T>& n) {
            const auto& g = n.grad;
            if (a->requires_grad) {
                Tensor<T> ga(a->value.shape);
                for (int64_t i = 0; i < g.numel(); ++i) ga[i] = g[i] * da(a->value[i], b->value[i], n.value[i]);
                a->accumulate(ga);
            }
            if (b->requires_grad) {
                Tensor<T> gb(b->value.shape);
                for (int64_t i = 0; i < g.numel(); ++i) gb[i] = g[i] * db(a->value[i], b->value[i], n.value[i]);
                b->accumulate(gb);
            }
        });
    }
    auto oshape = broadcast_shapes(av.shape, bv.shape);
    Tensor<T> out(oshape);
    auto sa = broadcast_strides(av, oshape.size());
    auto sb = broadcast_strides(bv, oshape.size());
    std::vector<int64_t> idx(oshape.size(), 0);
    int64_t offs[2] = {0, 0};
    const std::vector<int64_t>* st[2] = {&sa, &sb};
    for (int64_t c = 0; c < out.numel(); ++c) {
        out[c] = fwd(av[offs[0]], bv[offs[1]]);
        detail::advance(idx, oshape, offs, st, 2);
    }
    return make_node<T>(std::move(out), {a, b}, [a, b, da, db, oshape, sa, sb](Node<T>& n) {
        const auto& g = n.grad;
        Tensor<T> ga_full, gb_full;
        if (a->requires_grad) ga_full = Tensor<T>(oshape);
        if (b->requires_grad) gb_full = Tensor<T>(oshape);
        std::vector<int64_t> idx(oshape.size(), 0);
        int64_t offs[2] = {0, 0};
        const std::vector<int64_t>* st[2] = {&sa, &sb};
        for (int64_t c = 0; c < g.numel(); ++c) {
            if (a->requires_grad) ga_full[c] = g[c] * da(a->value[offs[0]], b->value[offs[1]], n.value[c]);
            if (b->requires_grad) gb_full[c] = g[c] * db(a->value[offs[0]], b->value[offs[1]], n.value[c]);
            detail::advance(idx, oshape, offs, st, 2);
        }
        if (a->requires_grad) a->accumulate(reduce_to_shape(ga_full, a->value.shape));
        if (b->requires_grad) b->accumulate(reduce_to_shape(gb_full, b->value.shape));
    });
}

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    return binary_op(a, b, [](T x, T y) { return x + y; },
                     [](T, T, T) { return T(1); }, [](T, T, T) { return T(1); });
}
template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    return binary_op(a, b, [](T x, T y) { return x - y; },
                     [](T, T, T) { return T(1); }, [](T, T, T) { return T(-1); });
}
template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    return binary_op(a, b, [](T x, T y) { return x * y; },
                     [](T, T y, T) { return y; }, [](T x, T, T) { return x; });
}
template <class T>
Var<T> div_(const Var<T>& a, const Var<T>& b) {
    return binary_op(a, b, [](T x, T y) { return x / y; },
                     [](T, T y, T) { return T(1) / y; },
                     [](T x, T y, T) { return -x / (y * y); });
}
// max(a, b); gradient goes to a on ties.
template <class T>
Var<T> maximum(const Var<T>& a, const Var<T>& b) {
    return binary_op(a, b, [](T x, T y) { return x >= y ? x : y; },
                     [](T x, T y, T) { return x >= y ? T(1) : T(0); },
                     [](T x, T y, T) { return x >= y ? T(0) : T(1); });
}

// ---- elementwise unary -----------------------------------------------------

template <class T, class FwdOp, class BackOp>
Var<T> unary_op(const Var<T>& a, FwdOp fwd, BackOp back) {
    Tensor<T> out(a->value.shape);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = fwd(a->value[i]);
    return make_node<T>(std::move(out), {a}, [a, back](Node<T>& n) {
        Tensor<T> ga(a->value.shape);
        for (int64_t i = 0; i < ga.numel(); ++i) ga[i] = n.grad[i] * back(a->value[i], n.value[i]);
        a->accumulate(ga);
    });
}

template <class T>
Var<T> exp_(const Var<T>& a) {
    return unary_op(a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}
template <class T>
Var<T> log_(const Var<T>& a) {
    return unary_op(a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}
// Guarded derivative: 0.5 / max(sqrt(x), eps).
template <class T>
Var<T> sqrt_(const Var<T>& a) {
    return unary_op(a, [](T x) { return std::sqrt(x); },
                    [](T, T y) { return T(0.5) / std::max(y, static_cast<T>(kEps)); });
}
// Subgradient at 0 is 0.
template <class T>
Var<T> relu(const Var<T>& a) {
    return unary_op(a, [](T x) { return x > T(0) ? x : T(0); },
                    [](T x, T) { return x > T(0) ? T(1) : T(0); });
}
template <class T>
Var<T> scale(const Var<T>& a, T c) {
    return unary_op(a, [c](T x) { return c * x; }, [c](T, T) { return c; });
}
template <class T>
Var<T> shift(const Var<T>& a, T c) {
    return unary_op(a, [c](T x) { return x + c; }, [](T, T) { return T(1); });
}

// ---- reductions ------------------------------------------------------------

namespace detail {
inline std::vector<int64_t> reduced_shape(const std::vector<int64_t>& shape,
                                          std::vector<int>& axes, bool keepdims) {
    std::sort(axes.begin(), axes.end());
    for (size_t i = 0; i < axes.size(); ++i) {
        if (axes[i] < 0 || axes[i] >= static_cast<int>(shape.size()))
            throw std::invalid_argument("reduction axis out of range for " + shape_str(shape));
        if (i && axes[i] == axes[i - 1]) throw std::invalid_argument("duplicate reduction axis");
        if (shape[static_cast<size_t>(axes[i])] == 0)
            throw std::invalid_argument("reduction over empty axis in " + shape_str(shape));
    }
    std::vector<int64_t> out;
    for (size_t i = 0; i < shape.size(); ++i) {
        bool red = std::binary_search(axes.begin(), axes.end(), static_cast<int>(i));
        if (red) {
            if (keepdims) out.push_back(1);
        } else {
            out.push_back(shape[i]);
        }
    }
    return out;
}

// Flat offset into the (keepdims) reduced tensor for a full-shape index.
inline int64_t reduced_offset(const std::vector<int64_t>& idx, const std::vector<int64_t>& rstrides,
                              const std::vector<bool>& is_red) {
    int64_t off = 0;
    for (size_t i = 0; i < idx.size(); ++i)
        if (!is_red[i]) off += idx[i] * rstrides[i];
    return off;
}
}  // namespace detail

template <class T>
Var<T> sum(const Var<T>& a, std::vector<int> axes, bool keepdims = false) {
    const auto& shape = a->value.shape;
    auto kshape = detail::reduced_shape(shape, axes, true);
    auto oshape = detail::reduced_shape(shape, axes, keepdims);
    std::vector<bool> is_red(shape.size(), false);
    for (int ax : axes) is_red[static_cast<size_t>(ax)] = true;
    Tensor<T> acc(kshape);
    auto rstrides = acc.strides();  // kshape has full rank (keepdims)
    for (size_t i = 0; i < shape.size(); ++i)
        if (is_red[i]) rstrides[i] = 0;
    std::vector<int64_t> idx(shape.size(), 0);
    int64_t off = 0;
    const std::vector<int64_t>* st[1] = {&rstrides};
    for (int64_t c = 0; c < a->value.numel(); ++c) {
        acc[off] += a->value[c];
        detail::advance(idx, shape, &off, st, 1);
    }
    Tensor<T> out = acc;
    out.shape = oshape;
    return make_node<T>(std::move(out), {a}, [a, shape, rstrides](Node<T>& n) {
        Tensor<T> ga(shape);
        std::vector<int64_t> idx(shape.size(), 0);
        int64_t off = 0;
        const std::vector<int64_t>* st[1] = {&rstrides};
        for (int64_t c = 0; c < ga.numel(); ++c) {
            ga[c] = n.grad[off];
            detail::advance(idx, shape, &off, st, 1);
        }
        a->accumulate(ga);
    });
}

template <class T>
Var<T> mean(const Var<T>& a, std::vector<int> axes, bool keepdims = false) {
    int64_t n = 1;
    for (int ax : axes) n *= a->value.shape[static_cast<size_t>(ax)];
    return scale(sum(a, std::move(axes), keepdims), T(1) / static_cast<T>(n));
}

// Biased (1/N) variance over the given axes.
template <class T>
Var<T> variance(const Var<T>& a, std::vector<int> axes, bool keepdims = false) {
    auto m = mean(a, axes, true);
    auto d = sub(a, m);
    return mean(mul(d, d), std::move(axes), keepdims);
}

// Max over axes; gradient routed to the first maximal element in scan order.
template <class T>
Var<T> max_reduce(const Var<T>& a, std::vector<int> axes, bool keepdims = false) {
    const auto& shape = a->value.shape;
    auto kshape = detail::reduced_shape(shape, axes, true);
    auto oshape = detail::reduced_shape(shape, axes, keepdims);
    std::vector<bool> is_red(shape.size(), false);
    for (int ax : axes) is_red[static_cast<size_t>(ax)] = true;
    auto rstrides = Tensor<T>(kshape).strides();
    for (size_t i = 0; i < shape.size(); ++i)
        if (is_red[i]) rstrides[i] = 0;
    Tensor<T> acc(kshape);
    auto argmax = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(acc.numel()), -1);
    std::vector<int64_t> idx(shape.size(), 0);
    int64_t off = 0;
    const std::vector<int64_t>* st[1] = {&rstrides};
    for (int64_t c = 0; c < a->value.numel(); ++c) {
        if ((*argmax)[static_cast<size_t>(off)] < 0 || a->value[c] > acc[off]) {
            acc[off] = a->value[c];
            (*argmax)[static_cast<size_t>(off)] = c;
        }
        detail::advance(idx, shape, &off, st, 1);
    }
    Tensor<T> out = acc;
    out.shape = oshape;
    return make_node<T>(std::move(out), {a}, [a, shape, argmax](Node<T>& n) {
        Tensor<T> ga(shape);
        for (size_t k = 0; k < argmax->size(); ++k) ga[(*argmax)[k]] += n.grad[static_cast<int64_t>(k)];
        a->accumulate(ga);
    });
}

// ---- movement --------------------------------------------------------------

template <class T>
Tensor<T> permute_copy(const Tensor<T>& t, const std::vector<int>& perm) {
    if (perm.size() != t.shape.size()) throw std::invalid_argument("permute: rank mismatch");
    std::vector<int64_t> oshape(perm.size());
    for (size_t i = 0; i < perm.size(); ++i) oshape[i] = t.shape[static_cast<size_t>(perm[i])];
    Tensor<T> out(oshape);
    auto ist = t.strides();
    std::vector<int64_t> pst(perm.size());
    for (size_t i = 0; i < perm.size(); ++i) pst[i] = ist[static_cast<size_t>(perm[i])];
    std::vector<int64_t> idx(oshape.size(), 0);
    int64_t off = 0;
    const std::vector<int64_t>* st[1] = {&pst};
    for (int64_t c = 0; c < out.numel(); ++c) {
        out[c] = t[off];
        detail::advance(idx, oshape, &off, st, 1);
    }
    return out;
}

template <class T>
Var<T> permute(const Var<T>& a, std::vector<int> perm) {
    Tensor<T> out = permute_copy(a->value, perm);
    return make_node<T>(std::move(out), {a}, [a, perm](Node<T>& n) {
        std::vector<int> inv(perm.size());
        for (size_t i = 0; i < perm.size(); ++i) inv[static_cast<size_t>(perm[i])] = static_cast<int>(i);
        a->accumulate(permute_copy(n.grad, inv));
    });
}

template <class T>
Var<T> reshape(const Var<T>& a, std::vector<int64_t> shape) {
    if (Tensor<T>::numel_of(shape) != a->value.numel())
        throw std::invalid_argument("reshape: element count mismatch " + shape_str(a->value.shape) + " -> " + shape_str(shape));
    Tensor<T> out = a->value;
    out.shape = shape;
    auto ashape = a->value.shape;
    return make_node<T>(std::move(out), {a}, [a, ashape](Node<T>& n) {
        Tensor<T> g = n.grad;
        g.shape = ashape;
        a->accumulate(g);
    });
}

template <class T>
Var<T> slice(const Var<T>& a, std::vector<int64_t> starts, std::vector<int64_t> sizes) {
    const auto& shape = a->value.shape;
    if (starts.size() != shape.size() || sizes.size() != shape.size())
        throw std::invalid_argument("slice: rank mismatch");
    for (size_t i = 0; i < shape.size(); ++i)
        if (starts[i] < 0 || starts[i] + sizes[i] > shape[i])
            throw std::invalid_argument("slice: range out of bounds for " + shape_str(shape));
    Tensor<T> out(sizes);
    auto ist = a->value.strides();
    std::vector<int64_t> idx(sizes.size(), 0);
    for (int64_t c = 0; c < out.numel(); ++c) {
        int64_t off = 0;
        for (size_t i = 0; i < idx.size(); ++i) off += (starts[i] + idx[i]) * ist[i];
        out[c] = a->value[off];
        for (int i = static_cast<int>(idx.size()) - 1; i >= 0; --i) {
            if (++idx[static_cast<size_t>(i)] < sizes[static_cast<size_t>(i)]) break;
            idx[static_cast<size_t>(i)] = 0;
        }
    }
    return make_node<T>(std::move(out), {a}, [a, starts, sizes, ist](Node<T>& n) {
        Tensor<T> ga(a->value.shape);
        std::vector<int64_t> idx(sizes.size(), 0);
        for (int64_t c = 0; c < n.grad.numel(); ++c) {
            int64_t off = 0;
            for (size_t i = 0; i < idx.size(); ++i) off += (starts[i] + idx[i]) * ist[i];
            ga[off] = n.grad[c];
            for (int i = static_cast<int>(idx.size()) - 1; i >= 0; --i) {
                if (++idx[static_cast<size_t>(i)] < sizes[static_cast<size_t>(i)]) break;
                idx[static_cast<size_t>(i)] = 0;
            }
        }
        a->accumulate(ga);
    });
}

// Zero padding: `before`/`after` extra entries per axis.
template <class T>
Var<T> pad(const Var<T>& a, std::vector<int64_t> before, std::vector<int64_t> after) {
    const auto& shape = a->value.shape;
    if (before.size() != shape.size() || after.size() != shape.size())
        throw std::invalid_argument("pad: rank mismatch");
    std::vector<int64_t> oshape(shape.size());
    for (size_t i = 0; i < shape.size(); ++i) oshape[i] = shape[i] + before[i] + after[i];
    Tensor<T> out(oshape);
    auto ost = out.strides();
    std::vector<int64_t> idx(shape.size(), 0);
    for (int64_t c = 0; c < a->value.numel(); ++c) {
        int64_t off = 0;
        for (size_t i = 0; i < idx.size(); ++i) off += (before[i] + idx[i]) * ost[i];
        out[off] = a->value[c];
        for (int i = static_cast<int>(idx.size()) - 1; i >= 0; --i) {
            if (++idx[static_cast<size_t>(i)] < shape[static_cast<size_t>(i)]) break;
            idx[static_cast<size_t>(i)] = 0;
        }
    }
    auto ashape = shape;
    return make_node<T>(std::move(out), {a}, [a, before, ashape](Node<T>& n) {
        auto g = slice(constant(n.grad), before, ashape);
        a->accumulate(g->value);
    });
}

template <class T>
Var<T> concat(const std::vector<Var<T>>& xs, int axis) {
    if (xs.empty()) throw std::invalid_argument("concat: empty input list");
    auto shape = xs[0]->value.shape;
    int64_t total = 0;
    for (auto& x : xs) {
        auto s = x->value.shape;
        total += s[static_cast<size_t>(axis)];
        s[static_cast<size_t>(axis)] = shape[static_cast<size_t>(axis)];
        if (s != shape) throw std::invalid_argument("concat: incompatible shapes");
    }
    auto oshape = shape;
    oshape[static_cast<size_t>(axis)] = total;
    Tensor<T> out(oshape);
    auto ost = out.strides();
    int64_t base = 0;
    for (auto& x : xs) {
        auto ist = x->value.strides();
        std::vector<int64_t> idx(shape.size(), 0);
        for (int64_t c = 0; c < x->value.numel(); ++c) {
            int64_t off = 0;
            for (size_t i = 0; i < idx.size(); ++i)
                off += (idx[i] + (static_cast<int>(i) == axis ? base : 0)) * ost[i];
            out[off] = x->value[c];
            for (int i = static_cast<int>(idx.size()) - 1; i >= 0; --i) {
                if (++idx[static_cast<size_t>(i)] < x->value.shape[static_cast<size_t>(i)]) break;
                idx[static_cast<size_t>(i)] = 0;
            }
        }
        base += x->value.dim(axis);
    }
    std::vector<Var<T>> parents = xs;
    return make_node<T>(std::move(out), parents, [parents, axis](Node<T>& n) {
        int64_t base = 0;
        for (auto& x : parents) {
            std::vector<int64_t> starts(x->value.shape.size(), 0);
            starts[static_cast<size_t>(axis)] = base;
            auto g = slice(constant(n.grad), starts, x->value.shape);
            if (x->requires_grad) x->accumulate(g->value);
            base += x->value.dim(axis);
        }
    });
}

// ---- contraction -----------------------------------------------------------

template <class T>
Tensor<T> matmul_tensors(const Tensor<T>& a, const Tensor<T>& b) {
    int64_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
    if (b.dim(0) != K) throw std::invalid_argument("matmul: inner extent mismatch");
    Tensor<T> c({M, N});
    for (int64_t i = 0; i < M; ++i)
        for (int64_t k = 0; k < K; ++k) {
            T av = a[i * K + k];
            if (av == T(0)) continue;
            const T* bp = &b.data[static_cast<size_t>(k * N)];
            T* cp = &c.data[static_cast<size_t>(i * N)];
            for (int64_t j = 0; j < N; ++j) cp[j] += av * bp[j];
        }
    return c;
}

// Contraction over one axis pair: out = sum_k a[..., k@axis_a, ...] * b[..., k@axis_b, ...].
// Output shape is a.shape minus axis_a followed by b.shape minus axis_b.
template <class T>
Var<T> contract(const Var<T>& a, const Var<T>& b, int axis_a, int axis_b) {
    const auto& ash = a->value.shape;
    const auto& bsh = b->value.shape;
    int64_t K = ash[static_cast<size_t>(axis_a)];
    if (bsh[static_cast<size_t>(axis_b)] != K)
        throw std::invalid_argument("contract: axis extent mismatch " + shape_str(ash) + "@" +
                                    std::to_string(axis_a) + " vs " + shape_str(bsh) + "@" + std::to_string(axis_b));
    std::vector<int> pa, pb;
    for (int i = 0; i < static_cast<int>(ash.size()); ++i)
        if (i != axis_a) pa.push_back(i);
    pa.push_back(axis_a);
    pb.push_back(axis_b);
    for (int i = 0; i < static_cast<int>(bsh.size()); ++i)
        if (i != axis_b) pb.push_back(i);

    auto A2 = permute(a, pa);  // (..., K)
    auto B2 = permute(b, pb);  // (K, ...)
    int64_t M = A2->value.numel() / std::max<int64_t>(K, 1);
    int64_t N = B2->value.numel() / std::max<int64_t>(K, 1);
    auto Af = reshape(A2, {M, K});
    auto Bf = reshape(B2, {K, N});

    Tensor<T> cv = matmul_tensors(Af->value, Bf->value);
    auto mm = make_node<T>(std::move(cv), {Af, Bf}, [Af, Bf](Node<T>& n) {
        // dA = g * B^T, dB = A^T * g
        if (Af->requires_grad) {
            Tensor<T> bt = permute_copy(Bf->value, {1, 0});
            Af->accumulate(matmul_tensors(n.grad, bt));
        }
        if (Bf->requires_grad) {
            Tensor<T> at = permute_copy(Af->value, {1, 0});
            Bf->accumulate(matmul_tensors(at, n.grad));
        }
    });
    std::vector<int64_t> oshape;
    for (size_t i = 0; i < ash.size(); ++i)
        if (static_cast<int>(i) != axis_a) oshape.push_back(ash[i]);
    for (size_t i = 0; i < bsh.size(); ++i)
        if (static_cast<int>(i) != axis_b) oshape.push_back(bsh[i]);
    return reshape(mm, oshape);
}

// ---- composed ops ----------------------------------------------------------

// Numerically stable softmax along one axis (max-subtracted).
template <class T>
Var<T> softmax(const Var<T>& a, int axis) {
    auto m = max_reduce(a, {axis}, true);
    auto e = exp_(sub(a, m));
    auto s = sum(e, {axis}, true);
    return div_(e, s);
}

// ---- backward --------------------------------------------------------------

template <class T>
void topo_sort(const Var<T>& out, std::vector<Node<T>*>& order) {
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, size_t>> stack{{out.get(), 0}};
    seen.insert(out.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node<T>* p = node->parents[next++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
}

// Reverse-mode sweep; gradients accumulate additively into leaf nodes
// (call zero_grad on leaves between steps).
template <class T>
void backward(const Var<T>& out, const Tensor<T>& seed) {
    if (seed.shape != out->value.shape && !(seed.numel() == 1 && out->value.numel() == 1))
        throw std::invalid_argument("backward: seed shape " + shape_str(seed.shape) +
                                    " != output shape " + shape_str(out->value.shape));
    if (!out->requires_grad) return;
    std::vector<Node<T>*> order;
    topo_sort(out, order);
    out->accumulate(seed);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (n->backward_fn && !n->grad.data.empty()) n->backward_fn(*n);
    }
}

template <class T>
void backward_scalar(const Var<T>& out, T seed = T(1)) {
    Tensor<T> s(out->value.shape);
    if (s.numel() != 1) throw std::invalid_argument("backward_scalar: output is not scalar");
    s[0] = seed;
    backward(out, s);
}

// ---- gradient checking -----------------------------------------------------

struct GradCheckReport {
    double max_rel_err = 0;
    int64_t worst_input = -1;
    int64_t worst_component = -1;
    bool pass = false;
};

// Central finite differences against reverse mode for a scalar-valued builder
// over several inputs. 64-bit use only.
template <class T>
GradCheckReport grad_check_multi(const std::function<Var<T>(const std::vector<Var<T>>&)>& f,
                                 std::vector<Tensor<T>> xs, double tol, double step = 1e-5) {
    std::vector<Var<T>> leaves;
    for (auto& x : xs) leaves.push_back(leaf(x));
    auto out = f(leaves);
    if (out->value.numel() != 1) throw std::invalid_argument("grad_check: builder is not scalar-valued");
    backward_scalar(out);

    GradCheckReport rep;
    rep.max_rel_err = 0;
    for (size_t xi = 0; xi < xs.size(); ++xi) {
        for (int64_t i = 0; i < xs[xi].numel(); ++i) {
            T keep = xs[xi][i];
            auto eval = [&](T v) {
                xs[xi][i] = v;
                std::vector<Var<T>> ls;
                for (auto& x : xs) ls.push_back(leaf(x, false));
                return static_cast<double>(f(ls)->value[0]);
            };
            double fp = eval(keep + static_cast<T>(step));
            double fm = eval(keep - static_cast<T>(step));
            xs[xi][i] = keep;
            double fd = (fp - fm) / (2 * step);
            double an = leaves[xi]->grad.data.empty() ? 0.0 : static_cast<double>(leaves[xi]->grad[i]);
            double denom = std::max(1e-3, std::abs(fd) + std::abs(an));
            double rel = std::abs(fd - an) / denom;
            if (rel > rep.max_rel_err) {
                rep.max_rel_err = rel;
                rep.worst_input = static_cast<int64_t>(xi);
                rep.worst_component = i;
            }
        }
    }
    rep.pass = rep.max_rel_err < tol;
    return rep;
}

template <class T>
GradCheckReport grad_check(const std::function<Var<T>(const Var<T>&)>& f, Tensor<T> x,
                           double tol, double step = 1e-5) {
    return grad_check_multi<T>([&f](const std::vector<Var<T>>& vs) { return f(vs[0]); },
                               {std::move(x)}, tol, step);
}

}  // namespace rcaps::ad
