#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace rcaps {

inline std::string shape_str(const std::vector<int64_t>& s) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

// Dense row-major tensor. Shape may be empty (rank-0 scalar, one element).
template <class T>
struct Tensor {
    std::vector<int64_t> shape;
    std::vector<T> data;

    Tensor() = default;
    explicit Tensor(std::vector<int64_t> s, T fill = T(0)) : shape(std::move(s)) {
        data.assign(static_cast<size_t>(numel_of(shape)), fill);
    }
    static Tensor scalar(T v) {
        Tensor t{{}, {}};
        t.data.assign(1, v);
        return t;
    }
    static int64_t numel_of(const std::vector<int64_t>& s) {
        int64_t n = 1;
        for (int64_t d : s) {
            if (d < 0) throw std::invalid_argument("negative extent in shape " + shape_str(s));
            n *= d;
        }
        return n;
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    int64_t dim(int i) const { return shape[static_cast<size_t>(i)]; }

    std::vector<int64_t> strides() const {
        std::vector<int64_t> st(shape.size());
        int64_t acc = 1;
        for (int i = rank() - 1; i >= 0; --i) {
            st[static_cast<size_t>(i)] = acc;
            acc *= shape[static_cast<size_t>(i)];
        }
        return st;
    }

    T& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
    const T& operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

    T& at(std::initializer_list<int64_t> idx) { return data[static_cast<size_t>(offset(idx))]; }
    const T& at(std::initializer_list<int64_t> idx) const { return data[static_cast<size_t>(offset(idx))]; }

    int64_t offset(std::initializer_list<int64_t> idx) const {
        assert(static_cast<int>(idx.size()) == rank());
        int64_t off = 0, acc = 1;
        auto it = idx.end();
        for (int i = rank() - 1; i >= 0; --i) {
            --it;
            off += *it * acc;
            acc *= shape[static_cast<size_t>(i)];
        }
        return off;
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    template <class U>
    Tensor<U> cast() const {
        Tensor<U> out;
        out.shape = shape;
        out.data.resize(data.size());
        for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }
};

// Odometer over a shape; fn receives the flat multi-index vector.
inline void for_each_index(const std::vector<int64_t>& shape,
                           const std::function<void(const std::vector<int64_t>&)>& fn) {
    std::vector<int64_t> idx(shape.size(), 0);
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    for (int64_t c = 0; c < n; ++c) {
        fn(idx);
        for (int i = static_cast<int>(shape.size()) - 1; i >= 0; --i) {
            if (++idx[static_cast<size_t>(i)] < shape[static_cast<size_t>(i)]) break;
            idx[static_cast<size_t>(i)] = 0;
        }
    }
}

template <class T>
Tensor<T> random_tensor(std::vector<int64_t> shape, std::mt19937_64& rng, T lo = T(-1), T hi = T(1)) {
    Tensor<T> t(std::move(shape));
    std::uniform_real_distribution<double> d(static_cast<double>(lo), static_cast<double>(hi));
    for (auto& v : t.data) v = static_cast<T>(d(rng));
    return t;
}

template <class T>
Tensor<T> randn_tensor(std::vector<int64_t> shape, std::mt19937_64& rng, double stddev) {
    Tensor<T> t(std::move(shape));
    std::normal_distribution<double> d(0.0, stddev);
    for (auto& v : t.data) v = static_cast<T>(d(rng));
    return t;
}

template <class T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("max_abs_diff: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    double m = 0;
    for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
    return m;
}

}  // namespace rcaps
