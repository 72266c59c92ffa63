#pragma once

#include "robustcaps/group.hpp"
#include "robustcaps/tensor.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>

namespace rcaps::data {

template <class T>
struct Sample {
    Tensor<T> image;  // (C,H,W), values in [0,1]
    int label = 0;
};

struct TransformSpec {
    int tr = 0;        // max translation magnitude, pixels
    double rot = 0.0;  // max rotation magnitude, degrees
    uint64_t seed = 0;

    void validate() const {
        if (tr < 0) throw std::invalid_argument("TransformSpec: tr must be >= 0");
        if (rot < 0 || rot > 180) throw std::invalid_argument("TransformSpec: rot must be in [0, 180]");
    }
};

// splitmix64; used to derive independent per-sample streams.
inline uint64_t mix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline std::mt19937_64 sample_stream(uint64_t seed, uint64_t a, uint64_t b) {
    return std::mt19937_64(mix64(mix64(seed ^ 0x6a09e667f3bcc908ull) + mix64(a) * 3 + mix64(b) * 7));
}

namespace detail {

inline uint32_t read_be32(std::istream& in, const std::string& what) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4))
        throw std::runtime_error("truncated file while reading " + what);
    return (uint32_t(b[0]) << 24) | (uint32_t(b[1]) << 16) | (uint32_t(b[2]) << 8) | uint32_t(b[3]);
}

inline std::vector<unsigned char> read_all(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace detail

// Big-endian IDX pair (images magic 0x803, labels magic 0x801); pixels scaled
// by 1/255.
template <class T>
std::vector<Sample<T>> load_idx(const std::string& images_path, const std::string& labels_path) {
    std::ifstream imf(images_path, std::ios::binary);
    if (!imf) throw std::runtime_error("cannot open " + images_path);
    uint32_t magic = detail::read_be32(imf, "image magic");
    if (magic != 0x00000803) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "0x%08x", magic);
        throw std::runtime_error("bad IDX image magic " + std::string(buf) + " in " + images_path);
    }
    uint32_t count = detail::read_be32(imf, "image count");
    uint32_t rows = detail::read_be32(imf, "rows");
    uint32_t cols = detail::read_be32(imf, "cols");

    std::ifstream lbf(labels_path, std::ios::binary);
    if (!lbf) throw std::runtime_error("cannot open " + labels_path);
    uint32_t lmagic = detail::read_be32(lbf, "label magic");
    if (lmagic != 0x00000801) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "0x%08x", lmagic);
        throw std::runtime_error("bad IDX label magic " + std::string(buf) + " in " + labels_path);
    }
    uint32_t lcount = detail::read_be32(lbf, "label count");
    if (lcount != count)
        throw std::runtime_error("IDX count mismatch: " + std::to_string(count) + " images vs " +
                                 std::to_string(lcount) + " labels");

    std::vector<Sample<T>> out;
    out.reserve(count);
    std::vector<unsigned char> px(static_cast<size_t>(rows) * cols);
    for (uint32_t i = 0; i < count; ++i) {
        if (!imf.read(reinterpret_cast<char*>(px.data()), static_cast<std::streamsize>(px.size())))
            throw std::runtime_error("truncated image data in " + images_path);
        unsigned char lb;
        if (!lbf.read(reinterpret_cast<char*>(&lb), 1))
            throw std::runtime_error("truncated label data in " + labels_path);
        Sample<T> s;
        s.image = Tensor<T>({1, rows, cols});
        for (size_t j = 0; j < px.size(); ++j) s.image[static_cast<int64_t>(j)] = static_cast<T>(px[j]) / T(255);
        s.label = lb;
        out.push_back(std::move(s));
    }
    return out;
}

// CIFAR binary: 10-class files have 3073-byte records (label + 3x32x32),
// 100-class files 3074-byte records (coarse, fine, pixels); fine label used.
template <class T>
std::vector<Sample<T>> load_cifar_binary(const std::vector<std::string>& paths, int class_count) {
    const size_t plane = 32 * 32, pixels = 3 * plane;
    const size_t label_bytes = class_count == 100 ? 2 : 1;
    const size_t rec = label_bytes + pixels;
    std::vector<Sample<T>> out;
    for (const auto& path : paths) {
        auto bytes = detail::read_all(path);
        if (bytes.size() % rec != 0)
            throw std::runtime_error(path + ": length " + std::to_string(bytes.size()) +
                                     " is not a multiple of record size " + std::to_string(rec));
        for (size_t off = 0; off < bytes.size(); off += rec) {
            int label = bytes[off + label_bytes - 1];  // fine label for CIFAR-100
            if (label >= class_count)
                throw std::runtime_error(path + ": label " + std::to_string(label) +
                                         " >= class count " + std::to_string(class_count));
            Sample<T> s;
            s.label = label;
            s.image = Tensor<T>({3, 32, 32});
            for (size_t j = 0; j < pixels; ++j)
                s.image[static_cast<int64_t>(j)] = static_cast<T>(bytes[off + label_bytes + j]) / T(255);
            out.push_back(std::move(s));
        }
    }
    return out;
}

// Integer translation; +tx moves content toward larger x, +ty upward.
template <class T>
Tensor<T> translate_image(const Tensor<T>& img, int tx, int ty) {
    int64_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
    Tensor<T> out(img.shape);
    for (int64_t c = 0; c < C; ++c)
        for (int64_t row = 0; row < H; ++row)
            for (int64_t col = 0; col < W; ++col) {
                int64_t sc = col - tx, sr = row + ty;
                if (sc >= 0 && sc < W && sr >= 0 && sr < H)
                    out.at({c, row, col}) = img.at({c, sr, sc});
            }
    return out;
}

// Counterclockwise rotation by `degrees` about the image center, bilinear
// interpolation, zero fill.
template <class T>
Tensor<T> rotate_image(const Tensor<T>& img, double degrees) {
    int64_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
    double th = degrees * M_PI / 180.0;
    double ct = std::cos(th), st = std::sin(th);
    double cx = (static_cast<double>(W) - 1) / 2, cy = (static_cast<double>(H) - 1) / 2;
    Tensor<T> out(img.shape);
    for (int64_t row = 0; row < H; ++row)
        for (int64_t col = 0; col < W; ++col) {
            double x = static_cast<double>(col), y = static_cast<double>(H - 1 - row);
            // source = R(-th) (p - c) + c
            double dx = x - cx, dy = y - cy;
            double sx = ct * dx + st * dy + cx;
            double sy = -st * dx + ct * dy + cy;
            double scol = sx, srow = static_cast<double>(H - 1) - sy;
            int64_t c0 = static_cast<int64_t>(std::floor(scol)), r0 = static_cast<int64_t>(std::floor(srow));
            double fx = scol - static_cast<double>(c0), fy = srow - static_cast<double>(r0);
            for (int64_t ch = 0; ch < C; ++ch) {
                auto px = [&](int64_t rr, int64_t cc) -> double {
                    if (rr < 0 || rr >= H || cc < 0 || cc >= W) return 0.0;
                    return static_cast<double>(img.at({ch, rr, cc}));
                };
                double v = (1 - fy) * ((1 - fx) * px(r0, c0) + fx * px(r0, c0 + 1)) +
                           fy * ((1 - fx) * px(r0 + 1, c0) + fx * px(r0 + 1, c0 + 1));
                out.at({ch, row, col}) = static_cast<T>(v);
            }
        }
    return out;
}

// Translate (integer offsets drawn per axis) then rotate (uniform angle).
template <class T>
Tensor<T> random_transform(const Tensor<T>& img, const TransformSpec& spec, std::mt19937_64& rng) {
    spec.validate();
    int tx = 0, ty = 0;
    double angle = 0;
    if (spec.tr > 0) {
        std::uniform_int_distribution<int> dt(-spec.tr, spec.tr);
        tx = dt(rng);
        ty = dt(rng);
    }
    if (spec.rot > 0) {
        std::uniform_real_distribution<double> da(-spec.rot, spec.rot);
        angle = da(rng);
    }
    if (tx == 0 && ty == 0 && angle == 0.0) return img;
    Tensor<T> out = (tx || ty) ? translate_image(img, tx, ty) : img;
    if (angle != 0.0) out = rotate_image(out, angle);
    return out;
}

// 4-pixel zero-padded random crop then 50% horizontal flip.
template <class T>
Tensor<T> augment_crop_flip(const Tensor<T>& img, std::mt19937_64& rng) {
    int64_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
    const int pad = 4;
    std::uniform_int_distribution<int> dr(0, 2 * pad);
    int oy = dr(rng), ox = dr(rng);
    bool flip = std::uniform_int_distribution<int>(0, 1)(rng) == 1;
    Tensor<T> out(img.shape);
    for (int64_t c = 0; c < C; ++c)
        for (int64_t row = 0; row < H; ++row)
            for (int64_t col = 0; col < W; ++col) {
                int64_t sr = row + oy - pad, sc = col + ox - pad;
                if (sr < 0 || sr >= H || sc < 0 || sc >= W) continue;
                int64_t dc = flip ? W - 1 - col : col;
                out.at({c, row, dc}) = img.at({c, sr, sc});
            }
    return out;
}

template <class T>
struct TestSuite {
    std::string name;
    TransformSpec spec;
    std::vector<Sample<T>> samples;
};

// The five evaluation suites: the untransformed set plus (2,30), (2,60),
// (2,90), (2,180); each generated once from a fixed per-suite seed.
template <class T>
std::vector<TestSuite<T>> build_test_suites(const std::vector<Sample<T>>& test_set, uint64_t seed) {
    const std::vector<std::pair<int, double>> extents = {{0, 0}, {2, 30}, {2, 60}, {2, 90}, {2, 180}};
    std::vector<TestSuite<T>> suites;
    for (size_t si = 0; si < extents.size(); ++si) {
        TestSuite<T> suite;
        suite.spec = {extents[si].first, extents[si].second, seed + si};
        char buf[32];
        std::snprintf(buf, sizeof buf, "(%d,%d)", extents[si].first, static_cast<int>(extents[si].second));
        suite.name = buf;
        suite.samples.reserve(test_set.size());
        for (size_t i = 0; i < test_set.size(); ++i) {
            Sample<T> s;
            s.label = test_set[i].label;
            if (si == 0) {
                s.image = test_set[i].image;
            } else {
                auto rng = sample_stream(suite.spec.seed, si, i);
                s.image = random_transform(test_set[i].image, suite.spec, rng);
            }
            suite.samples.push_back(std::move(s));
        }
        suites.push_back(std::move(suite));
    }
    return suites;
}

// Deterministic subset: the first n samples of each class, in dataset order.
template <class T>
std::vector<Sample<T>> subset_per_class(const std::vector<Sample<T>>& in, int n, int class_count) {
    if (n <= 0) return in;
    std::vector<int> taken(static_cast<size_t>(class_count), 0);
    std::vector<Sample<T>> out;
    for (const auto& s : in)
        if (taken[static_cast<size_t>(s.label)] < n) {
            ++taken[static_cast<size_t>(s.label)];
            out.push_back(s);
        }
    return out;
}

}  // namespace rcaps::data
