#pragma once

#include "robustcaps/data.hpp"
#include "robustcaps/model.hpp"

#include <cstring>
#include <fstream>
#include <numeric>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace rcaps::train {

using data::Sample;
using data::TestSuite;
using data::TransformSpec;

struct TrainConfig {
    int epochs = 150;
    int batch_size = 128;
    double max_lr = 3e-3;
    double weight_decay = 0.01;
    double pct_start = 0.3;
    double div_factor = 25.0;
    double final_div = 1e4;
    double clip_norm = 10.0;  // 0 disables
    uint64_t seed = 0;
    int eval_subset = 0;  // per-epoch eval sample cap per suite; 0 = full

    void validate() const {
        if (epochs < 0) throw std::invalid_argument("epochs must be >= 0");
        if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
        if (max_lr <= 0) throw std::invalid_argument("max_lr must be > 0");
    }
};

struct TrainAbort : std::runtime_error {
    int64_t step;
    explicit TrainAbort(int64_t s)
        : std::runtime_error("non-finite loss at step " + std::to_string(s)), step(s) {}
};

// -log softmax(scores)[label], max-subtracted; mean over batches is taken by
// the caller.
template <class T>
Var<T> cross_entropy(const Var<T>& scores, int label) {
    int64_t K = scores->value.numel();
    if (label < 0 || label >= K)
        throw std::invalid_argument("cross_entropy: label " + std::to_string(label) +
                                    " out of range [0," + std::to_string(K) + ")");
    auto m = ad::max_reduce(scores, {0}, true);
    auto z = ad::sub(scores, m);
    auto lse = ad::add(ad::reshape(m, {}), ad::log_(ad::sum(ad::exp_(z), {0}, false)));
    auto truth = ad::reshape(ad::slice(scores, {label}, {1}), {});
    return ad::sub(lse, truth);
}

// Cosine-annealed one-cycle schedule: warm up from max_lr/div over the first
// pct_start of the run to max_lr, then anneal to max_lr/final_div.
inline double onecycle_lr(int64_t step, int64_t total_steps, double max_lr, double pct_start = 0.3,
                          double div_factor = 25.0, double final_div = 1e4) {
    if (step < 0 || step >= total_steps)
        throw std::invalid_argument("onecycle_lr: step " + std::to_string(step) + " outside [0," +
                                    std::to_string(total_steps) + ")");
    int64_t peak = static_cast<int64_t>(std::lround(pct_start * static_cast<double>(total_steps - 1)));
    double lo = max_lr / div_factor, fin = max_lr / final_div;
    if (step <= peak) {
        double t = peak == 0 ? 1.0 : static_cast<double>(step) / static_cast<double>(peak);
        return lo + (max_lr - lo) * 0.5 * (1 - std::cos(M_PI * t));
    }
    double s = static_cast<double>(step - peak) / static_cast<double>(total_steps - 1 - peak);
    return fin + (max_lr - fin) * 0.5 * (1 + std::cos(M_PI * s));
}

// Decoupled weight decay Adam with bias-corrected moments.
template <class T>
struct AdamW {
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8, weight_decay = 0.01;
    int64_t step_count = 0;
    std::map<std::string, Tensor<T>> m, v;

    void step(ParamStore<T>& ps, const std::map<std::string, Tensor<T>>& grads, double lr) {
        ++step_count;
        double bc1 = 1 - std::pow(beta1, static_cast<double>(step_count));
        double bc2 = 1 - std::pow(beta2, static_cast<double>(step_count));
        for (const auto& name : ps.names) {
            auto git = grads.find(name);
            auto& theta = ps.get(name);
            if (m.find(name) == m.end()) {
                m.emplace(name, Tensor<T>(theta.shape));
                v.emplace(name, Tensor<T>(theta.shape));
            }
            auto& mi = m.at(name);
            auto& vi = v.at(name);
            for (int64_t i = 0; i < theta.numel(); ++i) {
                double g = git != grads.end() ? static_cast<double>(git->second[i]) : 0.0;
                double md = beta1 * static_cast<double>(mi[i]) + (1 - beta1) * g;
                double vd = beta2 * static_cast<double>(vi[i]) + (1 - beta2) * g * g;
                mi[i] = static_cast<T>(md);
                vi[i] = static_cast<T>(vd);
                double update = (md / bc1) / (std::sqrt(vd / bc2) + eps) +
                                weight_decay * static_cast<double>(theta[i]);
                theta[i] = static_cast<T>(static_cast<double>(theta[i]) - lr * update);
            }
        }
    }
};

// ---- evaluation ------------------------------------------------------------

template <class T>
double evaluate_samples(const ModelConfig& cfg, const ParamStore<T>& ps,
                        const std::vector<Sample<T>>& samples, size_t limit = 0) {
    size_t n = limit && limit < samples.size() ? limit : samples.size();
    if (n == 0) return 0.0;
    auto leaves = make_leaves(ps, false);
    int64_t correct = 0;
#pragma omp parallel for schedule(static) reduction(+ : correct)
    for (int64_t i = 0; i < static_cast<int64_t>(n); ++i) {
        auto scores = model_forward(cfg, leaves, samples[static_cast<size_t>(i)].image);
        if (predict_class(scores->value) == samples[static_cast<size_t>(i)].label) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(n);
}

// Per-suite argmax accuracy, in suite (Table-1) order.
template <class T>
std::vector<double> evaluate(const ModelConfig& cfg, const ParamStore<T>& ps,
                             const std::vector<TestSuite<T>>& suites, size_t limit = 0) {
    std::vector<double> out;
    for (const auto& s : suites) out.push_back(evaluate_samples(cfg, ps, s.samples, limit));
    return out;
}

// ---- training loop ---------------------------------------------------------

struct EpochMetrics {
    int epoch = 0;
    double lr = 0;
    double train_loss = 0;
    double train_acc = 0;
    std::vector<double> suite_acc;
};

struct TrainResult {
    std::vector<EpochMetrics> history;
    std::vector<double> final_suite_acc;
    int64_t steps = 0;
};

template <class T>
std::map<std::string, Tensor<T>> batch_gradients(const ModelConfig& cfg, ParamStore<T>& ps,
                                                 const std::vector<Tensor<T>>& images,
                                                 const std::vector<int>& labels,
                                                 std::vector<double>& losses,
                                                 std::vector<int>& correct) {
    int64_t B = static_cast<int64_t>(images.size());
    losses.assign(static_cast<size_t>(B), 0.0);
    correct.assign(static_cast<size_t>(B), 0);
#ifdef _OPENMP
    int nt = omp_get_max_threads();
#else
    int nt = 1;
#endif
    std::vector<Leaves<T>> thread_leaves(static_cast<size_t>(nt));
#pragma omp parallel num_threads(nt)
    {
#ifdef _OPENMP
        int t = omp_get_thread_num();
#else
        int t = 0;
#endif
        Leaves<T>* local = nullptr;
#pragma omp for schedule(static)
        for (int64_t i = 0; i < B; ++i) {
            if (!local) {
                thread_leaves[static_cast<size_t>(t)] = make_leaves(ps);
                local = &thread_leaves[static_cast<size_t>(t)];
            }
            auto scores = model_forward(cfg, *local, images[static_cast<size_t>(i)]);
            auto loss = cross_entropy(scores, labels[static_cast<size_t>(i)]);
            losses[static_cast<size_t>(i)] = static_cast<double>(loss->value[0]);
            correct[static_cast<size_t>(i)] =
                predict_class(scores->value) == labels[static_cast<size_t>(i)] ? 1 : 0;
            ad::backward_scalar(loss);
        }
    }
    // deterministic reduction: thread slots combined in index order
    std::map<std::string, Tensor<T>> grads;
    for (const auto& name : ps.names) grads.emplace(name, Tensor<T>(ps.get(name).shape));
    for (auto& lv : thread_leaves) {
        if (lv.empty()) continue;
        for (const auto& name : ps.names) {
            auto& g = lv.at(name)->grad;
            if (g.data.empty()) continue;
            auto& acc = grads.at(name);
            for (int64_t i = 0; i < acc.numel(); ++i) acc[i] += g[i];
        }
    }
    T inv = T(1) / static_cast<T>(B);
    for (auto& [k, g] : grads)
        for (auto& x : g.data) x *= inv;
    return grads;
}

template <class T>
void clip_gradients(std::map<std::string, Tensor<T>>& grads, double max_norm) {
    if (max_norm <= 0) return;
    double sq = 0;
    for (auto& [k, g] : grads)
        for (auto& x : g.data) sq += static_cast<double>(x) * static_cast<double>(x);
    double norm = std::sqrt(sq);
    if (norm <= max_norm) return;
    T sc = static_cast<T>(max_norm / norm);
    for (auto& [k, g] : grads)
        for (auto& x : g.data) x *= sc;
}

// One full training run: per epoch, fresh random train transforms, forward,
// cross entropy, backward, AdamW with the one-cycle schedule.
template <class T>
TrainResult train(const ModelConfig& cfg, ParamStore<T>& ps, AdamW<T>& opt,
                  const std::vector<Sample<T>>& train_set, const TransformSpec& train_spec,
                  const std::vector<TestSuite<T>>& suites, const TrainConfig& tc,
                  bool augment = false, std::ostream* log = nullptr) {
    tc.validate();
    if (train_set.empty()) throw std::invalid_argument("train: empty dataset");
    opt.weight_decay = tc.weight_decay;

    int64_t n = static_cast<int64_t>(train_set.size());
    int64_t steps_per_epoch = (n + tc.batch_size - 1) / tc.batch_size;
    int64_t total_steps = std::max<int64_t>(1, steps_per_epoch * tc.epochs);

    TrainResult res;
    int64_t gstep = 0;
    std::vector<size_t> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), size_t{0});

    for (int epoch = 0; epoch < tc.epochs; ++epoch) {
        std::mt19937_64 erng(data::mix64(tc.seed) ^ data::mix64(static_cast<uint64_t>(epoch) + 1));
        std::shuffle(order.begin(), order.end(), erng);
        double loss_sum = 0;
        int64_t correct_sum = 0;
        double last_lr = 0;
        for (int64_t b0 = 0; b0 < n; b0 += tc.batch_size) {
            int64_t bsz = std::min<int64_t>(tc.batch_size, n - b0);
            std::vector<Tensor<T>> images(static_cast<size_t>(bsz));
            std::vector<int> labels(static_cast<size_t>(bsz));
#pragma omp parallel for schedule(static)
            for (int64_t i = 0; i < bsz; ++i) {
                size_t idx = order[static_cast<size_t>(b0 + i)];
                auto rng = data::sample_stream(tc.seed, static_cast<uint64_t>(epoch), idx);
                Tensor<T> img = train_set[idx].image;
                if (augment) img = data::augment_crop_flip(img, rng);
                img = data::random_transform(img, train_spec, rng);
                images[static_cast<size_t>(i)] = std::move(img);
                labels[static_cast<size_t>(i)] = train_set[idx].label;
            }
            std::vector<double> losses;
            std::vector<int> correct;
            auto grads = batch_gradients(cfg, ps, images, labels, losses, correct);
            for (int64_t i = 0; i < bsz; ++i) {
                if (!std::isfinite(losses[static_cast<size_t>(i)])) throw TrainAbort(gstep);
                loss_sum += losses[static_cast<size_t>(i)];
                correct_sum += correct[static_cast<size_t>(i)];
            }
            clip_gradients(grads, tc.clip_norm);
            last_lr = onecycle_lr(gstep, total_steps, tc.max_lr, tc.pct_start, tc.div_factor, tc.final_div);
            opt.step(ps, grads, last_lr);
            ++gstep;
        }
        EpochMetrics em;
        em.epoch = epoch;
        em.lr = last_lr;
        em.train_loss = loss_sum / static_cast<double>(n);
        em.train_acc = static_cast<double>(correct_sum) / static_cast<double>(n);
        em.suite_acc = evaluate(cfg, ps, suites, static_cast<size_t>(tc.eval_subset));
        res.history.push_back(em);
        if (log) {
            *log << "epoch " << epoch << " lr " << em.lr << " loss " << em.train_loss
                 << " acc " << em.train_acc;
            for (double a : em.suite_acc) *log << " " << a;
            *log << "\n"
                 << std::flush;
        }
    }
    res.steps = gstep;
    res.final_suite_acc = evaluate(cfg, ps, suites);  // full suites
    return res;
}

inline std::string metrics_csv(const std::vector<EpochMetrics>& hist) {
    std::ostringstream os;
    os << "epoch,lr,train_loss,train_acc,acc_0_0,acc_2_30,acc_2_60,acc_2_90,acc_2_180\n";
    for (const auto& em : hist) {
        os << em.epoch << "," << em.lr << "," << em.train_loss << "," << em.train_acc;
        for (size_t i = 0; i < 5; ++i)
            os << "," << (i < em.suite_acc.size() ? em.suite_acc[i] : 0.0);
        os << "\n";
    }
    return os.str();
}

// ---- checkpointing ---------------------------------------------------------

inline uint64_t fnv1a64(const std::string& s) {
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

namespace detail {

template <class V>
void write_pod(std::ostream& os, const V& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof v);
}
template <class V>
void read_pod(std::istream& is, V& v) {
    if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) throw std::runtime_error("truncated checkpoint");
}

template <class T>
void write_array(std::ostream& os, const std::string& name, const Tensor<T>& t) {
    uint32_t nl = static_cast<uint32_t>(name.size());
    write_pod(os, nl);
    os.write(name.data(), nl);
    uint32_t nd = static_cast<uint32_t>(t.shape.size());
    write_pod(os, nd);
    for (int64_t d : t.shape) write_pod(os, d);
    os.write(reinterpret_cast<const char*>(t.data.data()),
             static_cast<std::streamsize>(t.data.size() * sizeof(T)));
}

template <class T>
std::pair<std::string, Tensor<T>> read_array(std::istream& is) {
    uint32_t nl;
    read_pod(is, nl);
    std::string name(nl, '\0');
    if (!is.read(name.data(), nl)) throw std::runtime_error("truncated checkpoint");
    uint32_t nd;
    read_pod(is, nd);
    std::vector<int64_t> shape(nd);
    for (auto& d : shape) read_pod(is, d);
    Tensor<T> t(shape);
    if (!is.read(reinterpret_cast<char*>(t.data.data()),
                 static_cast<std::streamsize>(t.data.size() * sizeof(T))))
        throw std::runtime_error("truncated checkpoint");
    return {name, std::move(t)};
}

}  // namespace detail

inline constexpr char kCkptMagic[8] = {'R', 'C', 'A', 'P', 'C', 'K', 'P', '1'};

// Versioned little-endian container: magic, version, config digest, scalar
// width, step counter, named arrays (params + optimizer moments), metrics CSV.
template <class T>
void save_checkpoint(const std::string& path, const ParamStore<T>& ps, const AdamW<T>& opt,
                     uint64_t config_digest, const std::string& metrics) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + path);
    os.write(kCkptMagic, 8);
    detail::write_pod(os, uint32_t{1});
    detail::write_pod(os, config_digest);
    detail::write_pod(os, static_cast<uint32_t>(sizeof(T)));
    detail::write_pod(os, opt.step_count);
    uint32_t narr = static_cast<uint32_t>(ps.values.size() + opt.m.size() + opt.v.size());
    detail::write_pod(os, narr);
    for (const auto& name : ps.names) detail::write_array(os, name, ps.get(name));
    for (const auto& [name, t] : opt.m) detail::write_array(os, "adam.m." + name, t);
    for (const auto& [name, t] : opt.v) detail::write_array(os, "adam.v." + name, t);
    uint64_t ml = metrics.size();
    detail::write_pod(os, ml);
    os.write(metrics.data(), static_cast<std::streamsize>(ml));
}

template <class T>
std::string load_checkpoint(const std::string& path, ParamStore<T>& ps, AdamW<T>& opt,
                            uint64_t expect_digest, bool check_digest = true) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path);
    char magic[8];
    if (!is.read(magic, 8) || std::memcmp(magic, kCkptMagic, 8) != 0)
        throw std::runtime_error(path + ": not a checkpoint file");
    uint32_t version;
    detail::read_pod(is, version);
    if (version != 1) throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
    uint64_t digest;
    detail::read_pod(is, digest);
    if (check_digest && digest != expect_digest)
        throw std::runtime_error("checkpoint config digest mismatch");
    uint32_t width;
    detail::read_pod(is, width);
    if (width != sizeof(T))
        throw std::runtime_error("checkpoint precision mismatch: stored " + std::to_string(width * 8) + "-bit");
    detail::read_pod(is, opt.step_count);
    uint32_t narr;
    detail::read_pod(is, narr);
    ps = ParamStore<T>{};
    opt.m.clear();
    opt.v.clear();
    for (uint32_t i = 0; i < narr; ++i) {
        auto [name, t] = detail::read_array<T>(is);
        if (name.rfind("adam.m.", 0) == 0)
            opt.m.emplace(name.substr(7), std::move(t));
        else if (name.rfind("adam.v.", 0) == 0)
            opt.v.emplace(name.substr(7), std::move(t));
        else
            ps.add(name, std::move(t));
    }
    uint64_t ml;
    detail::read_pod(is, ml);
    std::string metrics(ml, '\0');
    if (ml && !is.read(metrics.data(), static_cast<std::streamsize>(ml)))
        throw std::runtime_error("truncated checkpoint metrics");
    return metrics;
}

}  // namespace rcaps::train
