// Timing comparison of the OpenMP correlation kernels against the serial
// group-sum references.

#include "robustcaps/kernels.hpp"

#include <chrono>
#include <iostream>

namespace {

template <class F>
double time_ms(F&& f, int reps) {
    using clock = std::chrono::steady_clock;
    f();  // warm up
    auto t0 = clock::now();
    for (int i = 0; i < reps; ++i) f();
    auto t1 = clock::now();
    return std::chrono::duration<double, std::milli>(t1 - t0).count() / reps;
}

}  // namespace

int main() {
    using namespace rcaps;
    using T = float;
    std::mt19937_64 rng(7);

    struct Case {
        int64_t C, O, H;
        int k;
    };
    const std::vector<Case> cases = {{8, 8, 16, 3}, {16, 16, 16, 3}, {16, 32, 32, 3}};

    std::cout << "kernel,case,fast_ms,reference_ms,speedup,max_abs_diff\n";
    for (const auto& c : cases) {
        std::string label = std::to_string(c.C) + "x" + std::to_string(c.O) + "x" +
                            std::to_string(c.H) + "k" + std::to_string(c.k);
        auto b = random_tensor<T>({c.O}, rng);
        {
            auto in = random_tensor<T>({1, c.C, c.H, c.H}, rng);
            auto w = random_tensor<T>({c.O, c.C, c.k, c.k}, rng);
            Tensor<T> fast, ref;
            double tf = time_ms([&] { fast = kernels::lift_forward(in, w, b, 1); }, 5);
            double tr = time_ms([&] { ref = kernels::reference::lift_forward(in, w, b, 1); }, 2);
            std::cout << "lift," << label << "," << tf << "," << tr << "," << tr / tf << ","
                      << max_abs_diff(fast, ref) << "\n";
        }
        {
            auto in = random_tensor<T>({1, c.C, 4, c.H, c.H}, rng);
            auto w = random_tensor<T>({c.O, c.C, 4, c.k, c.k}, rng);
            Tensor<T> fast, ref;
            double tf = time_ms([&] { fast = kernels::group_forward(in, w, b, 1); }, 5);
            double tr = time_ms([&] { ref = kernels::reference::group_forward(in, w, b, 1); }, 2);
            std::cout << "group," << label << "," << tf << "," << tr << "," << tr / tf << ","
                      << max_abs_diff(fast, ref) << "\n";
        }
    }
    return 0;
}
