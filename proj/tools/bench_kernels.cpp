// Compares the OpenMP kernels against their serial reference twins at the
// shapes the training and sampling loops actually hit, and verifies the
// results agree bit for bit while timing them.

#include <chrono>
#include <cstdio>
#include <cstring>
#include <functional>
#include <string>
#include <vector>

#include "lab/kernels.hpp"
#include "lab/rng.hpp"

using namespace lab;
using Clock = std::chrono::steady_clock;

namespace {

double time_of(int reps, const std::function<void()>& fn) {
    fn();  // warm up
    const auto t0 = Clock::now();
    for (int i = 0; i < reps; ++i) fn();
    return std::chrono::duration<double>(Clock::now() - t0).count() / reps;
}

std::vector<float> randv(size_t n, Rng& rng) {
    std::vector<float> v(n);
    for (auto& x : v) x = static_cast<float>(rng.uniform() * 2.0 - 1.0);
    return v;
}

bool bit_equal(const std::vector<float>& a, const std::vector<float>& b) {
    return std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

void row(const char* name, double gflop, double t_ref, double t_serial, double t_omp, bool ok) {
    std::printf("%-26s %8.2f ms ref | %8.2f ms serial | %8.2f ms omp | x%.2f vs ref | %6.2f GF/s | %s\n",
                name, t_ref * 1e3, t_serial * 1e3, t_omp * 1e3, t_ref / t_omp, gflop / t_omp,
                ok ? "bit-exact" : "MISMATCH");
}

}  // namespace

int main(int argc, char** argv) {
    const bool quick = argc > 1 && std::string(argv[1]) == "--quick";
    const int reps = quick ? 3 : 30;
    Rng rng(7);
    bool all_ok = true;

    {
        // attention/linear shape: [S,C]x[C,C] at S=256, C=64
        const int M = 256, K = 64, N = 64;
        auto A = randv(static_cast<size_t>(M) * K, rng);
        auto B = randv(static_cast<size_t>(K) * N, rng);
        std::vector<float> c_ref(static_cast<size_t>(M) * N), c_fast(c_ref.size());
        const double t_ref =
            time_of(reps, [&] { kern::ref::gemm_nn(M, K, N, A.data(), B.data(), c_ref.data(), false); });
        kern::set_backend(kern::Backend::Serial);
        const double t_ser =
            time_of(reps, [&] { kern::gemm_nn(M, K, N, A.data(), B.data(), c_fast.data(), false); });
        kern::set_backend(kern::Backend::OpenMP);
        const double t_omp =
            time_of(reps, [&] { kern::gemm_nn(M, K, N, A.data(), B.data(), c_fast.data(), false); });
        const bool ok = bit_equal(c_ref, c_fast);
        all_ok = all_ok && ok;
        row("gemm_nn 256x64x64", 2.0 * M * K * N / 1e9, t_ref, t_ser, t_omp, ok);
    }
    {
        // unet conv shape at full resolution
        const int N = 4, Ci = 32, H = 32, W = 32, Co = 32;
        auto x = randv(static_cast<size_t>(N) * Ci * H * W, rng);
        auto w = randv(static_cast<size_t>(Co) * Ci * 9, rng);
        std::vector<float> y_ref(static_cast<size_t>(N) * Co * H * W), y_fast(y_ref.size());
        const double t_ref = time_of(reps, [&] {
            kern::ref::conv2d_fwd(N, Ci, H, W, Co, 3, 3, 1, 1, x.data(), w.data(), y_ref.data(), false);
        });
        kern::set_backend(kern::Backend::Serial);
        const double t_ser = time_of(reps, [&] {
            kern::conv2d_fwd(N, Ci, H, W, Co, 3, 3, 1, 1, x.data(), w.data(), y_fast.data(), false);
        });
        kern::set_backend(kern::Backend::OpenMP);
        const double t_omp = time_of(reps, [&] {
            kern::conv2d_fwd(N, Ci, H, W, Co, 3, 3, 1, 1, x.data(), w.data(), y_fast.data(), false);
        });
        const bool ok = bit_equal(y_ref, y_fast);
        all_ok = all_ok && ok;
        row("conv3x3 32ch 32x32 b4", 2.0 * N * Co * H * W * Ci * 9 / 1e9, t_ref, t_ser, t_omp, ok);
    }
    {
        const int N = 4, Ci = 64, H = 16, W = 16, Co = 64;
        auto dy = randv(static_cast<size_t>(N) * Co * H * W, rng);
        auto w = randv(static_cast<size_t>(Co) * Ci * 9, rng);
        auto x = randv(static_cast<size_t>(N) * Ci * H * W, rng);
        std::vector<float> dx_ref(x.size()), dx_fast(x.size());
        std::vector<float> dw_ref(w.size(), 0.0f), dw_fast(w.size(), 0.0f);
        const double t_ref = time_of(reps, [&] {
            kern::ref::conv2d_dgrad(N, Ci, H, W, Co, 3, 3, 1, 1, dy.data(), w.data(), dx_ref.data(), false);
        });
        kern::set_backend(kern::Backend::Serial);
        const double t_ser = time_of(reps, [&] {
            kern::conv2d_dgrad(N, Ci, H, W, Co, 3, 3, 1, 1, dy.data(), w.data(), dx_fast.data(), false);
        });
        kern::set_backend(kern::Backend::OpenMP);
        const double t_omp = time_of(reps, [&] {
            kern::conv2d_dgrad(N, Ci, H, W, Co, 3, 3, 1, 1, dy.data(), w.data(), dx_fast.data(), false);
        });
        bool ok = bit_equal(dx_ref, dx_fast);
        kern::ref::conv2d_wgrad(N, Ci, H, W, Co, 3, 3, 1, 1, dy.data(), x.data(), dw_ref.data());
        kern::conv2d_wgrad(N, Ci, H, W, Co, 3, 3, 1, 1, dy.data(), x.data(), dw_fast.data());
        ok = ok && bit_equal(dw_ref, dw_fast);
        all_ok = all_ok && ok;
        row("conv3x3 dgrad 64ch 16x16", 2.0 * N * Ci * H * W * Co * 9 / 1e9, t_ref, t_ser, t_omp, ok);
    }

    std::printf("%s\n", all_ok ? "all kernels bit-exact across backends" : "BACKEND MISMATCH");
    return all_ok ? 0 : 1;
}
