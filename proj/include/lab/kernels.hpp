#pragma once

#include <algorithm>
#include <cstdint>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace lab::kern {

// The gemm/conv kernels below carry the bulk of every training and sampling
// step. Each has an OpenMP path and a naive serial twin in kern::ref used as
// the correctness oracle; both accumulate every output element in the same
// index order, so results are bit-identical across backends and thread
// counts. bench_kernels compares their throughput.

enum class Backend { Serial, OpenMP };

inline Backend& backend_ref() {
    static Backend b = Backend::OpenMP;
    return b;
}
inline void set_backend(Backend b) { backend_ref() = b; }
inline Backend backend() { return backend_ref(); }

// Work under this many flops is not worth a fork/join on any machine we care
// about.
inline constexpr int64_t kParallelFlopCutoff = 16 * 1024;

inline bool use_parallel(int64_t flops) {
#ifdef _OPENMP
    if (backend() != Backend::OpenMP) return false;
    if (omp_in_parallel()) return false;
    return flops >= kParallelFlopCutoff;
#else
    (void)flops;
    return false;
#endif
}

// ---------------------------------------------------------------------------
// gemm: row-major. C[M,N] = A·B with the layouts named by the suffix.
// acc=true accumulates into C instead of overwriting.
// ---------------------------------------------------------------------------

// A[M,K] · B[K,N]
template <typename T>
void gemm_nn(int M, int K, int N, const T* A, const T* B, T* C, bool acc) {
    if (!acc) std::fill(C, C + static_cast<int64_t>(M) * N, T(0));
    const bool par = use_parallel(2ll * M * K * N);
#pragma omp parallel for schedule(static) if (par)
    for (int i = 0; i < M; ++i) {
        T* ci = C + static_cast<int64_t>(i) * N;
        const T* ai = A + static_cast<int64_t>(i) * K;
        for (int k = 0; k < K; ++k) {
            const T a = ai[k];
            const T* bk = B + static_cast<int64_t>(k) * N;
            for (int j = 0; j < N; ++j) ci[j] += a * bk[j];
        }
    }
}

// A[M,K] · B[N,K]^T
template <typename T>
void gemm_nt(int M, int K, int N, const T* A, const T* B, T* C, bool acc) {
    const bool par = use_parallel(2ll * M * K * N);
#pragma omp parallel for schedule(static) if (par)
    for (int i = 0; i < M; ++i) {
        const T* ai = A + static_cast<int64_t>(i) * K;
        T* ci = C + static_cast<int64_t>(i) * N;
        for (int j = 0; j < N; ++j) {
            const T* bj = B + static_cast<int64_t>(j) * K;
            T s = acc ? ci[j] : T(0);
            for (int k = 0; k < K; ++k) s += ai[k] * bj[k];
            ci[j] = s;
        }
    }
}

// A[K,M]^T · B[K,N]
template <typename T>
void gemm_tn(int M, int K, int N, const T* A, const T* B, T* C, bool acc) {
    if (!acc) std::fill(C, C + static_cast<int64_t>(M) * N, T(0));
    const bool par = use_parallel(2ll * M * K * N);
#pragma omp parallel for schedule(static) if (par)
    for (int i = 0; i < M; ++i) {
        T* ci = C + static_cast<int64_t>(i) * N;
        for (int k = 0; k < K; ++k) {
            const T a = A[static_cast<int64_t>(k) * M + i];
            const T* bk = B + static_cast<int64_t>(k) * N;
            for (int j = 0; j < N; ++j) ci[j] += a * bk[j];
        }
    }
}

// ---------------------------------------------------------------------------
// conv2d: x[N,Ci,H,W], w[Co,Ci,kh,kw], y[N,Co,Ho,Wo], zero padding `pad`,
// stride `s`. Accumulation order over (ci,kh,kw) is fixed in all three
// kernels and both backends.
// ---------------------------------------------------------------------------

inline int conv_out_dim(int in, int k, int pad, int stride) {
    return (in + 2 * pad - k) / stride + 1;
}

// Valid output range [lo, hi) such that 0 <= o*stride - pad + k < limit.
inline void conv_valid_range(int limit, int out_dim, int pad, int stride, int k, int& lo, int& hi) {
    int num = pad - k;
    lo = num <= 0 ? 0 : (num + stride - 1) / stride;
    hi = (limit - 1 + pad - k) / stride + 1;
    if (hi > out_dim) hi = out_dim;
    if (lo > hi) lo = hi;
}

template <typename T>
void conv2d_fwd(int N, int Ci, int H, int W, int Co, int kh, int kw, int pad, int stride,
                const T* x, const T* w, T* y, bool acc) {
    const int Ho = conv_out_dim(H, kh, pad, stride);
    const int Wo = conv_out_dim(W, kw, pad, stride);
    const int64_t flops = 2ll * N * Co * Ho * Wo * Ci * kh * kw;
    const bool par = use_parallel(flops);
    // Per output element the (ci,ky,kx) accumulation order matches ref::.
#pragma omp parallel for collapse(2) schedule(static) if (par)
    for (int n = 0; n < N; ++n) {
        for (int co = 0; co < Co; ++co) {
            T* yc = y + (static_cast<int64_t>(n) * Co + co) * Ho * Wo;
            if (!acc) std::fill(yc, yc + static_cast<int64_t>(Ho) * Wo, T(0));
            const T* wc = w + static_cast<int64_t>(co) * Ci * kh * kw;
            for (int ci = 0; ci < Ci; ++ci) {
                const T* xc = x + (static_cast<int64_t>(n) * Ci + ci) * H * W;
                const T* wk = wc + static_cast<int64_t>(ci) * kh * kw;
                for (int ky = 0; ky < kh; ++ky) {
                    int ho_lo, ho_hi;
                    conv_valid_range(H, Ho, pad, stride, ky, ho_lo, ho_hi);
                    for (int kx = 0; kx < kw; ++kx) {
                        int wo_lo, wo_hi;
                        conv_valid_range(W, Wo, pad, stride, kx, wo_lo, wo_hi);
                        const T wv = wk[ky * kw + kx];
                        for (int ho = ho_lo; ho < ho_hi; ++ho) {
                            const T* xrow = xc + (ho * stride - pad + ky) * W - pad + kx;
                            T* yrow = yc + ho * Wo;
                            if (stride == 1) {
                                for (int wo = wo_lo; wo < wo_hi; ++wo)
                                    yrow[wo] += xrow[wo] * wv;
                            } else {
                                for (int wo = wo_lo; wo < wo_hi; ++wo)
                                    yrow[wo] += xrow[wo * stride] * wv;
                            }
                        }
                    }
                }
            }
        }
    }
}

// dx from dy and w.
template <typename T>
void conv2d_dgrad(int N, int Ci, int H, int W, int Co, int kh, int kw, int pad, int stride,
                  const T* dy, const T* w, T* dx, bool acc) {
    const int Ho = conv_out_dim(H, kh, pad, stride);
    const int Wo = conv_out_dim(W, kw, pad, stride);
    const int64_t flops = 2ll * N * Ci * H * W * Co * kh * kw;
    const bool par = use_parallel(flops);
    // Per input element the (co,ky,kx) accumulation order matches ref::.
#pragma omp parallel for collapse(2) schedule(static) if (par)
    for (int n = 0; n < N; ++n) {
        for (int ci = 0; ci < Ci; ++ci) {
            T* dxc = dx + (static_cast<int64_t>(n) * Ci + ci) * H * W;
            if (!acc) std::fill(dxc, dxc + static_cast<int64_t>(H) * W, T(0));
            for (int co = 0; co < Co; ++co) {
                const T* dyc = dy + (static_cast<int64_t>(n) * Co + co) * Ho * Wo;
                const T* wc = w + (static_cast<int64_t>(co) * Ci + ci) * kh * kw;
                for (int ky = 0; ky < kh; ++ky) {
                    int ho_lo, ho_hi;
                    conv_valid_range(H, Ho, pad, stride, ky, ho_lo, ho_hi);
                    for (int kx = 0; kx < kw; ++kx) {
                        int wo_lo, wo_hi;
                        conv_valid_range(W, Wo, pad, stride, kx, wo_lo, wo_hi);
                        const T wv = wc[ky * kw + kx];
                        for (int ho = ho_lo; ho < ho_hi; ++ho) {
                            T* dxrow = dxc + (ho * stride - pad + ky) * W - pad + kx;
                            const T* dyrow = dyc + ho * Wo;
                            if (stride == 1) {
                                for (int wo = wo_lo; wo < wo_hi; ++wo)
                                    dxrow[wo] += dyrow[wo] * wv;
                            } else {
                                for (int wo = wo_lo; wo < wo_hi; ++wo)
                                    dxrow[wo * stride] += dyrow[wo] * wv;
                            }
                        }
                    }
                }
            }
        }
    }
}

// dw from dy and x. Always accumulates.
template <typename T>
void conv2d_wgrad(int N, int Ci, int H, int W, int Co, int kh, int kw, int pad, int stride,
                  const T* dy, const T* x, T* dw) {
    const int Ho = conv_out_dim(H, kh, pad, stride);
    const int Wo = conv_out_dim(W, kw, pad, stride);
    const int64_t flops = 2ll * N * Co * Ci * kh * kw * Ho * Wo;
    const bool par = use_parallel(flops);
    // Per kernel element the (n,ho,wo) accumulation order matches ref::.
#pragma omp parallel for collapse(2) schedule(static) if (par)
    for (int co = 0; co < Co; ++co) {
        for (int ci = 0; ci < Ci; ++ci) {
            T* dwc = dw + (static_cast<int64_t>(co) * Ci + ci) * kh * kw;
            for (int ky = 0; ky < kh; ++ky) {
                int ho_lo, ho_hi;
                conv_valid_range(H, Ho, pad, stride, ky, ho_lo, ho_hi);
                for (int kx = 0; kx < kw; ++kx) {
                    int wo_lo, wo_hi;
                    conv_valid_range(W, Wo, pad, stride, kx, wo_lo, wo_hi);
                    T s = dwc[ky * kw + kx];
                    for (int n = 0; n < N; ++n) {
                        const T* dyc = dy + (static_cast<int64_t>(n) * Co + co) * Ho * Wo;
                        const T* xc = x + (static_cast<int64_t>(n) * Ci + ci) * H * W;
                        for (int ho = ho_lo; ho < ho_hi; ++ho) {
                            const T* xrow = xc + (ho * stride - pad + ky) * W - pad + kx;
                            const T* dyrow = dyc + ho * Wo;
                            if (stride == 1) {
                                for (int wo = wo_lo; wo < wo_hi; ++wo)
                                    s += dyrow[wo] * xrow[wo];
                            } else {
                                for (int wo = wo_lo; wo < wo_hi; ++wo)
                                    s += dyrow[wo] * xrow[wo * stride];
                            }
                        }
                    }
                    dwc[ky * kw + kx] = s;
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Naive serial reference implementations. Kept deliberately textbook-shaped;
// the unit tests assert the fast kernels match these bit for bit.
// ---------------------------------------------------------------------------
namespace ref {

template <typename T>
void gemm_nn(int M, int K, int N, const T* A, const T* B, T* C, bool acc) {
    for (int i = 0; i < M; ++i)
        for (int j = 0; j < N; ++j) {
            T s = acc ? C[static_cast<int64_t>(i) * N + j] : T(0);
            for (int k = 0; k < K; ++k)
                s += A[static_cast<int64_t>(i) * K + k] * B[static_cast<int64_t>(k) * N + j];
            C[static_cast<int64_t>(i) * N + j] = s;
        }
}

template <typename T>
void gemm_nt(int M, int K, int N, const T* A, const T* B, T* C, bool acc) {
    for (int i = 0; i < M; ++i)
        for (int j = 0; j < N; ++j) {
            T s = acc ? C[static_cast<int64_t>(i) * N + j] : T(0);
            for (int k = 0; k < K; ++k)
                s += A[static_cast<int64_t>(i) * K + k] * B[static_cast<int64_t>(j) * K + k];
            C[static_cast<int64_t>(i) * N + j] = s;
        }
}

template <typename T>
void gemm_tn(int M, int K, int N, const T* A, const T* B, T* C, bool acc) {
    for (int i = 0; i < M; ++i)
        for (int j = 0; j < N; ++j) {
            T s = acc ? C[static_cast<int64_t>(i) * N + j] : T(0);
            for (int k = 0; k < K; ++k)
                s += A[static_cast<int64_t>(k) * M + i] * B[static_cast<int64_t>(k) * N + j];
            C[static_cast<int64_t>(i) * N + j] = s;
        }
}

template <typename T>
void conv2d_fwd(int N, int Ci, int H, int W, int Co, int kh, int kw, int pad, int stride,
                const T* x, const T* w, T* y, bool acc) {
    const int Ho = conv_out_dim(H, kh, pad, stride);
    const int Wo = conv_out_dim(W, kw, pad, stride);
    for (int n = 0; n < N; ++n)
        for (int co = 0; co < Co; ++co)
            for (int ho = 0; ho < Ho; ++ho)
                for (int wo = 0; wo < Wo; ++wo) {
                    int64_t yi = ((static_cast<int64_t>(n) * Co + co) * Ho + ho) * Wo + wo;
                    T s = acc ? y[yi] : T(0);
                    for (int ci = 0; ci < Ci; ++ci)
                        for (int ky = 0; ky < kh; ++ky)
                            for (int kx = 0; kx < kw; ++kx) {
                                const int h = ho * stride - pad + ky;
                                const int ww = wo * stride - pad + kx;
                                if (h < 0 || h >= H || ww < 0 || ww >= W) continue;
                                s += x[((static_cast<int64_t>(n) * Ci + ci) * H + h) * W + ww] *
                                     w[((static_cast<int64_t>(co) * Ci + ci) * kh + ky) * kw + kx];
                            }
                    y[yi] = s;
                }
}

template <typename T>
void conv2d_dgrad(int N, int Ci, int H, int W, int Co, int kh, int kw, int pad, int stride,
                  const T* dy, const T* w, T* dx, bool acc) {
    const int Ho = conv_out_dim(H, kh, pad, stride);
    const int Wo = conv_out_dim(W, kw, pad, stride);
    for (int n = 0; n < N; ++n)
        for (int ci = 0; ci < Ci; ++ci)
            for (int h = 0; h < H; ++h)
                for (int ww = 0; ww < W; ++ww) {
                    int64_t xi = ((static_cast<int64_t>(n) * Ci + ci) * H + h) * W + ww;
                    T s = acc ? dx[xi] : T(0);
                    for (int co = 0; co < Co; ++co)
                        for (int ky = 0; ky < kh; ++ky)
                            for (int kx = 0; kx < kw; ++kx) {
                                const int num = h + pad - ky;
                                const int numw = ww + pad - kx;
                                if (num < 0 || num % stride != 0) continue;
                                if (numw < 0 || numw % stride != 0) continue;
                                const int ho = num / stride;
                                const int wo = numw / stride;
                                if (ho >= Ho || wo >= Wo) continue;
                                s += dy[((static_cast<int64_t>(n) * Co + co) * Ho + ho) * Wo + wo] *
                                     w[((static_cast<int64_t>(co) * Ci + ci) * kh + ky) * kw + kx];
                            }
                    dx[xi] = s;
                }
}

template <typename T>
void conv2d_wgrad(int N, int Ci, int H, int W, int Co, int kh, int kw, int pad, int stride,
                  const T* dy, const T* x, T* dw) {
    const int Ho = conv_out_dim(H, kh, pad, stride);
    const int Wo = conv_out_dim(W, kw, pad, stride);
    for (int co = 0; co < Co; ++co)
        for (int ci = 0; ci < Ci; ++ci)
            for (int ky = 0; ky < kh; ++ky)
                for (int kx = 0; kx < kw; ++kx) {
                    int64_t wi = ((static_cast<int64_t>(co) * Ci + ci) * kh + ky) * kw + kx;
                    T s = dw[wi];
                    for (int n = 0; n < N; ++n)
                        for (int ho = 0; ho < Ho; ++ho)
                            for (int wo = 0; wo < Wo; ++wo) {
                                const int h = ho * stride - pad + ky;
                                const int ww = wo * stride - pad + kx;
                                if (h < 0 || h >= H || ww < 0 || ww >= W) continue;
                                s += dy[((static_cast<int64_t>(n) * Co + co) * Ho + ho) * Wo + wo] *
                                     x[((static_cast<int64_t>(n) * Ci + ci) * H + h) * W + ww];
                            }
                    dw[wi] = s;
                }
}

}  // namespace ref

}  // namespace lab::kern
