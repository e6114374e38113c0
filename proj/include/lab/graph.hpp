#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "lab/kernels.hpp"
#include "lab/tensor.hpp"

namespace lab {

using NodeId = int;

// Define-by-run reverse-mode tape. Ops compute their forward value eagerly
// and, when any input requires gradients, register a closure that pushes the
// output gradient to the inputs. backward() runs the closures in reverse
// creation order (which is a topological order by construction) and finally
// accumulates leaf gradients into the external tensors' grad buffers.
//
// Gradients accumulate additively across uses of a node. backward() may be
// called once per graph.
template <typename T>
class Graph {
   public:
    explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

    // Leaf referencing an external tensor (typically a Parameter's tensor or
    // input data). The tensor must outlive the graph.
    NodeId leaf(Tensor<T>* external) {
        Node n;
        n.external = external;
        n.requires_grad = grad_enabled_ && external->requires_grad;
        nodes_.push_back(std::move(n));
        return static_cast<NodeId>(nodes_.size() - 1);
    }

    // Owned constant with no gradient.
    NodeId constant(Tensor<T> value) {
        Node n;
        n.value = std::move(value);
        nodes_.push_back(std::move(n));
        return static_cast<NodeId>(nodes_.size() - 1);
    }

    const Tensor<T>& val(NodeId id) const {
        const Node& n = nodes_[static_cast<size_t>(id)];
        return n.external ? *n.external : n.value;
    }

    const std::vector<int>& shape(NodeId id) const { return val(id).shape; }
    bool requires_grad(NodeId id) const { return nodes_[static_cast<size_t>(id)].requires_grad; }

    std::vector<T>& grad(NodeId id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (n.grad.empty()) n.grad.assign(val(id).data.size(), T(0));
        return n.grad;
    }
    bool has_grad(NodeId id) const { return !nodes_[static_cast<size_t>(id)].grad.empty(); }

    size_t size() const { return nodes_.size(); }

    void backward(NodeId output) {
        if (backward_done_)
            throw Error("backward: called twice on the same graph");
        if (val(output).numel() != 1)
            throw Error("backward: output must be scalar, got shape " + shape_str(shape(output)));
        if (!nodes_[static_cast<size_t>(output)].requires_grad)
            throw Error("backward: output does not require gradients");
        backward_done_ = true;
        grad(output)[0] = T(1);
        for (int i = output; i >= 0; --i) {
            Node& n = nodes_[static_cast<size_t>(i)];
            if (!n.requires_grad || n.grad.empty()) continue;
            if (n.back) n.back(*this);
            if (n.external && n.external->requires_grad) {
                n.external->ensure_grad();
                for (size_t k = 0; k < n.grad.size(); ++k) n.external->grad[k] += n.grad[k];
            }
        }
    }

    // ------------------------------------------------------------------
    // elementwise
    // ------------------------------------------------------------------

    NodeId add(NodeId a, NodeId b) { return binary_same("add", a, b, /*sub=*/false); }
    NodeId sub(NodeId a, NodeId b) { return binary_same("sub", a, b, /*sub=*/true); }

    NodeId mul(NodeId a, NodeId b) {
        check_same("mul", a, b);
        Tensor<T> out(shape(a));
        const auto& va = val(a).data;
        const auto& vb = val(b).data;
        for (size_t i = 0; i < va.size(); ++i) out.data[i] = va[i] * vb[i];
        NodeId id = push(std::move(out), requires_grad(a) || requires_grad(b));
        if (requires_grad(id))
            set_back(id, [a, b, id](Graph& g) {
                const auto& go = g.grad(id);
                if (g.requires_grad(a)) {
                    auto& ga = g.grad(a);
                    const auto& vb2 = g.val(b).data;
                    for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * vb2[i];
                }
                if (g.requires_grad(b)) {
                    auto& gb = g.grad(b);
                    const auto& va2 = g.val(a).data;
                    for (size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * va2[i];
                }
            });
        return id;
    }

    NodeId mul_scalar(NodeId a, double s) {
        Tensor<T> out(shape(a));
        const auto& va = val(a).data;
        const T ts = static_cast<T>(s);
        for (size_t i = 0; i < va.size(); ++i) out.data[i] = va[i] * ts;
        NodeId id = push(std::move(out), requires_grad(a));
        if (requires_grad(id))
            set_back(id, [a, id, ts](Graph& g) {
                const auto& go = g.grad(id);
                auto& ga = g.grad(a);
                for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * ts;
            });
        return id;
    }

    NodeId silu(NodeId a) {
        Tensor<T> out(shape(a));
        const auto& va = val(a).data;
        for (size_t i = 0; i < va.size(); ++i) {
            const T s = sigmoid(va[i]);
            out.data[i] = va[i] * s;
        }
        NodeId id = push(std::move(out), requires_grad(a));
        if (requires_grad(id))
            set_back(id, [a, id](Graph& g) {
                const auto& go = g.grad(id);
                const auto& va2 = g.val(a).data;
                auto& ga = g.grad(a);
                for (size_t i = 0; i < go.size(); ++i) {
                    const T s = sigmoid(va2[i]);
                    ga[i] += go[i] * s * (T(1) + va2[i] * (T(1) - s));
                }
            });
        return id;
    }

    // Exact gelu, x * Phi(x).
    NodeId gelu(NodeId a) {
        Tensor<T> out(shape(a));
        const auto& va = val(a).data;
        for (size_t i = 0; i < va.size(); ++i) out.data[i] = va[i] * norm_cdf(va[i]);
        NodeId id = push(std::move(out), requires_grad(a));
        if (requires_grad(id))
            set_back(id, [a, id](Graph& g) {
                const auto& go = g.grad(id);
                const auto& va2 = g.val(a).data;
                auto& ga = g.grad(a);
                for (size_t i = 0; i < go.size(); ++i) {
                    const T x = va2[i];
                    ga[i] += go[i] * (norm_cdf(x) + x * norm_pdf(x));
                }
            });
        return id;
    }

    // ------------------------------------------------------------------
    // matrix products
    // ------------------------------------------------------------------

    // A[m,k] · B[k,n]
    NodeId matmul(NodeId a, NodeId b) {
        require_ndim("matmul", a, 2);
        require_ndim("matmul", b, 2);
        const int m = shape(a)[0], k = shape(a)[1];
        if (shape(b)[0] != k)
            throw ShapeError("matmul: inner dims differ, " + shape_str(shape(a)) + " x " +
                             shape_str(shape(b)));
        const int n = shape(b)[1];
        Tensor<T> out({m, n});
        kern::gemm_nn(m, k, n, val(a).ptr(), val(b).ptr(), out.ptr(), false);
        NodeId id = push(std::move(out), requires_grad(a) || requires_grad(b));
        if (requires_grad(id))
            set_back(id, [a, b, id, m, k, n](Graph& g) {
                const T* go = g.grad(id).data();
                if (g.requires_grad(a))
                    kern::gemm_nt(m, n, k, go, g.val(b).ptr(), g.grad(a).data(), true);
                if (g.requires_grad(b))
                    kern::gemm_tn(k, m, n, g.val(a).ptr(), go, g.grad(b).data(), true);
            });
        return id;
    }

    // A[m,k] · B[n,k]^T
    NodeId matmul_nt(NodeId a, NodeId b) {
        require_ndim("matmul_nt", a, 2);
        require_ndim("matmul_nt", b, 2);
        const int m = shape(a)[0], k = shape(a)[1];
        if (shape(b)[1] != k)
            throw ShapeError("matmul_nt: inner dims differ, " + shape_str(shape(a)) + " x " +
                             shape_str(shape(b)) + "^T");
        const int n = shape(b)[0];
        Tensor<T> out({m, n});
        kern::gemm_nt(m, k, n, val(a).ptr(), val(b).ptr(), out.ptr(), false);
        NodeId id = push(std::move(out), requires_grad(a) || requires_grad(b));
        if (requires_grad(id))
            set_back(id, [a, b, id, m, k, n](Graph& g) {
                const T* go = g.grad(id).data();
                if (g.requires_grad(a))
                    kern::gemm_nn(m, n, k, go, g.val(b).ptr(), g.grad(a).data(), true);
                if (g.requires_grad(b))
                    kern::gemm_tn(n, m, k, go, g.val(a).ptr(), g.grad(b).data(), true);
            });
        return id;
    }

    // ------------------------------------------------------------------
    // convolution / resampling
    // ------------------------------------------------------------------

    NodeId conv2d(NodeId x, NodeId w, int stride, int pad) {
        require_ndim("conv2d", x, 4);
        require_ndim("conv2d", w, 4);
        const auto& xs = shape(x);
        const auto& ws = shape(w);
        if (ws[1] != xs[1])
            throw ShapeError("conv2d: input channels " + shape_str(xs) + " vs kernel " +
                             shape_str(ws));
        if (stride != 1 && stride != 2) throw ShapeError("conv2d: stride must be 1 or 2");
        const int N = xs[0], Ci = xs[1], H = xs[2], W = xs[3];
        const int Co = ws[0], kh = ws[2], kw = ws[3];
        const int Ho = kern::conv_out_dim(H, kh, pad, stride);
        const int Wo = kern::conv_out_dim(W, kw, pad, stride);
        if (Ho <= 0 || Wo <= 0)
            throw ShapeError("conv2d: empty output for input " + shape_str(xs) + " kernel " +
                             shape_str(ws));
        Tensor<T> out({N, Co, Ho, Wo});
        kern::conv2d_fwd(N, Ci, H, W, Co, kh, kw, pad, stride, val(x).ptr(), val(w).ptr(),
                         out.ptr(), false);
        NodeId id = push(std::move(out), requires_grad(x) || requires_grad(w));
        if (requires_grad(id))
            set_back(id, [x, w, id, N, Ci, H, W, Co, kh, kw, pad, stride](Graph& g) {
                const T* go = g.grad(id).data();
                if (g.requires_grad(x)) {
                    // accumulate via a scratch then add; dgrad overwrites
                    std::vector<T> tmp(static_cast<size_t>(N) * Ci * H * W);
                    kern::conv2d_dgrad(N, Ci, H, W, Co, kh, kw, pad, stride, go, g.val(w).ptr(),
                                       tmp.data(), false);
                    auto& gx = g.grad(x);
                    for (size_t i = 0; i < gx.size(); ++i) gx[i] += tmp[i];
                }
                if (g.requires_grad(w))
                    kern::conv2d_wgrad(N, Ci, H, W, Co, kh, kw, pad, stride, go, g.val(x).ptr(),
                                       g.grad(w).data());
            });
        return id;
    }

    NodeId upsample_nearest2x(NodeId x) {
        require_ndim("upsample_nearest2x", x, 4);
        const auto& xs = shape(x);
        const int N = xs[0], C = xs[1], H = xs[2], W = xs[3];
        Tensor<T> out({N, C, 2 * H, 2 * W});
        const T* px = val(x).ptr();
        T* py = out.ptr();
        for (int nc = 0; nc < N * C; ++nc) {
            const T* xi = px + static_cast<int64_t>(nc) * H * W;
            T* yi = py + static_cast<int64_t>(nc) * 4 * H * W;
            for (int h = 0; h < 2 * H; ++h)
                for (int w = 0; w < 2 * W; ++w) yi[h * 2 * W + w] = xi[(h / 2) * W + (w / 2)];
        }
        NodeId id = push(std::move(out), requires_grad(x));
        if (requires_grad(id))
            set_back(id, [x, id, N, C, H, W](Graph& g) {
                const auto& go = g.grad(id);
                auto& gx = g.grad(x);
                for (int nc = 0; nc < N * C; ++nc) {
                    const T* gyi = go.data() + static_cast<int64_t>(nc) * 4 * H * W;
                    T* gxi = gx.data() + static_cast<int64_t>(nc) * H * W;
                    for (int h = 0; h < 2 * H; ++h)
                        for (int w = 0; w < 2 * W; ++w)
                            gxi[(h / 2) * W + (w / 2)] += gyi[h * 2 * W + w];
                }
            });
        return id;
    }

    // ------------------------------------------------------------------
    // normalization
    // ------------------------------------------------------------------

    // x[N,C,H,W], gamma/beta[C]; statistics per (sample, group).
    NodeId group_norm(NodeId x, NodeId gamma, NodeId beta, int groups, double eps = 1e-5) {
        require_ndim("group_norm", x, 4);
        const auto& xs = shape(x);
        const int N = xs[0], C = xs[1], H = xs[2], W = xs[3];
        if (C % groups != 0)
            throw ShapeError("group_norm: channels " + std::to_string(C) +
                             " not divisible by groups " + std::to_string(groups));
        if (shape(gamma) != std::vector<int>{C} || shape(beta) != std::vector<int>{C})
            throw ShapeError("group_norm: gamma/beta must be (C), got " +
                             shape_str(shape(gamma)) + " " + shape_str(shape(beta)));
        const int cg = C / groups;
        const int64_t gsz = static_cast<int64_t>(cg) * H * W;
        Tensor<T> out(xs);
        Tensor<T> xhat(xs);       // saved for backward
        std::vector<T> inv_std(static_cast<size_t>(N) * groups);
        const T* px = val(x).ptr();
        const T* pg = val(gamma).ptr();
        const T* pb = val(beta).ptr();
        for (int n = 0; n < N; ++n) {
            for (int g0 = 0; g0 < groups; ++g0) {
                const int64_t base = (static_cast<int64_t>(n) * C + static_cast<int64_t>(g0) * cg) * H * W;
                double mu = 0;
                for (int64_t i = 0; i < gsz; ++i) mu += px[base + i];
                mu /= static_cast<double>(gsz);
                double var = 0;
                for (int64_t i = 0; i < gsz; ++i) {
                    const double d = px[base + i] - mu;
                    var += d * d;
                }
                var /= static_cast<double>(gsz);
                const T istd = static_cast<T>(1.0 / std::sqrt(var + eps));
                inv_std[static_cast<size_t>(n) * groups + g0] = istd;
                for (int c = 0; c < cg; ++c) {
                    const int ch = g0 * cg + c;
                    const int64_t cb = base + static_cast<int64_t>(c) * H * W;
                    for (int64_t i = 0; i < static_cast<int64_t>(H) * W; ++i) {
                        const T xh = static_cast<T>((px[cb + i] - mu)) * istd;
                        xhat.data[static_cast<size_t>(cb + i)] = xh;
                        out.data[static_cast<size_t>(cb + i)] = pg[ch] * xh + pb[ch];
                    }
                }
            }
        }
        NodeId id = push(std::move(out),
                         requires_grad(x) || requires_grad(gamma) || requires_grad(beta));
        if (requires_grad(id)) {
            auto sx = std::make_shared<Tensor<T>>(std::move(xhat));
            auto sistd = std::make_shared<std::vector<T>>(std::move(inv_std));
            set_back(id, [x, gamma, beta, id, N, C, H, W, groups, cg, gsz, sx, sistd](Graph& g) {
                const auto& go = g.grad(id);
                const T* pxh = sx->ptr();
                const T* pg2 = g.val(gamma).ptr();
                if (g.requires_grad(beta)) {
                    auto& gb = g.grad(beta);
                    for (int n = 0; n < N; ++n)
                        for (int ch = 0; ch < C; ++ch) {
                            const int64_t cb = (static_cast<int64_t>(n) * C + ch) * H * W;
                            T s = 0;
                            for (int64_t i = 0; i < static_cast<int64_t>(H) * W; ++i)
                                s += go[static_cast<size_t>(cb + i)];
                            gb[static_cast<size_t>(ch)] += s;
                        }
                }
                if (g.requires_grad(gamma)) {
                    auto& gg = g.grad(gamma);
                    for (int n = 0; n < N; ++n)
                        for (int ch = 0; ch < C; ++ch) {
                            const int64_t cb = (static_cast<int64_t>(n) * C + ch) * H * W;
                            T s = 0;
                            for (int64_t i = 0; i < static_cast<int64_t>(H) * W; ++i)
                                s += go[static_cast<size_t>(cb + i)] * pxh[cb + i];
                            gg[static_cast<size_t>(ch)] += s;
                        }
                }
                if (g.requires_grad(x)) {
                    auto& gx = g.grad(x);
                    for (int n = 0; n < N; ++n)
                        for (int g0 = 0; g0 < groups; ++g0) {
                            const int64_t base =
                                (static_cast<int64_t>(n) * C + static_cast<int64_t>(g0) * cg) * H * W;
                            const T istd = (*sistd)[static_cast<size_t>(n) * groups + g0];
                            double sum_dxh = 0, sum_dxh_xh = 0;
                            for (int c = 0; c < cg; ++c) {
                                const int ch = g0 * cg + c;
                                const int64_t cb = base + static_cast<int64_t>(c) * H * W;
                                for (int64_t i = 0; i < static_cast<int64_t>(H) * W; ++i) {
                                    const double dxh =
                                        static_cast<double>(go[static_cast<size_t>(cb + i)]) * pg2[ch];
                                    sum_dxh += dxh;
                                    sum_dxh_xh += dxh * pxh[cb + i];
                                }
                            }
                            const double m1 = sum_dxh / static_cast<double>(gsz);
                            const double m2 = sum_dxh_xh / static_cast<double>(gsz);
                            for (int c = 0; c < cg; ++c) {
                                const int ch = g0 * cg + c;
                                const int64_t cb = base + static_cast<int64_t>(c) * H * W;
                                for (int64_t i = 0; i < static_cast<int64_t>(H) * W; ++i) {
                                    const double dxh =
                                        static_cast<double>(go[static_cast<size_t>(cb + i)]) * pg2[ch];
                                    gx[static_cast<size_t>(cb + i)] += static_cast<T>(
                                        istd * (dxh - m1 - pxh[cb + i] * m2));
                                }
                            }
                        }
                }
            });
        }
        return id;
    }

    // x[R,C], gamma/beta[C]; statistics per row.
    NodeId layer_norm(NodeId x, NodeId gamma, NodeId beta, double eps = 1e-5) {
        require_ndim("layer_norm", x, 2);
        const int R = shape(x)[0], C = shape(x)[1];
        if (shape(gamma) != std::vector<int>{C} || shape(beta) != std::vector<int>{C})
            throw ShapeError("layer_norm: gamma/beta must be (C)");
        Tensor<T> out({R, C});
        Tensor<T> xhat({R, C});
        std::vector<T> inv_std(static_cast<size_t>(R));
        const T* px = val(x).ptr();
        const T* pg = val(gamma).ptr();
        const T* pb = val(beta).ptr();
        for (int r = 0; r < R; ++r) {
            const T* xr = px + static_cast<int64_t>(r) * C;
            double mu = 0;
            for (int c = 0; c < C; ++c) mu += xr[c];
            mu /= C;
            double var = 0;
            for (int c = 0; c < C; ++c) {
                const double d = xr[c] - mu;
                var += d * d;
            }
            var /= C;
            const T istd = static_cast<T>(1.0 / std::sqrt(var + eps));
            inv_std[static_cast<size_t>(r)] = istd;
            for (int c = 0; c < C; ++c) {
                const T xh = static_cast<T>(xr[c] - mu) * istd;
                xhat.data[static_cast<size_t>(r) * C + c] = xh;
                out.data[static_cast<size_t>(r) * C + c] = pg[c] * xh + pb[c];
            }
        }
        NodeId id = push(std::move(out),
                         requires_grad(x) || requires_grad(gamma) || requires_grad(beta));
        if (requires_grad(id)) {
            auto sx = std::make_shared<Tensor<T>>(std::move(xhat));
            auto sistd = std::make_shared<std::vector<T>>(std::move(inv_std));
            set_back(id, [x, gamma, beta, id, R, C, sx, sistd](Graph& g) {
                const auto& go = g.grad(id);
                const T* pxh = sx->ptr();
                const T* pg2 = g.val(gamma).ptr();
                if (g.requires_grad(beta)) {
                    auto& gb = g.grad(beta);
                    for (int r = 0; r < R; ++r)
                        for (int c = 0; c < C; ++c)
                            gb[static_cast<size_t>(c)] += go[static_cast<size_t>(r) * C + c];
                }
                if (g.requires_grad(gamma)) {
                    auto& gg = g.grad(gamma);
                    for (int r = 0; r < R; ++r)
                        for (int c = 0; c < C; ++c)
                            gg[static_cast<size_t>(c)] +=
                                go[static_cast<size_t>(r) * C + c] * pxh[static_cast<int64_t>(r) * C + c];
                }
                if (g.requires_grad(x)) {
                    auto& gx = g.grad(x);
                    for (int r = 0; r < R; ++r) {
                        double m1 = 0, m2 = 0;
                        for (int c = 0; c < C; ++c) {
                            const double dxh =
                                static_cast<double>(go[static_cast<size_t>(r) * C + c]) * pg2[c];
                            m1 += dxh;
                            m2 += dxh * pxh[static_cast<int64_t>(r) * C + c];
                        }
                        m1 /= C;
                        m2 /= C;
                        const T istd = (*sistd)[static_cast<size_t>(r)];
                        for (int c = 0; c < C; ++c) {
                            const double dxh =
                                static_cast<double>(go[static_cast<size_t>(r) * C + c]) * pg2[c];
                            gx[static_cast<size_t>(r) * C + c] += static_cast<T>(
                                istd * (dxh - m1 - pxh[static_cast<int64_t>(r) * C + c] * m2));
                        }
                    }
                }
            });
        }
        return id;
    }

    // ------------------------------------------------------------------
    // softmax / reductions
    // ------------------------------------------------------------------

    NodeId softmax_rows(NodeId x) {
        require_ndim("softmax_rows", x, 2);
        const int R = shape(x)[0], C = shape(x)[1];
        Tensor<T> out({R, C});
        const T* px = val(x).ptr();
        const bool par = kern::use_parallel(4ll * R * C);
#pragma omp parallel for schedule(static) if (par)
        for (int r = 0; r < R; ++r) {
            const T* xr = px + static_cast<int64_t>(r) * C;
            T* yr = out.ptr() + static_cast<int64_t>(r) * C;
            T mx = xr[0];
            for (int c = 1; c < C; ++c) mx = std::max(mx, xr[c]);
            double sum = 0;
            for (int c = 0; c < C; ++c) {
                const double e = std::exp(static_cast<double>(xr[c] - mx));
                yr[c] = static_cast<T>(e);
                sum += e;
            }
            const T inv = static_cast<T>(1.0 / sum);
            for (int c = 0; c < C; ++c) yr[c] *= inv;
        }
        NodeId id = push(std::move(out), requires_grad(x));
        if (requires_grad(id))
            set_back(id, [x, id, R, C](Graph& g) {
                const auto& go = g.grad(id);
                const auto& y = g.val(id).data;
                auto& gx = g.grad(x);
                for (int r = 0; r < R; ++r) {
                    double dot = 0;
                    const int64_t b = static_cast<int64_t>(r) * C;
                    for (int c = 0; c < C; ++c)
                        dot += static_cast<double>(go[static_cast<size_t>(b + c)]) * y[static_cast<size_t>(b + c)];
                    for (int c = 0; c < C; ++c)
                        gx[static_cast<size_t>(b + c)] += static_cast<T>(
                            y[static_cast<size_t>(b + c)] * (go[static_cast<size_t>(b + c)] - dot));
                }
            });
        return id;
    }

    NodeId mean(NodeId x) {
        const int64_t n = val(x).numel();
        double s = 0;
        for (const T v : val(x).data) s += v;
        Tensor<T> out({1});
        out.data[0] = static_cast<T>(s / static_cast<double>(n));
        NodeId id = push(std::move(out), requires_grad(x));
        if (requires_grad(id))
            set_back(id, [x, id, n](Graph& g) {
                const T go = g.grad(id)[0] / static_cast<T>(n);
                auto& gx = g.grad(x);
                for (auto& v : gx) v += go;
            });
        return id;
    }

    NodeId sum_sq(NodeId x) {
        double s = 0;
        for (const T v : val(x).data) s += static_cast<double>(v) * v;
        Tensor<T> out({1});
        out.data[0] = static_cast<T>(s);
        NodeId id = push(std::move(out), requires_grad(x));
        if (requires_grad(id))
            set_back(id, [x, id](Graph& g) {
                const T go = g.grad(id)[0];
                const auto& vx = g.val(x).data;
                auto& gx = g.grad(x);
                for (size_t i = 0; i < gx.size(); ++i) gx[i] += T(2) * vx[i] * go;
            });
        return id;
    }

    // ------------------------------------------------------------------
    // broadcasting adds
    // ------------------------------------------------------------------

    // x[N,C,H,W] + b[C]
    NodeId add_bias_c(NodeId x, NodeId b) {
        require_ndim("add_bias_c", x, 4);
        const auto& xs = shape(x);
        const int N = xs[0], C = xs[1], HW = xs[2] * xs[3];
        if (shape(b) != std::vector<int>{C})
            throw ShapeError("add_bias_c: bias " + shape_str(shape(b)) + " vs x " + shape_str(xs));
        Tensor<T> out(xs);
        const T* px = val(x).ptr();
        const T* pb = val(b).ptr();
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                const int64_t base = (static_cast<int64_t>(n) * C + c) * HW;
                for (int i = 0; i < HW; ++i) out.data[static_cast<size_t>(base + i)] = px[base + i] + pb[c];
            }
        NodeId id = push(std::move(out), requires_grad(x) || requires_grad(b));
        if (requires_grad(id))
            set_back(id, [x, b, id, N, C, HW](Graph& g) {
                const auto& go = g.grad(id);
                if (g.requires_grad(x)) {
                    auto& gx = g.grad(x);
                    for (size_t i = 0; i < gx.size(); ++i) gx[i] += go[i];
                }
                if (g.requires_grad(b)) {
                    auto& gb = g.grad(b);
                    for (int n = 0; n < N; ++n)
                        for (int c = 0; c < C; ++c) {
                            const int64_t base = (static_cast<int64_t>(n) * C + c) * HW;
                            T s = 0;
                            for (int i = 0; i < HW; ++i) s += go[static_cast<size_t>(base + i)];
                            gb[static_cast<size_t>(c)] += s;
                        }
                }
            });
        return id;
    }

    // x[N,C,H,W] + b[N,C]  (per-sample channel bias, e.g. time embedding)
    NodeId add_bias_nc(NodeId x, NodeId b) {
        require_ndim("add_bias_nc", x, 4);
        const auto& xs = shape(x);
        const int N = xs[0], C = xs[1], HW = xs[2] * xs[3];
        if (shape(b) != std::vector<int>{N, C})
            throw ShapeError("add_bias_nc: bias " + shape_str(shape(b)) + " vs x " + shape_str(xs));
        Tensor<T> out(xs);
        const T* px = val(x).ptr();
        const T* pb = val(b).ptr();
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                const int64_t base = (static_cast<int64_t>(n) * C + c) * HW;
                const T bv = pb[static_cast<int64_t>(n) * C + c];
                for (int i = 0; i < HW; ++i) out.data[static_cast<size_t>(base + i)] = px[base + i] + bv;
            }
        NodeId id = push(std::move(out), requires_grad(x) || requires_grad(b));
        if (requires_grad(id))
            set_back(id, [x, b, id, N, C, HW](Graph& g) {
                const auto& go = g.grad(id);
                if (g.requires_grad(x)) {
                    auto& gx = g.grad(x);
                    for (size_t i = 0; i < gx.size(); ++i) gx[i] += go[i];
                }
                if (g.requires_grad(b)) {
                    auto& gb = g.grad(b);
                    for (int n = 0; n < N; ++n)
                        for (int c = 0; c < C; ++c) {
                            const int64_t base = (static_cast<int64_t>(n) * C + c) * HW;
                            T s = 0;
                            for (int i = 0; i < HW; ++i) s += go[static_cast<size_t>(base + i)];
                            gb[static_cast<size_t>(n) * C + c] += s;
                        }
                }
            });
        return id;
    }

    // x[R,C] + v[C]  (linear bias, attention key mask)
    NodeId add_rowvec(NodeId x, NodeId v) {
        require_ndim("add_rowvec", x, 2);
        const int R = shape(x)[0], C = shape(x)[1];
        if (shape(v) != std::vector<int>{C})
            throw ShapeError("add_rowvec: vec " + shape_str(shape(v)) + " vs x " +
                             shape_str(shape(x)));
        Tensor<T> out({R, C});
        const T* px = val(x).ptr();
        const T* pv = val(v).ptr();
        for (int r = 0; r < R; ++r)
            for (int c = 0; c < C; ++c)
                out.data[static_cast<size_t>(r) * C + c] = px[static_cast<int64_t>(r) * C + c] + pv[c];
        NodeId id = push(std::move(out), requires_grad(x) || requires_grad(v));
        if (requires_grad(id))
            set_back(id, [x, v, id, R, C](Graph& g) {
                const auto& go = g.grad(id);
                if (g.requires_grad(x)) {
                    auto& gx = g.grad(x);
                    for (size_t i = 0; i < gx.size(); ++i) gx[i] += go[i];
                }
                if (g.requires_grad(v)) {
                    auto& gv = g.grad(v);
                    for (int r = 0; r < R; ++r)
                        for (int c = 0; c < C; ++c)
                            gv[static_cast<size_t>(c)] += go[static_cast<size_t>(r) * C + c];
                }
            });
        return id;
    }

    // x[N*L,d] + p[L,d]  (positional embeddings tiled over the batch)
    NodeId add_tiled_rows(NodeId x, NodeId p) {
        require_ndim("add_tiled_rows", x, 2);
        require_ndim("add_tiled_rows", p, 2);
        const int R = shape(x)[0], C = shape(x)[1];
        const int L = shape(p)[0];
        if (shape(p)[1] != C || R % L != 0)
            throw ShapeError("add_tiled_rows: x " + shape_str(shape(x)) + " vs p " +
                             shape_str(shape(p)));
        Tensor<T> out({R, C});
        const T* px = val(x).ptr();
        const T* pp = val(p).ptr();
        for (int r = 0; r < R; ++r) {
            const T* pr = pp + static_cast<int64_t>(r % L) * C;
            for (int c = 0; c < C; ++c)
                out.data[static_cast<size_t>(r) * C + c] = px[static_cast<int64_t>(r) * C + c] + pr[c];
        }
        NodeId id = push(std::move(out), requires_grad(x) || requires_grad(p));
        if (requires_grad(id))
            set_back(id, [x, p, id, R, C, L](Graph& g) {
                const auto& go = g.grad(id);
                if (g.requires_grad(x)) {
                    auto& gx = g.grad(x);
                    for (size_t i = 0; i < gx.size(); ++i) gx[i] += go[i];
                }
                if (g.requires_grad(p)) {
                    auto& gp = g.grad(p);
                    for (int r = 0; r < R; ++r)
                        for (int c = 0; c < C; ++c)
                            gp[static_cast<size_t>(r % L) * C + c] += go[static_cast<size_t>(r) * C + c];
                }
            });
        return id;
    }

    // ------------------------------------------------------------------
    // layout
    // ------------------------------------------------------------------

    NodeId reshape(NodeId x, std::vector<int> new_shape) {
        if (Tensor<T>::numel_of(new_shape) != val(x).numel())
            throw ShapeError("reshape: cannot view " + shape_str(shape(x)) + " as " +
                             shape_str(new_shape));
        Tensor<T> out(new_shape, val(x).data);
        NodeId id = push(std::move(out), requires_grad(x));
        if (requires_grad(id))
            set_back(id, [x, id](Graph& g) {
                const auto& go = g.grad(id);
                auto& gx = g.grad(x);
                for (size_t i = 0; i < gx.size(); ++i) gx[i] += go[i];
            });
        return id;
    }

    NodeId concat_channels(NodeId a, NodeId b) {
        require_ndim("concat_channels", a, 4);
        require_ndim("concat_channels", b, 4);
        const auto& as = shape(a);
        const auto& bs = shape(b);
        if (as[0] != bs[0] || as[2] != bs[2] || as[3] != bs[3])
            throw ShapeError("concat_channels: " + shape_str(as) + " vs " + shape_str(bs));
        const int N = as[0], Ca = as[1], Cb = bs[1], HW = as[2] * as[3];
        Tensor<T> out({N, Ca + Cb, as[2], as[3]});
        const T* pa = val(a).ptr();
        const T* pb = val(b).ptr();
        for (int n = 0; n < N; ++n) {
            std::copy(pa + static_cast<int64_t>(n) * Ca * HW, pa + static_cast<int64_t>(n + 1) * Ca * HW,
                      out.ptr() + static_cast<int64_t>(n) * (Ca + Cb) * HW);
            std::copy(pb + static_cast<int64_t>(n) * Cb * HW, pb + static_cast<int64_t>(n + 1) * Cb * HW,
                      out.ptr() + static_cast<int64_t>(n) * (Ca + Cb) * HW + static_cast<int64_t>(Ca) * HW);
        }
        NodeId id = push(std::move(out), requires_grad(a) || requires_grad(b));
        if (requires_grad(id))
            set_back(id, [a, b, id, N, Ca, Cb, HW](Graph& g) {
                const auto& go = g.grad(id);
                if (g.requires_grad(a)) {
                    auto& ga = g.grad(a);
                    for (int n = 0; n < N; ++n)
                        for (int64_t i = 0; i < static_cast<int64_t>(Ca) * HW; ++i)
                            ga[static_cast<size_t>(static_cast<int64_t>(n) * Ca * HW + i)] +=
                                go[static_cast<size_t>(static_cast<int64_t>(n) * (Ca + Cb) * HW + i)];
                }
                if (g.requires_grad(b)) {
                    auto& gb = g.grad(b);
                    for (int n = 0; n < N; ++n)
                        for (int64_t i = 0; i < static_cast<int64_t>(Cb) * HW; ++i)
                            gb[static_cast<size_t>(static_cast<int64_t>(n) * Cb * HW + i)] +=
                                go[static_cast<size_t>(static_cast<int64_t>(n) * (Ca + Cb) * HW +
                                                       static_cast<int64_t>(Ca) * HW + i)];
                }
            });
        return id;
    }

    NodeId slice_rows(NodeId x, int r0, int len) {
        require_ndim("slice_rows", x, 2);
        const int R = shape(x)[0], C = shape(x)[1];
        if (r0 < 0 || len <= 0 || r0 + len > R)
            throw ShapeError("slice_rows: [" + std::to_string(r0) + "," + std::to_string(r0 + len) +
                             ") out of " + shape_str(shape(x)));
        Tensor<T> out({len, C});
        const T* px = val(x).ptr();
        std::copy(px + static_cast<int64_t>(r0) * C, px + static_cast<int64_t>(r0 + len) * C, out.ptr());
        NodeId id = push(std::move(out), requires_grad(x));
        if (requires_grad(id))
            set_back(id, [x, id, r0, len, C](Graph& g) {
                const auto& go = g.grad(id);
                auto& gx = g.grad(x);
                for (int64_t i = 0; i < static_cast<int64_t>(len) * C; ++i)
                    gx[static_cast<size_t>(static_cast<int64_t>(r0) * C + i)] += go[static_cast<size_t>(i)];
            });
        return id;
    }

    NodeId slice_cols(NodeId x, int c0, int len) {
        require_ndim("slice_cols", x, 2);
        const int R = shape(x)[0], C = shape(x)[1];
        if (c0 < 0 || len <= 0 || c0 + len > C)
            throw ShapeError("slice_cols: [" + std::to_string(c0) + "," + std::to_string(c0 + len) +
                             ") out of " + shape_str(shape(x)));
        Tensor<T> out({R, len});
        const T* px = val(x).ptr();
        for (int r = 0; r < R; ++r)
            std::copy(px + static_cast<int64_t>(r) * C + c0, px + static_cast<int64_t>(r) * C + c0 + len,
                      out.ptr() + static_cast<int64_t>(r) * len);
        NodeId id = push(std::move(out), requires_grad(x));
        if (requires_grad(id))
            set_back(id, [x, id, c0, len, R, C](Graph& g) {
                const auto& go = g.grad(id);
                auto& gx = g.grad(x);
                for (int r = 0; r < R; ++r)
                    for (int c = 0; c < len; ++c)
                        gx[static_cast<size_t>(r) * C + c0 + c] += go[static_cast<size_t>(r) * len + c];
            });
        return id;
    }

    NodeId concat_rows(const std::vector<NodeId>& parts) {
        if (parts.empty()) throw ShapeError("concat_rows: no inputs");
        const int C = shape(parts[0])[1];
        int R = 0;
        bool rg = false;
        for (NodeId p : parts) {
            require_ndim("concat_rows", p, 2);
            if (shape(p)[1] != C) throw ShapeError("concat_rows: column mismatch");
            R += shape(p)[0];
            rg = rg || requires_grad(p);
        }
        Tensor<T> out({R, C});
        int64_t off = 0;
        for (NodeId p : parts) {
            const auto& v = val(p).data;
            std::copy(v.begin(), v.end(), out.data.begin() + off);
            off += static_cast<int64_t>(v.size());
        }
        NodeId id = push(std::move(out), rg);
        if (requires_grad(id)) {
            auto ps = parts;
            set_back(id, [ps, id](Graph& g) {
                const auto& go = g.grad(id);
                int64_t off2 = 0;
                for (NodeId p : ps) {
                    const int64_t n = g.val(p).numel();
                    if (g.requires_grad(p)) {
                        auto& gp = g.grad(p);
                        for (int64_t i = 0; i < n; ++i)
                            gp[static_cast<size_t>(i)] += go[static_cast<size_t>(off2 + i)];
                    }
                    off2 += n;
                }
            });
        }
        return id;
    }

    NodeId concat_cols(const std::vector<NodeId>& parts) {
        if (parts.empty()) throw ShapeError("concat_cols: no inputs");
        const int R = shape(parts[0])[0];
        int C = 0;
        bool rg = false;
        for (NodeId p : parts) {
            require_ndim("concat_cols", p, 2);
            if (shape(p)[0] != R) throw ShapeError("concat_cols: row mismatch");
            C += shape(p)[1];
            rg = rg || requires_grad(p);
        }
        Tensor<T> out({R, C});
        int c_off = 0;
        for (NodeId p : parts) {
            const int pc = shape(p)[1];
            const T* pv = val(p).ptr();
            for (int r = 0; r < R; ++r)
                std::copy(pv + static_cast<int64_t>(r) * pc, pv + static_cast<int64_t>(r + 1) * pc,
                          out.ptr() + static_cast<int64_t>(r) * C + c_off);
            c_off += pc;
        }
        NodeId id = push(std::move(out), rg);
        if (requires_grad(id)) {
            auto ps = parts;
            set_back(id, [ps, id, R, C](Graph& g) {
                const auto& go = g.grad(id);
                int c_off2 = 0;
                for (NodeId p : ps) {
                    const int pc = g.shape(p)[1];
                    if (g.requires_grad(p)) {
                        auto& gp = g.grad(p);
                        for (int r = 0; r < R; ++r)
                            for (int c = 0; c < pc; ++c)
                                gp[static_cast<size_t>(r) * pc + c] +=
                                    go[static_cast<size_t>(r) * C + c_off2 + c];
                    }
                    c_off2 += pc;
                }
            });
        }
        return id;
    }

    // ------------------------------------------------------------------
    // embedding lookup and token/image layout changes
    // ------------------------------------------------------------------

    // table[V,d] gathered by ids -> [ids.size(), d]
    NodeId gather_rows(NodeId table, const std::vector<int>& ids) {
        require_ndim("gather_rows", table, 2);
        const int V = shape(table)[0], d = shape(table)[1];
        for (int i : ids)
            if (i < 0 || i >= V)
                throw ShapeError("gather_rows: id " + std::to_string(i) + " out of table " +
                                 shape_str(shape(table)));
        Tensor<T> out({static_cast<int>(ids.size()), d});
        const T* pt = val(table).ptr();
        for (size_t i = 0; i < ids.size(); ++i)
            std::copy(pt + static_cast<int64_t>(ids[i]) * d, pt + static_cast<int64_t>(ids[i] + 1) * d,
                      out.ptr() + static_cast<int64_t>(i) * d);
        NodeId id = push(std::move(out), requires_grad(table));
        if (requires_grad(id)) {
            auto ids_copy = ids;
            set_back(id, [table, id, ids_copy, d](Graph& g) {
                const auto& go = g.grad(id);
                auto& gt = g.grad(table);
                for (size_t i = 0; i < ids_copy.size(); ++i)
                    for (int c = 0; c < d; ++c)
                        gt[static_cast<size_t>(ids_copy[i]) * d + c] +=
                            go[static_cast<size_t>(i) * d + c];
            });
        }
        return id;
    }

    // [N,C,H,W] -> [N*H*W, C] token matrix
    NodeId chw_to_tokens(NodeId x) {
        require_ndim("chw_to_tokens", x, 4);
        const auto& xs = shape(x);
        const int N = xs[0], C = xs[1], HW = xs[2] * xs[3];
        Tensor<T> out({N * HW, C});
        const T* px = val(x).ptr();
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                const T* src = px + (static_cast<int64_t>(n) * C + c) * HW;
                for (int i = 0; i < HW; ++i)
                    out.data[static_cast<size_t>(static_cast<int64_t>(n) * HW + i) * C + c] = src[i];
            }
        NodeId id = push(std::move(out), requires_grad(x));
        if (requires_grad(id))
            set_back(id, [x, id, N, C, HW](Graph& g) {
                const auto& go = g.grad(id);
                auto& gx = g.grad(x);
                for (int n = 0; n < N; ++n)
                    for (int c = 0; c < C; ++c) {
                        T* dst = gx.data() + (static_cast<int64_t>(n) * C + c) * HW;
                        for (int i = 0; i < HW; ++i)
                            dst[i] += go[static_cast<size_t>(static_cast<int64_t>(n) * HW + i) * C + c];
                    }
            });
        return id;
    }

    // [N*H*W, C] -> [N,C,H,W]
    NodeId tokens_to_chw(NodeId x, int N, int C, int H, int W) {
        require_ndim("tokens_to_chw", x, 2);
        if (shape(x)[0] != N * H * W || shape(x)[1] != C)
            throw ShapeError("tokens_to_chw: " + shape_str(shape(x)) + " vs N=" + std::to_string(N) +
                             " C=" + std::to_string(C));
        const int HW = H * W;
        Tensor<T> out({N, C, H, W});
        const T* px = val(x).ptr();
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                T* dst = out.ptr() + (static_cast<int64_t>(n) * C + c) * HW;
                for (int i = 0; i < HW; ++i)
                    dst[i] = px[static_cast<size_t>(static_cast<int64_t>(n) * HW + i) * C + c];
            }
        NodeId id = push(std::move(out), requires_grad(x));
        if (requires_grad(id))
            set_back(id, [x, id, N, C, HW](Graph& g) {
                const auto& go = g.grad(id);
                auto& gx = g.grad(x);
                for (int n = 0; n < N; ++n)
                    for (int c = 0; c < C; ++c) {
                        const T* src = go.data() + (static_cast<int64_t>(n) * C + c) * HW;
                        for (int i = 0; i < HW; ++i)
                            gx[static_cast<size_t>(static_cast<int64_t>(n) * HW + i) * C + c] += src[i];
                    }
            });
        return id;
    }

   private:
    struct Node {
        Tensor<T> value;
        Tensor<T>* external = nullptr;
        std::vector<T> grad;
        bool requires_grad = false;
        std::function<void(Graph&)> back;
    };

    static T sigmoid(T x) { return T(1) / (T(1) + std::exp(-x)); }
    static T norm_cdf(T x) {
        return static_cast<T>(0.5 * (1.0 + std::erf(static_cast<double>(x) / 1.4142135623730951)));
    }
    static T norm_pdf(T x) {
        return static_cast<T>(std::exp(-0.5 * static_cast<double>(x) * x) / 2.5066282746310002);
    }

    NodeId push(Tensor<T> value, bool rg) {
        Node n;
        n.value = std::move(value);
        n.requires_grad = grad_enabled_ && rg;
        nodes_.push_back(std::move(n));
        return static_cast<NodeId>(nodes_.size() - 1);
    }

    void set_back(NodeId id, std::function<void(Graph&)> fn) {
        nodes_[static_cast<size_t>(id)].back = std::move(fn);
    }

    void check_same(const char* op, NodeId a, NodeId b) const {
        if (shape(a) != shape(b))
            throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(shape(a)) + " vs " +
                             shape_str(shape(b)));
    }
    void require_ndim(const char* op, NodeId x, int nd) const {
        if (val(x).ndim() != nd)
            throw ShapeError(std::string(op) + ": expected " + std::to_string(nd) +
                             "-d tensor, got " + shape_str(shape(x)));
    }

    NodeId binary_same(const char* op, NodeId a, NodeId b, bool is_sub) {
        check_same(op, a, b);
        Tensor<T> out(shape(a));
        const auto& va = val(a).data;
        const auto& vb = val(b).data;
        if (is_sub)
            for (size_t i = 0; i < va.size(); ++i) out.data[i] = va[i] - vb[i];
        else
            for (size_t i = 0; i < va.size(); ++i) out.data[i] = va[i] + vb[i];
        NodeId id = push(std::move(out), requires_grad(a) || requires_grad(b));
        if (requires_grad(id))
            set_back(id, [a, b, id, is_sub](Graph& g) {
                const auto& go = g.grad(id);
                if (g.requires_grad(a)) {
                    auto& ga = g.grad(a);
                    for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
                }
                if (g.requires_grad(b)) {
                    auto& gb = g.grad(b);
                    if (is_sub)
                        for (size_t i = 0; i < go.size(); ++i) gb[i] -= go[i];
                    else
                        for (size_t i = 0; i < go.size(); ++i) gb[i] += go[i];
                }
            });
        return id;
    }

    std::vector<Node> nodes_;
    bool grad_enabled_;
    bool backward_done_ = false;
};

}  // namespace lab
