#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "lab/params.hpp"

namespace lab {

enum class OptimizerKind { Sgd, Adam };

// SGD / Adam over the trainable parameters of a store. Moment buffers exist
// only for trainable parameters and are allocated lazily at first step.
// Rows excluded by a parameter's row_mask are skipped outright, so frozen
// rows stay bit-identical and their moments stay zero.
template <typename T>
class Optimizer {
   public:
    Optimizer(OptimizerKind kind, double lr, double beta1 = 0.9, double beta2 = 0.999,
              double eps = 1e-8)
        : kind_(kind), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(ParameterStore<T>& ps) {
        ++step_count_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_count_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_count_));
        for (auto& [name, p] : ps) {
            if (!p.trainable) continue;
            if (p.tensor.grad.size() != p.tensor.data.size())
                throw Error("optimizer_step: missing gradient for trainable parameter " + name);
            const int64_t n = p.tensor.numel();
            const int rows = p.row_mask.empty() ? 1 : p.tensor.shape.at(0);
            const int64_t row_len = n / rows;
            if (!p.row_mask.empty() && static_cast<int>(p.row_mask.size()) != rows)
                throw Error("optimizer_step: row_mask size mismatch on " + name);
            T* x = p.tensor.data.data();
            const T* g = p.tensor.grad.data();
            if (kind_ == OptimizerKind::Sgd) {
                const T lr = static_cast<T>(lr_);
                for (int r = 0; r < rows; ++r) {
                    if (!p.row_mask.empty() && !p.row_mask[static_cast<size_t>(r)]) continue;
                    for (int64_t i = r * row_len; i < (r + 1) * row_len; ++i) x[i] -= lr * g[i];
                }
            } else {
                auto& mom = moments_[name];
                if (mom.m.size() != static_cast<size_t>(n)) {
                    mom.m.assign(static_cast<size_t>(n), T(0));
                    mom.v.assign(static_cast<size_t>(n), T(0));
                }
                const T b1 = static_cast<T>(beta1_), b2 = static_cast<T>(beta2_);
                for (int r = 0; r < rows; ++r) {
                    if (!p.row_mask.empty() && !p.row_mask[static_cast<size_t>(r)]) continue;
                    for (int64_t i = r * row_len; i < (r + 1) * row_len; ++i) {
                        mom.m[static_cast<size_t>(i)] =
                            b1 * mom.m[static_cast<size_t>(i)] + (T(1) - b1) * g[i];
                        mom.v[static_cast<size_t>(i)] =
                            b2 * mom.v[static_cast<size_t>(i)] + (T(1) - b2) * g[i] * g[i];
                        const double mhat = mom.m[static_cast<size_t>(i)] / bc1;
                        const double vhat = mom.v[static_cast<size_t>(i)] / bc2;
                        x[i] -= static_cast<T>(lr_ * mhat / (std::sqrt(vhat) + eps_));
                    }
                }
            }
        }
    }

    void zero_grad(ParameterStore<T>& ps) { ps.clear_grads(); }

    int64_t step_count() const { return step_count_; }
    double learning_rate() const { return lr_; }
    OptimizerKind kind() const { return kind_; }

   private:
    struct Moments {
        std::vector<T> m, v;
    };

    OptimizerKind kind_;
    double lr_, beta1_, beta2_, eps_;
    int64_t step_count_ = 0;
    std::map<std::string, Moments> moments_;
};

}  // namespace lab
