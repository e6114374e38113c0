#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "lab/graph.hpp"
#include "lab/params.hpp"
#include "lab/rng.hpp"

namespace lab {

struct GradCheckOptions {
    double step = 1e-5;
    // Coordinates sampled per parameter tensor; tensors at or under this size
    // are checked exhaustively.
    int coords_per_param = 8;
    uint64_t seed = 0x6fd5;
};

struct GradCheckEntry {
    std::string name;
    double max_rel_err = 0.0;
    int coords_checked = 0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> per_param;
    double max_rel_err = 0.0;

    const GradCheckEntry* find(const std::string& name) const {
        for (const auto& e : per_param)
            if (e.name == name) return &e;
        return nullptr;
    }
};

// |analytic - fd| relative to max(|analytic|, |fd|), floored so exact-zero
// gradients compare on an absolute scale.
inline double grad_rel_err(double analytic, double fd) {
    const double denom = std::max({1e-3, std::abs(analytic), std::abs(fd)});
    return std::abs(analytic - fd) / denom;
}

// Compares backpropagated gradients against central finite differences for
// every trainable parameter in the store (frozen parameters are excluded).
// `build` must deterministically rebuild the loss graph from the current
// parameter values: (Graph<double>&, ParameterStore<double>&) -> NodeId.
template <typename BuildLoss>
GradCheckReport gradient_check(ParameterStore<double>& ps, BuildLoss&& build,
                               GradCheckOptions opt = {}) {
    GradCheckReport report;
    ps.clear_grads();
    {
        Graph<double> g;
        NodeId loss = build(g, ps);
        g.backward(loss);
    }
    auto eval = [&]() -> double {
        Graph<double> g(false);
        NodeId loss = build(g, ps);
        return g.val(loss).data[0];
    };
    Rng pick(opt.seed);
    for (auto& [name, p] : ps) {
        if (!p.trainable) continue;
        if (p.tensor.grad.size() != p.tensor.data.size())
            throw Error("gradient_check: trainable parameter " + name + " received no gradient");
        const int64_t n = p.tensor.numel();
        std::vector<int64_t> coords;
        if (n <= opt.coords_per_param) {
            for (int64_t i = 0; i < n; ++i) coords.push_back(i);
        } else {
            Rng local = pick.child(fnv1a64(name));
            for (int i = 0; i < opt.coords_per_param; ++i)
                coords.push_back(local.uniform_int(0, static_cast<int>(n - 1)));
            std::sort(coords.begin(), coords.end());
            coords.erase(std::unique(coords.begin(), coords.end()), coords.end());
        }
        GradCheckEntry entry;
        entry.name = name;
        for (int64_t i : coords) {
            const double orig = p.tensor.data[static_cast<size_t>(i)];
            p.tensor.data[static_cast<size_t>(i)] = orig + opt.step;
            const double fp = eval();
            p.tensor.data[static_cast<size_t>(i)] = orig - opt.step;
            const double fm = eval();
            p.tensor.data[static_cast<size_t>(i)] = orig;
            const double fd = (fp - fm) / (2.0 * opt.step);
            const double an = p.tensor.grad[static_cast<size_t>(i)];
            entry.max_rel_err = std::max(entry.max_rel_err, grad_rel_err(an, fd));
            ++entry.coords_checked;
        }
        report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
        report.per_param.push_back(std::move(entry));
    }
    return report;
}

}  // namespace lab
