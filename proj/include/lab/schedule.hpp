#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "lab/common.hpp"

namespace lab {

enum class ScheduleKind { Linear };

// Forward-process variance tables, indexed by timestep 1..T. Index 0 holds
// the conventional boundary values beta_0 = 0, alpha_bar_0 = 1.
struct NoiseSchedule {
    int T = 0;
    std::vector<double> beta;       // beta_t
    std::vector<double> alpha;      // 1 - beta_t
    std::vector<double> alpha_bar;  // prod alpha_1..alpha_t
    std::vector<double> sigma;      // sqrt(1 - alpha_bar_t)
    std::vector<double> scale;      // sqrt(alpha_bar_t)

    static NoiseSchedule make(ScheduleKind kind, int T, double beta_min, double beta_max) {
        if (kind != ScheduleKind::Linear) throw ConfigError("make_schedule: unknown kind");
        if (T < 2) throw ConfigError("make_schedule: T must be >= 2");
        if (beta_min < 0.0 || beta_min > beta_max || beta_max >= 1.0)
            throw ConfigError("make_schedule: need 0 <= beta_min <= beta_max < 1");
        NoiseSchedule s;
        s.T = T;
        s.beta.assign(static_cast<size_t>(T) + 1, 0.0);
        s.alpha.assign(static_cast<size_t>(T) + 1, 1.0);
        s.alpha_bar.assign(static_cast<size_t>(T) + 1, 1.0);
        s.sigma.assign(static_cast<size_t>(T) + 1, 0.0);
        s.scale.assign(static_cast<size_t>(T) + 1, 1.0);
        for (int t = 1; t <= T; ++t) {
            s.beta[static_cast<size_t>(t)] =
                beta_min + (beta_max - beta_min) * static_cast<double>(t - 1) / (T - 1);
            s.alpha[static_cast<size_t>(t)] = 1.0 - s.beta[static_cast<size_t>(t)];
            s.alpha_bar[static_cast<size_t>(t)] =
                s.alpha_bar[static_cast<size_t>(t - 1)] * s.alpha[static_cast<size_t>(t)];
            s.sigma[static_cast<size_t>(t)] = std::sqrt(1.0 - s.alpha_bar[static_cast<size_t>(t)]);
            s.scale[static_cast<size_t>(t)] = std::sqrt(s.alpha_bar[static_cast<size_t>(t)]);
        }
        return s;
    }

    void check_t(int t) const {
        if (t < 1 || t > T)
            throw Error("timestep " + std::to_string(t) + " outside [1," + std::to_string(T) + "]");
    }
};

inline ScheduleKind schedule_kind_from(const std::string& s) {
    if (s == "linear") return ScheduleKind::Linear;
    throw ConfigError("unknown schedule kind: " + s);
}

}  // namespace lab
