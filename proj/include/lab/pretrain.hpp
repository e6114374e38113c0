#pragma once

#include "lab/evalbench.hpp"
#include "lab/model.hpp"

namespace lab {

struct PretrainConfig {
    int steps = 20000;
    int batch_size = 8;
    double lr = 1e-3;
    uint64_t seed = 0;
    int log_every = 500;  // 0: silent
};

// Trains a fresh base model on the generic corpus split with the standard
// objective; batch examples are drawn uniformly per step. 0 steps returns the
// initialization unchanged.
Checkpoint pretrain(const Corpus& corpus, const ModelConfig& model, const PretrainConfig& cfg,
                    std::vector<float>* loss_trace);

}  // namespace lab
