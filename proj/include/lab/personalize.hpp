#pragma once

#include <functional>
#include <string>
#include <vector>

#include "lab/evalbench.hpp"
#include "lab/model.hpp"
#include "lab/optim.hpp"

namespace lab {

// Per-strategy training knobs. stage*_ fields drive the two-stage method,
// ti_* textual inversion, db_* Dreambooth. The paper-faithful learning rates
// are the defaults; the "desk" preset swaps the fine-tuning rates (stage 2
// and Dreambooth, identically) for one suited to a model this small.
struct StrategyConfig {
    std::string strategy = "two_stage";  // textual_inversion | dreambooth | two_stage
    int stage1_steps = 100;
    double stage1_lr = 5e-4;
    int stage2_steps = 800;
    double stage2_lr = 5e-6;
    int checkpoint_every = 200;
    int ti_steps = 3000;
    double ti_lr = 5e-3;
    int db_steps = 1000;
    double db_lr = 5e-6;
    int prior_image_count = 200;
    double lambda = 1.0;
    int batch_size = 4;
    uint64_t seed = 0;
    std::string lr_preset = "paper";  // paper | desk
    std::string prior_sampler = "ddim";
    int prior_sampler_steps = 20;

    static constexpr double kDeskFinetuneLr = 1e-4;

    double effective_stage2_lr() const { return lr_preset == "desk" ? kDeskFinetuneLr : stage2_lr; }
    double effective_db_lr() const { return lr_preset == "desk" ? kDeskFinetuneLr : db_lr; }

    void validate() const {
        if (strategy != "textual_inversion" && strategy != "dreambooth" && strategy != "two_stage")
            throw ConfigError("unknown strategy: " + strategy);
        if (stage1_steps <= 0 || stage2_steps <= 0 || db_steps <= 0)
            throw ConfigError("strategy: step counts must be positive");
        if (ti_steps < 0 || prior_image_count < 0) throw ConfigError("strategy: negative count");
        if (checkpoint_every <= 0 || stage2_steps % checkpoint_every != 0)
            throw ConfigError("strategy: checkpoint_every must divide stage2_steps");
        if (lambda < 0) throw ConfigError("strategy: lambda must be >= 0");
        if (batch_size <= 0) throw ConfigError("strategy: batch_size must be positive");
        if (lr_preset != "paper" && lr_preset != "desk")
            throw ConfigError("strategy: lr_preset must be paper or desk");
    }
};

struct PhaseClock {
    std::string name;
    int steps = 0;
    double seconds = 0.0;
};

struct EmittedCheckpoint {
    int step = 0;        // step label within its phase
    std::string phase;   // "stage1", "stage2", "train"
};

struct TrainRun {
    std::string strategy;
    std::vector<EmittedCheckpoint> checkpoints;
    std::vector<float> loss_trace;
    std::vector<PhaseClock> phases;

    double total_seconds() const {
        double s = 0;
        for (const auto& p : phases) s += p.seconds;
        return s;
    }
};

// Receives an immutable snapshot at every emission point.
using CheckpointSink = std::function<void(const Checkpoint&, const EmittedCheckpoint&)>;

// Adds the noun pseudo-token (initialized from the class noun's embedding)
// and optimizes exactly that one embedding row against the base objective
// with the prompt "a photo of s*".
TrainRun train_textual_inversion(const Checkpoint& base, const TargetSet& targets,
                                 const StrategyConfig& cfg, const CheckpointSink& sink);

// Samples `count` class images from the base model for the prior term.
// Returns the images and the prior prompt; wall-clock lands in *seconds.
std::pair<std::vector<Tensor<float>>, std::string> generate_prior_images(
    const Checkpoint& base, const std::string& class_noun, int count, SamplerKind sampler,
    int sampler_steps, uint64_t seed, double* seconds);

// Fine-tunes all unet.* parameters against the augmented objective with the
// reused "sks" identifier. The vocabulary and text encoder stay untouched.
TrainRun train_dreambooth(const Checkpoint& base, const TargetSet& targets,
                          const std::vector<Tensor<float>>& priors, const StrategyConfig& cfg,
                          const CheckpointSink& sink);

// Stage 1 optimizes only the freshly added ⟨rare⟩ embedding row; stage 2
// freezes all text parameters and fine-tunes unet.*. No prior term anywhere.
TrainRun train_two_stage(const Checkpoint& base, const TargetSet& targets,
                         const StrategyConfig& cfg, const CheckpointSink& sink);

}  // namespace lab
