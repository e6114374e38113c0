#pragma once

#include <string>
#include <vector>

#include "lab/evalbench.hpp"
#include "lab/model.hpp"
#include "lab/personalize.hpp"
#include "lab/pretrain.hpp"

namespace lab {

// One experiment = one INI-style config file with sections [run], [corpus],
// [model], [schedule], [pretrain], [personalize], [evaluate]. Unknown keys
// are rejected; missing keys take the documented defaults; echo() renders the
// fully resolved document, which is what run manifests embed.
struct ExperimentConfig {
    uint64_t seed = 0;

    std::vector<std::string> classes = class_names();
    int instances_per_class = 1;
    std::vector<std::string> contexts = context_names();
    int train_per_class = 250;

    ModelConfig model;

    PretrainConfig pretrain;

    StrategyConfig strategy;

    std::string eval_sampler = "ddim";
    int eval_sampler_steps = 20;
    int drift_samples = 16;

    static ExperimentConfig defaults() { return ExperimentConfig{}; }
    static ExperimentConfig from_file(const std::string& path);
    static ExperimentConfig from_text(const std::string& text);

    std::string echo() const;
    std::string config_hash() const { return model.config_hash(); }

    EvalSettings eval_settings() const {
        return EvalSettings{sampler_kind_from(eval_sampler), eval_sampler_steps};
    }

    void validate() const;
};

}  // namespace lab
