#include "lab/personalize.hpp"

#include <chrono>

#include "lab/checkpoint.hpp"

namespace lab {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

// One optimization phase over a fixed prompt and image set. Batches cycle
// through the images in fixed order; noise and timestep draws supply the
// stochasticity. Emits checkpoints at multiples of `checkpoint_every` and at
// the phase boundary.
struct PhaseSpec {
    std::string name;
    int steps = 0;
    int checkpoint_every = 0;  // 0: boundary only
    int batch_size = 1;
    std::string prompt;
    const std::vector<Tensor<float>>* images = nullptr;
    // prior term (dreambooth only)
    double lambda = 0.0;
    std::string prior_prompt;
    const std::vector<Tensor<float>>* priors = nullptr;
};

PhaseClock run_phase(Checkpoint& work, const PhaseSpec& spec, Optimizer<float>& opt, Rng& rng,
                     std::vector<float>& trace, const CheckpointSink& sink, TrainRun& run) {
    const auto t0 = Clock::now();
    NoiseSchedule sched = work.config.make_schedule();
    IdentityCodec codec;
    UNetDenoiser<float> den{&work.params, &work.config.unet};
    Rng draw = rng.child("draws." + spec.name);

    TokenSequence seq = tokenize(work.vocab, spec.prompt, work.config.text.max_len);
    TokenSequence prior_seq;
    if (spec.lambda > 0.0 && spec.priors != nullptr)
        prior_seq = tokenize(work.vocab, spec.prior_prompt, work.config.text.max_len);

    auto emit = [&](int step_label) {
        EmittedCheckpoint ec{step_label, spec.name};
        work.step = step_label;
        run.checkpoints.push_back(ec);
        if (sink) sink(work, ec);
    };

    size_t img_cursor = 0;
    size_t prior_cursor = 0;
    for (int step = 1; step <= spec.steps; ++step) {
        std::vector<Tensor<float>> xs;
        for (int b = 0; b < spec.batch_size; ++b) {
            xs.push_back((*spec.images)[img_cursor % spec.images->size()]);
            ++img_cursor;
        }
        work.params.clear_grads();
        Graph<float> g;
        std::vector<TokenSequence> seqs(xs.size(), seq);
        auto enc = encode_text(g, work.params, work.config.text, seqs);
        NodeId loss;
        if (spec.lambda > 0.0 && spec.priors != nullptr) {
            std::vector<Tensor<float>> prior_xs;
            for (size_t b = 0; b < xs.size(); ++b) {
                prior_xs.push_back((*spec.priors)[prior_cursor % spec.priors->size()]);
                ++prior_cursor;
            }
            std::vector<TokenSequence> pseqs(prior_xs.size(), prior_seq);
            auto penc = encode_text(g, work.params, work.config.text, pseqs);
            loss = prior_preservation_loss(g, sched, den, codec, xs, enc.cond, enc.key_masks,
                                           prior_xs, penc.cond, penc.key_masks, spec.lambda, draw);
        } else {
            loss = ldm_loss(g, sched, den, codec, xs, enc.cond, enc.key_masks, draw);
        }
        trace.push_back(g.val(loss).data[0]);
        g.backward(loss);
        opt.step(work.params);
        if (spec.checkpoint_every > 0 && step % spec.checkpoint_every == 0) emit(step);
    }
    if (spec.checkpoint_every <= 0 || spec.steps % spec.checkpoint_every != 0 || spec.steps == 0)
        emit(spec.steps);

    PhaseClock clock;
    clock.name = spec.name;
    clock.steps = spec.steps;
    clock.seconds = seconds_since(t0);
    return clock;
}

void freeze_all(Checkpoint& c) { c.params.set_all_trainable(false); }

void unfreeze_embedding_row(Checkpoint& c, int row) {
    auto& emb = c.params.at(kEmbeddingParam);
    emb.set_trainable(true);
    emb.row_mask.assign(static_cast<size_t>(emb.tensor.shape[0]), 0);
    emb.row_mask[static_cast<size_t>(row)] = 1;
}

}  // namespace

TrainRun train_textual_inversion(const Checkpoint& base, const TargetSet& targets,
                                 const StrategyConfig& cfg, const CheckpointSink& sink) {
    cfg.validate();
    if (!base.vocab.has(targets.class_noun))
        throw VocabError("textual inversion: class noun \"" + targets.class_noun +
                         "\" not in vocabulary");
    Checkpoint work = base;
    work.strategy = "textual_inversion";
    work.parent_hash = checkpoint_content_hash(base);
    const int new_row =
        add_token(work.vocab, work.params.at(kEmbeddingParam), kTiToken, targets.class_noun);
    freeze_all(work);
    unfreeze_embedding_row(work, new_row);

    TrainRun run;
    run.strategy = work.strategy;
    Optimizer<float> opt(OptimizerKind::Adam, cfg.ti_lr);
    Rng rng(cfg.seed);

    PhaseSpec phase;
    phase.name = "train";
    phase.steps = cfg.ti_steps;
    phase.checkpoint_every = cfg.checkpoint_every;
    phase.batch_size = cfg.batch_size;
    phase.prompt = "a photo of " + std::string(kTiToken);
    phase.images = &targets.images;
    run.phases.push_back(run_phase(work, phase, opt, rng, run.loss_trace, sink, run));
    return run;
}

std::pair<std::vector<Tensor<float>>, std::string> generate_prior_images(
    const Checkpoint& base, const std::string& class_noun, int count, SamplerKind sampler,
    int sampler_steps, uint64_t seed, double* seconds) {
    const auto t0 = Clock::now();
    const std::string prompt = "a photo of " + class_noun;
    std::vector<Tensor<float>> images;
    if (count > 0) images = generate_images(base, prompt, count, sampler, sampler_steps, seed);
    if (seconds) *seconds = seconds_since(t0);
    return {std::move(images), prompt};
}

TrainRun train_dreambooth(const Checkpoint& base, const TargetSet& targets,
                          const std::vector<Tensor<float>>& priors, const StrategyConfig& cfg,
                          const CheckpointSink& sink) {
    cfg.validate();
    if (!base.vocab.has(kSksToken))
        throw VocabError("dreambooth: identifier \"" + kSksToken + "\" not in vocabulary");
    if (cfg.lambda > 0 && priors.empty())
        throw Error("dreambooth: prior image set empty with lambda > 0");
    Checkpoint work = base;
    work.strategy = "dreambooth";
    work.parent_hash = checkpoint_content_hash(base);
    freeze_all(work);
    work.params.set_trainable_prefix("unet.", true);

    TrainRun run;
    run.strategy = work.strategy;
    Optimizer<float> opt(OptimizerKind::Adam, cfg.effective_db_lr());
    Rng rng(cfg.seed);

    PhaseSpec phase;
    phase.name = "train";
    phase.steps = cfg.db_steps;
    phase.checkpoint_every = cfg.checkpoint_every;
    phase.batch_size = cfg.batch_size;
    phase.prompt = "a photo of " + std::string(kSksToken) + " " + targets.class_noun;
    phase.images = &targets.images;
    phase.lambda = cfg.lambda;
    phase.prior_prompt = "a photo of " + targets.class_noun;
    phase.priors = &priors;
    run.phases.push_back(run_phase(work, phase, opt, rng, run.loss_trace, sink, run));
    return run;
}

TrainRun train_two_stage(const Checkpoint& base, const TargetSet& targets,
                         const StrategyConfig& cfg, const CheckpointSink& sink) {
    cfg.validate();
    if (!base.vocab.has("rare"))
        throw VocabError("two_stage: init word \"rare\" not in vocabulary");
    Checkpoint work = base;
    work.strategy = "two_stage";
    work.parent_hash = checkpoint_content_hash(base);
    const int rare_row = add_token(work.vocab, work.params.at(kEmbeddingParam), kRareToken, "rare");

    TrainRun run;
    run.strategy = work.strategy;
    Rng rng(cfg.seed);
    const std::string prompt = "a photo of " + kRareToken + " " + targets.class_noun;

    // stage 1: the new embedding row only
    freeze_all(work);
    unfreeze_embedding_row(work, rare_row);
    {
        Optimizer<float> opt(OptimizerKind::Adam, cfg.stage1_lr);
        PhaseSpec phase;
        phase.name = "stage1";
        phase.steps = cfg.stage1_steps;
        phase.checkpoint_every = 0;  // boundary only
        phase.batch_size = cfg.batch_size;
        phase.prompt = prompt;
        phase.images = &targets.images;
        run.phases.push_back(run_phase(work, phase, opt, rng, run.loss_trace, sink, run));
    }
    // stage 2: denoiser only; v_rare and the whole text encoder frozen
    freeze_all(work);
    work.params.set_trainable_prefix("unet.", true);
    {
        Optimizer<float> opt(OptimizerKind::Adam, cfg.effective_stage2_lr());
        PhaseSpec phase;
        phase.name = "stage2";
        phase.steps = cfg.stage2_steps;
        phase.checkpoint_every = cfg.checkpoint_every;
        phase.batch_size = cfg.batch_size;
        phase.prompt = prompt;
        phase.images = &targets.images;
        run.phases.push_back(run_phase(work, phase, opt, rng, run.loss_trace, sink, run));
    }
    return run;
}

}  // namespace lab
