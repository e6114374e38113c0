#pragma once

#include <string>
#include <vector>

#include "lab/denoiser.hpp"
#include "lab/diffusion.hpp"
#include "lab/schedule.hpp"
#include "lab/textpipe.hpp"

namespace lab {

// Architecture plus forward-process definition. Everything that has to agree
// between a checkpoint and the code that resumes or samples from it.
struct ModelConfig {
    UNetConfig unet;
    TextEncoderConfig text;
    std::string schedule_kind = "linear";
    int T = 200;
    double beta_min = 1e-4;
    double beta_max = 0.02;

    NoiseSchedule make_schedule() const {
        return NoiseSchedule::make(schedule_kind_from(schedule_kind), T, beta_min, beta_max);
    }

    // Canonical key=value block; the config hash is the FNV-1a of this text.
    std::string canonical_text() const;
    std::string config_hash() const { return hex64(fnv1a64(canonical_text())); }

    void validate() const {
        if (unet.d_text != text.d_text)
            throw ConfigError("model: unet d_text != text encoder d_text");
        if (unet.max_len != text.max_len) throw ConfigError("model: max_len mismatch");
        if (unet.image_size % 4 != 0) throw ConfigError("model: image_size must be divisible by 4");
        if (unet.ch0() % unet.gn_groups != 0 || unet.ch1() % unet.gn_groups != 0)
            throw ConfigError("model: channels not divisible by gn_groups");
        if (unet.d_text % unet.heads != 0 || text.d_text % text.heads != 0)
            throw ConfigError("model: dims not divisible by heads");
        if (temb_ok() == false) throw ConfigError("model: temb_dim must be even");
    }

   private:
    bool temb_ok() const { return unet.temb_dim % 2 == 0; }
};

// Named-parameter container: denoiser, text encoder and embedding table,
// plus the vocabulary and the metadata that travels with them.
struct Checkpoint {
    ModelConfig config;
    Vocabulary vocab;
    ParameterStore<float> params;
    int step = 0;
    std::string strategy = "init";
    std::string parent_hash;

    UNetDenoiser<float> denoiser() {
        return UNetDenoiser<float>{&params, &config.unet};
    }
};

// Fresh parameter set for both submodels, streams split per parameter name.
inline Checkpoint make_base_checkpoint(const ModelConfig& cfg, const Vocabulary& vocab,
                                       uint64_t seed) {
    cfg.validate();
    Checkpoint c;
    c.config = cfg;
    c.vocab = vocab;
    Rng rng(seed);
    Rng tr = rng.child("init.text");
    init_text_encoder(c.params, cfg.text, vocab.size(), tr);
    Rng ur = rng.child("init.unet");
    init_unet(c.params, cfg.unet, ur);
    return c;
}

struct EncodedPrompt {
    Tensor<float> cond;  // [L, d_text]
    Tensor<float> mask;  // [L], additive key mask
};

// Runs the text encoder once, outside any training graph.
// Throws VocabError on unknown words.
inline EncodedPrompt encode_prompt(const Checkpoint& ckpt, const std::string& prompt) {
    auto& params = const_cast<ParameterStore<float>&>(ckpt.params);  // read-only lease
    TokenSequence seq = tokenize(ckpt.vocab, prompt, ckpt.config.text.max_len);
    Graph<float> g(false);
    auto enc = encode_text(g, params, ckpt.config.text, {seq});
    EncodedPrompt out;
    out.cond = g.val(enc.cond);
    out.mask = key_mask_tensor<float>(seq);
    return out;
}

// n images for one prompt, sampled in parallel with one rng stream per image
// index. Bit-identical regardless of thread count.
inline std::vector<Tensor<float>> generate_images(const Checkpoint& ckpt,
                                                  const std::string& prompt, int n,
                                                  SamplerKind kind, int steps, uint64_t seed) {
    auto& params = const_cast<ParameterStore<float>&>(ckpt.params);
    auto& cfg = ckpt.config;
    EncodedPrompt ep = encode_prompt(ckpt, prompt);
    NoiseSchedule sched = cfg.make_schedule();
    UNetDenoiser<float> den{&params, &const_cast<ModelConfig&>(cfg).unet};
    std::vector<Tensor<float>> out(static_cast<size_t>(n));
    const std::vector<int> shape{cfg.unet.in_channels, cfg.unet.image_size, cfg.unet.image_size};
    Rng base(seed);
#pragma omp parallel for schedule(dynamic) if (n > 1)
    for (int i = 0; i < n; ++i) {
        Rng r = base.child(0x9e0 + static_cast<uint64_t>(i));
        out[static_cast<size_t>(i)] = sample(sched, den, ep.cond, ep.mask, kind, steps, shape, r);
    }
    return out;
}

}  // namespace lab
