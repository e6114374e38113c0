#pragma once

#include <array>
#include <string>
#include <vector>

#include "lab/model.hpp"

namespace lab {

// One renderable object identity. Two specs that differ only in detail_mark
// render visibly different objects under the reference embedder.
struct SyntheticObjectSpec {
    std::string class_noun;
    int shape_id = 0;      // derived from class_noun
    int palette_id = 0;    // index into the named color table (body)
    int palette_id2 = 1;   // secondary
    int palette_id3 = 2;   // accent
    int texture_id = 0;    // 0 plain, 1 striped, 2 dotted, 3 checkered
    int mark_glyph = 0;    // 0 none, 1..8 glyph shapes
    int mark_pos = 0;      // 0..3 quadrant anchor
};

struct RenderParams {
    int context_id = 0;  // index into context table
    float dx = 0.0f, dy = 0.0f;
    float scale = 1.0f;
    uint64_t noise_seed = 0;
};

const std::vector<std::string>& color_names();
const std::vector<std::string>& context_names();   // "plain", "beach", ...
const std::vector<std::string>& texture_names();   // "plain", "striped", ...
const std::vector<std::string>& class_names();     // default 8 classes
std::string context_phrase(const std::string& context);  // "on the beach", ...

// Deterministic rasterizer; image is (3,S,S) in [-1,1].
Tensor<float> render_object(const SyntheticObjectSpec& spec, const RenderParams& rp, int size);
Tensor<float> render_background(int context_id, uint64_t noise_seed, int size);

struct TargetSet {
    std::string object_id;
    std::string class_noun;
    std::vector<Tensor<float>> images;  // 4..6 views
    SyntheticObjectSpec spec;
};

struct CorpusExample {
    Tensor<float> image;
    std::string caption;
};

struct Corpus {
    std::vector<CorpusExample> train;
    std::vector<TargetSet> targets;
    Vocabulary vocab;
};

// Generic instances with captions across contexts for base-model pretraining,
// plus held-out specific instances (unique detail marks) of 4-6 views each as
// personalization targets. Vocabulary covers every caption and suite word
// plus the rare identifiers.
Corpus build_corpus(uint64_t seed, const std::vector<std::string>& classes, int instances_per_class,
                    const std::vector<std::string>& contexts, int train_per_class, int image_size);

// ---------------------------------------------------------------------------
// reference embedder / scoring
// ---------------------------------------------------------------------------

inline constexpr int kEmbedDim = 128;

// Deterministic handcrafted image embedding: 8x8 downsampled luminance (64),
// three 16-bin color histograms (48) and a 16-bin edge-orientation histogram,
// block-normalized, weighted, concatenated and L2-normalized.
std::vector<double> embed_image(const Tensor<float>& img);

double cosine(const std::vector<double>& a, const std::vector<double>& b);

struct PromptSuite {
    std::string kind;  // "diverse" | "simple"
    std::vector<std::string> prompts;
    int images_per_prompt = 0;
};

// diverse: 25 prompts x 4 images; simple: 1 prompt x 64 images. The
// identifier is used as an adjective before class_noun; an empty class_noun
// uses the identifier as the noun itself (textual-inversion style).
PromptSuite make_prompt_suite(const std::string& kind, const std::string& class_noun,
                              const std::string& identifier);

struct SimilarityReport {
    std::string strategy;
    int checkpoint_step = 0;
    std::string suite_kind;
    double mean = 0.0;
    struct Row {
        std::string prompt;
        double mean = 0.0;
        std::vector<double> per_image;  // mean cosine vs targets, per generated image
    };
    std::vector<Row> rows;
};

struct EvalSettings {
    SamplerKind sampler = SamplerKind::Ddim;
    int sampler_steps = 20;
};

// Generates every suite image from the checkpoint, embeds generated and
// target images, and reports mean cosine over all (generated, target) pairs.
SimilarityReport score_personalization(const Checkpoint& ckpt, const TargetSet& targets,
                                       const PromptSuite& suite, uint64_t seed,
                                       const EvalSettings& ev);

struct DriftReport {
    std::string class_noun;
    double divergence = 0.0;  // 1 - mean cosine, paired by sample index
    int samples = 0;
};

// Samples n images from each checkpoint for "a photo of {class_noun}". With
// tuned_seed == seed both models see identical initial noise per index, so a
// checkpoint scored against itself has divergence exactly 0; a distinct
// tuned_seed measures the sampling noise floor instead.
DriftReport score_language_drift(const Checkpoint& base, const Checkpoint& tuned,
                                 const std::string& class_noun, int n, uint64_t seed,
                                 const EvalSettings& ev, uint64_t tuned_seed);
inline DriftReport score_language_drift(const Checkpoint& base, const Checkpoint& tuned,
                                        const std::string& class_noun, int n, uint64_t seed,
                                        const EvalSettings& ev) {
    return score_language_drift(base, tuned, class_noun, n, seed, ev, seed);
}

}  // namespace lab
