#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "lab/evalbench.hpp"
#include "lab/image.hpp"

using namespace lab;

namespace {

Checkpoint tiny_checkpoint(uint64_t seed, const Vocabulary& vocab) {
    ModelConfig m;
    m.unet.image_size = 16;
    m.unet.base_channels = 8;
    m.unet.d_text = 16;
    m.unet.temb_dim = 16;
    m.unet.heads = 2;
    m.unet.gn_groups = 4;
    m.unet.max_len = 16;
    m.text.d_text = 16;
    m.text.layers = 1;
    m.text.heads = 2;
    m.text.max_len = 16;
    m.T = 10;
    Checkpoint c = make_base_checkpoint(m, vocab, seed);
    c.strategy = "two_stage";  // identifier resolution in scoring
    return c;
}

}  // namespace

TEST_CASE("embed_image: unit norm, self-cosine, shape errors") {
    Corpus c = build_corpus(3, {"dog"}, 1, {"plain"}, 2, 32);
    const auto& img = c.targets[0].images[0];
    auto e = embed_image(img);
    CHECK(static_cast<int>(e.size()) == kEmbedDim);
    double n2 = 0;
    for (double v : e) n2 += v * v;
    CHECK(std::abs(std::sqrt(n2) - 1.0) < 1e-6);
    CHECK(cosine(e, e) == doctest::Approx(1.0).epsilon(1e-9));
    CHECK_THROWS_AS(embed_image(Tensor<float>::zeros({3, 30, 30})), ShapeError);
    CHECK_THROWS_AS(embed_image(Tensor<float>::zeros({1, 32, 32})), ShapeError);
}

TEST_CASE("embed_image: channel permutation is not identity") {
    Corpus c = build_corpus(3, {"backpack"}, 1, {"plain"}, 2, 32);
    const auto& img = c.targets[0].images[0];
    Tensor<float> perm = img;
    const int hw = 32 * 32;
    std::copy(img.data.begin() + hw, img.data.begin() + 2 * hw, perm.data.begin());
    std::copy(img.data.begin() + 2 * hw, img.data.begin() + 3 * hw, perm.data.begin() + hw);
    std::copy(img.data.begin(), img.data.begin() + hw, perm.data.begin() + 2 * hw);
    CHECK(cosine(embed_image(img), embed_image(perm)) < 0.999);
}

TEST_CASE("corpus: determinism, caption closure, empty targets") {
    Corpus a = build_corpus(42, {"dog", "cat"}, 1, {"plain", "beach"}, 10, 32);
    Corpus b = build_corpus(42, {"dog", "cat"}, 1, {"plain", "beach"}, 10, 32);
    REQUIRE(a.train.size() == b.train.size());
    for (size_t i = 0; i < a.train.size(); ++i) {
        CHECK(a.train[i].caption == b.train[i].caption);
        CHECK(std::memcmp(a.train[i].image.data.data(), b.train[i].image.data.data(),
                          a.train[i].image.data.size() * sizeof(float)) == 0);
    }
    CHECK(a.vocab.hash() == b.vocab.hash());
    for (const auto& ex : a.train)
        CHECK_NOTHROW(tokenize(a.vocab, ex.caption, 16));

    Corpus empty_targets = build_corpus(42, {"dog"}, 0, {"plain"}, 5, 32);
    CHECK(empty_targets.targets.empty());
    CHECK(!empty_targets.train.empty());
}

TEST_CASE("corpus: target view counts in 4..6 and detail marks present") {
    Corpus c = build_corpus(9, class_names(), 2, context_names(), 2, 32);
    CHECK(c.targets.size() == class_names().size() * 2);
    for (const auto& t : c.targets) {
        CHECK(t.images.size() >= 4);
        CHECK(t.images.size() <= 6);
        CHECK(t.spec.mark_glyph >= 1);
        CHECK(t.spec.mark_glyph <= 8);
    }
}

TEST_CASE("renderer: detail mark alone separates specs (pinned threshold)") {
    // pinned after one calibration run: min distance 0.00142 over 112
    // mark-only pairs; render noise floor 0.0007
    const double kMarkDistanceThreshold = 0.001;
    Corpus c = build_corpus(2024, class_names(), 1, {"plain"}, 2, 32);
    for (const auto& t : c.targets) {
        SyntheticObjectSpec other = t.spec;
        other.mark_glyph = 1 + (t.spec.mark_glyph % 8);
        RenderParams rp;
        rp.context_id = 0;
        rp.noise_seed = 7;
        const double d = 1.0 - cosine(embed_image(render_object(t.spec, rp, 32)),
                                      embed_image(render_object(other, rp, 32)));
        CHECK_MESSAGE(d > kMarkDistanceThreshold, t.object_id << " distance " << d);
    }
}

TEST_CASE("embedder discrimination: intra-instance exceeds inter-instance (pinned margin)") {
    // calibration run: intra mean 0.9964, inter-instance mean 0.9793
    const double kMargin = 0.008;
    Corpus c = build_corpus(2024, class_names(), 2, context_names(), 2, 32);
    double intra = 0;
    int ni = 0;
    for (const auto& t : c.targets) {
        std::vector<std::vector<double>> es;
        for (const auto& img : t.images) es.push_back(embed_image(img));
        for (size_t a = 0; a < es.size(); ++a)
            for (size_t b = a + 1; b < es.size(); ++b) {
                intra += cosine(es[a], es[b]);
                ++ni;
            }
    }
    intra /= ni;
    double inter = 0;
    int nj = 0;
    for (size_t i = 0; i < c.targets.size(); ++i)
        for (size_t j = i + 1; j < c.targets.size(); ++j) {
            if (c.targets[i].class_noun != c.targets[j].class_noun) continue;
            inter += cosine(embed_image(c.targets[i].images[0]),
                            embed_image(c.targets[j].images[0]));
            ++nj;
        }
    inter /= nj;
    CHECK_MESSAGE(intra > inter + kMargin, "intra " << intra << " inter " << inter);
}

TEST_CASE("prompt suites: pinned cardinalities and clean tokenization") {
    PromptSuite simple = make_prompt_suite("simple", "dog", kRareToken);
    CHECK(simple.prompts.size() == 1);
    CHECK(simple.images_per_prompt == 64);
    CHECK(simple.prompts[0] == "a photo of " + kRareToken + " dog");

    PromptSuite diverse = make_prompt_suite("diverse", "dog", kRareToken);
    CHECK(diverse.prompts.size() == 25);
    CHECK(diverse.images_per_prompt == 4);
    CHECK(diverse.prompts.size() * diverse.images_per_prompt == 100);

    Corpus c = build_corpus(3, {"dog"}, 1, context_names(), 2, 32);
    c.vocab.append(kRareToken);
    for (const auto& p : diverse.prompts) CHECK_NOTHROW(tokenize(c.vocab, p, 16));

    // noun-style identifier (textual inversion)
    PromptSuite ti = make_prompt_suite("simple", "", "s*");
    CHECK(ti.prompts[0] == "a photo of s*");
    CHECK_THROWS_AS(make_prompt_suite("weird", "dog", kRareToken), ConfigError);
}

TEST_CASE("score_personalization: oracle injection and breakdown consistency") {
    Corpus c = build_corpus(21, {"dog"}, 1, {"plain"}, 3, 16);
    c.vocab.append(kRareToken);
    Checkpoint ckpt = tiny_checkpoint(5, c.vocab);
    const TargetSet& target = c.targets[0];

    PromptSuite small_suite;
    small_suite.kind = "simple";
    small_suite.prompts = {"a photo of " + kRareToken + " dog"};
    small_suite.images_per_prompt = 3;
    EvalSettings ev{SamplerKind::Ddim, 4};
    SimilarityReport rep = score_personalization(ckpt, target, small_suite, 77, ev);

    // mean re-derivable from the per-image breakdown
    double total = 0;
    int n = 0;
    for (const auto& row : rep.rows) {
        double row_mean = 0;
        for (double v : row.per_image) {
            total += v;
            row_mean += v;
            ++n;
        }
        CHECK(std::abs(row.mean - row_mean / row.per_image.size()) < 1e-6);
    }
    CHECK(std::abs(rep.mean - total / n) < 1e-6);
    for (const auto& row : rep.rows)
        for (double v : row.per_image) {
            CHECK(v >= -1.0);
            CHECK(v <= 1.0);
        }

    // identical invocation reproduces the report bit for bit
    SimilarityReport rep2 = score_personalization(ckpt, target, small_suite, 77, ev);
    CHECK(rep.mean == rep2.mean);
    for (size_t i = 0; i < rep.rows.size(); ++i)
        CHECK(rep.rows[i].per_image == rep2.rows[i].per_image);

    // oracle injection: scoring the target against itself gives exactly 1
    std::vector<std::vector<double>> te;
    for (const auto& img : target.images) te.push_back(embed_image(img));
    double self_mean = 0;
    for (const auto& e : te) self_mean += cosine(e, te[0]);
    CHECK(cosine(te[0], te[0]) == doctest::Approx(1.0).epsilon(1e-12));

    // missing identifier in the vocabulary errors
    Corpus c2 = build_corpus(22, {"dog"}, 1, {"plain"}, 3, 16);
    Checkpoint no_rare = tiny_checkpoint(5, c2.vocab);
    CHECK_THROWS_AS(score_personalization(no_rare, target, small_suite, 77, ev), VocabError);
}

TEST_CASE("score_language_drift: self-drift zero, noise floor pinned, n=0 rejected") {
    Corpus c = build_corpus(31, {"cat"}, 1, {"plain"}, 3, 16);
    Checkpoint base = tiny_checkpoint(9, c.vocab);
    EvalSettings ev{SamplerKind::Ddim, 4};

    DriftReport self_drift = score_language_drift(base, base, "cat", 4, 123, ev);
    CHECK(self_drift.divergence == 0.0);
    CHECK(self_drift.samples == 4);

    // distinct tuned seed measures the sampling noise floor; pinned once with
    // these exact seeds and settings
    DriftReport floor = score_language_drift(base, base, "cat", 4, 123, ev, 456);
    CHECK(floor.divergence > 0.0);
    CHECK(floor.divergence == doctest::Approx(0.0410058).epsilon(0.02));

    CHECK_THROWS_AS(score_language_drift(base, base, "cat", 0, 1, ev), Error);
}

TEST_CASE("image grid layout") {
    std::vector<Tensor<float>> tiles(5, Tensor<float>::full({3, 8, 8}, 0.5f));
    Tensor<float> grid = image_grid(tiles, 2);
    CHECK(grid.shape == std::vector<int>{3, 3 * 8 + 2 * 2, 2 * 8 + 2});
}
