#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>

#include "lab/evalbench.hpp"
#include "lab/textpipe.hpp"

using namespace lab;

namespace {

Corpus tiny_corpus() {
    return build_corpus(11, {"backpack", "dog"}, 1, {"plain", "beach", "jungle"}, 5, 32);
}

TextEncoderConfig tiny_text_cfg() {
    TextEncoderConfig cfg;
    cfg.d_text = 16;
    cfg.layers = 1;
    cfg.heads = 2;
    cfg.max_len = 12;
    return cfg;
}

}  // namespace

TEST_CASE("tokenize: structure matches the corpus vocabulary ids") {
    Corpus c = tiny_corpus();
    auto& emb_dummy = c.vocab;  // corpus vocab covers the prompt after add_token
    (void)emb_dummy;
    // add the pseudo-token to the vocabulary (embedding table not needed here)
    c.vocab.append(kRareToken);
    TokenSequence seq = tokenize(c.vocab, "a photo of " + kRareToken + " backpack", 16);
    CHECK(seq.length == 7);
    CHECK(seq.ids[0] == c.vocab.bos_id);
    CHECK(seq.ids[1] == c.vocab.id("a"));
    CHECK(seq.ids[2] == c.vocab.id("photo"));
    CHECK(seq.ids[3] == c.vocab.id("of"));
    CHECK(seq.ids[4] == c.vocab.id(kRareToken));
    CHECK(seq.ids[5] == c.vocab.id("backpack"));
    CHECK(seq.ids[6] == c.vocab.eos_id);
    for (size_t i = 7; i < seq.ids.size(); ++i) CHECK(seq.ids[i] == c.vocab.pad_id);
    CHECK(static_cast<int>(seq.ids.size()) == 16);
}

TEST_CASE("tokenize: empty string and determinism") {
    Corpus c = tiny_corpus();
    TokenSequence seq = tokenize(c.vocab, "", 16);
    CHECK(seq.length == 2);
    CHECK(seq.ids[0] == c.vocab.bos_id);
    CHECK(seq.ids[1] == c.vocab.eos_id);
    CHECK(seq.ids[2] == c.vocab.pad_id);
    TokenSequence a = tokenize(c.vocab, "a photo of dog", 16);
    TokenSequence b = tokenize(c.vocab, "a photo of dog", 16);
    CHECK(a.ids == b.ids);
}

TEST_CASE("tokenize: unknown word error names the word") {
    Corpus c = tiny_corpus();
    try {
        tokenize(c.vocab, "a photo of zeppelin", 16);
        FAIL("expected VocabError");
    } catch (const VocabError& e) {
        CHECK(std::string(e.what()).find("zeppelin") != std::string::npos);
    }
}

TEST_CASE("tokenize: overlong prompt rejected") {
    Corpus c = tiny_corpus();
    CHECK_THROWS_AS(tokenize(c.vocab, "a photo of dog in the jungle on the beach in the snow", 8),
                    VocabError);
}

TEST_CASE("detokenize round-trips corpus prompts") {
    Corpus c = tiny_corpus();
    c.vocab.append(kRareToken);
    const std::vector<std::string> prompts = {
        "a photo of dog", "a photo of " + kRareToken + " backpack on the beach",
        "a photo of red dog in the jungle"};
    for (const std::string& s : prompts) {
        TokenSequence seq = tokenize(c.vocab, s, 16);
        CHECK(detokenize(c.vocab, seq) == s);
    }
}

TEST_CASE("prompt template rendering") {
    PromptTemplate t{"a photo of {ADJ} {NOUN} {CONTEXT}"};
    CHECK(t.render(kRareToken, "backpack", "on the beach") ==
          "a photo of " + kRareToken + " backpack on the beach");
    CHECK(t.render("", "dog", "") == "a photo of dog");
    // full binding tokenizes against the corpus vocabulary
    Corpus c = tiny_corpus();
    CHECK_NOTHROW(tokenize(c.vocab, t.render("red", "dog", "in the jungle"), 16));
}

TEST_CASE("add_token: copy semantics, growth, independence") {
    Corpus c = tiny_corpus();
    ParameterStore<float> ps;
    Rng rng(3);
    TextEncoderConfig cfg = tiny_text_cfg();
    init_text_encoder(ps, cfg, c.vocab.size(), rng);
    auto& emb = ps.at(kEmbeddingParam);
    const int before = c.vocab.size();
    const int rare_id = c.vocab.id("rare");
    std::vector<float> rare_row(emb.tensor.data.begin() + rare_id * cfg.d_text,
                                emb.tensor.data.begin() + (rare_id + 1) * cfg.d_text);

    const int new_id = add_token(c.vocab, emb, kRareToken, "rare");
    CHECK(c.vocab.size() == before + 1);
    CHECK(new_id == before);
    CHECK(emb.tensor.shape[0] == before + 1);
    CHECK(std::memcmp(rare_row.data(), emb.tensor.data.data() + new_id * cfg.d_text,
                      sizeof(float) * static_cast<size_t>(cfg.d_text)) == 0);

    // mutating the new row leaves the source row untouched
    emb.tensor.data[static_cast<size_t>(new_id) * cfg.d_text] += 1.0f;
    CHECK(std::memcmp(rare_row.data(), emb.tensor.data.data() + rare_id * cfg.d_text,
                      sizeof(float) * static_cast<size_t>(cfg.d_text)) == 0);

    CHECK_THROWS_AS(add_token(c.vocab, emb, kRareToken, "rare"), VocabError);
    CHECK_THROWS_AS(add_token(c.vocab, emb, "other", "nonexistent"), VocabError);
}

TEST_CASE("encode_text: shape contract and determinism") {
    Corpus c = tiny_corpus();
    TextEncoderConfig cfg = tiny_text_cfg();
    ParameterStore<float> ps;
    Rng rng(5);
    init_text_encoder(ps, cfg, c.vocab.size(), rng);
    TokenSequence seq = tokenize(c.vocab, "a photo of dog", cfg.max_len);
    Graph<float> g(false);
    auto enc = encode_text(g, ps, cfg, {seq, seq});
    CHECK(g.shape(enc.cond) == std::vector<int>{2 * cfg.max_len, cfg.d_text});
    Graph<float> g2(false);
    auto enc2 = encode_text(g2, ps, cfg, {seq, seq});
    CHECK(g.val(enc.cond).data == g2.val(enc2.cond).data);
}

TEST_CASE("encode_text: padded region does not affect the output") {
    Corpus c = tiny_corpus();
    TextEncoderConfig cfg = tiny_text_cfg();
    ParameterStore<float> ps;
    Rng rng(6);
    init_text_encoder(ps, cfg, c.vocab.size(), rng);
    TokenSequence seq = tokenize(c.vocab, "a photo of dog", cfg.max_len);

    std::vector<float> out1;
    {
        Graph<float> g(false);
        out1 = g.val(encode_text(g, ps, cfg, {seq}).cond).data;
    }
    // perturb the pad token's embedding row; every downstream consumer must
    // see the exact same conditioning
    auto& emb = ps.at(kEmbeddingParam);
    for (int i = 0; i < cfg.d_text; ++i)
        emb.tensor.data[static_cast<size_t>(c.vocab.pad_id) * cfg.d_text + i] += 7.5f;
    std::vector<float> out2;
    {
        Graph<float> g(false);
        out2 = g.val(encode_text(g, ps, cfg, {seq}).cond).data;
    }
    CHECK(out1 == out2);
    // padded positions are zeroed
    for (int pos = seq.length; pos < cfg.max_len; ++pos)
        for (int d = 0; d < cfg.d_text; ++d)
            CHECK(out1[static_cast<size_t>(pos) * cfg.d_text + d] == 0.0f);
}

TEST_CASE("encode_text: output moves when the rare row moves (nonzero Jacobian)") {
    Corpus c = tiny_corpus();
    TextEncoderConfig cfg = tiny_text_cfg();
    ParameterStore<float> ps;
    Rng rng(7);
    init_text_encoder(ps, cfg, c.vocab.size(), rng);
    auto& emb = ps.at(kEmbeddingParam);
    const int rare_row = add_token(c.vocab, emb, kRareToken, "rare");
    TokenSequence seq = tokenize(c.vocab, "a photo of " + kRareToken + " dog", cfg.max_len);

    std::vector<float> out1;
    {
        Graph<float> g(false);
        out1 = g.val(encode_text(g, ps, cfg, {seq}).cond).data;
    }
    emb.tensor.data[static_cast<size_t>(rare_row) * cfg.d_text + 3] += 0.25f;
    std::vector<float> out2;
    {
        Graph<float> g(false);
        out2 = g.val(encode_text(g, ps, cfg, {seq}).cond).data;
    }
    double max_diff = 0;
    for (size_t i = 0; i < out1.size(); ++i)
        max_diff = std::max(max_diff, std::abs(static_cast<double>(out1[i]) - out2[i]));
    CHECK(max_diff > 0.0);
}

TEST_CASE("encode_text: no gradient reaches the rare row without its token") {
    Corpus c = tiny_corpus();
    TextEncoderConfig cfg = tiny_text_cfg();
    ParameterStore<float> ps;
    Rng rng(8);
    init_text_encoder(ps, cfg, c.vocab.size(), rng);
    auto& emb = ps.at(kEmbeddingParam);
    const int rare_row = add_token(c.vocab, emb, kRareToken, "rare");
    ps.set_all_trainable(false);
    emb.set_trainable(true);

    TokenSequence seq = tokenize(c.vocab, "a photo of dog", cfg.max_len);
    Graph<float> g;
    auto enc = encode_text(g, ps, cfg, {seq});
    g.backward(g.mean(g.mul(enc.cond, enc.cond)));
    REQUIRE(emb.tensor.grad.size() == emb.tensor.data.size());
    for (int i = 0; i < cfg.d_text; ++i)
        CHECK(emb.tensor.grad[static_cast<size_t>(rare_row) * cfg.d_text + i] == 0.0f);
    // and the used rows did get gradient
    double used = 0;
    for (int i = 0; i < cfg.d_text; ++i)
        used += std::abs(emb.tensor.grad[static_cast<size_t>(c.vocab.id("dog")) * cfg.d_text + i]);
    CHECK(used > 0.0);
}

TEST_CASE("vocabulary save/load round trip") {
    Corpus c = tiny_corpus();
    const std::string path = "/tmp/lab_vocab_test.txt";
    c.vocab.save(path);
    Vocabulary v2 = Vocabulary::load(path);
    CHECK(v2.size() == c.vocab.size());
    CHECK(v2.hash() == c.vocab.hash());
    CHECK(v2.id("dog") == c.vocab.id("dog"));
}
