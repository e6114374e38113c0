#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "lab/denoiser.hpp"
#include "lab/evalbench.hpp"
#include "lab/gradcheck.hpp"
#include "lab/model.hpp"

using namespace lab;

namespace {

UNetConfig tiny_unet() {
    UNetConfig cfg;
    cfg.image_size = 8;
    cfg.base_channels = 8;
    cfg.d_text = 16;
    cfg.temb_dim = 16;
    cfg.heads = 2;
    cfg.gn_groups = 4;
    cfg.max_len = 8;
    return cfg;
}

template <typename T>
Tensor<T> randt(std::vector<int> shape, uint64_t seed, double scale = 1.0) {
    Rng r(seed);
    Tensor<T> t(std::move(shape));
    for (auto& v : t.data) v = static_cast<T>((r.uniform() * 2.0 - 1.0) * scale);
    return t;
}

}  // namespace

TEST_CASE("time embedding: t=0 alternates (0,1), distinct t distinct, odd dim rejected") {
    auto f0 = time_embedding_features(0, 8);
    for (int i = 0; i < 8; i += 2) {
        CHECK(f0[static_cast<size_t>(i)] == doctest::Approx(0.0));
        CHECK(f0[static_cast<size_t>(i + 1)] == doctest::Approx(1.0));
    }
    for (int t = 1; t <= 20; ++t) {
        auto a = time_embedding_features(t, 16);
        auto b = time_embedding_features(t + 1, 16);
        double diff = 0;
        for (size_t i = 0; i < a.size(); ++i) diff += std::abs(a[i] - b[i]);
        CHECK(diff > 1e-6);
    }
    CHECK_THROWS_AS(time_embedding_features(1, 7), ShapeError);
}

TEST_CASE("unet: output shape equals input shape") {
    for (int size : {8, 16}) {
        UNetConfig cfg = tiny_unet();
        cfg.image_size = size;
        ParameterStore<float> ps;
        Rng rng(2);
        init_unet(ps, cfg, rng);
        Graph<float> g(false);
        NodeId z = g.constant(randt<float>({2, 3, size, size}, 3));
        NodeId cond = g.constant(randt<float>({2 * cfg.max_len, cfg.d_text}, 4, 0.5));
        std::vector<NodeId> masks = {g.constant(Tensor<float>::zeros({cfg.max_len})),
                                     g.constant(Tensor<float>::zeros({cfg.max_len}))};
        NodeId out = unet_forward(g, ps, cfg, z, {1, 5}, cond, masks);
        CHECK(g.shape(out) == std::vector<int>{2, 3, size, size});
    }
}

TEST_CASE("unet: deterministic forward") {
    UNetConfig cfg = tiny_unet();
    ParameterStore<float> ps;
    Rng rng(7);
    init_unet(ps, cfg, rng);
    auto run = [&]() {
        Graph<float> g(false);
        NodeId z = g.constant(randt<float>({1, 3, 8, 8}, 9));
        NodeId cond = g.constant(randt<float>({cfg.max_len, cfg.d_text}, 10, 0.5));
        std::vector<NodeId> masks = {g.constant(Tensor<float>::zeros({cfg.max_len}))};
        return g.val(unet_forward(g, ps, cfg, z, {3}, cond, masks)).data;
    };
    CHECK(run() == run());
}

TEST_CASE("unet: different conditionings produce different outputs at init") {
    // cross-attention must not be a no-op even on a freshly initialized net
    UNetConfig cfg = tiny_unet();
    ParameterStore<float> ps;
    Rng rng(11);
    init_unet(ps, cfg, rng);

    Corpus corpus = build_corpus(5, {"dog", "cat"}, 0, {"plain"}, 2, 8);
    TextEncoderConfig tc;
    tc.d_text = cfg.d_text;
    tc.layers = 1;
    tc.heads = 2;
    tc.max_len = cfg.max_len;
    ParameterStore<float> tps;
    Rng trng(12);
    init_text_encoder(tps, tc, corpus.vocab.size(), trng);

    auto run = [&](const std::string& prompt) {
        Graph<float> g(false);
        TokenSequence seq = tokenize(corpus.vocab, prompt, tc.max_len);
        auto enc = encode_text(g, tps, tc, {seq});
        NodeId z = g.constant(randt<float>({1, 3, 8, 8}, 13));
        NodeId out = unet_forward(g, ps, cfg, z, {2}, enc.cond, enc.key_masks);
        return g.val(out).data;
    };
    auto a = run("a photo of dog");
    auto b = run("a photo of cat");
    double max_diff = 0;
    for (size_t i = 0; i < a.size(); ++i)
        max_diff = std::max(max_diff, std::abs(static_cast<double>(a[i]) - b[i]));
    CHECK(max_diff > 0.0);
}

TEST_CASE("unet: parameter count is a pure function of the config") {
    {
        UNetConfig cfg;  // documented defaults, base 32
        ParameterStore<float> ps;
        Rng rng(1);
        init_unet(ps, cfg, rng);
        CHECK(ps.total_params() == 702339);
        CHECK(ps.count() == 162);
    }
    {
        UNetConfig cfg;
        cfg.base_channels = 16;
        ParameterStore<float> ps;
        Rng rng(1);
        init_unet(ps, cfg, rng);
        CHECK(ps.total_params() == 218691);
    }
}

TEST_CASE("unet: shape errors") {
    UNetConfig cfg = tiny_unet();
    ParameterStore<float> ps;
    Rng rng(21);
    init_unet(ps, cfg, rng);
    Graph<float> g(false);
    NodeId bad = g.constant(randt<float>({1, 3, 6, 6}, 22));  // not divisible by 4
    NodeId cond = g.constant(randt<float>({cfg.max_len, cfg.d_text}, 23));
    std::vector<NodeId> masks = {g.constant(Tensor<float>::zeros({cfg.max_len}))};
    CHECK_THROWS_AS(unet_forward(g, ps, cfg, bad, {1}, cond, masks), ShapeError);
    NodeId z = g.constant(randt<float>({1, 3, 8, 8}, 24));
    NodeId bad_cond = g.constant(randt<float>({cfg.max_len, cfg.d_text + 1}, 25));
    CHECK_THROWS_AS(unet_forward(g, ps, cfg, z, {1}, bad_cond, masks), ShapeError);
}

TEST_CASE("unet: full gradient check at 8x8 in 64-bit") {
    UNetConfig cfg = tiny_unet();
    ParameterStore<double> ps;
    Rng rng(31);
    init_unet(ps, cfg, rng);
    Tensor<double> z = randt<double>({1, 3, 8, 8}, 32);
    Tensor<double> cond = randt<double>({cfg.max_len, cfg.d_text}, 33, 0.5);
    Tensor<double> mask = Tensor<double>::zeros({cfg.max_len});
    auto build = [&](Graph<double>& g, ParameterStore<double>& p) {
        NodeId zi = g.constant(z);
        NodeId ci = g.constant(cond);
        std::vector<NodeId> masks = {g.constant(mask)};
        NodeId out = unet_forward(g, p, cfg, zi, {4}, ci, masks);
        return g.mean(g.mul(out, out));
    };
    GradCheckOptions opt;
    opt.coords_per_param = 3;
    auto report = gradient_check(ps, build, opt);
    CHECK_MESSAGE(report.max_rel_err < 1e-4, "max rel err " << report.max_rel_err);
}
