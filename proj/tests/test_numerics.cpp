#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "lab/gradcheck.hpp"
#include "lab/graph.hpp"
#include "lab/optim.hpp"
#include "lab/params.hpp"
#include "lab/rng.hpp"

using namespace lab;

namespace {

Tensor<double> randt(std::vector<int> shape, Rng& rng, double scale = 1.0) {
    Tensor<double> t(std::move(shape));
    for (auto& v : t.data) v = (rng.uniform() * 2.0 - 1.0) * scale;  // in [-scale, scale]
    return t;
}

// Finite-difference check of a single-op subgraph against backprop, over all
// coordinates of all inputs. Loss is sum of squares of the op output so the
// output gradient is non-trivial.
template <typename BuildOp>
double fd_check_op(std::vector<Tensor<double>>& inputs, BuildOp&& build, double h = 1e-6) {
    for (auto& t : inputs) {
        t.requires_grad = true;
        t.clear_grad();
    }
    {
        Graph<double> g;
        std::vector<NodeId> ids;
        for (auto& t : inputs) ids.push_back(g.leaf(&t));
        NodeId out = build(g, ids);
        g.backward(g.sum_sq(out));
    }
    auto eval = [&]() {
        Graph<double> g(false);
        std::vector<NodeId> ids;
        for (auto& t : inputs) ids.push_back(g.leaf(&t));
        return g.val(g.sum_sq(build(g, ids))).data[0];
    };
    double worst = 0;
    for (auto& t : inputs) {
        for (size_t i = 0; i < t.data.size(); ++i) {
            const double orig = t.data[i];
            t.data[i] = orig + h;
            const double fp = eval();
            t.data[i] = orig - h;
            const double fm = eval();
            t.data[i] = orig;
            const double fd = (fp - fm) / (2 * h);
            worst = std::max(worst, grad_rel_err(t.grad[i], fd));
        }
    }
    return worst;
}

}  // namespace

TEST_CASE("rng determinism and stream independence") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
    Rng c = Rng(42).child("noise");
    Rng d = Rng(42).child("noise");
    CHECK(c.next_u64() == d.next_u64());
    Rng e = Rng(42).child("timestep");
    CHECK(Rng(42).child("noise").next_u64() != e.next_u64());
    // child streams do not depend on parent draw position
    Rng f(7);
    f.next_u64();
    f.next_u64();
    CHECK(f.child(3).next_u64() == Rng(7).child(3).next_u64());
}

TEST_CASE("rng normal moments") {
    Rng r(123);
    const int n = 200000;
    double s = 0, s2 = 0;
    for (int i = 0; i < n; ++i) {
        double x = r.normal();
        s += x;
        s2 += x * x;
    }
    const double mean = s / n;
    const double var = s2 / n - mean * mean;
    CHECK(std::abs(mean) < 0.01);
    CHECK(std::abs(var - 1.0) < 0.02);
}

TEST_CASE("rng uniform_int bounds") {
    Rng r(9);
    for (int i = 0; i < 1000; ++i) {
        int v = r.uniform_int(1, 200);
        CHECK(v >= 1);
        CHECK(v <= 200);
    }
}

TEST_CASE("add of zero tensor is identity") {
    Graph<float> g;
    Tensor<float> x({2, 3}, {1, 2, 3, 4, 5, 6});
    NodeId a = g.constant(x);
    NodeId z = g.constant(Tensor<float>::zeros({2, 3}));
    NodeId out = g.add(a, z);
    CHECK(g.val(out).data == x.data);
}

TEST_CASE("matmul identity") {
    Graph<float> g;
    NodeId eye = g.constant(Tensor<float>({2, 2}, {1, 0, 0, 1}));
    Tensor<float> b({2, 3}, {1, 2, 3, 4, 5, 6});
    NodeId out = g.matmul(eye, g.constant(b));
    CHECK(g.val(out).data == b.data);
}

TEST_CASE("softmax of constant vector") {
    Graph<float> g;
    NodeId x = g.constant(Tensor<float>::full({1, 5}, 3.7f));
    NodeId y = g.softmax_rows(x);
    for (float v : g.val(y).data) CHECK(v == doctest::Approx(0.2f).epsilon(1e-6));
}

TEST_CASE("backward: sum of squares analytic gradient") {
    Tensor<float> x({3}, {1, 2, 3});
    x.requires_grad = true;
    Graph<float> g;
    NodeId id = g.leaf(&x);
    g.backward(g.sum_sq(id));
    CHECK(x.grad == std::vector<float>{2, 4, 6});
}

TEST_CASE("backward: unreached parameter has zero grad") {
    Tensor<float> x({2}, {1, 2});
    Tensor<float> p({2}, {5, 5});
    x.requires_grad = p.requires_grad = true;
    Graph<float> g;
    NodeId xi = g.leaf(&x);
    g.leaf(&p);
    g.backward(g.sum_sq(xi));
    CHECK(p.grad.empty());  // never touched by backward
}

TEST_CASE("backward: errors") {
    Tensor<float> x({2, 2}, {1, 2, 3, 4});
    x.requires_grad = true;
    Graph<float> g;
    NodeId id = g.leaf(&x);
    CHECK_THROWS_AS(g.backward(id), Error);  // non-scalar
    Graph<float> g2;
    Tensor<float> y({1}, {2});
    y.requires_grad = true;
    NodeId s = g2.sum_sq(g2.leaf(&y));
    g2.backward(s);
    CHECK_THROWS_AS(g2.backward(s), Error);  // second call
}

TEST_CASE("gradient accumulates across uses") {
    Tensor<double> x({2}, {3.0, -1.0});
    x.requires_grad = true;
    Graph<double> g;
    NodeId id = g.leaf(&x);
    NodeId y = g.mul(id, id);  // x^2, x used twice
    g.backward(g.sum_sq(y));   // sum x^4 -> d/dx = 4x^3
    CHECK(x.grad[0] == doctest::Approx(4 * 27.0));
    CHECK(x.grad[1] == doctest::Approx(-4.0));
}

TEST_CASE("shape errors name the op") {
    Graph<float> g;
    NodeId a = g.constant(Tensor<float>::zeros({2, 3}));
    NodeId b = g.constant(Tensor<float>::zeros({3, 3}));
    try {
        g.add(a, b);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        std::string msg = e.what();
        CHECK(msg.find("add") != std::string::npos);
        CHECK(msg.find("(2,3)") != std::string::npos);
        CHECK(msg.find("(3,3)") != std::string::npos);
    }
}

TEST_CASE("finite differences: every op") {
    Rng rng(1234);
    auto check = [&](const char* name, double tol, std::vector<Tensor<double>> ins, auto&& build) {
        CAPTURE(name);
        double err = fd_check_op(ins, build);
        CHECK_MESSAGE(err < tol, name << " rel err " << err);
    };

    check("add", 1e-6, {randt({3, 4}, rng), randt({3, 4}, rng)},
          [](Graph<double>& g, const std::vector<NodeId>& in) { return g.add(in[0], in[1]); });
    check("sub", 1e-6, {randt({3, 4}, rng), randt({3, 4}, rng)},
          [](Graph<double>& g, const std::vector<NodeId>& in) { return g.sub(in[0], in[1]); });
    check("mul", 1e-6, {randt({3, 4}, rng), randt({3, 4}, rng)},
          [](Graph<double>& g, const std::vector<NodeId>& in) { return g.mul(in[0], in[1]); });
    check("mul_scalar", 1e-6, {randt({3, 4}, rng)},
          [](Graph<double>& g, const std::vector<NodeId>& in) { return g.mul_scalar(in[0], -1.7); });
    check("matmul", 1e-6, {randt({3, 4}, rng), randt({4, 5}, rng)},
          [](Graph<double>& g, const std::vector<NodeId>& in) { return g.matmul(in[0], in[1]); });
    check("matmul_nt", 1e-6, {randt({3, 4}, rng), randt({5, 4}, rng)},
          [](Graph<double>& g, const std::vector<NodeId>& in) { return g.matmul_nt(in[0], in[1]); });
    check("conv2d s1", 1e-5, {randt({2, 3, 5, 5}, rng), randt({4, 3, 3, 3}, rng)},
          [](Graph<double>& g, const std::vector<NodeId>& in) { return g.conv2d(in[0], in[1], 1, 1); });
    check("conv2d s2", 1e-5, {randt({2, 3, 6, 6}, rng), randt({4, 3, 3, 3}, rng)},
          [](Graph<double>& g, const std::vector<NodeId>& in) { return g.conv2d(in[0], in[1], 2, 1); });
    check("conv2d 1x1", 1e-5, {randt({2, 3, 4, 4}, rng), randt({5, 3, 1, 1}, rng)},
          [](Graph<double>& g, const std::vector<NodeId>& in) { return g.conv2d(in[0], in[1], 1, 0); });
    check("upsample", 1e-6, {randt({2, 3, 4, 4}, rng)},
          [](Graph<double>& g, const std::vector<NodeId>& in) { return g.upsample_nearest2x(in[0]); });
    check("group_norm", 1e-4, {randt({2, 4, 3, 3}, rng), randt({4}, rng), randt({4}, rng)},
          [](Graph<double>& g, const std::vector<NodeId>& in) {
              return g.group_norm(in[0], in[1], in[2], 2);
          });
    check("layer_norm", 1e-4, {randt({5, 6}, rng), randt({6}, rng), randt({6}, rng)},
          [](Graph<double>& g, const std::vector<NodeId>& in) {
              return g.layer_norm(in[0], in[1], in[2]);
          });
    check("silu", 1e-6, {randt({3, 4}, rng)},
          [](Graph<double>& g, const std::vector<NodeId>& in) { return g.silu(in[0]); });
    check("gelu", 1e-6, {randt({3, 4}, rng)},
          [](Graph<double>& g, const std::vector<NodeId>& in) { return g.gelu(in[0]); });
    check("softmax_rows", 1e-5, {randt({4, 6}, rng)},
          [](Graph<double>& g, const std::vector<NodeId>& in) { return g.softmax_rows(in[0]); });
    check("mean", 1e-6, {randt({3, 4}, rng)},
          [](Graph<double>& g, const std::vector<NodeId>& in) { return g.mean(in[0]); });
    check("sum_sq", 1e-6, {randt({3, 4}, rng)},
          [](Graph<double>& g, const std::vector<NodeId>& in) { return g.sum_sq(in[0]); });
    check("add_bias_c", 1e-6, {randt({2, 3, 4, 4}, rng), randt({3}, rng)},
          [](Graph<double>& g, const std::vector<NodeId>& in) { return g.add_bias_c(in[0], in[1]); });
    check("add_bias_nc", 1e-6, {randt({2, 3, 4, 4}, rng), randt({2, 3}, rng)},
          [](Graph<double>& g, const std::vector<NodeId>& in) { return g.add_bias_nc(in[0], in[1]); });
    check("add_rowvec", 1e-6, {randt({4, 5}, rng), randt({5}, rng)},
          [](Graph<double>& g, const std::vector<NodeId>& in) { return g.add_rowvec(in[0], in[1]); });
    check("add_tiled_rows", 1e-6, {randt({6, 4}, rng), randt({3, 4}, rng)},
          [](Graph<double>& g, const std::vector<NodeId>& in) {
              return g.add_tiled_rows(in[0], in[1]);
          });
    check("reshape", 1e-6, {randt({3, 4}, rng)},
          [](Graph<double>& g, const std::vector<NodeId>& in) { return g.reshape(in[0], {2, 6}); });
    check("concat_channels", 1e-6, {randt({2, 2, 3, 3}, rng), randt({2, 3, 3, 3}, rng)},
          [](Graph<double>& g, const std::vector<NodeId>& in) {
              return g.concat_channels(in[0], in[1]);
          });
    check("concat_rows", 1e-6, {randt({2, 4}, rng), randt({3, 4}, rng)},
          [](Graph<double>& g, const std::vector<NodeId>& in) {
              return g.concat_rows({in[0], in[1]});
          });
    check("concat_cols", 1e-6, {randt({3, 2}, rng), randt({3, 4}, rng)},
          [](Graph<double>& g, const std::vector<NodeId>& in) {
              return g.concat_cols({in[0], in[1]});
          });
    check("slice_rows", 1e-6, {randt({5, 4}, rng)},
          [](Graph<double>& g, const std::vector<NodeId>& in) { return g.slice_rows(in[0], 1, 3); });
    check("slice_cols", 1e-6, {randt({4, 6}, rng)},
          [](Graph<double>& g, const std::vector<NodeId>& in) { return g.slice_cols(in[0], 2, 3); });
    check("gather_rows", 1e-6, {randt({5, 3}, rng)},
          [](Graph<double>& g, const std::vector<NodeId>& in) {
              return g.gather_rows(in[0], {0, 2, 2, 4});
          });
    check("chw_to_tokens", 1e-6, {randt({2, 3, 2, 2}, rng)},
          [](Graph<double>& g, const std::vector<NodeId>& in) { return g.chw_to_tokens(in[0]); });
    check("tokens_to_chw", 1e-6, {randt({8, 3}, rng)},
          [](Graph<double>& g, const std::vector<NodeId>& in) {
              return g.tokens_to_chw(in[0], 2, 3, 2, 2);
          });
    check("attention block", 1e-4,
          {randt({4, 6}, rng), randt({5, 6}, rng), randt({5, 6}, rng)},
          [](Graph<double>& g, const std::vector<NodeId>& in) {
              NodeId scores = g.mul_scalar(g.matmul_nt(in[0], in[1]), 1.0 / std::sqrt(6.0));
              NodeId attn = g.softmax_rows(scores);
              return g.matmul(attn, in[2]);
          });
}

TEST_CASE("gradient_check: linear layer + mean loss under 1e-6") {
    Rng rng(77);
    ParameterStore<double> ps;
    ps.add("w", randt({4, 3}, rng));
    ps.add("b", randt({3}, rng));
    Tensor<double> x = randt({5, 4}, rng);
    auto build = [&x](Graph<double>& g, ParameterStore<double>& p) {
        NodeId xi = g.constant(x);
        NodeId h = g.add_rowvec(g.matmul(xi, p.use(g, "w")), p.use(g, "b"));
        return g.mean(g.mul(h, h));
    };
    GradCheckOptions opt;
    opt.coords_per_param = 64;
    auto report = gradient_check(ps, build, opt);
    CHECK(report.max_rel_err < 1e-6);
}

TEST_CASE("gradient_check: random 3-layer network under 1e-4") {
    Rng rng(88);
    ParameterStore<double> ps;
    ps.add("w1", randt({6, 8}, rng, 0.5));
    ps.add("b1", randt({8}, rng, 0.1));
    ps.add("w2", randt({8, 8}, rng, 0.5));
    ps.add("b2", randt({8}, rng, 0.1));
    ps.add("w3", randt({8, 2}, rng, 0.5));
    Tensor<double> x = randt({4, 6}, rng);
    auto build = [&x](Graph<double>& g, ParameterStore<double>& p) {
        NodeId h = g.constant(x);
        h = g.gelu(g.add_rowvec(g.matmul(h, p.use(g, "w1")), p.use(g, "b1")));
        h = g.silu(g.add_rowvec(g.matmul(h, p.use(g, "w2")), p.use(g, "b2")));
        h = g.matmul(h, p.use(g, "w3"));
        return g.mean(g.mul(h, h));
    };
    GradCheckOptions opt;
    opt.coords_per_param = 200;
    auto report = gradient_check(ps, build, opt);
    CHECK(report.max_rel_err < 1e-4);
}

TEST_CASE("gradient_check: frozen parameters excluded") {
    Rng rng(99);
    ParameterStore<double> ps;
    ps.add("w", randt({3, 3}, rng));
    ps.add("frozen", randt({3, 3}, rng)).set_trainable(false);
    auto build = [](Graph<double>& g, ParameterStore<double>& p) {
        NodeId h = g.matmul(p.use(g, "w"), p.use(g, "frozen"));
        return g.mean(h);
    };
    auto report = gradient_check(ps, build);
    CHECK(report.per_param.size() == 1);
    CHECK(report.find("w") != nullptr);
    CHECK(report.find("frozen") == nullptr);
}

TEST_CASE("sgd analytic step") {
    ParameterStore<float> ps;
    auto& p = ps.add("p", Tensor<float>({1}, {1.0f}));
    p.tensor.ensure_grad();
    p.tensor.grad[0] = 2.0f;
    Optimizer<float> opt(OptimizerKind::Sgd, 0.1);
    opt.step(ps);
    CHECK(p.tensor.data[0] == doctest::Approx(0.8f));
    CHECK(opt.step_count() == 1);
}

TEST_CASE("adam first step magnitude is about lr") {
    // hand recurrence: m=(1-b1)g, v=(1-b2)g^2, mhat=g, vhat=g^2
    // update = lr*g/(|g|+eps) = lr*sign(g) up to eps
    ParameterStore<float> ps;
    auto& p = ps.add("p", Tensor<float>({2}, {1.0f, -3.0f}));
    p.tensor.ensure_grad();
    p.tensor.grad = {0.5f, -2.0f};
    Optimizer<float> opt(OptimizerKind::Adam, 1e-3, 0.9, 0.999, 1e-8);
    opt.step(ps);
    CHECK(std::abs(p.tensor.data[0] - (1.0f - 1e-3f)) < 1e-7);
    CHECK(std::abs(p.tensor.data[1] - (-3.0f + 1e-3f)) < 1e-7);
}

TEST_CASE("non-trainable parameter is bit-identical after step") {
    ParameterStore<float> ps;
    auto& p = ps.add("p", Tensor<float>({3}, {0.1f, -0.2f, 0.3f}));
    p.set_trainable(false);
    p.tensor.ensure_grad();
    p.tensor.grad = {1, 1, 1};
    std::vector<float> before = p.tensor.data;
    Optimizer<float> opt(OptimizerKind::Adam, 0.5);
    opt.step(ps);
    CHECK(std::memcmp(before.data(), p.tensor.data.data(), 3 * sizeof(float)) == 0);
}

TEST_CASE("missing grad on trainable parameter errors") {
    ParameterStore<float> ps;
    ps.add("p", Tensor<float>({2}, {1, 2}));
    Optimizer<float> opt(OptimizerKind::Adam, 0.1);
    CHECK_THROWS_AS(opt.step(ps), Error);
}

TEST_CASE("row mask: unmasked rows bit-identical, masked row moves") {
    ParameterStore<float> ps;
    auto& p = ps.add("emb", Tensor<float>({3, 2}, {1, 2, 3, 4, 5, 6}));
    p.row_mask = {0, 1, 0};
    p.tensor.ensure_grad();
    p.tensor.grad = {9, 9, 9, 9, 9, 9};
    Optimizer<float> opt(OptimizerKind::Adam, 0.1);
    opt.step(ps);
    CHECK(p.tensor.data[0] == 1.0f);
    CHECK(p.tensor.data[1] == 2.0f);
    CHECK(p.tensor.data[2] != 3.0f);
    CHECK(p.tensor.data[3] != 4.0f);
    CHECK(p.tensor.data[4] == 5.0f);
    CHECK(p.tensor.data[5] == 6.0f);
}

TEST_CASE("optimizer determinism: same seed, same trajectory") {
    auto run = [](uint64_t seed) {
        Rng rng(seed);
        ParameterStore<float> ps;
        ps.add("w", Tensor<float>::randn({4, 4}, rng, 0.1));
        Optimizer<float> opt(OptimizerKind::Adam, 1e-2);
        Tensor<float> x = Tensor<float>::randn({4, 4}, rng);
        for (int step = 0; step < 20; ++step) {
            ps.clear_grads();
            Graph<float> g;
            NodeId h = g.matmul(g.constant(x), ps.use(g, "w"));
            g.backward(g.mean(g.mul(h, h)));
            opt.step(ps);
        }
        return ps.at("w").tensor.data;
    };
    auto a = run(5);
    auto b = run(5);
    CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0);
}
