#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "lab/textpipe.hpp"

namespace lab {

// Small conditional U-Net. Three resolutions (S, S/2, S/4); residual blocks
// carry the time embedding, transformer blocks at the two lowest resolutions
// carry self-attention plus cross-attention into the text conditioning.
struct UNetConfig {
    int image_size = 32;
    int in_channels = 3;
    int out_channels = 3;
    int base_channels = 32;
    int mult1 = 1;   // channels at full resolution = base * mult1
    int mult2 = 2;   // channels at half and quarter resolution = base * mult2
    int d_text = 64;
    int temb_dim = 128;
    int heads = 4;
    int gn_groups = 8;
    int max_len = 16;

    int ch0() const { return base_channels * mult1; }
    int ch1() const { return base_channels * mult2; }
};

// Interleaved (sin, cos) features at geometrically spaced frequencies.
// t = 0 gives (0, 1, 0, 1, ...).
inline std::vector<double> time_embedding_features(int t, int dim) {
    if (dim % 2 != 0) throw ShapeError("time_embedding: dim must be even");
    std::vector<double> out(static_cast<size_t>(dim));
    const int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / half);
        out[static_cast<size_t>(2 * i)] = std::sin(t * freq);
        out[static_cast<size_t>(2 * i + 1)] = std::cos(t * freq);
    }
    return out;
}

namespace detail {

template <typename T>
void init_conv(ParameterStore<T>& ps, const std::string& prefix, int ci, int co, int k, Rng& rng,
               bool zero = false) {
    Rng r = rng.child(prefix + ".w");
    const double std_dev = zero ? 0.0 : 1.0 / std::sqrt(static_cast<double>(ci * k * k));
    ps.add(prefix + ".w", Tensor<T>::randn({co, ci, k, k}, r, std_dev));
    ps.add(prefix + ".b", Tensor<T>::zeros({co}));
}

// gn1 -> silu -> conv1 -> +temb -> gn2 -> silu -> conv2(zero init) -> +skip
template <typename T>
void init_res_block(ParameterStore<T>& ps, const std::string& prefix, int ci, int co, int temb_dim,
                    Rng& rng) {
    init_norm(ps, prefix + ".gn1", ci);
    init_conv(ps, prefix + ".conv1", ci, co, 3, rng);
    init_linear(ps, prefix + ".temb", temb_dim, co, rng);
    init_norm(ps, prefix + ".gn2", co);
    init_conv(ps, prefix + ".conv2", co, co, 3, rng, /*zero=*/true);
    if (ci != co) init_conv(ps, prefix + ".skip", ci, co, 1, rng);
}

template <typename T>
void init_attn_block(ParameterStore<T>& ps, const std::string& prefix, int c, int d_text,
                     int ff_mult, Rng& rng) {
    init_norm(ps, prefix + ".gn", c);
    init_attn(ps, prefix + ".self", c, c, c, rng);
    init_norm(ps, prefix + ".ln_c", c);
    init_attn(ps, prefix + ".cross", c, d_text, c, rng);
    init_norm(ps, prefix + ".ln_f", c);
    init_linear(ps, prefix + ".ff1", c, c * ff_mult, rng);
    init_linear(ps, prefix + ".ff2", c * ff_mult, c, rng);
}

template <typename T>
NodeId res_block(Graph<T>& g, ParameterStore<T>& ps, const std::string& prefix, NodeId x,
                 NodeId temb_silu, const UNetConfig& cfg, int ci, int co) {
    NodeId h = g.group_norm(x, ps.use(g, prefix + ".gn1.gamma"), ps.use(g, prefix + ".gn1.beta"),
                            cfg.gn_groups);
    h = g.conv2d(g.silu(h), ps.use(g, prefix + ".conv1.w"), 1, 1);
    h = g.add_bias_c(h, ps.use(g, prefix + ".conv1.b"));
    NodeId tb = g.add_rowvec(g.matmul(temb_silu, ps.use(g, prefix + ".temb.w")),
                             ps.use(g, prefix + ".temb.b"));
    h = g.add_bias_nc(h, tb);
    h = g.group_norm(h, ps.use(g, prefix + ".gn2.gamma"), ps.use(g, prefix + ".gn2.beta"),
                     cfg.gn_groups);
    h = g.conv2d(g.silu(h), ps.use(g, prefix + ".conv2.w"), 1, 1);
    h = g.add_bias_c(h, ps.use(g, prefix + ".conv2.b"));
    NodeId skip = x;
    if (ci != co) {
        skip = g.conv2d(x, ps.use(g, prefix + ".skip.w"), 1, 0);
        skip = g.add_bias_c(skip, ps.use(g, prefix + ".skip.b"));
    }
    return g.add(h, skip);
}

template <typename T>
NodeId attn_block(Graph<T>& g, ParameterStore<T>& ps, const std::string& prefix, NodeId x,
                  NodeId cond, const std::vector<NodeId>& cond_masks, const UNetConfig& cfg) {
    const auto& xs = g.shape(x);
    const int N = xs[0], C = xs[1], H = xs[2], W = xs[3];
    const int HW = H * W;
    const int L = cfg.max_len;
    NodeId tokens = g.chw_to_tokens(x);
    NodeId normed = g.chw_to_tokens(g.group_norm(x, ps.use(g, prefix + ".gn.gamma"),
                                                 ps.use(g, prefix + ".gn.beta"), cfg.gn_groups));
    auto self_p = lease_attn(g, ps, prefix + ".self");
    std::vector<NodeId> self_out;
    for (int n = 0; n < N; ++n) {
        NodeId tn = g.slice_rows(normed, n * HW, HW);
        self_out.push_back(mha(g, tn, tn, self_p, cfg.heads, -1));
    }
    NodeId h = g.add(tokens, g.concat_rows(self_out));

    NodeId hc = g.layer_norm(h, ps.use(g, prefix + ".ln_c.gamma"), ps.use(g, prefix + ".ln_c.beta"));
    auto cross_p = lease_attn(g, ps, prefix + ".cross");
    std::vector<NodeId> cross_out;
    for (int n = 0; n < N; ++n) {
        NodeId qn = g.slice_rows(hc, n * HW, HW);
        NodeId kvn = g.slice_rows(cond, n * L, L);
        cross_out.push_back(
            mha(g, qn, kvn, cross_p, cfg.heads, cond_masks[static_cast<size_t>(n)]));
    }
    h = g.add(h, g.concat_rows(cross_out));

    NodeId hf = g.layer_norm(h, ps.use(g, prefix + ".ln_f.gamma"), ps.use(g, prefix + ".ln_f.beta"));
    hf = g.gelu(g.add_rowvec(g.matmul(hf, ps.use(g, prefix + ".ff1.w")), ps.use(g, prefix + ".ff1.b")));
    hf = g.add_rowvec(g.matmul(hf, ps.use(g, prefix + ".ff2.w")), ps.use(g, prefix + ".ff2.b"));
    h = g.add(h, hf);
    return g.tokens_to_chw(h, N, C, H, W);
}

}  // namespace detail

// Creates all "unet.*" parameters.
template <typename T>
void init_unet(ParameterStore<T>& ps, const UNetConfig& cfg, Rng& rng) {
    using namespace detail;
    const int c0 = cfg.ch0(), c1 = cfg.ch1();
    init_conv(ps, "unet.conv_in", cfg.in_channels, c0, 3, rng);
    init_linear(ps, "unet.temb.mlp1", cfg.temb_dim, cfg.temb_dim, rng);
    init_linear(ps, "unet.temb.mlp2", cfg.temb_dim, cfg.temb_dim, rng);
    init_res_block(ps, "unet.enc0.res", c0, c0, cfg.temb_dim, rng);
    init_conv(ps, "unet.enc0.down", c0, c0, 3, rng);
    init_res_block(ps, "unet.enc1.res", c0, c1, cfg.temb_dim, rng);
    init_attn_block(ps, "unet.enc1.attn", c1, cfg.d_text, 2, rng);
    init_conv(ps, "unet.enc1.down", c1, c1, 3, rng);
    init_res_block(ps, "unet.mid.res1", c1, c1, cfg.temb_dim, rng);
    init_attn_block(ps, "unet.mid.attn", c1, cfg.d_text, 2, rng);
    init_res_block(ps, "unet.mid.res2", c1, c1, cfg.temb_dim, rng);
    init_conv(ps, "unet.dec1.up", c1, c1, 3, rng);
    init_res_block(ps, "unet.dec1.res", c1 + c1, c1, cfg.temb_dim, rng);
    init_attn_block(ps, "unet.dec1.attn", c1, cfg.d_text, 2, rng);
    init_conv(ps, "unet.dec0.up", c1, c0, 3, rng);
    init_res_block(ps, "unet.dec0.res", c0 + c0, c0, cfg.temb_dim, rng);
    init_norm(ps, "unet.out.gn", c0);
    init_conv(ps, "unet.out.conv", c0, cfg.out_channels, 3, rng);
}

// Noise prediction: z [N,C,S,S], one timestep per sample, cond [N*L,d_text]
// with per-sample additive key masks.
template <typename T>
NodeId unet_forward(Graph<T>& g, ParameterStore<T>& ps, const UNetConfig& cfg, NodeId z,
                    const std::vector<int>& timesteps, NodeId cond,
                    const std::vector<NodeId>& cond_masks) {
    using namespace detail;
    const auto& zs = g.shape(z);
    if (zs.size() != 4 || zs[1] != cfg.in_channels)
        throw ShapeError("unet_forward: bad input shape " + shape_str(zs));
    if (zs[2] % 4 != 0 || zs[3] % 4 != 0)
        throw ShapeError("unet_forward: spatial dims must be divisible by 4, got " + shape_str(zs));
    const int N = zs[0];
    if (static_cast<int>(timesteps.size()) != N)
        throw ShapeError("unet_forward: need one timestep per sample");
    if (g.shape(cond)[0] != N * cfg.max_len || g.shape(cond)[1] != cfg.d_text)
        throw ShapeError("unet_forward: conditioning shape " + shape_str(g.shape(cond)) +
                         " does not match N*L x d_text");

    Tensor<T> tfeat({N, cfg.temb_dim});
    for (int n = 0; n < N; ++n) {
        auto f = time_embedding_features(timesteps[static_cast<size_t>(n)], cfg.temb_dim);
        for (int i = 0; i < cfg.temb_dim; ++i)
            tfeat.data[static_cast<size_t>(n) * cfg.temb_dim + i] = static_cast<T>(f[static_cast<size_t>(i)]);
    }
    NodeId temb = g.add_rowvec(g.matmul(g.constant(std::move(tfeat)), ps.use(g, "unet.temb.mlp1.w")),
                               ps.use(g, "unet.temb.mlp1.b"));
    temb = g.add_rowvec(g.matmul(g.silu(temb), ps.use(g, "unet.temb.mlp2.w")),
                        ps.use(g, "unet.temb.mlp2.b"));
    NodeId temb_silu = g.silu(temb);

    const int c0 = cfg.ch0(), c1 = cfg.ch1();
    NodeId h = g.conv2d(z, ps.use(g, "unet.conv_in.w"), 1, 1);
    h = g.add_bias_c(h, ps.use(g, "unet.conv_in.b"));
    NodeId skip_a = res_block(g, ps, "unet.enc0.res", h, temb_silu, cfg, c0, c0);

    h = g.conv2d(skip_a, ps.use(g, "unet.enc0.down.w"), 2, 1);
    h = g.add_bias_c(h, ps.use(g, "unet.enc0.down.b"));
    h = res_block(g, ps, "unet.enc1.res", h, temb_silu, cfg, c0, c1);
    NodeId skip_b = attn_block(g, ps, "unet.enc1.attn", h, cond, cond_masks, cfg);

    h = g.conv2d(skip_b, ps.use(g, "unet.enc1.down.w"), 2, 1);
    h = g.add_bias_c(h, ps.use(g, "unet.enc1.down.b"));
    h = res_block(g, ps, "unet.mid.res1", h, temb_silu, cfg, c1, c1);
    h = attn_block(g, ps, "unet.mid.attn", h, cond, cond_masks, cfg);
    h = res_block(g, ps, "unet.mid.res2", h, temb_silu, cfg, c1, c1);

    h = g.upsample_nearest2x(h);
    h = g.conv2d(h, ps.use(g, "unet.dec1.up.w"), 1, 1);
    h = g.add_bias_c(h, ps.use(g, "unet.dec1.up.b"));
    h = res_block(g, ps, "unet.dec1.res", g.concat_channels(h, skip_b), temb_silu, cfg, c1 + c1, c1);
    h = attn_block(g, ps, "unet.dec1.attn", h, cond, cond_masks, cfg);

    h = g.upsample_nearest2x(h);
    h = g.conv2d(h, ps.use(g, "unet.dec0.up.w"), 1, 1);
    h = g.add_bias_c(h, ps.use(g, "unet.dec0.up.b"));
    h = res_block(g, ps, "unet.dec0.res", g.concat_channels(h, skip_a), temb_silu, cfg, c0 + c0, c0);

    h = g.group_norm(h, ps.use(g, "unet.out.gn.gamma"), ps.use(g, "unet.out.gn.beta"), cfg.gn_groups);
    h = g.conv2d(g.silu(h), ps.use(g, "unet.out.conv.w"), 1, 1);
    return g.add_bias_c(h, ps.use(g, "unet.out.conv.b"));
}

// Denoiser functor bound to a parameter store, the shape the diffusion losses
// and samplers consume.
template <typename T>
struct UNetDenoiser {
    ParameterStore<T>* ps;
    const UNetConfig* cfg;

    NodeId operator()(Graph<T>& g, NodeId z, const std::vector<int>& ts, NodeId cond,
                      const std::vector<NodeId>& masks) const {
        return unet_forward(g, *ps, *cfg, z, ts, cond, masks);
    }
};

}  // namespace lab
