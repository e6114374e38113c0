#pragma once

#include <vector>

#include "lab/rng.hpp"
#include "lab/schedule.hpp"
#include "lab/textpipe.hpp"

namespace lab {

// The latent codec of the training objective. At this scale it is the
// identity: diffusion runs directly in pixel space.
struct IdentityCodec {
    template <typename T>
    const Tensor<T>& encode(const Tensor<T>& x) const {
        return x;
    }
    template <typename T>
    const Tensor<T>& decode(const Tensor<T>& z) const {
        return z;
    }
};

template <typename T>
struct NoisedSampleT {
    Tensor<T> z_t;
    int t = 0;
    Tensor<T> epsilon;
};
using NoisedSample = NoisedSampleT<float>;

// z_t = sqrt(abar_t) z0 + sqrt(1-abar_t) eps with the given eps.
template <typename T>
NoisedSampleT<T> forward_noise_with(const NoiseSchedule& s, const Tensor<T>& z0, int t,
                                    Tensor<T> eps) {
    s.check_t(t);
    if (eps.shape != z0.shape) throw ShapeError("forward_noise: eps shape mismatch");
    NoisedSampleT<T> out;
    out.t = t;
    out.z_t = Tensor<T>(z0.shape);
    const T sc = static_cast<T>(s.scale[static_cast<size_t>(t)]);
    const T sg = static_cast<T>(s.sigma[static_cast<size_t>(t)]);
    for (size_t i = 0; i < z0.data.size(); ++i) out.z_t.data[i] = sc * z0.data[i] + sg * eps.data[i];
    out.epsilon = std::move(eps);
    return out;
}

template <typename T>
NoisedSampleT<T> forward_noise(const NoiseSchedule& s, const Tensor<T>& z0, int t, Rng& rng) {
    Tensor<T> eps(z0.shape);
    for (auto& v : eps.data) v = static_cast<T>(rng.normal());
    return forward_noise_with(s, z0, t, std::move(eps));
}

// ---------------------------------------------------------------------------
// training losses (built on a graph so gradients flow into the denoiser and
// the conditioning)
// ---------------------------------------------------------------------------

// Deterministic core of the objective: timesteps and noises supplied by the
// caller. Returns mean squared error between eps and the prediction over all
// elements of the batch.
template <typename T, typename Den>
NodeId ldm_loss_at(Graph<T>& g, const NoiseSchedule& s, const Den& den, const IdentityCodec& codec,
                   const std::vector<Tensor<T>>& images, const std::vector<int>& ts,
                   const std::vector<Tensor<T>>& eps, NodeId cond,
                   const std::vector<NodeId>& cond_masks) {
    const int N = static_cast<int>(images.size());
    if (N == 0) throw Error("ldm_loss: empty batch");
    if (static_cast<int>(ts.size()) != N || static_cast<int>(eps.size()) != N)
        throw Error("ldm_loss: ts/eps size mismatch");
    const auto& shp = images[0].shape;
    if (shp.size() != 3) throw ShapeError("ldm_loss: images must be (C,H,W)");
    Tensor<T> zbatch({N, shp[0], shp[1], shp[2]});
    Tensor<T> ebatch({N, shp[0], shp[1], shp[2]});
    const int64_t per = images[0].numel();
    for (int n = 0; n < N; ++n) {
        if (images[static_cast<size_t>(n)].shape != shp)
            throw ShapeError("ldm_loss: ragged image batch");
        auto noised = forward_noise_with(s, codec.encode(images[static_cast<size_t>(n)]),
                                         ts[static_cast<size_t>(n)], eps[static_cast<size_t>(n)]);
        std::copy(noised.z_t.data.begin(), noised.z_t.data.end(),
                  zbatch.data.begin() + static_cast<int64_t>(n) * per);
        std::copy(noised.epsilon.data.begin(), noised.epsilon.data.end(),
                  ebatch.data.begin() + static_cast<int64_t>(n) * per);
    }
    NodeId z = g.constant(std::move(zbatch));
    NodeId e = g.constant(std::move(ebatch));
    NodeId ehat = den(g, z, ts, cond, cond_masks);
    NodeId d = g.sub(ehat, e);
    return g.mean(g.mul(d, d));
}

// Draws per sample: first the timestep (uniform over [1,T]), then the noise.
template <typename T, typename Den>
NodeId ldm_loss(Graph<T>& g, const NoiseSchedule& s, const Den& den, const IdentityCodec& codec,
                const std::vector<Tensor<T>>& images, NodeId cond,
                const std::vector<NodeId>& cond_masks, Rng& rng) {
    std::vector<int> ts;
    std::vector<Tensor<T>> eps;
    for (const auto& img : images) {
        ts.push_back(rng.uniform_int(1, s.T));
        Tensor<T> e(img.shape);
        for (auto& v : e.data) v = static_cast<T>(rng.normal());
        eps.push_back(std::move(e));
    }
    return ldm_loss_at(g, s, den, codec, images, ts, eps, cond, cond_masks);
}

// Deterministic core of the augmented objective with caller-supplied draws
// for both terms.
template <typename T, typename Den>
NodeId prior_preservation_loss_at(Graph<T>& g, const NoiseSchedule& s, const Den& den,
                                  const IdentityCodec& codec, const std::vector<Tensor<T>>& target,
                                  const std::vector<int>& ts, const std::vector<Tensor<T>>& eps,
                                  NodeId target_cond, const std::vector<NodeId>& target_masks,
                                  const std::vector<Tensor<T>>& prior, const std::vector<int>& ts2,
                                  const std::vector<Tensor<T>>& eps2, NodeId prior_cond,
                                  const std::vector<NodeId>& prior_masks, double lambda) {
    if (lambda < 0) throw Error("prior_preservation_loss: lambda must be >= 0");
    NodeId t1 = ldm_loss_at(g, s, den, codec, target, ts, eps, target_cond, target_masks);
    if (lambda == 0.0) return t1;
    NodeId t2 = ldm_loss_at(g, s, den, codec, prior, ts2, eps2, prior_cond, prior_masks);
    return g.add(t1, g.mul_scalar(t2, lambda));
}

// Augmented objective: reconstruction term on the target pair plus
// lambda times the same term on the prior pair, both in eps-prediction form.
// Target draws happen first; with lambda == 0 the prior term is skipped
// entirely and the rng stream is left exactly where ldm_loss would leave it.
template <typename T, typename Den>
NodeId prior_preservation_loss(Graph<T>& g, const NoiseSchedule& s, const Den& den,
                               const IdentityCodec& codec, const std::vector<Tensor<T>>& target,
                               NodeId target_cond, const std::vector<NodeId>& target_masks,
                               const std::vector<Tensor<T>>& prior, NodeId prior_cond,
                               const std::vector<NodeId>& prior_masks, double lambda, Rng& rng) {
    if (lambda < 0) throw Error("prior_preservation_loss: lambda must be >= 0");
    NodeId t1 = ldm_loss(g, s, den, codec, target, target_cond, target_masks, rng);
    if (lambda == 0.0) return t1;
    if (prior.empty()) throw Error("prior_preservation_loss: prior batch empty with lambda > 0");
    NodeId t2 = ldm_loss(g, s, den, codec, prior, prior_cond, prior_masks, rng);
    return g.add(t1, g.mul_scalar(t2, lambda));
}

// ---------------------------------------------------------------------------
// samplers
// ---------------------------------------------------------------------------

enum class SamplerKind { Ddpm, Ddim };

inline SamplerKind sampler_kind_from(const std::string& s) {
    if (s == "ddpm") return SamplerKind::Ddpm;
    if (s == "ddim") return SamplerKind::Ddim;
    throw ConfigError("unknown sampler: " + s);
}

inline std::string sampler_kind_name(SamplerKind k) {
    return k == SamplerKind::Ddpm ? "ddpm" : "ddim";
}

// Evenly spaced increasing timestep subsequence ending at T.
inline std::vector<int> ddim_timesteps(int T, int steps) {
    if (steps < 1 || steps > T) throw Error("ddim: steps must be in [1,T]");
    std::vector<int> ts;
    int prev = 0;
    for (int i = 1; i <= steps; ++i) {
        int t = static_cast<int>((static_cast<int64_t>(T) * i) / steps);
        if (t <= prev) t = prev + 1;
        ts.push_back(t);
        prev = t;
    }
    return ts;  // ts.back() == T
}

// Ancestral (ddpm) or deterministic (ddim, eta = 0) sampling with a denoiser
// functor. For ddpm `steps` must equal T. The image is clamped to [-1,1] at
// the end only.
template <typename Den>
Tensor<float> sample(const NoiseSchedule& s, const Den& den, const Tensor<float>& cond_value,
                     const Tensor<float>& key_mask, SamplerKind kind, int steps,
                     const std::vector<int>& image_shape, Rng& rng) {
    if (kind == SamplerKind::Ddpm && steps != s.T)
        throw Error("ddpm: steps must equal schedule T");
    if (kind == SamplerKind::Ddim && (steps < 1 || steps > s.T))
        throw Error("ddim: invalid step count");
    Tensor<float> z(image_shape);
    for (auto& v : z.data) v = rng.normal_f();

    auto predict = [&](const Tensor<float>& zt, int t) {
        Graph<float> g(false);
        NodeId zi = g.constant(Tensor<float>({1, image_shape[0], image_shape[1], image_shape[2]},
                                             zt.data));
        NodeId ci = g.constant(cond_value);
        NodeId mi = g.constant(key_mask);
        NodeId out = den(g, zi, std::vector<int>{t}, ci, std::vector<NodeId>{mi});
        return Tensor<float>(zt.shape, g.val(out).data);
    };

    if (kind == SamplerKind::Ddpm) {
        for (int t = s.T; t >= 1; --t) {
            Tensor<float> ehat = predict(z, t);
            const double a = s.alpha[static_cast<size_t>(t)];
            const double bt = s.beta[static_cast<size_t>(t)];
            const double sg = s.sigma[static_cast<size_t>(t)];
            const double inv_sqrt_a = 1.0 / std::sqrt(a);
            const double coef = bt / sg;
            double noise_scale = 0.0;
            if (t > 1) {
                const double abar_prev = s.alpha_bar[static_cast<size_t>(t - 1)];
                const double abar = s.alpha_bar[static_cast<size_t>(t)];
                noise_scale = std::sqrt((1.0 - abar_prev) / (1.0 - abar) * bt);
            }
            for (size_t i = 0; i < z.data.size(); ++i) {
                double mean = inv_sqrt_a * (z.data[i] - coef * ehat.data[i]);
                if (t > 1) mean += noise_scale * rng.normal();
                z.data[i] = static_cast<float>(mean);
            }
        }
    } else {
        auto ts = ddim_timesteps(s.T, steps);
        for (int i = static_cast<int>(ts.size()) - 1; i >= 0; --i) {
            const int t = ts[static_cast<size_t>(i)];
            const int t_prev = i > 0 ? ts[static_cast<size_t>(i - 1)] : 0;
            Tensor<float> ehat = predict(z, t);
            const double sc = s.scale[static_cast<size_t>(t)];
            const double sg = s.sigma[static_cast<size_t>(t)];
            const double sc_p = s.scale[static_cast<size_t>(t_prev)];
            const double sg_p = s.sigma[static_cast<size_t>(t_prev)];
            for (size_t k = 0; k < z.data.size(); ++k) {
                const double x0 = (z.data[k] - sg * ehat.data[k]) / sc;
                z.data[k] = static_cast<float>(sc_p * x0 + sg_p * ehat.data[k]);
            }
        }
    }
    for (auto& v : z.data) v = std::min(1.0f, std::max(-1.0f, v));
    return z;
}

}  // namespace lab
