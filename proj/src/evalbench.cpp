#include "lab/evalbench.hpp"

#include <algorithm>
#include <cmath>

namespace lab {

// ---------------------------------------------------------------------------
// palettes and naming tables
// ---------------------------------------------------------------------------

namespace {

struct Rgb {
    float r, g, b;
};

const std::vector<std::pair<std::string, Rgb>>& color_table() {
    static const std::vector<std::pair<std::string, Rgb>> t = {
        {"red", {0.85f, 0.15f, 0.15f}},    {"blue", {0.20f, 0.30f, 0.85f}},
        {"green", {0.20f, 0.70f, 0.25f}},  {"yellow", {0.92f, 0.85f, 0.20f}},
        {"purple", {0.60f, 0.25f, 0.75f}}, {"orange", {0.95f, 0.55f, 0.15f}},
        {"pink", {0.95f, 0.60f, 0.75f}},   {"brown", {0.55f, 0.35f, 0.20f}},
        {"black", {0.12f, 0.12f, 0.12f}},  {"white", {0.95f, 0.95f, 0.95f}},
        {"gray", {0.55f, 0.55f, 0.55f}},   {"teal", {0.15f, 0.65f, 0.65f}},
    };
    return t;
}

uint64_t pixel_hash(uint64_t seed, int x, int y) {
    uint64_t h = seed ^ (static_cast<uint64_t>(x) * 0x9e3779b97f4a7c15ull) ^
                 (static_cast<uint64_t>(y) * 0xc2b2ae3d27d4eb4full);
    h ^= h >> 33;
    h *= 0xff51afd7ed558ccdull;
    h ^= h >> 33;
    h *= 0xc4ceb9fe1a85ec53ull;
    h ^= h >> 33;
    return h;
}

float pixel_noise(uint64_t seed, int x, int y) {
    return static_cast<float>(pixel_hash(seed, x, y) >> 11) * static_cast<float>(0x1.0p-53);
}

}  // namespace

const std::vector<std::string>& color_names() {
    static const std::vector<std::string> n = [] {
        std::vector<std::string> v;
        for (const auto& [name, _] : color_table()) v.push_back(name);
        return v;
    }();
    return n;
}

const std::vector<std::string>& context_names() {
    static const std::vector<std::string> n = {"plain", "beach", "jungle", "snow", "forest",
                                               "desert"};
    return n;
}

const std::vector<std::string>& texture_names() {
    static const std::vector<std::string> n = {"plain", "striped", "dotted", "checkered"};
    return n;
}

const std::vector<std::string>& class_names() {
    static const std::vector<std::string> n = {"backpack", "dog",  "cat",   "plushie",
                                               "teapot",   "boot", "clock", "vase"};
    return n;
}

std::string context_phrase(const std::string& context) {
    if (context == "plain") return "";
    if (context == "beach") return "on the beach";
    return "in the " + context;
}

static int context_id_of(const std::string& name) {
    const auto& names = context_names();
    for (size_t i = 0; i < names.size(); ++i)
        if (names[i] == name) return static_cast<int>(i);
    throw ConfigError("unknown context: " + name);
}

static int class_shape_id(const std::string& noun) {
    const auto& names = class_names();
    for (size_t i = 0; i < names.size(); ++i)
        if (names[i] == noun) return static_cast<int>(i);
    throw ConfigError("unknown object class: " + noun);
}

// ---------------------------------------------------------------------------
// rasterizer
// ---------------------------------------------------------------------------

Tensor<float> render_background(int context_id, uint64_t noise_seed, int size) {
    Tensor<float> img({3, size, size});
    auto px = [&](int c, int y, int x) -> float& {
        return img.data[static_cast<size_t>((c * size + y) * size + x)];
    };
    const int S = size;
    for (int y = 0; y < S; ++y) {
        const float fy = static_cast<float>(y) / (S - 1);
        for (int x = 0; x < S; ++x) {
            float nz = pixel_noise(noise_seed, x, y) - 0.5f;
            Rgb c{0, 0, 0};
            switch (context_id) {
                case 0:  // plain
                    c = {0.86f - 0.08f * fy, 0.86f - 0.08f * fy, 0.87f - 0.08f * fy};
                    c.r += nz * 0.006f;
                    c.g += nz * 0.006f;
                    c.b += nz * 0.006f;
                    break;
                case 1:  // beach
                    if (fy < 0.55f) {
                        const float t = fy / 0.55f;
                        c = {0.45f + 0.25f * t, 0.68f + 0.17f * t, 0.92f + 0.05f * t};
                    } else if (fy < 0.58f) {
                        c = {0.55f, 0.52f, 0.40f};
                    } else {
                        c = {0.87f + nz * 0.06f, 0.78f + nz * 0.06f, 0.55f + nz * 0.05f};
                    }
                    break;
                case 2: {  // jungle
                    const float m = pixel_noise(noise_seed, x / 3, y / 3);
                    c = {0.12f + 0.17f * m, 0.35f + 0.25f * m, 0.14f + 0.12f * m};
                    if (pixel_hash(noise_seed ^ 0xfeed, x / 4, 0) % 7 == 0 && y % 2 == 0)
                        c = {0.10f, 0.28f, 0.10f};
                    break;
                }
                case 3:  // snow
                    if (fy < 0.5f)
                        c = {0.74f + nz * 0.02f, 0.80f + nz * 0.02f, 0.90f};
                    else
                        c = {0.93f + nz * 0.03f, 0.94f + nz * 0.03f, 0.96f};
                    break;
                case 4: {  // forest
                    if (fy < 0.42f)
                        c = {0.58f, 0.69f, 0.78f};
                    else
                        c = {0.24f + nz * 0.05f, 0.44f + nz * 0.05f, 0.20f};
                    const uint64_t trunk = pixel_hash(noise_seed ^ 0xbeef, x / 3, 0) % 5;
                    if (trunk == 0 && x % 3 != 2 && fy > 0.2f) c = {0.40f, 0.28f, 0.15f};
                    break;
                }
                case 5:  // desert
                    if (fy < 0.45f) {
                        c = {0.63f, 0.79f, 0.94f};
                    } else {
                        const float dune =
                            0.5f + 0.5f * std::sin(static_cast<float>(x) * 0.35f + fy * 8.0f);
                        c = {0.88f - 0.10f * dune + nz * 0.03f, 0.74f - 0.09f * dune + nz * 0.03f,
                             0.50f - 0.07f * dune};
                    }
                    break;
                default:
                    throw ConfigError("render: bad context id");
            }
            px(0, y, x) = c.r;
            px(1, y, x) = c.g;
            px(2, y, x) = c.b;
        }
    }
    return img;
}

namespace {

// Region of an object pixel in unit coordinates: 0 none, 1 body, 2 secondary,
// 3 accent. u grows right, v grows down.
int shape_region(int shape_id, float u, float v) {
    auto in_ellipse = [](float u0, float v0, float ru, float rv, float u_, float v_) {
        const float du = (u_ - u0) / ru, dv = (v_ - v0) / rv;
        return du * du + dv * dv <= 1.0f;
    };
    auto in_rect = [](float u0, float v0, float u1, float v1, float u_, float v_) {
        return u_ >= u0 && u_ <= u1 && v_ >= v0 && v_ <= v1;
    };
    switch (shape_id) {
        case 0: {  // backpack
            if (in_rect(-0.30f, -1.32f, 0.30f, -1.08f, u, v)) return 2;             // handle
            if (in_rect(-0.72f, -1.25f, -0.54f, -0.9f, u, v)) return 2;             // strap
            if (in_rect(0.54f, -1.25f, 0.72f, -0.9f, u, v)) return 2;               // strap
            if (in_rect(-0.5f, 0.1f, 0.5f, 0.85f, u, v)) return 2;                  // pocket
            if (in_rect(-0.9f, -1.05f, 0.9f, 1.05f, u, v)) {
                // rounded corners
                const float cu = std::abs(u) - 0.6f, cv = std::abs(v) - 0.75f;
                if (cu > 0 && cv > 0 && cu * cu + cv * cv > 0.09f) return 0;
                return 1;
            }
            return 0;
        }
        case 1: {  // dog
            if (in_ellipse(0.85f, -0.45f, 0.06f, 0.06f, u, v)) return 3;            // eye
            if (in_ellipse(0.55f, -0.78f, 0.18f, 0.28f, u, v)) return 2;            // ear
            if (in_ellipse(0.72f, -0.35f, 0.42f, 0.38f, u, v)) return 1;            // head
            for (float lx : {-0.7f, -0.3f, 0.25f, 0.6f})
                if (in_rect(lx - 0.08f, 0.55f, lx + 0.08f, 1.1f, u, v)) return 2;   // legs
            if (in_rect(-1.25f, -0.45f, -0.95f, -0.05f, u, v)) return 2;            // tail
            if (in_ellipse(0.0f, 0.2f, 0.95f, 0.55f, u, v)) return 1;               // body
            return 0;
        }
        case 2: {  // cat
            if (in_ellipse(0.68f, -0.55f, 0.055f, 0.055f, u, v)) return 3;          // eye
            if (v < -0.62f && v > -1.05f && std::abs(u - 0.42f) < (v + 1.05f) * 0.45f) return 2;
            if (v < -0.62f && v > -1.05f && std::abs(u - 0.84f) < (v + 1.05f) * 0.45f) return 2;
            if (in_ellipse(0.62f, -0.45f, 0.36f, 0.34f, u, v)) return 1;             // head
            if (in_rect(-1.25f, -0.9f, -1.05f, 0.3f, u, v)) return 2;                // tail
            for (float lx : {-0.55f, -0.2f, 0.2f, 0.5f})
                if (in_rect(lx - 0.07f, 0.5f, lx + 0.07f, 1.05f, u, v)) return 2;    // legs
            if (in_ellipse(0.0f, 0.25f, 0.82f, 0.48f, u, v)) return 1;               // body
            return 0;
        }
        case 3: {  // plushie
            if (in_ellipse(-0.22f, -0.55f, 0.07f, 0.07f, u, v)) return 3;            // eyes
            if (in_ellipse(0.22f, -0.55f, 0.07f, 0.07f, u, v)) return 3;
            if (in_ellipse(-0.45f, -1.0f, 0.22f, 0.22f, u, v)) return 2;             // ears
            if (in_ellipse(0.45f, -1.0f, 0.22f, 0.22f, u, v)) return 2;
            if (in_ellipse(0.0f, -0.5f, 0.5f, 0.45f, u, v)) return 1;                // head
            if (in_ellipse(0.0f, 0.35f, 0.45f, 0.35f, u, v)) return 2;               // belly
            if (in_ellipse(0.0f, 0.3f, 0.8f, 0.72f, u, v)) return 1;                 // body
            return 0;
        }
        case 4: {  // teapot
            if (in_ellipse(0.0f, -0.75f, 0.09f, 0.09f, u, v)) return 3;              // knob
            if (in_ellipse(0.0f, -0.55f, 0.38f, 0.16f, u, v)) return 2;              // lid
            if (u > 0.7f && u < 1.25f && v > -0.45f && v < 0.1f &&
                std::abs(v + 0.18f - (u - 0.98f) * -0.5f) < 0.14f)
                return 2;                                                            // spout
            {
                const float du = (u + 1.0f) / 0.32f, dv = (v - 0.0f) / 0.42f;
                const float rr = du * du + dv * dv;
                if (rr <= 1.0f && rr >= 0.35f) return 2;                             // handle
            }
            if (in_ellipse(0.0f, 0.1f, 0.85f, 0.58f, u, v)) return 1;                // body
            return 0;
        }
        case 5: {  // boot
            if (in_rect(-0.6f, 0.68f, 0.95f, 0.85f, u, v)) return 2;                 // sole
            for (float ly : {-0.75f, -0.45f, -0.15f})
                if (in_rect(-0.45f, ly - 0.06f, 0.0f, ly + 0.06f, u, v)) return 3;   // laces
            if (in_rect(-0.6f, -1.0f, 0.1f, 0.7f, u, v)) return 1;                   // shaft
            if (in_rect(-0.6f, 0.2f, 0.95f, 0.7f, u, v)) return 1;                   // foot
            return 0;
        }
        case 6: {  // clock
            const float rr = u * u + v * v;
            if (rr < 0.012f) return 3;                                               // center
            if (std::abs(u) < 0.07f && v < -0.15f && v > -0.72f) return 3;           // minute hand
            if (std::abs(v - u * 0.55f) < 0.09f && u > 0.1f && u < 0.55f) return 3;  // hour hand
            for (float a : {0.0f, 1.5707963f, 3.1415926f, 4.712389f}) {
                const float tu = 0.72f * std::sin(a), tv = -0.72f * std::cos(a);
                if ((u - tu) * (u - tu) + (v - tv) * (v - tv) < 0.012f) return 2;    // ticks
            }
            if (rr <= 0.81f && rr >= 0.6f) return 2;                                 // ring
            if (rr <= 0.81f) return 1;                                               // face
            return 0;
        }
        case 7: {  // vase
            if (in_rect(-0.42f, -1.1f, 0.42f, -0.9f, u, v)) return 2;                // lip
            if (in_rect(-0.18f, -0.95f, 0.18f, -0.35f, u, v)) return 1;              // neck
            if (v >= -0.4f && v <= 1.0f) {
                const float w = 0.32f + 0.48f * (v + 0.4f) / 1.4f;
                if (std::abs(u) <= w) {
                    if (v > 0.25f && v < 0.45f) return 3;                            // band
                    return 1;
                }
            }
            return 0;
        }
        default:
            throw ConfigError("render: bad shape id");
    }
}

}  // namespace

Tensor<float> render_object(const SyntheticObjectSpec& spec, const RenderParams& rp, int size) {
    Tensor<float> img = render_background(rp.context_id, rp.noise_seed, size);
    const int S = size;
    const auto& colors = color_table();
    const Rgb body = colors[static_cast<size_t>(spec.palette_id)].second;
    const Rgb sec = colors[static_cast<size_t>(spec.palette_id2)].second;
    const Rgb acc = colors[static_cast<size_t>(spec.palette_id3)].second;
    const float body_lum = (body.r + body.g + body.b) / 3.0f;
    const Rgb mark = body_lum > 0.5f ? Rgb{0.05f, 0.05f, 0.08f} : Rgb{0.97f, 0.97f, 0.93f};

    const float cx = S * 0.5f + rp.dx;
    const float cy = S * 0.56f + rp.dy;
    const float r = S * 0.27f * rp.scale;

    // detail mark anchors in unit coordinates, chosen per shape so the glyph
    // always lands on a thick part of the body
    static const float anchors[8][4][2] = {
        {{-0.45f, -0.45f}, {0.45f, -0.45f}, {-0.45f, 0.5f}, {0.45f, 0.5f}},   // backpack
        {{-0.45f, 0.1f}, {0.35f, 0.25f}, {-0.1f, 0.35f}, {0.15f, 0.0f}},      // dog
        {{-0.4f, 0.2f}, {0.3f, 0.3f}, {-0.1f, 0.4f}, {0.1f, 0.1f}},           // cat
        {{-0.45f, 0.25f}, {0.45f, 0.25f}, {-0.2f, 0.65f}, {0.2f, 0.65f}},     // plushie
        {{-0.4f, 0.1f}, {0.4f, 0.1f}, {0.0f, 0.35f}, {0.0f, -0.15f}},         // teapot
        {{-0.3f, -0.6f}, {-0.25f, -0.1f}, {0.3f, 0.45f}, {-0.3f, 0.45f}},     // boot
        {{-0.35f, -0.3f}, {0.35f, -0.3f}, {-0.35f, 0.3f}, {0.3f, 0.35f}},     // clock
        {{-0.3f, 0.55f}, {0.3f, 0.55f}, {0.0f, 0.3f}, {0.0f, 0.75f}},         // vase
    };
    const float mark_r = 0.45f;

    auto px = [&](int c, int y, int x) -> float& {
        return img.data[static_cast<size_t>((c * S + y) * S + x)];
    };

    for (int y = 0; y < S; ++y) {
        for (int x = 0; x < S; ++x) {
            const float u = (static_cast<float>(x) + 0.5f - cx) / r;
            const float v = (static_cast<float>(y) + 0.5f - cy) / r;
            const int region = shape_region(spec.shape_id, u, v);
            if (region == 0) continue;
            Rgb c = region == 1 ? body : (region == 2 ? sec : acc);
            if (region == 1) {
                // texture on the body only
                switch (spec.texture_id) {
                    case 1:
                        if (y % 4 < 2) c = {c.r * 0.72f, c.g * 0.72f, c.b * 0.72f};
                        break;
                    case 2:
                        if (x % 4 < 2 && y % 4 < 2) c = {sec.r, sec.g, sec.b};
                        break;
                    case 3:
                        if ((x / 3 + y / 3) % 2 == 0) c = {c.r * 0.78f, c.g * 0.78f, c.b * 0.78f};
                        break;
                    default:
                        break;
                }
                // mild shading toward the lower edge
                c = {c.r * (1.0f - 0.10f * v * 0.5f), c.g * (1.0f - 0.10f * v * 0.5f),
                     c.b * (1.0f - 0.10f * v * 0.5f)};
            }
            if (spec.mark_glyph > 0) {
                const float gu = (u - anchors[spec.shape_id][spec.mark_pos][0]) / mark_r;
                const float gv = (v - anchors[spec.shape_id][spec.mark_pos][1]) / mark_r;
                if (gu >= -1.0f && gu <= 1.0f && gv >= -1.0f && gv <= 1.0f) {
                    // contrast backplate with the glyph shape in its own color
                    static const Rgb glyph_colors[8] = {
                        {0.90f, 0.10f, 0.10f}, {0.95f, 0.90f, 0.10f}, {0.10f, 0.20f, 0.90f},
                        {0.10f, 0.80f, 0.20f}, {0.90f, 0.10f, 0.85f}, {0.10f, 0.85f, 0.90f},
                        {0.95f, 0.50f, 0.05f}, {0.50f, 0.10f, 0.90f}};
                    bool inside = false;
                    switch (spec.mark_glyph) {
                        case 1: inside = std::abs(gu) < 0.34f || std::abs(gv) < 0.34f; break;
                        case 2: inside = gu * gu + gv * gv < 0.55f; break;
                        case 3: {
                            const float rr = gu * gu + gv * gv;
                            inside = rr < 0.9f && rr > 0.35f;
                            break;
                        }
                        case 4: inside = std::abs(gu) < 0.62f && std::abs(gv) < 0.62f; break;
                        case 5: inside = gv > -0.85f && std::abs(gu) <= (0.85f - gv) * 0.5f; break;
                        case 6: inside = std::abs(gv) < 0.36f; break;
                        case 7: inside = std::abs(gu) < 0.36f; break;
                        case 8: inside = gu < 0.1f && gv < 0.1f; break;
                        default: break;
                    }
                    c = inside ? glyph_colors[spec.mark_glyph - 1] : mark;
                }
            }
            px(0, y, x) = c.r;
            px(1, y, x) = c.g;
            px(2, y, x) = c.b;
        }
    }
    // map [0,1] -> [-1,1]
    for (auto& vch : img.data) vch = std::min(1.0f, std::max(-1.0f, vch * 2.0f - 1.0f));
    return img;
}

// ---------------------------------------------------------------------------
// corpus
// ---------------------------------------------------------------------------

namespace {

std::vector<std::string> base_word_list(const std::vector<std::string>& classes,
                                        const std::vector<std::string>& contexts) {
    std::vector<std::string> words = {"a", "photo", "of", "in", "on", "the"};
    for (const auto& c : classes) words.push_back(c);
    for (const auto& c : color_names()) words.push_back(c);
    for (const auto& c : contexts)
        for (const auto& w : split_words(context_phrase(c))) words.push_back(w);
    for (const auto& t : texture_names()) words.push_back(t);
    words.push_back("small");
    words.push_back("large");
    words.push_back("rare");
    words.push_back(kSksToken);
    return words;
}

}  // namespace

Corpus build_corpus(uint64_t seed, const std::vector<std::string>& classes, int instances_per_class,
                    const std::vector<std::string>& contexts, int train_per_class, int image_size) {
    Corpus corpus;
    corpus.vocab = Vocabulary::from_words(base_word_list(classes, contexts));
    Rng root(seed);

    const int n_colors = static_cast<int>(color_names().size());
    for (size_t ci = 0; ci < classes.size(); ++ci) {
        const std::string& noun = classes[ci];
        const int shape = class_shape_id(noun);
        Rng crng = root.child("corpus.train." + noun);
        for (int k = 0; k < train_per_class; ++k) {
            SyntheticObjectSpec spec;
            spec.class_noun = noun;
            spec.shape_id = shape;
            spec.palette_id = crng.uniform_int(0, n_colors - 1);
            spec.palette_id2 = (spec.palette_id + 1 + crng.uniform_int(0, n_colors - 2)) % n_colors;
            spec.palette_id3 = (spec.palette_id + 1 + crng.uniform_int(0, n_colors - 2)) % n_colors;
            spec.texture_id = crng.uniform_int(0, 5) >= 3 ? 0 : crng.uniform_int(0, 3);
            spec.mark_glyph = 0;
            RenderParams rp;
            rp.context_id = context_id_of(contexts[static_cast<size_t>(
                crng.uniform_int(0, static_cast<int>(contexts.size()) - 1))]);
            rp.dx = static_cast<float>(crng.uniform() * 4.0 - 2.0);
            rp.dy = static_cast<float>(crng.uniform() * 4.0 - 2.0);
            rp.scale = static_cast<float>(0.85 + crng.uniform() * 0.3);
            rp.noise_seed = crng.next_u64();

            const std::string color = color_names()[static_cast<size_t>(spec.palette_id)];
            const std::string ctx = context_names()[static_cast<size_t>(rp.context_id)];
            const std::string phrase = context_phrase(ctx);
            std::string caption;
            const int tmpl = crng.uniform_int(0, 19);
            if (tmpl < 5) {
                caption = "a photo of " + color + " " + noun;
            } else if (tmpl < 10) {
                caption = "a photo of " + noun + (phrase.empty() ? "" : " " + phrase);
            } else if (tmpl < 16) {
                caption = "a photo of " + color + " " + noun + (phrase.empty() ? "" : " " + phrase);
            } else if (tmpl == 16) {
                caption = "a photo of " + noun;
            } else if (tmpl == 17) {
                spec.texture_id = crng.uniform_int(1, 3);
                caption = "a photo of " +
                          texture_names()[static_cast<size_t>(spec.texture_id)] + " " + noun;
            } else if (tmpl == 18) {
                const bool small = crng.uniform_int(0, 1) == 0;
                rp.scale = small ? 0.68f : 1.32f;
                caption = std::string("a photo of ") + (small ? "small " : "large ") + noun;
            } else {
                caption = "a photo of rare " + noun;
            }
            corpus.train.push_back({render_object(spec, rp, image_size), caption});
        }

        Rng trng = root.child("corpus.targets." + noun);
        for (int k = 0; k < instances_per_class; ++k) {
            TargetSet ts;
            ts.class_noun = noun;
            ts.object_id = noun + std::to_string(k);
            SyntheticObjectSpec spec;
            spec.class_noun = noun;
            spec.shape_id = shape;
            spec.palette_id = trng.uniform_int(0, n_colors - 1);
            spec.palette_id2 = (spec.palette_id + 1 + trng.uniform_int(0, n_colors - 2)) % n_colors;
            spec.palette_id3 = (spec.palette_id + 1 + trng.uniform_int(0, n_colors - 2)) % n_colors;
            spec.texture_id = trng.uniform_int(0, 3);
            spec.mark_glyph = 1 + trng.uniform_int(0, 7);
            spec.mark_pos = trng.uniform_int(0, 3);
            ts.spec = spec;
            const int views = 4 + static_cast<int>((ci + static_cast<size_t>(k)) % 3);  // 4..6
            for (int v = 0; v < views; ++v) {
                RenderParams rp;
                rp.context_id = 0;  // plain studio background
                rp.dx = static_cast<float>(trng.uniform() * 2.0 - 1.0);
                rp.dy = static_cast<float>(trng.uniform() * 2.0 - 1.0);
                rp.scale = static_cast<float>(0.97 + trng.uniform() * 0.10);
                rp.noise_seed = trng.next_u64();
                ts.images.push_back(render_object(spec, rp, image_size));
            }
            corpus.targets.push_back(std::move(ts));
        }
    }
    return corpus;
}

// ---------------------------------------------------------------------------
// reference embedder
// ---------------------------------------------------------------------------

std::vector<double> embed_image(const Tensor<float>& img) {
    if (img.ndim() != 3 || img.dim(0) != 3 || img.dim(1) != img.dim(2) || img.dim(1) % 8 != 0)
        throw ShapeError("embed_image: expected (3,S,S) with S divisible by 8, got " +
                         shape_str(img.shape));
    const int S = img.dim(1);
    const int block = S / 8;
    const float* r = img.ptr();
    const float* g = r + static_cast<int64_t>(S) * S;
    const float* b = g + static_cast<int64_t>(S) * S;

    std::vector<double> lum(static_cast<size_t>(S) * S);
    for (int i = 0; i < S * S; ++i)
        lum[static_cast<size_t>(i)] = ((r[i] + g[i] + b[i]) / 3.0 + 1.0) * 0.5;

    std::vector<double> feat;
    feat.reserve(kEmbedDim);

    // 8x8 pooled luminance
    std::vector<double> lb(64, 0.0);
    for (int by = 0; by < 8; ++by)
        for (int bx = 0; bx < 8; ++bx) {
            double s = 0;
            for (int y = by * block; y < (by + 1) * block; ++y)
                for (int x = bx * block; x < (bx + 1) * block; ++x)
                    s += lum[static_cast<size_t>(y) * S + x];
            lb[static_cast<size_t>(by) * 8 + bx] = s / (block * block);
        }

    // 16-bin histogram per channel
    std::vector<double> ch(48, 0.0);
    const double inv_n = 1.0 / (S * S);
    const float* chans[3] = {r, g, b};
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < S * S; ++i) {
            int bin = static_cast<int>((chans[c][i] + 1.0f) * 0.5f * 16.0f);
            bin = std::min(15, std::max(0, bin));
            ch[static_cast<size_t>(c * 16 + bin)] += inv_n;
        }

    // 16-bin edge orientation histogram, magnitude weighted
    std::vector<double> eh(16, 0.0);
    double mag_sum = 0;
    for (int y = 1; y < S - 1; ++y)
        for (int x = 1; x < S - 1; ++x) {
            const double gx = lum[static_cast<size_t>(y) * S + x + 1] - lum[static_cast<size_t>(y) * S + x - 1];
            const double gy = lum[static_cast<size_t>(y + 1) * S + x] - lum[static_cast<size_t>(y - 1) * S + x];
            const double mag = std::sqrt(gx * gx + gy * gy);
            if (mag < 1e-12) continue;
            const double theta = std::atan2(gy, gx);  // [-pi, pi]
            int bin = static_cast<int>((theta + 3.14159265358979323846) / (2 * 3.14159265358979323846) * 16.0);
            bin = std::min(15, std::max(0, bin));
            eh[static_cast<size_t>(bin)] += mag;
            mag_sum += mag;
        }
    if (mag_sum > 1e-12)
        for (auto& v : eh) v /= mag_sum;

    auto append_block = [&feat](std::vector<double>& blk, double weight) {
        double n2 = 0;
        for (double v : blk) n2 += v * v;
        const double inv = n2 > 1e-24 ? weight / std::sqrt(n2) : 0.0;
        for (double v : blk) feat.push_back(v * inv);
    };
    append_block(lb, 1.0);
    append_block(ch, 1.0);
    append_block(eh, 0.5);

    double n2 = 0;
    for (double v : feat) n2 += v * v;
    const double inv = n2 > 1e-24 ? 1.0 / std::sqrt(n2) : 0.0;
    for (auto& v : feat) v *= inv;
    return feat;
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw Error("cosine: dimension mismatch");
    double dot = 0, na = 0, nb = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na <= 0 || nb <= 0) return 0.0;
    return dot / std::sqrt(na * nb);
}

// ---------------------------------------------------------------------------
// prompt suites and scoring
// ---------------------------------------------------------------------------

PromptSuite make_prompt_suite(const std::string& kind, const std::string& class_noun,
                              const std::string& identifier) {
    if (identifier.empty()) throw ConfigError("make_prompt_suite: empty identifier");
    const std::string x = class_noun.empty() ? identifier : identifier + " " + class_noun;
    PromptSuite suite;
    suite.kind = kind;
    if (kind == "simple") {
        suite.prompts = {"a photo of " + x};
        suite.images_per_prompt = 64;
        return suite;
    }
    if (kind != "diverse") throw ConfigError("make_prompt_suite: unknown kind " + kind);
    std::vector<std::string>& p = suite.prompts;
    for (const char* ctx : {"beach", "jungle", "snow", "forest", "desert"})
        p.push_back("a photo of " + x + " " + context_phrase(ctx));
    for (const char* col : {"red", "blue", "green", "yellow", "purple", "orange", "pink", "brown"})
        p.push_back("a photo of " + std::string(col) + " " + x);
    for (const char* tex : {"striped", "dotted", "checkered", "plain"})
        p.push_back("a photo of " + std::string(tex) + " " + x);
    p.push_back("a photo of small " + x);
    p.push_back("a photo of large " + x);
    p.push_back("a photo of " + x);
    p.push_back("a photo of red " + x + " on the beach");
    p.push_back("a photo of blue " + x + " in the jungle");
    p.push_back("a photo of white " + x + " in the snow");
    p.push_back("a photo of green " + x + " in the forest");
    p.push_back("a photo of yellow " + x + " in the desert");
    suite.images_per_prompt = 4;
    return suite;
}

SimilarityReport score_personalization(const Checkpoint& ckpt, const TargetSet& targets,
                                       const PromptSuite& suite, uint64_t seed,
                                       const EvalSettings& ev) {
    SimilarityReport rep;
    rep.strategy = ckpt.strategy;
    rep.checkpoint_step = ckpt.step;
    rep.suite_kind = suite.kind;

    std::vector<std::vector<double>> target_emb;
    for (const auto& img : targets.images) target_emb.push_back(embed_image(img));

    // encode all prompts up front (throws on unknown tokens, e.g. a missing
    // identifier in this checkpoint's vocabulary)
    std::vector<EncodedPrompt> encoded;
    for (const auto& prompt : suite.prompts) encoded.push_back(encode_prompt(ckpt, prompt));

    const int P = static_cast<int>(suite.prompts.size());
    const int K = suite.images_per_prompt;
    std::vector<double> scores(static_cast<size_t>(P) * K, 0.0);

    auto& params = const_cast<ParameterStore<float>&>(ckpt.params);
    auto& cfg = ckpt.config;
    NoiseSchedule sched = cfg.make_schedule();
    UNetDenoiser<float> den{&params, &const_cast<ModelConfig&>(cfg).unet};
    const std::vector<int> shape{cfg.unet.in_channels, cfg.unet.image_size, cfg.unet.image_size};
    Rng base(seed);

#pragma omp parallel for schedule(dynamic)
    for (int j = 0; j < P * K; ++j) {
        const int pi = j / K, k = j % K;
        Rng r = base.child(static_cast<uint64_t>(pi) * 1000003ull + static_cast<uint64_t>(k));
        Tensor<float> img = sample(sched, den, encoded[static_cast<size_t>(pi)].cond,
                                   encoded[static_cast<size_t>(pi)].mask, ev.sampler,
                                   ev.sampler_steps, shape, r);
        auto e = embed_image(img);
        double s = 0;
        for (const auto& te : target_emb) s += cosine(e, te);
        scores[static_cast<size_t>(j)] = s / static_cast<double>(target_emb.size());
    }

    double total = 0;
    for (int pi = 0; pi < P; ++pi) {
        SimilarityReport::Row row;
        row.prompt = suite.prompts[static_cast<size_t>(pi)];
        for (int k = 0; k < K; ++k) {
            const double s = scores[static_cast<size_t>(pi) * K + k];
            row.per_image.push_back(s);
            row.mean += s;
            total += s;
        }
        row.mean /= K;
        rep.rows.push_back(std::move(row));
    }
    rep.mean = total / static_cast<double>(P * K);
    return rep;
}

DriftReport score_language_drift(const Checkpoint& base, const Checkpoint& tuned,
                                 const std::string& class_noun, int n, uint64_t seed,
                                 const EvalSettings& ev, uint64_t tuned_seed) {
    if (n <= 0) throw Error("score_language_drift: sample count must be positive");
    const std::string prompt = "a photo of " + class_noun;
    EncodedPrompt eb = encode_prompt(base, prompt);
    EncodedPrompt et = encode_prompt(tuned, prompt);

    auto& bp = const_cast<ParameterStore<float>&>(base.params);
    auto& tp = const_cast<ParameterStore<float>&>(tuned.params);
    NoiseSchedule sb = base.config.make_schedule();
    NoiseSchedule st = tuned.config.make_schedule();
    UNetDenoiser<float> bden{&bp, &const_cast<ModelConfig&>(base.config).unet};
    UNetDenoiser<float> tden{&tp, &const_cast<ModelConfig&>(tuned.config).unet};
    const std::vector<int> shape{base.config.unet.in_channels, base.config.unet.image_size,
                                 base.config.unet.image_size};
    Rng broot(seed), troot(tuned_seed);

    std::vector<double> cos_i(static_cast<size_t>(n), 0.0);
#pragma omp parallel for schedule(dynamic)
    for (int i = 0; i < n; ++i) {
        Rng rb = broot.child(static_cast<uint64_t>(i));
        Rng rt = troot.child(static_cast<uint64_t>(i));
        Tensor<float> ib = sample(sb, bden, eb.cond, eb.mask, ev.sampler, ev.sampler_steps, shape, rb);
        Tensor<float> it = sample(st, tden, et.cond, et.mask, ev.sampler, ev.sampler_steps, shape, rt);
        cos_i[static_cast<size_t>(i)] = cosine(embed_image(ib), embed_image(it));
    }
    double mean = 0;
    for (double c : cos_i) mean += c;
    mean /= n;
    DriftReport rep;
    rep.class_noun = class_noun;
    rep.divergence = 1.0 - mean;
    rep.samples = n;
    return rep;
}

}  // namespace lab
