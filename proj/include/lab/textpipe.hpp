#pragma once

#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "lab/params.hpp"
#include "lab/rng.hpp"

namespace lab {

// The pseudo-token added by the two-stage trainer, and the noun pseudo-token
// added by textual inversion. Both are single space-delimited vocabulary
// entries; the angle brackets are UTF-8 U+27E8/U+27E9.
inline const std::string kRareToken = "\xE2\x9F\xA8rare\xE2\x9F\xA9";
inline const std::string kTiToken = "s*";
// Rare identifier Dreambooth reuses without growing the vocabulary.
inline const std::string kSksToken = "sks";

struct Vocabulary {
    std::vector<std::string> id_to_token;
    std::unordered_map<std::string, int> token_to_id;
    int pad_id = 0, bos_id = 1, eos_id = 2;

    static constexpr const char* kPad = "<pad>";
    static constexpr const char* kBos = "<bos>";
    static constexpr const char* kEos = "<eos>";

    static Vocabulary from_words(const std::vector<std::string>& words) {
        Vocabulary v;
        v.append(kPad);
        v.append(kBos);
        v.append(kEos);
        for (const auto& w : words) {
            if (!v.has(w)) v.append(w);
        }
        return v;
    }

    int append(const std::string& tok) {
        if (has(tok)) throw VocabError("vocabulary already contains \"" + tok + "\"");
        int id = static_cast<int>(id_to_token.size());
        id_to_token.push_back(tok);
        token_to_id.emplace(tok, id);
        return id;
    }

    bool has(const std::string& tok) const { return token_to_id.count(tok) != 0; }

    int id(const std::string& tok) const {
        auto it = token_to_id.find(tok);
        if (it == token_to_id.end()) throw VocabError("unknown token \"" + tok + "\"");
        return it->second;
    }

    const std::string& token(int id) const { return id_to_token.at(static_cast<size_t>(id)); }
    int size() const { return static_cast<int>(id_to_token.size()); }

    uint64_t hash() const {
        uint64_t h = 0xcbf29ce484222325ull;
        for (const auto& t : id_to_token) {
            h = fnv1a64(t.data(), t.size(), h);
            h = fnv1a64("\n", 1, h);
        }
        return h;
    }

    // One token per line; the line number is the id.
    void save(const std::string& path) const {
        std::ofstream f(path, std::ios::binary);
        if (!f) throw IoError("cannot write vocabulary " + path);
        for (const auto& t : id_to_token) f << t << "\n";
    }

    static Vocabulary load(const std::string& path) {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw IoError("cannot read vocabulary " + path);
        Vocabulary v;
        std::string line;
        while (std::getline(f, line)) {
            if (!line.empty() && line.back() == '\r') line.pop_back();
            v.id_to_token.push_back(line);
            v.token_to_id.emplace(line, static_cast<int>(v.id_to_token.size()) - 1);
        }
        if (v.size() < 3 || v.token(0) != kPad || v.token(1) != kBos || v.token(2) != kEos)
            throw IoError("vocabulary " + path + " missing special tokens");
        return v;
    }
};

// Fixed-length id sequence: bos, words, eos, then padding. `length` counts
// the meaningful prefix including bos/eos.
struct TokenSequence {
    std::vector<int> ids;
    int length = 0;
};

inline std::vector<std::string> split_words(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream is(text);
    std::string w;
    while (is >> w) out.push_back(w);
    return out;
}

inline TokenSequence tokenize(const Vocabulary& v, const std::string& text, int max_len) {
    auto words = split_words(text);
    if (static_cast<int>(words.size()) + 2 > max_len)
        throw VocabError("prompt of " + std::to_string(words.size()) +
                         " words exceeds sequence length " + std::to_string(max_len));
    TokenSequence seq;
    seq.ids.assign(static_cast<size_t>(max_len), v.pad_id);
    int pos = 0;
    seq.ids[static_cast<size_t>(pos++)] = v.bos_id;
    for (const auto& w : words) seq.ids[static_cast<size_t>(pos++)] = v.id(w);
    seq.ids[static_cast<size_t>(pos++)] = v.eos_id;
    seq.length = pos;
    return seq;
}

inline std::string detokenize(const Vocabulary& v, const TokenSequence& seq) {
    std::string out;
    for (int i = 1; i + 1 < seq.length; ++i) {
        if (!out.empty()) out += " ";
        out += v.token(seq.ids[static_cast<size_t>(i)]);
    }
    return out;
}

// Template with optional {ADJ} and {CONTEXT} slots and a required {NOUN}.
// Unbound optional slots vanish along with the extra whitespace.
struct PromptTemplate {
    std::string text;

    std::string render(const std::string& adj, const std::string& noun,
                       const std::string& context = "") const {
        std::string s = text;
        replace_slot(s, "{ADJ}", adj);
        replace_slot(s, "{NOUN}", noun);
        replace_slot(s, "{CONTEXT}", context);
        // collapse whitespace left by empty slots
        auto words = split_words(s);
        std::string out;
        for (const auto& w : words) {
            if (!out.empty()) out += " ";
            out += w;
        }
        return out;
    }

   private:
    static void replace_slot(std::string& s, const std::string& slot, const std::string& val) {
        size_t pos;
        while ((pos = s.find(slot)) != std::string::npos) s.replace(pos, slot.size(), val);
    }
};

// Grows the vocabulary by one entry whose embedding row is a copy of an
// existing word's row. The new row trains independently of its source.
template <typename T>
int add_token(Vocabulary& vocab, Parameter<T>& embedding, const std::string& surface,
              const std::string& init_from) {
    if (vocab.has(surface)) throw VocabError("add_token: \"" + surface + "\" already present");
    const int src = vocab.id(init_from);
    const int d = embedding.tensor.shape.at(1);
    const int new_id = vocab.append(surface);
    if (new_id != embedding.tensor.shape.at(0))
        throw Error("add_token: embedding table out of sync with vocabulary");
    embedding.tensor.shape[0] = new_id + 1;
    embedding.tensor.data.insert(embedding.tensor.data.end(),
                                 embedding.tensor.data.begin() + static_cast<int64_t>(src) * d,
                                 embedding.tensor.data.begin() + static_cast<int64_t>(src + 1) * d);
    embedding.tensor.clear_grad();
    if (!embedding.row_mask.empty()) embedding.row_mask.push_back(0);
    return new_id;
}

// ---------------------------------------------------------------------------
// text encoder
// ---------------------------------------------------------------------------

struct TextEncoderConfig {
    int d_text = 64;
    int layers = 2;
    int heads = 4;
    int max_len = 16;
    int ff_mult = 4;
};

inline const std::string kEmbeddingParam = "text.token_embedding";

// Additive key mask: 0 for attendable positions, large negative for padding.
template <typename T>
Tensor<T> key_mask_tensor(const TokenSequence& seq) {
    Tensor<T> m({static_cast<int>(seq.ids.size())});
    for (size_t i = 0; i < seq.ids.size(); ++i)
        m.data[i] = static_cast<int>(i) < seq.length ? T(0) : T(-1e30);
    return m;
}

template <typename T>
struct AttnParamIds {
    NodeId wq, bq, wk, bk, wv, bv, wo, bo;
};

template <typename T>
AttnParamIds<T> lease_attn(Graph<T>& g, ParameterStore<T>& ps, const std::string& prefix) {
    return {ps.use(g, prefix + ".wq"), ps.use(g, prefix + ".bq"), ps.use(g, prefix + ".wk"),
            ps.use(g, prefix + ".bk"), ps.use(g, prefix + ".wv"), ps.use(g, prefix + ".bv"),
            ps.use(g, prefix + ".wo"), ps.use(g, prefix + ".bo")};
}

// Multi-head attention over one sample: q_in [Sq,Dq], kv_in [Sk,Dkv].
// key_mask (additive, [Sk]) may be -1 for none.
template <typename T>
NodeId mha(Graph<T>& g, NodeId q_in, NodeId kv_in, const AttnParamIds<T>& p, int heads,
           NodeId key_mask) {
    NodeId q = g.add_rowvec(g.matmul(q_in, p.wq), p.bq);
    NodeId k = g.add_rowvec(g.matmul(kv_in, p.wk), p.bk);
    NodeId v = g.add_rowvec(g.matmul(kv_in, p.wv), p.bv);
    const int model_d = g.shape(q)[1];
    if (model_d % heads != 0) throw ShapeError("mha: model dim not divisible by heads");
    const int dh = model_d / heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<NodeId> outs;
    outs.reserve(static_cast<size_t>(heads));
    for (int h = 0; h < heads; ++h) {
        NodeId qh = g.slice_cols(q, h * dh, dh);
        NodeId kh = g.slice_cols(k, h * dh, dh);
        NodeId vh = g.slice_cols(v, h * dh, dh);
        NodeId scores = g.mul_scalar(g.matmul_nt(qh, kh), inv_sqrt);
        if (key_mask >= 0) scores = g.add_rowvec(scores, key_mask);
        outs.push_back(g.matmul(g.softmax_rows(scores), vh));
    }
    return g.add_rowvec(g.matmul(g.concat_cols(outs), p.wo), p.bo);
}

template <typename T>
void init_linear(ParameterStore<T>& ps, const std::string& prefix, int fan_in, int fan_out,
                 Rng& rng, bool zero = false) {
    Rng r = rng.child(prefix + ".w");
    double std_dev = zero ? 0.0 : 1.0 / std::sqrt(static_cast<double>(fan_in));
    ps.add(prefix + ".w", Tensor<T>::randn({fan_in, fan_out}, r, std_dev));
    ps.add(prefix + ".b", Tensor<T>::zeros({fan_out}));
}

template <typename T>
void init_attn(ParameterStore<T>& ps, const std::string& prefix, int dq, int dkv, int d_model,
               Rng& rng) {
    auto add_pair = [&](const std::string& wn, const std::string& bn, int fi, int fo) {
        Rng r = rng.child(prefix + "." + wn);
        ps.add(prefix + "." + wn,
               Tensor<T>::randn({fi, fo}, r, 1.0 / std::sqrt(static_cast<double>(fi))));
        ps.add(prefix + "." + bn, Tensor<T>::zeros({fo}));
    };
    add_pair("wq", "bq", dq, d_model);
    add_pair("wk", "bk", dkv, d_model);
    add_pair("wv", "bv", dkv, d_model);
    add_pair("wo", "bo", d_model, d_model);
}

template <typename T>
void init_norm(ParameterStore<T>& ps, const std::string& prefix, int c) {
    ps.add(prefix + ".gamma", Tensor<T>::full({c}, T(1)));
    ps.add(prefix + ".beta", Tensor<T>::zeros({c}));
}

// Creates all "text.*" parameters, including the token embedding table.
template <typename T>
void init_text_encoder(ParameterStore<T>& ps, const TextEncoderConfig& cfg, int vocab_size,
                       Rng& rng) {
    {
        Rng r = rng.child(kEmbeddingParam);
        ps.add(kEmbeddingParam, Tensor<T>::randn({vocab_size, cfg.d_text}, r, 0.05));
    }
    {
        Rng r = rng.child("text.pos_embedding");
        ps.add("text.pos_embedding", Tensor<T>::randn({cfg.max_len, cfg.d_text}, r, 0.05));
    }
    for (int l = 0; l < cfg.layers; ++l) {
        const std::string base = "text.layer" + std::to_string(l);
        init_norm(ps, base + ".ln1", cfg.d_text);
        init_attn(ps, base + ".attn", cfg.d_text, cfg.d_text, cfg.d_text, rng);
        init_norm(ps, base + ".ln2", cfg.d_text);
        init_linear(ps, base + ".ff1", cfg.d_text, cfg.d_text * cfg.ff_mult, rng);
        init_linear(ps, base + ".ff2", cfg.d_text * cfg.ff_mult, cfg.d_text, rng);
    }
    init_norm(ps, "text.ln_f", cfg.d_text);
}

struct EncodedText {
    NodeId cond = -1;                // [N*L, d_text]
    std::vector<NodeId> key_masks;   // one [L] additive mask per sample
};

// Pre-LN transformer over a batch of token sequences. Self-attention masks
// padding keys; output rows at padded positions are zeroed so nothing
// downstream can depend on them.
template <typename T>
EncodedText encode_text(Graph<T>& g, ParameterStore<T>& ps, const TextEncoderConfig& cfg,
                        const std::vector<TokenSequence>& seqs) {
    const int N = static_cast<int>(seqs.size());
    const int L = cfg.max_len;
    std::vector<int> flat_ids;
    flat_ids.reserve(static_cast<size_t>(N) * L);
    for (const auto& s : seqs) {
        if (static_cast<int>(s.ids.size()) != L)
            throw ShapeError("encode_text: sequence length " + std::to_string(s.ids.size()) +
                             " != L=" + std::to_string(L));
        flat_ids.insert(flat_ids.end(), s.ids.begin(), s.ids.end());
    }
    EncodedText out;
    for (const auto& s : seqs) out.key_masks.push_back(g.constant(key_mask_tensor<T>(s)));

    NodeId x = g.gather_rows(ps.use(g, kEmbeddingParam), flat_ids);
    x = g.add_tiled_rows(x, ps.use(g, "text.pos_embedding"));
    for (int l = 0; l < cfg.layers; ++l) {
        const std::string base = "text.layer" + std::to_string(l);
        NodeId h = g.layer_norm(x, ps.use(g, base + ".ln1.gamma"), ps.use(g, base + ".ln1.beta"));
        auto attn = lease_attn(g, ps, base + ".attn");
        std::vector<NodeId> per_sample;
        for (int n = 0; n < N; ++n) {
            NodeId hn = g.slice_rows(h, n * L, L);
            per_sample.push_back(mha(g, hn, hn, attn, cfg.heads, out.key_masks[static_cast<size_t>(n)]));
        }
        x = g.add(x, g.concat_rows(per_sample));
        NodeId f = g.layer_norm(x, ps.use(g, base + ".ln2.gamma"), ps.use(g, base + ".ln2.beta"));
        f = g.gelu(g.add_rowvec(g.matmul(f, ps.use(g, base + ".ff1.w")), ps.use(g, base + ".ff1.b")));
        f = g.add_rowvec(g.matmul(f, ps.use(g, base + ".ff2.w")), ps.use(g, base + ".ff2.b"));
        x = g.add(x, f);
    }
    x = g.layer_norm(x, ps.use(g, "text.ln_f.gamma"), ps.use(g, "text.ln_f.beta"));
    // zero padded rows
    Tensor<T> valid({N * L, 1});
    for (int n = 0; n < N; ++n)
        for (int i = 0; i < L; ++i)
            valid.data[static_cast<size_t>(n) * L + i] = i < seqs[static_cast<size_t>(n)].length ? T(1) : T(0);
    Tensor<T> valid_full({N * L, cfg.d_text});
    for (int r = 0; r < N * L; ++r)
        for (int c = 0; c < cfg.d_text; ++c)
            valid_full.data[static_cast<size_t>(r) * cfg.d_text + c] = valid.data[static_cast<size_t>(r)];
    out.cond = g.mul(x, g.constant(std::move(valid_full)));
    return out;
}

}  // namespace lab
