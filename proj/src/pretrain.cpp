#include "lab/pretrain.hpp"

#include <cstdio>

#include "lab/optim.hpp"

namespace lab {

Checkpoint pretrain(const Corpus& corpus, const ModelConfig& model, const PretrainConfig& cfg,
                    std::vector<float>* loss_trace) {
    if (corpus.train.empty()) throw Error("pretrain: empty corpus");
    Checkpoint ckpt = make_base_checkpoint(model, corpus.vocab, cfg.seed);
    ckpt.strategy = "base";
    ckpt.params.set_all_trainable(true);

    NoiseSchedule sched = model.make_schedule();
    IdentityCodec codec;
    UNetDenoiser<float> den{&ckpt.params, &ckpt.config.unet};
    Optimizer<float> opt(OptimizerKind::Adam, cfg.lr);
    Rng rng(cfg.seed);
    Rng pick = rng.child("pretrain.pick");
    Rng draw = rng.child("pretrain.draws");

    const int n_train = static_cast<int>(corpus.train.size());
    double running = 0.0;
    for (int step = 1; step <= cfg.steps; ++step) {
        std::vector<Tensor<float>> xs;
        std::vector<TokenSequence> seqs;
        for (int b = 0; b < cfg.batch_size; ++b) {
            const auto& ex = corpus.train[static_cast<size_t>(pick.uniform_int(0, n_train - 1))];
            xs.push_back(ex.image);
            seqs.push_back(tokenize(ckpt.vocab, ex.caption, model.text.max_len));
        }
        ckpt.params.clear_grads();
        Graph<float> g;
        auto enc = encode_text(g, ckpt.params, model.text, seqs);
        NodeId loss = ldm_loss(g, sched, den, codec, xs, enc.cond, enc.key_masks, draw);
        const float lv = g.val(loss).data[0];
        if (loss_trace) loss_trace->push_back(lv);
        running += lv;
        g.backward(loss);
        opt.step(ckpt.params);
        if (cfg.log_every > 0 && step % cfg.log_every == 0) {
            std::fprintf(stderr, "pretrain step %d/%d  loss %.4f\n", step, cfg.steps,
                         running / cfg.log_every);
            running = 0.0;
        }
    }
    ckpt.step = cfg.steps;
    return ckpt;
}

}  // namespace lab
