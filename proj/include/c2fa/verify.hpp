#pragma once

// Self-contained verification suites behind the `verify` command: analytic
// gradients against finite differences, the hard-negative sampler against a
// chi-square goodness-of-fit test, and the queue against a brute-force list
// simulation.

#include <deque>
#include <sstream>
#include <string>
#include <vector>

#include "c2fa/encoders.hpp"
#include "c2fa/losses.hpp"
#include "c2fa/queue.hpp"
#include "c2fa/rng.hpp"
#include "c2fa/stats.hpp"
#include "c2fa/tensor.hpp"

namespace c2fa {

struct VerifyResult {
    std::string name;
    bool passed = false;
    std::string detail;
};

namespace detail {

inline Tensor random_matrix(size_t rows, size_t cols, Rng& rng) {
    return Tensor::randn(rows, cols, 1.0, rng);
}

}  // namespace detail

// Full training objective (contrastive + distilled + matching) on a tiny
// model; finite differences probed through a representative parameter from
// every family, including the temperature.
inline VerifyResult verify_gradients() {
    ModelConfig cfg;
    cfg.feature_dim = 3;
    cfg.speech_layers = 2;
    cfg.speech_tokens = 2;
    cfg.image_tokens = 2;
    cfg.d_model = 8;
    cfg.num_heads = 2;
    cfg.depth = 1;
    cfg.ffn_dim = 8;
    cfg.init_seed = 2024;
    ModelState base = init_model(cfg);
    Rng rng(515);

    const int B = 2;
    std::vector<Tensor> layers;
    for (int l = 0; l < cfg.speech_layers; ++l)
        layers.push_back(detail::random_matrix(B * cfg.speech_tokens, cfg.feature_dim, rng));
    const Tensor image_feats = detail::random_matrix(B * cfg.image_tokens, cfg.feature_dim, rng);
    const std::vector<uint64_t> image_ids = {1, 2};
    const auto images = encode_image_batch(image_feats, B, base);

    const Tensor q = [&] {
        NoGradGuard guard;
        const Tensor summed = weighted_layer_sum(layers, base.teacher.layer_logits);
        const auto teacher = encode_speech_batch(summed, B, base, true);
        return momentum_pseudo_targets(teacher.cls, images.cls, base.tau);
    }();

    auto objective = [&](const ModelState& st) {
        const Tensor summed = weighted_layer_sum(layers, st.student.layer_logits);
        const auto speech = encode_speech_batch(summed, B, st, false);
        ContrastiveBatchView view;
        view.speech_cls = speech.cls;
        view.candidate_cls = images.cls;
        view.candidate_ids = image_ids;
        view.speech_pair_ids = image_ids;
        view.speech_ids = {10, 11};
        view.batch = B;
        view.tau = st.tau;
        const auto probs = sic_probabilities(view);
        const Tensor y_s2i = build_multi_positive_targets(image_ids, image_ids);
        const Tensor l_sic = sic_loss(probs.p_s2i, probs.p_i2s, y_s2i, y_s2i);
        const Tensor l_mod = sic_mod_loss(l_sic, q, probs.p_s2i, 0.4);

        std::vector<FusionPair> pairs;
        for (int b = 0; b < B; ++b)
            pairs.push_back({slice_rows(speech.cls, b, 1),
                             slice_rows(speech.tokens, b * cfg.speech_tokens, cfg.speech_tokens),
                             slice_rows(images.cls, b, 1),
                             slice_rows(images.tokens, b * cfg.image_tokens, cfg.image_tokens)});
        pairs.push_back({slice_rows(speech.cls, 0, 1),
                         slice_rows(speech.tokens, 0, cfg.speech_tokens),
                         slice_rows(images.cls, 1, 1),
                         slice_rows(images.tokens, cfg.image_tokens, cfg.image_tokens)});
        const Tensor labels = Tensor::from_data(3, 2, {0, 1, 0, 1, 1, 0});
        const Tensor l_sim = sim_loss(sim_head(fuse_multimodal_batch(pairs, st), st), labels);
        return total_loss(l_mod, l_sim);
    };

    double worst = 0.0;
    const double tol = 1e-4;
    auto probe = [&](Tensor& param) {
        auto f = [&](const Tensor& p) {
            ModelState st = base;
            if (&param == &base.student.layer_logits) st.student.layer_logits = p;
            if (&param == &base.student.blocks[0].wq) st.student.blocks[0].wq = p;
            if (&param == &base.student.proj_w) st.student.proj_w = p;
            if (&param == &base.tau) st.tau = p;
            return objective(st);
        };
        worst = std::max(worst, finite_diff_check(f, param, 1e-5));
    };
    probe(base.student.layer_logits);
    probe(base.student.proj_w);
    probe(base.student.blocks[0].wq);
    probe(base.tau);

    std::ostringstream detail;
    detail << "max relative error " << worst << " (tolerance " << tol << ")";
    return {"gradient-check", worst <= tol, detail.str()};
}

// 10k draws against a fixed 8-way distribution, plus a positive-mask leak
// count over a second 10k draws.
inline VerifyResult verify_sampler() {
    const std::vector<double> probs = {0.4, 0.2, 0.1, 0.1, 0.1, 0.05, 0.03, 0.02};
    const std::vector<uint64_t> ids = {0, 1, 2, 3, 4, 5, 6, 7};
    Rng rng(616);
    std::vector<size_t> counts(8, 0);
    for (int i = 0; i < 10000; ++i) ++counts[sample_hard_negative(probs, ids, 999, rng)];
    const double pvalue = chi_square_gof_pvalue(counts, probs);

    size_t leaks = 0;
    for (int i = 0; i < 10000; ++i)
        if (ids[sample_hard_negative(probs, ids, 3, rng)] == 3) ++leaks;

    std::ostringstream detail;
    detail << "chi-square p=" << pvalue << ", positive leaks " << leaks << "/10000";
    return {"hard-negative-sampler", pvalue > 0.01 && leaks == 0, detail.str()};
}

// 10k random enqueue/snapshot rounds against a plain deque model.
inline VerifyResult verify_queue() {
    const int capacity = 17;
    const int d = 4;
    const int token_rows = 2;
    EmbeddingQueue queue(capacity, d, token_rows);
    std::deque<uint64_t> oracle;
    Rng rng(717);

    auto make_entry = [&](uint64_t id) {
        QueueEntry e;
        e.image_id = id;
        e.cls.assign(d, 0.0);
        e.cls[id % d] = 1.0;
        e.tokens.assign(static_cast<size_t>(token_rows) * d, static_cast<double>(id));
        return e;
    };

    uint64_t next_id = 0;
    for (int round = 0; round < 10000; ++round) {
        const int batch = 1 + static_cast<int>(rng.next_below(capacity));
        std::vector<QueueEntry> entries;
        for (int b = 0; b < batch; ++b) {
            entries.push_back(make_entry(next_id));
            oracle.push_back(next_id);
            ++next_id;
        }
        while (oracle.size() > static_cast<size_t>(capacity)) oracle.pop_front();
        queue.enqueue_batch(entries);

        if (queue.fill() != static_cast<int>(oracle.size()))
            return {"queue-oracle", false,
                    "fill " + std::to_string(queue.fill()) + " vs oracle " +
                        std::to_string(oracle.size()) + " at round " + std::to_string(round)};
        const auto snap = queue.snapshot();
        for (size_t i = 0; i < oracle.size(); ++i)
            if (snap.ids[i] != oracle[i])
                return {"queue-oracle", false, "order mismatch at round " + std::to_string(round)};
    }
    return {"queue-oracle", true, "10000 rounds, FIFO order and fill law exact"};
}

inline std::vector<VerifyResult> run_verification() {
    return {verify_gradients(), verify_sampler(), verify_queue()};
}

}  // namespace c2fa
