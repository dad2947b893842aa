#pragma once

// Model state and forward paths: a trainable transformer speech encoder with
// a learnable weighting over input feature layers, an EMA teacher copy of it,
// a frozen linear image encoder, a multimodal fusion encoder over the
// concatenated token sequences, and a two-class matching head.
//
// All forward functions come in a batched form (items stacked row-wise, one
// tape for the whole batch) plus thin single-item wrappers. Attention never
// crosses item boundaries: queries/keys/values are sliced per item before the
// score computation.

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "c2fa/common.hpp"
#include "c2fa/rng.hpp"
#include "c2fa/serialize.hpp"
#include "c2fa/tensor.hpp"

namespace c2fa {

struct ModelConfig {
    int feature_dim = 24;   // raw input feature width
    int speech_layers = 4;  // input layers to the learned layer weighting
    int speech_tokens = 4;
    int image_tokens = 4;
    int d_model = 64;
    int num_heads = 4;
    int depth = 2;  // blocks in the speech and multimodal encoders
    int ffn_dim = 128;
    double tau_init = 0.07;
    uint64_t init_seed = 0xC2FA;

    void validate() const {
        if (feature_dim < 1 || speech_layers < 1 || speech_tokens < 1 || image_tokens < 1 ||
            d_model < 1 || num_heads < 1 || depth < 1 || ffn_dim < 1)
            throw DomainError("ModelConfig: all dimensions must be positive");
        if (d_model % num_heads != 0)
            throw DomainError("ModelConfig: d_model " + std::to_string(d_model) +
                              " not divisible by num_heads " + std::to_string(num_heads));
        if (tau_init < constants::kTauMin || tau_init > constants::kTauMax)
            throw DomainError("ModelConfig: tau_init outside [1e-4, 1]");
    }
    int head_dim() const { return d_model / num_heads; }
    int fusion_rows() const { return 3 + speech_tokens + image_tokens; }
};

struct BlockParams {
    Tensor ln1_g, ln1_b;
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln2_g, ln2_b;
    Tensor w1, b1, w2, b2;
};

struct SpeechEncoderParams {
    Tensor layer_logits;  // 1 x L, softmaxed into layer weights
    Tensor proj_w, proj_b;
    Tensor cls;  // learned first-row token
    Tensor pos;  // (speech_tokens + 1) x d
    std::vector<BlockParams> blocks;
};

struct ImageEncoderParams {
    Tensor proj_w, proj_b;  // frozen random projection
};

struct MultimodalParams {
    Tensor joint_cls;
    Tensor pos;  // fusion_rows x d
    std::vector<BlockParams> blocks;
};

struct SimHeadParams {
    Tensor w, b;  // d x 2 and 1 x 2; column 1 is the match class
};

struct ModelState {
    ModelConfig cfg;
    SpeechEncoderParams student;
    SpeechEncoderParams teacher;  // EMA copy, never receives gradient
    ImageEncoderParams image;
    MultimodalParams mm;
    SimHeadParams sim;
    Tensor tau;  // learnable 1x1 temperature, clamped to [1e-4, 1] by the trainer
};

// cls: one unit-norm row per item; tokens: items stacked row-wise.
struct BatchEmbedding {
    Tensor cls;    // B x d
    Tensor tokens;  // (B * N) x d
    int batch = 0;
    int tokens_per_item = 0;
};

struct SequenceEmbedding {
    Tensor cls;    // 1 x d, unit norm
    Tensor tokens;  // N x d
};

// ---------------------------------------------------------------------------
// Initialization and parameter registry
// ---------------------------------------------------------------------------

namespace detail {

inline Tensor init_matrix(size_t rows, size_t cols, Rng& rng, double std_dev, bool grad) {
    std::vector<double> d(rows * cols);
    for (auto& x : d) x = std_dev * rng.next_gaussian();
    return Tensor::from_data(rows, cols, std::move(d), grad);
}

inline Tensor init_zeros(size_t rows, size_t cols, bool grad) {
    return Tensor::zeros(rows, cols, grad);
}

inline Tensor init_ones(size_t rows, size_t cols, bool grad) {
    return Tensor::from_data(rows, cols, std::vector<double>(rows * cols, 1.0), grad);
}

inline BlockParams init_block(int d, int ffn, Rng& rng, bool grad) {
    const double attn_std = 1.0 / std::sqrt(static_cast<double>(d));
    const double ffn_std = 1.0 / std::sqrt(static_cast<double>(ffn));
    BlockParams p;
    p.ln1_g = init_ones(1, d, grad);
    p.ln1_b = init_zeros(1, d, grad);
    p.wq = init_matrix(d, d, rng, attn_std, grad);
    p.bq = init_zeros(1, d, grad);
    p.wk = init_matrix(d, d, rng, attn_std, grad);
    p.bk = init_zeros(1, d, grad);
    p.wv = init_matrix(d, d, rng, attn_std, grad);
    p.bv = init_zeros(1, d, grad);
    p.wo = init_matrix(d, d, rng, attn_std, grad);
    p.bo = init_zeros(1, d, grad);
    p.ln2_g = init_ones(1, d, grad);
    p.ln2_b = init_zeros(1, d, grad);
    p.w1 = init_matrix(d, ffn, rng, attn_std, grad);
    p.b1 = init_zeros(1, ffn, grad);
    p.w2 = init_matrix(ffn, d, rng, ffn_std, grad);
    p.b2 = init_zeros(1, d, grad);
    return p;
}

inline SpeechEncoderParams init_speech_encoder(const ModelConfig& cfg, Rng& rng, bool grad) {
    SpeechEncoderParams p;
    p.layer_logits = init_zeros(1, cfg.speech_layers, grad);
    p.proj_w = init_matrix(cfg.feature_dim, cfg.d_model, rng,
                           1.0 / std::sqrt(static_cast<double>(cfg.feature_dim)), grad);
    p.proj_b = init_zeros(1, cfg.d_model, grad);
    p.cls = init_matrix(1, cfg.d_model, rng, 0.02, grad);
    p.pos = init_matrix(cfg.speech_tokens + 1, cfg.d_model, rng, 0.02, grad);
    for (int b = 0; b < cfg.depth; ++b)
        p.blocks.push_back(init_block(cfg.d_model, cfg.ffn_dim, rng, grad));
    return p;
}

inline Tensor clone_tensor(const Tensor& t, bool grad) {
    return Tensor::from_data(t.rows(), t.cols(), t.data(), grad);
}

}  // namespace detail

// Fresh state: student and teacher start as exact copies; the image
// projection is drawn once and never updated.
inline ModelState init_model(const ModelConfig& cfg) {
    cfg.validate();
    ModelState st;
    st.cfg = cfg;

    Rng enc_rng = Rng::substream(cfg.init_seed, 11);
    st.student = detail::init_speech_encoder(cfg, enc_rng, true);

    st.teacher.layer_logits = detail::clone_tensor(st.student.layer_logits, false);
    st.teacher.proj_w = detail::clone_tensor(st.student.proj_w, false);
    st.teacher.proj_b = detail::clone_tensor(st.student.proj_b, false);
    st.teacher.cls = detail::clone_tensor(st.student.cls, false);
    st.teacher.pos = detail::clone_tensor(st.student.pos, false);
    for (const auto& b : st.student.blocks) {
        BlockParams t;
        t.ln1_g = detail::clone_tensor(b.ln1_g, false);
        t.ln1_b = detail::clone_tensor(b.ln1_b, false);
        t.wq = detail::clone_tensor(b.wq, false);
        t.bq = detail::clone_tensor(b.bq, false);
        t.wk = detail::clone_tensor(b.wk, false);
        t.bk = detail::clone_tensor(b.bk, false);
        t.wv = detail::clone_tensor(b.wv, false);
        t.bv = detail::clone_tensor(b.bv, false);
        t.wo = detail::clone_tensor(b.wo, false);
        t.bo = detail::clone_tensor(b.bo, false);
        t.ln2_g = detail::clone_tensor(b.ln2_g, false);
        t.ln2_b = detail::clone_tensor(b.ln2_b, false);
        t.w1 = detail::clone_tensor(b.w1, false);
        t.b1 = detail::clone_tensor(b.b1, false);
        t.w2 = detail::clone_tensor(b.w2, false);
        t.b2 = detail::clone_tensor(b.b2, false);
        st.teacher.blocks.push_back(std::move(t));
    }

    Rng img_rng = Rng::substream(cfg.init_seed, 12);
    st.image.proj_w = detail::init_matrix(
        cfg.feature_dim, cfg.d_model, img_rng,
        1.0 / std::sqrt(static_cast<double>(cfg.feature_dim)), false);
    st.image.proj_b = detail::init_zeros(1, cfg.d_model, false);

    Rng mm_rng = Rng::substream(cfg.init_seed, 13);
    st.mm.joint_cls = detail::init_matrix(1, cfg.d_model, mm_rng, 0.02, true);
    st.mm.pos = detail::init_matrix(cfg.fusion_rows(), cfg.d_model, mm_rng, 0.02, true);
    for (int b = 0; b < cfg.depth; ++b)
        st.mm.blocks.push_back(detail::init_block(cfg.d_model, cfg.ffn_dim, mm_rng, true));

    Rng sim_rng = Rng::substream(cfg.init_seed, 14);
    st.sim.w = detail::init_matrix(cfg.d_model, 2, sim_rng,
                                   1.0 / std::sqrt(static_cast<double>(cfg.d_model)), true);
    st.sim.b = detail::init_zeros(1, 2, true);

    st.tau = Tensor::scalar(cfg.tau_init, true);
    return st;
}

struct NamedParam {
    std::string name;
    Tensor* tensor;
};

namespace detail {

inline void visit_block(const std::string& prefix, BlockParams& b,
                        std::vector<NamedParam>& out) {
    out.push_back({prefix + ".ln1_g", &b.ln1_g});
    out.push_back({prefix + ".ln1_b", &b.ln1_b});
    out.push_back({prefix + ".wq", &b.wq});
    out.push_back({prefix + ".bq", &b.bq});
    out.push_back({prefix + ".wk", &b.wk});
    out.push_back({prefix + ".bk", &b.bk});
    out.push_back({prefix + ".wv", &b.wv});
    out.push_back({prefix + ".bv", &b.bv});
    out.push_back({prefix + ".wo", &b.wo});
    out.push_back({prefix + ".bo", &b.bo});
    out.push_back({prefix + ".ln2_g", &b.ln2_g});
    out.push_back({prefix + ".ln2_b", &b.ln2_b});
    out.push_back({prefix + ".w1", &b.w1});
    out.push_back({prefix + ".b1", &b.b1});
    out.push_back({prefix + ".w2", &b.w2});
    out.push_back({prefix + ".b2", &b.b2});
}

inline void visit_speech(const std::string& prefix, SpeechEncoderParams& p,
                         std::vector<NamedParam>& out) {
    out.push_back({prefix + ".layer_logits", &p.layer_logits});
    out.push_back({prefix + ".proj_w", &p.proj_w});
    out.push_back({prefix + ".proj_b", &p.proj_b});
    out.push_back({prefix + ".cls", &p.cls});
    out.push_back({prefix + ".pos", &p.pos});
    for (size_t i = 0; i < p.blocks.size(); ++i)
        visit_block(prefix + ".blocks." + std::to_string(i), p.blocks[i], out);
}

}  // namespace detail

// Parameters the optimizer updates: student speech encoder, multimodal
// encoder, matching head, and the temperature. Teacher and image params are
// deliberately absent.
inline std::vector<NamedParam> trainable_params(ModelState& st) {
    std::vector<NamedParam> out;
    detail::visit_speech("student", st.student, out);
    out.push_back({"mm.joint_cls", &st.mm.joint_cls});
    out.push_back({"mm.pos", &st.mm.pos});
    for (size_t i = 0; i < st.mm.blocks.size(); ++i)
        detail::visit_block("mm.blocks." + std::to_string(i), st.mm.blocks[i], out);
    out.push_back({"sim.w", &st.sim.w});
    out.push_back({"sim.b", &st.sim.b});
    out.push_back({"tau", &st.tau});
    return out;
}

inline std::vector<NamedParam> teacher_params(ModelState& st) {
    std::vector<NamedParam> out;
    detail::visit_speech("teacher", st.teacher, out);
    return out;
}

inline std::vector<NamedParam> frozen_params(ModelState& st) {
    return {{"image.proj_w", &st.image.proj_w}, {"image.proj_b", &st.image.proj_b}};
}

// Every tensor in the state, in a fixed order (checkpoint layout).
inline std::vector<NamedParam> all_state_tensors(ModelState& st) {
    std::vector<NamedParam> out = trainable_params(st);
    for (auto& p : teacher_params(st)) out.push_back(p);
    for (auto& p : frozen_params(st)) out.push_back(p);
    return out;
}

inline uint64_t params_fingerprint(const std::vector<NamedParam>& params) {
    uint64_t h = 0xCBF29CE484222325ULL;
    auto mix = [&h](const void* p, size_t n) {
        const auto* bytes = static_cast<const uint8_t*>(p);
        for (size_t i = 0; i < n; ++i) {
            h ^= bytes[i];
            h *= 0x100000001B3ULL;
        }
    };
    for (const auto& np : params) {
        mix(np.name.data(), np.name.size());
        mix(np.tensor->data().data(), np.tensor->data().size() * sizeof(double));
    }
    return h;
}

// ---------------------------------------------------------------------------
// Forward paths
// ---------------------------------------------------------------------------

// softmax(layer_logits) applied across per-layer token matrices.
inline Tensor weighted_layer_sum(const std::vector<Tensor>& layers, const Tensor& layer_logits) {
    if (layers.empty()) throw DomainError("weighted_layer_sum: need at least one layer");
    if (layer_logits.rows() != 1 || layer_logits.cols() != layers.size())
        throw DimensionError("weighted_layer_sum: logits " + layer_logits.shape_str() +
                             " for " + std::to_string(layers.size()) + " layers");
    const Tensor weights = softmax_rows(layer_logits, 1.0);
    return linear_combination(layers, weights);
}

namespace detail {

inline Tensor block_forward(const Tensor& x, const BlockParams& p, int items, int rows_per_item,
                            int num_heads) {
    const int dh = static_cast<int>(x.cols()) / num_heads;
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    Tensor h = layer_norm_rows(x, p.ln1_g, p.ln1_b);
    Tensor q = add_row_bias(matmul(h, p.wq), p.bq);
    Tensor k = add_row_bias(matmul(h, p.wk), p.bk);
    Tensor v = add_row_bias(matmul(h, p.wv), p.bv);

    std::vector<Tensor> item_outs;
    item_outs.reserve(items);
    for (int i = 0; i < items; ++i) {
        const size_t r0 = static_cast<size_t>(i) * rows_per_item;
        Tensor qi = slice_rows(q, r0, rows_per_item);
        Tensor ki = slice_rows(k, r0, rows_per_item);
        Tensor vi = slice_rows(v, r0, rows_per_item);
        std::vector<Tensor> head_outs;
        head_outs.reserve(num_heads);
        for (int hd = 0; hd < num_heads; ++hd) {
            const size_t c0 = static_cast<size_t>(hd) * dh;
            Tensor qh = slice_cols(qi, c0, dh);
            Tensor kh = slice_cols(ki, c0, dh);
            Tensor vh = slice_cols(vi, c0, dh);
            Tensor attn = softmax_rows(scale(matmul_nt(qh, kh), inv_sqrt_dh), 1.0);
            head_outs.push_back(matmul(attn, vh));
        }
        item_outs.push_back(concat_cols(head_outs));
    }
    Tensor attn_all = items == 1 ? item_outs[0] : concat_rows(item_outs);
    Tensor x1 = add(x, add_row_bias(matmul(attn_all, p.wo), p.bo));

    Tensor h2 = layer_norm_rows(x1, p.ln2_g, p.ln2_b);
    Tensor f = add_row_bias(matmul(gelu(add_row_bias(matmul(h2, p.w1), p.b1)), p.w2), p.b2);
    return add(x1, f);
}

// Shared trunk: project raw features, prepend the learned first-row token,
// add positions, run the blocks, split out unit-norm first rows.
inline BatchEmbedding run_speech_trunk(const Tensor& stacked, int batch,
                                       const SpeechEncoderParams& enc, const ModelConfig& cfg) {
    const int n = cfg.speech_tokens;
    if (stacked.cols() != static_cast<size_t>(cfg.feature_dim) ||
        stacked.rows() != static_cast<size_t>(batch) * n)
        throw DimensionError("encode_speech: features " + stacked.shape_str() + ", expected " +
                             std::to_string(batch * n) + "x" + std::to_string(cfg.feature_dim));

    Tensor proj = add_row_bias(matmul(stacked, enc.proj_w), enc.proj_b);

    const int rows = n + 1;
    std::vector<Tensor> parts;
    parts.reserve(2 * batch);
    for (int i = 0; i < batch; ++i) {
        parts.push_back(enc.cls);
        parts.push_back(slice_rows(proj, static_cast<size_t>(i) * n, n));
    }
    Tensor x = concat_rows(parts);
    x = add(x, batch == 1 ? enc.pos : concat_rows(std::vector<Tensor>(batch, enc.pos)));

    for (const auto& block : enc.blocks)
        x = block_forward(x, block, batch, rows, cfg.num_heads);

    std::vector<Tensor> cls_rows, token_rows;
    cls_rows.reserve(batch);
    token_rows.reserve(batch);
    for (int i = 0; i < batch; ++i) {
        const size_t r0 = static_cast<size_t>(i) * rows;
        cls_rows.push_back(slice_rows(x, r0, 1));
        token_rows.push_back(slice_rows(x, r0 + 1, n));
    }
    BatchEmbedding out;
    out.cls = l2_normalize_rows(batch == 1 ? cls_rows[0] : concat_rows(cls_rows));
    out.tokens = batch == 1 ? token_rows[0] : concat_rows(token_rows);
    out.batch = batch;
    out.tokens_per_item = n;
    return out;
}

}  // namespace detail

// stacked: (batch * speech_tokens) x feature_dim, items contiguous. The
// teacher path runs the same trunk off-tape with the EMA parameters.
inline BatchEmbedding encode_speech_batch(const Tensor& stacked, int batch,
                                          const ModelState& st, bool use_teacher) {
    if (use_teacher) {
        NoGradGuard guard;
        return detail::run_speech_trunk(stacked, batch, st.teacher, st.cfg);
    }
    return detail::run_speech_trunk(stacked, batch, st.student, st.cfg);
}

// Frozen path: linear projection per token; the item embedding is the
// normalized token mean. Never on tape.
inline BatchEmbedding encode_image_batch(const Tensor& stacked, int batch,
                                         const ModelState& st) {
    NoGradGuard guard;
    const int n = st.cfg.image_tokens;
    if (stacked.cols() != static_cast<size_t>(st.cfg.feature_dim) ||
        stacked.rows() != static_cast<size_t>(batch) * n)
        throw DimensionError("encode_image: features " + stacked.shape_str() + ", expected " +
                             std::to_string(batch * n) + "x" +
                             std::to_string(st.cfg.feature_dim));
    Tensor proj = add_row_bias(matmul(stacked, st.image.proj_w), st.image.proj_b);
    std::vector<Tensor> means;
    means.reserve(batch);
    for (int i = 0; i < batch; ++i)
        means.push_back(mean_rows(slice_rows(proj, static_cast<size_t>(i) * n, n)));
    BatchEmbedding out;
    out.cls = l2_normalize_rows(batch == 1 ? means[0] : concat_rows(means));
    out.tokens = proj;
    out.batch = batch;
    out.tokens_per_item = n;
    return out;
}

inline SequenceEmbedding encode_speech(const Tensor& features, const ModelState& st,
                                       bool use_teacher) {
    BatchEmbedding b = encode_speech_batch(features, 1, st, use_teacher);
    return {b.cls, b.tokens};
}

inline SequenceEmbedding encode_image(const Tensor& features, const ModelState& st) {
    BatchEmbedding b = encode_image_batch(features, 1, st);
    return {b.cls, b.tokens};
}

// One speech/image pairing to run through the fusion encoder. The image side
// may come from the current batch or from stored queue entries.
struct FusionPair {
    Tensor speech_cls;     // 1 x d
    Tensor speech_tokens;  // speech_tokens x d
    Tensor image_cls;      // 1 x d
    Tensor image_tokens;   // image_tokens x d
};

// Concatenate [joint token; speech cls + tokens; image cls + tokens] per
// pair, run the fusion blocks, return each pair's joint output row.
inline Tensor fuse_multimodal_batch(const std::vector<FusionPair>& pairs,
                                    const ModelState& st) {
    if (pairs.empty()) throw ContractError("fuse_multimodal: empty pair list");
    const size_t d = st.cfg.d_model;
    const int rows = st.cfg.fusion_rows();
    std::vector<Tensor> parts;
    parts.reserve(5 * pairs.size());
    for (const auto& p : pairs) {
        if (p.speech_cls.rows() != 1 || p.speech_cls.cols() != d || p.image_cls.rows() != 1 ||
            p.image_cls.cols() != d ||
            p.speech_tokens.rows() != static_cast<size_t>(st.cfg.speech_tokens) ||
            p.speech_tokens.cols() != d ||
            p.image_tokens.rows() != static_cast<size_t>(st.cfg.image_tokens) ||
            p.image_tokens.cols() != d)
            throw DimensionError("fuse_multimodal: pair shapes " + p.speech_cls.shape_str() +
                                 "/" + p.speech_tokens.shape_str() + "/" +
                                 p.image_cls.shape_str() + "/" + p.image_tokens.shape_str());
        parts.push_back(st.mm.joint_cls);
        parts.push_back(p.speech_cls);
        parts.push_back(p.speech_tokens);
        parts.push_back(p.image_cls);
        parts.push_back(p.image_tokens);
    }
    Tensor x = concat_rows(parts);
    x = add(x, pairs.size() == 1
                   ? st.mm.pos
                   : concat_rows(std::vector<Tensor>(pairs.size(), st.mm.pos)));
    for (const auto& block : st.mm.blocks)
        x = detail::block_forward(x, block, static_cast<int>(pairs.size()), rows,
                                  st.cfg.num_heads);

    std::vector<Tensor> joints;
    joints.reserve(pairs.size());
    for (size_t i = 0; i < pairs.size(); ++i)
        joints.push_back(slice_rows(x, i * rows, 1));
    return pairs.size() == 1 ? joints[0] : concat_rows(joints);
}

inline Tensor fuse_multimodal(const SequenceEmbedding& speech, const SequenceEmbedding& image,
                              const ModelState& st) {
    return fuse_multimodal_batch({{speech.cls, speech.tokens, image.cls, image.tokens}}, st);
}

// Two-class probabilities per joint row; column 1 is the match class.
inline Tensor sim_head(const Tensor& joint, const ModelState& st) {
    if (joint.cols() != static_cast<size_t>(st.cfg.d_model))
        throw DimensionError("sim_head: joint " + joint.shape_str());
    return softmax_rows(add_row_bias(matmul(joint, st.sim.w), st.sim.b), 1.0);
}

// In-place EMA of the teacher toward the student: t <- m*t + (1-m)*s.
inline void momentum_update(ModelState& st, double m) {
    if (m < 0.0 || m > 1.0)
        throw DomainError("momentum_update: m=" + std::to_string(m) + " outside [0,1]");
    std::vector<NamedParam> t = teacher_params(st);
    ModelState& mut = st;
    std::vector<NamedParam> s;
    detail::visit_speech("student", mut.student, s);
    if (t.size() != s.size()) throw ContractError("momentum_update: param list mismatch");
    for (size_t i = 0; i < t.size(); ++i) {
        auto& td = t[i].tensor->data();
        const auto& sd = s[i].tensor->data();
        if (td.size() != sd.size())
            throw DimensionError("momentum_update: shape mismatch at " + t[i].name);
        for (size_t j = 0; j < td.size(); ++j) td[j] = m * td[j] + (1.0 - m) * sd[j];
    }
}

}  // namespace c2fa
