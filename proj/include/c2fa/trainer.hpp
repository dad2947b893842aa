#pragma once

// Optimization loop: warmup/decay schedule, Adam with coupled L2 weight
// decay, the per-step pipeline (encode -> contrastive -> distillation ->
// matching -> update -> EMA -> enqueue), and CRC-guarded checkpoints.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <memory>
#include <set>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "c2fa/common.hpp"
#include "c2fa/dataset.hpp"
#include "c2fa/encoders.hpp"
#include "c2fa/losses.hpp"
#include "c2fa/queue.hpp"
#include "c2fa/rng.hpp"
#include "c2fa/serialize.hpp"
#include "c2fa/tensor.hpp"

namespace c2fa {

inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEps = 1e-8;

struct TrainConfig {
    int batch_size = 32;
    int total_steps = 2000;
    int warmup_steps = 200;
    double peak_lr = 1e-3;
    double floor_lr = 1e-8;
    double weight_decay = 1e-6;
    double m = 0.998;    // EMA teacher coefficient
    double alpha = 0.4;  // distillation mixing weight
    int queue_capacity = 256;
    uint64_t seed = 1;
    bool use_queue = true;
    bool use_mod = true;
    bool use_sim_hard = true;

    void validate() const {
        if (batch_size < 1) throw DomainError("train config: batch_size must be positive");
        if (total_steps < 1) throw DomainError("train config: total_steps must be positive");
        if (warmup_steps < 0 || warmup_steps >= total_steps)
            throw DomainError("train config: need 0 <= warmup_steps < total_steps");
        if (!(floor_lr > 0.0) || floor_lr > peak_lr)
            throw DomainError("train config: need 0 < floor_lr <= peak_lr");
        if (weight_decay < 0.0) throw DomainError("train config: weight_decay must be >= 0");
        if (m < 0.0 || m > 1.0) throw DomainError("train config: m must lie in [0, 1]");
        if (alpha < 0.0 || alpha > 1.0) throw DomainError("train config: alpha must lie in [0, 1]");
        if (queue_capacity < 1) throw DomainError("train config: queue_capacity must be positive");
        if (use_queue && queue_capacity < batch_size)
            throw DomainError("train config: queue_capacity must be >= batch_size");
    }
};

// Batch size 256 over 40k steps with a 4k warmup to 1e-4, decaying to 1e-8;
// queue of 1024 entries. Kept as a named preset for comparison runs.
inline TrainConfig paper_scale_preset() {
    TrainConfig cfg;
    cfg.batch_size = 256;
    cfg.total_steps = 40000;
    cfg.warmup_steps = 4000;
    cfg.peak_lr = 1e-4;
    cfg.floor_lr = 1e-8;
    cfg.queue_capacity = 1024;
    return cfg;
}

inline nlohmann::json train_config_to_json(const TrainConfig& cfg) {
    return nlohmann::json{
        {"batch_size", cfg.batch_size},   {"total_steps", cfg.total_steps},
        {"warmup_steps", cfg.warmup_steps}, {"peak_lr", cfg.peak_lr},
        {"floor_lr", cfg.floor_lr},       {"weight_decay", cfg.weight_decay},
        {"m", cfg.m},                     {"alpha", cfg.alpha},
        {"queue_capacity", cfg.queue_capacity}, {"seed", cfg.seed},
        {"use_queue", cfg.use_queue},     {"use_mod", cfg.use_mod},
        {"use_sim_hard", cfg.use_sim_hard}};
}

// Accepts a JSON object whose keys are exactly TrainConfig fields; missing
// keys keep their defaults, unknown keys are rejected.
inline TrainConfig parse_train_config(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw DomainError(std::string("train config: ") + e.what());
    }
    if (!j.is_object()) throw DomainError("train config: expected a JSON object");
    static const std::set<std::string> known = {
        "batch_size", "total_steps", "warmup_steps", "peak_lr", "floor_lr",
        "weight_decay", "m", "alpha", "queue_capacity", "seed",
        "use_queue", "use_mod", "use_sim_hard"};
    for (const auto& item : j.items())
        if (known.find(item.key()) == known.end())
            throw DomainError("train config: unknown key '" + item.key() + "'");
    TrainConfig cfg;
    try {
        cfg.batch_size = j.value("batch_size", cfg.batch_size);
        cfg.total_steps = j.value("total_steps", cfg.total_steps);
        cfg.warmup_steps = j.value("warmup_steps", cfg.warmup_steps);
        cfg.peak_lr = j.value("peak_lr", cfg.peak_lr);
        cfg.floor_lr = j.value("floor_lr", cfg.floor_lr);
        cfg.weight_decay = j.value("weight_decay", cfg.weight_decay);
        cfg.m = j.value("m", cfg.m);
        cfg.alpha = j.value("alpha", cfg.alpha);
        cfg.queue_capacity = j.value("queue_capacity", cfg.queue_capacity);
        cfg.seed = j.value("seed", cfg.seed);
        cfg.use_queue = j.value("use_queue", cfg.use_queue);
        cfg.use_mod = j.value("use_mod", cfg.use_mod);
        cfg.use_sim_hard = j.value("use_sim_hard", cfg.use_sim_hard);
    } catch (const nlohmann::json::exception& e) {
        throw DomainError(std::string("train config: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

struct OptimizerState {
    int64_t step = 0;  // completed Adam updates
    std::vector<std::vector<double>> m1;
    std::vector<std::vector<double>> m2;
};

// Linear ramp 0 -> peak over the warmup, then linear decay peak -> floor
// over the remaining steps.
inline double lr_at(int step, const TrainConfig& cfg) {
    if (step < 0 || step > cfg.total_steps)
        throw ContractError("lr_at: step " + std::to_string(step) + " outside [0, " +
                            std::to_string(cfg.total_steps) + "]");
    if (step <= cfg.warmup_steps) {
        if (cfg.warmup_steps == 0) return cfg.peak_lr;
        return cfg.peak_lr * static_cast<double>(step) / cfg.warmup_steps;
    }
    const double span = cfg.total_steps - cfg.warmup_steps;
    return (cfg.peak_lr * (cfg.total_steps - step) + cfg.floor_lr * (step - cfg.warmup_steps)) /
           span;
}

// Bias-corrected Adam with weight decay folded into the gradient (coupled
// L2). Moments are allocated on first use and then required to stay aligned.
inline void adam_step(const std::vector<NamedParam>& params, OptimizerState& opt, double lr,
                      double weight_decay) {
    if (opt.m1.empty()) {
        opt.m1.resize(params.size());
        opt.m2.resize(params.size());
        for (size_t i = 0; i < params.size(); ++i) {
            opt.m1[i].assign(params[i].tensor->size(), 0.0);
            opt.m2[i].assign(params[i].tensor->size(), 0.0);
        }
    }
    if (opt.m1.size() != params.size() || opt.m2.size() != params.size())
        throw ContractError("adam_step: optimizer tracks " + std::to_string(opt.m1.size()) +
                            " tensors but " + std::to_string(params.size()) + " were passed");
    ++opt.step;
    const double c1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(opt.step));
    const double c2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(opt.step));
    for (size_t i = 0; i < params.size(); ++i) {
        Tensor& t = *params[i].tensor;
        auto& data = t.data();
        const auto& grad = t.grad();  // materializes zeros for untouched tensors
        if (opt.m1[i].size() != data.size())
            throw ContractError("adam_step: moment shape drifted for " + params[i].name);
        for (size_t k = 0; k < data.size(); ++k) {
            if (!std::isfinite(grad[k]))
                throw NumericError("adam_step: non-finite gradient in " + params[i].name +
                                   " at update " + std::to_string(opt.step));
            const double g = grad[k] + weight_decay * data[k];
            opt.m1[i][k] = kAdamBeta1 * opt.m1[i][k] + (1.0 - kAdamBeta1) * g;
            opt.m2[i][k] = kAdamBeta2 * opt.m2[i][k] + (1.0 - kAdamBeta2) * g * g;
            const double mhat = opt.m1[i][k] / c1;
            const double vhat = opt.m2[i][k] / c2;
            data[k] -= lr * mhat / (std::sqrt(vhat) + kAdamEps);
        }
    }
}

// One assembled training batch: per-layer feature stacks of shape
// (B * speech_tokens) x F plus the paired raw image tokens. Images may
// repeat when the sampler draws the same image twice.
struct TrainBatch {
    std::vector<Tensor> speech_layers;
    Tensor image_feats;
    std::vector<uint64_t> speech_ids;
    std::vector<uint64_t> image_ids;
    int batch = 0;
};

namespace detail {

inline constexpr uint64_t kSamplerStream = 21;
inline constexpr uint64_t kHardNegativeStream = 22;

}  // namespace detail

// Draws images uniformly with replacement, then one caption per image, so
// repeated images (and hence multi-positive targets) occur naturally.
class BatchSampler {
  public:
    explicit BatchSampler(const PairedDataset& data) : data_(&data) {
        if (data.images.empty() || data.speeches.empty())
            throw DegenerateInputError("sampler: split '" + data.split + "' is empty");
        std::unordered_map<uint64_t, size_t> image_slot;
        for (size_t i = 0; i < data.images.size(); ++i) image_slot[data.images[i].id] = i;
        captions_.resize(data.images.size());
        for (size_t s = 0; s < data.speeches.size(); ++s) {
            auto it = image_slot.find(data.speeches[s].image_id);
            if (it == image_slot.end())
                throw ContractError("sampler: speech " + std::to_string(data.speeches[s].id) +
                                    " references a missing image");
            captions_[it->second].push_back(s);
        }
        for (size_t i = 0; i < captions_.size(); ++i)
            if (captions_[i].empty())
                throw DegenerateInputError("sampler: image " + std::to_string(data.images[i].id) +
                                           " has no captions");
    }

    TrainBatch sample(int batch_size, Rng& rng) const {
        if (batch_size < 1) throw DomainError("sampler: batch size must be positive");
        const auto& d = *data_;
        const int n_s = d.speech_tokens;
        const int n_i = d.image_tokens;
        const int f = d.feature_dim;
        TrainBatch out;
        out.batch = batch_size;
        out.speech_layers.assign(d.speech_layers, Tensor());
        std::vector<std::vector<double>> layer_data(
            d.speech_layers, std::vector<double>(static_cast<size_t>(batch_size) * n_s * f));
        std::vector<double> image_data(static_cast<size_t>(batch_size) * n_i * f);
        for (int b = 0; b < batch_size; ++b) {
            const size_t img = rng.next_below(d.images.size());
            const auto& caps = captions_[img];
            const size_t sp = caps[rng.next_below(caps.size())];
            const auto& speech = d.speeches[sp];
            out.speech_ids.push_back(speech.id);
            out.image_ids.push_back(speech.image_id);
            for (int l = 0; l < d.speech_layers; ++l) {
                const auto& src = speech.layers[l].data();
                std::copy(src.begin(), src.end(),
                          layer_data[l].begin() + static_cast<size_t>(b) * n_s * f);
            }
            const auto& tok = d.images[img].tokens.data();
            std::copy(tok.begin(), tok.end(),
                      image_data.begin() + static_cast<size_t>(b) * n_i * f);
        }
        for (int l = 0; l < d.speech_layers; ++l)
            out.speech_layers[l] = Tensor::from_data(static_cast<size_t>(batch_size) * n_s, f,
                                                     std::move(layer_data[l]));
        out.image_feats =
            Tensor::from_data(static_cast<size_t>(batch_size) * n_i, f, std::move(image_data));
        return out;
    }

  private:
    const PairedDataset* data_;
    std::vector<std::vector<size_t>> captions_;
};

namespace detail {

inline std::vector<QueueEntry> entries_from_batch(const BatchEmbedding& images,
                                                  const std::vector<uint64_t>& image_ids) {
    const size_t d = images.cls.cols();
    const size_t n = images.tokens_per_item;
    std::vector<QueueEntry> entries(image_ids.size());
    for (size_t b = 0; b < image_ids.size(); ++b) {
        entries[b].image_id = image_ids[b];
        const auto& cls = images.cls.data();
        entries[b].cls.assign(cls.begin() + b * d, cls.begin() + (b + 1) * d);
        const auto& tok = images.tokens.data();
        entries[b].tokens.assign(tok.begin() + b * n * d, tok.begin() + (b + 1) * n * d);
    }
    return entries;
}

}  // namespace detail

// One optimization step. Ordered effects: student/image encode, teacher
// forward, candidate assembly (queue snapshot first, batch images last),
// losses, backward, Adam update, temperature clamp, EMA update, and only
// then enqueueing the batch images (so a batch never negatives itself).
inline LossBundle train_step(ModelState& state, OptimizerState& opt, EmbeddingQueue& queue,
                             const TrainBatch& batch, const TrainConfig& cfg, Rng& hard_rng,
                             int step_index) {
    const int B = batch.batch;
    const Tensor summed = weighted_layer_sum(batch.speech_layers, state.student.layer_logits);
    const BatchEmbedding speech = encode_speech_batch(summed, B, state, false);
    const BatchEmbedding images = encode_image_batch(batch.image_feats, B, state);

    BatchEmbedding teacher;
    if (cfg.use_mod) {
        Tensor teacher_summed;
        {
            NoGradGuard guard;
            teacher_summed = weighted_layer_sum(batch.speech_layers, state.teacher.layer_logits);
        }
        teacher = encode_speech_batch(teacher_summed, B, state, true);
    }

    ContrastiveBatchView view;
    view.speech_cls = speech.cls;
    QueueSnapshot snap;
    if (cfg.use_queue) snap = queue.snapshot();
    const size_t queue_rows = snap.ids.size();
    if (queue_rows > 0) {
        view.candidate_cls = concat_rows({snap.cls, images.cls});
        view.candidate_ids = snap.ids;
    } else {
        view.candidate_cls = images.cls;
    }
    view.candidate_ids.insert(view.candidate_ids.end(), batch.image_ids.begin(),
                              batch.image_ids.end());
    view.speech_pair_ids = batch.image_ids;
    view.speech_ids = batch.speech_ids;
    view.batch = B;
    view.tau = state.tau;

    const SicProbabilities probs = sic_probabilities(view);
    const Tensor y_s2i = build_multi_positive_targets(view.speech_pair_ids, view.candidate_ids);
    const Tensor y_i2s = build_multi_positive_targets(batch.image_ids, view.speech_pair_ids);
    const Tensor l_sic = sic_loss(probs.p_s2i, probs.p_i2s, y_s2i, y_i2s);

    Tensor l_mod = l_sic;
    if (cfg.use_mod) {
        const Tensor q = momentum_pseudo_targets(teacher.cls, view.candidate_cls, state.tau);
        l_mod = sic_mod_loss(l_sic, q, probs.p_s2i, cfg.alpha);
    }
    if (!std::isfinite(l_mod.value()))
        throw NumericError("train_step: non-finite contrastive loss at step " +
                           std::to_string(step_index) + " (sic=" + std::to_string(l_sic.value()) +
                           ")");

    Tensor l_sim = Tensor::scalar(0.0);
    if (cfg.use_sim_hard) {
        std::vector<FusionPair> pairs;
        std::vector<std::vector<double>> label_rows;
        auto speech_part = [&](int b) {
            return std::make_pair(
                slice_rows(speech.cls, static_cast<size_t>(b), 1),
                slice_rows(speech.tokens, static_cast<size_t>(b) * speech.tokens_per_item,
                           speech.tokens_per_item));
        };
        auto image_part = [&](int b) {
            return std::make_pair(
                slice_rows(images.cls, static_cast<size_t>(b), 1),
                slice_rows(images.tokens, static_cast<size_t>(b) * images.tokens_per_item,
                           images.tokens_per_item));
        };
        for (int b = 0; b < B; ++b) {
            auto [s_cls, s_tok] = speech_part(b);
            auto [i_cls, i_tok] = image_part(b);
            pairs.push_back({s_cls, s_tok, i_cls, i_tok});
            label_rows.push_back({0.0, 1.0});
        }
        const auto& p = probs.p_s2i.data();
        const size_t C = view.candidate_ids.size();
        for (int b = 0; b < B; ++b) {
            std::vector<double> row(p.begin() + static_cast<size_t>(b) * C,
                                    p.begin() + static_cast<size_t>(b + 1) * C);
            size_t idx;
            try {
                idx = sample_hard_negative(row, view.candidate_ids, batch.image_ids[b],
                                           hard_rng);
            } catch (const SamplingError&) {
                continue;  // no eligible negative for this anchor
            }
            auto [s_cls, s_tok] = speech_part(b);
            if (idx < queue_rows) {
                pairs.push_back({s_cls, s_tok, slice_rows(snap.cls, idx, 1), snap.tokens[idx]});
            } else {
                auto [i_cls, i_tok] = image_part(static_cast<int>(idx - queue_rows));
                pairs.push_back({s_cls, s_tok, i_cls, i_tok});
            }
            label_rows.push_back({1.0, 0.0});
        }
        std::vector<double> flat;
        for (const auto& r : label_rows) flat.insert(flat.end(), r.begin(), r.end());
        const Tensor labels = Tensor::from_data(label_rows.size(), 2, std::move(flat));
        const Tensor joint = fuse_multimodal_batch(pairs, state);
        l_sim = sim_loss(sim_head(joint, state), labels);
    }

    const Tensor l_total = total_loss(l_mod, l_sim);
    if (!std::isfinite(l_total.value()))
        throw NumericError("train_step: non-finite loss at step " + std::to_string(step_index) +
                           " (sic=" + std::to_string(l_sic.value()) +
                           ", mod=" + std::to_string(l_mod.value()) +
                           ", sim=" + std::to_string(l_sim.value()) + ")");
    backward(l_total);

    const auto params = trainable_params(state);
    adam_step(params, opt, lr_at(step_index + 1, cfg), cfg.weight_decay);
    for (const auto& p : params) p.tensor->zero_grad();
    auto& tau = state.tau.data()[0];
    tau = std::clamp(tau, constants::kTauMin, constants::kTauMax);
    momentum_update(state, cfg.m);
    if (cfg.use_queue) queue.enqueue_batch(detail::entries_from_batch(images, batch.image_ids));

    LossBundle out;
    out.l_sic = l_sic;
    out.l_sic_mod = l_mod;
    out.l_sim = l_sim;
    out.l_total = l_total;
    out.p_s2i = probs.p_s2i;
    out.p_i2s = probs.p_i2s;
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoints: magic "C2FK", version, step counter, both RNG streams, model
// and train configs, every state tensor by name, Adam moments, queue
// entries, and a trailing CRC32 over everything before it.

inline constexpr char kCheckpointMagic[4] = {'C', '2', 'F', 'K'};
inline constexpr uint32_t kCheckpointVersion = 1;

struct LoadedCheckpoint {
    ModelConfig model_config;
    TrainConfig train_config;
    uint64_t step = 0;
    std::array<uint64_t, 4> sampler_state{};
    std::array<uint64_t, 4> hard_state{};
    ModelState state;
    OptimizerState opt;
    std::vector<QueueEntry> queue_entries;
};

namespace detail {

inline void write_model_config(ByteWriter& w, const ModelConfig& cfg) {
    w.u32(static_cast<uint32_t>(cfg.feature_dim));
    w.u32(static_cast<uint32_t>(cfg.speech_layers));
    w.u32(static_cast<uint32_t>(cfg.speech_tokens));
    w.u32(static_cast<uint32_t>(cfg.image_tokens));
    w.u32(static_cast<uint32_t>(cfg.d_model));
    w.u32(static_cast<uint32_t>(cfg.num_heads));
    w.u32(static_cast<uint32_t>(cfg.depth));
    w.u32(static_cast<uint32_t>(cfg.ffn_dim));
    w.f64(cfg.tau_init);
    w.u64(cfg.init_seed);
}

inline ModelConfig read_model_config(ByteReader& r) {
    ModelConfig cfg;
    cfg.feature_dim = static_cast<int>(r.u32());
    cfg.speech_layers = static_cast<int>(r.u32());
    cfg.speech_tokens = static_cast<int>(r.u32());
    cfg.image_tokens = static_cast<int>(r.u32());
    cfg.d_model = static_cast<int>(r.u32());
    cfg.num_heads = static_cast<int>(r.u32());
    cfg.depth = static_cast<int>(r.u32());
    cfg.ffn_dim = static_cast<int>(r.u32());
    cfg.tau_init = r.f64();
    cfg.init_seed = r.u64();
    return cfg;
}

inline void write_train_config(ByteWriter& w, const TrainConfig& cfg) {
    w.u32(static_cast<uint32_t>(cfg.batch_size));
    w.u32(static_cast<uint32_t>(cfg.total_steps));
    w.u32(static_cast<uint32_t>(cfg.warmup_steps));
    w.f64(cfg.peak_lr);
    w.f64(cfg.floor_lr);
    w.f64(cfg.weight_decay);
    w.f64(cfg.m);
    w.f64(cfg.alpha);
    w.u32(static_cast<uint32_t>(cfg.queue_capacity));
    w.u64(cfg.seed);
    w.u32((cfg.use_queue ? 1u : 0u) | (cfg.use_mod ? 2u : 0u) | (cfg.use_sim_hard ? 4u : 0u));
}

inline TrainConfig read_train_config(ByteReader& r) {
    TrainConfig cfg;
    cfg.batch_size = static_cast<int>(r.u32());
    cfg.total_steps = static_cast<int>(r.u32());
    cfg.warmup_steps = static_cast<int>(r.u32());
    cfg.peak_lr = r.f64();
    cfg.floor_lr = r.f64();
    cfg.weight_decay = r.f64();
    cfg.m = r.f64();
    cfg.alpha = r.f64();
    cfg.queue_capacity = static_cast<int>(r.u32());
    cfg.seed = r.u64();
    const uint32_t toggles = r.u32();
    cfg.use_queue = (toggles & 1u) != 0;
    cfg.use_mod = (toggles & 2u) != 0;
    cfg.use_sim_hard = (toggles & 4u) != 0;
    return cfg;
}

}  // namespace detail

inline void save_checkpoint(ModelState& state, const OptimizerState& opt,
                            const EmbeddingQueue& queue, uint64_t step,
                            const Rng& sampler_rng, const Rng& hard_rng,
                            const ModelConfig& mcfg, const TrainConfig& tcfg,
                            const std::string& path) {
    ByteWriter w;
    w.raw(kCheckpointMagic, 4);
    w.u32(kCheckpointVersion);
    w.u64(step);
    for (uint64_t s : sampler_rng.state()) w.u64(s);
    for (uint64_t s : hard_rng.state()) w.u64(s);
    detail::write_model_config(w, mcfg);
    detail::write_train_config(w, tcfg);

    const auto tensors = all_state_tensors(state);
    w.u32(static_cast<uint32_t>(tensors.size()));
    for (const auto& t : tensors) {
        w.str(t.name);
        w.u32(static_cast<uint32_t>(t.tensor->rows()));
        w.u32(static_cast<uint32_t>(t.tensor->cols()));
        w.f64_span(t.tensor->data());
    }

    w.u64(static_cast<uint64_t>(opt.step));
    w.u32(static_cast<uint32_t>(opt.m1.size()));
    for (size_t i = 0; i < opt.m1.size(); ++i) {
        w.f64_span(opt.m1[i]);
        w.f64_span(opt.m2[i]);
    }

    const auto entries = queue.export_entries();
    w.u32(static_cast<uint32_t>(entries.size()));
    for (const auto& e : entries) {
        w.u64(e.image_id);
        w.f64_span(e.cls);
        w.f64_span(e.tokens);
    }

    w.u32(crc32(w.bytes().data(), w.bytes().size()));
    write_file(path, w.bytes());
}

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
    const auto bytes = read_file(path);
    if (bytes.size() < 12) throw TruncationError("checkpoint: file too short");
    if (std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0)
        throw BadMagicError("checkpoint: bad magic");
    const size_t body = bytes.size() - 4;
    uint32_t stored = 0;
    std::memcpy(&stored, bytes.data() + body, 4);
    if (crc32(bytes.data(), body) != stored)
        throw CorruptionError("checkpoint: CRC mismatch");

    ByteReader r(bytes);
    char magic[4];
    r.raw(magic, 4);
    const uint32_t version = r.u32();
    if (version != kCheckpointVersion)
        throw VersionMismatchError("checkpoint: version " + std::to_string(version));

    LoadedCheckpoint out;
    out.step = r.u64();
    for (auto& s : out.sampler_state) s = r.u64();
    for (auto& s : out.hard_state) s = r.u64();
    out.model_config = detail::read_model_config(r);
    out.train_config = detail::read_train_config(r);
    out.model_config.validate();
    out.train_config.validate();

    out.state = init_model(out.model_config);
    const auto tensors = all_state_tensors(out.state);
    const uint32_t count = r.u32();
    if (count != tensors.size())
        throw CorruptionError("checkpoint: expected " + std::to_string(tensors.size()) +
                              " tensors, found " + std::to_string(count));
    for (const auto& t : tensors) {
        const std::string name = r.str();
        if (name != t.name)
            throw CorruptionError("checkpoint: tensor '" + name + "' where '" + t.name +
                                  "' was expected");
        const uint32_t rows = r.u32();
        const uint32_t cols = r.u32();
        if (rows != t.tensor->rows() || cols != t.tensor->cols())
            throw CorruptionError("checkpoint: shape mismatch for " + t.name);
        t.tensor->data() = r.f64_span(static_cast<size_t>(rows) * cols);
    }

    out.opt.step = static_cast<int64_t>(r.u64());
    const uint32_t moments = r.u32();
    const auto params = trainable_params(out.state);
    if (moments != 0 && moments != params.size())
        throw CorruptionError("checkpoint: moment count mismatch");
    out.opt.m1.resize(moments);
    out.opt.m2.resize(moments);
    for (uint32_t i = 0; i < moments; ++i) {
        out.opt.m1[i] = r.f64_span(params[i].tensor->size());
        out.opt.m2[i] = r.f64_span(params[i].tensor->size());
    }

    const uint32_t entries = r.u32();
    out.queue_entries.resize(entries);
    const size_t d = static_cast<size_t>(out.model_config.d_model);
    const size_t token_rows = static_cast<size_t>(out.model_config.image_tokens);
    for (auto& e : out.queue_entries) {
        e.image_id = r.u64();
        e.cls = r.f64_span(d);
        e.tokens = r.f64_span(token_rows * d);
    }
    if (r.remaining() != 4)  // only the CRC should be left
        throw CorruptionError("checkpoint: trailing bytes");
    return out;
}

// Owns the model, optimizer, queue, and both RNG streams for one run.
class Trainer {
  public:
    Trainer(const ModelConfig& mcfg, const TrainConfig& tcfg, PairedDataset train_split)
        : mcfg_(mcfg),
          tcfg_(tcfg),
          data_(std::move(train_split)),
          state_(init_model(mcfg_)),
          queue_(tcfg_.queue_capacity, mcfg_.d_model, mcfg_.image_tokens),
          sampler_rng_(Rng::substream(tcfg_.seed, detail::kSamplerStream)),
          hard_rng_(Rng::substream(tcfg_.seed, detail::kHardNegativeStream)) {
        mcfg_.validate();
        tcfg_.validate();
        check_dims();
        sampler_ = std::make_unique<BatchSampler>(data_);
    }

    // Rebuilds a run from a checkpoint; the training split must match the
    // geometry recorded in the file.
    Trainer(const LoadedCheckpoint& ckpt, PairedDataset train_split)
        : mcfg_(ckpt.model_config),
          tcfg_(ckpt.train_config),
          data_(std::move(train_split)),
          state_(ckpt.state),
          opt_(ckpt.opt),
          queue_(tcfg_.queue_capacity, mcfg_.d_model, mcfg_.image_tokens),
          sampler_rng_(0),
          hard_rng_(0),
          step_(ckpt.step) {
        check_dims();
        queue_.restore(ckpt.queue_entries);
        sampler_rng_.set_state(ckpt.sampler_state);
        hard_rng_.set_state(ckpt.hard_state);
        sampler_ = std::make_unique<BatchSampler>(data_);
    }

    LossBundle step() {
        if (finished()) throw ContractError("trainer: run already complete");
        const TrainBatch batch = sampler_->sample(tcfg_.batch_size, sampler_rng_);
        LossBundle bundle = train_step(state_, opt_, queue_, batch, tcfg_, hard_rng_,
                                       static_cast<int>(step_));
        ++step_;
        return bundle;
    }

    bool finished() const { return step_ >= static_cast<uint64_t>(tcfg_.total_steps); }
    uint64_t completed_steps() const { return step_; }
    ModelState& model() { return state_; }
    const ModelConfig& model_config() const { return mcfg_; }
    const TrainConfig& train_config() const { return tcfg_; }
    const EmbeddingQueue& queue() const { return queue_; }
    const OptimizerState& optimizer() const { return opt_; }

    void save(const std::string& path) {
        save_checkpoint(state_, opt_, queue_, step_, sampler_rng_, hard_rng_, mcfg_, tcfg_,
                        path);
    }

  private:
    void check_dims() const {
        if (data_.feature_dim != mcfg_.feature_dim || data_.speech_layers != mcfg_.speech_layers ||
            data_.speech_tokens != mcfg_.speech_tokens || data_.image_tokens != mcfg_.image_tokens)
            throw DimensionError("trainer: dataset geometry does not match the model config");
    }

    ModelConfig mcfg_;
    TrainConfig tcfg_;
    PairedDataset data_;
    ModelState state_;
    OptimizerState opt_;
    EmbeddingQueue queue_;
    Rng sampler_rng_;
    Rng hard_rng_;
    uint64_t step_ = 0;
    std::unique_ptr<BatchSampler> sampler_;
};

}  // namespace c2fa
