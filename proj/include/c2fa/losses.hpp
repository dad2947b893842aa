#pragma once

// Training objectives. The contrastive loss normalizes speech-to-image
// probabilities over a candidate set that unions the queue snapshot with the
// in-batch images (queue rows first), while the image-to-speech side uses
// in-batch speeches only — the two directions are deliberately asymmetric.
// Distillation mixes the contrastive loss with a KL toward pseudo-targets
// from the momentum teacher, on the speech-to-image direction only. The
// matching loss is a plain two-class cross-entropy over fused pairs.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "c2fa/common.hpp"
#include "c2fa/tensor.hpp"

namespace c2fa {

// Candidate rows: queue snapshot first, then the B in-batch images, so row
// (C - batch + i) is the image paired with batch slot i.
struct ContrastiveBatchView {
    Tensor speech_cls;                     // B x d, student path (on tape)
    Tensor candidate_cls;                  // C x d, constants
    std::vector<uint64_t> candidate_ids;   // size C
    std::vector<uint64_t> speech_pair_ids; // size B, paired image id per speech
    std::vector<uint64_t> speech_ids;      // size B, speech item ids
    int batch = 0;
    Tensor tau;  // 1x1 learnable temperature
};

struct LossBundle {
    Tensor l_sic, l_sic_mod, l_sim, l_total;
    Tensor p_s2i;  // retained for hard-negative sampling
    Tensor p_i2s;
};

namespace detail {

inline void require_unit_rows(const Tensor& t, const char* what) {
    for (size_t r = 0; r < t.rows(); ++r) {
        double s = 0.0;
        for (size_t c = 0; c < t.cols(); ++c) s += t.at(r, c) * t.at(r, c);
        if (std::abs(std::sqrt(s) - 1.0) > 1e-6)
            throw ContractError(std::string(what) + ": row " + std::to_string(r) +
                                " has norm " + std::to_string(std::sqrt(s)));
    }
}

}  // namespace detail

inline void validate_view(const ContrastiveBatchView& view) {
    const size_t B = static_cast<size_t>(view.batch);
    const size_t C = view.candidate_cls.rows();
    if (C == 0) throw ContractError("contrastive view: empty candidate set");
    if (B == 0 || view.speech_cls.rows() != B)
        throw ContractError("contrastive view: speech rows " +
                            std::to_string(view.speech_cls.rows()) + " vs batch " +
                            std::to_string(view.batch));
    if (view.speech_cls.cols() != view.candidate_cls.cols())
        throw DimensionError("contrastive view: embedding widths differ");
    if (view.candidate_ids.size() != C || view.speech_pair_ids.size() != B ||
        view.speech_ids.size() != B)
        throw DimensionError("contrastive view: id list sizes");
    if (C < B) throw ContractError("contrastive view: candidates cannot be fewer than batch");
    if (view.tau.size() != 1) throw DimensionError("contrastive view: tau must be scalar");
    if (view.tau.data()[0] <= 0.0)
        throw DomainError("contrastive view: tau must be positive");
    detail::require_unit_rows(view.speech_cls, "speech cls");
    detail::require_unit_rows(view.candidate_cls, "candidate cls");
    for (size_t i = 0; i < B; ++i) {
        bool found = false;
        for (size_t j = 0; j < C && !found; ++j)
            found = view.candidate_ids[j] == view.speech_pair_ids[i];
        if (!found)
            throw ContractError("contrastive view: speech " + std::to_string(i) +
                                " has no positive among candidates");
    }
}

struct SicProbabilities {
    Tensor p_s2i;  // B x C
    Tensor p_i2s;  // B x B, rows are in-batch images
};

inline SicProbabilities sic_probabilities(const ContrastiveBatchView& view) {
    validate_view(view);
    const size_t B = static_cast<size_t>(view.batch);
    const size_t C = view.candidate_cls.rows();

    Tensor sims_s2i = matmul_nt(view.speech_cls, view.candidate_cls);
    Tensor p_s2i = softmax_rows(div_by_scalar(sims_s2i, view.tau), 1.0);

    Tensor batch_images = slice_rows(view.candidate_cls, C - B, B);
    Tensor sims_i2s = matmul_nt(batch_images, view.speech_cls);
    Tensor p_i2s = softmax_rows(div_by_scalar(sims_i2s, view.tau), 1.0);
    return {p_s2i, p_i2s};
}

// Row-stochastic targets: mass 1/n on the n candidates whose id equals the
// anchor's id. Anchors with no match are a contract violation.
inline Tensor build_multi_positive_targets(const std::vector<uint64_t>& anchor_ids,
                                           const std::vector<uint64_t>& candidate_ids) {
    if (anchor_ids.empty() || candidate_ids.empty())
        throw ContractError("multi-positive targets: empty anchor or candidate list");
    std::vector<double> data(anchor_ids.size() * candidate_ids.size(), 0.0);
    for (size_t i = 0; i < anchor_ids.size(); ++i) {
        size_t n = 0;
        for (uint64_t cid : candidate_ids) n += (cid == anchor_ids[i]);
        if (n == 0)
            throw ContractError("multi-positive targets: anchor " + std::to_string(i) +
                                " (id " + std::to_string(anchor_ids[i]) +
                                ") has no positive candidate");
        const double mass = 1.0 / static_cast<double>(n);
        for (size_t j = 0; j < candidate_ids.size(); ++j)
            if (candidate_ids[j] == anchor_ids[i])
                data[i * candidate_ids.size() + j] = mass;
    }
    return Tensor::from_data(anchor_ids.size(), candidate_ids.size(), std::move(data));
}

// Symmetric cross-entropy, averaged over the two retrieval directions.
inline Tensor sic_loss(const Tensor& p_s2i, const Tensor& p_i2s, const Tensor& y_s2i,
                       const Tensor& y_i2s) {
    return scale(add(cross_entropy(y_s2i, p_s2i), cross_entropy(y_i2s, p_i2s)), 0.5);
}

// Teacher-side candidate distribution over the same candidate set, computed
// entirely off-tape so it can never feed gradients back.
inline Tensor momentum_pseudo_targets(const Tensor& teacher_cls, const Tensor& candidate_cls,
                                      const Tensor& tau) {
    if (teacher_cls.requires_grad())
        throw ContractError("momentum_pseudo_targets: teacher embeddings must be off-tape");
    if (teacher_cls.cols() != candidate_cls.cols())
        throw DimensionError("momentum_pseudo_targets: widths differ");
    NoGradGuard guard;
    Tensor sims = matmul_nt(teacher_cls, candidate_cls);
    return softmax_rows(div_by_scalar(sims, tau), 1.0);
}

// (1-a) * l_sic + a * KL(q || p), distilling the speech-to-image direction.
inline Tensor sic_mod_loss(const Tensor& l_sic, const Tensor& q_s2i, const Tensor& p_s2i,
                           double alpha) {
    if (alpha < 0.0 || alpha > 1.0)
        throw DomainError("sic_mod_loss: alpha=" + std::to_string(alpha) + " outside [0,1]");
    if (q_s2i.rows() != p_s2i.rows() || q_s2i.cols() != p_s2i.cols())
        throw ContractError("sic_mod_loss: pseudo-target candidate set " + q_s2i.shape_str() +
                            " does not match " + p_s2i.shape_str());
    return add(scale(l_sic, 1.0 - alpha), scale(kl_divergence(q_s2i, p_s2i), alpha));
}

// Mean two-class cross-entropy of matching-head outputs against one-hot
// labels (column 1 = match).
inline Tensor sim_loss(const Tensor& head_probs, const Tensor& labels) {
    if (head_probs.rows() == 0) throw ContractError("sim_loss: empty batch");
    if (head_probs.cols() != 2 || labels.rows() != head_probs.rows() || labels.cols() != 2)
        throw DimensionError("sim_loss: probs " + head_probs.shape_str() + ", labels " +
                             labels.shape_str());
    return cross_entropy(labels, head_probs);
}

inline Tensor total_loss(const Tensor& l_sic_mod, const Tensor& l_sim) {
    return add(l_sic_mod, l_sim);
}

}  // namespace c2fa
