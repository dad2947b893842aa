#pragma once

// Two-stage inference: dense cosine ranking over candidate embeddings, then
// matching-head reranking of the top-k, plus R@K evaluation in both
// directions and report emission (JSON + aligned text table).

#include <algorithm>
#include <cstdint>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "c2fa/common.hpp"
#include "c2fa/dataset.hpp"
#include "c2fa/encoders.hpp"
#include "c2fa/tensor.hpp"

namespace c2fa {

// Dense dot-product similarity between two unit-row embedding banks;
// cosine similarity given the normalization.
inline Tensor pairwise_similarity(const Tensor& speech_cls, const Tensor& image_cls) {
    if (speech_cls.cols() != image_cls.cols())
        throw DimensionError("pairwise_similarity: " + speech_cls.shape_str() + " vs " +
                             image_cls.shape_str());
    if (speech_cls.rows() == 0 || image_cls.rows() == 0)
        throw ContractError("pairwise_similarity: empty bank");
    for (const Tensor* t : {&speech_cls, &image_cls})
        for (size_t r = 0; r < t->rows(); ++r) {
            double sq = 0.0;
            for (size_t c = 0; c < t->cols(); ++c) sq += t->at(r, c) * t->at(r, c);
            if (std::abs(std::sqrt(sq) - 1.0) > 1e-6)
                throw ContractError("pairwise_similarity: row " + std::to_string(r) +
                                    " is not unit norm");
        }
    NoGradGuard guard;
    return matmul_nt(speech_cls, image_cls);
}

// Encoded items of one modality, ready for both retrieval stages.
struct RetrievalBank {
    Tensor cls;     // n x d, unit rows
    Tensor tokens;  // (n * tokens_per_item) x d
    std::vector<uint64_t> ids;
    int tokens_per_item = 0;

    size_t size() const { return ids.size(); }
    Tensor cls_row(size_t i) const { return slice_rows(cls, i, 1); }
    Tensor token_rows(size_t i) const {
        return slice_rows(tokens, i * static_cast<size_t>(tokens_per_item), tokens_per_item);
    }
};

inline RetrievalBank embed_images(const PairedDataset& split, const ModelState& st) {
    if (split.images.empty()) throw ContractError("embed_images: split '" + split.split + "' is empty");
    std::vector<double> feats;
    feats.reserve(split.images.size() * split.image_tokens * split.feature_dim);
    RetrievalBank bank;
    for (const auto& img : split.images) {
        bank.ids.push_back(img.id);
        const auto& d = img.tokens.data();
        feats.insert(feats.end(), d.begin(), d.end());
    }
    const Tensor stacked =
        Tensor::from_data(split.images.size() * split.image_tokens, split.feature_dim,
                          std::move(feats));
    const auto enc = encode_image_batch(stacked, static_cast<int>(split.images.size()), st);
    bank.cls = enc.cls;
    bank.tokens = enc.tokens;
    bank.tokens_per_item = enc.tokens_per_item;
    return bank;
}

inline RetrievalBank embed_speeches(const PairedDataset& split, const ModelState& st) {
    if (split.speeches.empty())
        throw ContractError("embed_speeches: split '" + split.split + "' is empty");
    NoGradGuard guard;
    std::vector<Tensor> layers(split.speech_layers);
    for (int l = 0; l < split.speech_layers; ++l) {
        std::vector<double> data;
        data.reserve(split.speeches.size() * split.speech_tokens * split.feature_dim);
        for (const auto& sp : split.speeches) {
            const auto& d = sp.layers[l].data();
            data.insert(data.end(), d.begin(), d.end());
        }
        layers[l] = Tensor::from_data(split.speeches.size() * split.speech_tokens,
                                      split.feature_dim, std::move(data));
    }
    RetrievalBank bank;
    for (const auto& sp : split.speeches) bank.ids.push_back(sp.id);
    const Tensor summed = weighted_layer_sum(layers, st.student.layer_logits);
    const auto enc =
        encode_speech_batch(summed, static_cast<int>(split.speeches.size()), st, false);
    bank.cls = enc.cls;
    bank.tokens = enc.tokens;
    bank.tokens_per_item = enc.tokens_per_item;
    return bank;
}

// One query item for two-stage retrieval.
struct QueryItem {
    Tensor cls;     // 1 x d
    Tensor tokens;  // N x d
};

// Stage 1 ranks every candidate by dense similarity; stage 2 re-ranks the
// top-k by the matching head's match probability. Candidates beyond k keep
// their stage-1 order; all ties break toward the lower id. `query_is_speech`
// fixes the (speech, image) fusion order for both directions.
inline std::vector<uint64_t> two_stage_retrieve(const QueryItem& query,
                                                const RetrievalBank& candidates, int k,
                                                const ModelState& st, bool query_is_speech) {
    if (k < 1) throw DomainError("two_stage_retrieve: k must be >= 1");
    if (candidates.size() == 0) throw ContractError("two_stage_retrieve: empty candidate bank");
    if (query.cls.cols() != candidates.cls.cols())
        throw DimensionError("two_stage_retrieve: query " + query.cls.shape_str() +
                             " vs bank " + candidates.cls.shape_str());
    NoGradGuard guard;
    const size_t n = candidates.size();
    const Tensor sims = matmul_nt(query.cls, candidates.cls);
    const auto& s = sims.data();

    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        if (s[a] != s[b]) return s[a] > s[b];
        return candidates.ids[a] < candidates.ids[b];
    });

    const size_t kk = std::min(static_cast<size_t>(k), n);  // clipped, not an error
    std::vector<FusionPair> pairs;
    pairs.reserve(kk);
    for (size_t i = 0; i < kk; ++i) {
        const size_t c = order[i];
        if (query_is_speech)
            pairs.push_back({query.cls, query.tokens, candidates.cls_row(c),
                             candidates.token_rows(c)});
        else
            pairs.push_back({candidates.cls_row(c), candidates.token_rows(c), query.cls,
                             query.tokens});
    }
    const Tensor probs = sim_head(fuse_multimodal_batch(pairs, st), st);
    std::vector<double> match_prob(n, 0.0);  // column 1 of the head output
    for (size_t i = 0; i < kk; ++i) match_prob[order[i]] = probs.at(i, 1);
    std::sort(order.begin(), order.begin() + kk, [&](size_t a, size_t b) {
        if (match_prob[a] != match_prob[b]) return match_prob[a] > match_prob[b];
        return candidates.ids[a] < candidates.ids[b];
    });

    std::vector<uint64_t> ranked(n);
    for (size_t i = 0; i < n; ++i) ranked[i] = candidates.ids[order[i]];
    return ranked;
}

// Fraction of queries with at least one ground-truth id in the top K.
inline double recall_at_k(const std::vector<std::vector<uint64_t>>& rankings,
                          const std::vector<std::vector<uint64_t>>& ground_truth, int top_k) {
    if (rankings.size() != ground_truth.size())
        throw DimensionError("recall_at_k: " + std::to_string(rankings.size()) +
                             " rankings for " + std::to_string(ground_truth.size()) + " queries");
    if (rankings.empty()) throw ContractError("recall_at_k: no queries");
    if (top_k < 1) throw DomainError("recall_at_k: K must be >= 1");
    size_t hits = 0;
    for (size_t q = 0; q < rankings.size(); ++q) {
        if (ground_truth[q].empty())
            throw ContractError("recall_at_k: query " + std::to_string(q) +
                                " has no ground truth");
        const size_t upto = std::min(static_cast<size_t>(top_k), rankings[q].size());
        bool hit = false;
        for (size_t i = 0; i < upto && !hit; ++i)
            for (uint64_t gt : ground_truth[q])
                if (rankings[q][i] == gt) {
                    hit = true;
                    break;
                }
        if (hit) ++hits;
    }
    return static_cast<double>(hits) / rankings.size();
}

struct RecallTriple {
    double r1 = 0.0;
    double r5 = 0.0;
    double r10 = 0.0;
};

struct EvalReport {
    RecallTriple speech_to_image;
    RecallTriple image_to_speech;
    RecallTriple mean;
    int k = 0;
    int n_speech_queries = 0;
    int n_image_queries = 0;
    uint64_t seed = 0;
    std::string config_hash;
};

namespace detail {

inline RecallTriple recall_triple(const std::vector<std::vector<uint64_t>>& rankings,
                                  const std::vector<std::vector<uint64_t>>& gt) {
    return {recall_at_k(rankings, gt, 1), recall_at_k(rankings, gt, 5),
            recall_at_k(rankings, gt, 10)};
}

}  // namespace detail

// Both retrieval directions over one split with two-stage ranking; the mean
// row is the arithmetic mean of the two directions.
inline EvalReport evaluate(const ModelState& st, const PairedDataset& split, int k,
                           uint64_t seed = 0, std::string config_hash = "") {
    if (split.images.empty() || split.speeches.empty())
        throw ContractError("evaluate: split '" + split.split + "' is empty");
    const RetrievalBank images = embed_images(split, st);
    const RetrievalBank speeches = embed_speeches(split, st);

    std::vector<std::vector<uint64_t>> s2i_rankings, s2i_gt;
    for (size_t q = 0; q < speeches.size(); ++q) {
        const QueryItem query{speeches.cls_row(q), speeches.token_rows(q)};
        s2i_rankings.push_back(two_stage_retrieve(query, images, k, st, true));
        s2i_gt.push_back({split.speeches[q].image_id});
    }

    std::unordered_map<uint64_t, std::vector<uint64_t>> captions;
    for (const auto& sp : split.speeches) captions[sp.image_id].push_back(sp.id);
    std::vector<std::vector<uint64_t>> i2s_rankings, i2s_gt;
    for (size_t q = 0; q < images.size(); ++q) {
        const QueryItem query{images.cls_row(q), images.token_rows(q)};
        i2s_rankings.push_back(two_stage_retrieve(query, speeches, k, st, false));
        i2s_gt.push_back(captions[split.images[q].id]);  // all captions count as hits
    }

    EvalReport report;
    report.speech_to_image = detail::recall_triple(s2i_rankings, s2i_gt);
    report.image_to_speech = detail::recall_triple(i2s_rankings, i2s_gt);
    report.mean = {0.5 * (report.speech_to_image.r1 + report.image_to_speech.r1),
                   0.5 * (report.speech_to_image.r5 + report.image_to_speech.r5),
                   0.5 * (report.speech_to_image.r10 + report.image_to_speech.r10)};
    report.k = k;
    report.n_speech_queries = static_cast<int>(speeches.size());
    report.n_image_queries = static_cast<int>(images.size());
    report.seed = seed;
    report.config_hash = std::move(config_hash);
    return report;
}

inline nlohmann::json report_to_json(const EvalReport& r) {
    const auto triple = [](const RecallTriple& t) {
        return nlohmann::json{{"r1", t.r1}, {"r5", t.r5}, {"r10", t.r10}};
    };
    return nlohmann::json{
        {"speech_to_image", triple(r.speech_to_image)},
        {"image_to_speech", triple(r.image_to_speech)},
        {"mean", triple(r.mean)},
        {"k", r.k},
        {"n_queries",
         {{"speech_to_image", r.n_speech_queries}, {"image_to_speech", r.n_image_queries}}},
        {"config_hash", r.config_hash},
        {"seed", r.seed}};
}

inline std::string report_table(const EvalReport& r) {
    std::ostringstream out;
    out << std::fixed << std::setprecision(4);
    const auto row = [&](const std::string& label, const RecallTriple& t) {
        out << std::left << std::setw(18) << label << std::right << std::setw(8) << t.r1
            << std::setw(8) << t.r5 << std::setw(8) << t.r10 << "\n";
    };
    out << std::left << std::setw(18) << "" << std::right << std::setw(8) << "R@1"
        << std::setw(8) << "R@5" << std::setw(8) << "R@10" << "\n";
    row("speech -> image", r.speech_to_image);
    row("image -> speech", r.image_to_speech);
    row("mean", r.mean);
    return out.str();
}

}  // namespace c2fa
