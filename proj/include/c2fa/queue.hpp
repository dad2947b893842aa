#pragma once

// Fixed-capacity FIFO queue of image embeddings. Each entry keeps the unit
// cls vector (contrastive candidate) and the full token matrix, so a queue
// entry can be fused as a hard negative without re-encoding; the image
// encoder is frozen, which is what makes stored tokens valid indefinitely.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "c2fa/common.hpp"
#include "c2fa/rng.hpp"
#include "c2fa/tensor.hpp"

namespace c2fa {

struct QueueEntry {
    uint64_t image_id = 0;
    std::vector<double> cls;     // length d, unit norm
    std::vector<double> tokens;  // token_rows x d, row-major
};

struct QueueSnapshot {
    Tensor cls;  // fill x d, oldest first; 0 x d when empty
    std::vector<uint64_t> ids;
    std::vector<Tensor> tokens;  // one token_rows x d matrix per entry
};

class EmbeddingQueue {
public:
    EmbeddingQueue(int capacity, int d, int token_rows)
        : capacity_(capacity), d_(d), token_rows_(token_rows) {
        if (capacity < 1) throw DomainError("EmbeddingQueue: capacity must be positive");
        if (d < 1 || token_rows < 1)
            throw DomainError("EmbeddingQueue: entry dimensions must be positive");
        entries_.resize(static_cast<size_t>(capacity));
    }

    int capacity() const { return capacity_; }
    int fill() const { return fill_; }
    int dim() const { return d_; }
    int token_rows() const { return token_rows_; }

    // Appends oldest-first; once full, each append evicts the current oldest.
    void enqueue_batch(const std::vector<QueueEntry>& batch) {
        if (batch.size() > static_cast<size_t>(capacity_))
            throw ContractError("enqueue_batch: batch of " + std::to_string(batch.size()) +
                                " exceeds capacity " + std::to_string(capacity_));
        for (const auto& e : batch) {
            validate_entry(e);
            if (fill_ < capacity_) {
                entries_[static_cast<size_t>((head_ + fill_) % capacity_)] = e;
                ++fill_;
            } else {
                entries_[static_cast<size_t>(head_)] = e;
                head_ = (head_ + 1) % capacity_;
            }
        }
    }

    // Deep copy, oldest first; later enqueues cannot touch it.
    QueueSnapshot snapshot() const {
        QueueSnapshot s;
        std::vector<double> cls_rows;
        cls_rows.reserve(static_cast<size_t>(fill_) * d_);
        s.ids.reserve(fill_);
        s.tokens.reserve(fill_);
        for (int i = 0; i < fill_; ++i) {
            const auto& e = entries_[static_cast<size_t>((head_ + i) % capacity_)];
            cls_rows.insert(cls_rows.end(), e.cls.begin(), e.cls.end());
            s.ids.push_back(e.image_id);
            s.tokens.push_back(Tensor::from_data(token_rows_, d_, e.tokens));
        }
        s.cls = Tensor::from_data(fill_, d_, std::move(cls_rows));
        return s;
    }

    std::vector<QueueEntry> export_entries() const {
        std::vector<QueueEntry> out;
        out.reserve(fill_);
        for (int i = 0; i < fill_; ++i)
            out.push_back(entries_[static_cast<size_t>((head_ + i) % capacity_)]);
        return out;
    }

    // Replaces contents with the given oldest-first entries.
    void restore(const std::vector<QueueEntry>& entries) {
        if (entries.size() > static_cast<size_t>(capacity_))
            throw ContractError("restore: " + std::to_string(entries.size()) +
                                " entries exceed capacity " + std::to_string(capacity_));
        head_ = 0;
        fill_ = 0;
        for (auto& slot : entries_) slot = QueueEntry{};
        for (const auto& e : entries) {
            validate_entry(e);
            entries_[static_cast<size_t>(fill_++)] = e;
        }
    }

private:
    void validate_entry(const QueueEntry& e) const {
        if (e.cls.size() != static_cast<size_t>(d_) ||
            e.tokens.size() != static_cast<size_t>(token_rows_) * d_)
            throw DimensionError("enqueue_batch: entry for image " +
                                 std::to_string(e.image_id) + " has cls size " +
                                 std::to_string(e.cls.size()) + ", tokens size " +
                                 std::to_string(e.tokens.size()));
        double norm2 = 0.0;
        for (double v : e.cls) norm2 += v * v;
        if (std::abs(std::sqrt(norm2) - 1.0) > 1e-6)
            throw ContractError("enqueue_batch: cls for image " + std::to_string(e.image_id) +
                                " has norm " + std::to_string(std::sqrt(norm2)));
    }

    int capacity_;
    int d_;
    int token_rows_;
    std::vector<QueueEntry> entries_;
    int head_ = 0;
    int fill_ = 0;
};

// One multinomial draw over a similarity-derived probability row, with all
// candidates matching the anchor's positive image id masked out. Reuses the
// caller's probabilities as-is (renormalized over the eligible slots), so no
// extra forward pass is involved.
inline size_t sample_hard_negative(const std::vector<double>& probs,
                                   const std::vector<uint64_t>& candidate_ids,
                                   uint64_t positive_id, Rng& rng) {
    if (probs.size() != candidate_ids.size())
        throw DimensionError("sample_hard_negative: " + std::to_string(probs.size()) +
                             " probabilities for " + std::to_string(candidate_ids.size()) +
                             " candidates");
    double total = 0.0;
    for (size_t i = 0; i < probs.size(); ++i) {
        if (!(probs[i] >= 0.0))
            throw DomainError("sample_hard_negative: invalid probability at index " +
                              std::to_string(i));
        if (candidate_ids[i] != positive_id) total += probs[i];
    }
    if (total <= 0.0)
        throw SamplingError("sample_hard_negative: no eligible candidate with positive mass");

    const double u = rng.next_double() * total;
    double cum = 0.0;
    size_t last_eligible = probs.size();
    for (size_t i = 0; i < probs.size(); ++i) {
        if (candidate_ids[i] == positive_id) continue;
        cum += probs[i];
        if (probs[i] > 0.0) last_eligible = i;
        if (u < cum) return i;
    }
    if (last_eligible == probs.size())
        throw SamplingError("sample_hard_negative: no eligible candidate with positive mass");
    return last_eligible;  // rounding fell off the cumulative sum
}

}  // namespace c2fa
