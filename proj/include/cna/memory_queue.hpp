#pragma once

#include "cna/tensor.hpp"

#include <deque>
#include <vector>

namespace cna {

// Fixed-capacity FIFO of (unit-norm feature, class-probability) pairs, the
// target feature memory the pseudo-labeling reads from. Oldest entries are
// evicted first. Similarity is a plain dot product, valid because all
// stored features and queries are unit-normalized.
class FeatureQueue {
public:
    struct Entry {
        std::vector<double> feature; // unit L2 norm (within 1e-9)
        std::vector<double> probs;   // sums to 1 (within 1e-9)
    };

    FeatureQueue(std::size_t capacity, std::size_t dim, std::size_t n_classes);

    void push(std::vector<Entry> entries);
    std::size_t size() const { return entries_.size(); }
    std::size_t capacity() const { return capacity_; }
    std::size_t dim() const { return dim_; }
    std::size_t n_classes() const { return n_classes_; }
    const Entry& entry(std::size_t i) const { return entries_[i]; }

    // Indices of the k entries maximizing dot(query, feature), descending
    // similarity, ties broken toward the lower (older) index.
    std::vector<std::size_t> knn(const std::vector<double>& query, std::size_t k) const;

    bool is_warm(std::size_t threshold) const;

private:
    std::size_t capacity_;
    std::size_t dim_;
    std::size_t n_classes_;
    std::deque<Entry> entries_;
};

// Fixed-capacity FIFO of (momentum-encoder key, pseudo-label) pairs feeding
// the instance-contrast negatives.
class KeyQueue {
public:
    struct Entry {
        std::vector<double> key;
        std::size_t pseudo_label;
    };

    KeyQueue(std::size_t capacity, std::size_t dim, std::size_t n_classes);

    void push(std::vector<Entry> entries);
    std::size_t size() const { return entries_.size(); }
    std::size_t capacity() const { return capacity_; }
    const Entry& entry(std::size_t i) const { return entries_[i]; }

private:
    std::size_t capacity_;
    std::size_t dim_;
    std::size_t n_classes_;
    std::deque<Entry> entries_;
};

} // namespace cna
