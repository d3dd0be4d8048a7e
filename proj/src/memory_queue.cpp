#include "cna/memory_queue.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace cna {

namespace {

constexpr double kQueueTol = 1e-9;

double norm2(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

} // namespace

FeatureQueue::FeatureQueue(std::size_t capacity, std::size_t dim, std::size_t n_classes)
    : capacity_(capacity), dim_(dim), n_classes_(n_classes) {
    if (capacity == 0) throw std::invalid_argument("FeatureQueue: capacity must be positive");
}

void FeatureQueue::push(std::vector<Entry> entries) {
    for (const Entry& e : entries) {
        if (e.feature.size() != dim_ || e.probs.size() != n_classes_)
            throw std::invalid_argument("FeatureQueue::push: entry dimension mismatch");
        if (std::abs(norm2(e.feature) - 1.0) > kQueueTol)
            throw std::invalid_argument("FeatureQueue::push: feature is not unit-norm");
        double s = 0.0;
        for (double p : e.probs) {
            if (p < 0.0) throw std::invalid_argument("FeatureQueue::push: negative probability");
            s += p;
        }
        if (std::abs(s - 1.0) > kQueueTol)
            throw std::invalid_argument("FeatureQueue::push: probs do not sum to 1");
    }
    for (Entry& e : entries) entries_.push_back(std::move(e));
    while (entries_.size() > capacity_) entries_.pop_front();
}

std::vector<std::size_t> FeatureQueue::knn(const std::vector<double>& query,
                                           std::size_t k) const {
    if (k == 0 || k > entries_.size())
        throw std::invalid_argument("FeatureQueue::knn: k out of range for queue length " +
                                    std::to_string(entries_.size()));
    if (query.size() != dim_) throw std::invalid_argument("FeatureQueue::knn: query width");
    std::vector<std::pair<double, std::size_t>> sims(entries_.size());
    for (std::size_t i = 0; i < entries_.size(); ++i) {
        double s = 0.0;
        const auto& f = entries_[i].feature;
        for (std::size_t d = 0; d < dim_; ++d) s += query[d] * f[d];
        sims[i] = {s, i};
    }
    // descending similarity, lower index wins ties
    std::partial_sort(sims.begin(), sims.begin() + static_cast<std::ptrdiff_t>(k), sims.end(),
                      [](const auto& a, const auto& b) {
                          if (a.first != b.first) return a.first > b.first;
                          return a.second < b.second;
                      });
    std::vector<std::size_t> out(k);
    for (std::size_t i = 0; i < k; ++i) out[i] = sims[i].second;
    return out;
}

bool FeatureQueue::is_warm(std::size_t threshold) const {
    if (threshold == 0) throw std::invalid_argument("FeatureQueue::is_warm: threshold >= 1");
    return entries_.size() >= threshold;
}

KeyQueue::KeyQueue(std::size_t capacity, std::size_t dim, std::size_t n_classes)
    : capacity_(capacity), dim_(dim), n_classes_(n_classes) {
    if (capacity == 0) throw std::invalid_argument("KeyQueue: capacity must be positive");
}

void KeyQueue::push(std::vector<Entry> entries) {
    for (const Entry& e : entries) {
        if (e.key.size() != dim_)
            throw std::invalid_argument("KeyQueue::push: key dimension mismatch");
        if (e.pseudo_label >= n_classes_)
            throw std::invalid_argument("KeyQueue::push: pseudo-label out of range");
    }
    for (Entry& e : entries) entries_.push_back(std::move(e));
    while (entries_.size() > capacity_) entries_.pop_front();
}

} // namespace cna
