#include "cna/pseudo_label.hpp"

#include <stdexcept>

namespace cna {

std::size_t argmax_lowest(const std::vector<double>& v) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.size(); ++i)
        if (v[i] > v[best]) best = i;
    return best;
}

PseudoLabel soft_vote(const std::vector<double>& query, const FeatureQueue& queue,
                      std::size_t k) {
    if (queue.size() < k || k == 0)
        throw std::invalid_argument("soft_vote: queue is cold for k=" + std::to_string(k));
    const std::vector<std::size_t> nn = queue.knn(query, k);
    std::vector<double> probs(queue.n_classes(), 0.0);
    for (std::size_t idx : nn) {
        const auto& p = queue.entry(idx).probs;
        for (std::size_t c = 0; c < probs.size(); ++c) probs[c] += p[c];
    }
    for (double& p : probs) p /= static_cast<double>(k);
    const std::size_t label = argmax_lowest(probs);
    return PseudoLabel{std::move(probs), label};
}

} // namespace cna
