#pragma once

#include "cna/memory_queue.hpp"

#include <vector>

namespace cna {

struct PseudoLabel {
    std::vector<double> probs; // simplex vector, mean of the voters
    std::size_t label;         // argmax, lowest index on ties
};

std::size_t argmax_lowest(const std::vector<double>& v);

// Soft voting: average the stored class probabilities of the k most similar
// queue entries. Rejects a queue shorter than k; the adaptation loop gates
// cold queues and falls back to the model argmax.
PseudoLabel soft_vote(const std::vector<double>& query, const FeatureQueue& queue,
                      std::size_t k);

} // namespace cna
