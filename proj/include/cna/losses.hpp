#pragma once

#include "cna/cluster_stats.hpp"
#include "cna/memory_queue.hpp"
#include "cna/rng.hpp"
#include "cna/tensor.hpp"

#include <array>
#include <cstddef>
#include <vector>

namespace cna {

// One mixup construction over a batch: convex combinations of each sample
// with a permutation partner, soft-label blend of the two pseudo-labels,
// and the exponential clean-probability weight.
struct MixupBatch {
    std::vector<std::size_t> partner;
    std::vector<double> lambda;       // one draw per sample, in [0,1]
    Tensor mixed_input;               // B x D
    Tensor mixed_target;              // B x C, rows sum to 1
    std::vector<double> mixed_clean;  // lambda-blend of the parents' clean probs
    std::vector<double> weight;       // exp(mixed_clean), in [1, e]
};

struct LossReport {
    double l_cr = 0.0;
    double l_ccp = 0.0;
    double l_div = 0.0;
    double l_prt = 0.0;
    double l_inst = 0.0;
    double l_ctr = 0.0;
    double total = 0.0;
    std::size_t n_clean = 0;
    std::size_t n_noisy = 0;
};

struct LossNodes {
    NodeId cr, ccp, div, prt, inst, ctr, total;
};

// Deterministic core: partners and lambdas supplied by the caller.
MixupBatch make_mixup_with(const Tensor& inputs, const std::vector<std::size_t>& labels,
                           std::size_t n_classes, const std::vector<double>& clean_probs,
                           std::vector<std::size_t> partners, std::vector<double> lambdas);

// Partners from a random permutation, lambda ~ Uniform(0,1) per sample.
// Rejects batches of fewer than two samples.
MixupBatch make_mixup(const Tensor& inputs, const std::vector<std::size_t>& labels,
                      std::size_t n_classes, const std::vector<double>& clean_probs, Rng& rng);

// Mean cross-entropy against the pseudo-label over Clean-tagged samples
// only; a batch with no clean sample contributes a constant 0.
NodeId loss_clean_region(Graph& g, NodeId logits, const std::vector<std::size_t>& labels,
                         const std::vector<RegionTag>& tags);

// Cluster-compactness loss: soft-label cross-entropy of the mixed batch,
// each sample weighted by its mixup weight inside the mean.
NodeId loss_ccp(Graph& g, NodeId mixed_logits, const MixupBatch& mix);

// Negative entropy of the marginal prediction; minimizing it spreads the
// batch over classes.
NodeId loss_div(Graph& g, NodeId strong_logits);

// InfoNCE of each query against the class prototypes; the positive is the
// prototype of the query's pseudo-label and the denominator spans all
// prototypes.
NodeId loss_prototype_contrast(Graph& g, NodeId queries, const std::vector<std::size_t>& labels,
                               const ClusterStats& stats, double tau);

// InfoNCE of each query against its momentum key, with negatives drawn from
// the key queue restricted to entries whose stored pseudo-label is absent
// from the query's neighbor-label set. A query with no admissible negative
// contributes exactly 0 (positive-only); the count of such rows is reported
// through n_without_negatives.
NodeId loss_instance_contrast(Graph& g, NodeId queries, const Tensor& keys,
                              const KeyQueue& key_queue,
                              const std::vector<std::vector<std::size_t>>& neighbor_labels,
                              double tau, std::size_t* n_without_negatives = nullptr);

// total = g1 cr + g2 ccp + g3 div + g4 (prt + inst)
LossNodes loss_total(Graph& g, NodeId cr, NodeId ccp, NodeId div, NodeId prt, NodeId inst,
                     const std::array<double, 4>& gammas);

LossReport report_from(const Graph& g, const LossNodes& nodes, std::size_t n_clean,
                       std::size_t n_noisy);

} // namespace cna
