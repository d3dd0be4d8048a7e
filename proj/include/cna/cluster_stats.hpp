#pragma once

#include <cstddef>
#include <vector>

namespace cna {

// Per-class prototype (posterior-weighted, L2-normalized mean) and scalar
// variance of the target features around it.
struct ClusterStats {
    std::vector<std::vector<double>> mu; // C unit-norm prototype rows
    std::vector<double> sigma;           // C positive scalars
    std::vector<std::size_t> fallback_classes; // classes with no posterior mass this round
};

struct CleanProbability {
    std::vector<double> gamma; // responsibility over clusters, sums to 1
    double clean;              // gamma[assigned label]
};

enum class RegionTag { Clean, Noisy };

// mu_k = l2_normalize(sum_i p_ik f_i / sum_i p_ik)
// sigma_k = sum_i p_ik |f_i - mu_k|^2 / sum_i p_ik, floored at sigma_min.
// A class whose total posterior mass is below 1e-8 keeps its previous stats
// (uniform-direction fallback when there are none) and is listed in
// fallback_classes for the run log.
ClusterStats compute_stats(const std::vector<std::vector<double>>& features,
                           const std::vector<std::vector<double>>& posteriors,
                           std::size_t n_classes, double sigma_min = 1e-4,
                           const ClusterStats* previous = nullptr);

// gamma_k = softmax_k((f . mu_k - 1) / sigma_k), the exact normalized
// isotropic-gaussian responsibilities for unit vectors; clean = gamma[label].
CleanProbability clean_probability(const std::vector<double>& feature, std::size_t label,
                                   const ClusterStats& stats);

// Clean iff clean >= alpha (the boundary itself is clean).
RegionTag partition(double clean, double alpha);

} // namespace cna
