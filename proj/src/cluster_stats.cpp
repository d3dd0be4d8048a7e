#include "cna/cluster_stats.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace cna {

namespace {
constexpr double kMassFloor = 1e-8;
constexpr double kNormEps = 1e-12;
} // namespace

ClusterStats compute_stats(const std::vector<std::vector<double>>& features,
                           const std::vector<std::vector<double>>& posteriors,
                           std::size_t n_classes, double sigma_min,
                           const ClusterStats* previous) {
    if (features.empty() || features.size() != posteriors.size())
        throw std::invalid_argument("compute_stats: empty or mismatched batch");
    const std::size_t dim = features.front().size();

    ClusterStats stats;
    stats.mu.assign(n_classes, std::vector<double>(dim, 0.0));
    stats.sigma.assign(n_classes, sigma_min);

    std::vector<double> mass(n_classes, 0.0);
    for (std::size_t i = 0; i < features.size(); ++i) {
        if (posteriors[i].size() != n_classes)
            throw std::invalid_argument("compute_stats: posterior width mismatch");
        for (std::size_t k = 0; k < n_classes; ++k) {
            const double p = posteriors[i][k];
            mass[k] += p;
            for (std::size_t d = 0; d < dim; ++d) stats.mu[k][d] += p * features[i][d];
        }
    }

    for (std::size_t k = 0; k < n_classes; ++k) {
        if (mass[k] < kMassFloor) {
            stats.fallback_classes.push_back(k);
            if (previous && k < previous->mu.size() && !previous->mu[k].empty()) {
                stats.mu[k] = previous->mu[k];
                stats.sigma[k] = previous->sigma[k];
            } else {
                // first computation: uniform direction, neutral spread
                stats.mu[k].assign(dim, 1.0 / std::sqrt(static_cast<double>(dim)));
                stats.sigma[k] = 1.0;
            }
            continue;
        }
        double norm = 0.0;
        for (std::size_t d = 0; d < dim; ++d) {
            stats.mu[k][d] /= mass[k];
            norm += stats.mu[k][d] * stats.mu[k][d];
        }
        norm = std::sqrt(norm);
        const double denom = std::max(norm, kNormEps);
        for (std::size_t d = 0; d < dim; ++d) stats.mu[k][d] /= denom;

        double var = 0.0;
        for (std::size_t i = 0; i < features.size(); ++i) {
            const double p = posteriors[i][k];
            if (p == 0.0) continue;
            double sq = 0.0;
            for (std::size_t d = 0; d < dim; ++d) {
                const double diff = features[i][d] - stats.mu[k][d];
                sq += diff * diff;
            }
            var += p * sq;
        }
        stats.sigma[k] = std::max(var / mass[k], sigma_min);
    }
    return stats;
}

CleanProbability clean_probability(const std::vector<double>& feature, std::size_t label,
                                   const ClusterStats& stats) {
    const std::size_t C = stats.mu.size();
    if (label >= C) throw std::invalid_argument("clean_probability: label out of range");
    std::vector<double> scores(C, 0.0);
    for (std::size_t k = 0; k < C; ++k) {
        double dot = 0.0;
        for (std::size_t d = 0; d < feature.size(); ++d) dot += feature[d] * stats.mu[k][d];
        // exact log-density of the isotropic gaussian up to a shared constant:
        // -|f - mu_k|^2 / (2 sigma_k) = (f.mu_k - 1) / sigma_k for unit vectors
        scores[k] = (dot - 1.0) / stats.sigma[k];
    }
    const double m = *std::max_element(scores.begin(), scores.end());
    double z = 0.0;
    for (double& s : scores) {
        s = std::exp(s - m);
        z += s;
    }
    CleanProbability cp;
    cp.gamma.resize(C);
    for (std::size_t k = 0; k < C; ++k) cp.gamma[k] = scores[k] / z;
    cp.clean = cp.gamma[label];
    return cp;
}

RegionTag partition(double clean, double alpha) {
    if (!(clean >= 0.0 && clean <= 1.0) || !(alpha >= 0.0 && alpha <= 1.0))
        throw std::invalid_argument("partition: clean and alpha must lie in [0,1]");
    return clean >= alpha ? RegionTag::Clean : RegionTag::Noisy;
}

} // namespace cna
