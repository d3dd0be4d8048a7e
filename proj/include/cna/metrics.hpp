#pragma once

#include "cna/cluster_stats.hpp"

#include <cstddef>
#include <optional>
#include <vector>

namespace cna {

struct AccuracyResult {
    double overall;
    double per_class_avg; // mean of within-class accuracies, absent classes excluded
};

struct ReliabilityBin {
    std::size_t count = 0;
    double mean_confidence = 0.0;
    double mean_accuracy = 0.0;
};

// 10 bins partitioning (0,1] left-open: bin b covers (b/10, (b+1)/10].
struct ReliabilityTable {
    std::vector<ReliabilityBin> bins;
    double ece = 0.0;
    double mce = 0.0;
};

// 0/0 cases are reported as absent rather than forced to a number.
struct NoiseDetectionScores {
    std::optional<double> accuracy;
    std::optional<double> recall;
    std::optional<double> precision;
};

AccuracyResult accuracy(const std::vector<std::size_t>& predictions,
                        const std::vector<long>& labels);

ReliabilityTable calibration(const std::vector<double>& confidences,
                             const std::vector<bool>& correct, std::size_t n_bins = 10);

// Ground truth "clean" means the pseudo-label matches the true label;
// predicted "clean" is the region tag. "Clean" is the positive class.
NoiseDetectionScores noise_detection(const std::vector<RegionTag>& tags,
                                     const std::vector<std::size_t>& pseudo_labels,
                                     const std::vector<long>& true_labels);

} // namespace cna
