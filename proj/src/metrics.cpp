#include "cna/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace cna {

AccuracyResult accuracy(const std::vector<std::size_t>& predictions,
                        const std::vector<long>& labels) {
    if (predictions.empty() || predictions.size() != labels.size())
        throw std::invalid_argument("accuracy: empty or mismatched inputs");
    long max_label = 0;
    for (long l : labels) {
        if (l < 0) throw std::invalid_argument("accuracy: unlabeled sample");
        max_label = std::max(max_label, l);
    }
    std::vector<std::size_t> per_class_total(static_cast<std::size_t>(max_label) + 1, 0);
    std::vector<std::size_t> per_class_hit(per_class_total.size(), 0);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const auto c = static_cast<std::size_t>(labels[i]);
        ++per_class_total[c];
        if (predictions[i] == c) {
            ++per_class_hit[c];
            ++hits;
        }
    }
    AccuracyResult r;
    r.overall = static_cast<double>(hits) / static_cast<double>(labels.size());
    double sum = 0.0;
    std::size_t present = 0;
    for (std::size_t c = 0; c < per_class_total.size(); ++c) {
        if (per_class_total[c] == 0) continue;
        sum += static_cast<double>(per_class_hit[c]) / static_cast<double>(per_class_total[c]);
        ++present;
    }
    r.per_class_avg = sum / static_cast<double>(present);
    return r;
}

ReliabilityTable calibration(const std::vector<double>& confidences,
                             const std::vector<bool>& correct, std::size_t n_bins) {
    if (confidences.size() != correct.size())
        throw std::invalid_argument("calibration: mismatched inputs");
    if (n_bins == 0) throw std::invalid_argument("calibration: need at least one bin");
    ReliabilityTable table;
    table.bins.assign(n_bins, ReliabilityBin{});
    std::vector<double> conf_sum(n_bins, 0.0);
    std::vector<std::size_t> hit_sum(n_bins, 0);
    for (std::size_t i = 0; i < confidences.size(); ++i) {
        const double c = confidences[i];
        if (!(c > 0.0 && c <= 1.0))
            throw std::invalid_argument("calibration: confidence outside (0,1]");
        // left-open bins: (b/n, (b+1)/n]
        std::size_t b = static_cast<std::size_t>(std::ceil(c * static_cast<double>(n_bins))) - 1;
        if (b >= n_bins) b = n_bins - 1;
        ++table.bins[b].count;
        conf_sum[b] += c;
        if (correct[i]) ++hit_sum[b];
    }
    const double n = static_cast<double>(confidences.size());
    for (std::size_t b = 0; b < n_bins; ++b) {
        if (table.bins[b].count == 0) continue;
        const double cnt = static_cast<double>(table.bins[b].count);
        table.bins[b].mean_confidence = conf_sum[b] / cnt;
        table.bins[b].mean_accuracy = static_cast<double>(hit_sum[b]) / cnt;
        const double gap = std::abs(table.bins[b].mean_accuracy - table.bins[b].mean_confidence);
        table.ece += (cnt / n) * gap;
        table.mce = std::max(table.mce, gap);
    }
    return table;
}

NoiseDetectionScores noise_detection(const std::vector<RegionTag>& tags,
                                     const std::vector<std::size_t>& pseudo_labels,
                                     const std::vector<long>& true_labels) {
    if (tags.size() != pseudo_labels.size() || tags.size() != true_labels.size())
        throw std::invalid_argument("noise_detection: mismatched inputs");
    std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
    for (std::size_t i = 0; i < tags.size(); ++i) {
        const bool truth_clean =
            true_labels[i] >= 0 && pseudo_labels[i] == static_cast<std::size_t>(true_labels[i]);
        const bool predicted_clean = tags[i] == RegionTag::Clean;
        if (predicted_clean && truth_clean) ++tp;
        else if (predicted_clean && !truth_clean) ++fp;
        else if (!predicted_clean && !truth_clean) ++tn;
        else ++fn;
    }
    NoiseDetectionScores s;
    const std::size_t total = tp + fp + tn + fn;
    if (total > 0)
        s.accuracy = static_cast<double>(tp + tn) / static_cast<double>(total);
    if (tp + fn > 0) s.recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
    if (tp + fp > 0) s.precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    return s;
}

} // namespace cna
