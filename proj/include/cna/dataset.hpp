#pragma once

#include "cna/rng.hpp"
#include "cna/tensor.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace cna {

// Synthetic domain-shift recipe: gaussian class blobs for the source, the
// same class structure rotated in a seeded random 2-D plane, translated and
// re-noised for the target.
struct ShiftSpec {
    std::size_t n_classes = 6;
    std::size_t dim = 16;
    std::size_t per_class = 200; // samples per class per domain
    double separation = 1.0;     // class-center radius on the unit sphere
    double spread = 0.35;        // within-class standard deviation
    double rotation_deg = 30.0;
    std::vector<double> translation; // empty = zero vector
    double extra_noise = 0.1;        // additional target noise scale
    std::uint64_t seed = 1;
};

struct LabeledSet {
    Tensor inputs;                 // n x dim
    std::vector<long> labels;      // -1 = evaluation-unavailable
    std::string domain_tag;

    std::size_t size() const { return inputs.rows(); }
    bool labels_available() const;
};

// Inputs-only view handed to the adaptation loop; target labels stay with
// the metrics side.
struct TargetView {
    const Tensor* inputs;
    std::size_t size() const { return inputs->rows(); }
};

inline TargetView unlabeled_view(const LabeledSet& s) { return TargetView{&s.inputs}; }

std::pair<LabeledSet, LabeledSet> generate_shift(const ShiftSpec& spec);

// Stable concatenation; the pooled set keeps no per-domain information.
LabeledSet pool_sources(const std::vector<LabeledSet>& sets);

// CSV with header f0,...,f{D-1},label[,domain]; ragged or non-numeric rows
// rejected with their line number.
LabeledSet load_csv(const std::string& path);
void save_csv(const LabeledSet& set, const std::string& path);

// Large embedding dumps: flat little-endian float64 payload plus a JSON
// sidecar with the shape and column names.
void save_binary(const Tensor& data, const std::vector<std::string>& columns,
                 const std::string& prefix);

} // namespace cna
