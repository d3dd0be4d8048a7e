#pragma once

#include "cna/rng.hpp"
#include "cna/tensor.hpp"

#include <cstdint>
#include <string>

namespace cna {

struct ModelConfig {
    std::size_t d_in = 16;
    std::size_t hidden = 64;
    std::size_t d_f = 32;
    std::size_t n_classes = 6;
    double tau_cls = 0.05;       // classifier cosine temperature
    double sigma_weak = 0.05;    // weak augmentation noise scale
    double sigma_strong = 0.2;   // strong augmentation noise scale
    double mask_fraction = 0.25; // strong augmentation zeroed-coordinate fraction
};

// Encoder g (two layers, output L2-normalized) + cosine classifier h with
// row-normalized class directions. The momentum copy uses the same type and
// is updated only through ema_update.
struct ModelParams {
    ModelConfig cfg;
    Tensor w1; // d_in x hidden
    Tensor b1; // hidden
    Tensor w2; // hidden x d_f
    Tensor b2; // d_f
    Tensor v;  // n_classes x d_f class directions

    static ModelParams init(const ModelConfig& cfg, Rng& rng);
};

enum class AugmentationKind { Weak, Strong, StrongAlt };

// Graph handles for one model's parameters attached as leaves.
struct ParamNodes {
    NodeId w1, b1, w2, b2, v;
};

ParamNodes attach_params(Graph& g, const ModelParams& p, bool trainable);

// z = l2_normalize(relu(x W1 + b1) W2 + b2), rows unit-norm
NodeId features_node(Graph& g, const ModelConfig& cfg, const ParamNodes& pn, NodeId x);
// logits[c] = (z . V_c / |V_c|) / tau_cls; rejects a zero class row
NodeId logits_node(Graph& g, const ModelConfig& cfg, const ParamNodes& pn, NodeId z);

// Plain (graph-free) forward passes for evaluation and detached pipelines.
// Same arithmetic path as the graph ops so values agree bit-for-bit.
Tensor eval_features(const ModelParams& p, const Tensor& x);
Tensor eval_logits(const ModelParams& p, const Tensor& z);
Tensor eval_probs(const ModelParams& p, const Tensor& x);

// coordinatewise momentum <- m * momentum + (1 - m) * live, m in [0, 1]
void ema_update(const ModelParams& live, ModelParams& momentum, double m);

// Weak: additive gaussian noise. Strong/StrongAlt: larger noise then a random
// fraction of coordinates zeroed. StrongAlt differs only by the rng draws.
Tensor augment(const Tensor& x, AugmentationKind kind, const ModelConfig& cfg, Rng& rng);

// Checkpoints: <prefix>.json header (shapes, hyper-parameters, seed) plus
// <prefix>.bin flat little-endian float64 payload. Round-trips byte-exactly.
void save_checkpoint(const ModelParams& p, const std::string& prefix, std::uint64_t seed);
ModelParams load_checkpoint(const std::string& prefix, std::uint64_t* seed_out = nullptr);

} // namespace cna
