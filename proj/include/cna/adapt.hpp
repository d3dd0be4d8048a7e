#pragma once

#include "cna/cluster_stats.hpp"
#include "cna/dataset.hpp"
#include "cna/losses.hpp"
#include "cna/memory_queue.hpp"
#include "cna/metrics.hpp"
#include "cna/model.hpp"

#include <array>
#include <optional>
#include <string>
#include <vector>

namespace cna {

enum class AdaptMode { Offline, Online };

struct AdaptConfig {
    double alpha = 0.5;                  // clean-probability threshold
    double tau = 0.07;                   // contrastive temperature
    std::size_t memory_capacity = 16384; // M, both queues
    std::size_t k_vote = 3;              // soft-voting neighbor count
    std::size_t n_exclude = 10;          // neighbor-label set size for negatives
    double learning_rate = 2e-4;
    double sgd_momentum = 0.9;
    double ema_momentum = 0.999;
    std::array<double, 4> gammas{1.0, 1.0, 1.0, 1.0};
    bool include_prt = true; // prototype term inside the contrastive loss
    bool include_inst = true;
    std::size_t batch_size = 64;
    std::size_t epochs = 15; // offline passes
    std::size_t warm_threshold = 1024;
    AdaptMode mode = AdaptMode::Offline;
    std::uint64_t seed = 1;
    bool shuffle = true;             // offline epoch shuffling
    bool weak_from_momentum = false; // weak features/probs from the momentum model
    bool cr_on_weak = false;         // clean-region loss on the weak view instead of strong
    bool stats_from_model_probs = false; // prototype posteriors from stored model probs
    double sigma_min = 1e-4;
    bool report_post_update = false; // online: also score post-update predictions
    bool dump_cluster_stats = false; // per-iteration cluster_stats.csv
};

// Momentum-SGD velocity mirroring the parameter tensors, zero-initialized.
struct OptimizerState {
    Tensor w1, b1, w2, b2, v;
    static OptimizerState zeros_like(const ModelParams& p);
};

// v <- momentum * v + g; theta <- theta - lr * v.
// A non-finite gradient skips the whole step; returns false in that case.
bool sgd_step(ModelParams& params, const Graph& g, const ParamNodes& nodes,
              OptimizerState& state, double lr, double momentum);

struct SourceTrainConfig {
    ModelConfig model;
    std::size_t epochs = 40;
    std::size_t batch_size = 64;
    double learning_rate = 0.02;
    double momentum = 0.9;
    double label_smoothing = 0.1;
    std::uint64_t seed = 1;
};

struct SourceTrainResult {
    ModelParams params;
    std::vector<double> epoch_loss;
    std::vector<std::string> warnings;
};

SourceTrainResult train_source(const LabeledSet& data, const SourceTrainConfig& cfg);

// Mutable state threaded through the adaptation iterations. The three
// queues are pushed in lockstep each step, so index i refers to the same
// sample in all of them.
struct AdaptState {
    ModelParams model;
    ModelParams momentum;
    FeatureQueue weak_queue;      // (weak feature, model probs), the voting memory
    FeatureQueue posterior_store; // (weak feature, assigned pseudo-label distribution)
    KeyQueue key_queue;           // (momentum key, pseudo-label)
    OptimizerState opt;
    ClusterStats stats;
    bool voting_active = false;
    std::size_t voting_activation_iteration = 0; // 0 = not yet
    std::size_t iteration = 0;
    std::vector<std::string> events;
};

AdaptState make_adapt_state(ModelParams source_model, const AdaptConfig& cfg);

struct StepOutcome {
    LossReport losses;
    std::vector<std::size_t> pseudo_labels;
    std::vector<double> clean_probs;
    std::vector<RegionTag> tags;
    bool voting_used = false;
    std::size_t n_without_negatives = 0;
    bool step_skipped = false;
};

// One adaptation iteration over an unlabeled batch: augmented views, memory
// pushes, pseudo-labels, cluster refresh, clean/noisy partition, mixup, the
// combined loss, one SGD step on the live model and the EMA update.
StepOutcome adapt_step(AdaptState& st, const Tensor& batch_inputs, const AdaptConfig& cfg,
                       Rng& rng);

struct EpochMetrics {
    std::size_t index = 0; // epoch (offline) or batch iteration (online)
    std::optional<AccuracyResult> acc;
    std::optional<double> ece, mce;
    NoiseDetectionScores noise;
};

struct RunResult {
    ModelParams model;
    ModelParams momentum;
    std::vector<LossReport> loss_history;
    std::vector<EpochMetrics> metrics;
    std::optional<AccuracyResult> final_accuracy;      // offline eval / online first-pass
    std::optional<AccuracyResult> post_update_accuracy; // online only, behind the flag
    std::size_t voting_activation_iteration = 0;
    std::vector<std::string> events;
};

// Multi-epoch target adaptation with a full evaluation pass per epoch.
// out_dir (optional) receives losses.csv, metrics.csv, regions.csv and
// run.log.
RunResult adapt_offline(ModelParams source, const LabeledSet& target, const AdaptConfig& cfg,
                        const std::string& out_dir = "");

// Single pass; every batch is scored with pre-update predictions before the
// model adapts on it.
RunResult adapt_online(ModelParams source, const LabeledSet& target, const AdaptConfig& cfg,
                       const std::string& out_dir = "");

// Evaluation helpers shared by the loops and the CLI.
std::vector<std::size_t> predict(const ModelParams& model, const Tensor& inputs);
std::optional<AccuracyResult> evaluate_accuracy(const ModelParams& model,
                                                const LabeledSet& data);

} // namespace cna
