#include "cna/adapt.hpp"

#include "cna/pseudo_label.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

namespace cna {

namespace {

std::vector<double> tensor_row(const Tensor& t, std::size_t r) {
    const std::size_t c = t.cols();
    return std::vector<double>(t.values.begin() + static_cast<std::ptrdiff_t>(r * c),
                               t.values.begin() + static_cast<std::ptrdiff_t>((r + 1) * c));
}

Tensor rows_subset(const Tensor& t, const std::vector<std::size_t>& order, std::size_t begin,
                   std::size_t end) {
    const std::size_t c = t.cols();
    Tensor out({end - begin, c});
    for (std::size_t i = begin; i < end; ++i)
        for (std::size_t d = 0; d < c; ++d) out.at(i - begin, d) = t.at(order[i], d);
    return out;
}

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string fmt_opt(const std::optional<double>& v) { return v ? fmt(*v) : std::string(); }

void validate(const AdaptConfig& cfg) {
    if (!(cfg.alpha >= 0.0 && cfg.alpha <= 1.0))
        throw std::invalid_argument("config: alpha outside [0,1]");
    if (!(cfg.tau > 0.0)) throw std::invalid_argument("config: tau must be positive");
    if (!(cfg.learning_rate >= 0.0)) throw std::invalid_argument("config: negative learning rate");
    if (!(cfg.sgd_momentum >= 0.0 && cfg.sgd_momentum < 1.0))
        throw std::invalid_argument("config: sgd momentum outside [0,1)");
    if (!(cfg.ema_momentum >= 0.0 && cfg.ema_momentum <= 1.0))
        throw std::invalid_argument("config: ema momentum outside [0,1]");
    if (cfg.batch_size == 0) throw std::invalid_argument("config: batch_size must be positive");
    if (cfg.k_vote == 0) throw std::invalid_argument("config: k_vote must be positive");
    if (cfg.warm_threshold == 0 || cfg.warm_threshold > cfg.memory_capacity)
        throw std::invalid_argument("config: warm_threshold must lie in [1, memory_capacity]");
    if (cfg.sigma_min <= 0.0) throw std::invalid_argument("config: sigma_min must be positive");
}

// rng stream ids off the master seed
constexpr std::uint64_t kStreamInit = 0;
constexpr std::uint64_t kStreamSourceLoop = 1;
constexpr std::uint64_t kStreamAdaptLoop = 2;
constexpr std::uint64_t kStreamAdaptStep = 3;

} // namespace

OptimizerState OptimizerState::zeros_like(const ModelParams& p) {
    OptimizerState s;
    s.w1 = Tensor(p.w1.shape, 0.0);
    s.b1 = Tensor(p.b1.shape, 0.0);
    s.w2 = Tensor(p.w2.shape, 0.0);
    s.b2 = Tensor(p.b2.shape, 0.0);
    s.v = Tensor(p.v.shape, 0.0);
    return s;
}

bool sgd_step(ModelParams& params, const Graph& g, const ParamNodes& nodes,
              OptimizerState& state, double lr, double momentum) {
    const Tensor* grads[5] = {g.grad(nodes.w1), g.grad(nodes.b1), g.grad(nodes.w2),
                              g.grad(nodes.b2), g.grad(nodes.v)};
    for (const Tensor* gt : grads)
        if (gt && !gt->all_finite()) return false;

    Tensor* vel[5] = {&state.w1, &state.b1, &state.w2, &state.b2, &state.v};
    Tensor* par[5] = {&params.w1, &params.b1, &params.w2, &params.b2, &params.v};
    for (int t = 0; t < 5; ++t) {
        for (std::size_t i = 0; i < par[t]->values.size(); ++i) {
            const double gv = grads[t] ? grads[t]->values[i] : 0.0;
            vel[t]->values[i] = momentum * vel[t]->values[i] + gv;
            par[t]->values[i] -= lr * vel[t]->values[i];
        }
    }
    return true;
}

// ---------------------------------------------------------------------------
// Source training
// ---------------------------------------------------------------------------

SourceTrainResult train_source(const LabeledSet& data, const SourceTrainConfig& cfg) {
    if (data.size() == 0) throw std::invalid_argument("train_source: empty dataset");
    const std::size_t C = cfg.model.n_classes;
    for (long l : data.labels)
        if (l < 0 || static_cast<std::size_t>(l) >= C)
            throw std::invalid_argument("train_source: label outside [0, C)");

    SourceTrainResult result;
    {
        std::vector<bool> seen(C, false);
        for (long l : data.labels) seen[static_cast<std::size_t>(l)] = true;
        for (std::size_t c = 0; c < C; ++c)
            if (!seen[c])
                result.warnings.push_back("class " + std::to_string(c) +
                                          " absent from source data");
    }

    Rng init_rng(Rng::derive(cfg.seed, kStreamInit));
    result.params = ModelParams::init(cfg.model, init_rng);
    OptimizerState opt = OptimizerState::zeros_like(result.params);
    Rng loop_rng(Rng::derive(cfg.seed, kStreamSourceLoop));

    const std::size_t n = data.size();
    const double s = cfg.label_smoothing;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<std::size_t> order = loop_rng.permutation(n);
        double epoch_loss = 0.0;
        std::size_t batches = 0;
        for (std::size_t begin = 0; begin < n; begin += cfg.batch_size) {
            const std::size_t end = std::min(n, begin + cfg.batch_size);
            Tensor x = rows_subset(data.inputs, order, begin, end);
            const std::size_t B = end - begin;

            Graph g;
            ParamNodes pn = attach_params(g, result.params, true);
            NodeId z = features_node(g, cfg.model, pn, g.constant(std::move(x)));
            NodeId lsm = g.log_softmax(logits_node(g, cfg.model, pn, z));
            Tensor targets({B, C}, 0.0);
            for (std::size_t i = 0; i < B; ++i) {
                const auto c = static_cast<std::size_t>(data.labels[order[begin + i]]);
                for (std::size_t k = 0; k < C; ++k)
                    targets.at(i, k) = -(s / static_cast<double>(C)) / static_cast<double>(B);
                targets.at(i, c) += -(1.0 - s) / static_cast<double>(B);
            }
            NodeId loss = g.dot(lsm, g.constant(std::move(targets)));
            g.backward(loss);
            sgd_step(result.params, g, pn, opt, cfg.learning_rate, cfg.momentum);
            epoch_loss += g.value(loss).values[0];
            ++batches;
        }
        result.epoch_loss.push_back(epoch_loss / static_cast<double>(batches));
    }
    return result;
}

// ---------------------------------------------------------------------------
// Adaptation step
// ---------------------------------------------------------------------------

AdaptState make_adapt_state(ModelParams source_model, const AdaptConfig& cfg) {
    validate(cfg);
    const std::size_t d_f = source_model.cfg.d_f;
    const std::size_t C = source_model.cfg.n_classes;
    AdaptState st{std::move(source_model),
                  ModelParams{},
                  FeatureQueue(cfg.memory_capacity, d_f, C),
                  FeatureQueue(cfg.memory_capacity, d_f, C),
                  KeyQueue(cfg.memory_capacity, d_f, C),
                  OptimizerState{},
                  ClusterStats{},
                  false,
                  0,
                  0,
                  {}};
    st.momentum = st.model; // momentum copy starts at the source weights
    st.opt = OptimizerState::zeros_like(st.model);
    return st;
}

StepOutcome adapt_step(AdaptState& st, const Tensor& batch_inputs, const AdaptConfig& cfg,
                       Rng& rng) {
    const std::size_t B = batch_inputs.rows();
    if (B == 0) throw std::invalid_argument("adapt_step: empty batch");
    const ModelConfig& mc = st.model.cfg;
    const std::size_t C = mc.n_classes;

    // augmented views, one weak + two strong draws per sample
    Tensor weak({B, mc.d_in}), strong({B, mc.d_in}), strong_alt({B, mc.d_in});
    for (std::size_t i = 0; i < B; ++i) {
        const Tensor row({mc.d_in}, tensor_row(batch_inputs, i));
        const Tensor w = augment(row, AugmentationKind::Weak, mc, rng);
        const Tensor s = augment(row, AugmentationKind::Strong, mc, rng);
        const Tensor a = augment(row, AugmentationKind::StrongAlt, mc, rng);
        for (std::size_t d = 0; d < mc.d_in; ++d) {
            weak.at(i, d) = w.values[d];
            strong.at(i, d) = s.values[d];
            strong_alt.at(i, d) = a.values[d];
        }
    }

    // weak-view features and probabilities feed the memory before voting,
    // so the gate counts this batch's pairs
    const ModelParams& weak_model = cfg.weak_from_momentum ? st.momentum : st.model;
    const Tensor w_feats = eval_features(weak_model, weak);
    const Tensor w_probs = [&] {
        Graph g;
        ParamNodes pn = attach_params(g, weak_model, false);
        return g.value(g.softmax(logits_node(g, mc, pn, g.constant(w_feats))));
    }();
    {
        std::vector<FeatureQueue::Entry> entries;
        entries.reserve(B);
        for (std::size_t i = 0; i < B; ++i)
            entries.push_back({tensor_row(w_feats, i), tensor_row(w_probs, i)});
        st.weak_queue.push(std::move(entries));
    }

    if (!st.voting_active && st.weak_queue.is_warm(cfg.warm_threshold)) {
        st.voting_active = true;
        st.voting_activation_iteration = st.iteration + 1;
        st.events.push_back("iteration " + std::to_string(st.iteration + 1) +
                            ": soft voting activated");
    }
    const bool voting_used = st.voting_active && st.weak_queue.size() >= cfg.k_vote;

    StepOutcome out;
    out.voting_used = voting_used;
    out.pseudo_labels.resize(B);
    out.clean_probs.resize(B);
    out.tags.resize(B);

    std::vector<std::vector<double>> assigned_probs(B);
    for (std::size_t i = 0; i < B; ++i) {
        if (voting_used) {
            PseudoLabel pl = soft_vote(tensor_row(w_feats, i), st.weak_queue, cfg.k_vote);
            assigned_probs[i] = std::move(pl.probs);
            out.pseudo_labels[i] = pl.label;
        } else {
            assigned_probs[i] = tensor_row(w_probs, i);
            out.pseudo_labels[i] = argmax_lowest(assigned_probs[i]);
        }
    }

    // momentum keys and the aligned posterior store
    const Tensor keys = eval_features(st.momentum, strong_alt);
    {
        std::vector<FeatureQueue::Entry> posts;
        std::vector<KeyQueue::Entry> kents;
        for (std::size_t i = 0; i < B; ++i) {
            posts.push_back({tensor_row(w_feats, i), assigned_probs[i]});
            kents.push_back({tensor_row(keys, i), out.pseudo_labels[i]});
        }
        st.posterior_store.push(std::move(posts));
        st.key_queue.push(std::move(kents));
    }

    // cluster refresh from the full current memory
    {
        const FeatureQueue& src = cfg.stats_from_model_probs ? st.weak_queue : st.posterior_store;
        std::vector<std::vector<double>> feats(src.size()), posts(src.size());
        for (std::size_t i = 0; i < src.size(); ++i) {
            feats[i] = src.entry(i).feature;
            posts[i] = src.entry(i).probs;
        }
        const ClusterStats* prev = st.stats.mu.empty() ? nullptr : &st.stats;
        st.stats = compute_stats(feats, posts, C, cfg.sigma_min, prev);
        for (std::size_t k : st.stats.fallback_classes)
            st.events.push_back("iteration " + std::to_string(st.iteration + 1) + ": class " +
                                std::to_string(k) + " had no posterior mass, kept fallback stats");
    }

    out.losses.n_clean = 0;
    for (std::size_t i = 0; i < B; ++i) {
        CleanProbability cp =
            clean_probability(tensor_row(w_feats, i), out.pseudo_labels[i], st.stats);
        out.clean_probs[i] = cp.clean;
        out.tags[i] = partition(cp.clean, cfg.alpha);
        if (out.tags[i] == RegionTag::Clean) ++out.losses.n_clean;
    }
    out.losses.n_noisy = B - out.losses.n_clean;

    std::optional<MixupBatch> mix;
    if (B >= 2) {
        mix = make_mixup(batch_inputs, out.pseudo_labels, C, out.clean_probs, rng);
    } else {
        st.events.push_back("iteration " + std::to_string(st.iteration + 1) +
                            ": singleton batch, mixup skipped");
    }

    // training graph over the live model
    Graph g;
    ParamNodes pn = attach_params(g, st.model, true);
    NodeId q = features_node(g, mc, pn, g.constant(strong));
    NodeId logits_strong = logits_node(g, mc, pn, q);

    NodeId cr_logits = logits_strong;
    if (cfg.cr_on_weak) {
        NodeId zw = features_node(g, mc, pn, g.constant(weak));
        cr_logits = logits_node(g, mc, pn, zw);
    }
    NodeId l_cr = loss_clean_region(g, cr_logits, out.pseudo_labels, out.tags);

    NodeId l_ccp;
    if (mix) {
        NodeId zm = features_node(g, mc, pn, g.constant(mix->mixed_input));
        l_ccp = loss_ccp(g, logits_node(g, mc, pn, zm), *mix);
    } else {
        l_ccp = g.constant(Tensor::scalar(0.0));
    }

    NodeId l_div = loss_div(g, logits_strong);

    NodeId l_prt = cfg.include_prt
                       ? loss_prototype_contrast(g, q, out.pseudo_labels, st.stats, cfg.tau)
                       : g.constant(Tensor::scalar(0.0));

    NodeId l_inst = g.constant(Tensor::scalar(0.0));
    if (cfg.include_inst) {
        if (st.key_queue.size() != st.weak_queue.size())
            throw std::logic_error("adapt_step: queue alignment broken");
        const std::size_t n_eff = std::min<std::size_t>(cfg.n_exclude, st.weak_queue.size());
        std::vector<std::vector<std::size_t>> neighbor_labels(B);
        const Tensor& qv = g.value(q);
        for (std::size_t i = 0; i < B; ++i) {
            for (std::size_t idx : st.weak_queue.knn(tensor_row(qv, i), n_eff))
                neighbor_labels[i].push_back(st.key_queue.entry(idx).pseudo_label);
        }
        l_inst = loss_instance_contrast(g, q, keys, st.key_queue, neighbor_labels, cfg.tau,
                                        &out.n_without_negatives);
        if (out.n_without_negatives > 0)
            st.events.push_back("iteration " + std::to_string(st.iteration + 1) + ": " +
                                std::to_string(out.n_without_negatives) +
                                " positive-only instance-contrast rows");
    }

    LossNodes nodes = loss_total(g, l_cr, l_ccp, l_div, l_prt, l_inst, cfg.gammas);
    g.backward(nodes.total);
    out.losses = [&] {
        LossReport r = report_from(g, nodes, out.losses.n_clean, out.losses.n_noisy);
        return r;
    }();

    if (!sgd_step(st.model, g, pn, st.opt, cfg.learning_rate, cfg.sgd_momentum)) {
        out.step_skipped = true;
        st.events.push_back("iteration " + std::to_string(st.iteration + 1) +
                            ": non-finite gradient, step skipped");
    }
    ema_update(st.model, st.momentum, cfg.ema_momentum);
    ++st.iteration;
    return out;
}

// ---------------------------------------------------------------------------
// Loops
// ---------------------------------------------------------------------------

std::vector<std::size_t> predict(const ModelParams& model, const Tensor& inputs) {
    const Tensor probs = eval_probs(model, inputs);
    std::vector<std::size_t> preds(probs.rows());
    for (std::size_t i = 0; i < probs.rows(); ++i) preds[i] = argmax_lowest(tensor_row(probs, i));
    return preds;
}

std::optional<AccuracyResult> evaluate_accuracy(const ModelParams& model,
                                                const LabeledSet& data) {
    if (!data.labels_available()) return std::nullopt;
    return accuracy(predict(model, data.inputs), data.labels);
}

namespace {

struct RunWriter {
    std::ofstream losses, metrics, regions, log, cluster;
    bool enabled = false;

    explicit RunWriter(const std::string& dir, bool dump_cluster) {
        if (dir.empty()) return;
        std::filesystem::create_directories(dir);
        enabled = true;
        losses.open(dir + "/losses.csv", std::ios::binary);
        metrics.open(dir + "/metrics.csv", std::ios::binary);
        regions.open(dir + "/regions.csv", std::ios::binary);
        log.open(dir + "/run.log", std::ios::binary);
        losses << "iteration,l_cr,l_ccp,l_div,l_prt,l_inst,l_ctr,total,n_clean,n_noisy\n";
        metrics << "iteration,overall_acc,per_class_acc,ece,mce,noise_acc,noise_recall,"
                   "noise_precision\n";
        regions << "iteration,n_clean,n_noisy,noise_acc,noise_recall,noise_precision\n";
        if (dump_cluster) {
            cluster.open(dir + "/cluster_stats.csv", std::ios::binary);
            cluster << "iteration,class,sigma,population,clean_fraction\n";
        }
    }

    void loss_row(std::size_t it, const LossReport& r) {
        if (!enabled) return;
        losses << it << ',' << fmt(r.l_cr) << ',' << fmt(r.l_ccp) << ',' << fmt(r.l_div) << ','
               << fmt(r.l_prt) << ',' << fmt(r.l_inst) << ',' << fmt(r.l_ctr) << ','
               << fmt(r.total) << ',' << r.n_clean << ',' << r.n_noisy << '\n';
    }

    void region_row(std::size_t it, const StepOutcome& o, const NoiseDetectionScores& noise) {
        if (!enabled) return;
        regions << it << ',' << o.losses.n_clean << ',' << o.losses.n_noisy << ','
                << fmt_opt(noise.accuracy) << ',' << fmt_opt(noise.recall) << ','
                << fmt_opt(noise.precision) << '\n';
    }

    void metric_row(const EpochMetrics& m) {
        if (!enabled) return;
        metrics << m.index << ','
                << (m.acc ? fmt(m.acc->overall) : std::string()) << ','
                << (m.acc ? fmt(m.acc->per_class_avg) : std::string()) << ','
                << fmt_opt(m.ece) << ',' << fmt_opt(m.mce) << ',' << fmt_opt(m.noise.accuracy)
                << ',' << fmt_opt(m.noise.recall) << ',' << fmt_opt(m.noise.precision) << '\n';
    }

    void cluster_rows(std::size_t it, const AdaptState& st, const StepOutcome& o) {
        if (!enabled || !cluster.is_open()) return;
        const std::size_t C = st.stats.mu.size();
        std::vector<std::size_t> pop(C, 0), clean(C, 0);
        for (std::size_t i = 0; i < o.pseudo_labels.size(); ++i) {
            ++pop[o.pseudo_labels[i]];
            if (o.tags[i] == RegionTag::Clean) ++clean[o.pseudo_labels[i]];
        }
        for (std::size_t k = 0; k < C; ++k) {
            cluster << it << ',' << k << ',' << fmt(st.stats.sigma[k]) << ',' << pop[k] << ',';
            cluster << (pop[k] ? fmt(double(clean[k]) / double(pop[k])) : std::string()) << '\n';
        }
    }

    void flush_events(const std::vector<std::string>& events) {
        if (!enabled) return;
        for (const std::string& e : events) log << e << '\n';
    }
};

NoiseDetectionScores batch_noise(const StepOutcome& o, const LabeledSet& target,
                                 const std::vector<std::size_t>& order, std::size_t begin,
                                 std::size_t end) {
    if (!target.labels_available()) return {};
    std::vector<long> truth;
    for (std::size_t i = begin; i < end; ++i) truth.push_back(target.labels[order[i]]);
    return noise_detection(o.tags, o.pseudo_labels, truth);
}

// Full-set evaluation with the current queue/stats: model predictions,
// calibration, and the clean/noisy detection scores of the current
// pseudo-labeling.
EpochMetrics evaluate_epoch(const AdaptState& st, const LabeledSet& target,
                            const AdaptConfig& cfg, std::size_t index) {
    EpochMetrics m;
    m.index = index;
    const Tensor probs = eval_probs(st.model, target.inputs);
    const std::size_t n = probs.rows();
    std::vector<std::size_t> preds(n);
    std::vector<double> conf(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto row = tensor_row(probs, i);
        preds[i] = argmax_lowest(row);
        conf[i] = row[preds[i]];
    }
    if (target.labels_available()) {
        m.acc = accuracy(preds, target.labels);
        std::vector<bool> correct(n);
        for (std::size_t i = 0; i < n; ++i)
            correct[i] = preds[i] == static_cast<std::size_t>(target.labels[i]);
        ReliabilityTable table = calibration(conf, correct);
        m.ece = table.ece;
        m.mce = table.mce;

        if (!st.stats.mu.empty()) {
            const ModelParams& weak_model = cfg.weak_from_momentum ? st.momentum : st.model;
            const Tensor feats = eval_features(weak_model, target.inputs);
            const bool vote = st.voting_active && st.weak_queue.size() >= cfg.k_vote;
            std::vector<std::size_t> pls(n);
            std::vector<RegionTag> tags(n);
            for (std::size_t i = 0; i < n; ++i) {
                const auto f = tensor_row(feats, i);
                if (vote) {
                    pls[i] = soft_vote(f, st.weak_queue, cfg.k_vote).label;
                } else {
                    Graph g;
                    ParamNodes pn = attach_params(g, weak_model, false);
                    Tensor frow({1, f.size()}, f);
                    const Tensor l = g.value(
                        g.softmax(logits_node(g, weak_model.cfg, pn, g.constant(frow))));
                    pls[i] = argmax_lowest(l.values);
                }
                tags[i] = partition(clean_probability(f, pls[i], st.stats).clean, cfg.alpha);
            }
            m.noise = noise_detection(tags, pls, target.labels);
        }
    }
    return m;
}

} // namespace

RunResult adapt_offline(ModelParams source, const LabeledSet& target, const AdaptConfig& cfg,
                        const std::string& out_dir) {
    validate(cfg);
    if (cfg.mode != AdaptMode::Offline)
        throw std::invalid_argument("adapt_offline: config mode is not Offline");
    AdaptState st = make_adapt_state(std::move(source), cfg);
    RunWriter writer(out_dir, cfg.dump_cluster_stats);
    Rng loop_rng(Rng::derive(cfg.seed, kStreamAdaptLoop));
    Rng step_rng(Rng::derive(cfg.seed, kStreamAdaptStep));

    RunResult result;
    const std::size_t n = target.size();
    std::vector<std::size_t> order(n);
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        if (cfg.shuffle) {
            order = loop_rng.permutation(n);
        } else {
            for (std::size_t i = 0; i < n; ++i) order[i] = i;
        }
        for (std::size_t begin = 0; begin < n; begin += cfg.batch_size) {
            const std::size_t end = std::min(n, begin + cfg.batch_size);
            Tensor batch = rows_subset(target.inputs, order, begin, end);
            StepOutcome o = adapt_step(st, batch, cfg, step_rng);
            result.loss_history.push_back(o.losses);
            writer.loss_row(st.iteration, o.losses);
            writer.region_row(st.iteration, o, batch_noise(o, target, order, begin, end));
            writer.cluster_rows(st.iteration, st, o);
        }
        EpochMetrics m = evaluate_epoch(st, target, cfg, epoch);
        result.metrics.push_back(m);
        writer.metric_row(m);
    }
    if (cfg.epochs == 0) {
        EpochMetrics m = evaluate_epoch(st, target, cfg, 0);
        result.metrics.push_back(m);
        writer.metric_row(m);
    }

    result.final_accuracy = result.metrics.back().acc;
    result.voting_activation_iteration = st.voting_activation_iteration;
    result.events = st.events;
    writer.flush_events(st.events);
    result.model = std::move(st.model);
    result.momentum = std::move(st.momentum);
    return result;
}

RunResult adapt_online(ModelParams source, const LabeledSet& target, const AdaptConfig& cfg,
                       const std::string& out_dir) {
    validate(cfg);
    if (cfg.mode != AdaptMode::Online)
        throw std::invalid_argument("adapt_online: config mode is not Online");
    AdaptState st = make_adapt_state(std::move(source), cfg);
    RunWriter writer(out_dir, cfg.dump_cluster_stats);
    Rng step_rng(Rng::derive(cfg.seed, kStreamAdaptStep));

    RunResult result;
    const std::size_t n = target.size();
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;

    std::vector<std::size_t> first_pass_preds, post_preds;
    std::size_t batch_index = 0;
    for (std::size_t begin = 0; begin < n; begin += cfg.batch_size) {
        const std::size_t end = std::min(n, begin + cfg.batch_size);
        Tensor batch = rows_subset(target.inputs, order, begin, end);
        ++batch_index;

        // score first, adapt second: these predictions are the online metric
        std::vector<std::size_t> preds = predict(st.model, batch);
        first_pass_preds.insert(first_pass_preds.end(), preds.begin(), preds.end());

        EpochMetrics m;
        m.index = batch_index;
        if (target.labels_available()) {
            std::vector<long> truth(target.labels.begin() + static_cast<std::ptrdiff_t>(begin),
                                    target.labels.begin() + static_cast<std::ptrdiff_t>(end));
            m.acc = accuracy(preds, truth);
            const Tensor probs = eval_probs(st.model, batch);
            std::vector<double> conf(end - begin);
            std::vector<bool> correct(end - begin);
            for (std::size_t i = 0; i < end - begin; ++i) {
                conf[i] = probs.at(i, preds[i]);
                correct[i] = preds[i] == static_cast<std::size_t>(truth[i]);
            }
            ReliabilityTable table = calibration(conf, correct);
            m.ece = table.ece;
            m.mce = table.mce;
        }

        StepOutcome o = adapt_step(st, batch, cfg, step_rng);
        result.loss_history.push_back(o.losses);
        m.noise = batch_noise(o, target, order, begin, end);
        result.metrics.push_back(m);
        writer.loss_row(st.iteration, o.losses);
        writer.region_row(st.iteration, o, m.noise);
        writer.cluster_rows(st.iteration, st, o);
        writer.metric_row(m);

        if (cfg.report_post_update) {
            std::vector<std::size_t> pp = predict(st.model, batch);
            post_preds.insert(post_preds.end(), pp.begin(), pp.end());
        }
    }

    if (target.labels_available() && !first_pass_preds.empty()) {
        result.final_accuracy = accuracy(first_pass_preds, target.labels);
        if (cfg.report_post_update)
            result.post_update_accuracy = accuracy(post_preds, target.labels);
    }
    result.voting_activation_iteration = st.voting_activation_iteration;
    result.events = st.events;
    writer.flush_events(st.events);
    result.model = std::move(st.model);
    result.momentum = std::move(st.momentum);
    return result;
}

} // namespace cna
