#include "cna/losses.hpp"

#include <algorithm>
#include <stdexcept>

namespace cna {

MixupBatch make_mixup_with(const Tensor& inputs, const std::vector<std::size_t>& labels,
                           std::size_t n_classes, const std::vector<double>& clean_probs,
                           std::vector<std::size_t> partners, std::vector<double> lambdas) {
    const std::size_t B = inputs.rows(), D = inputs.cols();
    if (labels.size() != B || clean_probs.size() != B || partners.size() != B ||
        lambdas.size() != B)
        throw std::invalid_argument("make_mixup: batch size mismatch");

    MixupBatch mix;
    mix.partner = std::move(partners);
    mix.lambda = std::move(lambdas);
    mix.mixed_input = Tensor({B, D});
    mix.mixed_target = Tensor({B, n_classes});
    mix.mixed_clean.resize(B);
    mix.weight.resize(B);
    for (std::size_t i = 0; i < B; ++i) {
        const std::size_t j = mix.partner[i];
        const double lam = mix.lambda[i];
        if (j >= B || !(lam >= 0.0 && lam <= 1.0))
            throw std::invalid_argument("make_mixup: invalid partner or lambda");
        for (std::size_t d = 0; d < D; ++d)
            mix.mixed_input.at(i, d) = lam * inputs.at(i, d) + (1.0 - lam) * inputs.at(j, d);
        mix.mixed_target.at(i, labels[i]) += lam;
        mix.mixed_target.at(i, labels[j]) += 1.0 - lam;
        mix.mixed_clean[i] = lam * clean_probs[i] + (1.0 - lam) * clean_probs[j];
        mix.weight[i] = std::exp(mix.mixed_clean[i]);
    }
    return mix;
}

MixupBatch make_mixup(const Tensor& inputs, const std::vector<std::size_t>& labels,
                      std::size_t n_classes, const std::vector<double>& clean_probs, Rng& rng) {
    const std::size_t B = inputs.rows();
    if (B < 2) throw std::invalid_argument("make_mixup: batch must hold at least 2 samples");
    std::vector<std::size_t> partners = rng.permutation(B);
    std::vector<double> lambdas(B);
    for (double& l : lambdas) l = rng.uniform();
    return make_mixup_with(inputs, labels, n_classes, clean_probs, std::move(partners),
                           std::move(lambdas));
}

NodeId loss_clean_region(Graph& g, NodeId logits, const std::vector<std::size_t>& labels,
                         const std::vector<RegionTag>& tags) {
    const Tensor& l = g.value(logits);
    const std::size_t B = l.rows(), C = l.cols();
    if (labels.size() != B || tags.size() != B)
        throw std::invalid_argument("loss_clean_region: batch size mismatch");
    std::size_t n_clean = 0;
    for (RegionTag t : tags)
        if (t == RegionTag::Clean) ++n_clean;
    if (n_clean == 0) return g.constant(Tensor::scalar(0.0));

    Tensor mask({B, C}, 0.0);
    for (std::size_t i = 0; i < B; ++i)
        if (tags[i] == RegionTag::Clean)
            mask.at(i, labels[i]) = -1.0 / static_cast<double>(n_clean);
    return g.dot(g.log_softmax(logits), g.constant(std::move(mask)));
}

NodeId loss_ccp(Graph& g, NodeId mixed_logits, const MixupBatch& mix) {
    const Tensor& l = g.value(mixed_logits);
    const std::size_t B = l.rows(), C = l.cols();
    if (mix.weight.size() != B || mix.mixed_target.rows() != B || mix.mixed_target.cols() != C)
        throw std::invalid_argument("loss_ccp: mixup batch mismatch");
    Tensor weighted({B, C}, 0.0);
    for (std::size_t i = 0; i < B; ++i)
        for (std::size_t c = 0; c < C; ++c)
            weighted.at(i, c) =
                -mix.weight[i] * mix.mixed_target.at(i, c) / static_cast<double>(B);
    return g.dot(g.log_softmax(mixed_logits), g.constant(std::move(weighted)));
}

NodeId loss_div(Graph& g, NodeId strong_logits) {
    NodeId marginal = g.colmean(g.softmax(strong_logits));
    return g.dot(marginal, g.log(marginal));
}

NodeId loss_prototype_contrast(Graph& g, NodeId queries, const std::vector<std::size_t>& labels,
                               const ClusterStats& stats, double tau) {
    const Tensor& q = g.value(queries);
    const std::size_t B = q.rows(), D = q.cols();
    const std::size_t C = stats.mu.size();
    if (labels.size() != B) throw std::invalid_argument("loss_prototype_contrast: batch size");
    Tensor protos({C, D});
    for (std::size_t k = 0; k < C; ++k)
        for (std::size_t d = 0; d < D; ++d) protos.at(k, d) = stats.mu[k][d];

    NodeId sims = g.scale(g.matmul_nt(queries, g.constant(std::move(protos))), 1.0 / tau);
    Tensor mask({B, C}, 0.0);
    for (std::size_t i = 0; i < B; ++i)
        mask.at(i, labels[i]) = -1.0 / static_cast<double>(B);
    return g.dot(g.log_softmax(sims), g.constant(std::move(mask)));
}

NodeId loss_instance_contrast(Graph& g, NodeId queries, const Tensor& keys,
                              const KeyQueue& key_queue,
                              const std::vector<std::vector<std::size_t>>& neighbor_labels,
                              double tau, std::size_t* n_without_negatives) {
    const Tensor& q = g.value(queries);
    const std::size_t B = q.rows(), D = q.cols();
    if (keys.rows() != B || keys.cols() != D || neighbor_labels.size() != B)
        throw std::invalid_argument("loss_instance_contrast: batch mismatch");
    const std::size_t M = key_queue.size();
    if (M == 0) {
        if (n_without_negatives) *n_without_negatives = B;
        return g.constant(Tensor::scalar(0.0));
    }

    NodeId pos = g.scale(g.rowwise_dot(queries, g.constant(keys)), 1.0 / tau);

    Tensor bank({M, D});
    for (std::size_t j = 0; j < M; ++j)
        for (std::size_t d = 0; d < D; ++d) bank.at(j, d) = key_queue.entry(j).key[d];
    NodeId sims = g.scale(g.matmul_nt(queries, g.constant(std::move(bank))), 1.0 / tau);

    // negatives: queue entries whose stored pseudo-label is outside the
    // query's neighbor-label set
    Tensor mask({B, M}, 0.0);
    std::size_t empty_rows = 0;
    for (std::size_t i = 0; i < B; ++i) {
        std::vector<bool> excluded;
        for (std::size_t lbl : neighbor_labels[i]) {
            if (excluded.size() <= lbl) excluded.resize(lbl + 1, false);
            excluded[lbl] = true;
        }
        bool any = false;
        for (std::size_t j = 0; j < M; ++j) {
            const std::size_t lbl = key_queue.entry(j).pseudo_label;
            if (lbl < excluded.size() && excluded[lbl]) continue;
            mask.at(i, j) = 1.0;
            any = true;
        }
        if (!any) ++empty_rows;
    }
    if (n_without_negatives) *n_without_negatives = empty_rows;
    return g.mean(g.infonce_masked(pos, sims, std::move(mask)));
}

LossNodes loss_total(Graph& g, NodeId cr, NodeId ccp, NodeId div, NodeId prt, NodeId inst,
                     const std::array<double, 4>& gammas) {
    LossNodes n;
    n.cr = cr;
    n.ccp = ccp;
    n.div = div;
    n.prt = prt;
    n.inst = inst;
    n.ctr = g.add(prt, inst);
    NodeId sum = g.add(g.scale(cr, gammas[0]), g.scale(ccp, gammas[1]));
    sum = g.add(sum, g.scale(div, gammas[2]));
    n.total = g.add(sum, g.scale(n.ctr, gammas[3]));
    return n;
}

LossReport report_from(const Graph& g, const LossNodes& nodes, std::size_t n_clean,
                       std::size_t n_noisy) {
    LossReport r;
    r.l_cr = g.value(nodes.cr).values[0];
    r.l_ccp = g.value(nodes.ccp).values[0];
    r.l_div = g.value(nodes.div).values[0];
    r.l_prt = g.value(nodes.prt).values[0];
    r.l_inst = g.value(nodes.inst).values[0];
    r.l_ctr = g.value(nodes.ctr).values[0];
    r.total = g.value(nodes.total).values[0];
    r.n_clean = n_clean;
    r.n_noisy = n_noisy;
    return r;
}

} // namespace cna
