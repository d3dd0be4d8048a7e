#include "cna/model.hpp"

#include <json.hpp>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace cna {

namespace {

constexpr double kNormEps = 1e-12;

void write_f64_le(std::ostream& os, const std::vector<double>& values) {
    for (double v : values) {
        const std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
        unsigned char buf[8];
        for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
        os.write(reinterpret_cast<const char*>(buf), 8);
    }
}

void read_f64_le(std::istream& is, std::vector<double>& values) {
    for (double& v : values) {
        unsigned char buf[8];
        is.read(reinterpret_cast<char*>(buf), 8);
        if (!is) throw std::runtime_error("checkpoint payload truncated");
        std::uint64_t bits = 0;
        for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
        v = std::bit_cast<double>(bits);
    }
}

} // namespace

ModelParams ModelParams::init(const ModelConfig& cfg, Rng& rng) {
    ModelParams p;
    p.cfg = cfg;
    auto gauss = [&](std::vector<std::size_t> shape, double scale) {
        Tensor t(std::move(shape));
        for (double& v : t.values) v = scale * rng.gaussian();
        return t;
    };
    // He-style scale in front of the relu, Xavier-ish elsewhere
    p.w1 = gauss({cfg.d_in, cfg.hidden}, std::sqrt(2.0 / static_cast<double>(cfg.d_in)));
    p.b1 = Tensor({cfg.hidden}, 0.0);
    p.w2 = gauss({cfg.hidden, cfg.d_f}, std::sqrt(1.0 / static_cast<double>(cfg.hidden)));
    p.b2 = Tensor({cfg.d_f}, 0.0);
    p.v = gauss({cfg.n_classes, cfg.d_f}, 1.0);
    return p;
}

ParamNodes attach_params(Graph& g, const ModelParams& p, bool trainable) {
    auto put = [&](const Tensor& t) {
        Tensor copy = t;
        copy.requires_grad = trainable;
        return g.leaf(std::move(copy));
    };
    return ParamNodes{put(p.w1), put(p.b1), put(p.w2), put(p.b2), put(p.v)};
}

NodeId features_node(Graph& g, const ModelConfig& cfg, const ParamNodes& pn, NodeId x) {
    if (g.value(x).cols() != cfg.d_in)
        throw std::invalid_argument("features: input width " +
                                    std::to_string(g.value(x).cols()) + " != d_in " +
                                    std::to_string(cfg.d_in));
    NodeId h = g.relu(g.linear(x, pn.w1, pn.b1));
    return g.l2_normalize(g.linear(h, pn.w2, pn.b2));
}

NodeId logits_node(Graph& g, const ModelConfig& cfg, const ParamNodes& pn, NodeId z) {
    if (g.value(z).cols() != cfg.d_f)
        throw std::invalid_argument("logits: feature width mismatch");
    const Tensor& v = g.value(pn.v);
    for (std::size_t c = 0; c < v.rows(); ++c) {
        double s = 0.0;
        for (std::size_t k = 0; k < v.cols(); ++k) s += v.at(c, k) * v.at(c, k);
        if (std::sqrt(s) <= kNormEps)
            throw std::invalid_argument("logits: class row " + std::to_string(c) +
                                        " has zero norm");
    }
    NodeId vn = g.l2_normalize(pn.v);
    return g.scale(g.matmul_nt(z, vn), 1.0 / cfg.tau_cls);
}

Tensor eval_features(const ModelParams& p, const Tensor& x) {
    Graph g;
    ParamNodes pn = attach_params(g, p, false);
    return g.value(features_node(g, p.cfg, pn, g.constant(x)));
}

Tensor eval_logits(const ModelParams& p, const Tensor& z) {
    Graph g;
    ParamNodes pn = attach_params(g, p, false);
    return g.value(logits_node(g, p.cfg, pn, g.constant(z)));
}

Tensor eval_probs(const ModelParams& p, const Tensor& x) {
    Graph g;
    ParamNodes pn = attach_params(g, p, false);
    NodeId z = features_node(g, p.cfg, pn, g.constant(x));
    return g.value(g.softmax(logits_node(g, p.cfg, pn, z)));
}

void ema_update(const ModelParams& live, ModelParams& momentum, double m) {
    if (!(m >= 0.0 && m <= 1.0))
        throw std::invalid_argument("ema_update: momentum outside [0,1]");
    auto blend = [m](const Tensor& a, Tensor& b) {
        if (a.shape != b.shape) throw std::invalid_argument("ema_update: shape mismatch");
        for (std::size_t i = 0; i < b.values.size(); ++i)
            b.values[i] = m * b.values[i] + (1.0 - m) * a.values[i];
    };
    blend(live.w1, momentum.w1);
    blend(live.b1, momentum.b1);
    blend(live.w2, momentum.w2);
    blend(live.b2, momentum.b2);
    blend(live.v, momentum.v);
}

Tensor augment(const Tensor& x, AugmentationKind kind, const ModelConfig& cfg, Rng& rng) {
    Tensor out = x;
    const double sigma = kind == AugmentationKind::Weak ? cfg.sigma_weak : cfg.sigma_strong;
    for (double& v : out.values) v += sigma * rng.gaussian();
    if (kind != AugmentationKind::Weak) {
        const std::size_t n = out.numel();
        const std::size_t k =
            static_cast<std::size_t>(std::llround(cfg.mask_fraction * static_cast<double>(n)));
        std::vector<std::size_t> order = rng.permutation(n);
        for (std::size_t i = 0; i < k && i < n; ++i) out.values[order[i]] = 0.0;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoint IO
// ---------------------------------------------------------------------------

void save_checkpoint(const ModelParams& p, const std::string& prefix, std::uint64_t seed) {
    nlohmann::ordered_json header;
    header["format"] = "cna-checkpoint-v1";
    header["d_in"] = p.cfg.d_in;
    header["hidden"] = p.cfg.hidden;
    header["d_f"] = p.cfg.d_f;
    header["n_classes"] = p.cfg.n_classes;
    header["tau_cls"] = p.cfg.tau_cls;
    header["sigma_weak"] = p.cfg.sigma_weak;
    header["sigma_strong"] = p.cfg.sigma_strong;
    header["mask_fraction"] = p.cfg.mask_fraction;
    header["seed"] = seed;
    header["tensors"] = nlohmann::ordered_json::array();
    auto describe = [&](const char* name, const Tensor& t) {
        header["tensors"].push_back({{"name", name}, {"shape", t.shape}});
    };
    describe("w1", p.w1);
    describe("b1", p.b1);
    describe("w2", p.w2);
    describe("b2", p.b2);
    describe("v", p.v);

    std::ofstream jf(prefix + ".json", std::ios::binary);
    if (!jf) throw std::runtime_error("cannot write " + prefix + ".json");
    jf << header.dump(2) << "\n";

    std::ofstream bf(prefix + ".bin", std::ios::binary);
    if (!bf) throw std::runtime_error("cannot write " + prefix + ".bin");
    write_f64_le(bf, p.w1.values);
    write_f64_le(bf, p.b1.values);
    write_f64_le(bf, p.w2.values);
    write_f64_le(bf, p.b2.values);
    write_f64_le(bf, p.v.values);
}

ModelParams load_checkpoint(const std::string& prefix, std::uint64_t* seed_out) {
    std::ifstream jf(prefix + ".json", std::ios::binary);
    if (!jf) throw std::runtime_error("cannot read " + prefix + ".json");
    nlohmann::json header = nlohmann::json::parse(jf);
    if (header.value("format", "") != std::string("cna-checkpoint-v1"))
        throw std::runtime_error("unrecognized checkpoint format in " + prefix + ".json");

    ModelConfig cfg;
    cfg.d_in = header.at("d_in").get<std::size_t>();
    cfg.hidden = header.at("hidden").get<std::size_t>();
    cfg.d_f = header.at("d_f").get<std::size_t>();
    cfg.n_classes = header.at("n_classes").get<std::size_t>();
    cfg.tau_cls = header.at("tau_cls").get<double>();
    cfg.sigma_weak = header.at("sigma_weak").get<double>();
    cfg.sigma_strong = header.at("sigma_strong").get<double>();
    cfg.mask_fraction = header.at("mask_fraction").get<double>();
    if (seed_out) *seed_out = header.at("seed").get<std::uint64_t>();

    ModelParams p;
    p.cfg = cfg;
    p.w1 = Tensor({cfg.d_in, cfg.hidden});
    p.b1 = Tensor({cfg.hidden});
    p.w2 = Tensor({cfg.hidden, cfg.d_f});
    p.b2 = Tensor({cfg.d_f});
    p.v = Tensor({cfg.n_classes, cfg.d_f});

    std::ifstream bf(prefix + ".bin", std::ios::binary);
    if (!bf) throw std::runtime_error("cannot read " + prefix + ".bin");
    read_f64_le(bf, p.w1.values);
    read_f64_le(bf, p.b1.values);
    read_f64_le(bf, p.w2.values);
    read_f64_le(bf, p.b2.values);
    read_f64_le(bf, p.v.values);
    return p;
}

} // namespace cna
