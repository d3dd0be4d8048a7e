#include "cna/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace cna {

namespace {

std::string shape_str(const Tensor& t) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < t.shape.size(); ++i)
        os << (i ? "x" : "") << t.shape[i];
    os << "]";
    return os.str();
}

[[noreturn]] void fail(const std::string& op, const std::string& msg) {
    throw std::invalid_argument(op + ": " + msg);
}

void check_finite(const std::string& op, const Tensor& t) {
    if (!t.all_finite())
        fail(op, "non-finite input " + shape_str(t));
}

constexpr double kNormEps = 1e-12;

} // namespace

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

Tensor::Tensor(std::vector<std::size_t> shape_, double fill) : shape(std::move(shape_)) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    values.assign(n, fill);
}

Tensor::Tensor(std::vector<std::size_t> shape_, std::vector<double> values_)
    : shape(std::move(shape_)), values(std::move(values_)) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    if (n != values.size())
        throw std::invalid_argument("Tensor: shape/value count mismatch");
}

Tensor Tensor::scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

Tensor Tensor::row(std::vector<double> v) {
    std::size_t n = v.size();
    return Tensor({n}, std::move(v));
}

Tensor Tensor::matrix(std::size_t r, std::size_t c, std::vector<double> v) {
    return Tensor({r, c}, std::move(v));
}

std::size_t Tensor::rows() const { return shape.size() == 2 ? shape[0] : 1; }

std::size_t Tensor::cols() const {
    if (shape.empty()) return 0;
    return shape.size() == 2 ? shape[1] : shape[0];
}

bool Tensor::all_finite() const {
    return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
}

// ---------------------------------------------------------------------------
// Graph
// ---------------------------------------------------------------------------

NodeId Graph::push(Node n) {
    nodes_.push_back(std::move(n));
    grads_.emplace_back();
    return nodes_.size() - 1;
}

NodeId Graph::leaf(Tensor t) {
    Node n;
    n.op = "leaf";
    n.requires_grad = t.requires_grad;
    n.value = std::move(t);
    return push(std::move(n));
}

NodeId Graph::constant(Tensor t) {
    Node n;
    n.op = "constant";
    t.requires_grad = false;
    n.value = std::move(t);
    return push(std::move(n));
}

void Graph::accumulate(NodeId id, const Tensor& contribution) {
    if (!nodes_[id].requires_grad) return;
    Tensor& g = grads_[id];
    if (g.values.empty()) g = Tensor(nodes_[id].value.shape, 0.0);
    for (std::size_t i = 0; i < g.values.size(); ++i)
        g.values[i] += contribution.values[i];
}

const Tensor* Graph::grad(NodeId id) const {
    if (!nodes_[id].requires_grad || grads_[id].values.empty()) return nullptr;
    return &grads_[id];
}

void Graph::backward(NodeId output) {
    const Tensor& out = nodes_[output].value;
    if (out.numel() != 1)
        fail("backward", "output must be scalar, got " + shape_str(out));
    check_finite("backward", out);
    for (auto& g : grads_) g = Tensor();
    if (nodes_[output].requires_grad)
        grads_[output] = Tensor::scalar(1.0);
    for (std::size_t i = output + 1; i-- > 0;) {
        const Node& n = nodes_[i];
        if (!n.requires_grad || grads_[i].values.empty() || !n.backward_fn) continue;
        n.backward_fn(*this, n, grads_[i]);
    }
    // leaves the output never touched still report a (zero) gradient
    for (std::size_t i = 0; i < nodes_.size(); ++i)
        if (nodes_[i].requires_grad && grads_[i].values.empty())
            grads_[i] = Tensor(nodes_[i].value.shape, 0.0);
}

// ---------------------------------------------------------------------------
// Primitives
// ---------------------------------------------------------------------------

NodeId Graph::add(NodeId a, NodeId b) {
    const Tensor& ta = nodes_[a].value;
    const Tensor& tb = nodes_[b].value;
    check_finite("add", ta);
    check_finite("add", tb);
    if (ta.shape != tb.shape)
        fail("add", "shape mismatch " + shape_str(ta) + " vs " + shape_str(tb));
    Node n;
    n.op = "add";
    n.inputs = {a, b};
    n.requires_grad = nodes_[a].requires_grad || nodes_[b].requires_grad;
    Tensor out = ta;
    for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] += tb.values[i];
    out.requires_grad = n.requires_grad;
    n.value = std::move(out);
    if (n.requires_grad)
        n.backward_fn = [](Graph& g, const Node& self, const Tensor& gout) {
            g.accumulate(self.inputs[0], gout);
            g.accumulate(self.inputs[1], gout);
        };
    return push(std::move(n));
}

NodeId Graph::mul(NodeId a, NodeId b) {
    const Tensor& ta = nodes_[a].value;
    const Tensor& tb = nodes_[b].value;
    check_finite("mul", ta);
    check_finite("mul", tb);
    if (ta.shape != tb.shape)
        fail("mul", "shape mismatch " + shape_str(ta) + " vs " + shape_str(tb));
    Node n;
    n.op = "mul";
    n.inputs = {a, b};
    n.requires_grad = nodes_[a].requires_grad || nodes_[b].requires_grad;
    Tensor out = ta;
    for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] *= tb.values[i];
    out.requires_grad = n.requires_grad;
    n.value = std::move(out);
    if (n.requires_grad)
        n.backward_fn = [](Graph& g, const Node& self, const Tensor& gout) {
            const Tensor& va = g.in(self, 0);
            const Tensor& vb = g.in(self, 1);
            Tensor ga(va.shape, 0.0), gb(vb.shape, 0.0);
            for (std::size_t i = 0; i < gout.values.size(); ++i) {
                ga.values[i] = gout.values[i] * vb.values[i];
                gb.values[i] = gout.values[i] * va.values[i];
            }
            g.accumulate(self.inputs[0], ga);
            g.accumulate(self.inputs[1], gb);
        };
    return push(std::move(n));
}

NodeId Graph::scale(NodeId a, double c) {
    const Tensor& ta = nodes_[a].value;
    check_finite("scale", ta);
    if (!std::isfinite(c)) fail("scale", "non-finite factor");
    Node n;
    n.op = "scale";
    n.inputs = {a};
    n.requires_grad = nodes_[a].requires_grad;
    Tensor out = ta;
    for (double& v : out.values) v *= c;
    out.requires_grad = n.requires_grad;
    n.value = std::move(out);
    if (n.requires_grad)
        n.backward_fn = [c](Graph& g, const Node& self, const Tensor& gout) {
            Tensor ga = gout;
            for (double& v : ga.values) v *= c;
            g.accumulate(self.inputs[0], ga);
        };
    return push(std::move(n));
}

NodeId Graph::relu(NodeId a) {
    const Tensor& ta = nodes_[a].value;
    check_finite("relu", ta);
    Node n;
    n.op = "relu";
    n.inputs = {a};
    n.requires_grad = nodes_[a].requires_grad;
    Tensor out = ta;
    for (double& v : out.values) v = v > 0.0 ? v : 0.0;
    out.requires_grad = n.requires_grad;
    n.value = std::move(out);
    if (n.requires_grad)
        n.backward_fn = [](Graph& g, const Node& self, const Tensor& gout) {
            const Tensor& va = g.in(self, 0);
            Tensor ga(va.shape, 0.0);
            // derivative at exactly 0 is defined as 0
            for (std::size_t i = 0; i < ga.values.size(); ++i)
                ga.values[i] = va.values[i] > 0.0 ? gout.values[i] : 0.0;
            g.accumulate(self.inputs[0], ga);
        };
    return push(std::move(n));
}

NodeId Graph::exp(NodeId a) {
    const Tensor& ta = nodes_[a].value;
    check_finite("exp", ta);
    Node n;
    n.op = "exp";
    n.inputs = {a};
    n.requires_grad = nodes_[a].requires_grad;
    Tensor out = ta;
    for (double& v : out.values) v = std::exp(v);
    out.requires_grad = n.requires_grad;
    n.value = out; // keep exp(x) for backward
    Tensor saved = std::move(out);
    if (n.requires_grad)
        n.backward_fn = [saved](Graph& g, const Node& self, const Tensor& gout) {
            Tensor ga = gout;
            for (std::size_t i = 0; i < ga.values.size(); ++i)
                ga.values[i] *= saved.values[i];
            g.accumulate(self.inputs[0], ga);
        };
    return push(std::move(n));
}

NodeId Graph::log(NodeId a) {
    const Tensor& ta = nodes_[a].value;
    check_finite("log", ta);
    Node n;
    n.op = "log";
    n.inputs = {a};
    n.requires_grad = nodes_[a].requires_grad;
    Tensor out = ta;
    for (double& v : out.values) v = std::log(v);
    out.requires_grad = n.requires_grad;
    n.value = std::move(out);
    if (n.requires_grad)
        n.backward_fn = [](Graph& g, const Node& self, const Tensor& gout) {
            const Tensor& va = g.in(self, 0);
            Tensor ga(va.shape, 0.0);
            for (std::size_t i = 0; i < ga.values.size(); ++i)
                ga.values[i] = gout.values[i] / va.values[i];
            g.accumulate(self.inputs[0], ga);
        };
    return push(std::move(n));
}

NodeId Graph::linear(NodeId x, NodeId w, NodeId b) {
    const Tensor& tx = nodes_[x].value;
    const Tensor& tw = nodes_[w].value;
    const Tensor& tb = nodes_[b].value;
    check_finite("linear", tx);
    check_finite("linear", tw);
    check_finite("linear", tb);
    const std::size_t B = tx.rows(), I = tx.cols();
    if (tw.rows() != I || tb.numel() != tw.cols())
        fail("linear", "shape mismatch x" + shape_str(tx) + " w" + shape_str(tw) + " b" + shape_str(tb));
    const std::size_t O = tw.cols();
    Node n;
    n.op = "linear";
    n.inputs = {x, w, b};
    n.requires_grad =
        nodes_[x].requires_grad || nodes_[w].requires_grad || nodes_[b].requires_grad;
    Tensor out({B, O}, 0.0);
    for (std::size_t r = 0; r < B; ++r)
        for (std::size_t k = 0; k < I; ++k) {
            const double xv = tx.values[r * I + k];
            if (xv == 0.0) continue;
            for (std::size_t c = 0; c < O; ++c)
                out.values[r * O + c] += xv * tw.values[k * O + c];
        }
    for (std::size_t r = 0; r < B; ++r)
        for (std::size_t c = 0; c < O; ++c) out.values[r * O + c] += tb.values[c];
    out.requires_grad = n.requires_grad;
    n.value = std::move(out);
    if (n.requires_grad)
        n.backward_fn = [B, I, O](Graph& g, const Node& self, const Tensor& gout) {
            const Tensor& vx = g.in(self, 0);
            const Tensor& vw = g.in(self, 1);
            Tensor gx(vx.shape, 0.0), gw(vw.shape, 0.0), gb(g.in(self, 2).shape, 0.0);
            for (std::size_t r = 0; r < B; ++r)
                for (std::size_t c = 0; c < O; ++c) {
                    const double go = gout.values[r * O + c];
                    if (go == 0.0) continue;
                    gb.values[c] += go;
                    for (std::size_t k = 0; k < I; ++k) {
                        gx.values[r * I + k] += go * vw.values[k * O + c];
                        gw.values[k * O + c] += go * vx.values[r * I + k];
                    }
                }
            g.accumulate(self.inputs[0], gx);
            g.accumulate(self.inputs[1], gw);
            g.accumulate(self.inputs[2], gb);
        };
    return push(std::move(n));
}

NodeId Graph::matmul_nt(NodeId x, NodeId y) {
    const Tensor& tx = nodes_[x].value;
    const Tensor& ty = nodes_[y].value;
    check_finite("matmul_nt", tx);
    check_finite("matmul_nt", ty);
    const std::size_t B = tx.rows(), D = tx.cols();
    if (ty.cols() != D)
        fail("matmul_nt", "shape mismatch x" + shape_str(tx) + " y" + shape_str(ty));
    const std::size_t C = ty.rows();
    Node n;
    n.op = "matmul_nt";
    n.inputs = {x, y};
    n.requires_grad = nodes_[x].requires_grad || nodes_[y].requires_grad;
    Tensor out({B, C}, 0.0);
    for (std::size_t r = 0; r < B; ++r)
        for (std::size_t c = 0; c < C; ++c) {
            double s = 0.0;
            for (std::size_t k = 0; k < D; ++k)
                s += tx.values[r * D + k] * ty.values[c * D + k];
            out.values[r * C + c] = s;
        }
    out.requires_grad = n.requires_grad;
    n.value = std::move(out);
    if (n.requires_grad)
        n.backward_fn = [B, D, C](Graph& g, const Node& self, const Tensor& gout) {
            const Tensor& vx = g.in(self, 0);
            const Tensor& vy = g.in(self, 1);
            Tensor gx(vx.shape, 0.0), gy(vy.shape, 0.0);
            for (std::size_t r = 0; r < B; ++r)
                for (std::size_t c = 0; c < C; ++c) {
                    const double go = gout.values[r * C + c];
                    if (go == 0.0) continue;
                    for (std::size_t k = 0; k < D; ++k) {
                        gx.values[r * D + k] += go * vy.values[c * D + k];
                        gy.values[c * D + k] += go * vx.values[r * D + k];
                    }
                }
            g.accumulate(self.inputs[0], gx);
            g.accumulate(self.inputs[1], gy);
        };
    return push(std::move(n));
}

NodeId Graph::l2_normalize(NodeId a) {
    const Tensor& ta = nodes_[a].value;
    check_finite("l2_normalize", ta);
    const std::size_t R = ta.rows(), C = ta.cols();
    Node n;
    n.op = "l2_normalize";
    n.inputs = {a};
    n.requires_grad = nodes_[a].requires_grad;
    Tensor out = ta;
    std::vector<double> norms(R, 0.0);
    for (std::size_t r = 0; r < R; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < C; ++c) s += ta.values[r * C + c] * ta.values[r * C + c];
        norms[r] = std::sqrt(s);
        const double d = std::max(norms[r], kNormEps);
        for (std::size_t c = 0; c < C; ++c) out.values[r * C + c] /= d;
    }
    out.requires_grad = n.requires_grad;
    Tensor saved = out;
    n.value = std::move(out);
    if (n.requires_grad)
        n.backward_fn = [R, C, norms, saved](Graph& g, const Node& self, const Tensor& gout) {
            Tensor ga(saved.shape, 0.0);
            for (std::size_t r = 0; r < R; ++r) {
                if (norms[r] > kNormEps) {
                    // d(x/|x|)/dx = (I - y y^T)/|x|
                    double gy = 0.0;
                    for (std::size_t c = 0; c < C; ++c)
                        gy += gout.values[r * C + c] * saved.values[r * C + c];
                    for (std::size_t c = 0; c < C; ++c)
                        ga.values[r * C + c] =
                            (gout.values[r * C + c] - gy * saved.values[r * C + c]) / norms[r];
                } else {
                    for (std::size_t c = 0; c < C; ++c)
                        ga.values[r * C + c] = gout.values[r * C + c] / kNormEps;
                }
            }
            g.accumulate(self.inputs[0], ga);
        };
    return push(std::move(n));
}

NodeId Graph::softmax(NodeId a) {
    const Tensor& ta = nodes_[a].value;
    check_finite("softmax", ta);
    const std::size_t R = ta.rows(), C = ta.cols();
    Node n;
    n.op = "softmax";
    n.inputs = {a};
    n.requires_grad = nodes_[a].requires_grad;
    Tensor out = ta;
    for (std::size_t r = 0; r < R; ++r) {
        double m = out.values[r * C];
        for (std::size_t c = 1; c < C; ++c) m = std::max(m, out.values[r * C + c]);
        double z = 0.0;
        for (std::size_t c = 0; c < C; ++c) {
            out.values[r * C + c] = std::exp(out.values[r * C + c] - m);
            z += out.values[r * C + c];
        }
        for (std::size_t c = 0; c < C; ++c) out.values[r * C + c] /= z;
    }
    out.requires_grad = n.requires_grad;
    Tensor saved = out;
    n.value = std::move(out);
    if (n.requires_grad)
        n.backward_fn = [R, C, saved](Graph& g, const Node& self, const Tensor& gout) {
            Tensor ga(saved.shape, 0.0);
            for (std::size_t r = 0; r < R; ++r) {
                double gy = 0.0;
                for (std::size_t c = 0; c < C; ++c)
                    gy += gout.values[r * C + c] * saved.values[r * C + c];
                for (std::size_t c = 0; c < C; ++c)
                    ga.values[r * C + c] =
                        saved.values[r * C + c] * (gout.values[r * C + c] - gy);
            }
            g.accumulate(self.inputs[0], ga);
        };
    return push(std::move(n));
}

NodeId Graph::log_softmax(NodeId a) {
    const Tensor& ta = nodes_[a].value;
    check_finite("log_softmax", ta);
    const std::size_t R = ta.rows(), C = ta.cols();
    Node n;
    n.op = "log_softmax";
    n.inputs = {a};
    n.requires_grad = nodes_[a].requires_grad;
    Tensor out = ta;
    Tensor probs = ta;
    for (std::size_t r = 0; r < R; ++r) {
        double m = ta.values[r * C];
        for (std::size_t c = 1; c < C; ++c) m = std::max(m, ta.values[r * C + c]);
        double z = 0.0;
        for (std::size_t c = 0; c < C; ++c) z += std::exp(ta.values[r * C + c] - m);
        const double lse = m + std::log(z);
        for (std::size_t c = 0; c < C; ++c) {
            out.values[r * C + c] = ta.values[r * C + c] - lse;
            probs.values[r * C + c] = std::exp(out.values[r * C + c]);
        }
    }
    out.requires_grad = n.requires_grad;
    n.value = std::move(out);
    if (n.requires_grad)
        n.backward_fn = [R, C, probs](Graph& g, const Node& self, const Tensor& gout) {
            Tensor ga(probs.shape, 0.0);
            for (std::size_t r = 0; r < R; ++r) {
                double gs = 0.0;
                for (std::size_t c = 0; c < C; ++c) gs += gout.values[r * C + c];
                for (std::size_t c = 0; c < C; ++c)
                    ga.values[r * C + c] =
                        gout.values[r * C + c] - gs * probs.values[r * C + c];
            }
            g.accumulate(self.inputs[0], ga);
        };
    return push(std::move(n));
}

NodeId Graph::dot(NodeId a, NodeId b) {
    const Tensor& ta = nodes_[a].value;
    const Tensor& tb = nodes_[b].value;
    check_finite("dot", ta);
    check_finite("dot", tb);
    if (ta.numel() != tb.numel())
        fail("dot", "shape mismatch " + shape_str(ta) + " vs " + shape_str(tb));
    Node n;
    n.op = "dot";
    n.inputs = {a, b};
    n.requires_grad = nodes_[a].requires_grad || nodes_[b].requires_grad;
    double s = 0.0;
    for (std::size_t i = 0; i < ta.numel(); ++i) s += ta.values[i] * tb.values[i];
    n.value = Tensor::scalar(s);
    n.value.requires_grad = n.requires_grad;
    if (n.requires_grad)
        n.backward_fn = [](Graph& g, const Node& self, const Tensor& gout) {
            const Tensor& va = g.in(self, 0);
            const Tensor& vb = g.in(self, 1);
            const double go = gout.values[0];
            Tensor ga(va.shape, 0.0), gb(vb.shape, 0.0);
            for (std::size_t i = 0; i < va.numel(); ++i) {
                ga.values[i] = go * vb.values[i];
                gb.values[i] = go * va.values[i];
            }
            g.accumulate(self.inputs[0], ga);
            g.accumulate(self.inputs[1], gb);
        };
    return push(std::move(n));
}

NodeId Graph::rowwise_dot(NodeId a, NodeId b) {
    const Tensor& ta = nodes_[a].value;
    const Tensor& tb = nodes_[b].value;
    check_finite("rowwise_dot", ta);
    check_finite("rowwise_dot", tb);
    const std::size_t R = ta.rows(), C = ta.cols();
    if (tb.rows() != R || tb.cols() != C)
        fail("rowwise_dot", "shape mismatch " + shape_str(ta) + " vs " + shape_str(tb));
    Node n;
    n.op = "rowwise_dot";
    n.inputs = {a, b};
    n.requires_grad = nodes_[a].requires_grad || nodes_[b].requires_grad;
    Tensor out({R, 1}, 0.0);
    for (std::size_t r = 0; r < R; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < C; ++c) s += ta.values[r * C + c] * tb.values[r * C + c];
        out.values[r] = s;
    }
    out.requires_grad = n.requires_grad;
    n.value = std::move(out);
    if (n.requires_grad)
        n.backward_fn = [R, C](Graph& g, const Node& self, const Tensor& gout) {
            const Tensor& va = g.in(self, 0);
            const Tensor& vb = g.in(self, 1);
            Tensor ga(va.shape, 0.0), gb(vb.shape, 0.0);
            for (std::size_t r = 0; r < R; ++r) {
                const double go = gout.values[r];
                for (std::size_t c = 0; c < C; ++c) {
                    ga.values[r * C + c] = go * vb.values[r * C + c];
                    gb.values[r * C + c] = go * va.values[r * C + c];
                }
            }
            g.accumulate(self.inputs[0], ga);
            g.accumulate(self.inputs[1], gb);
        };
    return push(std::move(n));
}

NodeId Graph::mean(NodeId a) {
    const Tensor& ta = nodes_[a].value;
    check_finite("mean", ta);
    if (ta.numel() == 0) fail("mean", "empty input");
    Node n;
    n.op = "mean";
    n.inputs = {a};
    n.requires_grad = nodes_[a].requires_grad;
    double s = 0.0;
    for (double v : ta.values) s += v;
    n.value = Tensor::scalar(s / static_cast<double>(ta.numel()));
    n.value.requires_grad = n.requires_grad;
    if (n.requires_grad)
        n.backward_fn = [](Graph& g, const Node& self, const Tensor& gout) {
            const Tensor& va = g.in(self, 0);
            Tensor ga(va.shape, gout.values[0] / static_cast<double>(va.numel()));
            g.accumulate(self.inputs[0], ga);
        };
    return push(std::move(n));
}

NodeId Graph::colmean(NodeId a) {
    const Tensor& ta = nodes_[a].value;
    check_finite("colmean", ta);
    const std::size_t R = ta.rows(), C = ta.cols();
    if (R == 0 || C == 0) fail("colmean", "empty input");
    Node n;
    n.op = "colmean";
    n.inputs = {a};
    n.requires_grad = nodes_[a].requires_grad;
    Tensor out({1, C}, 0.0);
    for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < C; ++c) out.values[c] += ta.values[r * C + c];
    for (double& v : out.values) v /= static_cast<double>(R);
    out.requires_grad = n.requires_grad;
    n.value = std::move(out);
    if (n.requires_grad)
        n.backward_fn = [R, C](Graph& g, const Node& self, const Tensor& gout) {
            const Tensor& va = g.in(self, 0);
            Tensor ga(va.shape, 0.0);
            for (std::size_t r = 0; r < R; ++r)
                for (std::size_t c = 0; c < C; ++c)
                    ga.values[r * C + c] = gout.values[c] / static_cast<double>(R);
            g.accumulate(self.inputs[0], ga);
        };
    return push(std::move(n));
}

NodeId Graph::infonce_masked(NodeId pos, NodeId sims, Tensor mask) {
    const Tensor& tp = nodes_[pos].value;
    const Tensor& ts = nodes_[sims].value;
    check_finite("infonce_masked", tp);
    check_finite("infonce_masked", ts);
    const std::size_t R = ts.rows(), M = ts.cols();
    if (tp.rows() != R || tp.cols() != 1)
        fail("infonce_masked", "pos must be " + std::to_string(R) + "x1, got " + shape_str(tp));
    if (mask.rows() != R || mask.cols() != M)
        fail("infonce_masked", "mask shape mismatch " + shape_str(mask) + " vs sims " + shape_str(ts));
    Node n;
    n.op = "infonce_masked";
    n.inputs = {pos, sims};
    n.requires_grad = nodes_[pos].requires_grad || nodes_[sims].requires_grad;
    Tensor out({R, 1}, 0.0);
    // softmax weights saved for backward: wp = e^pos/Z, ws_j = m_j e^s_j/Z
    Tensor wp({R, 1}, 0.0), ws({R, M}, 0.0);
    for (std::size_t r = 0; r < R; ++r) {
        double m = tp.values[r];
        for (std::size_t j = 0; j < M; ++j)
            if (mask.values[r * M + j] != 0.0) m = std::max(m, ts.values[r * M + j]);
        double z = std::exp(tp.values[r] - m);
        const double ep = z;
        for (std::size_t j = 0; j < M; ++j)
            if (mask.values[r * M + j] != 0.0) z += std::exp(ts.values[r * M + j] - m);
        out.values[r] = -(tp.values[r] - (m + std::log(z)));
        wp.values[r] = ep / z;
        for (std::size_t j = 0; j < M; ++j)
            if (mask.values[r * M + j] != 0.0)
                ws.values[r * M + j] = std::exp(ts.values[r * M + j] - m) / z;
    }
    out.requires_grad = n.requires_grad;
    n.value = std::move(out);
    if (n.requires_grad)
        n.backward_fn = [R, M, wp, ws](Graph& g, const Node& self, const Tensor& gout) {
            Tensor gp({R, 1}, 0.0), gs({R, M}, 0.0);
            for (std::size_t r = 0; r < R; ++r) {
                const double go = gout.values[r];
                gp.values[r] = go * (wp.values[r] - 1.0);
                for (std::size_t j = 0; j < M; ++j)
                    gs.values[r * M + j] = go * ws.values[r * M + j];
            }
            g.accumulate(self.inputs[0], gp);
            g.accumulate(self.inputs[1], gs);
        };
    return push(std::move(n));
}

// ---------------------------------------------------------------------------
// Finite-difference check
// ---------------------------------------------------------------------------

double grad_check(const std::function<NodeId(Graph&, const std::vector<NodeId>&)>& builder,
                  std::vector<Tensor> params, double step) {
    if (step <= 0.0) throw std::invalid_argument("grad_check: step must be positive");
    for (Tensor& p : params) p.requires_grad = true;

    auto eval = [&](const std::vector<Tensor>& ps, std::vector<const Tensor*>* grads) {
        Graph g;
        std::vector<NodeId> ids;
        ids.reserve(ps.size());
        for (const Tensor& p : ps) ids.push_back(g.leaf(p));
        NodeId out = builder(g, ids);
        const double v = g.value(out).values[0];
        if (!std::isfinite(v))
            throw std::runtime_error("grad_check: function returned non-finite value");
        if (grads) {
            g.backward(out);
            grads->clear();
            for (NodeId id : ids) grads->push_back(g.grad(id));
        }
        return v;
    };

    std::vector<const Tensor*> analytic_ptr;
    std::vector<Tensor> analytic;
    {
        Graph g;
        std::vector<NodeId> ids;
        for (const Tensor& p : params) ids.push_back(g.leaf(p));
        NodeId out = builder(g, ids);
        if (!std::isfinite(g.value(out).values[0]))
            throw std::runtime_error("grad_check: function returned non-finite value");
        g.backward(out);
        for (NodeId id : ids) {
            const Tensor* gp = g.grad(id);
            analytic.push_back(gp ? *gp : Tensor(g.value(id).shape, 0.0));
        }
    }

    double max_rel = 0.0;
    for (std::size_t p = 0; p < params.size(); ++p) {
        for (std::size_t i = 0; i < params[p].numel(); ++i) {
            const double orig = params[p].values[i];
            params[p].values[i] = orig + step;
            const double fp = eval(params, nullptr);
            params[p].values[i] = orig - step;
            const double fm = eval(params, nullptr);
            params[p].values[i] = orig;
            const double numeric = (fp - fm) / (2.0 * step);
            const double a = analytic[p].values[i];
            const double rel =
                std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
            max_rel = std::max(max_rel, rel);
        }
    }
    return max_rel;
}

} // namespace cna
