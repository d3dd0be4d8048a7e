#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

namespace cna {

// Dense row-major tensor of doubles, rank 1 or 2. Rank-1 tensors are
// treated as a single row by the row-wise operations.
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> values;
    bool requires_grad = false;

    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> shape_, double fill = 0.0);
    Tensor(std::vector<std::size_t> shape_, std::vector<double> values_);

    static Tensor scalar(double v);
    static Tensor row(std::vector<double> v);
    static Tensor matrix(std::size_t r, std::size_t c, std::vector<double> v);

    std::size_t numel() const { return values.size(); }
    std::size_t rows() const;
    std::size_t cols() const;

    double& at(std::size_t r, std::size_t c) { return values[r * cols() + c]; }
    double at(std::size_t r, std::size_t c) const { return values[r * cols() + c]; }

    bool all_finite() const;
    Tensor& set_requires_grad(bool b) {
        requires_grad = b;
        return *this;
    }
};

using NodeId = std::size_t;

// Reverse-mode tape. Nodes are recorded in construction order, which is a
// topological order by construction; backward walks it in reverse and sums
// gradient contributions from all consumers.
class Graph {
public:
    NodeId leaf(Tensor t);
    NodeId constant(Tensor t);

    NodeId add(NodeId a, NodeId b);
    NodeId mul(NodeId a, NodeId b);
    NodeId scale(NodeId a, double c);
    NodeId relu(NodeId a);
    NodeId exp(NodeId a);
    NodeId log(NodeId a);
    // x: B x I, w: I x O, b: length-O bias added to every row
    NodeId linear(NodeId x, NodeId w, NodeId b);
    // x: B x D, y: C x D  ->  x * y^T: B x C
    NodeId matmul_nt(NodeId x, NodeId y);
    NodeId l2_normalize(NodeId a);
    NodeId softmax(NodeId a);
    NodeId log_softmax(NodeId a);
    NodeId dot(NodeId a, NodeId b);         // flattened inner product -> scalar
    NodeId rowwise_dot(NodeId a, NodeId b); // per-row inner product -> B x 1
    NodeId mean(NodeId a);                  // all elements -> scalar
    NodeId colmean(NodeId a);               // mean over rows -> 1 x C
    // InfoNCE with per-row negative masks. pos: B x 1 positive similarities,
    // sims: B x M candidate similarities, mask: B x M in {0,1} selecting
    // negatives. Row loss: -log( e^pos / (e^pos + sum_masked e^sims) ).
    // An all-zero mask row contributes exactly 0.
    NodeId infonce_masked(NodeId pos, NodeId sims, Tensor mask);

    const Tensor& value(NodeId id) const { return nodes_[id].value; }
    bool node_requires_grad(NodeId id) const { return nodes_[id].requires_grad; }
    std::size_t size() const { return nodes_.size(); }

    // output must be scalar-valued; fills gradients for every node that
    // requires grad (zeros where the output does not depend on it).
    void backward(NodeId output);
    const Tensor* grad(NodeId id) const;

private:
    struct Node {
        std::string op;
        std::vector<NodeId> inputs;
        Tensor value;
        bool requires_grad = false;
        std::function<void(Graph&, const Node&, const Tensor&)> backward_fn;
    };

    NodeId push(Node n);
    void accumulate(NodeId id, const Tensor& contribution);
    const Tensor& in(const Node& n, std::size_t i) const { return nodes_[n.inputs[i]].value; }

    std::vector<Node> nodes_;
    std::vector<Tensor> grads_;
};

// Central finite-difference check of a scalar function built on a Graph.
// builder receives a fresh graph and leaf ids for each parameter tensor and
// returns the scalar output node. Returns the max relative error over all
// parameter coordinates, with denominator max(|analytic|, |numeric|, 1e-8).
double grad_check(const std::function<NodeId(Graph&, const std::vector<NodeId>&)>& builder,
                  std::vector<Tensor> params, double step = 1e-5);

} // namespace cna
