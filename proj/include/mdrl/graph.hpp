#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "mdrl/tensor.hpp"

namespace mdrl {

using NodeId = int32_t;

struct GraphError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Reverse-mode tape over dense tensors. The op set is the closure needed by
// the denoiser and every training loss: matmul (plain and a*b^T), add with
// optional row broadcast, elementwise multiply / min / clamp / exp, scalar
// affine, layer-normalize, GELU and tanh, embedding lookup, row selection,
// (row, col) gather, softmax / log-softmax, and full sum / mean reductions.
//
// Forward values are computed eagerly as nodes are created and every op
// checks its output for NaN/Inf; a non-finite value throws GraphError naming
// the offending node. Graphs are single-owner objects: no internal locking.
class Graph {
public:
    enum class Op : uint8_t {
        constant,
        param,
        matmul,      // a [m,k] * b [k,n]
        matmul_nt,   // a [m,k] * b[n,k]^T
        add,         // same shape
        add_row,     // a [m,n] + b [n]
        mul,         // same shape, elementwise
        mul_min,     // elementwise min(a, b); ties route gradient to a
        clamp,       // clamp(a, c0, c1); gradient passes strictly inside
        scalar_affine, // c0 * a + c1
        exp_,
        tanh_,
        gelu,
        layer_norm,  // per-row, eps = c0
        embed,       // rows of param table a at idx
        take_rows,   // rows of a at idx
        gather_pairs, // a[idx[i], idx2[i]] -> vector
        concat1d,    // [m] ++ [n] -> [m+n]
        softmax,     // per row
        log_softmax, // per row
        sum,         // all elements -> scalar
        mean,        // all elements -> scalar
    };

    struct Node {
        Op op;
        NodeId a = -1;
        NodeId b = -1;
        double c0 = 0.0;
        double c1 = 0.0;
        std::vector<int64_t> idx;
        std::vector<int64_t> idx2;
        std::string name; // params only
        Tensor value;
        Tensor grad;
    };

    NodeId constant(Tensor v);
    NodeId scalar(double v) { return constant(Tensor::scalar(v)); }

    // Named leaf with a gradient slot. Registering an existing name returns
    // the original node so gradients from reuse accumulate in one place.
    NodeId param(const std::string& name, const Tensor& v);

    NodeId matmul(NodeId a, NodeId b);
    NodeId matmul_nt(NodeId a, NodeId b);
    NodeId add(NodeId a, NodeId b);           // same shape or [m,n]+[n]
    NodeId sub(NodeId a, NodeId b) { return add(a, scalar_affine(b, -1.0, 0.0)); }
    NodeId mul(NodeId a, NodeId b);
    NodeId min(NodeId a, NodeId b);
    NodeId clamp(NodeId a, double lo, double hi);
    NodeId scalar_affine(NodeId a, double scale, double shift);
    NodeId exp(NodeId a);
    NodeId tanh(NodeId a);
    NodeId gelu(NodeId a);
    NodeId layer_norm(NodeId a, double eps = 1e-5);
    NodeId embed(NodeId table, const std::vector<int64_t>& ids);
    NodeId take_rows(NodeId a, const std::vector<int64_t>& rows);
    NodeId gather_pairs(NodeId a, const std::vector<int64_t>& rows, const std::vector<int64_t>& cols);
    NodeId concat1d(NodeId a, NodeId b);
    NodeId softmax(NodeId a);
    NodeId log_softmax(NodeId a);
    NodeId sum(NodeId a);
    NodeId mean(NodeId a);

    const Tensor& value(NodeId id) const { return node(id).value; }
    const Tensor& grad(NodeId id) const { return node(id).grad; }
    double scalar_value(NodeId id) const;

    size_t size() const { return nodes_.size(); }
    const Node& node(NodeId id) const;
    Node& node(NodeId id);

    // Overwrite a param leaf's value (finite-difference probing).
    void set_param_value(NodeId id, int64_t flat_index, double v);

    // Re-evaluate every node in creation order from current leaf values.
    void recompute();

    void zero_grads();

    // Reverse pass from a scalar loss. Allocates (zeroed) gradients for all
    // nodes first, so disconnected parameters end up with exact zeros.
    void backward(NodeId loss);

    // backward + gradient collection for every registered parameter.
    std::map<std::string, Tensor> evaluate_with_gradients(NodeId loss);

    const std::unordered_map<std::string, NodeId>& params() const { return params_; }

private:
    NodeId push(Node n);
    void forward_one(Node& n);
    void backward_one(const Node& n);
    void check_finite(const Node& n, NodeId id) const;

    std::vector<Node> nodes_;
    std::unordered_map<std::string, NodeId> params_;
};

// Max over parameter elements of |analytic - central difference| /
// (|analytic| + 1e-8). Runs one backward pass, then probes every parameter
// element at +/- step with a full forward recompute.
double finite_difference_check(Graph& g, NodeId loss, double step);

const char* op_name(Graph::Op op);

} // namespace mdrl
