#include "mdrl/graph.hpp"

#include <algorithm>
#include <cmath>

namespace mdrl {

namespace {

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

void require(bool ok, const std::string& msg) {
    if (!ok) throw GraphError(msg);
}

} // namespace

const char* op_name(Graph::Op op) {
    switch (op) {
        case Graph::Op::constant: return "constant";
        case Graph::Op::param: return "param";
        case Graph::Op::matmul: return "matmul";
        case Graph::Op::matmul_nt: return "matmul_nt";
        case Graph::Op::add: return "add";
        case Graph::Op::add_row: return "add_row";
        case Graph::Op::mul: return "mul";
        case Graph::Op::mul_min: return "min";
        case Graph::Op::clamp: return "clamp";
        case Graph::Op::scalar_affine: return "scalar_affine";
        case Graph::Op::exp_: return "exp";
        case Graph::Op::tanh_: return "tanh";
        case Graph::Op::gelu: return "gelu";
        case Graph::Op::layer_norm: return "layer_norm";
        case Graph::Op::embed: return "embed";
        case Graph::Op::take_rows: return "take_rows";
        case Graph::Op::gather_pairs: return "gather_pairs";
        case Graph::Op::concat1d: return "concat1d";
        case Graph::Op::softmax: return "softmax";
        case Graph::Op::log_softmax: return "log_softmax";
        case Graph::Op::sum: return "sum";
        case Graph::Op::mean: return "mean";
    }
    return "?";
}

const Graph::Node& Graph::node(NodeId id) const {
    require(id >= 0 && static_cast<size_t>(id) < nodes_.size(), "graph: bad node id");
    return nodes_[static_cast<size_t>(id)];
}

Graph::Node& Graph::node(NodeId id) {
    require(id >= 0 && static_cast<size_t>(id) < nodes_.size(), "graph: bad node id");
    return nodes_[static_cast<size_t>(id)];
}

double Graph::scalar_value(NodeId id) const {
    const Node& n = node(id);
    require(n.value.is_scalar(), "graph: node is not scalar");
    return n.value.data[0];
}

void Graph::check_finite(const Node& n, NodeId id) const {
    if (!n.value.all_finite()) {
        throw GraphError("graph: non-finite value in node " + std::to_string(id) +
                         " (op " + op_name(n.op) + ")");
    }
}

NodeId Graph::push(Node n) {
    const NodeId id = static_cast<NodeId>(nodes_.size());
    forward_one(n);
    check_finite(n, id);
    nodes_.push_back(std::move(n));
    return id;
}

NodeId Graph::constant(Tensor v) {
    require(v.all_finite(), "graph: constant with non-finite values");
    Node n;
    n.op = Op::constant;
    n.value = std::move(v);
    const NodeId id = static_cast<NodeId>(nodes_.size());
    nodes_.push_back(std::move(n));
    return id;
}

NodeId Graph::param(const std::string& name, const Tensor& v) {
    auto it = params_.find(name);
    if (it != params_.end()) return it->second;
    require(v.all_finite(), "graph: param '" + name + "' with non-finite values");
    Node n;
    n.op = Op::param;
    n.name = name;
    n.value = v;
    const NodeId id = static_cast<NodeId>(nodes_.size());
    nodes_.push_back(std::move(n));
    params_.emplace(name, id);
    return id;
}

NodeId Graph::matmul(NodeId a, NodeId b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    require(A.ndim() == 2 && B.ndim() == 2 && A.shape[1] == B.shape[0],
            "matmul: incompatible shapes " + A.shape_str() + " x " + B.shape_str());
    Node n;
    n.op = Op::matmul;
    n.a = a;
    n.b = b;
    return push(std::move(n));
}

NodeId Graph::matmul_nt(NodeId a, NodeId b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    require(A.ndim() == 2 && B.ndim() == 2 && A.shape[1] == B.shape[1],
            "matmul_nt: incompatible shapes " + A.shape_str() + " x " + B.shape_str() + "^T");
    Node n;
    n.op = Op::matmul_nt;
    n.a = a;
    n.b = b;
    return push(std::move(n));
}

NodeId Graph::add(NodeId a, NodeId b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    Node n;
    n.a = a;
    n.b = b;
    if (A.same_shape(B)) {
        n.op = Op::add;
    } else if (A.ndim() == 2 && B.ndim() == 1 && A.shape[1] == B.shape[0]) {
        n.op = Op::add_row;
    } else {
        throw GraphError("add: incompatible shapes " + A.shape_str() + " + " + B.shape_str());
    }
    return push(std::move(n));
}

NodeId Graph::mul(NodeId a, NodeId b) {
    require(value(a).same_shape(value(b)), "mul: shape mismatch");
    Node n;
    n.op = Op::mul;
    n.a = a;
    n.b = b;
    return push(std::move(n));
}

NodeId Graph::min(NodeId a, NodeId b) {
    require(value(a).same_shape(value(b)), "min: shape mismatch");
    Node n;
    n.op = Op::mul_min;
    n.a = a;
    n.b = b;
    return push(std::move(n));
}

NodeId Graph::clamp(NodeId a, double lo, double hi) {
    require(lo <= hi, "clamp: lo > hi");
    Node n;
    n.op = Op::clamp;
    n.a = a;
    n.c0 = lo;
    n.c1 = hi;
    return push(std::move(n));
}

NodeId Graph::scalar_affine(NodeId a, double scale, double shift) {
    Node n;
    n.op = Op::scalar_affine;
    n.a = a;
    n.c0 = scale;
    n.c1 = shift;
    return push(std::move(n));
}

NodeId Graph::exp(NodeId a) {
    Node n;
    n.op = Op::exp_;
    n.a = a;
    return push(std::move(n));
}

NodeId Graph::tanh(NodeId a) {
    Node n;
    n.op = Op::tanh_;
    n.a = a;
    return push(std::move(n));
}

NodeId Graph::gelu(NodeId a) {
    Node n;
    n.op = Op::gelu;
    n.a = a;
    return push(std::move(n));
}

NodeId Graph::layer_norm(NodeId a, double eps) {
    require(eps > 0, "layer_norm: eps must be positive");
    Node n;
    n.op = Op::layer_norm;
    n.a = a;
    n.c0 = eps;
    return push(std::move(n));
}

NodeId Graph::embed(NodeId table, const std::vector<int64_t>& ids) {
    const Tensor& T = value(table);
    require(T.ndim() == 2, "embed: table must be 2-D");
    for (int64_t id : ids) {
        require(id >= 0 && id < T.shape[0], "embed: id out of range");
    }
    Node n;
    n.op = Op::embed;
    n.a = table;
    n.idx = ids;
    return push(std::move(n));
}

NodeId Graph::take_rows(NodeId a, const std::vector<int64_t>& rows) {
    const Tensor& A = value(a);
    require(A.ndim() == 2, "take_rows: input must be 2-D");
    for (int64_t r : rows) {
        require(r >= 0 && r < A.shape[0], "take_rows: row out of range");
    }
    Node n;
    n.op = Op::take_rows;
    n.a = a;
    n.idx = rows;
    return push(std::move(n));
}

NodeId Graph::gather_pairs(NodeId a, const std::vector<int64_t>& rows,
                           const std::vector<int64_t>& cols) {
    const Tensor& A = value(a);
    require(A.ndim() == 1 || A.ndim() == 2, "gather_pairs: input must be 1-D or 2-D");
    require(rows.size() == cols.size(), "gather_pairs: rows/cols size mismatch");
    for (size_t i = 0; i < rows.size(); ++i) {
        require(rows[i] >= 0 && rows[i] < A.rows() && cols[i] >= 0 && cols[i] < A.cols(),
                "gather_pairs: index out of range");
    }
    Node n;
    n.op = Op::gather_pairs;
    n.a = a;
    n.idx = rows;
    n.idx2 = cols;
    return push(std::move(n));
}

NodeId Graph::concat1d(NodeId a, NodeId b) {
    require(value(a).ndim() == 1 && value(b).ndim() == 1, "concat1d: inputs must be 1-D");
    Node n;
    n.op = Op::concat1d;
    n.a = a;
    n.b = b;
    return push(std::move(n));
}

NodeId Graph::softmax(NodeId a) {
    Node n;
    n.op = Op::softmax;
    n.a = a;
    return push(std::move(n));
}

NodeId Graph::log_softmax(NodeId a) {
    Node n;
    n.op = Op::log_softmax;
    n.a = a;
    return push(std::move(n));
}

NodeId Graph::sum(NodeId a) {
    Node n;
    n.op = Op::sum;
    n.a = a;
    return push(std::move(n));
}

NodeId Graph::mean(NodeId a) {
    require(value(a).numel() > 0, "mean: empty tensor");
    Node n;
    n.op = Op::mean;
    n.a = a;
    return push(std::move(n));
}

void Graph::forward_one(Node& n) {
    switch (n.op) {
        case Op::constant:
        case Op::param:
            return;
        case Op::matmul: {
            const Tensor& A = value(n.a);
            const Tensor& B = value(n.b);
            const int64_t m = A.shape[0], k = A.shape[1], c = B.shape[1];
            n.value = Tensor({m, c});
            for (int64_t i = 0; i < m; ++i) {
                for (int64_t kk = 0; kk < k; ++kk) {
                    const double av = A.at(i, kk);
                    if (av == 0.0) continue;
                    for (int64_t j = 0; j < c; ++j) {
                        n.value.at(i, j) += av * B.at(kk, j);
                    }
                }
            }
            return;
        }
        case Op::matmul_nt: {
            const Tensor& A = value(n.a);
            const Tensor& B = value(n.b);
            const int64_t m = A.shape[0], k = A.shape[1], r = B.shape[0];
            n.value = Tensor({m, r});
            for (int64_t i = 0; i < m; ++i) {
                for (int64_t j = 0; j < r; ++j) {
                    double acc = 0.0;
                    for (int64_t kk = 0; kk < k; ++kk) acc += A.at(i, kk) * B.at(j, kk);
                    n.value.at(i, j) = acc;
                }
            }
            return;
        }
        case Op::add: {
            const Tensor& A = value(n.a);
            const Tensor& B = value(n.b);
            n.value = A;
            for (int64_t i = 0; i < n.value.numel(); ++i) n.value.at(i) += B.at(i);
            return;
        }
        case Op::add_row: {
            const Tensor& A = value(n.a);
            const Tensor& B = value(n.b);
            n.value = A;
            const int64_t m = A.shape[0], c = A.shape[1];
            for (int64_t i = 0; i < m; ++i) {
                for (int64_t j = 0; j < c; ++j) n.value.at(i, j) += B.at(j);
            }
            return;
        }
        case Op::mul: {
            const Tensor& A = value(n.a);
            const Tensor& B = value(n.b);
            n.value = A;
            for (int64_t i = 0; i < n.value.numel(); ++i) n.value.at(i) *= B.at(i);
            return;
        }
        case Op::mul_min: {
            const Tensor& A = value(n.a);
            const Tensor& B = value(n.b);
            n.value = A;
            for (int64_t i = 0; i < n.value.numel(); ++i) {
                n.value.at(i) = std::min(A.at(i), B.at(i));
            }
            return;
        }
        case Op::clamp: {
            const Tensor& A = value(n.a);
            n.value = A;
            for (int64_t i = 0; i < n.value.numel(); ++i) {
                n.value.at(i) = std::clamp(A.at(i), n.c0, n.c1);
            }
            return;
        }
        case Op::scalar_affine: {
            const Tensor& A = value(n.a);
            n.value = A;
            for (int64_t i = 0; i < n.value.numel(); ++i) {
                n.value.at(i) = n.c0 * A.at(i) + n.c1;
            }
            return;
        }
        case Op::exp_: {
            const Tensor& A = value(n.a);
            n.value = A;
            for (int64_t i = 0; i < n.value.numel(); ++i) n.value.at(i) = std::exp(A.at(i));
            return;
        }
        case Op::tanh_: {
            const Tensor& A = value(n.a);
            n.value = A;
            for (int64_t i = 0; i < n.value.numel(); ++i) n.value.at(i) = std::tanh(A.at(i));
            return;
        }
        case Op::gelu: {
            const Tensor& A = value(n.a);
            n.value = A;
            for (int64_t i = 0; i < n.value.numel(); ++i) {
                const double x = A.at(i);
                n.value.at(i) = 0.5 * x * (1.0 + std::erf(x * kInvSqrt2));
            }
            return;
        }
        case Op::layer_norm: {
            const Tensor& A = value(n.a);
            n.value = A;
            const int64_t m = A.rows(), c = A.cols();
            for (int64_t i = 0; i < m; ++i) {
                double mu = 0.0;
                for (int64_t j = 0; j < c; ++j) mu += A.at(i, j);
                mu /= static_cast<double>(c);
                double var = 0.0;
                for (int64_t j = 0; j < c; ++j) {
                    const double d = A.at(i, j) - mu;
                    var += d * d;
                }
                var /= static_cast<double>(c);
                const double inv = 1.0 / std::sqrt(var + n.c0);
                for (int64_t j = 0; j < c; ++j) n.value.at(i, j) = (A.at(i, j) - mu) * inv;
            }
            return;
        }
        case Op::embed:
        case Op::take_rows: {
            const Tensor& A = value(n.a);
            const int64_t c = A.shape[1];
            n.value = Tensor({static_cast<int64_t>(n.idx.size()), c});
            for (size_t i = 0; i < n.idx.size(); ++i) {
                for (int64_t j = 0; j < c; ++j) {
                    n.value.at(static_cast<int64_t>(i), j) = A.at(n.idx[i], j);
                }
            }
            return;
        }
        case Op::gather_pairs: {
            const Tensor& A = value(n.a);
            n.value = Tensor({static_cast<int64_t>(n.idx.size())});
            for (size_t i = 0; i < n.idx.size(); ++i) {
                n.value.at(static_cast<int64_t>(i)) = A.at(n.idx[i], n.idx2[i]);
            }
            return;
        }
        case Op::concat1d: {
            const Tensor& A = value(n.a);
            const Tensor& B = value(n.b);
            n.value = Tensor({A.numel() + B.numel()});
            for (int64_t i = 0; i < A.numel(); ++i) n.value.at(i) = A.at(i);
            for (int64_t i = 0; i < B.numel(); ++i) n.value.at(A.numel() + i) = B.at(i);
            return;
        }
        case Op::softmax: {
            const Tensor& A = value(n.a);
            n.value = A;
            const int64_t m = A.rows(), c = A.cols();
            for (int64_t i = 0; i < m; ++i) {
                double mx = A.at(i, 0);
                for (int64_t j = 1; j < c; ++j) mx = std::max(mx, A.at(i, j));
                double z = 0.0;
                for (int64_t j = 0; j < c; ++j) {
                    const double e = std::exp(A.at(i, j) - mx);
                    n.value.at(i, j) = e;
                    z += e;
                }
                const double inv = 1.0 / z;
                for (int64_t j = 0; j < c; ++j) n.value.at(i, j) *= inv;
            }
            return;
        }
        case Op::log_softmax: {
            const Tensor& A = value(n.a);
            n.value = A;
            const int64_t m = A.rows(), c = A.cols();
            for (int64_t i = 0; i < m; ++i) {
                double mx = A.at(i, 0);
                for (int64_t j = 1; j < c; ++j) mx = std::max(mx, A.at(i, j));
                double z = 0.0;
                for (int64_t j = 0; j < c; ++j) z += std::exp(A.at(i, j) - mx);
                const double lz = mx + std::log(z);
                for (int64_t j = 0; j < c; ++j) n.value.at(i, j) = A.at(i, j) - lz;
            }
            return;
        }
        case Op::sum: {
            const Tensor& A = value(n.a);
            double acc = 0.0;
            for (int64_t i = 0; i < A.numel(); ++i) acc += A.at(i);
            n.value = Tensor::scalar(acc);
            return;
        }
        case Op::mean: {
            const Tensor& A = value(n.a);
            double acc = 0.0;
            for (int64_t i = 0; i < A.numel(); ++i) acc += A.at(i);
            n.value = Tensor::scalar(acc / static_cast<double>(A.numel()));
            return;
        }
    }
}

void Graph::recompute() {
    for (size_t i = 0; i < nodes_.size(); ++i) {
        Node& n = nodes_[i];
        if (n.op == Op::constant || n.op == Op::param) continue;
        forward_one(n);
        check_finite(n, static_cast<NodeId>(i));
    }
}

void Graph::set_param_value(NodeId id, int64_t flat_index, double v) {
    Node& n = node(id);
    require(n.op == Op::param, "set_param_value: node is not a param");
    n.value.at(flat_index) = v;
}

void Graph::zero_grads() {
    for (Node& n : nodes_) {
        std::fill(n.grad.data.begin(), n.grad.data.end(), 0.0);
    }
}

void Graph::backward_one(const Node& n) {
    const Tensor& g = n.grad;
    switch (n.op) {
        case Op::constant:
        case Op::param:
            return;
        case Op::matmul: {
            Node& A = node(n.a);
            Node& B = node(n.b);
            const int64_t m = A.value.shape[0], k = A.value.shape[1], c = B.value.shape[1];
            for (int64_t i = 0; i < m; ++i) {
                for (int64_t kk = 0; kk < k; ++kk) {
                    double acc = 0.0;
                    for (int64_t j = 0; j < c; ++j) acc += g.at(i, j) * B.value.at(kk, j);
                    A.grad.at(i, kk) += acc;
                }
            }
            for (int64_t kk = 0; kk < k; ++kk) {
                for (int64_t i = 0; i < m; ++i) {
                    const double av = A.value.at(i, kk);
                    if (av == 0.0) continue;
                    for (int64_t j = 0; j < c; ++j) B.grad.at(kk, j) += av * g.at(i, j);
                }
            }
            return;
        }
        case Op::matmul_nt: {
            Node& A = node(n.a);
            Node& B = node(n.b);
            const int64_t m = A.value.shape[0], k = A.value.shape[1], r = B.value.shape[0];
            for (int64_t i = 0; i < m; ++i) {
                for (int64_t j = 0; j < r; ++j) {
                    const double gv = g.at(i, j);
                    if (gv == 0.0) continue;
                    for (int64_t kk = 0; kk < k; ++kk) {
                        A.grad.at(i, kk) += gv * B.value.at(j, kk);
                        B.grad.at(j, kk) += gv * A.value.at(i, kk);
                    }
                }
            }
            return;
        }
        case Op::add: {
            Node& A = node(n.a);
            Node& B = node(n.b);
            for (int64_t i = 0; i < g.numel(); ++i) {
                A.grad.at(i) += g.at(i);
                B.grad.at(i) += g.at(i);
            }
            return;
        }
        case Op::add_row: {
            Node& A = node(n.a);
            Node& B = node(n.b);
            const int64_t m = n.value.shape[0], c = n.value.shape[1];
            for (int64_t i = 0; i < m; ++i) {
                for (int64_t j = 0; j < c; ++j) {
                    A.grad.at(i, j) += g.at(i, j);
                    B.grad.at(j) += g.at(i, j);
                }
            }
            return;
        }
        case Op::mul: {
            Node& A = node(n.a);
            Node& B = node(n.b);
            for (int64_t i = 0; i < g.numel(); ++i) {
                A.grad.at(i) += g.at(i) * B.value.at(i);
                B.grad.at(i) += g.at(i) * A.value.at(i);
            }
            return;
        }
        case Op::mul_min: {
            Node& A = node(n.a);
            Node& B = node(n.b);
            for (int64_t i = 0; i < g.numel(); ++i) {
                if (A.value.at(i) <= B.value.at(i)) {
                    A.grad.at(i) += g.at(i);
                } else {
                    B.grad.at(i) += g.at(i);
                }
            }
            return;
        }
        case Op::clamp: {
            Node& A = node(n.a);
            for (int64_t i = 0; i < g.numel(); ++i) {
                const double x = A.value.at(i);
                if (x > n.c0 && x < n.c1) A.grad.at(i) += g.at(i);
            }
            return;
        }
        case Op::scalar_affine: {
            Node& A = node(n.a);
            for (int64_t i = 0; i < g.numel(); ++i) A.grad.at(i) += n.c0 * g.at(i);
            return;
        }
        case Op::exp_: {
            Node& A = node(n.a);
            for (int64_t i = 0; i < g.numel(); ++i) A.grad.at(i) += g.at(i) * n.value.at(i);
            return;
        }
        case Op::tanh_: {
            Node& A = node(n.a);
            for (int64_t i = 0; i < g.numel(); ++i) {
                const double t = n.value.at(i);
                A.grad.at(i) += g.at(i) * (1.0 - t * t);
            }
            return;
        }
        case Op::gelu: {
            Node& A = node(n.a);
            for (int64_t i = 0; i < g.numel(); ++i) {
                const double x = A.value.at(i);
                const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
                const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
                A.grad.at(i) += g.at(i) * (cdf + x * pdf);
            }
            return;
        }
        case Op::layer_norm: {
            Node& A = node(n.a);
            const int64_t m = n.value.rows(), c = n.value.cols();
            for (int64_t i = 0; i < m; ++i) {
                double mu = 0.0;
                for (int64_t j = 0; j < c; ++j) mu += A.value.at(i, j);
                mu /= static_cast<double>(c);
                double var = 0.0;
                for (int64_t j = 0; j < c; ++j) {
                    const double d = A.value.at(i, j) - mu;
                    var += d * d;
                }
                var /= static_cast<double>(c);
                const double inv = 1.0 / std::sqrt(var + n.c0);
                double g_mean = 0.0, gy_mean = 0.0;
                for (int64_t j = 0; j < c; ++j) {
                    g_mean += g.at(i, j);
                    gy_mean += g.at(i, j) * n.value.at(i, j);
                }
                g_mean /= static_cast<double>(c);
                gy_mean /= static_cast<double>(c);
                for (int64_t j = 0; j < c; ++j) {
                    A.grad.at(i, j) += inv * (g.at(i, j) - g_mean - n.value.at(i, j) * gy_mean);
                }
            }
            return;
        }
        case Op::embed:
        case Op::take_rows: {
            Node& A = node(n.a);
            const int64_t c = n.value.shape[1];
            for (size_t i = 0; i < n.idx.size(); ++i) {
                for (int64_t j = 0; j < c; ++j) {
                    A.grad.at(n.idx[i], j) += g.at(static_cast<int64_t>(i), j);
                }
            }
            return;
        }
        case Op::gather_pairs: {
            Node& A = node(n.a);
            for (size_t i = 0; i < n.idx.size(); ++i) {
                A.grad.at(n.idx[i], n.idx2[i]) += g.at(static_cast<int64_t>(i));
            }
            return;
        }
        case Op::concat1d: {
            Node& A = node(n.a);
            Node& B = node(n.b);
            for (int64_t i = 0; i < A.grad.numel(); ++i) A.grad.at(i) += g.at(i);
            for (int64_t i = 0; i < B.grad.numel(); ++i) B.grad.at(i) += g.at(A.grad.numel() + i);
            return;
        }
        case Op::softmax: {
            Node& A = node(n.a);
            const int64_t m = n.value.rows(), c = n.value.cols();
            for (int64_t i = 0; i < m; ++i) {
                double dot = 0.0;
                for (int64_t j = 0; j < c; ++j) dot += g.at(i, j) * n.value.at(i, j);
                for (int64_t j = 0; j < c; ++j) {
                    A.grad.at(i, j) += n.value.at(i, j) * (g.at(i, j) - dot);
                }
            }
            return;
        }
        case Op::log_softmax: {
            Node& A = node(n.a);
            const int64_t m = n.value.rows(), c = n.value.cols();
            for (int64_t i = 0; i < m; ++i) {
                double gsum = 0.0;
                for (int64_t j = 0; j < c; ++j) gsum += g.at(i, j);
                for (int64_t j = 0; j < c; ++j) {
                    A.grad.at(i, j) += g.at(i, j) - std::exp(n.value.at(i, j)) * gsum;
                }
            }
            return;
        }
        case Op::sum: {
            Node& A = node(n.a);
            const double gv = g.data[0];
            for (int64_t i = 0; i < A.grad.numel(); ++i) A.grad.at(i) += gv;
            return;
        }
        case Op::mean: {
            Node& A = node(n.a);
            const double gv = g.data[0] / static_cast<double>(A.value.numel());
            for (int64_t i = 0; i < A.grad.numel(); ++i) A.grad.at(i) += gv;
            return;
        }
    }
}

void Graph::backward(NodeId loss) {
    Node& top = node(loss);
    require(top.value.is_scalar(), "backward: loss node is not scalar");
    for (Node& n : nodes_) {
        if (!n.grad.same_shape(n.value)) {
            n.grad = Tensor(n.value.shape);
        }
    }
    top.grad.data[0] = 1.0;
    for (size_t i = static_cast<size_t>(loss) + 1; i-- > 0;) {
        backward_one(nodes_[i]);
    }
    for (size_t i = 0; i < nodes_.size(); ++i) {
        if (!nodes_[i].grad.all_finite()) {
            throw GraphError("backward: non-finite gradient at node " + std::to_string(i) +
                             " (op " + std::string(op_name(nodes_[i].op)) + ")");
        }
    }
}

std::map<std::string, Tensor> Graph::evaluate_with_gradients(NodeId loss) {
    zero_grads();
    backward(loss);
    std::map<std::string, Tensor> out;
    for (const auto& [name, id] : params_) {
        out.emplace(name, node(id).grad);
    }
    return out;
}

double finite_difference_check(Graph& g, NodeId loss, double step) {
    if (!(step > 0)) throw GraphError("finite_difference_check: step must be > 0");
    g.zero_grads();
    g.backward(loss);

    // Snapshot analytic param grads before probing overwrites anything.
    std::vector<std::pair<NodeId, Tensor>> analytic;
    for (const auto& [name, id] : g.params()) {
        analytic.emplace_back(id, g.grad(id));
    }

    double worst = 0.0;
    for (const auto& [id, ga] : analytic) {
        const int64_t n = g.value(id).numel();
        for (int64_t i = 0; i < n; ++i) {
            const double saved = g.value(id).at(i);
            g.set_param_value(id, i, saved + step);
            g.recompute();
            const double fp = g.scalar_value(loss);
            g.set_param_value(id, i, saved - step);
            g.recompute();
            const double fm = g.scalar_value(loss);
            g.set_param_value(id, i, saved);
            const double fd = (fp - fm) / (2.0 * step);
            const double rel = std::abs(ga.at(i) - fd) / (std::abs(ga.at(i)) + 1e-8);
            worst = std::max(worst, rel);
        }
    }
    g.recompute();
    return worst;
}

} // namespace mdrl
