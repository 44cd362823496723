#pragma once

#include <cstdint>
#include <vector>

#include "mergeforge/tensor.hpp"

namespace mergeforge {

enum class OpKind : uint8_t {
    leaf,
    constant,
    matmul,
    add,
    multiply_scalar,
    relu,
    embedding_lookup,
    log_softmax_rows,
    gather_rows,
    mean,
    sum,
    layer_scale,
    exp,
    log,
    multiply,
};

using NodeId = int32_t;
inline constexpr NodeId kNoNode = -1;

// Reverse-mode tape over Tensor values. Nodes are appended in topological
// order, so a single backward sweep from a scalar loss visits every parent
// before its children. Gradients accumulate additively when a node feeds
// several consumers. A tape is single-threaded; distinct tapes over shared
// read-only parameter data may run concurrently.
class Tape {
public:
    struct Node {
        OpKind kind;
        Tensor value;
        NodeId a = kNoNode;
        NodeId b = kNoNode;
        double scalar = 0.0;
        bool trans_a = false;
        bool trans_b = false;
        std::vector<int32_t> indices;  // embedding/gather row indices
    };

    NodeId leaf(Tensor value);
    NodeId constant(Tensor value);

    NodeId matmul(NodeId a, NodeId b, bool trans_a = false, bool trans_b = false);
    // Elementwise add; also accepts [r x c] + [c] with the row vector
    // broadcast over rows (the only broadcast the model needs).
    NodeId add(NodeId a, NodeId b);
    NodeId multiply_scalar(NodeId a, double s);
    NodeId relu(NodeId a);
    NodeId embedding_lookup(NodeId table, std::vector<int32_t> ids);
    NodeId log_softmax_rows(NodeId a);
    NodeId gather_rows(NodeId a, std::vector<int32_t> rows);
    NodeId mean(NodeId a);
    NodeId sum(NodeId a);
    // x * s with s a 1-element node; the backward rule for s is the inner
    // product of the upstream gradient with x.
    NodeId layer_scale(NodeId x, NodeId s);
    NodeId exp(NodeId a);
    NodeId log(NodeId a);
    NodeId multiply(NodeId a, NodeId b);  // elementwise, same shape

    const Tensor& value(NodeId id) const { return nodes_[static_cast<size_t>(id)].value; }
    const Node& node(NodeId id) const { return nodes_[static_cast<size_t>(id)]; }
    size_t size() const { return nodes_.size(); }
    void reserve(size_t n) { nodes_.reserve(n); }

    // Reverse sweep from a scalar loss node. Returns one gradient tensor per
    // node id; nodes that do not reach the loss get an empty tensor.
    std::vector<Tensor> backward(NodeId loss) const;

private:
    NodeId push(Node n);
    const Tensor& in(NodeId id) const;

    std::vector<Node> nodes_;
};

}  // namespace mergeforge
