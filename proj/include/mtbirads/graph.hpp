#pragma once

#include <span>
#include <stdexcept>
#include <vector>

#include "mtbirads/tensor.hpp"

namespace mtbr {

class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

using NodeId = int;

enum class OpKind {
    Leaf,
    Conv2d,
    MaxPool2x2,
    Upsample2x2,
    ConcatChannels,
    Dense,
    Relu,
    Sigmoid,
    Softmax,
    GlobalAvgPool,
    ConcatVec,
    CrossEntropy,
    DiceLoss,
    WeightedSum,
};

// Define-by-run reverse-mode tape. A graph is built once per forward pass
// and confined to one thread; node inputs always precede the node.
class Graph {
public:
    struct Node {
        OpKind kind;
        std::vector<NodeId> inputs;
        Tensor value;
        Tensor grad;                // allocated lazily by backward()
        std::vector<int> iaux;      // maxpool argmax / cross-entropy target
        std::vector<double> daux;   // weighted-sum coefficients
        Tensor taux;                // dice ground-truth mask
    };

    NodeId leaf(Tensor value);

    // out[c,y,x] = bias[c] + sum input[c',y+dy-p,x+dx-p] * kernel[c,c',dy,dx],
    // zero padded, stride 1, odd k.
    NodeId conv2d(NodeId input, NodeId kernel, NodeId bias);
    NodeId maxpool2x2(NodeId input);
    NodeId upsample2x2(NodeId input);
    NodeId concat_channels(NodeId a, NodeId b);
    NodeId dense(NodeId input, NodeId weight, NodeId bias);
    NodeId relu(NodeId input);
    NodeId sigmoid(NodeId input);
    NodeId softmax(NodeId input);  // over the last axis
    NodeId global_avg_pool(NodeId input);
    NodeId concat_vec(std::span<const NodeId> parts);

    // -log(max(probs[target], 1e-12)); probs is rank-1
    NodeId cross_entropy(NodeId probs, int target);
    // 1 - (2*sum(p*g)+eps) / (sum(p)+sum(g)+eps) with eps = 1.0
    NodeId dice_loss(NodeId probs, Tensor mask);
    // sum_i weights[i] * scalar_node[i]
    NodeId weighted_sum(std::span<const NodeId> terms, std::span<const double> weights);

    // Reverse sweep from a scalar loss node; fills grad slots of every
    // node that the loss depends on. d(loss)/d(loss) = 1.
    void backward(NodeId loss);

    const Tensor& value(NodeId id) const { return nodes_[static_cast<size_t>(id)].value; }
    const Tensor& grad(NodeId id) const { return nodes_[static_cast<size_t>(id)].grad; }
    size_t node_count() const { return nodes_.size(); }

    static constexpr double kCeClamp = 1e-12;
    static constexpr double kDiceEps = 1.0;

private:
    NodeId push(Node n);
    Node& at(NodeId id) { return nodes_[static_cast<size_t>(id)]; }
    void backward_node(NodeId id);

    std::vector<Node> nodes_;
};

}  // namespace mtbr
