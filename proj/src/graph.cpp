#include "mtbirads/graph.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>

namespace mtbr {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRow = Eigen::Map<RowMat>;
using MapRowC = Eigen::Map<const RowMat>;

// Unrolls k*k patches into a [C_in*k*k, H*W] matrix, zero padding.
RowMat im2col(const Tensor& in, int k) {
    const int C = in.dim(0), H = in.dim(1), W = in.dim(2);
    const int p = (k - 1) / 2;
    RowMat col(C * k * k, H * W);
    for (int c = 0; c < C; ++c) {
        const double* plane = in.data() + static_cast<size_t>(c) * H * W;
        for (int dy = 0; dy < k; ++dy) {
            for (int dx = 0; dx < k; ++dx) {
                double* row = col.data() + static_cast<size_t>((c * k + dy) * k + dx) * H * W;
                for (int y = 0; y < H; ++y) {
                    const int sy = y + dy - p;
                    if (sy < 0 || sy >= H) {
                        std::fill(row + y * W, row + (y + 1) * W, 0.0);
                        continue;
                    }
                    const double* src = plane + static_cast<size_t>(sy) * W;
                    for (int x = 0; x < W; ++x) {
                        const int sx = x + dx - p;
                        row[y * W + x] = (sx < 0 || sx >= W) ? 0.0 : src[sx];
                    }
                }
            }
        }
    }
    return col;
}

// Scatter-add the transpose of im2col back into image layout.
void col2im_add(const RowMat& col, int C, int H, int W, int k, Tensor& out) {
    const int p = (k - 1) / 2;
    for (int c = 0; c < C; ++c) {
        double* plane = out.data() + static_cast<size_t>(c) * H * W;
        for (int dy = 0; dy < k; ++dy) {
            for (int dx = 0; dx < k; ++dx) {
                const double* row = col.data() + static_cast<size_t>((c * k + dy) * k + dx) * H * W;
                for (int y = 0; y < H; ++y) {
                    const int sy = y + dy - p;
                    if (sy < 0 || sy >= H) continue;
                    double* dst = plane + static_cast<size_t>(sy) * W;
                    for (int x = 0; x < W; ++x) {
                        const int sx = x + dx - p;
                        if (sx >= 0 && sx < W) dst[sx] += row[y * W + x];
                    }
                }
            }
        }
    }
}

}  // namespace

NodeId Graph::push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size() - 1);
}

NodeId Graph::leaf(Tensor value) {
    Node n;
    n.kind = OpKind::Leaf;
    n.value = std::move(value);
    return push(std::move(n));
}

NodeId Graph::conv2d(NodeId input, NodeId kernel, NodeId bias) {
    const Tensor& x = value(input);
    const Tensor& k = value(kernel);
    const Tensor& b = value(bias);
    if (x.rank() != 3 || k.rank() != 4 || b.rank() != 1)
        throw DimensionError("conv2d: expected input[C,H,W], kernel[Co,Ci,k,k], bias[Co]");
    const int Ci = x.dim(0), H = x.dim(1), W = x.dim(2);
    const int Co = k.dim(0), kh = k.dim(2), kw = k.dim(3);
    if (k.dim(1) != Ci)
        throw DimensionError("conv2d: kernel C_in " + std::to_string(k.dim(1)) +
                             " != input C_in " + std::to_string(Ci));
    if (kh != kw || kh % 2 == 0) throw DimensionError("conv2d: kernel must be odd square");
    if (b.dim(0) != Co) throw DimensionError("conv2d: bias size != C_out");

    Node n;
    n.kind = OpKind::Conv2d;
    n.inputs = {input, kernel, bias};
    n.value = Tensor({Co, H, W});

    RowMat col = im2col(x, kh);
    MapRowC km(k.data(), Co, Ci * kh * kw);
    MapRow out(n.value.data(), Co, H * W);
    out.noalias() = km * col;
    for (int c = 0; c < Co; ++c) out.row(c).array() += b[static_cast<size_t>(c)];
    // keep the unrolled patches for backward
    n.taux = Tensor({Ci * kh * kw, H * W},
                    std::vector<double>(col.data(), col.data() + col.size()));
    return push(std::move(n));
}

NodeId Graph::maxpool2x2(NodeId input) {
    const Tensor& x = value(input);
    if (x.rank() != 3) throw DimensionError("maxpool2x2: expected [C,H,W]");
    const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
    if (H % 2 || W % 2) throw DimensionError("maxpool2x2: H and W must be even");

    Node n;
    n.kind = OpKind::MaxPool2x2;
    n.inputs = {input};
    n.value = Tensor({C, H / 2, W / 2});
    n.iaux.resize(n.value.size());
    size_t o = 0;
    for (int c = 0; c < C; ++c) {
        for (int y = 0; y < H; y += 2) {
            for (int x2 = 0; x2 < W; x2 += 2) {
                // first occurrence in row-major scan wins ties
                int best = (c * H + y) * W + x2;
                double bv = x[static_cast<size_t>(best)];
                const int cand[3] = {(c * H + y) * W + x2 + 1, (c * H + y + 1) * W + x2,
                                     (c * H + y + 1) * W + x2 + 1};
                for (int idx : cand) {
                    if (x[static_cast<size_t>(idx)] > bv) {
                        bv = x[static_cast<size_t>(idx)];
                        best = idx;
                    }
                }
                n.value[o] = bv;
                n.iaux[o] = best;
                ++o;
            }
        }
    }
    return push(std::move(n));
}

NodeId Graph::upsample2x2(NodeId input) {
    const Tensor& x = value(input);
    if (x.rank() != 3) throw DimensionError("upsample2x2: expected [C,H,W]");
    const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
    Node n;
    n.kind = OpKind::Upsample2x2;
    n.inputs = {input};
    n.value = Tensor({C, 2 * H, 2 * W});
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < 2 * H; ++y)
            for (int xx = 0; xx < 2 * W; ++xx)
                n.value.at(c, y, xx) = x.at(c, y / 2, xx / 2);
    return push(std::move(n));
}

NodeId Graph::concat_channels(NodeId a, NodeId b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    if (ta.rank() != 3 || tb.rank() != 3) throw DimensionError("concat_channels: expected [C,H,W]");
    if (ta.dim(1) != tb.dim(1) || ta.dim(2) != tb.dim(2))
        throw DimensionError("concat_channels: spatial mismatch " + ta.shape_str() + " vs " +
                             tb.shape_str());
    Node n;
    n.kind = OpKind::ConcatChannels;
    n.inputs = {a, b};
    n.value = Tensor({ta.dim(0) + tb.dim(0), ta.dim(1), ta.dim(2)});
    std::copy(ta.data(), ta.data() + ta.size(), n.value.data());
    std::copy(tb.data(), tb.data() + tb.size(), n.value.data() + ta.size());
    return push(std::move(n));
}

NodeId Graph::dense(NodeId input, NodeId weight, NodeId bias) {
    const Tensor& x = value(input);
    const Tensor& w = value(weight);
    const Tensor& b = value(bias);
    if (x.rank() != 1 || w.rank() != 2 || b.rank() != 1)
        throw DimensionError("dense: expected input[N], weight[M,N], bias[M]");
    const int M = w.dim(0), N = w.dim(1);
    if (x.dim(0) != N)
        throw DimensionError("dense: weight expects " + std::to_string(N) + " inputs, got " +
                             std::to_string(x.dim(0)));
    if (b.dim(0) != M) throw DimensionError("dense: bias size != M");
    Node n;
    n.kind = OpKind::Dense;
    n.inputs = {input, weight, bias};
    n.value = Tensor({M});
    MapRowC wm(w.data(), M, N);
    Eigen::Map<const Eigen::VectorXd> xv(x.data(), N);
    Eigen::Map<Eigen::VectorXd> out(n.value.data(), M);
    out.noalias() = wm * xv;
    out += Eigen::Map<const Eigen::VectorXd>(b.data(), M);
    return push(std::move(n));
}

NodeId Graph::relu(NodeId input) {
    const Tensor& x = value(input);
    Node n;
    n.kind = OpKind::Relu;
    n.inputs = {input};
    n.value = Tensor(x.shape());
    for (size_t i = 0; i < x.size(); ++i) n.value[i] = x[i] > 0.0 ? x[i] : 0.0;
    return push(std::move(n));
}

NodeId Graph::sigmoid(NodeId input) {
    const Tensor& x = value(input);
    Node n;
    n.kind = OpKind::Sigmoid;
    n.inputs = {input};
    n.value = Tensor(x.shape());
    for (size_t i = 0; i < x.size(); ++i) n.value[i] = 1.0 / (1.0 + std::exp(-x[i]));
    return push(std::move(n));
}

NodeId Graph::softmax(NodeId input) {
    const Tensor& x = value(input);
    if (x.rank() < 1) throw DimensionError("softmax: rank >= 1 required");
    const int cols = x.dim(x.rank() - 1);
    const size_t rows = x.size() / static_cast<size_t>(cols);
    Node n;
    n.kind = OpKind::Softmax;
    n.inputs = {input};
    n.value = Tensor(x.shape());
    for (size_t r = 0; r < rows; ++r) {
        const double* xi = x.data() + r * cols;
        double* yi = n.value.data() + r * cols;
        double mx = xi[0];
        for (int j = 1; j < cols; ++j) mx = std::max(mx, xi[j]);
        double s = 0.0;
        for (int j = 0; j < cols; ++j) {
            yi[j] = std::exp(xi[j] - mx);
            s += yi[j];
        }
        for (int j = 0; j < cols; ++j) yi[j] /= s;
    }
    return push(std::move(n));
}

NodeId Graph::global_avg_pool(NodeId input) {
    const Tensor& x = value(input);
    if (x.rank() != 3) throw DimensionError("global_avg_pool: expected [C,H,W]");
    const int C = x.dim(0);
    const size_t hw = static_cast<size_t>(x.dim(1)) * x.dim(2);
    Node n;
    n.kind = OpKind::GlobalAvgPool;
    n.inputs = {input};
    n.value = Tensor({C});
    for (int c = 0; c < C; ++c) {
        const double* p = x.data() + c * hw;
        double s = 0.0;
        for (size_t i = 0; i < hw; ++i) s += p[i];
        n.value[static_cast<size_t>(c)] = s / static_cast<double>(hw);
    }
    return push(std::move(n));
}

NodeId Graph::concat_vec(std::span<const NodeId> parts) {
    int total = 0;
    for (NodeId p : parts) {
        if (value(p).rank() != 1) throw DimensionError("concat_vec: rank-1 parts required");
        total += value(p).dim(0);
    }
    Node n;
    n.kind = OpKind::ConcatVec;
    n.inputs.assign(parts.begin(), parts.end());
    n.value = Tensor({total});
    double* out = n.value.data();
    for (NodeId p : parts) {
        const Tensor& t = value(p);
        out = std::copy(t.data(), t.data() + t.size(), out);
    }
    return push(std::move(n));
}

NodeId Graph::cross_entropy(NodeId probs, int target) {
    const Tensor& p = value(probs);
    if (p.rank() != 1) throw DimensionError("cross_entropy: rank-1 probs required");
    if (target < 0 || target >= p.dim(0))
        throw std::invalid_argument("cross_entropy: target index out of range");
    Node n;
    n.kind = OpKind::CrossEntropy;
    n.inputs = {probs};
    n.iaux = {target};
    n.value = Tensor::scalar(-std::log(std::max(p[static_cast<size_t>(target)], kCeClamp)));
    return push(std::move(n));
}

NodeId Graph::dice_loss(NodeId probs, Tensor mask) {
    const Tensor& p = value(probs);
    if (!p.same_shape(mask)) throw DimensionError("dice_loss: probs/mask shape mismatch");
    double inter = 0.0, psum = 0.0, gsum = 0.0;
    for (size_t i = 0; i < p.size(); ++i) {
        inter += p[i] * mask[i];
        psum += p[i];
        gsum += mask[i];
    }
    Node n;
    n.kind = OpKind::DiceLoss;
    n.inputs = {probs};
    n.taux = std::move(mask);
    n.daux = {2.0 * inter + kDiceEps, psum + gsum + kDiceEps};
    n.value = Tensor::scalar(1.0 - n.daux[0] / n.daux[1]);
    return push(std::move(n));
}

NodeId Graph::weighted_sum(std::span<const NodeId> terms, std::span<const double> weights) {
    if (terms.size() != weights.size())
        throw std::invalid_argument("weighted_sum: terms/weights length mismatch");
    double s = 0.0;
    for (size_t i = 0; i < terms.size(); ++i) {
        if (value(terms[i]).size() != 1)
            throw DimensionError("weighted_sum: scalar terms required");
        s += weights[i] * value(terms[i])[0];
    }
    Node n;
    n.kind = OpKind::WeightedSum;
    n.inputs.assign(terms.begin(), terms.end());
    n.daux.assign(weights.begin(), weights.end());
    n.value = Tensor::scalar(s);
    return push(std::move(n));
}

void Graph::backward(NodeId loss) {
    if (value(loss).size() != 1)
        throw std::logic_error("backward: loss must be scalar, got " + value(loss).shape_str());
    for (auto& n : nodes_) n.grad = Tensor(n.value.shape());
    at(loss).grad[0] = 1.0;
    for (NodeId id = loss; id >= 0; --id) backward_node(id);
}

void Graph::backward_node(NodeId id) {
    Node& n = at(id);
    const Tensor& g = n.grad;
    switch (n.kind) {
        case OpKind::Leaf:
            break;
        case OpKind::Conv2d: {
            Node& xi = at(n.inputs[0]);
            Node& ki = at(n.inputs[1]);
            Node& bi = at(n.inputs[2]);
            const int Ci = xi.value.dim(0), H = xi.value.dim(1), W = xi.value.dim(2);
            const int Co = ki.value.dim(0), k = ki.value.dim(2);
            MapRowC gout(g.data(), Co, H * W);
            MapRowC col(n.taux.data(), Ci * k * k, H * W);
            MapRow dk(ki.grad.data(), Co, Ci * k * k);
            dk.noalias() += gout * col.transpose();
            for (int c = 0; c < Co; ++c) bi.grad[static_cast<size_t>(c)] += gout.row(c).sum();
            MapRowC km(ki.value.data(), Co, Ci * k * k);
            RowMat dcol = km.transpose() * gout;
            col2im_add(dcol, Ci, H, W, k, xi.grad);
            break;
        }
        case OpKind::MaxPool2x2: {
            Node& xi = at(n.inputs[0]);
            for (size_t o = 0; o < n.value.size(); ++o)
                xi.grad[static_cast<size_t>(n.iaux[o])] += g[o];
            break;
        }
        case OpKind::Upsample2x2: {
            Node& xi = at(n.inputs[0]);
            const int C = xi.value.dim(0), H2 = n.value.dim(1), W2 = n.value.dim(2);
            for (int c = 0; c < C; ++c)
                for (int y = 0; y < H2; ++y)
                    for (int x = 0; x < W2; ++x)
                        xi.grad.at(c, y / 2, x / 2) += g.at(c, y, x);
            break;
        }
        case OpKind::ConcatChannels: {
            Node& a = at(n.inputs[0]);
            Node& b = at(n.inputs[1]);
            for (size_t i = 0; i < a.value.size(); ++i) a.grad[i] += g[i];
            for (size_t i = 0; i < b.value.size(); ++i) b.grad[i] += g[a.value.size() + i];
            break;
        }
        case OpKind::Dense: {
            Node& xi = at(n.inputs[0]);
            Node& wi = at(n.inputs[1]);
            Node& bi = at(n.inputs[2]);
            const int M = wi.value.dim(0), N = wi.value.dim(1);
            Eigen::Map<const Eigen::VectorXd> gv(g.data(), M);
            Eigen::Map<const Eigen::VectorXd> xv(xi.value.data(), N);
            MapRowC wm(wi.value.data(), M, N);
            Eigen::Map<Eigen::VectorXd>(xi.grad.data(), N).noalias() += wm.transpose() * gv;
            MapRow(wi.grad.data(), M, N).noalias() += gv * xv.transpose();
            Eigen::Map<Eigen::VectorXd>(bi.grad.data(), M) += gv;
            break;
        }
        case OpKind::Relu: {
            Node& xi = at(n.inputs[0]);
            for (size_t i = 0; i < g.size(); ++i)
                if (xi.value[i] > 0.0) xi.grad[i] += g[i];
            break;
        }
        case OpKind::Sigmoid: {
            Node& xi = at(n.inputs[0]);
            for (size_t i = 0; i < g.size(); ++i)
                xi.grad[i] += g[i] * n.value[i] * (1.0 - n.value[i]);
            break;
        }
        case OpKind::Softmax: {
            Node& xi = at(n.inputs[0]);
            const int cols = n.value.dim(n.value.rank() - 1);
            const size_t rows = n.value.size() / static_cast<size_t>(cols);
            for (size_t r = 0; r < rows; ++r) {
                const double* y = n.value.data() + r * cols;
                const double* gy = g.data() + r * cols;
                double dot = 0.0;
                for (int j = 0; j < cols; ++j) dot += gy[j] * y[j];
                double* gx = xi.grad.data() + r * cols;
                for (int j = 0; j < cols; ++j) gx[j] += y[j] * (gy[j] - dot);
            }
            break;
        }
        case OpKind::GlobalAvgPool: {
            Node& xi = at(n.inputs[0]);
            const int C = xi.value.dim(0);
            const size_t hw = static_cast<size_t>(xi.value.dim(1)) * xi.value.dim(2);
            for (int c = 0; c < C; ++c) {
                const double gc = g[static_cast<size_t>(c)] / static_cast<double>(hw);
                double* p = xi.grad.data() + c * hw;
                for (size_t i = 0; i < hw; ++i) p[i] += gc;
            }
            break;
        }
        case OpKind::ConcatVec: {
            size_t off = 0;
            for (NodeId in : n.inputs) {
                Node& xi = at(in);
                for (size_t i = 0; i < xi.value.size(); ++i) xi.grad[i] += g[off + i];
                off += xi.value.size();
            }
            break;
        }
        case OpKind::CrossEntropy: {
            Node& xi = at(n.inputs[0]);
            const size_t t = static_cast<size_t>(n.iaux[0]);
            if (xi.value[t] > kCeClamp) xi.grad[t] += g[0] * (-1.0 / xi.value[t]);
            break;
        }
        case OpKind::DiceLoss: {
            Node& xi = at(n.inputs[0]);
            const double A = n.daux[0], B = n.daux[1];
            // d/dp_i [1 - A/B] = (A - 2*g_i*B) / B^2
            for (size_t i = 0; i < xi.value.size(); ++i)
                xi.grad[i] += g[0] * (A - 2.0 * n.taux[i] * B) / (B * B);
            break;
        }
        case OpKind::WeightedSum: {
            for (size_t i = 0; i < n.inputs.size(); ++i) at(n.inputs[i]).grad[0] += g[0] * n.daux[i];
            break;
        }
    }
}

}  // namespace mtbr
