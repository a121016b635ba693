#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ctrl/tensor.hpp"

namespace ctrl::diff {

struct GraphError : std::runtime_error {
    explicit GraphError(const std::string& what) : std::runtime_error(what) {}
};

/// Named trainable tensors plus their gradient buffers. Parameters outlive
/// any Graph built over them; graphs reference them by name.
class ParameterStore {
  public:
    void add(const std::string& name, Tensor init) {
        if (index_.count(name)) throw GraphError("parameter '" + name + "' already exists");
        index_[name] = values_.size();
        names_.push_back(name);
        grads_.emplace_back(Tensor::zeros(init.shape));
        values_.push_back(std::move(init));
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    Tensor& value(const std::string& name) { return values_[lookup(name)]; }
    const Tensor& value(const std::string& name) const { return values_[lookup(name)]; }
    Tensor& grad(const std::string& name) { return grads_[lookup(name)]; }
    const Tensor& grad(const std::string& name) const { return grads_[lookup(name)]; }

    void zero_grad(const std::string& name) {
        Tensor& g = grad(name);
        std::fill(g.data.begin(), g.data.end(), 0.0);
    }

    /// Insertion order; deterministic across runs.
    const std::vector<std::string>& names() const { return names_; }

  private:
    std::size_t lookup(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw GraphError("unknown parameter '" + name + "'");
        return it->second;
    }

    std::unordered_map<std::string, std::size_t> index_;
    std::vector<std::string> names_;
    std::vector<Tensor> values_;
    std::vector<Tensor> grads_;
};

using NodeId = std::uint32_t;
inline constexpr NodeId kNoNode = 0xFFFFFFFFu;

enum class Op : std::uint8_t {
    Input,
    Const,
    Param,
    Affine,       // x [B,n]|[n], w [m,n], optional b [m] -> [B,m]|[m]
    Conv2d,       // x [C,H,W], w [F,C,kh,kw], b [F], valid, stride -> [F,OH,OW]
    Relu,
    Tanh,
    Exp,
    Softmax,      // over last axis, row-wise
    LogSoftmax,   // computed directly, not log(softmax)
    Add,
    Sub,
    Mul,          // elementwise
    AddN,
    ScalarMul,
    Concat,       // 1-D inputs -> 1-D
    GatherRow,    // table [R,n], fixed row -> [n]
    SelectPerRow, // m [B,n], fixed column per row -> [B]
    RowSum,       // [B,n] -> [B]
    ChannelMean,  // [C,H,W] -> [C] spatial mean per channel
    SumAll,
    MeanAll,
    L2Norm,          // -> scalar
    L2Normalize,     // row-wise x/|x|
    CosineSim,       // vectors -> scalar
    SquaredDist,     // sum((a-b)^2) -> scalar
    CrossEntropyRows,// q rows (distribution), p rows (log-distribution) -> [B]: -sum q*p
    Clamp,
    MinElem,
    Reshape,
    StopGrad,
};

inline const char* op_name(Op op) {
    switch (op) {
        case Op::Input: return "input";
        case Op::Const: return "const";
        case Op::Param: return "param";
        case Op::Affine: return "affine";
        case Op::Conv2d: return "conv2d";
        case Op::Relu: return "relu";
        case Op::Tanh: return "tanh";
        case Op::Exp: return "exp";
        case Op::Softmax: return "softmax";
        case Op::LogSoftmax: return "log_softmax";
        case Op::Add: return "add";
        case Op::Sub: return "sub";
        case Op::Mul: return "mul";
        case Op::AddN: return "add_n";
        case Op::ScalarMul: return "scalar_mul";
        case Op::Concat: return "concat";
        case Op::GatherRow: return "gather_row";
        case Op::SelectPerRow: return "select_per_row";
        case Op::RowSum: return "row_sum";
        case Op::ChannelMean: return "channel_mean";
        case Op::SumAll: return "sum_all";
        case Op::MeanAll: return "mean_all";
        case Op::L2Norm: return "l2_norm";
        case Op::L2Normalize: return "l2_normalize";
        case Op::CosineSim: return "cosine_sim";
        case Op::SquaredDist: return "squared_dist";
        case Op::CrossEntropyRows: return "cross_entropy_rows";
        case Op::Clamp: return "clamp";
        case Op::MinElem: return "min_elem";
        case Op::Reshape: return "reshape";
        case Op::StopGrad: return "stop_grad";
    }
    return "?";
}

namespace kernels {

// Shared between graph execution and the plain inference path so that both
// produce bit-identical values.

// eight independent accumulators let the reduction vectorize
inline double dot8(const double* a, const double* b, std::size_t n) {
    double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0, s4 = 0.0, s5 = 0.0, s6 = 0.0, s7 = 0.0;
    std::size_t k = 0;
    for (; k + 8 <= n; k += 8) {
        s0 += a[k] * b[k];
        s1 += a[k + 1] * b[k + 1];
        s2 += a[k + 2] * b[k + 2];
        s3 += a[k + 3] * b[k + 3];
        s4 += a[k + 4] * b[k + 4];
        s5 += a[k + 5] * b[k + 5];
        s6 += a[k + 6] * b[k + 6];
        s7 += a[k + 7] * b[k + 7];
    }
    for (; k < n; ++k) s0 += a[k] * b[k];
    return ((s0 + s1) + (s2 + s3)) + ((s4 + s5) + (s6 + s7));
}

inline void affine(const Tensor& x, const Tensor& w, const Tensor* b, Tensor& y) {
    const std::size_t n = w.shape[1], m = w.shape[0];
    const std::size_t batch = (x.rank() == 2) ? x.shape[0] : 1;
    const double* xp = x.data.data();
    const double* wp = w.data.data();
    double* yp = y.data.data();
    for (std::size_t i = 0; i < batch; ++i) {
        const double* xi = xp + i * n;
        double* yi = yp + i * m;
        for (std::size_t j = 0; j < m; ++j)
            yi[j] = (b ? b->data[j] : 0.0) + dot8(xi, wp + j * n, n);
    }
}

/// Patch matrix [OH*OW, C*KH*KW] for a valid strided convolution; the
/// flattened weight rows then multiply patches as plain dot products.
inline void im2col(const Tensor& x, std::size_t KH, std::size_t KW, std::size_t st, std::size_t OH,
                   std::size_t OW, std::vector<double>& patches) {
    const std::size_t C = x.shape[0], H = x.shape[1], W = x.shape[2];
    (void)H;
    const std::size_t K = C * KH * KW;
    patches.resize(OH * OW * K);
    for (std::size_t oh = 0; oh < OH; ++oh) {
        for (std::size_t ow = 0; ow < OW; ++ow) {
            double* row = patches.data() + (oh * OW + ow) * K;
            for (std::size_t c = 0; c < C; ++c) {
                const double* xc = x.data.data() + c * x.shape[1] * W;
                for (std::size_t kh = 0; kh < KH; ++kh) {
                    const double* src = xc + (oh * st + kh) * W + ow * st;
                    double* dst = row + (c * KH + kh) * KW;
                    for (std::size_t kw = 0; kw < KW; ++kw) dst[kw] = src[kw];
                }
            }
        }
    }
}

inline void conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, Tensor& y) {
    const std::size_t C = x.shape[0];
    const std::size_t F = w.shape[0], KH = w.shape[2], KW = w.shape[3];
    const std::size_t OH = y.shape[1], OW = y.shape[2];
    const std::size_t st = static_cast<std::size_t>(stride);
    const std::size_t K = C * KH * KW, P = OH * OW;
    static thread_local std::vector<double> patches;
    im2col(x, KH, KW, st, OH, OW, patches);
    for (std::size_t f = 0; f < F; ++f) {
        const double* wf = w.data.data() + f * K;
        double* yf = y.data.data() + f * P;
        const double bias = b.data[f];
        for (std::size_t p = 0; p < P; ++p) yf[p] = bias + dot8(patches.data() + p * K, wf, K);
    }
}

inline void softmax_row(const double* x, double* y, std::size_t n) {
    double m = x[0];
    for (std::size_t i = 1; i < n; ++i) m = std::max(m, x[i]);
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        y[i] = std::exp(x[i] - m);
        s += y[i];
    }
    const double inv = 1.0 / s;
    for (std::size_t i = 0; i < n; ++i) y[i] *= inv;
}

inline void log_softmax_row(const double* x, double* y, std::size_t n) {
    double m = x[0];
    for (std::size_t i = 1; i < n; ++i) m = std::max(m, x[i]);
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += std::exp(x[i] - m);
    const double lse = m + std::log(s);
    for (std::size_t i = 0; i < n; ++i) y[i] = x[i] - lse;
}

inline double l2_norm(const double* x, std::size_t n) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += x[i] * x[i];
    return std::sqrt(s);
}

inline double dot(const double* a, const double* b, std::size_t n) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
}

}  // namespace kernels

struct Node {
    Op op = Op::Const;
    std::vector<NodeId> inputs;
    Shape shape;
    std::string name;               // set for inputs, params, and marked outputs
    std::string param_name;
    Tensor const_value;             // Op::Const only
    std::vector<std::size_t> idx;   // GatherRow row / SelectPerRow columns
    double a = 0.0, b = 0.0;        // ScalarMul factor; Clamp bounds
    int stride = 1;                 // Conv2d
};

/// Reverse-mode differentiation over an explicit, topologically ordered node
/// list. Building is cheap; a fresh graph per update step is the intended
/// usage. evaluate() is pure: node values are recomputed from the inputs on
/// every call and parameters are read from the store at call time.
class Graph {
  public:
    explicit Graph(ParameterStore* store) : store_(store) {}

    NodeId input(const std::string& name, Shape shape) {
        Node n;
        n.op = Op::Input;
        n.shape = std::move(shape);
        n.name = name;
        input_index_[name] = static_cast<NodeId>(nodes_.size());
        return push(std::move(n));
    }

    NodeId constant(Tensor v, const std::string& name = "") {
        Node n;
        n.op = Op::Const;
        n.shape = v.shape;
        n.const_value = std::move(v);
        n.name = name;
        return push(std::move(n));
    }

    NodeId param(const std::string& name) {
        if (!store_ || !store_->has(name)) throw GraphError("param node: unknown parameter '" + name + "'");
        auto it = param_nodes_.find(name);
        if (it != param_nodes_.end()) return it->second;  // one node per parameter
        Node n;
        n.op = Op::Param;
        n.shape = store_->value(name).shape;
        n.name = name;
        n.param_name = name;
        const NodeId id = push(std::move(n));
        param_nodes_[name] = id;
        return id;
    }

    NodeId affine(NodeId x, NodeId w, NodeId bias = kNoNode) {
        const Shape& xs = at(x).shape;
        const Shape& ws = at(w).shape;
        if (ws.size() != 2) fail("affine", "weight must be rank-2, got " + shape_str(ws));
        const std::size_t n = ws[1], m = ws[0];
        std::size_t batch = 0;
        if (xs.size() == 1 && xs[0] == n) batch = 0;
        else if (xs.size() == 2 && xs[1] == n) batch = xs[0];
        else fail("affine", "input " + shape_str(xs) + " incompatible with weight " + shape_str(ws));
        if (bias != kNoNode) {
            const Shape& bs = at(bias).shape;
            if (bs.size() != 1 || bs[0] != m) fail("affine", "bias " + shape_str(bs) + " must be [" + std::to_string(m) + "]");
        }
        Node node;
        node.op = Op::Affine;
        node.inputs = {x, w};
        if (bias != kNoNode) node.inputs.push_back(bias);
        node.shape = batch ? Shape{batch, m} : Shape{m};
        return push(std::move(node));
    }

    NodeId conv2d(NodeId x, NodeId w, NodeId bias, int stride) {
        const Shape& xs = at(x).shape;
        const Shape& ws = at(w).shape;
        if (xs.size() != 3 || ws.size() != 4) fail("conv2d", "expects x [C,H,W], w [F,C,kh,kw]");
        if (ws[1] != xs[0]) fail("conv2d", "channel mismatch: x " + shape_str(xs) + " vs w " + shape_str(ws));
        if (xs[1] < ws[2] || xs[2] < ws[3]) fail("conv2d", "kernel larger than input");
        const Shape& bs = at(bias).shape;
        if (bs.size() != 1 || bs[0] != ws[0]) fail("conv2d", "bias must be [F]");
        const std::size_t oh = (xs[1] - ws[2]) / static_cast<std::size_t>(stride) + 1;
        const std::size_t ow = (xs[2] - ws[3]) / static_cast<std::size_t>(stride) + 1;
        Node node;
        node.op = Op::Conv2d;
        node.inputs = {x, w, bias};
        node.shape = {ws[0], oh, ow};
        node.stride = stride;
        return push(std::move(node));
    }

    NodeId relu(NodeId x) { return unary(Op::Relu, x); }
    NodeId tanh_(NodeId x) { return unary(Op::Tanh, x); }
    NodeId exp_(NodeId x) { return unary(Op::Exp, x); }
    NodeId softmax(NodeId x) { return rowwise(Op::Softmax, x); }
    NodeId log_softmax(NodeId x) { return rowwise(Op::LogSoftmax, x); }
    NodeId stop_gradient(NodeId x) { return unary(Op::StopGrad, x); }

    NodeId add(NodeId a, NodeId b) { return binary_same(Op::Add, a, b); }
    NodeId sub(NodeId a, NodeId b) { return binary_same(Op::Sub, a, b); }
    NodeId mul(NodeId a, NodeId b) { return binary_same(Op::Mul, a, b); }
    NodeId min_elem(NodeId a, NodeId b) { return binary_same(Op::MinElem, a, b); }

    NodeId add_n(const std::vector<NodeId>& xs) {
        if (xs.empty()) fail("add_n", "needs at least one input");
        const Shape& s = at(xs[0]).shape;
        for (NodeId x : xs)
            if (at(x).shape != s) fail("add_n", "shape mismatch across inputs");
        Node n;
        n.op = Op::AddN;
        n.inputs = xs;
        n.shape = s;
        return push(std::move(n));
    }

    NodeId scale(NodeId x, double c) {
        Node n;
        n.op = Op::ScalarMul;
        n.inputs = {x};
        n.shape = at(x).shape;
        n.a = c;
        return push(std::move(n));
    }

    NodeId concat(const std::vector<NodeId>& xs) {
        if (xs.empty()) fail("concat", "needs at least one input");
        std::size_t total = 0;
        for (NodeId x : xs) {
            if (at(x).shape.size() != 1) fail("concat", "inputs must be vectors");
            total += at(x).shape[0];
        }
        Node n;
        n.op = Op::Concat;
        n.inputs = xs;
        n.shape = {total};
        return push(std::move(n));
    }

    NodeId gather_row(NodeId table, std::size_t row) {
        const Shape& ts = at(table).shape;
        if (ts.size() != 2) fail("gather_row", "table must be rank-2");
        if (row >= ts[0]) fail("gather_row", "row " + std::to_string(row) + " out of range " + shape_str(ts));
        Node n;
        n.op = Op::GatherRow;
        n.inputs = {table};
        n.shape = {ts[1]};
        n.idx = {row};
        return push(std::move(n));
    }

    NodeId select_per_row(NodeId m, std::vector<std::size_t> cols) {
        const Shape& ms = at(m).shape;
        if (ms.size() != 2) fail("select_per_row", "input must be rank-2");
        if (cols.size() != ms[0]) fail("select_per_row", "one column index per row required");
        for (std::size_t c : cols)
            if (c >= ms[1]) fail("select_per_row", "column index out of range");
        Node n;
        n.op = Op::SelectPerRow;
        n.inputs = {m};
        n.shape = {ms[0]};
        n.idx = std::move(cols);
        return push(std::move(n));
    }

    NodeId row_sum(NodeId m) {
        const Shape& ms = at(m).shape;
        if (ms.size() != 2) fail("row_sum", "input must be rank-2");
        Node n;
        n.op = Op::RowSum;
        n.inputs = {m};
        n.shape = {ms[0]};
        return push(std::move(n));
    }

    NodeId channel_mean(NodeId x) {
        const Shape& xs = at(x).shape;
        if (xs.size() != 3) fail("channel_mean", "input must be [C,H,W]");
        Node n;
        n.op = Op::ChannelMean;
        n.inputs = {x};
        n.shape = {xs[0]};
        return push(std::move(n));
    }

    NodeId sum_all(NodeId x) { return reduce(Op::SumAll, x); }
    NodeId mean_all(NodeId x) { return reduce(Op::MeanAll, x); }
    NodeId l2_norm(NodeId x) { return reduce(Op::L2Norm, x); }

    NodeId l2_normalize(NodeId x) { return rowwise(Op::L2Normalize, x); }

    NodeId cosine_sim(NodeId a, NodeId b) {
        if (at(a).shape.size() != 1 || at(a).shape != at(b).shape) fail("cosine_sim", "expects two equal-length vectors");
        Node n;
        n.op = Op::CosineSim;
        n.inputs = {a, b};
        n.shape = {1};
        return push(std::move(n));
    }

    NodeId squared_dist(NodeId a, NodeId b) {
        if (at(a).shape != at(b).shape) fail("squared_dist", "shape mismatch");
        Node n;
        n.op = Op::SquaredDist;
        n.inputs = {a, b};
        n.shape = {1};
        return push(std::move(n));
    }

    NodeId cross_entropy_rows(NodeId q, NodeId p) {
        const Shape& qs = at(q).shape;
        if (qs != at(p).shape) fail("cross_entropy_rows", "shape mismatch");
        Node n;
        n.op = Op::CrossEntropyRows;
        n.inputs = {q, p};
        if (qs.size() == 1) n.shape = {1};
        else if (qs.size() == 2) n.shape = {qs[0]};
        else fail("cross_entropy_rows", "expects rank-1 or rank-2 inputs");
        return push(std::move(n));
    }

    NodeId clamp(NodeId x, double lo, double hi) {
        Node n;
        n.op = Op::Clamp;
        n.inputs = {x};
        n.shape = at(x).shape;
        n.a = lo;
        n.b = hi;
        return push(std::move(n));
    }

    NodeId reshape(NodeId x, Shape s) {
        if (shape_numel(s) != shape_numel(at(x).shape)) fail("reshape", "numel mismatch");
        Node n;
        n.op = Op::Reshape;
        n.inputs = {x};
        n.shape = std::move(s);
        return push(std::move(n));
    }

    void mark_output(NodeId id, const std::string& name) {
        at(id).name = name;
        outputs_.emplace_back(name, id);
    }

    std::size_t node_count() const { return nodes_.size(); }
    const Shape& node_shape(NodeId id) const { return at(id).shape; }

    /// Forward pass. Values are recomputed from scratch; parameters are read
    /// from the store. Returns the tensors of all marked outputs.
    std::map<std::string, Tensor> evaluate(const std::map<std::string, Tensor>& inputs = {}) {
        values_.assign(nodes_.size(), Tensor());
        for (NodeId id = 0; id < nodes_.size(); ++id) forward_node(id, inputs);
        evaluated_ = true;
        std::map<std::string, Tensor> out;
        for (const auto& [name, id] : outputs_) out[name] = values_[id];
        return out;
    }

    const Tensor& value(NodeId id) const {
        if (!evaluated_) throw GraphError("value(): graph not evaluated");
        return values_[id];
    }

    double scalar_value(NodeId id) const {
        const Tensor& t = value(id);
        if (t.numel() != 1) throw GraphError("scalar_value(): node is not scalar");
        return t.data[0];
    }

    /// Reverse sweep from a scalar loss. Gradients of every reachable
    /// parameter are written into the store (previous contents are zeroed);
    /// anything behind a StopGrad node contributes nothing.
    void backward(NodeId loss) {
        if (!evaluated_) throw GraphError("backward(): run evaluate() first");
        if (at(loss).shape != Shape{1}) throw GraphError("backward(): loss node must be scalar, got " + shape_str(at(loss).shape));
        grads_.assign(nodes_.size(), Tensor());
        grads_[loss] = Tensor::scalar(1.0);
        for (NodeId id = loss + 1; id-- > 0;) {
            if (grads_[id].numel() == 0) continue;
            backward_node(id);
        }
        // fold node gradients into the store
        for (NodeId id = 0; id < nodes_.size(); ++id) {
            const Node& n = nodes_[id];
            if (n.op != Op::Param) continue;
            Tensor& g = store_->grad(n.param_name);
            std::fill(g.data.begin(), g.data.end(), 0.0);
        }
        for (NodeId id = 0; id < nodes_.size(); ++id) {
            const Node& n = nodes_[id];
            if (n.op != Op::Param || grads_[id].numel() == 0) continue;
            Tensor& g = store_->grad(n.param_name);
            for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] += grads_[id].data[i];
        }
    }

    /// Names of parameters referenced by this graph, in first-use order.
    std::vector<std::string> touched_params() const {
        std::vector<std::string> out;
        for (const Node& n : nodes_)
            if (n.op == Op::Param && std::find(out.begin(), out.end(), n.param_name) == out.end())
                out.push_back(n.param_name);
        return out;
    }

    ParameterStore* store() { return store_; }

  private:
    Node& at(NodeId id) {
        if (id >= nodes_.size()) throw GraphError("bad node id");
        return nodes_[id];
    }
    const Node& at(NodeId id) const {
        if (id >= nodes_.size()) throw GraphError("bad node id");
        return nodes_[id];
    }

    [[noreturn]] void fail(const std::string& op, const std::string& msg) const {
        throw GraphError(op + " (node " + std::to_string(nodes_.size()) + "): " + msg);
    }

    NodeId push(Node n) {
        for (NodeId in : n.inputs)
            if (in >= nodes_.size()) throw GraphError("node input out of order");
        nodes_.push_back(std::move(n));
        evaluated_ = false;
        return static_cast<NodeId>(nodes_.size() - 1);
    }

    NodeId unary(Op op, NodeId x) {
        Node n;
        n.op = op;
        n.inputs = {x};
        n.shape = at(x).shape;
        return push(std::move(n));
    }

    NodeId rowwise(Op op, NodeId x) {
        const Shape& s = at(x).shape;
        if (s.size() != 1 && s.size() != 2) fail(op_name(op), "expects rank-1 or rank-2 input");
        return unary(op, x);
    }

    NodeId binary_same(Op op, NodeId a, NodeId b) {
        if (at(a).shape != at(b).shape)
            fail(op_name(op), "shape mismatch " + shape_str(at(a).shape) + " vs " + shape_str(at(b).shape));
        Node n;
        n.op = op;
        n.inputs = {a, b};
        n.shape = at(a).shape;
        return push(std::move(n));
    }

    NodeId reduce(Op op, NodeId x) {
        Node n;
        n.op = op;
        n.inputs = {x};
        n.shape = {1};
        return push(std::move(n));
    }

    static void rows_cols(const Shape& s, std::size_t& rows, std::size_t& cols) {
        if (s.size() == 1) {
            rows = 1;
            cols = s[0];
        } else {
            rows = s[0];
            cols = s[1];
        }
    }

    void forward_node(NodeId id, const std::map<std::string, Tensor>& inputs) {
        const Node& n = nodes_[id];
        Tensor& out = values_[id];
        switch (n.op) {
            case Op::Input: {
                auto it = inputs.find(n.name);
                if (it == inputs.end()) throw GraphError("input '" + n.name + "' not provided");
                if (it->second.shape != n.shape)
                    throw GraphError("input '" + n.name + "': shape " + shape_str(it->second.shape) +
                                     " does not match declared " + shape_str(n.shape));
                if (!it->second.all_finite()) throw GraphError("input '" + n.name + "': non-finite entries");
                out = it->second;
                return;  // already checked
            }
            case Op::Const:
                out = n.const_value;
                return;
            case Op::Param: {
                const Tensor& v = store_->value(n.param_name);
                if (v.shape != n.shape) throw GraphError("param '" + n.param_name + "': shape changed since graph build");
                out = v;
                break;
            }
            case Op::Affine: {
                const Tensor& x = values_[n.inputs[0]];
                const Tensor& w = values_[n.inputs[1]];
                const Tensor* b = n.inputs.size() > 2 ? &values_[n.inputs[2]] : nullptr;
                out = Tensor(n.shape);
                kernels::affine(x, w, b, out);
                break;
            }
            case Op::Conv2d: {
                out = Tensor(n.shape);
                kernels::conv2d(values_[n.inputs[0]], values_[n.inputs[1]], values_[n.inputs[2]], n.stride, out);
                break;
            }
            case Op::Relu: {
                const Tensor& x = values_[n.inputs[0]];
                out = Tensor(n.shape);
                for (std::size_t i = 0; i < x.numel(); ++i) out.data[i] = x.data[i] > 0.0 ? x.data[i] : 0.0;
                break;
            }
            case Op::Tanh: {
                const Tensor& x = values_[n.inputs[0]];
                out = Tensor(n.shape);
                for (std::size_t i = 0; i < x.numel(); ++i) out.data[i] = std::tanh(x.data[i]);
                break;
            }
            case Op::Exp: {
                const Tensor& x = values_[n.inputs[0]];
                out = Tensor(n.shape);
                for (std::size_t i = 0; i < x.numel(); ++i) out.data[i] = std::exp(x.data[i]);
                break;
            }
            case Op::Softmax:
            case Op::LogSoftmax: {
                const Tensor& x = values_[n.inputs[0]];
                out = Tensor(n.shape);
                std::size_t rows, cols;
                rows_cols(n.shape, rows, cols);
                for (std::size_t r = 0; r < rows; ++r) {
                    const double* xi = x.data.data() + r * cols;
                    double* yi = out.data.data() + r * cols;
                    if (n.op == Op::Softmax) kernels::softmax_row(xi, yi, cols);
                    else kernels::log_softmax_row(xi, yi, cols);
                }
                break;
            }
            case Op::Add:
            case Op::Sub:
            case Op::Mul:
            case Op::MinElem: {
                const Tensor& a = values_[n.inputs[0]];
                const Tensor& b = values_[n.inputs[1]];
                out = Tensor(n.shape);
                for (std::size_t i = 0; i < a.numel(); ++i) {
                    switch (n.op) {
                        case Op::Add: out.data[i] = a.data[i] + b.data[i]; break;
                        case Op::Sub: out.data[i] = a.data[i] - b.data[i]; break;
                        case Op::Mul: out.data[i] = a.data[i] * b.data[i]; break;
                        default: out.data[i] = a.data[i] <= b.data[i] ? a.data[i] : b.data[i]; break;
                    }
                }
                break;
            }
            case Op::AddN: {
                out = Tensor(n.shape);
                for (NodeId in : n.inputs) {
                    const Tensor& x = values_[in];
                    for (std::size_t i = 0; i < x.numel(); ++i) out.data[i] += x.data[i];
                }
                break;
            }
            case Op::ScalarMul: {
                const Tensor& x = values_[n.inputs[0]];
                out = Tensor(n.shape);
                for (std::size_t i = 0; i < x.numel(); ++i) out.data[i] = n.a * x.data[i];
                break;
            }
            case Op::Concat: {
                out = Tensor(n.shape);
                std::size_t off = 0;
                for (NodeId in : n.inputs) {
                    const Tensor& x = values_[in];
                    std::copy(x.data.begin(), x.data.end(), out.data.begin() + off);
                    off += x.numel();
                }
                break;
            }
            case Op::GatherRow: {
                const Tensor& t = values_[n.inputs[0]];
                const std::size_t cols = t.shape[1];
                out = Tensor(n.shape);
                std::copy_n(t.data.begin() + n.idx[0] * cols, cols, out.data.begin());
                break;
            }
            case Op::SelectPerRow: {
                const Tensor& m = values_[n.inputs[0]];
                const std::size_t cols = m.shape[1];
                out = Tensor(n.shape);
                for (std::size_t r = 0; r < m.shape[0]; ++r) out.data[r] = m.data[r * cols + n.idx[r]];
                break;
            }
            case Op::RowSum: {
                const Tensor& m = values_[n.inputs[0]];
                const std::size_t cols = m.shape[1];
                out = Tensor(n.shape);
                for (std::size_t r = 0; r < m.shape[0]; ++r) {
                    double s = 0.0;
                    for (std::size_t c = 0; c < cols; ++c) s += m.data[r * cols + c];
                    out.data[r] = s;
                }
                break;
            }
            case Op::ChannelMean: {
                const Tensor& x = values_[n.inputs[0]];
                const std::size_t plane = x.shape[1] * x.shape[2];
                out = Tensor(n.shape);
                for (std::size_t c = 0; c < x.shape[0]; ++c) {
                    double s = 0.0;
                    for (std::size_t i = 0; i < plane; ++i) s += x.data[c * plane + i];
                    out.data[c] = s / static_cast<double>(plane);
                }
                break;
            }
            case Op::SumAll:
            case Op::MeanAll: {
                const Tensor& x = values_[n.inputs[0]];
                double s = 0.0;
                for (double v : x.data) s += v;
                if (n.op == Op::MeanAll) s /= static_cast<double>(x.numel());
                out = Tensor::scalar(s);
                break;
            }
            case Op::L2Norm: {
                const Tensor& x = values_[n.inputs[0]];
                out = Tensor::scalar(kernels::l2_norm(x.data.data(), x.numel()));
                break;
            }
            case Op::L2Normalize: {
                const Tensor& x = values_[n.inputs[0]];
                out = Tensor(n.shape);
                std::size_t rows, cols;
                rows_cols(n.shape, rows, cols);
                for (std::size_t r = 0; r < rows; ++r) {
                    const double* xi = x.data.data() + r * cols;
                    const double nrm = kernels::l2_norm(xi, cols);
                    if (nrm == 0.0) throw GraphError("l2_normalize: zero-norm row " + std::to_string(r));
                    double* yi = out.data.data() + r * cols;
                    for (std::size_t c = 0; c < cols; ++c) yi[c] = xi[c] / nrm;
                }
                break;
            }
            case Op::CosineSim: {
                const Tensor& a = values_[n.inputs[0]];
                const Tensor& b = values_[n.inputs[1]];
                const double na = kernels::l2_norm(a.data.data(), a.numel());
                const double nb = kernels::l2_norm(b.data.data(), b.numel());
                if (na == 0.0 || nb == 0.0) throw GraphError("cosine_sim: zero-norm vector");
                out = Tensor::scalar(kernels::dot(a.data.data(), b.data.data(), a.numel()) / (na * nb));
                break;
            }
            case Op::SquaredDist: {
                const Tensor& a = values_[n.inputs[0]];
                const Tensor& b = values_[n.inputs[1]];
                double s = 0.0;
                for (std::size_t i = 0; i < a.numel(); ++i) {
                    const double d = a.data[i] - b.data[i];
                    s += d * d;
                }
                out = Tensor::scalar(s);
                break;
            }
            case Op::CrossEntropyRows: {
                const Tensor& q = values_[n.inputs[0]];
                const Tensor& p = values_[n.inputs[1]];
                std::size_t rows, cols;
                rows_cols(q.shape, rows, cols);
                out = Tensor(n.shape);
                for (std::size_t r = 0; r < rows; ++r) {
                    double s = 0.0;
                    for (std::size_t c = 0; c < cols; ++c) s += q.data[r * cols + c] * p.data[r * cols + c];
                    out.data[r] = -s;
                }
                break;
            }
            case Op::Clamp: {
                const Tensor& x = values_[n.inputs[0]];
                out = Tensor(n.shape);
                for (std::size_t i = 0; i < x.numel(); ++i)
                    out.data[i] = x.data[i] < n.a ? n.a : (x.data[i] > n.b ? n.b : x.data[i]);
                break;
            }
            case Op::Reshape:
            case Op::StopGrad: {
                out = values_[n.inputs[0]];
                out.shape = n.shape;
                break;
            }
        }
        if (!out.all_finite())
            throw GraphError(std::string(op_name(n.op)) + " node " + std::to_string(id) +
                             (n.name.empty() ? "" : " '" + n.name + "'") + ": non-finite output");
    }

    Tensor& node_grad(NodeId id) {
        if (grads_[id].numel() == 0) grads_[id] = Tensor::zeros(nodes_[id].shape);
        return grads_[id];
    }

    void backward_node(NodeId id) {
        const Node& n = nodes_[id];
        const Tensor& gy = grads_[id];
        switch (n.op) {
            case Op::Input:
            case Op::Const:
            case Op::Param:
            case Op::StopGrad:
                return;
            case Op::Affine: {
                const Tensor& x = values_[n.inputs[0]];
                const Tensor& w = values_[n.inputs[1]];
                const std::size_t m = w.shape[0], nn = w.shape[1];
                const std::size_t batch = (x.rank() == 2) ? x.shape[0] : 1;
                Tensor& gx = node_grad(n.inputs[0]);
                Tensor& gw = node_grad(n.inputs[1]);
                for (std::size_t i = 0; i < batch; ++i) {
                    const double* gyi = gy.data.data() + i * m;
                    const double* xi = x.data.data() + i * nn;
                    double* gxi = gx.data.data() + i * nn;
                    for (std::size_t j = 0; j < m; ++j) {
                        const double g = gyi[j];
                        if (g == 0.0) continue;
                        const double* wj = w.data.data() + j * nn;
                        double* gwj = gw.data.data() + j * nn;
                        for (std::size_t k = 0; k < nn; ++k) {
                            gxi[k] += g * wj[k];
                            gwj[k] += g * xi[k];
                        }
                    }
                }
                if (n.inputs.size() > 2) {
                    Tensor& gb = node_grad(n.inputs[2]);
                    for (std::size_t i = 0; i < batch; ++i)
                        for (std::size_t j = 0; j < m; ++j) gb.data[j] += gy.data[i * m + j];
                }
                break;
            }
            case Op::Conv2d: {
                const Tensor& x = values_[n.inputs[0]];
                const Tensor& w = values_[n.inputs[1]];
                Tensor& gx = node_grad(n.inputs[0]);
                Tensor& gw = node_grad(n.inputs[1]);
                Tensor& gb = node_grad(n.inputs[2]);
                const std::size_t C = x.shape[0], W_in = x.shape[2];
                const std::size_t F = w.shape[0], KH = w.shape[2], KW = w.shape[3];
                const std::size_t OH = n.shape[1], OW = n.shape[2];
                const std::size_t st = static_cast<std::size_t>(n.stride);
                const std::size_t K = C * KH * KW, P = OH * OW;
                std::vector<double> patches;
                kernels::im2col(x, KH, KW, st, OH, OW, patches);
                std::vector<double> gpatches(P * K, 0.0);
                for (std::size_t f = 0; f < F; ++f) {
                    const double* gyf = gy.data.data() + f * P;
                    const double* wf = w.data.data() + f * K;
                    double* gwf = gw.data.data() + f * K;
                    for (std::size_t p = 0; p < P; ++p) {
                        const double g = gyf[p];
                        if (g == 0.0) continue;
                        gb.data[f] += g;
                        const double* patch = patches.data() + p * K;
                        double* gpatch = gpatches.data() + p * K;
                        for (std::size_t k = 0; k < K; ++k) {
                            gwf[k] += g * patch[k];
                            gpatch[k] += g * wf[k];
                        }
                    }
                }
                // scatter patch gradients back to input positions
                for (std::size_t oh = 0; oh < OH; ++oh) {
                    for (std::size_t ow = 0; ow < OW; ++ow) {
                        const double* gpatch = gpatches.data() + (oh * OW + ow) * K;
                        for (std::size_t c = 0; c < C; ++c) {
                            double* gxc = gx.data.data() + c * x.shape[1] * W_in;
                            for (std::size_t kh = 0; kh < KH; ++kh) {
                                double* dst = gxc + (oh * st + kh) * W_in + ow * st;
                                const double* src = gpatch + (c * KH + kh) * KW;
                                for (std::size_t kw = 0; kw < KW; ++kw) dst[kw] += src[kw];
                            }
                        }
                    }
                }
                break;
            }
            case Op::Relu: {
                const Tensor& x = values_[n.inputs[0]];
                Tensor& gx = node_grad(n.inputs[0]);
                for (std::size_t i = 0; i < x.numel(); ++i)
                    if (x.data[i] > 0.0) gx.data[i] += gy.data[i];
                break;
            }
            case Op::Tanh: {
                const Tensor& y = values_[id];
                Tensor& gx = node_grad(n.inputs[0]);
                for (std::size_t i = 0; i < y.numel(); ++i) gx.data[i] += gy.data[i] * (1.0 - y.data[i] * y.data[i]);
                break;
            }
            case Op::Exp: {
                const Tensor& y = values_[id];
                Tensor& gx = node_grad(n.inputs[0]);
                for (std::size_t i = 0; i < y.numel(); ++i) gx.data[i] += gy.data[i] * y.data[i];
                break;
            }
            case Op::Softmax: {
                const Tensor& y = values_[id];
                Tensor& gx = node_grad(n.inputs[0]);
                std::size_t rows, cols;
                rows_cols(n.shape, rows, cols);
                for (std::size_t r = 0; r < rows; ++r) {
                    const double* yi = y.data.data() + r * cols;
                    const double* gyi = gy.data.data() + r * cols;
                    double* gxi = gx.data.data() + r * cols;
                    double s = 0.0;
                    for (std::size_t c = 0; c < cols; ++c) s += gyi[c] * yi[c];
                    for (std::size_t c = 0; c < cols; ++c) gxi[c] += yi[c] * (gyi[c] - s);
                }
                break;
            }
            case Op::LogSoftmax: {
                const Tensor& y = values_[id];
                Tensor& gx = node_grad(n.inputs[0]);
                std::size_t rows, cols;
                rows_cols(n.shape, rows, cols);
                for (std::size_t r = 0; r < rows; ++r) {
                    const double* yi = y.data.data() + r * cols;
                    const double* gyi = gy.data.data() + r * cols;
                    double* gxi = gx.data.data() + r * cols;
                    double s = 0.0;
                    for (std::size_t c = 0; c < cols; ++c) s += gyi[c];
                    for (std::size_t c = 0; c < cols; ++c) gxi[c] += gyi[c] - std::exp(yi[c]) * s;
                }
                break;
            }
            case Op::Add: {
                accumulate(n.inputs[0], gy, 1.0);
                accumulate(n.inputs[1], gy, 1.0);
                break;
            }
            case Op::Sub: {
                accumulate(n.inputs[0], gy, 1.0);
                accumulate(n.inputs[1], gy, -1.0);
                break;
            }
            case Op::Mul: {
                const Tensor& a = values_[n.inputs[0]];
                const Tensor& b = values_[n.inputs[1]];
                Tensor& ga = node_grad(n.inputs[0]);
                Tensor& gb = node_grad(n.inputs[1]);
                for (std::size_t i = 0; i < a.numel(); ++i) {
                    ga.data[i] += gy.data[i] * b.data[i];
                    gb.data[i] += gy.data[i] * a.data[i];
                }
                break;
            }
            case Op::MinElem: {
                // ties route the gradient to the first argument
                const Tensor& a = values_[n.inputs[0]];
                const Tensor& b = values_[n.inputs[1]];
                Tensor& ga = node_grad(n.inputs[0]);
                Tensor& gb = node_grad(n.inputs[1]);
                for (std::size_t i = 0; i < a.numel(); ++i) {
                    if (a.data[i] <= b.data[i]) ga.data[i] += gy.data[i];
                    else gb.data[i] += gy.data[i];
                }
                break;
            }
            case Op::AddN:
                for (NodeId in : n.inputs) accumulate(in, gy, 1.0);
                break;
            case Op::ScalarMul:
                accumulate(n.inputs[0], gy, n.a);
                break;
            case Op::Concat: {
                std::size_t off = 0;
                for (NodeId in : n.inputs) {
                    Tensor& gx = node_grad(in);
                    for (std::size_t i = 0; i < gx.numel(); ++i) gx.data[i] += gy.data[off + i];
                    off += gx.numel();
                }
                break;
            }
            case Op::GatherRow: {
                Tensor& gt = node_grad(n.inputs[0]);
                const std::size_t cols = nodes_[n.inputs[0]].shape[1];
                for (std::size_t c = 0; c < cols; ++c) gt.data[n.idx[0] * cols + c] += gy.data[c];
                break;
            }
            case Op::SelectPerRow: {
                Tensor& gm = node_grad(n.inputs[0]);
                const std::size_t cols = nodes_[n.inputs[0]].shape[1];
                for (std::size_t r = 0; r < n.shape[0]; ++r) gm.data[r * cols + n.idx[r]] += gy.data[r];
                break;
            }
            case Op::RowSum: {
                Tensor& gm = node_grad(n.inputs[0]);
                const std::size_t cols = nodes_[n.inputs[0]].shape[1];
                for (std::size_t r = 0; r < n.shape[0]; ++r)
                    for (std::size_t c = 0; c < cols; ++c) gm.data[r * cols + c] += gy.data[r];
                break;
            }
            case Op::ChannelMean: {
                Tensor& gx = node_grad(n.inputs[0]);
                const Shape& xs = nodes_[n.inputs[0]].shape;
                const std::size_t plane = xs[1] * xs[2];
                for (std::size_t c = 0; c < xs[0]; ++c) {
                    const double g = gy.data[c] / static_cast<double>(plane);
                    for (std::size_t i = 0; i < plane; ++i) gx.data[c * plane + i] += g;
                }
                break;
            }
            case Op::SumAll:
                accumulate_broadcast(n.inputs[0], gy.data[0]);
                break;
            case Op::MeanAll:
                accumulate_broadcast(n.inputs[0], gy.data[0] / static_cast<double>(values_[n.inputs[0]].numel()));
                break;
            case Op::L2Norm: {
                const Tensor& x = values_[n.inputs[0]];
                const double nrm = values_[id].data[0];
                if (nrm == 0.0) break;  // subgradient 0 at the origin
                Tensor& gx = node_grad(n.inputs[0]);
                for (std::size_t i = 0; i < x.numel(); ++i) gx.data[i] += gy.data[0] * x.data[i] / nrm;
                break;
            }
            case Op::L2Normalize: {
                const Tensor& x = values_[n.inputs[0]];
                const Tensor& y = values_[id];
                Tensor& gx = node_grad(n.inputs[0]);
                std::size_t rows, cols;
                rows_cols(n.shape, rows, cols);
                for (std::size_t r = 0; r < rows; ++r) {
                    const double* xi = x.data.data() + r * cols;
                    const double* yi = y.data.data() + r * cols;
                    const double* gyi = gy.data.data() + r * cols;
                    double* gxi = gx.data.data() + r * cols;
                    const double nrm = kernels::l2_norm(xi, cols);
                    double proj = 0.0;
                    for (std::size_t c = 0; c < cols; ++c) proj += gyi[c] * yi[c];
                    for (std::size_t c = 0; c < cols; ++c) gxi[c] += (gyi[c] - proj * yi[c]) / nrm;
                }
                break;
            }
            case Op::CosineSim: {
                const Tensor& a = values_[n.inputs[0]];
                const Tensor& b = values_[n.inputs[1]];
                Tensor& ga = node_grad(n.inputs[0]);
                Tensor& gb = node_grad(n.inputs[1]);
                const std::size_t len = a.numel();
                const double na = kernels::l2_norm(a.data.data(), len);
                const double nb = kernels::l2_norm(b.data.data(), len);
                const double cosab = values_[id].data[0];
                const double g = gy.data[0];
                for (std::size_t i = 0; i < len; ++i) {
                    ga.data[i] += g * (b.data[i] / (na * nb) - cosab * a.data[i] / (na * na));
                    gb.data[i] += g * (a.data[i] / (na * nb) - cosab * b.data[i] / (nb * nb));
                }
                break;
            }
            case Op::SquaredDist: {
                const Tensor& a = values_[n.inputs[0]];
                const Tensor& b = values_[n.inputs[1]];
                Tensor& ga = node_grad(n.inputs[0]);
                Tensor& gb = node_grad(n.inputs[1]);
                const double g = gy.data[0];
                for (std::size_t i = 0; i < a.numel(); ++i) {
                    const double d = 2.0 * (a.data[i] - b.data[i]);
                    ga.data[i] += g * d;
                    gb.data[i] -= g * d;
                }
                break;
            }
            case Op::CrossEntropyRows: {
                const Tensor& q = values_[n.inputs[0]];
                const Tensor& p = values_[n.inputs[1]];
                Tensor& gq = node_grad(n.inputs[0]);
                Tensor& gp = node_grad(n.inputs[1]);
                std::size_t rows, cols;
                rows_cols(q.shape, rows, cols);
                for (std::size_t r = 0; r < rows; ++r) {
                    const double g = gy.data[r];
                    for (std::size_t c = 0; c < cols; ++c) {
                        gq.data[r * cols + c] -= g * p.data[r * cols + c];
                        gp.data[r * cols + c] -= g * q.data[r * cols + c];
                    }
                }
                break;
            }
            case Op::Clamp: {
                const Tensor& x = values_[n.inputs[0]];
                Tensor& gx = node_grad(n.inputs[0]);
                for (std::size_t i = 0; i < x.numel(); ++i)
                    if (x.data[i] > n.a && x.data[i] < n.b) gx.data[i] += gy.data[i];
                break;
            }
            case Op::Reshape: {
                Tensor& gx = node_grad(n.inputs[0]);
                for (std::size_t i = 0; i < gx.numel(); ++i) gx.data[i] += gy.data[i];
                break;
            }
        }
    }

    void accumulate(NodeId id, const Tensor& g, double scale) {
        Tensor& gx = node_grad(id);
        for (std::size_t i = 0; i < gx.numel(); ++i) gx.data[i] += scale * g.data[i];
    }

    void accumulate_broadcast(NodeId id, double g) {
        Tensor& gx = node_grad(id);
        for (double& v : gx.data) v += g;
    }

    ParameterStore* store_;
    std::vector<Node> nodes_;
    std::vector<Tensor> values_;
    std::vector<Tensor> grads_;
    std::vector<std::pair<std::string, NodeId>> outputs_;
    std::unordered_map<std::string, NodeId> input_index_;
    std::unordered_map<std::string, NodeId> param_nodes_;
    bool evaluated_ = false;
};

}  // namespace ctrl::diff
