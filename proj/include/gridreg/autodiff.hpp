#pragma once

#include <Eigen/Core>

#include <functional>
#include <initializer_list>
#include <string>
#include <vector>

namespace gridreg::ad {

using Shape = std::vector<Eigen::Index>;

std::string to_string(const Shape& shape);
Eigen::Index shape_size(const Shape& shape);

/// Dense n-dimensional array, row-major (last index fastest).
template <typename Scalar>
struct Tensor {
    using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
    using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

    Shape shape;
    Array data;

    Tensor() = default;
    Tensor(Shape s, Array d);
    static Tensor zeros(Shape s) { return Tensor(s, Array::Zero(shape_size(s))); }
    static Tensor constant(Shape s, Scalar v) { return Tensor(s, Array::Constant(shape_size(s), v)); }
    static Tensor scalar(Scalar v) { return Tensor({1}, Array::Constant(1, v)); }

    Eigen::Index size() const { return data.size(); }
    Eigen::Index dim(std::size_t axis) const { return shape.at(axis); }
    std::size_t rank() const { return shape.size(); }

    /// View of a rank-2 tensor as a row-major matrix.
    Eigen::Map<RowMatrix> matrix();
    Eigen::Map<const RowMatrix> matrix() const;

    template <typename Other>
    Tensor<Other> cast() const {
        return Tensor<Other>(shape, data.template cast<Other>());
    }
};

enum class OpKind {
    leaf,
    add,
    mul,
    matmul,
    conv3d,
    relu,
    softmax_rows,
    softplus,
    concat_channels,
    reshape,
    tokens,
    scale,
    transpose,
    slice_cols,
    sum,
    custom,
};

std::string to_string(OpKind kind);

template <typename Scalar>
class Tape;

/// Handle to a tape node.
template <typename Scalar>
struct Var {
    Tape<Scalar>* tape = nullptr;
    int id = -1;

    const Tensor<Scalar>& value() const;
    const Shape& shape() const { return value().shape; }
};

/// Reverse-mode tape. Nodes are appended in evaluation order so parents always
/// precede their children; backward() sweeps the tape once in reverse.
template <typename Scalar>
class Tape {
public:
    using TensorT = Tensor<Scalar>;
    /// Receives the node's output adjoint and accumulates into its parents.
    using Backward = std::function<void(Tape&, const TensorT&)>;

    struct Node {
        int id = 0;
        OpKind kind = OpKind::leaf;
        std::vector<int> parents;
        TensorT value;
        TensorT grad; // empty until an adjoint reaches the node
        bool requires_grad = false;
        std::string name;
        Backward backward;
    };

    Var<Scalar> leaf(TensorT value, std::string name = {}, bool requires_grad = true);
    Var<Scalar> constant(TensorT value, std::string name = {}) { return leaf(std::move(value), std::move(name), false); }

    /// Appends an op node. `backward` is skipped when no parent needs a gradient.
    Var<Scalar> push(OpKind kind, std::vector<int> parents, TensorT value, Backward backward);

    /// Seeds d loss / d loss = 1 and propagates adjoints. Throws if the node is not scalar.
    void backward(Var<Scalar> loss);

    /// Adds `g` to the adjoint of node `id` (no-op for nodes without requires_grad).
    void accumulate(int id, const TensorT& g);

    const Node& node(int id) const { return nodes_.at(static_cast<std::size_t>(id)); }
    std::size_t size() const { return nodes_.size(); }
    /// Gradient of a node after backward(); zeros if no adjoint reached it.
    TensorT grad(Var<Scalar> v) const;

private:
    std::vector<Node> nodes_;
};

// --- primitives ---

/// Elementwise a + b. b may also be rank-1 with b.size() == last dim of a (row broadcast).
template <typename Scalar>
Var<Scalar> add(Var<Scalar> a, Var<Scalar> b);
/// Elementwise product of equal shapes.
template <typename Scalar>
Var<Scalar> mul(Var<Scalar> a, Var<Scalar> b);
/// [m,k] x [k,n] -> [m,n].
template <typename Scalar>
Var<Scalar> matmul(Var<Scalar> a, Var<Scalar> b);

struct ConvSpec {
    int kernel = 3;
    int stride = 2;
    int padding = 1;
};

/// Strided 3-D cross-correlation. x: [Ci,D,H,W], w: [Co,Ci,k,k,k], b: [Co] -> [Co,D',H',W'].
template <typename Scalar>
Var<Scalar> conv3d(Var<Scalar> x, Var<Scalar> w, Var<Scalar> b, const ConvSpec& spec);

/// relu with relu'(0) = 0.
template <typename Scalar>
Var<Scalar> relu(Var<Scalar> a);
/// Row-wise softmax of a rank-2 tensor.
template <typename Scalar>
Var<Scalar> softmax_rows(Var<Scalar> a);
template <typename Scalar>
Var<Scalar> softplus(Var<Scalar> a);
/// Concatenates rank-2 tensors with equal row counts along columns.
template <typename Scalar>
Var<Scalar> concat_channels(const std::vector<Var<Scalar>>& parts);
/// Same data, new shape.
template <typename Scalar>
Var<Scalar> reshape(Var<Scalar> a, Shape shape);
/// Flattens a [C,D,H,W] feature map into a [D*H*W, C] token matrix.
template <typename Scalar>
Var<Scalar> tokens(Var<Scalar> a);
template <typename Scalar>
Var<Scalar> scale(Var<Scalar> a, Scalar s);
template <typename Scalar>
Var<Scalar> transpose(Var<Scalar> a);
/// Columns [begin, begin + count) of a rank-2 tensor.
template <typename Scalar>
Var<Scalar> slice_cols(Var<Scalar> a, Eigen::Index begin, Eigen::Index count);
/// Sum of all entries, shape [1].
template <typename Scalar>
Var<Scalar> sum(Var<Scalar> a);

/// Vector-Jacobian product of an external op: upstream adjoint -> one adjoint per input.
template <typename Scalar>
using Vjp = std::function<std::vector<Tensor<Scalar>>(const Tensor<Scalar>& upstream)>;

/// Node whose value and derivative are computed outside the tape.
template <typename Scalar>
Var<Scalar> custom(const std::vector<Var<Scalar>>& inputs, Tensor<Scalar> value, Vjp<Scalar> vjp,
                   std::string name = "custom");

// --- parameters and gradient checking ---

enum class Init { zeros, he_normal, xavier_uniform };

template <typename Scalar>
struct Parameter {
    std::string name;
    Tensor<Scalar> value;
    Init init = Init::zeros;
};

struct GradcheckEntry {
    std::string name;
    double max_rel_error = 0.0; // max |analytic - numeric| / max(|analytic|_inf, |numeric|_inf)
    Eigen::Index worst_index = 0;
    bool passed = true;
};

struct GradcheckReport {
    std::vector<GradcheckEntry> entries;
    double tolerance = 0.0;
    bool passed = true;

    /// Name of the parameter with the largest error.
    std::string worst() const;
};

/// Rebuilds the graph from leaves bound to `params` and returns the scalar loss.
using GraphBuilder = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

/// Central finite differences (step `step`) against the tape gradient, per parameter.
GradcheckReport gradcheck(const GraphBuilder& build, const std::vector<Parameter<double>>& params, double tolerance,
                          double step = 1e-5);

} // namespace gridreg::ad
