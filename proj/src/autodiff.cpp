#include "gridreg/autodiff.hpp"

#include "gridreg/gridfield.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace gridreg::ad {

std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "," : "") << shape[i];
    }
    os << ']';
    return os.str();
}

Eigen::Index shape_size(const Shape& shape) {
    Eigen::Index n = 1;
    for (auto d : shape) {
        if (d < 0) throw std::invalid_argument("negative dimension in shape " + to_string(shape));
        n *= d;
    }
    return n;
}

std::string to_string(OpKind kind) {
    switch (kind) {
    case OpKind::leaf: return "leaf";
    case OpKind::add: return "add";
    case OpKind::mul: return "mul";
    case OpKind::matmul: return "matmul";
    case OpKind::conv3d: return "conv3d";
    case OpKind::relu: return "relu";
    case OpKind::softmax_rows: return "softmax_rows";
    case OpKind::softplus: return "softplus";
    case OpKind::concat_channels: return "concat_channels";
    case OpKind::reshape: return "reshape";
    case OpKind::tokens: return "tokens";
    case OpKind::scale: return "scale";
    case OpKind::transpose: return "transpose";
    case OpKind::slice_cols: return "slice_cols";
    case OpKind::sum: return "sum";
    case OpKind::custom: return "custom";
    }
    return "unknown";
}

template <typename Scalar>
Tensor<Scalar>::Tensor(Shape s, Array d) : shape(std::move(s)), data(std::move(d)) {
    if (shape_size(shape) != data.size()) {
        throw std::invalid_argument("tensor shape " + to_string(shape) + " does not match " +
                                    std::to_string(data.size()) + " values");
    }
}

template <typename Scalar>
Eigen::Map<typename Tensor<Scalar>::RowMatrix> Tensor<Scalar>::matrix() {
    if (rank() != 2) throw std::invalid_argument("matrix view needs rank 2, got " + to_string(shape));
    return Eigen::Map<RowMatrix>(data.data(), shape[0], shape[1]);
}

template <typename Scalar>
Eigen::Map<const typename Tensor<Scalar>::RowMatrix> Tensor<Scalar>::matrix() const {
    if (rank() != 2) throw std::invalid_argument("matrix view needs rank 2, got " + to_string(shape));
    return Eigen::Map<const RowMatrix>(data.data(), shape[0], shape[1]);
}

template <typename Scalar>
const Tensor<Scalar>& Var<Scalar>::value() const {
    return tape->node(id).value;
}

template <typename Scalar>
Var<Scalar> Tape<Scalar>::leaf(TensorT value, std::string name, bool requires_grad) {
    if (!value.data.allFinite()) {
        throw std::invalid_argument("leaf '" + name + "' holds non-finite values");
    }
    Node n;
    n.id = static_cast<int>(nodes_.size());
    n.kind = OpKind::leaf;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.name = std::move(name);
    nodes_.push_back(std::move(n));
    return {this, nodes_.back().id};
}

template <typename Scalar>
Var<Scalar> Tape<Scalar>::push(OpKind kind, std::vector<int> parents, TensorT value, Backward backward) {
    Node n;
    n.id = static_cast<int>(nodes_.size());
    n.kind = kind;
    for (int p : parents) {
        if (p < 0 || p >= n.id) throw std::logic_error("tape parent out of order");
        n.requires_grad = n.requires_grad || nodes_[static_cast<std::size_t>(p)].requires_grad;
    }
    n.parents = std::move(parents);
    n.value = std::move(value);
    if (n.requires_grad) {
        n.backward = std::move(backward);
    }
    n.name = to_string(kind);
    nodes_.push_back(std::move(n));
    return {this, nodes_.back().id};
}

template <typename Scalar>
void Tape<Scalar>::accumulate(int id, const TensorT& g) {
    Node& n = nodes_.at(static_cast<std::size_t>(id));
    if (!n.requires_grad) {
        return;
    }
    if (g.data.size() != n.value.data.size()) {
        throw std::logic_error("adjoint of shape " + to_string(g.shape) + " for node " + n.name + " of shape " +
                               to_string(n.value.shape));
    }
    if (n.grad.data.size() == 0) {
        n.grad = TensorT(n.value.shape, g.data);
    } else {
        n.grad.data += g.data;
    }
}

template <typename Scalar>
void Tape<Scalar>::backward(Var<Scalar> loss) {
    if (loss.tape != this) throw std::invalid_argument("loss node belongs to another tape");
    Node& root = nodes_.at(static_cast<std::size_t>(loss.id));
    if (root.value.size() != 1) {
        throw std::invalid_argument("backward needs a scalar loss, got shape " + to_string(root.value.shape));
    }
    for (auto& n : nodes_) {
        n.grad = TensorT();
    }
    if (!root.requires_grad) {
        return;
    }
    root.grad = TensorT(root.value.shape, TensorT::Array::Ones(1));
    for (int i = loss.id; i >= 0; --i) {
        Node& n = nodes_[static_cast<std::size_t>(i)];
        if (n.grad.data.size() == 0 || !n.backward) {
            continue;
        }
        n.backward(*this, n.grad);
    }
}

template <typename Scalar>
Tensor<Scalar> Tape<Scalar>::grad(Var<Scalar> v) const {
    const Node& n = node(v.id);
    if (n.grad.data.size() == 0) {
        return TensorT::zeros(n.value.shape);
    }
    return n.grad;
}

namespace {

[[noreturn]] void shape_error(OpKind kind, const Shape& a, const Shape& b) {
    throw std::invalid_argument(to_string(kind) + ": incompatible shapes " + to_string(a) + " and " + to_string(b));
}

template <typename Scalar>
using RowMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using ColMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

} // namespace

template <typename Scalar>
Var<Scalar> add(Var<Scalar> a, Var<Scalar> b) {
    using T = Tensor<Scalar>;
    const T& av = a.value();
    const T& bv = b.value();
    if (av.shape == bv.shape) {
        return a.tape->push(OpKind::add, {a.id, b.id}, T(av.shape, av.data + bv.data),
                            [ia = a.id, ib = b.id](Tape<Scalar>& t, const T& g) {
                                t.accumulate(ia, g);
                                t.accumulate(ib, g);
                            });
    }
    if (bv.rank() != 1 || av.rank() == 0 || av.shape.back() != bv.size()) {
        shape_error(OpKind::add, av.shape, bv.shape);
    }
    const Eigen::Index cols = bv.size();
    const Eigen::Index rows = av.size() / cols;
    T out = av;
    Eigen::Map<RowMat<Scalar>>(out.data.data(), rows, cols).rowwise() += bv.data.matrix().transpose();
    return a.tape->push(OpKind::add, {a.id, b.id}, std::move(out),
                        [ia = a.id, ib = b.id, rows, cols, bshape = bv.shape](Tape<Scalar>& t, const T& g) {
                            t.accumulate(ia, g);
                            const Eigen::Map<const RowMat<Scalar>> gm(g.data.data(), rows, cols);
                            t.accumulate(ib, T(bshape, gm.colwise().sum().transpose().array()));
                        });
}

template <typename Scalar>
Var<Scalar> mul(Var<Scalar> a, Var<Scalar> b) {
    using T = Tensor<Scalar>;
    const T& av = a.value();
    const T& bv = b.value();
    if (av.shape != bv.shape) shape_error(OpKind::mul, av.shape, bv.shape);
    return a.tape->push(OpKind::mul, {a.id, b.id}, T(av.shape, av.data * bv.data),
                        [ia = a.id, ib = b.id](Tape<Scalar>& t, const T& g) {
                            const T& x = t.node(ia).value;
                            const T& y = t.node(ib).value;
                            t.accumulate(ia, T(x.shape, g.data * y.data));
                            t.accumulate(ib, T(y.shape, g.data * x.data));
                        });
}

template <typename Scalar>
Var<Scalar> matmul(Var<Scalar> a, Var<Scalar> b) {
    using T = Tensor<Scalar>;
    const T& av = a.value();
    const T& bv = b.value();
    if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) shape_error(OpKind::matmul, av.shape, bv.shape);
    T out = T::zeros({av.dim(0), bv.dim(1)});
    out.matrix().noalias() = av.matrix() * bv.matrix();
    return a.tape->push(OpKind::matmul, {a.id, b.id}, std::move(out),
                        [ia = a.id, ib = b.id](Tape<Scalar>& t, const T& g) {
                            const T& x = t.node(ia).value;
                            const T& y = t.node(ib).value;
                            const auto gm = g.matrix();
                            if (t.node(ia).requires_grad) {
                                T ga = T::zeros(x.shape);
                                ga.matrix().noalias() = gm * y.matrix().transpose();
                                t.accumulate(ia, ga);
                            }
                            if (t.node(ib).requires_grad) {
                                T gb = T::zeros(y.shape);
                                gb.matrix().noalias() = x.matrix().transpose() * gm;
                                t.accumulate(ib, gb);
                            }
                        });
}

namespace {

struct ConvGeometry {
    Eigen::Index ci, d, h, w;
    Eigen::Index od, oh, ow;
    int k, s, p;

    Eigen::Index patch() const { return ci * k * k * k; }
    Eigen::Index positions() const { return od * oh * ow; }
};

template <typename Scalar>
ColMat<Scalar> im2col(const Scalar* x, const ConvGeometry& g) {
    ColMat<Scalar> col = ColMat<Scalar>::Zero(g.patch(), g.positions());
    for (Eigen::Index oz = 0; oz < g.od; ++oz) {
        for (Eigen::Index oy = 0; oy < g.oh; ++oy) {
            for (Eigen::Index ox = 0; ox < g.ow; ++ox) {
                const Eigen::Index pos = (oz * g.oh + oy) * g.ow + ox;
                Eigen::Index row = 0;
                for (Eigen::Index c = 0; c < g.ci; ++c) {
                    for (int dz = 0; dz < g.k; ++dz) {
                        const Eigen::Index z = oz * g.s - g.p + dz;
                        for (int dy = 0; dy < g.k; ++dy) {
                            const Eigen::Index y = oy * g.s - g.p + dy;
                            for (int dx = 0; dx < g.k; ++dx, ++row) {
                                const Eigen::Index xx = ox * g.s - g.p + dx;
                                if (z < 0 || y < 0 || xx < 0 || z >= g.d || y >= g.h || xx >= g.w) continue;
                                col(row, pos) = x[((c * g.d + z) * g.h + y) * g.w + xx];
                            }
                        }
                    }
                }
            }
        }
    }
    return col;
}

template <typename Scalar>
void col2im(const ColMat<Scalar>& col, const ConvGeometry& g, Scalar* x) {
    for (Eigen::Index oz = 0; oz < g.od; ++oz) {
        for (Eigen::Index oy = 0; oy < g.oh; ++oy) {
            for (Eigen::Index ox = 0; ox < g.ow; ++ox) {
                const Eigen::Index pos = (oz * g.oh + oy) * g.ow + ox;
                Eigen::Index row = 0;
                for (Eigen::Index c = 0; c < g.ci; ++c) {
                    for (int dz = 0; dz < g.k; ++dz) {
                        const Eigen::Index z = oz * g.s - g.p + dz;
                        for (int dy = 0; dy < g.k; ++dy) {
                            const Eigen::Index y = oy * g.s - g.p + dy;
                            for (int dx = 0; dx < g.k; ++dx, ++row) {
                                const Eigen::Index xx = ox * g.s - g.p + dx;
                                if (z < 0 || y < 0 || xx < 0 || z >= g.d || y >= g.h || xx >= g.w) continue;
                                x[((c * g.d + z) * g.h + y) * g.w + xx] += col(row, pos);
                            }
                        }
                    }
                }
            }
        }
    }
}

} // namespace

template <typename Scalar>
Var<Scalar> conv3d(Var<Scalar> x, Var<Scalar> w, Var<Scalar> b, const ConvSpec& spec) {
    using T = Tensor<Scalar>;
    const T& xv = x.value();
    const T& wv = w.value();
    const T& bv = b.value();
    if (spec.kernel < 1 || spec.stride < 1 || spec.padding < 0) {
        throw std::invalid_argument("conv3d: invalid kernel/stride/padding");
    }
    if (xv.rank() != 4 || wv.rank() != 5 || wv.dim(1) != xv.dim(0) || wv.dim(2) != spec.kernel ||
        wv.dim(3) != spec.kernel || wv.dim(4) != spec.kernel) {
        shape_error(OpKind::conv3d, xv.shape, wv.shape);
    }
    if (bv.rank() != 1 || bv.size() != wv.dim(0)) shape_error(OpKind::conv3d, wv.shape, bv.shape);
    ConvGeometry g{xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3), 0, 0, 0, spec.kernel, spec.stride, spec.padding};
    auto out_len = [&](Eigen::Index n) {
        const Eigen::Index span = n + 2 * spec.padding - spec.kernel;
        if (span < 0) shape_error(OpKind::conv3d, xv.shape, wv.shape);
        return span / spec.stride + 1;
    };
    g.od = out_len(g.d);
    g.oh = out_len(g.h);
    g.ow = out_len(g.w);
    const Eigen::Index co = wv.dim(0);

    ColMat<Scalar> col = im2col(xv.data.data(), g);
    const Eigen::Map<const RowMat<Scalar>> wm(wv.data.data(), co, g.patch());
    T out = T::zeros({co, g.od, g.oh, g.ow});
    Eigen::Map<RowMat<Scalar>> om(out.data.data(), co, g.positions());
    om.noalias() = wm * col;
    om.colwise() += bv.data.matrix();

    return x.tape->push(
        OpKind::conv3d, {x.id, w.id, b.id}, std::move(out),
        [ix = x.id, iw = w.id, ib = b.id, g, co, col = std::move(col)](Tape<Scalar>& t, const T& grad) {
            const Eigen::Map<const RowMat<Scalar>> gm(grad.data.data(), co, g.positions());
            const T& wv = t.node(iw).value;
            if (t.node(iw).requires_grad) {
                T gw = T::zeros(wv.shape);
                Eigen::Map<RowMat<Scalar>>(gw.data.data(), co, g.patch()).noalias() = gm * col.transpose();
                t.accumulate(iw, gw);
            }
            if (t.node(ib).requires_grad) {
                t.accumulate(ib, T({co}, gm.rowwise().sum().array()));
            }
            if (t.node(ix).requires_grad) {
                const Eigen::Map<const RowMat<Scalar>> wm(wv.data.data(), co, g.patch());
                const ColMat<Scalar> dcol = wm.transpose() * gm;
                T gx = T::zeros(t.node(ix).value.shape);
                col2im(dcol, g, gx.data.data());
                t.accumulate(ix, gx);
            }
        });
}

template <typename Scalar>
Var<Scalar> relu(Var<Scalar> a) {
    using T = Tensor<Scalar>;
    const T& av = a.value();
    return a.tape->push(OpKind::relu, {a.id}, T(av.shape, av.data.max(Scalar(0))),
                        [ia = a.id](Tape<Scalar>& t, const T& g) {
                            const T& x = t.node(ia).value;
                            t.accumulate(ia, T(x.shape, (x.data > Scalar(0)).select(g.data, Scalar(0))));
                        });
}

template <typename Scalar>
Var<Scalar> softmax_rows(Var<Scalar> a) {
    using T = Tensor<Scalar>;
    const T& av = a.value();
    if (av.rank() != 2) shape_error(OpKind::softmax_rows, av.shape, {});
    T out = av;
    auto m = out.matrix();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        const Scalar top = m.row(r).maxCoeff();
        m.row(r) = (m.row(r).array() - top).exp().matrix();
        m.row(r) /= m.row(r).sum();
    }
    const int self = static_cast<int>(a.tape->size());
    return a.tape->push(OpKind::softmax_rows, {a.id}, std::move(out), [ia = a.id, self](Tape<Scalar>& t, const T& g) {
        // (diag(p) - p p^T) g per row
        const auto p = t.node(self).value.matrix();
        const auto gm = g.matrix();
        T gx = T::zeros(g.shape);
        const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> dot = p.cwiseProduct(gm).rowwise().sum();
        gx.matrix() = p.cwiseProduct(gm - dot.replicate(1, gm.cols()));
        t.accumulate(ia, gx);
    });
}

template <typename Scalar>
Var<Scalar> softplus(Var<Scalar> a) {
    using T = Tensor<Scalar>;
    const T& av = a.value();
    T out(av.shape, av.data.unaryExpr([](Scalar x) { return gridreg::softplus(x); }));
    return a.tape->push(OpKind::softplus, {a.id}, std::move(out), [ia = a.id](Tape<Scalar>& t, const T& g) {
        const T& x = t.node(ia).value;
        const typename T::Array sig = x.data.unaryExpr([](Scalar v) {
            return v >= Scalar(0) ? Scalar(1) / (Scalar(1) + std::exp(-v)) : std::exp(v) / (Scalar(1) + std::exp(v));
        });
        t.accumulate(ia, T(x.shape, g.data * sig));
    });
}

template <typename Scalar>
Var<Scalar> concat_channels(const std::vector<Var<Scalar>>& parts) {
    using T = Tensor<Scalar>;
    if (parts.empty()) throw std::invalid_argument("concat_channels: no inputs");
    const Eigen::Index rows = parts.front().value().rank() == 2 ? parts.front().value().dim(0) : -1;
    Eigen::Index cols = 0;
    std::vector<int> ids;
    std::vector<Eigen::Index> widths;
    for (const auto& p : parts) {
        const T& v = p.value();
        if (v.rank() != 2 || v.dim(0) != rows) shape_error(OpKind::concat_channels, parts.front().shape(), v.shape);
        ids.push_back(p.id);
        widths.push_back(v.dim(1));
        cols += v.dim(1);
    }
    T out = T::zeros({rows, cols});
    Eigen::Index offset = 0;
    for (const auto& p : parts) {
        out.matrix().middleCols(offset, p.value().dim(1)) = p.value().matrix();
        offset += p.value().dim(1);
    }
    return parts.front().tape->push(OpKind::concat_channels, ids, std::move(out),
                                    [ids, widths, rows](Tape<Scalar>& t, const T& g) {
                                        Eigen::Index off = 0;
                                        for (std::size_t i = 0; i < ids.size(); ++i) {
                                            T gi = T::zeros({rows, widths[i]});
                                            gi.matrix() = g.matrix().middleCols(off, widths[i]);
                                            t.accumulate(ids[i], gi);
                                            off += widths[i];
                                        }
                                    });
}

template <typename Scalar>
Var<Scalar> reshape(Var<Scalar> a, Shape shape) {
    using T = Tensor<Scalar>;
    const T& av = a.value();
    if (shape_size(shape) != av.size()) shape_error(OpKind::reshape, av.shape, shape);
    return a.tape->push(OpKind::reshape, {a.id}, T(shape, av.data),
                        [ia = a.id, old = av.shape](Tape<Scalar>& t, const T& g) { t.accumulate(ia, T(old, g.data)); });
}

template <typename Scalar>
Var<Scalar> tokens(Var<Scalar> a) {
    using T = Tensor<Scalar>;
    const T& av = a.value();
    if (av.rank() != 4) shape_error(OpKind::tokens, av.shape, {});
    const Eigen::Index c = av.dim(0);
    const Eigen::Index n = av.dim(1) * av.dim(2) * av.dim(3);
    T out = T::zeros({n, c});
    out.matrix() = Eigen::Map<const RowMat<Scalar>>(av.data.data(), c, n).transpose();
    return a.tape->push(OpKind::tokens, {a.id}, std::move(out),
                        [ia = a.id, c, n, old = av.shape](Tape<Scalar>& t, const T& g) {
                            T gx = T::zeros(old);
                            Eigen::Map<RowMat<Scalar>>(gx.data.data(), c, n) = g.matrix().transpose();
                            t.accumulate(ia, gx);
                        });
}

template <typename Scalar>
Var<Scalar> scale(Var<Scalar> a, Scalar s) {
    using T = Tensor<Scalar>;
    const T& av = a.value();
    return a.tape->push(OpKind::scale, {a.id}, T(av.shape, av.data * s),
                        [ia = a.id, s](Tape<Scalar>& t, const T& g) { t.accumulate(ia, T(g.shape, g.data * s)); });
}

template <typename Scalar>
Var<Scalar> transpose(Var<Scalar> a) {
    using T = Tensor<Scalar>;
    const T& av = a.value();
    if (av.rank() != 2) shape_error(OpKind::transpose, av.shape, {});
    T out = T::zeros({av.dim(1), av.dim(0)});
    out.matrix() = av.matrix().transpose();
    return a.tape->push(OpKind::transpose, {a.id}, std::move(out), [ia = a.id](Tape<Scalar>& t, const T& g) {
        T gx = T::zeros({g.dim(1), g.dim(0)});
        gx.matrix() = g.matrix().transpose();
        t.accumulate(ia, gx);
    });
}

template <typename Scalar>
Var<Scalar> slice_cols(Var<Scalar> a, Eigen::Index begin, Eigen::Index count) {
    using T = Tensor<Scalar>;
    const T& av = a.value();
    if (av.rank() != 2 || begin < 0 || count < 0 || begin + count > av.dim(1)) {
        shape_error(OpKind::slice_cols, av.shape, {begin, count});
    }
    T out = T::zeros({av.dim(0), count});
    out.matrix() = av.matrix().middleCols(begin, count);
    return a.tape->push(OpKind::slice_cols, {a.id}, std::move(out),
                        [ia = a.id, begin, count, old = av.shape](Tape<Scalar>& t, const T& g) {
                            T gx = T::zeros(old);
                            gx.matrix().middleCols(begin, count) = g.matrix();
                            t.accumulate(ia, gx);
                        });
}

template <typename Scalar>
Var<Scalar> sum(Var<Scalar> a) {
    using T = Tensor<Scalar>;
    const T& av = a.value();
    return a.tape->push(OpKind::sum, {a.id}, T::scalar(av.data.sum()),
                        [ia = a.id, old = av.shape](Tape<Scalar>& t, const T& g) {
                            t.accumulate(ia, T::constant(old, g.data(0)));
                        });
}

template <typename Scalar>
Var<Scalar> custom(const std::vector<Var<Scalar>>& inputs, Tensor<Scalar> value, Vjp<Scalar> vjp, std::string name) {
    using T = Tensor<Scalar>;
    if (inputs.empty()) throw std::invalid_argument("custom op '" + name + "' needs at least one input");
    std::vector<int> ids;
    for (const auto& v : inputs) ids.push_back(v.id);
    Tape<Scalar>* tape = inputs.front().tape;
    auto out = tape->push(OpKind::custom, ids, std::move(value), [ids, vjp, name](Tape<Scalar>& t, const T& g) {
        const auto grads = vjp(g);
        if (grads.size() != ids.size()) {
            throw std::logic_error("custom op '" + name + "' returned " + std::to_string(grads.size()) +
                                   " adjoints for " + std::to_string(ids.size()) + " inputs");
        }
        for (std::size_t i = 0; i < ids.size(); ++i) {
            t.accumulate(ids[i], grads[i]);
        }
    });
    return out;
}

std::string GradcheckReport::worst() const {
    const auto it = std::max_element(entries.begin(), entries.end(), [](const auto& a, const auto& b) {
        return a.max_rel_error < b.max_rel_error;
    });
    return it == entries.end() ? std::string() : it->name;
}

GradcheckReport gradcheck(const GraphBuilder& build, const std::vector<Parameter<double>>& params, double tolerance,
                          double step) {
    auto evaluate = [&](const std::vector<Parameter<double>>& ps, std::vector<Tensor<double>>* grads) {
        Tape<double> tape;
        std::vector<Var<double>> leaves;
        for (const auto& p : ps) {
            leaves.push_back(tape.leaf(p.value, p.name));
        }
        const Var<double> loss = build(tape, leaves);
        if (grads) {
            tape.backward(loss);
            for (const auto& l : leaves) {
                grads->push_back(tape.grad(l));
            }
        }
        return loss.value().data(0);
    };

    std::vector<Tensor<double>> analytic;
    evaluate(params, &analytic);
    GradcheckReport report;
    report.tolerance = tolerance;
    std::vector<Parameter<double>> work = params;
    for (std::size_t p = 0; p < params.size(); ++p) {
        GradcheckEntry e;
        e.name = params[p].name;
        const Eigen::Index n = params[p].value.size();
        Eigen::ArrayXd numeric(n);
        for (Eigen::Index i = 0; i < n; ++i) {
            const double x0 = work[p].value.data(i);
            work[p].value.data(i) = x0 + step;
            const double up = evaluate(work, nullptr);
            work[p].value.data(i) = x0 - step;
            const double down = evaluate(work, nullptr);
            work[p].value.data(i) = x0;
            numeric(i) = (up - down) / (2.0 * step);
        }
        const Eigen::ArrayXd diff = (analytic[p].data - numeric).abs();
        const double scale = std::max({analytic[p].data.abs().maxCoeff(), numeric.abs().maxCoeff(), 1e-300});
        if (n > 0) {
            e.max_rel_error = diff.maxCoeff(&e.worst_index) / scale;
        }
        e.passed = e.max_rel_error <= tolerance;
        report.passed = report.passed && e.passed;
        report.entries.push_back(e);
    }
    return report;
}

#define GRIDREG_AD_INSTANTIATE(S)                                                                                 \
    template struct Tensor<S>;                                                                                    \
    template struct Var<S>;                                                                                       \
    template class Tape<S>;                                                                                       \
    template Var<S> add(Var<S>, Var<S>);                                                                          \
    template Var<S> mul(Var<S>, Var<S>);                                                                          \
    template Var<S> matmul(Var<S>, Var<S>);                                                                       \
    template Var<S> conv3d(Var<S>, Var<S>, Var<S>, const ConvSpec&);                                              \
    template Var<S> relu(Var<S>);                                                                                 \
    template Var<S> softmax_rows(Var<S>);                                                                         \
    template Var<S> softplus(Var<S>);                                                                             \
    template Var<S> concat_channels(const std::vector<Var<S>>&);                                                  \
    template Var<S> reshape(Var<S>, Shape);                                                                       \
    template Var<S> tokens(Var<S>);                                                                               \
    template Var<S> scale(Var<S>, S);                                                                             \
    template Var<S> transpose(Var<S>);                                                                            \
    template Var<S> slice_cols(Var<S>, Eigen::Index, Eigen::Index);                                               \
    template Var<S> sum(Var<S>);                                                                                  \
    template Var<S> custom(const std::vector<Var<S>>&, Tensor<S>, Vjp<S>, std::string);

GRIDREG_AD_INSTANTIATE(float)
GRIDREG_AD_INSTANTIATE(double)

} // namespace gridreg::ad
