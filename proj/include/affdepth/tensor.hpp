#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "affdepth/errors.hpp"

namespace affdepth {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) { return fmt::format("{}", fmt::join(shape, "x")); }

template <class T>
class Graph;

/// Dense row-major array with an optional link into an autodiff graph.
///
/// The buffer is shared and immutable, so copies are cheap and a tensor
/// never changes after construction. Image tensors are C x H x W.
template <class T>
class BasicTensor {
public:
    using value_type = T;

    BasicTensor() : BasicTensor(Shape{1}, std::vector<T>{T(0)}) {}

    BasicTensor(Shape shape, std::vector<T> values)
        : shape_(std::move(shape)), data_(std::make_shared<const std::vector<T>>(std::move(values))) {
        if (shape_.empty()) throw ShapeError("tensor shape must have at least one dimension");
        for (auto d : shape_)
            if (d == 0) throw ShapeError(fmt::format("tensor dimension of size 0 in shape {}", shape_string(shape_)));
        if (shape_size(shape_) != data_->size())
            throw ShapeError(fmt::format("shape {} holds {} elements but {} values were given", shape_string(shape_),
                                         shape_size(shape_), data_->size()));
    }

    static BasicTensor full(Shape shape, T value) {
        const auto n = shape_size(shape);
        return BasicTensor(std::move(shape), std::vector<T>(n, value));
    }
    static BasicTensor zeros(Shape shape) { return full(std::move(shape), T(0)); }
    static BasicTensor scalar(T value) { return BasicTensor(Shape{1}, std::vector<T>{value}); }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t size() const noexcept { return data_->size(); }

    std::span<const T> values() const noexcept { return {data_->data(), data_->size()}; }
    const std::vector<T>& vector() const noexcept { return *data_; }
    T operator[](std::size_t i) const { return (*data_)[i]; }

    T item() const {
        if (size() != 1) throw ShapeError(fmt::format("item() on a tensor of shape {}", shape_string(shape_)));
        return (*data_)[0];
    }

    bool on_graph() const noexcept { return graph_ != nullptr; }
    Graph<T>* graph() const noexcept { return graph_; }
    std::size_t node() const noexcept { return node_; }

    /// Same values, no graph link.
    BasicTensor detached() const {
        BasicTensor t = *this;
        t.graph_ = nullptr;
        t.node_ = 0;
        return t;
    }

    /// Element-wise equality of shape and values (NaNs compare unequal).
    friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
        return a.shape_ == b.shape_ && *a.data_ == *b.data_;
    }

private:
    friend class Graph<T>;

    Shape shape_;
    std::shared_ptr<const std::vector<T>> data_;
    Graph<T>* graph_ = nullptr;
    std::size_t node_ = 0;
};

using Tensor = BasicTensor<double>;
using TensorF = BasicTensor<float>;

template <class U, class T>
BasicTensor<U> tensor_cast(const BasicTensor<T>& t) {
    std::vector<U> out(t.values().begin(), t.values().end());
    return BasicTensor<U>(t.shape(), std::move(out));
}

enum class OpKind {
    leaf,
    concat_channels,
    conv2d_1x1,
    conv2d_3x3_pad1,
    silu,
    relu,
    upsample_bilinear_x2,
    downsample_avg_x2,
    softmax_channels,
    add,
    mul_scalar,
    mean_all,
    block_mean_pool,
    slice_channels,
    reshape,
    custom,
};

/// Writable gradient buffers of one node's inputs; an empty span marks an
/// input that is not on the graph (a constant).
template <class T>
using InputGrads = std::span<const std::span<T>>;

template <class T>
class Gradients;

/// Append-only tape of operation records.
///
/// Each record keeps its input node indices (always smaller than its own
/// index) and a closure that maps the output gradient onto the inputs.
/// A graph is used from one thread; tensors point into it, so it is neither
/// copyable nor movable.
template <class T>
class Graph {
public:
    using Tensor = BasicTensor<T>;
    using BackwardFn = std::function<void(std::span<const T> grad_out, InputGrads<T> grad_in)>;

    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    /// Registers `value` as a differentiable leaf.
    Tensor parameter(const Tensor& value) {
        if (value.on_graph()) throw GraphError("parameter(): tensor is already on a graph");
        Tensor t = value;
        t.graph_ = this;
        t.node_ = nodes_.size();
        nodes_.push_back(Node{OpKind::leaf, value.shape(), {}, {}});
        return t;
    }

    /// Records the result of an operation. Inputs that are off-graph are
    /// constants; at least one input must be on this graph.
    Tensor record(OpKind kind, Shape shape, std::vector<T> values, std::span<const Tensor* const> inputs,
                  BackwardFn backward) {
        std::vector<std::optional<std::size_t>> parents;
        parents.reserve(inputs.size());
        for (const Tensor* in : inputs) {
            if (in->on_graph()) {
                if (in->graph() != this) throw GraphError("operation mixes tensors from different graphs");
                parents.emplace_back(in->node());
            } else {
                parents.emplace_back(std::nullopt);
            }
        }
        Tensor t(std::move(shape), std::move(values));
        t.graph_ = this;
        t.node_ = nodes_.size();
        nodes_.push_back(Node{kind, t.shape(), std::move(parents), std::move(backward)});
        return t;
    }

    std::size_t size() const noexcept { return nodes_.size(); }
    OpKind kind(std::size_t node) const { return nodes_.at(node).kind; }
    const std::vector<std::optional<std::size_t>>& parents(std::size_t node) const { return nodes_.at(node).inputs; }

    Gradients<T> backward(const Tensor& loss) const;

private:
    struct Node {
        OpKind kind;
        Shape shape;
        std::vector<std::optional<std::size_t>> inputs;
        BackwardFn backward;
    };

    std::vector<Node> nodes_;

    friend class Gradients<T>;
};

/// Result of a backward pass: d(loss)/d(node) for every node that the loss
/// depends on.
template <class T>
class Gradients {
public:
    /// Gradient with respect to `t`, zeros if the loss does not reach it.
    BasicTensor<T> of(const BasicTensor<T>& t) const {
        if (t.graph() != graph_) throw GraphError("gradient requested for a tensor of another graph");
        return at(t.node());
    }

    BasicTensor<T> at(std::size_t node) const {
        const auto& g = grads_.at(node);
        if (g.empty()) return BasicTensor<T>::zeros(graph_->nodes_.at(node).shape);
        return BasicTensor<T>(graph_->nodes_.at(node).shape, g);
    }

    bool reached(std::size_t node) const { return !grads_.at(node).empty(); }

    /// All reached nodes, keyed by node index.
    std::map<std::size_t, BasicTensor<T>> by_node() const {
        std::map<std::size_t, BasicTensor<T>> out;
        for (std::size_t i = 0; i < grads_.size(); ++i)
            if (!grads_[i].empty()) out.emplace(i, at(i));
        return out;
    }

private:
    friend class Graph<T>;
    Gradients(const Graph<T>* graph, std::vector<std::vector<T>> grads) : graph_(graph), grads_(std::move(grads)) {}

    const Graph<T>* graph_;
    std::vector<std::vector<T>> grads_;
};

template <class T>
Gradients<T> Graph<T>::backward(const Tensor& loss) const {
    if (loss.graph() != this) throw GraphError("backward(): loss is not on this graph");
    if (loss.size() != 1)
        throw GraphError(fmt::format("backward(): loss must be a scalar, got shape {}", shape_string(loss.shape())));

    std::vector<std::vector<T>> grads(loss.node() + 1);
    grads[loss.node()].assign(1, T(1));
    std::vector<std::span<T>> slots;
    for (std::size_t n = loss.node() + 1; n-- > 0;) {
        if (grads[n].empty()) continue;
        const Node& node = nodes_[n];
        if (node.kind == OpKind::leaf) continue;
        slots.clear();
        for (const auto& p : node.inputs) {
            if (!p) {
                slots.emplace_back();
                continue;
            }
            auto& buf = grads[*p];
            if (buf.empty()) buf.assign(shape_size(nodes_[*p].shape), T(0));
            slots.emplace_back(buf);
        }
        node.backward(grads[n], slots);
    }
    grads.resize(nodes_.size());
    return Gradients<T>(this, std::move(grads));
}

/// Reverse-mode gradient of a scalar loss.
template <class T>
Gradients<T> backward(const BasicTensor<T>& loss) {
    if (!loss.on_graph()) throw GraphError("backward(): tensor is not on a graph");
    return loss.graph()->backward(loss);
}

namespace detail {

/// Builds the op output: on a graph when any input is, otherwise a plain tensor.
template <class T>
BasicTensor<T> make_output(OpKind kind, Shape shape, std::vector<T> values,
                           std::initializer_list<const BasicTensor<T>*> inputs,
                           typename Graph<T>::BackwardFn backward) {
    Graph<T>* graph = nullptr;
    for (const auto* in : inputs)
        if (in && in->on_graph()) {
            graph = in->graph();
            break;
        }
    if (!graph) return BasicTensor<T>(std::move(shape), std::move(values));
    std::vector<const BasicTensor<T>*> ins;
    for (const auto* in : inputs)
        if (in) ins.push_back(in);
    return graph->record(kind, std::move(shape), std::move(values), ins, std::move(backward));
}

template <class T>
BasicTensor<T> make_output(OpKind kind, Shape shape, std::vector<T> values,
                           const std::vector<const BasicTensor<T>*>& inputs, typename Graph<T>::BackwardFn backward) {
    Graph<T>* graph = nullptr;
    for (const auto* in : inputs)
        if (in->on_graph()) {
            graph = in->graph();
            break;
        }
    if (!graph) return BasicTensor<T>(std::move(shape), std::move(values));
    return graph->record(kind, std::move(shape), std::move(values), inputs, std::move(backward));
}

template <class T>
void require_image(const BasicTensor<T>& x, const char* op) {
    if (x.rank() != 3)
        throw ShapeError(fmt::format("{}: expected a CxHxW tensor, got shape {}", op, shape_string(x.shape())));
}

template <class T>
void require_same_shape(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(
            fmt::format("{}: shape mismatch {} vs {}", op, shape_string(a.shape()), shape_string(b.shape())));
}

/// Source indices and weights of half-pixel-centred x2 bilinear upsampling
/// along one axis of length n (edges clamp).
struct UpsampleTaps {
    std::vector<std::size_t> i0, i1;
    std::vector<double> w0, w1;
};

inline UpsampleTaps upsample_taps(std::size_t n) {
    UpsampleTaps t;
    const std::size_t m = 2 * n;
    t.i0.resize(m);
    t.i1.resize(m);
    t.w0.resize(m);
    t.w1.resize(m);
    for (std::size_t o = 0; o < m; ++o) {
        const double src = (static_cast<double>(o) + 0.5) / 2.0 - 0.5;
        const double fl = std::floor(src);
        const double frac = src - fl;
        const auto lo = static_cast<long long>(fl);
        const auto clamp = [&](long long i) {
            return static_cast<std::size_t>(std::clamp<long long>(i, 0, static_cast<long long>(n) - 1));
        };
        t.i0[o] = clamp(lo);
        t.i1[o] = clamp(lo + 1);
        t.w0[o] = 1.0 - frac;
        t.w1[o] = frac;
    }
    return t;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Primitive operations. Every op accepts on- and off-graph inputs.
// ---------------------------------------------------------------------------

/// Concatenates C_i x H x W tensors along the channel axis.
template <class T>
BasicTensor<T> concat_channels(const std::vector<BasicTensor<T>>& xs) {
    if (xs.empty()) throw ShapeError("concat_channels: no inputs");
    std::size_t channels = 0;
    for (const auto& x : xs) {
        detail::require_image(x, "concat_channels");
        if (x.dim(1) != xs[0].dim(1) || x.dim(2) != xs[0].dim(2))
            throw ShapeError(fmt::format("concat_channels: spatial size {}x{} does not match {}x{}", x.dim(1), x.dim(2),
                                         xs[0].dim(1), xs[0].dim(2)));
        channels += x.dim(0);
    }
    std::vector<T> out;
    out.reserve(channels * xs[0].dim(1) * xs[0].dim(2));
    std::vector<std::size_t> sizes;
    std::vector<const BasicTensor<T>*> ins;
    for (const auto& x : xs) {
        out.insert(out.end(), x.values().begin(), x.values().end());
        sizes.push_back(x.size());
        ins.push_back(&x);
    }
    return detail::make_output<T>(OpKind::concat_channels, Shape{channels, xs[0].dim(1), xs[0].dim(2)},
                                  std::move(out), ins, [sizes](std::span<const T> g, InputGrads<T> gi) {
                                      std::size_t off = 0;
                                      for (std::size_t k = 0; k < sizes.size(); ++k) {
                                          if (!gi[k].empty())
                                              for (std::size_t i = 0; i < sizes[k]; ++i) gi[k][i] += g[off + i];
                                          off += sizes[k];
                                      }
                                  });
}

/// Channels [begin, begin + count) of a C x H x W tensor.
template <class T>
BasicTensor<T> slice_channels(const BasicTensor<T>& x, std::size_t begin, std::size_t count) {
    detail::require_image(x, "slice_channels");
    if (count == 0 || begin + count > x.dim(0))
        throw ShapeError(fmt::format("slice_channels: range [{}, {}) outside {} channels", begin, begin + count, x.dim(0)));
    const std::size_t plane = x.dim(1) * x.dim(2);
    std::vector<T> out(x.values().begin() + begin * plane, x.values().begin() + (begin + count) * plane);
    return detail::make_output<T>(OpKind::slice_channels, Shape{count, x.dim(1), x.dim(2)}, std::move(out), {&x},
                                  [off = begin * plane](std::span<const T> g, InputGrads<T> gi) {
                                      for (std::size_t i = 0; i < g.size(); ++i) gi[0][off + i] += g[i];
                                  });
}

/// Same values under a new shape with equal element count.
template <class T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape) {
    if (shape_size(shape) != x.size())
        throw ShapeError(
            fmt::format("reshape: cannot view {} as {}", shape_string(x.shape()), shape_string(shape)));
    return detail::make_output<T>(OpKind::reshape, std::move(shape), x.vector(), {&x},
                                  [](std::span<const T> g, InputGrads<T> gi) {
                                      for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i];
                                  });
}

namespace detail {

// Zero-padded "same" convolution with a k x k kernel (k odd).
template <class T>
BasicTensor<T> conv2d_same(const BasicTensor<T>& x, const BasicTensor<T>& weight,
                           const std::optional<BasicTensor<T>>& bias, std::size_t k, OpKind kind, const char* name) {
    require_image(x, name);
    const std::size_t cin = x.dim(0), H = x.dim(1), W = x.dim(2);
    if (weight.rank() != 4 || weight.dim(1) != cin || weight.dim(2) != k || weight.dim(3) != k)
        throw ShapeError(fmt::format("{}: weight shape {} incompatible with input channels {} (expected Cout x {} x {} x {})",
                                     name, shape_string(weight.shape()), cin, cin, k, k));
    const std::size_t cout = weight.dim(0);
    if (bias && (bias->rank() != 1 || bias->dim(0) != cout))
        throw ShapeError(fmt::format("{}: bias shape {} does not match {} output channels", name,
                                     shape_string(bias->shape()), cout));
    const long pad = static_cast<long>(k / 2);
    const std::size_t plane = H * W;
    const T* in = x.values().data();
    const T* w = weight.values().data();

    // Valid output range for a kernel offset d along an axis of length n.
    auto range = [](long d, std::size_t n) {
        const long lo = std::max<long>(0, -d);
        const long hi = std::min<long>(static_cast<long>(n), static_cast<long>(n) - d);
        return std::pair<long, long>{lo, hi};
    };

    std::vector<T> out(cout * plane, T(0));
    for (std::size_t co = 0; co < cout; ++co) {
        T* o = out.data() + co * plane;
        if (bias) std::fill(o, o + plane, (*bias)[co]);
        for (std::size_t ci = 0; ci < cin; ++ci) {
            const T* src = in + ci * plane;
            for (std::size_t ky = 0; ky < k; ++ky) {
                const long dy = static_cast<long>(ky) - pad;
                const auto [y0, y1] = range(dy, H);
                for (std::size_t kx = 0; kx < k; ++kx) {
                    const long dx = static_cast<long>(kx) - pad;
                    const auto [x0, x1] = range(dx, W);
                    const T wv = w[((co * cin + ci) * k + ky) * k + kx];
                    for (long yy = y0; yy < y1; ++yy) {
                        T* orow = o + yy * static_cast<long>(W);
                        const T* srow = src + (yy + dy) * static_cast<long>(W) + dx;
                        for (long xx = x0; xx < x1; ++xx) orow[xx] += wv * srow[xx];
                    }
                }
            }
        }
    }

    const BasicTensor<T>* bias_ptr = bias ? &*bias : nullptr;
    return make_output<T>(
        kind, Shape{cout, H, W}, std::move(out), {&x, &weight, bias_ptr},
        [xv = x, wv_t = weight, cin, cout, H, W, k, pad, plane, range](std::span<const T> g, InputGrads<T> gi) {
            const T* in = xv.values().data();
            const T* w = wv_t.values().data();
            std::span<T> gx = gi[0];
            std::span<T> gw = gi[1];
            std::span<T> gb = gi.size() > 2 ? gi[2] : std::span<T>{};
            for (std::size_t co = 0; co < cout; ++co) {
                const T* go = g.data() + co * plane;
                if (!gb.empty()) {
                    T s = 0;
                    for (std::size_t p = 0; p < plane; ++p) s += go[p];
                    gb[co] += s;
                }
                for (std::size_t ci = 0; ci < cin; ++ci) {
                    const T* src = in + ci * plane;
                    for (std::size_t ky = 0; ky < k; ++ky) {
                        const long dy = static_cast<long>(ky) - pad;
                        const auto [y0, y1] = range(dy, H);
                        for (std::size_t kx = 0; kx < k; ++kx) {
                            const long dx = static_cast<long>(kx) - pad;
                            const auto [x0, x1] = range(dx, W);
                            const std::size_t widx = ((co * cin + ci) * k + ky) * k + kx;
                            const T wv = w[widx];
                            T acc = 0;
                            for (long yy = y0; yy < y1; ++yy) {
                                const T* grow = go + yy * static_cast<long>(W);
                                const long soff = (yy + dy) * static_cast<long>(W) + dx;
                                const T* srow = src + soff;
                                if (!gx.empty()) {
                                    T* gxrow = gx.data() + ci * plane + soff;
                                    for (long xx = x0; xx < x1; ++xx) {
                                        acc += grow[xx] * srow[xx];
                                        gxrow[xx] += wv * grow[xx];
                                    }
                                } else {
                                    for (long xx = x0; xx < x1; ++xx) acc += grow[xx] * srow[xx];
                                }
                            }
                            if (!gw.empty()) gw[widx] += acc;
                        }
                    }
                }
            }
        });
}

}  // namespace detail

/// Pointwise convolution; weight is Cout x Cin x 1 x 1, optional bias Cout.
template <class T>
BasicTensor<T> conv2d_1x1(const BasicTensor<T>& x, const BasicTensor<T>& weight,
                          const std::optional<BasicTensor<T>>& bias = std::nullopt) {
    return detail::conv2d_same(x, weight, bias, 1, OpKind::conv2d_1x1, "conv2d_1x1");
}

/// 3x3 convolution with zero padding 1 (spatial size preserved).
template <class T>
BasicTensor<T> conv2d_3x3(const BasicTensor<T>& x, const BasicTensor<T>& weight,
                          const std::optional<BasicTensor<T>>& bias = std::nullopt) {
    return detail::conv2d_same(x, weight, bias, 3, OpKind::conv2d_3x3_pad1, "conv2d_3x3_pad1");
}

template <class T>
BasicTensor<T> silu(const BasicTensor<T>& x) {
    std::vector<T> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] / (T(1) + std::exp(-x[i]));
    return detail::make_output<T>(OpKind::silu, x.shape(), std::move(out), {&x},
                                  [xv = x](std::span<const T> g, InputGrads<T> gi) {
                                      for (std::size_t i = 0; i < g.size(); ++i) {
                                          const T s = T(1) / (T(1) + std::exp(-xv[i]));
                                          gi[0][i] += g[i] * s * (T(1) + xv[i] * (T(1) - s));
                                      }
                                  });
}

template <class T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
    std::vector<T> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
    return detail::make_output<T>(OpKind::relu, x.shape(), std::move(out), {&x},
                                  [xv = x](std::span<const T> g, InputGrads<T> gi) {
                                      for (std::size_t i = 0; i < g.size(); ++i)
                                          if (xv[i] > T(0)) gi[0][i] += g[i];
                                  });
}

/// Bilinear x2 upsampling with half-pixel centres and clamped edges.
template <class T>
BasicTensor<T> upsample_bilinear_x2(const BasicTensor<T>& x) {
    detail::require_image(x, "upsample_bilinear_x2");
    const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
    const auto ty = detail::upsample_taps(H);
    const auto tx = detail::upsample_taps(W);
    const std::size_t H2 = 2 * H, W2 = 2 * W;
    std::vector<T> out(C * H2 * W2);
    for (std::size_t c = 0; c < C; ++c) {
        const T* src = x.values().data() + c * H * W;
        T* dst = out.data() + c * H2 * W2;
        for (std::size_t y = 0; y < H2; ++y) {
            const T* r0 = src + ty.i0[y] * W;
            const T* r1 = src + ty.i1[y] * W;
            const T wy0 = static_cast<T>(ty.w0[y]), wy1 = static_cast<T>(ty.w1[y]);
            for (std::size_t xx = 0; xx < W2; ++xx) {
                const T wx0 = static_cast<T>(tx.w0[xx]), wx1 = static_cast<T>(tx.w1[xx]);
                dst[y * W2 + xx] = wy0 * (wx0 * r0[tx.i0[xx]] + wx1 * r0[tx.i1[xx]]) +
                                   wy1 * (wx0 * r1[tx.i0[xx]] + wx1 * r1[tx.i1[xx]]);
            }
        }
    }
    return detail::make_output<T>(OpKind::upsample_bilinear_x2, Shape{C, H2, W2}, std::move(out), {&x},
                                  [ty, tx, C, H, W](std::span<const T> g, InputGrads<T> gi) {
                                      const std::size_t H2 = 2 * H, W2 = 2 * W;
                                      for (std::size_t c = 0; c < C; ++c) {
                                          T* dst = gi[0].data() + c * H * W;
                                          const T* go = g.data() + c * H2 * W2;
                                          for (std::size_t y = 0; y < H2; ++y) {
                                              T* r0 = dst + ty.i0[y] * W;
                                              T* r1 = dst + ty.i1[y] * W;
                                              const T wy0 = static_cast<T>(ty.w0[y]), wy1 = static_cast<T>(ty.w1[y]);
                                              for (std::size_t xx = 0; xx < W2; ++xx) {
                                                  const T v = go[y * W2 + xx];
                                                  const T wx0 = static_cast<T>(tx.w0[xx]);
                                                  const T wx1 = static_cast<T>(tx.w1[xx]);
                                                  r0[tx.i0[xx]] += wy0 * wx0 * v;
                                                  r0[tx.i1[xx]] += wy0 * wx1 * v;
                                                  r1[tx.i0[xx]] += wy1 * wx0 * v;
                                                  r1[tx.i1[xx]] += wy1 * wx1 * v;
                                              }
                                          }
                                      }
                                  });
}

/// Mean over (H / grid_h) x (W / grid_w) blocks; output is C x grid_h x grid_w.
template <class T>
BasicTensor<T> block_mean_pool(const BasicTensor<T>& x, std::size_t grid_h, std::size_t grid_w) {
    detail::require_image(x, "block_mean_pool");
    const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
    if (grid_h == 0 || H % grid_h != 0)
        throw ShapeError(fmt::format("block_mean_pool: grid height {} does not divide H={}", grid_h, H));
    if (grid_w == 0 || W % grid_w != 0)
        throw ShapeError(fmt::format("block_mean_pool: grid width {} does not divide W={}", grid_w, W));
    const std::size_t bh = H / grid_h, bw = W / grid_w;
    const T inv = T(1) / static_cast<T>(bh * bw);
    std::vector<T> out(C * grid_h * grid_w, T(0));
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t xx = 0; xx < W; ++xx)
                out[(c * grid_h + y / bh) * grid_w + xx / bw] += x[(c * H + y) * W + xx];
    for (auto& v : out) v *= inv;
    return detail::make_output<T>(OpKind::block_mean_pool, Shape{C, grid_h, grid_w}, std::move(out), {&x},
                                  [C, H, W, bh, bw, grid_h, grid_w, inv](std::span<const T> g, InputGrads<T> gi) {
                                      for (std::size_t c = 0; c < C; ++c)
                                          for (std::size_t y = 0; y < H; ++y)
                                              for (std::size_t xx = 0; xx < W; ++xx)
                                                  gi[0][(c * H + y) * W + xx] +=
                                                      inv * g[(c * grid_h + y / bh) * grid_w + xx / bw];
                                  });
}

/// 2x2 average pooling (H and W must be even).
template <class T>
BasicTensor<T> downsample_avg_x2(const BasicTensor<T>& x) {
    detail::require_image(x, "downsample_avg_x2");
    if (x.dim(1) % 2 != 0 || x.dim(2) % 2 != 0)
        throw ShapeError(fmt::format("downsample_avg_x2: spatial size {}x{} is not even", x.dim(1), x.dim(2)));
    auto pooled = block_mean_pool(x.detached(), x.dim(1) / 2, x.dim(2) / 2);
    const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
    return detail::make_output<T>(OpKind::downsample_avg_x2, pooled.shape(), pooled.vector(), {&x},
                                  [C, H, W](std::span<const T> g, InputGrads<T> gi) {
                                      const std::size_t W2 = W / 2, H2 = H / 2;
                                      for (std::size_t c = 0; c < C; ++c)
                                          for (std::size_t y = 0; y < H; ++y)
                                              for (std::size_t xx = 0; xx < W; ++xx)
                                                  gi[0][(c * H + y) * W + xx] +=
                                                      T(0.25) * g[(c * H2 + y / 2) * W2 + xx / 2];
                                  });
}

/// Softmax across channels at every pixel.
template <class T>
BasicTensor<T> softmax_channels(const BasicTensor<T>& x) {
    detail::require_image(x, "softmax_channels");
    const std::size_t C = x.dim(0), P = x.dim(1) * x.dim(2);
    std::vector<T> out(x.size());
    for (std::size_t p = 0; p < P; ++p) {
        T mx = x[p];
        for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, x[c * P + p]);
        T sum = 0;
        for (std::size_t c = 0; c < C; ++c) {
            out[c * P + p] = std::exp(x[c * P + p] - mx);
            sum += out[c * P + p];
        }
        for (std::size_t c = 0; c < C; ++c) out[c * P + p] /= sum;
    }
    auto y = std::make_shared<const std::vector<T>>(out);
    return detail::make_output<T>(OpKind::softmax_channels, x.shape(), std::move(out), {&x},
                                  [y, C, P](std::span<const T> g, InputGrads<T> gi) {
                                      const auto& yv = *y;
                                      for (std::size_t p = 0; p < P; ++p) {
                                          T dot = 0;
                                          for (std::size_t c = 0; c < C; ++c) dot += g[c * P + p] * yv[c * P + p];
                                          for (std::size_t c = 0; c < C; ++c)
                                              gi[0][c * P + p] += yv[c * P + p] * (g[c * P + p] - dot);
                                      }
                                  });
}

template <class T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    detail::require_same_shape(a, b, "add");
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
    return detail::make_output<T>(OpKind::add, a.shape(), std::move(out), {&a, &b},
                                  [](std::span<const T> g, InputGrads<T> gi) {
                                      for (auto s : gi)
                                          if (!s.empty())
                                              for (std::size_t i = 0; i < g.size(); ++i) s[i] += g[i];
                                  });
}

template <class T>
BasicTensor<T> mul_scalar(const BasicTensor<T>& x, T factor) {
    std::vector<T> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * factor;
    return detail::make_output<T>(OpKind::mul_scalar, x.shape(), std::move(out), {&x},
                                  [factor](std::span<const T> g, InputGrads<T> gi) {
                                      for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += factor * g[i];
                                  });
}

/// Mean of all elements as a 1-element tensor.
template <class T>
BasicTensor<T> mean_all(const BasicTensor<T>& x) {
    T sum = 0;
    for (auto v : x.values()) sum += v;
    const T inv = T(1) / static_cast<T>(x.size());
    return detail::make_output<T>(OpKind::mean_all, Shape{1}, std::vector<T>{sum * inv}, {&x},
                                  [inv](std::span<const T> g, InputGrads<T> gi) {
                                      for (auto& v : gi[0]) v += inv * g[0];
                                  });
}

// ---------------------------------------------------------------------------
// Uniform dispatch over the primitive set.
// ---------------------------------------------------------------------------

enum class Primitive {
    concat_channels,
    conv2d_1x1,
    conv2d_3x3_pad1,
    silu,
    relu,
    upsample_bilinear_x2,
    downsample_avg_x2,
    softmax_channels,
    add,
    mul_scalar,
    mean_all,
    block_mean_pool,
};

inline constexpr Primitive all_primitives[] = {
    Primitive::concat_channels,      Primitive::conv2d_1x1,        Primitive::conv2d_3x3_pad1,
    Primitive::silu,                 Primitive::relu,              Primitive::upsample_bilinear_x2,
    Primitive::downsample_avg_x2,    Primitive::softmax_channels,  Primitive::add,
    Primitive::mul_scalar,           Primitive::mean_all,          Primitive::block_mean_pool,
};

inline const char* to_string(Primitive p) {
    switch (p) {
        case Primitive::concat_channels: return "concat_channels";
        case Primitive::conv2d_1x1: return "conv2d_1x1";
        case Primitive::conv2d_3x3_pad1: return "conv2d_3x3_pad1";
        case Primitive::silu: return "silu";
        case Primitive::relu: return "relu";
        case Primitive::upsample_bilinear_x2: return "upsample_bilinear_x2";
        case Primitive::downsample_avg_x2: return "downsample_avg_x2";
        case Primitive::softmax_channels: return "softmax_channels";
        case Primitive::add: return "add";
        case Primitive::mul_scalar: return "mul_scalar";
        case Primitive::mean_all: return "mean_all";
        case Primitive::block_mean_pool: return "block_mean_pool";
    }
    return "?";
}

/// Extra arguments of the parametrised primitives.
template <class T>
struct PrimitiveArgs {
    T factor = T(1);                       // mul_scalar
    std::size_t grid_h = 1, grid_w = 1;    // block_mean_pool
    std::optional<BasicTensor<T>> bias;    // convolutions
};

template <class T>
BasicTensor<T> primitive_forward(Primitive kind, const std::vector<BasicTensor<T>>& inputs,
                                 const std::optional<BasicTensor<T>>& params = std::nullopt,
                                 const PrimitiveArgs<T>& args = {}) {
    auto need = [&](std::size_t n) {
        if (inputs.size() != n)
            throw ShapeError(fmt::format("{}: expected {} input(s), got {}", to_string(kind), n, inputs.size()));
    };
    auto weight = [&]() -> const BasicTensor<T>& {
        if (!params) throw ShapeError(fmt::format("{}: missing weight parameter", to_string(kind)));
        return *params;
    };
    switch (kind) {
        case Primitive::concat_channels: return concat_channels(inputs);
        case Primitive::conv2d_1x1: need(1); return conv2d_1x1(inputs[0], weight(), args.bias);
        case Primitive::conv2d_3x3_pad1: need(1); return conv2d_3x3(inputs[0], weight(), args.bias);
        case Primitive::silu: need(1); return silu(inputs[0]);
        case Primitive::relu: need(1); return relu(inputs[0]);
        case Primitive::upsample_bilinear_x2: need(1); return upsample_bilinear_x2(inputs[0]);
        case Primitive::downsample_avg_x2: need(1); return downsample_avg_x2(inputs[0]);
        case Primitive::softmax_channels: need(1); return softmax_channels(inputs[0]);
        case Primitive::add: need(2); return add(inputs[0], inputs[1]);
        case Primitive::mul_scalar: need(1); return mul_scalar(inputs[0], args.factor);
        case Primitive::mean_all: need(1); return mean_all(inputs[0]);
        case Primitive::block_mean_pool: need(1); return block_mean_pool(inputs[0], args.grid_h, args.grid_w);
    }
    throw ShapeError("primitive_forward: unknown primitive");
}

}  // namespace affdepth
