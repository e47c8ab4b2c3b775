#pragma once

// Reverse-mode differentiation over Tensor4 values. Every op records a node
// holding its output, its inputs and a closure that pushes the output
// gradient back into the inputs; backward() walks the nodes in reverse
// topological order.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <unordered_set>
#include <utility>
#include <vector>

#include "emcad/ops.hpp"

namespace emcad {

template <class T>
struct Node {
    Tensor4<T> value;
    Tensor4<T> grad; // empty until a gradient arrives
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward;

    void accumulate(const Tensor4<T>& g) {
        if (grad.empty())
            grad = g;
        else
            grad += g;
    }
    void accumulate(Tensor4<T>&& g) {
        if (grad.empty())
            grad = std::move(g);
        else
            grad += g;
    }
};

/// Handle to a graph node. Copies share the node.
template <class T>
class Var {
public:
    Var() = default;
    explicit Var(Tensor4<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
        node_->value = std::move(value);
        node_->requires_grad = requires_grad;
    }

    bool defined() const { return static_cast<bool>(node_); }
    const Tensor4<T>& value() const { return node_->value; }
    Tensor4<T>& mutable_value() { return node_->value; }
    const Shape& shape() const { return node_->value.shape(); }
    bool requires_grad() const { return node_->requires_grad; }

    /// Gradient; zeros if nothing has been accumulated yet.
    const Tensor4<T>& grad() const {
        if (node_->grad.empty()) node_->grad = Tensor4<T>(node_->value.shape());
        return node_->grad;
    }
    Tensor4<T>& grad() {
        if (node_->grad.empty()) node_->grad = Tensor4<T>(node_->value.shape());
        return node_->grad;
    }
    void zero_grad() { node_->grad = Tensor4<T>(); }

    T item() const {
        if (value().numel() != 1) throw ShapeError("item() on non-scalar " + shape().str());
        return value()[0];
    }

    const std::shared_ptr<Node<T>>& node() const { return node_; }

private:
    std::shared_ptr<Node<T>> node_;
};

/// Creates an op output node. The closure receives the finished node and
/// reads node.grad (always non-empty when called).
template <class T>
Var<T> make_op(Tensor4<T> value, std::vector<Var<T>> inputs, std::function<void(Node<T>&)> backward) {
    Var<T> out(std::move(value));
    bool any = false;
    for (const auto& v : inputs) any = any || v.requires_grad();
    if (any) {
        auto& node = *out.node();
        node.requires_grad = true;
        for (auto& v : inputs) node.inputs.push_back(v.node());
        node.backward = std::move(backward);
    }
    return out;
}

/// Seeds d(root)/d(root) = 1 (root must be scalar unless seed is given)
/// and propagates to every reachable node with requires_grad.
template <class T>
void backward(const Var<T>& root, const Tensor4<T>* seed = nullptr) {
    if (!root.requires_grad()) return;
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    // Iterative post-order DFS; inputs are visited in declaration order.
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.node().get(), 0}};
    seen.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            Node<T>* child = node->inputs[next++].get();
            if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    if (seed) {
        root.node()->accumulate(*seed);
    } else {
        if (root.value().numel() != 1) throw ShapeError("backward: root is not scalar; pass a seed");
        root.node()->accumulate(Tensor4<T>::ones(root.shape()));
    }
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* node = *it;
        if (node->backward && !node->grad.empty()) node->backward(*node);
    }
}

/// Records the piecewise-linear choices of one forward pass (ReLU/ReLU6
/// regions, max-pool winners) and replays them on later passes, so finite
/// differences see the same linear piece as the analytic gradient instead of
/// stepping across kinks. Thread-local; inactive unless a scope is open.
class PiecewiseTape {
public:
    enum class State { record, replay };

    class Scope {
    public:
        Scope(PiecewiseTape& tape, State state) : prev_(current()) {
            tape.state_ = state;
            tape.cursor_ = 0;
            if (state == State::record) tape.entries_.clear();
            current() = &tape;
        }
        ~Scope() { current() = prev_; }
        Scope(const Scope&) = delete;
        Scope& operator=(const Scope&) = delete;

    private:
        PiecewiseTape* prev_;
    };

    static PiecewiseTape*& current() {
        thread_local PiecewiseTape* tape = nullptr;
        return tape;
    }

    bool recording() const { return state_ == State::record; }

    void push(std::vector<std::uint32_t> codes) { entries_.push_back(std::move(codes)); }

    const std::vector<std::uint32_t>& next(std::size_t expected) {
        if (cursor_ >= entries_.size() || entries_[cursor_].size() != expected)
            throw Error("piecewise tape replay does not match the recorded graph");
        return entries_[cursor_++];
    }

private:
    State state_ = State::record;
    std::vector<std::vector<std::uint32_t>> entries_;
    std::size_t cursor_ = 0;
};

namespace detail {

// Region codes: 0 below the kink, 1 linear, 2 above the ReLU6 cap.
template <class T>
Tensor4<T> piecewise_activation(const Tensor4<T>& x, Activation kind, PiecewiseTape& tape) {
    const T cap = kind == Activation::relu6 ? T(6) : std::numeric_limits<T>::infinity();
    Tensor4<T> y(x.shape());
    if (tape.recording()) {
        std::vector<std::uint32_t> codes(x.numel());
        for (std::size_t i = 0; i < x.numel(); ++i) codes[i] = x[i] <= T(0) ? 0 : (x[i] < cap ? 1 : 2);
        tape.push(std::move(codes));
    }
    const auto& codes = tape.next(x.numel());
    for (std::size_t i = 0; i < x.numel(); ++i) y[i] = codes[i] == 0 ? T(0) : (codes[i] == 1 ? x[i] : cap);
    return y;
}

/// Winner index per output element for max pooling (spatial or channel).
template <class T>
std::vector<std::uint32_t> max_winners(const Tensor4<T>& x, bool over_channels) {
    const Shape& s = x.shape();
    std::vector<std::uint32_t> win;
    if (over_channels) {
        win.resize(s.n * s.spatial());
        for (std::size_t n = 0; n < s.n; ++n)
            for (std::size_t i = 0; i < s.spatial(); ++i) {
                std::size_t best = 0;
                for (std::size_t c = 1; c < s.c; ++c)
                    if (x.plane(n, c)[i] > x.plane(n, best)[i]) best = c;
                win[n * s.spatial() + i] = static_cast<std::uint32_t>(best);
            }
    } else {
        win.resize(s.n * s.c);
        for (std::size_t n = 0; n < s.n; ++n)
            for (std::size_t c = 0; c < s.c; ++c) {
                const T* p = x.plane(n, c);
                win[n * s.c + c] = static_cast<std::uint32_t>(std::max_element(p, p + s.spatial()) - p);
            }
    }
    return win;
}

template <class T>
Tensor4<T> piecewise_max(const Tensor4<T>& x, bool over_channels, PiecewiseTape& tape) {
    const Shape& s = x.shape();
    const std::size_t count = over_channels ? s.n * s.spatial() : s.n * s.c;
    if (tape.recording()) tape.push(max_winners(x, over_channels));
    const auto& win = tape.next(count);
    if (over_channels) {
        Tensor4<T> y({s.n, 1, s.h, s.w});
        for (std::size_t n = 0; n < s.n; ++n)
            for (std::size_t i = 0; i < s.spatial(); ++i) y.plane(n, 0)[i] = x.plane(n, win[n * s.spatial() + i])[i];
        return y;
    }
    Tensor4<T> y({s.n, s.c, 1, 1});
    for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t c = 0; c < s.c; ++c) y.at(n, c, 0, 0) = x.plane(n, c)[win[n * s.c + c]];
    return y;
}

} // namespace detail

namespace ag {

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    return make_op<T>(elementwise(a.value(), b.value(), BinaryOp::add), {a, b}, [](Node<T>& n) {
        for (auto& in : n.inputs)
            if (in->requires_grad) in->accumulate(n.grad);
    });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    return make_op<T>(elementwise(a.value(), b.value(), BinaryOp::sub), {a, b}, [](Node<T>& n) {
        if (n.inputs[0]->requires_grad) n.inputs[0]->accumulate(n.grad);
        if (n.inputs[1]->requires_grad) {
            Tensor4<T> g = n.grad;
            for (auto& v : g.data()) v = -v;
            n.inputs[1]->accumulate(std::move(g));
        }
    });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    return make_op<T>(elementwise(a.value(), b.value(), BinaryOp::mul), {a, b}, [](Node<T>& n) {
        auto& A = *n.inputs[0];
        auto& B = *n.inputs[1];
        if (A.requires_grad) A.accumulate(elementwise(n.grad, B.value, BinaryOp::mul));
        if (B.requires_grad) B.accumulate(elementwise(n.grad, A.value, BinaryOp::mul));
    });
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
    Tensor4<T> y = a.value();
    for (auto& v : y.data()) v *= s;
    return make_op<T>(std::move(y), {a}, [s](Node<T>& n) {
        Tensor4<T> g = n.grad;
        for (auto& v : g.data()) v *= s;
        n.inputs[0]->accumulate(std::move(g));
    });
}

/// Elementwise mean of equally shaped tensors, summed in list order.
template <class T>
Var<T> mean_of(const std::vector<Var<T>>& xs) {
    if (xs.empty()) throw ShapeError("mean_of: empty list");
    Tensor4<T> y = xs[0].value();
    for (std::size_t i = 1; i < xs.size(); ++i) y += xs[i].value();
    const T inv = T(1) / static_cast<T>(xs.size());
    for (auto& v : y.data()) v *= inv;
    return make_op<T>(std::move(y), xs, [inv](Node<T>& n) {
        Tensor4<T> g = n.grad;
        for (auto& v : g.data()) v *= inv;
        for (auto& in : n.inputs)
            if (in->requires_grad) in->accumulate(g);
    });
}

template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>* bias, const ConvGeometry& geom) {
    std::vector<Var<T>> inputs{x, weight};
    if (bias) inputs.push_back(*bias);
    const bool has_bias = bias != nullptr;
    Tensor4<T> y = conv2d_forward(x.value(), weight.value(), has_bias ? &bias->value() : nullptr, geom);
    return make_op<T>(std::move(y), std::move(inputs), [geom, has_bias](Node<T>& n) {
        auto& X = *n.inputs[0];
        auto& W = *n.inputs[1];
        Tensor4<T> gw(W.value.shape());
        Tensor4<T> gb;
        if (has_bias) gb = Tensor4<T>(n.inputs[2]->value.shape());
        Tensor4<T> gx = conv2d_backward(X.value, W.value, geom, n.grad, gw, has_bias ? &gb : nullptr, X.requires_grad);
        if (X.requires_grad) X.accumulate(std::move(gx));
        if (W.requires_grad) W.accumulate(std::move(gw));
        if (has_bias && n.inputs[2]->requires_grad) n.inputs[2]->accumulate(std::move(gb));
    });
}

/// BatchNorm over (n, h, w) per channel. gamma/beta are the trainable
/// parameters; state supplies running statistics, eps, momentum and mode.
template <class T>
Var<T> batchnorm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, BatchNormState<T>& state) {
    state.gamma = gamma.value();
    state.beta = beta.value();
    auto cache = std::make_shared<BatchNormCache<T>>();
    Tensor4<T> y = batchnorm_forward(x.value(), state, cache.get());
    return make_op<T>(std::move(y), {x, gamma, beta}, [cache](Node<T>& n) {
        auto& G = *n.inputs[1];
        Tensor4<T> gg(G.value.shape()), gb(G.value.shape());
        Tensor4<T> gx = batchnorm_backward(*cache, G.value, n.grad, gg, gb);
        if (n.inputs[0]->requires_grad) n.inputs[0]->accumulate(std::move(gx));
        if (G.requires_grad) G.accumulate(std::move(gg));
        if (n.inputs[2]->requires_grad) n.inputs[2]->accumulate(std::move(gb));
    });
}

template <class T>
Var<T> activation(const Var<T>& x, Activation kind) {
    PiecewiseTape* tape = PiecewiseTape::current();
    Tensor4<T> y = tape && (kind == Activation::relu || kind == Activation::relu6)
                       ? detail::piecewise_activation(x.value(), kind, *tape)
                       : activation_forward(x.value(), kind);
    return make_op<T>(y, {x}, [kind, y](Node<T>& n) {
        n.inputs[0]->accumulate(activation_backward(n.inputs[0]->value, y, n.grad, kind));
    });
}

template <class T>
Var<T> relu(const Var<T>& x) {
    return activation(x, Activation::relu);
}
template <class T>
Var<T> relu6(const Var<T>& x) {
    return activation(x, Activation::relu6);
}
template <class T>
Var<T> sigmoid(const Var<T>& x) {
    return activation(x, Activation::sigmoid);
}
template <class T>
Var<T> softmax_channel(const Var<T>& x) {
    return activation(x, Activation::softmax_channel);
}

template <class T>
Var<T> pool_global(const Var<T>& x, PoolKind kind) {
    PiecewiseTape* tape = PiecewiseTape::current();
    Tensor4<T> y = tape && kind == PoolKind::max ? detail::piecewise_max(x.value(), false, *tape)
                                                 : pool_global_forward(x.value(), kind);
    return make_op<T>(std::move(y), {x}, [kind](Node<T>& n) {
        n.inputs[0]->accumulate(pool_global_backward(n.inputs[0]->value, kind, n.grad));
    });
}

template <class T>
Var<T> channel_pool(const Var<T>& x, PoolKind kind) {
    PiecewiseTape* tape = PiecewiseTape::current();
    Tensor4<T> y = tape && kind == PoolKind::max ? detail::piecewise_max(x.value(), true, *tape)
                                                 : channel_pool_forward(x.value(), kind);
    return make_op<T>(std::move(y), {x}, [kind](Node<T>& n) {
        n.inputs[0]->accumulate(channel_pool_backward(n.inputs[0]->value, kind, n.grad));
    });
}

template <class T>
Var<T> upsample_nearest2x(const Var<T>& x) {
    return make_op<T>(upsample_nearest2x_forward(x.value()), {x},
                      [](Node<T>& n) { n.inputs[0]->accumulate(upsample_nearest2x_backward(n.grad)); });
}

template <class T>
Var<T> upsample_bilinear(const Var<T>& x, std::size_t h, std::size_t w) {
    if (x.shape().h == h && x.shape().w == w) return x;
    const Shape xs = x.shape();
    return make_op<T>(upsample_bilinear_forward(x.value(), h, w), {x}, [xs](Node<T>& n) {
        n.inputs[0]->accumulate(upsample_bilinear_backward(xs, n.grad));
    });
}

template <class T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
    const std::size_t ca = a.shape().c;
    return make_op<T>(concat_channels(a.value(), b.value()), {a, b}, [ca](Node<T>& n) {
        const Shape& s = n.grad.shape();
        for (int k = 0; k < 2; ++k) {
            auto& in = *n.inputs[k];
            if (!in.requires_grad) continue;
            Tensor4<T> g(in.value.shape());
            const std::size_t c0 = k == 0 ? 0 : ca;
            for (std::size_t b = 0; b < s.n; ++b)
                std::copy(n.grad.plane(b, c0), n.grad.plane(b, c0) + g.shape().c * s.spatial(), g.plane(b, 0));
            in.accumulate(std::move(g));
        }
    });
}

template <class T>
Var<T> channel_shuffle(const Var<T>& x, std::size_t groups) {
    auto perm = shuffle_permutation(x.shape().c, groups);
    bool identity = true;
    for (std::size_t i = 0; i < perm.size(); ++i) identity = identity && perm[i] == i;
    if (identity) return x;
    return make_op<T>(permute_channels(x.value(), perm), {x}, [perm](Node<T>& n) {
        n.inputs[0]->accumulate(permute_channels_backward(n.grad, perm));
    });
}

/// x * a with a broadcast along its unit extents (channel or spatial gates).
template <class T>
Var<T> gate(const Var<T>& x, const Var<T>& a) {
    return make_op<T>(broadcast_mul(x.value(), a.value()), {x, a}, [](Node<T>& n) {
        auto& X = *n.inputs[0];
        auto& A = *n.inputs[1];
        if (X.requires_grad) X.accumulate(broadcast_mul(n.grad, A.value));
        if (A.requires_grad) A.accumulate(broadcast_mul_grad_a(X.value, n.grad, A.value.shape()));
    });
}

/// Sum of scalars in list order.
template <class T>
Var<T> sum_scalars(const std::vector<Var<T>>& xs) {
    if (xs.empty()) throw ShapeError("sum_scalars: empty list");
    T total = 0;
    for (const auto& x : xs) total += x.item();
    return make_op<T>(Tensor4<T>::full({1, 1, 1, 1}, total), xs, [](Node<T>& n) {
        for (auto& in : n.inputs)
            if (in->requires_grad) in->accumulate(n.grad);
    });
}

} // namespace ag
} // namespace emcad
