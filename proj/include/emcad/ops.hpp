#pragma once

// Differentiable primitives as explicit forward/backward kernel pairs.
// Everything here is stateless except BatchNormState's running statistics.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "emcad/tensor.hpp"

namespace emcad {

// ---------------------------------------------------------------------------
// Threading

namespace detail {
inline std::atomic<int>& thread_setting() {
    static std::atomic<int> threads{[] {
        if (const char* env = std::getenv("EMCAD_THREADS")) {
            int v = std::atoi(env);
            return v > 0 ? v : 1;
        }
        return 1;
    }()};
    return threads;
}
} // namespace detail

inline int num_threads() { return detail::thread_setting().load(); }
inline void set_num_threads(int n) { detail::thread_setting().store(std::max(1, n)); }

/// Runs f(i) for i in [0, count). Callers must write disjoint regions per i;
/// the result is then identical for any thread count.
template <class F>
void parallel_for(std::size_t count, F&& f) {
    const std::size_t threads = std::min<std::size_t>(static_cast<std::size_t>(num_threads()), count);
    if (threads <= 1) {
        for (std::size_t i = 0; i < count; ++i) f(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(threads);
    for (std::size_t t = 0; t < threads; ++t)
        pool.emplace_back([&, t] {
            for (std::size_t i = t; i < count; i += threads) f(i);
        });
    for (auto& th : pool) th.join();
}

// ---------------------------------------------------------------------------
// Convolution

struct ConvGeometry {
    std::size_t stride = 1;
    std::size_t padding = 0;
    std::size_t groups = 1;
    /// Drop trailing rows/cols that do not fill a whole stride instead of
    /// rejecting the geometry (needed for stride-2 odd kernels on even inputs).
    bool floor_output = false;
};

/// Weight layout (c_out, c_in/groups, k, k), optional bias of length c_out.
template <class T>
struct ConvParams {
    Tensor4<T> weight;
    std::optional<Tensor4<T>> bias; // shape (1, c_out, 1, 1)
    std::size_t stride = 1;
    std::size_t padding = 0;
    std::size_t groups = 1;
    Tensor4<T> weight_grad;
    std::optional<Tensor4<T>> bias_grad;

    ConvGeometry geometry() const { return {stride, padding, groups, false}; }
};

inline std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad,
                                   bool floor_output = false) {
    const std::size_t padded = in + 2 * pad;
    if (stride == 0) throw ShapeError("conv2d: stride must be positive");
    if (padded < k) throw ShapeError("conv2d: kernel larger than padded input");
    if (!floor_output && (padded - k) % stride != 0)
        throw ShapeError("conv2d: non-integral output size for extent " + std::to_string(in) + ", kernel " +
                         std::to_string(k) + ", stride " + std::to_string(stride));
    return (padded - k) / stride + 1;
}

template <class T>
Shape conv2d_output_shape(const Shape& x, const Shape& w, const ConvGeometry& g) {
    if (g.groups == 0) throw ShapeError("conv2d: groups must be positive");
    if (w.h != w.w) throw ShapeError("conv2d: only square kernels are supported");
    if (x.c % g.groups != 0 || w.n % g.groups != 0)
        throw ShapeError("conv2d: channels (" + std::to_string(x.c) + " in, " + std::to_string(w.n) +
                         " out) not divisible by groups " + std::to_string(g.groups));
    if (x.c / g.groups != w.c)
        throw ShapeError("conv2d: input has " + std::to_string(x.c) + " channels but weight expects " +
                         std::to_string(w.c * g.groups));
    return {x.n, w.n, conv_out_extent(x.h, w.h, g.stride, g.padding, g.floor_output),
            conv_out_extent(x.w, w.w, g.stride, g.padding, g.floor_output)};
}

namespace detail {

// Range of output columns whose input column ow*stride + kw - pad lies in [0, in).
inline void valid_range(std::size_t out, std::size_t in, std::size_t k_off, std::size_t stride, std::size_t pad,
                        std::size_t& lo, std::size_t& hi) {
    // need ow*stride + k_off >= pad and ow*stride + k_off - pad <= in - 1
    lo = k_off >= pad ? 0 : (pad - k_off + stride - 1) / stride;
    const std::size_t limit = in - 1 + pad; // ow*stride + k_off <= limit
    hi = k_off > limit ? 0 : std::min(out, (limit - k_off) / stride + 1);
    if (hi < lo) hi = lo;
}

template <class T>
void conv_sample_forward(const T* x, const Shape& xs, const T* w, const Shape& ws, const T* bias,
                         const ConvGeometry& g, T* y, const Shape& ys) {
    const std::size_t cin_g = ws.c, cout_g = ws.n / g.groups, k = ws.h;
    const std::size_t in_hw = xs.spatial(), out_hw = ys.spatial();
    const bool pointwise = k == 1 && g.stride == 1 && g.padding == 0;
    for (std::size_t oc = 0; oc < ws.n; ++oc) {
        T* yp = y + oc * out_hw;
        std::fill(yp, yp + out_hw, bias ? bias[oc] : T(0));
        const std::size_t grp = oc / cout_g;
        for (std::size_t icl = 0; icl < cin_g; ++icl) {
            const T* xp = x + (grp * cin_g + icl) * in_hw;
            const T* wp = w + (oc * cin_g + icl) * k * k;
            if (pointwise) {
                const T wv = wp[0];
                for (std::size_t p = 0; p < out_hw; ++p) yp[p] += wv * xp[p];
                continue;
            }
            for (std::size_t kh = 0; kh < k; ++kh) {
                std::size_t oh_lo, oh_hi;
                valid_range(ys.h, xs.h, kh, g.stride, g.padding, oh_lo, oh_hi);
                for (std::size_t kw = 0; kw < k; ++kw) {
                    const T wv = wp[kh * k + kw];
                    std::size_t ow_lo, ow_hi;
                    valid_range(ys.w, xs.w, kw, g.stride, g.padding, ow_lo, ow_hi);
                    for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
                        const T* xrow = xp + (oh * g.stride + kh - g.padding) * xs.w;
                        T* yrow = yp + oh * ys.w;
                        if (g.stride == 1) {
                            if (ow_hi <= ow_lo) continue;
                            const T* xr = xrow + (ow_lo + kw - g.padding);
                            T* yr = yrow + ow_lo;
                            for (std::size_t j = 0; j < ow_hi - ow_lo; ++j) yr[j] += wv * xr[j];
                        } else {
                            for (std::size_t ow = ow_lo; ow < ow_hi; ++ow)
                                yrow[ow] += wv * xrow[ow * g.stride + kw - g.padding];
                        }
                    }
                }
            }
        }
    }
}

template <class T>
void conv_sample_backward(const T* x, const Shape& xs, const T* w, const Shape& ws, const ConvGeometry& g,
                          const T* gy, const Shape& ys, T* gx, T* gw, T* gb) {
    const std::size_t cin_g = ws.c, cout_g = ws.n / g.groups, k = ws.h;
    const std::size_t in_hw = xs.spatial(), out_hw = ys.spatial();
    const bool pointwise = k == 1 && g.stride == 1 && g.padding == 0;
    for (std::size_t oc = 0; oc < ws.n; ++oc) {
        const T* gyp = gy + oc * out_hw;
        if (gb) {
            T s = 0;
            for (std::size_t p = 0; p < out_hw; ++p) s += gyp[p];
            gb[oc] += s;
        }
        const std::size_t grp = oc / cout_g;
        for (std::size_t icl = 0; icl < cin_g; ++icl) {
            const std::size_t ic = grp * cin_g + icl;
            const T* xp = x + ic * in_hw;
            T* gxp = gx ? gx + ic * in_hw : nullptr;
            const T* wp = w + (oc * cin_g + icl) * k * k;
            T* gwp = gw + (oc * cin_g + icl) * k * k;
            if (pointwise) {
                const T wv = wp[0];
                T acc = 0;
                for (std::size_t p = 0; p < out_hw; ++p) acc += gyp[p] * xp[p];
                gwp[0] += acc;
                if (gxp)
                    for (std::size_t p = 0; p < out_hw; ++p) gxp[p] += wv * gyp[p];
                continue;
            }
            for (std::size_t kh = 0; kh < k; ++kh) {
                std::size_t oh_lo, oh_hi;
                valid_range(ys.h, xs.h, kh, g.stride, g.padding, oh_lo, oh_hi);
                for (std::size_t kw = 0; kw < k; ++kw) {
                    const T wv = wp[kh * k + kw];
                    std::size_t ow_lo, ow_hi;
                    valid_range(ys.w, xs.w, kw, g.stride, g.padding, ow_lo, ow_hi);
                    T acc = 0;
                    for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
                        const std::size_t ih = oh * g.stride + kh - g.padding;
                        const T* gyrow = gyp + oh * ys.w;
                        for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) {
                            const std::size_t iw = ow * g.stride + kw - g.padding;
                            acc += gyrow[ow] * xp[ih * xs.w + iw];
                            if (gxp) gxp[ih * xs.w + iw] += wv * gyrow[ow];
                        }
                    }
                    gwp[kh * k + kw] += acc;
                }
            }
        }
    }
}

} // namespace detail

/// Grouped cross-correlation with symmetric zero padding.
template <class T>
Tensor4<T> conv2d_forward(const Tensor4<T>& x, const Tensor4<T>& weight, const Tensor4<T>* bias,
                          const ConvGeometry& g) {
    const Shape ys = conv2d_output_shape<T>(x.shape(), weight.shape(), g);
    if (bias && bias->numel() != weight.shape().n) throw ShapeError("conv2d: bias length must equal c_out");
    Tensor4<T> y(ys);
    const Shape xs1{1, x.shape().c, x.shape().h, x.shape().w}, ys1{1, ys.c, ys.h, ys.w};
    parallel_for(x.shape().n, [&](std::size_t n) {
        detail::conv_sample_forward(x.plane(n, 0), xs1, weight.ptr(), weight.shape(), bias ? bias->ptr() : nullptr,
                                    g, y.plane(n, 0), ys1);
    });
    EMCAD_DEBUG_FINITE(y, "conv2d_forward");
    return y;
}

/// Returns grad_x and accumulates into grad_w / grad_b (grad_b may be null).
/// Weight gradients are reduced per sample and then summed in batch order.
template <class T>
Tensor4<T> conv2d_backward(const Tensor4<T>& x, const Tensor4<T>& weight, const ConvGeometry& g,
                           const Tensor4<T>& grad_out, Tensor4<T>& grad_w, Tensor4<T>* grad_b,
                           bool need_grad_x = true) {
    const Shape ys = conv2d_output_shape<T>(x.shape(), weight.shape(), g);
    if (grad_out.shape() != ys)
        throw ShapeError("conv2d_backward: grad_out " + grad_out.shape().str() + " != output " + ys.str());
    grad_w.require_same(weight, "conv2d_backward weight grad");
    const std::size_t N = x.shape().n, wn = weight.numel(), cout = weight.shape().n;
    Tensor4<T> gx = need_grad_x ? Tensor4<T>(x.shape()) : Tensor4<T>();
    std::vector<T> gw_part(N * wn, T(0));
    std::vector<T> gb_part(grad_b ? N * cout : 0, T(0));
    const Shape xs1{1, x.shape().c, x.shape().h, x.shape().w}, ys1{1, ys.c, ys.h, ys.w};
    parallel_for(N, [&](std::size_t n) {
        detail::conv_sample_backward(x.plane(n, 0), xs1, weight.ptr(), weight.shape(), g, grad_out.plane(n, 0), ys1,
                                     need_grad_x ? gx.plane(n, 0) : nullptr, gw_part.data() + n * wn,
                                     grad_b ? gb_part.data() + n * cout : nullptr);
    });
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t i = 0; i < wn; ++i) grad_w[i] += gw_part[n * wn + i];
        if (grad_b)
            for (std::size_t i = 0; i < cout; ++i) (*grad_b)[i] += gb_part[n * cout + i];
    }
    return gx;
}

template <class T>
Tensor4<T> conv2d_forward(const Tensor4<T>& x, const ConvParams<T>& p) {
    return conv2d_forward(x, p.weight, p.bias ? &*p.bias : nullptr, p.geometry());
}

/// Adjoint of conv2d_forward; accumulates into p.weight_grad / p.bias_grad.
template <class T>
Tensor4<T> conv2d_backward(const Tensor4<T>& x, ConvParams<T>& p, const Tensor4<T>& grad_out) {
    if (p.weight_grad.shape() != p.weight.shape()) p.weight_grad = Tensor4<T>(p.weight.shape());
    Tensor4<T>* gb = nullptr;
    if (p.bias) {
        if (!p.bias_grad || p.bias_grad->shape() != p.bias->shape()) p.bias_grad = Tensor4<T>(p.bias->shape());
        gb = &*p.bias_grad;
    }
    return conv2d_backward(x, p.weight, p.geometry(), grad_out, p.weight_grad, gb);
}

// ---------------------------------------------------------------------------
// Batch normalization

enum class Mode { train, eval };

template <class T>
struct BatchNormState {
    Tensor4<T> gamma;        // (1, c, 1, 1)
    Tensor4<T> beta;         // (1, c, 1, 1)
    Tensor4<T> running_mean; // (1, c, 1, 1)
    Tensor4<T> running_var;  // (1, c, 1, 1)
    double eps = 1e-5;
    double momentum = 0.1;
    Mode mode = Mode::train;

    explicit BatchNormState(std::size_t c = 1)
        : gamma(Tensor4<T>::ones({1, c, 1, 1})), beta({1, c, 1, 1}), running_mean({1, c, 1, 1}),
          running_var(Tensor4<T>::ones({1, c, 1, 1})) {}

    std::size_t channels() const { return gamma.numel(); }
};

/// Per-channel statistics kept by the forward pass for the backward pass.
template <class T>
struct BatchNormCache {
    Tensor4<T> x_hat;
    std::vector<T> inv_std;
    Mode mode = Mode::train;
};

template <class T>
Tensor4<T> batchnorm_forward(const Tensor4<T>& x, BatchNormState<T>& s, BatchNormCache<T>* cache = nullptr) {
    const Shape& xs = x.shape();
    const std::size_t C = s.channels();
    if (xs.c != C)
        throw ShapeError("batchnorm: input has " + std::to_string(xs.c) + " channels, state has " + std::to_string(C));
    const std::size_t m = xs.n * xs.spatial();
    if (s.mode == Mode::train && m < 2)
        throw ShapeError("batchnorm: train mode needs at least 2 values per channel, got " + std::to_string(m));
    Tensor4<T> y(xs);
    Tensor4<T> xhat(xs);
    std::vector<T> inv_std(C);
    for (std::size_t c = 0; c < C; ++c) {
        T mean, var;
        if (s.mode == Mode::train) {
            T sum = 0;
            for (std::size_t n = 0; n < xs.n; ++n) {
                const T* p = x.plane(n, c);
                for (std::size_t i = 0; i < xs.spatial(); ++i) sum += p[i];
            }
            mean = sum / static_cast<T>(m);
            T sq = 0;
            for (std::size_t n = 0; n < xs.n; ++n) {
                const T* p = x.plane(n, c);
                for (std::size_t i = 0; i < xs.spatial(); ++i) {
                    const T d = p[i] - mean;
                    sq += d * d;
                }
            }
            var = sq / static_cast<T>(m);
            const T mom = static_cast<T>(s.momentum);
            s.running_mean[c] = (T(1) - mom) * s.running_mean[c] + mom * mean;
            s.running_var[c] =
                (T(1) - mom) * s.running_var[c] + mom * var * static_cast<T>(m) / static_cast<T>(m - 1);
        } else {
            mean = s.running_mean[c];
            var = s.running_var[c];
        }
        const T istd = T(1) / std::sqrt(var + static_cast<T>(s.eps));
        inv_std[c] = istd;
        const T g = s.gamma[c], b = s.beta[c];
        for (std::size_t n = 0; n < xs.n; ++n) {
            const T* p = x.plane(n, c);
            T* xh = xhat.plane(n, c);
            T* yp = y.plane(n, c);
            for (std::size_t i = 0; i < xs.spatial(); ++i) {
                xh[i] = (p[i] - mean) * istd;
                yp[i] = g * xh[i] + b;
            }
        }
    }
    if (cache) {
        cache->x_hat = std::move(xhat);
        cache->inv_std = std::move(inv_std);
        cache->mode = s.mode;
    }
    EMCAD_DEBUG_FINITE(y, "batchnorm_forward");
    return y;
}

/// Returns grad_x; accumulates into grad_gamma / grad_beta.
template <class T>
Tensor4<T> batchnorm_backward(const BatchNormCache<T>& cache, const Tensor4<T>& gamma, const Tensor4<T>& grad_out,
                              Tensor4<T>& grad_gamma, Tensor4<T>& grad_beta) {
    const Shape& xs = grad_out.shape();
    cache.x_hat.require_same(grad_out, "batchnorm_backward");
    const std::size_t C = xs.c, m = xs.n * xs.spatial();
    Tensor4<T> gx(xs);
    for (std::size_t c = 0; c < C; ++c) {
        T sum_gy = 0, sum_gy_xh = 0;
        for (std::size_t n = 0; n < xs.n; ++n) {
            const T* gy = grad_out.plane(n, c);
            const T* xh = cache.x_hat.plane(n, c);
            for (std::size_t i = 0; i < xs.spatial(); ++i) {
                sum_gy += gy[i];
                sum_gy_xh += gy[i] * xh[i];
            }
        }
        grad_gamma[c] += sum_gy_xh;
        grad_beta[c] += sum_gy;
        const T g = gamma[c], istd = cache.inv_std[c];
        for (std::size_t n = 0; n < xs.n; ++n) {
            const T* gy = grad_out.plane(n, c);
            const T* xh = cache.x_hat.plane(n, c);
            T* out = gx.plane(n, c);
            if (cache.mode == Mode::train) {
                const T scale = g * istd / static_cast<T>(m);
                for (std::size_t i = 0; i < xs.spatial(); ++i)
                    out[i] = scale * (static_cast<T>(m) * gy[i] - sum_gy - xh[i] * sum_gy_xh);
            } else {
                for (std::size_t i = 0; i < xs.spatial(); ++i) out[i] = g * istd * gy[i];
            }
        }
    }
    return gx;
}

// ---------------------------------------------------------------------------
// Activations

enum class Activation { relu, relu6, sigmoid, softmax_channel };

template <class T>
T sigmoid_scalar(T v) {
    if (v >= 0) return T(1) / (T(1) + std::exp(-v));
    const T e = std::exp(v);
    return e / (T(1) + e);
}

template <class T>
Tensor4<T> activation_forward(const Tensor4<T>& x, Activation kind) {
    Tensor4<T> y(x.shape());
    const std::size_t n = x.numel();
    switch (kind) {
    case Activation::relu:
        for (std::size_t i = 0; i < n; ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
        break;
    case Activation::relu6:
        for (std::size_t i = 0; i < n; ++i) y[i] = std::clamp(x[i], T(0), T(6));
        break;
    case Activation::sigmoid:
        for (std::size_t i = 0; i < n; ++i) y[i] = sigmoid_scalar(x[i]);
        break;
    case Activation::softmax_channel: {
        const Shape& s = x.shape();
        const std::size_t hw = s.spatial();
        for (std::size_t b = 0; b < s.n; ++b)
            for (std::size_t p = 0; p < hw; ++p) {
                T mx = -std::numeric_limits<T>::infinity();
                for (std::size_t c = 0; c < s.c; ++c) mx = std::max(mx, x.plane(b, c)[p]);
                T z = 0;
                for (std::size_t c = 0; c < s.c; ++c) {
                    const T e = std::exp(x.plane(b, c)[p] - mx);
                    y.plane(b, c)[p] = e;
                    z += e;
                }
                for (std::size_t c = 0; c < s.c; ++c) y.plane(b, c)[p] /= z;
            }
        break;
    }
    }
    return y;
}

/// Needs both the input x and the forward output y.
template <class T>
Tensor4<T> activation_backward(const Tensor4<T>& x, const Tensor4<T>& y, const Tensor4<T>& gy, Activation kind) {
    gy.require_same(x, "activation_backward");
    Tensor4<T> gx(x.shape());
    const std::size_t n = x.numel();
    switch (kind) {
    case Activation::relu:
        for (std::size_t i = 0; i < n; ++i) gx[i] = x[i] > T(0) ? gy[i] : T(0);
        break;
    case Activation::relu6:
        for (std::size_t i = 0; i < n; ++i) gx[i] = (x[i] > T(0) && x[i] < T(6)) ? gy[i] : T(0);
        break;
    case Activation::sigmoid:
        for (std::size_t i = 0; i < n; ++i) gx[i] = gy[i] * y[i] * (T(1) - y[i]);
        break;
    case Activation::softmax_channel: {
        const Shape& s = x.shape();
        for (std::size_t b = 0; b < s.n; ++b)
            for (std::size_t p = 0; p < s.spatial(); ++p) {
                T dot = 0;
                for (std::size_t c = 0; c < s.c; ++c) dot += gy.plane(b, c)[p] * y.plane(b, c)[p];
                for (std::size_t c = 0; c < s.c; ++c)
                    gx.plane(b, c)[p] = y.plane(b, c)[p] * (gy.plane(b, c)[p] - dot);
            }
        break;
    }
    }
    return gx;
}

// ---------------------------------------------------------------------------
// Pooling and channel statistics

enum class PoolKind { avg, max };

template <class T>
Tensor4<T> pool_global_forward(const Tensor4<T>& x, PoolKind kind) {
    const Shape& s = x.shape();
    Tensor4<T> y({s.n, s.c, 1, 1});
    for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t c = 0; c < s.c; ++c) {
            const T* p = x.plane(n, c);
            if (kind == PoolKind::avg) {
                T sum = 0;
                for (std::size_t i = 0; i < s.spatial(); ++i) sum += p[i];
                y.at(n, c, 0, 0) = sum / static_cast<T>(s.spatial());
            } else {
                y.at(n, c, 0, 0) = *std::max_element(p, p + s.spatial());
            }
        }
    return y;
}

/// Max routes the gradient to the first maximal element.
template <class T>
Tensor4<T> pool_global_backward(const Tensor4<T>& x, PoolKind kind, const Tensor4<T>& gy) {
    const Shape& s = x.shape();
    Tensor4<T> gx(s);
    for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t c = 0; c < s.c; ++c) {
            const T g = gy.at(n, c, 0, 0);
            T* out = gx.plane(n, c);
            if (kind == PoolKind::avg) {
                const T v = g / static_cast<T>(s.spatial());
                for (std::size_t i = 0; i < s.spatial(); ++i) out[i] = v;
            } else {
                const T* p = x.plane(n, c);
                out[std::max_element(p, p + s.spatial()) - p] = g;
            }
        }
    return gx;
}

/// Mean or max across channels at every pixel; output has one channel.
template <class T>
Tensor4<T> channel_pool_forward(const Tensor4<T>& x, PoolKind kind) {
    const Shape& s = x.shape();
    Tensor4<T> y({s.n, 1, s.h, s.w});
    for (std::size_t n = 0; n < s.n; ++n) {
        T* out = y.plane(n, 0);
        std::copy(x.plane(n, 0), x.plane(n, 0) + s.spatial(), out);
        for (std::size_t c = 1; c < s.c; ++c) {
            const T* p = x.plane(n, c);
            if (kind == PoolKind::avg)
                for (std::size_t i = 0; i < s.spatial(); ++i) out[i] += p[i];
            else
                for (std::size_t i = 0; i < s.spatial(); ++i) out[i] = std::max(out[i], p[i]);
        }
        if (kind == PoolKind::avg)
            for (std::size_t i = 0; i < s.spatial(); ++i) out[i] /= static_cast<T>(s.c);
    }
    return y;
}

template <class T>
Tensor4<T> channel_pool_backward(const Tensor4<T>& x, PoolKind kind, const Tensor4<T>& gy) {
    const Shape& s = x.shape();
    Tensor4<T> gx(s);
    for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t i = 0; i < s.spatial(); ++i) {
            const T g = gy.plane(n, 0)[i];
            if (kind == PoolKind::avg) {
                for (std::size_t c = 0; c < s.c; ++c) gx.plane(n, c)[i] = g / static_cast<T>(s.c);
            } else {
                std::size_t best = 0;
                for (std::size_t c = 1; c < s.c; ++c)
                    if (x.plane(n, c)[i] > x.plane(n, best)[i]) best = c;
                gx.plane(n, best)[i] = g;
            }
        }
    return gx;
}

// ---------------------------------------------------------------------------
// Resampling

template <class T>
Tensor4<T> upsample_nearest2x_forward(const Tensor4<T>& x) {
    const Shape& s = x.shape();
    Tensor4<T> y({s.n, s.c, 2 * s.h, 2 * s.w});
    for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t c = 0; c < s.c; ++c) {
            const T* in = x.plane(n, c);
            T* out = y.plane(n, c);
            for (std::size_t h = 0; h < 2 * s.h; ++h)
                for (std::size_t w = 0; w < 2 * s.w; ++w) out[h * 2 * s.w + w] = in[(h / 2) * s.w + w / 2];
        }
    return y;
}

/// Adjoint of replication: 2x2 block sums.
template <class T>
Tensor4<T> upsample_nearest2x_backward(const Tensor4<T>& gy) {
    const Shape& s = gy.shape();
    if (s.h % 2 || s.w % 2) throw ShapeError("upsample_nearest2x_backward: odd gradient extent");
    Tensor4<T> gx({s.n, s.c, s.h / 2, s.w / 2});
    for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t c = 0; c < s.c; ++c) {
            const T* in = gy.plane(n, c);
            T* out = gx.plane(n, c);
            for (std::size_t h = 0; h < s.h; ++h)
                for (std::size_t w = 0; w < s.w; ++w) out[(h / 2) * (s.w / 2) + w / 2] += in[h * s.w + w];
        }
    return gx;
}

namespace detail {
// align_corners=false source coordinate: src = (dst + 0.5) * in/out - 0.5,
// clamped below at 0; the upper neighbour is clamped to in - 1.
struct LinearTap {
    std::size_t i0, i1;
    double l1; // weight of i1; weight of i0 is 1 - l1
};

inline std::vector<LinearTap> linear_taps(std::size_t in, std::size_t out) {
    std::vector<LinearTap> taps(out);
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t o = 0; o < out; ++o) {
        double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
        if (src < 0) src = 0;
        std::size_t i0 = static_cast<std::size_t>(src);
        if (i0 > in - 1) i0 = in - 1;
        const std::size_t i1 = std::min(i0 + 1, in - 1);
        taps[o] = {i0, i1, src - static_cast<double>(i0)};
    }
    return taps;
}
} // namespace detail

/// Bilinear upsampling, align_corners=false convention.
template <class T>
Tensor4<T> upsample_bilinear_forward(const Tensor4<T>& x, std::size_t target_h, std::size_t target_w) {
    const Shape& s = x.shape();
    if (target_h < s.h || target_w < s.w)
        throw ShapeError("upsample_bilinear: target " + std::to_string(target_h) + "x" + std::to_string(target_w) +
                         " is smaller than source " + s.str());
    if (target_h == s.h && target_w == s.w) return x;
    const auto th = detail::linear_taps(s.h, target_h), tw = detail::linear_taps(s.w, target_w);
    Tensor4<T> y({s.n, s.c, target_h, target_w});
    for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t c = 0; c < s.c; ++c) {
            const T* in = x.plane(n, c);
            T* out = y.plane(n, c);
            for (std::size_t oh = 0; oh < target_h; ++oh) {
                const auto& a = th[oh];
                const T ly1 = static_cast<T>(a.l1), ly0 = T(1) - ly1;
                for (std::size_t ow = 0; ow < target_w; ++ow) {
                    const auto& b = tw[ow];
                    const T lx1 = static_cast<T>(b.l1), lx0 = T(1) - lx1;
                    out[oh * target_w + ow] = ly0 * (lx0 * in[a.i0 * s.w + b.i0] + lx1 * in[a.i0 * s.w + b.i1]) +
                                              ly1 * (lx0 * in[a.i1 * s.w + b.i0] + lx1 * in[a.i1 * s.w + b.i1]);
                }
            }
        }
    return y;
}

template <class T>
Tensor4<T> upsample_bilinear_backward(const Shape& x_shape, const Tensor4<T>& gy) {
    const Shape& s = x_shape;
    const std::size_t target_h = gy.shape().h, target_w = gy.shape().w;
    if (target_h == s.h && target_w == s.w) return gy;
    const auto th = detail::linear_taps(s.h, target_h), tw = detail::linear_taps(s.w, target_w);
    Tensor4<T> gx(s);
    for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t c = 0; c < s.c; ++c) {
            const T* g = gy.plane(n, c);
            T* out = gx.plane(n, c);
            for (std::size_t oh = 0; oh < target_h; ++oh) {
                const auto& a = th[oh];
                const T ly1 = static_cast<T>(a.l1), ly0 = T(1) - ly1;
                for (std::size_t ow = 0; ow < target_w; ++ow) {
                    const auto& b = tw[ow];
                    const T lx1 = static_cast<T>(b.l1), lx0 = T(1) - lx1;
                    const T v = g[oh * target_w + ow];
                    out[a.i0 * s.w + b.i0] += ly0 * lx0 * v;
                    out[a.i0 * s.w + b.i1] += ly0 * lx1 * v;
                    out[a.i1 * s.w + b.i0] += ly1 * lx0 * v;
                    out[a.i1 * s.w + b.i1] += ly1 * lx1 * v;
                }
            }
        }
    return gx;
}

// ---------------------------------------------------------------------------
// Channel plumbing

template <class T>
Tensor4<T> concat_channels(const Tensor4<T>& a, const Tensor4<T>& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.n != sb.n || sa.h != sb.h || sa.w != sb.w)
        throw ShapeError("concat_channels: " + sa.str() + " vs " + sb.str());
    Tensor4<T> y({sa.n, sa.c + sb.c, sa.h, sa.w});
    for (std::size_t n = 0; n < sa.n; ++n) {
        std::copy(a.plane(n, 0), a.plane(n, 0) + sa.c * sa.spatial(), y.plane(n, 0));
        std::copy(b.plane(n, 0), b.plane(n, 0) + sb.c * sb.spatial(), y.plane(n, sa.c));
    }
    return y;
}

/// Channel index permutation of a (groups, c/groups) -> (c/groups, groups) transpose.
/// Identity when c is not divisible by groups.
inline std::vector<std::size_t> shuffle_permutation(std::size_t channels, std::size_t groups) {
    std::vector<std::size_t> src(channels);
    for (std::size_t i = 0; i < channels; ++i) src[i] = i;
    if (groups <= 1 || channels % groups != 0) return src;
    const std::size_t per = channels / groups;
    for (std::size_t j = 0; j < per; ++j)
        for (std::size_t g = 0; g < groups; ++g) src[j * groups + g] = g * per + j;
    return src;
}

template <class T>
Tensor4<T> permute_channels(const Tensor4<T>& x, const std::vector<std::size_t>& src) {
    const Shape& s = x.shape();
    Tensor4<T> y(s);
    for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t c = 0; c < s.c; ++c)
            std::copy(x.plane(n, src[c]), x.plane(n, src[c]) + s.spatial(), y.plane(n, c));
    return y;
}

template <class T>
Tensor4<T> permute_channels_backward(const Tensor4<T>& gy, const std::vector<std::size_t>& src) {
    const Shape& s = gy.shape();
    Tensor4<T> gx(s);
    for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t c = 0; c < s.c; ++c)
            std::copy(gy.plane(n, c), gy.plane(n, c) + s.spatial(), gx.plane(n, src[c]));
    return gx;
}

/// x * a where every extent of a equals x's or is 1 (broadcast).
template <class T>
Tensor4<T> broadcast_mul(const Tensor4<T>& x, const Tensor4<T>& a) {
    const Shape& s = x.shape();
    const Shape& as = a.shape();
    const auto xd = s.dims(), ad = as.dims();
    for (int i = 0; i < 4; ++i)
        if (ad[i] != xd[i] && ad[i] != 1) throw ShapeError("broadcast_mul: " + as.str() + " vs " + s.str());
    Tensor4<T> y(s);
    std::size_t i = 0;
    for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t c = 0; c < s.c; ++c)
            for (std::size_t h = 0; h < s.h; ++h)
                for (std::size_t w = 0; w < s.w; ++w, ++i)
                    y[i] = x[i] * a.at(as.n == 1 ? 0 : n, as.c == 1 ? 0 : c, as.h == 1 ? 0 : h, as.w == 1 ? 0 : w);
    return y;
}

/// Gradient of broadcast_mul with respect to a: sum of gy*x over broadcast axes.
template <class T>
Tensor4<T> broadcast_mul_grad_a(const Tensor4<T>& x, const Tensor4<T>& gy, const Shape& as) {
    const Shape& s = x.shape();
    Tensor4<T> ga(as);
    std::size_t i = 0;
    for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t c = 0; c < s.c; ++c)
            for (std::size_t h = 0; h < s.h; ++h)
                for (std::size_t w = 0; w < s.w; ++w, ++i)
                    ga.at(as.n == 1 ? 0 : n, as.c == 1 ? 0 : c, as.h == 1 ? 0 : h, as.w == 1 ? 0 : w) += gy[i] * x[i];
    return ga;
}

} // namespace emcad
