#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "emcad/errors.hpp"

namespace emcad {

/// Extents of a rank-4 NCHW tensor.
struct Shape {
    std::size_t n = 1;
    std::size_t c = 1;
    std::size_t h = 1;
    std::size_t w = 1;

    constexpr std::size_t spatial() const { return h * w; }
    constexpr std::size_t numel() const { return n * c * h * w; }
    constexpr std::array<std::size_t, 4> dims() const { return {n, c, h, w}; }
    friend constexpr bool operator==(const Shape&, const Shape&) = default;

    std::string str() const {
        std::ostringstream os;
        os << '(' << n << ',' << c << ',' << h << ',' << w << ')';
        return os.str();
    }
};

/// Checked element count; throws on zero dims or size_t overflow.
inline std::size_t checked_numel(const Shape& s) {
    std::size_t total = 1;
    for (std::size_t d : s.dims()) {
        if (d == 0) throw ShapeError("tensor dimension must be >= 1, got " + s.str());
        if (total > std::numeric_limits<std::size_t>::max() / d)
            throw ShapeError("tensor size overflows addressable memory: " + s.str());
        total *= d;
    }
    return total;
}

/// SplitMix64 (Steele, Lea & Flood, 2014). The integer stream is identical
/// on every platform; normals use Box-Muller on top of it.
class Prng {
public:
    explicit Prng(std::uint64_t seed = 0) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    /// Uniform double in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, bound); bound must be > 0.
    std::uint64_t below(std::uint64_t bound) {
        // Lemire-style rejection keeps the result unbiased.
        const std::uint64_t threshold = (0 - bound) % bound;
        for (;;) {
            std::uint64_t r = next_u64();
            if (r >= threshold) return r % bound;
        }
    }

    /// Standard normal via Box-Muller; the second variate of each pair is cached.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = 1.0 - uniform(); // (0, 1]
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    struct State {
        std::uint64_t counter;
        bool has_spare;
        double spare;
    };
    State state() const { return {state_, has_spare_, spare_}; }
    void restore(const State& s) {
        state_ = s.counter;
        has_spare_ = s.has_spare;
        spare_ = s.spare;
    }

private:
    std::uint64_t state_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

/// Dense rank-4 array in row-major NCHW order.
template <class T>
class Tensor4 {
public:
    using value_type = T;

    Tensor4() = default;
    explicit Tensor4(const Shape& shape, T fill = T(0)) : shape_(shape), data_(checked_numel(shape), fill) {}
    Tensor4(const Shape& shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
        if (data_.size() != checked_numel(shape_))
            throw ShapeError("data length " + std::to_string(data_.size()) + " does not match shape " +
                             shape_.str());
    }

    static Tensor4 zeros(const Shape& s) { return Tensor4(s); }
    static Tensor4 ones(const Shape& s) { return Tensor4(s, T(1)); }
    static Tensor4 full(const Shape& s, T v) { return Tensor4(s, v); }

    static Tensor4 randn(const Shape& s, Prng& prng, double stddev) {
        if (!(stddev > 0.0)) throw ValidationError("randn: stddev must be > 0");
        Tensor4 t(s);
        for (auto& v : t.data_) v = static_cast<T>(prng.normal() * stddev);
        return t;
    }

    const Shape& shape() const { return shape_; }
    std::size_t numel() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    std::span<T> data() { return data_; }
    std::span<const T> data() const { return data_; }
    T* ptr() { return data_.data(); }
    const T* ptr() const { return data_.data(); }
    std::vector<T>& storage() { return data_; }
    const std::vector<T>& storage() const { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    std::size_t offset(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
        return ((n * shape_.c + c) * shape_.h + h) * shape_.w + w;
    }
    std::array<std::size_t, 4> index(std::size_t off) const {
        std::array<std::size_t, 4> idx{};
        idx[3] = off % shape_.w;
        off /= shape_.w;
        idx[2] = off % shape_.h;
        off /= shape_.h;
        idx[1] = off % shape_.c;
        idx[0] = off / shape_.c;
        return idx;
    }

    T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) { return data_[offset(n, c, h, w)]; }
    const T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
        return data_[offset(n, c, h, w)];
    }

    /// Pointer to the (h, w) plane of sample n, channel c.
    T* plane(std::size_t n, std::size_t c) { return data_.data() + (n * shape_.c + c) * shape_.spatial(); }
    const T* plane(std::size_t n, std::size_t c) const {
        return data_.data() + (n * shape_.c + c) * shape_.spatial();
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
    }

    template <class U>
    Tensor4<U> cast() const {
        Tensor4<U> out(shape_);
        for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
        return out;
    }

    Tensor4& operator+=(const Tensor4& o) {
        require_same(o, "+=");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
        return *this;
    }

    void require_same(const Tensor4& o, const char* what) const {
        if (shape_ != o.shape_)
            throw ShapeError(std::string(what) + ": shape mismatch " + shape_.str() + " vs " + o.shape_.str());
    }

private:
    Shape shape_{};
    std::vector<T> data_;
};

#ifndef NDEBUG
#define EMCAD_DEBUG_FINITE(t, what)                                                     \
    do {                                                                                \
        if (!(t).all_finite()) throw ::emcad::NumericError(std::string(what) + ": non-finite output"); \
    } while (0)
#else
#define EMCAD_DEBUG_FINITE(t, what) \
    do {                            \
    } while (0)
#endif

template <class T>
Tensor4<T> zeros(const Shape& s) {
    return Tensor4<T>::zeros(s);
}

template <class T>
Tensor4<T> randn(const Shape& s, Prng& prng, double stddev) {
    return Tensor4<T>::randn(s, prng, stddev);
}

enum class BinaryOp { add, sub, mul };

template <class T>
Tensor4<T> elementwise(const Tensor4<T>& a, const Tensor4<T>& b, BinaryOp op) {
    a.require_same(b, "elementwise");
    Tensor4<T> out(a.shape());
    const std::size_t n = a.numel();
    switch (op) {
    case BinaryOp::add:
        for (std::size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
        break;
    case BinaryOp::sub:
        for (std::size_t i = 0; i < n; ++i) out[i] = a[i] - b[i];
        break;
    case BinaryOp::mul:
        for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
        break;
    }
    EMCAD_DEBUG_FINITE(out, "elementwise");
    return out;
}

/// Bit set over the four tensor axes.
struct Axes {
    static constexpr unsigned N = 1, C = 2, H = 4, W = 8, HW = H | W, All = N | C | H | W;
    unsigned bits = 0;
    constexpr Axes(unsigned b = 0) : bits(b) {}
    constexpr bool has(unsigned a) const { return (bits & a) != 0; }
};

enum class ReduceOp { sum, mean, max };

/// Reduces the selected axes to extent 1. Elements are accumulated in storage
/// order, so the result is bitwise reproducible.
template <class T>
Tensor4<T> reduce(const Tensor4<T>& a, Axes axes, ReduceOp op) {
    const Shape& s = a.shape();
    const Shape os{axes.has(Axes::N) ? 1 : s.n, axes.has(Axes::C) ? 1 : s.c, axes.has(Axes::H) ? 1 : s.h,
                   axes.has(Axes::W) ? 1 : s.w};
    if (os == s) return a;
    Tensor4<T> out(os, op == ReduceOp::max ? -std::numeric_limits<T>::infinity() : T(0));
    std::size_t i = 0;
    for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t c = 0; c < s.c; ++c)
            for (std::size_t h = 0; h < s.h; ++h)
                for (std::size_t w = 0; w < s.w; ++w, ++i) {
                    T& dst = out.at(os.n == 1 ? 0 : n, os.c == 1 ? 0 : c, os.h == 1 ? 0 : h, os.w == 1 ? 0 : w);
                    if (op == ReduceOp::max)
                        dst = std::max(dst, a[i]);
                    else
                        dst += a[i];
                }
    if (op == ReduceOp::mean) {
        const T count = static_cast<T>(s.numel() / os.numel());
        for (auto& v : out.data()) v /= count;
    }
    return out;
}

} // namespace emcad
