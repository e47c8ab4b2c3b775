#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "emcad/autograd.hpp"

namespace emcad {

template <class T>
class BatchNorm2d;

/// Walks a module tree. Names are dotted paths ("decoder.mscam4.cab.fc1.weight").
template <class T>
struct ModuleVisitor {
    virtual ~ModuleVisitor() = default;
    virtual void parameter(const std::string& /*name*/, Var<T>& /*p*/) {}
    virtual void buffer(const std::string& /*name*/, Tensor4<T>& /*b*/) {}
    virtual void batchnorm(const std::string& /*name*/, BatchNorm2d<T>& /*bn*/) {}
};

inline std::string join_name(const std::string& prefix, const std::string& name) {
    return prefix.empty() ? name : prefix + "." + name;
}

/// Accumulates MACs and non-MAC arithmetic per top-level block.
class CostTrace {
public:
    struct Entry {
        std::string block;
        std::uint64_t macs = 0;
        std::uint64_t other_ops = 0;
    };

    void begin_block(const std::string& name) {
        current_ = name;
        for (std::size_t i = 0; i < entries_.size(); ++i)
            if (entries_[i].block == name) {
                index_ = i;
                return;
            }
        entries_.push_back({name, 0, 0});
        index_ = entries_.size() - 1;
    }

    void add_macs(std::uint64_t m) { current().macs += m; }
    void add_ops(std::uint64_t ops) { current().other_ops += ops; }

    const std::vector<Entry>& entries() const { return entries_; }

private:
    Entry& current() {
        if (entries_.empty()) begin_block("(unnamed)");
        return entries_[index_];
    }
    std::vector<Entry> entries_;
    std::string current_;
    std::size_t index_ = 0;
};

// Per-element operation counts used by the cost tracer.
inline constexpr std::uint64_t kBatchNormOpsPerElement = 2;
inline constexpr std::uint64_t kActivationOpsPerElement = 1;
inline constexpr std::uint64_t kElementwiseOpsPerElement = 1;

template <class T>
class Conv2d {
public:
    Conv2d() = default;

    /// Weights ~ N(0, init_std^2); bias (if any) starts at bias_init.
    Conv2d(std::size_t in, std::size_t out, std::size_t k, ConvGeometry geom, bool with_bias, Prng& prng,
           double init_std, double bias_init = 0.0)
        : geom_(geom), in_(in), out_(out), k_(k) {
        if (geom.groups == 0 || in % geom.groups || out % geom.groups)
            throw ShapeError("Conv2d: channels " + std::to_string(in) + "->" + std::to_string(out) +
                             " not divisible by groups " + std::to_string(geom.groups));
        weight_ = Var<T>(Tensor4<T>::randn({out, in / geom.groups, k, k}, prng, init_std), true);
        if (with_bias) bias_ = Var<T>(Tensor4<T>::full({1, out, 1, 1}, static_cast<T>(bias_init)), true);
    }

    std::size_t fan_in() const { return in_ / geom_.groups * k_ * k_; }

    Var<T> forward(const Var<T>& x) const {
        return ag::conv2d(x, weight_, bias_.defined() ? &bias_ : nullptr, geom_);
    }

    Shape trace(const Shape& in, CostTrace& t) const {
        const Shape out = conv2d_output_shape<T>(in, weight_.shape(), geom_);
        t.add_macs(static_cast<std::uint64_t>(out.numel()) * (in_ / geom_.groups) * k_ * k_);
        return out;
    }

    void visit(const std::string& prefix, ModuleVisitor<T>& v) {
        v.parameter(join_name(prefix, "weight"), weight_);
        if (bias_.defined()) v.parameter(join_name(prefix, "bias"), bias_);
    }

    Var<T>& weight() { return weight_; }
    Var<T>& bias() { return bias_; }
    const ConvGeometry& geometry() const { return geom_; }
    std::size_t in_channels() const { return in_; }
    std::size_t out_channels() const { return out_; }

private:
    ConvGeometry geom_{};
    std::size_t in_ = 0, out_ = 0, k_ = 1;
    Var<T> weight_;
    Var<T> bias_;
};

template <class T>
class BatchNorm2d {
public:
    BatchNorm2d() = default;
    explicit BatchNorm2d(std::size_t c)
        : gamma_(Tensor4<T>::ones({1, c, 1, 1}), true), beta_(Tensor4<T>({1, c, 1, 1}), true), state_(c) {}

    Var<T> forward(const Var<T>& x) { return ag::batchnorm(x, gamma_, beta_, state_); }

    Shape trace(const Shape& in, CostTrace& t) const {
        t.add_ops(kBatchNormOpsPerElement * in.numel());
        return in;
    }

    void visit(const std::string& prefix, ModuleVisitor<T>& v) {
        v.parameter(join_name(prefix, "gamma"), gamma_);
        v.parameter(join_name(prefix, "beta"), beta_);
        v.buffer(join_name(prefix, "running_mean"), state_.running_mean);
        v.buffer(join_name(prefix, "running_var"), state_.running_var);
        v.batchnorm(prefix, *this);
    }

    void set_mode(Mode m) { state_.mode = m; }
    Mode mode() const { return state_.mode; }
    Var<T>& gamma() { return gamma_; }
    Var<T>& beta() { return beta_; }
    BatchNormState<T>& state() { return state_; }

private:
    Var<T> gamma_;
    Var<T> beta_;
    BatchNormState<T> state_;
};

// ---------------------------------------------------------------------------
// Module-tree helpers

template <class T>
using NamedParameters = std::vector<std::pair<std::string, Var<T>>>;

template <class T, class M>
NamedParameters<T> named_parameters(M& module, const std::string& prefix = "") {
    struct Collector : ModuleVisitor<T> {
        NamedParameters<T> out;
        void parameter(const std::string& name, Var<T>& p) override { out.emplace_back(name, p); }
    } c;
    module.visit(prefix, c);
    return std::move(c.out);
}

/// Parameters and running statistics, in visit order.
template <class T, class M>
std::vector<std::pair<std::string, Tensor4<T>*>> named_state(M& module, const std::string& prefix = "") {
    struct Collector : ModuleVisitor<T> {
        std::vector<std::pair<std::string, Tensor4<T>*>> out;
        void parameter(const std::string& name, Var<T>& p) override { out.emplace_back(name, &p.mutable_value()); }
        void buffer(const std::string& name, Tensor4<T>& b) override { out.emplace_back(name, &b); }
    } c;
    module.visit(prefix, c);
    return std::move(c.out);
}

template <class T, class M>
void set_mode(M& module, Mode mode) {
    struct Setter : ModuleVisitor<T> {
        Mode mode;
        void batchnorm(const std::string&, BatchNorm2d<T>& bn) override { bn.set_mode(mode); }
    } s;
    s.mode = mode;
    module.visit("", s);
}

template <class T, class M>
void zero_grad(M& module) {
    for (auto& [name, p] : named_parameters<T>(module)) p.zero_grad();
}

template <class T, class M>
std::size_t parameter_count(M& module) {
    std::size_t total = 0;
    for (auto& [name, p] : named_parameters<T>(module)) total += p.value().numel();
    return total;
}

} // namespace emcad
