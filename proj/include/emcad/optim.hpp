#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "emcad/layers.hpp"

namespace emcad {

struct AdamWConfig {
    double lr = 1e-4;
    double weight_decay = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    void validate() const {
        if (!(lr > 0)) throw ValidationError("lr must be positive");
        if (weight_decay < 0) throw ValidationError("weight_decay must be non-negative");
        if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ValidationError("betas must lie in [0, 1)");
        if (!(eps > 0)) throw ValidationError("eps must be positive");
    }
};

/// Decoupled weight decay Adam:
///   theta <- theta * (1 - lr*wd) - lr * m_hat / (sqrt(v_hat) + eps)
/// Moments are kept in T, the update arithmetic in double.
template <class T>
class AdamW {
public:
    struct Slot {
        std::string name;
        Var<T> param;
        Tensor4<T> m;
        Tensor4<T> v;
    };

    AdamW() = default;
    AdamW(NamedParameters<T> params, AdamWConfig cfg) : cfg_(cfg) {
        cfg.validate();
        for (auto& [name, p] : params) slots_.push_back({name, p, Tensor4<T>(p.shape()), Tensor4<T>(p.shape())});
    }

    void step() {
        for (auto& s : slots_)
            if (!s.param.grad().all_finite()) throw NumericError("non-finite gradient in parameter " + s.name);
        ++step_;
        const double t = static_cast<double>(step_);
        const double bc1 = 1.0 - std::pow(cfg_.beta1, t);
        const double bc2 = 1.0 - std::pow(cfg_.beta2, t);
        const double decay = 1.0 - cfg_.lr * cfg_.weight_decay;
        for (auto& s : slots_) {
            Tensor4<T>& theta = s.param.mutable_value();
            const Tensor4<T>& g = s.param.grad();
            for (std::size_t i = 0; i < theta.numel(); ++i) {
                const double gi = g[i];
                const double m = cfg_.beta1 * static_cast<double>(s.m[i]) + (1 - cfg_.beta1) * gi;
                const double v = cfg_.beta2 * static_cast<double>(s.v[i]) + (1 - cfg_.beta2) * gi * gi;
                s.m[i] = static_cast<T>(m);
                s.v[i] = static_cast<T>(v);
                const double upd = (m / bc1) / (std::sqrt(v / bc2) + cfg_.eps);
                theta[i] = static_cast<T>(static_cast<double>(theta[i]) * decay - cfg_.lr * upd);
            }
        }
    }

    void zero_grad() {
        for (auto& s : slots_) s.param.zero_grad();
    }

    std::uint64_t steps() const { return step_; }
    void set_steps(std::uint64_t s) { step_ = s; }
    const AdamWConfig& config() const { return cfg_; }
    std::vector<Slot>& slots() { return slots_; }
    const std::vector<Slot>& slots() const { return slots_; }

private:
    AdamWConfig cfg_;
    std::vector<Slot> slots_;
    std::uint64_t step_ = 0;
};

} // namespace emcad
