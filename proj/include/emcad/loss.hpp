#pragma once

// Segmentation losses and the combinatorial multi-head aggregation:
// every non-empty subset of the head predictions is averaged (in logit
// space) and scored with w_ce * CE + w_dice * Dice; the subset losses are
// summed in a fixed enumeration order.

#include <cmath>
#include <string>
#include <vector>

#include "emcad/autograd.hpp"

namespace emcad {

struct LossConfig {
    double w_ce = 1.0;
    double w_dice = 1.0;
    double smooth = 1.0;

    void validate() const {
        if (w_ce < 0 || w_dice < 0) throw ValidationError("loss weights must be non-negative");
        if (w_ce == 0 && w_dice == 0) throw ValidationError("loss weights must not both be zero");
        if (smooth < 0) throw ValidationError("dice smoothing must be non-negative");
    }
};

struct SubsetLoss {
    unsigned mask = 0; // bit i set <=> head p_{i+1} participates
    double value = 0;

    std::string label() const {
        std::string s;
        for (unsigned i = 0; i < 32; ++i)
            if (mask & (1u << i)) s += (s.empty() ? "p" : "+p") + std::to_string(i + 1);
        return s;
    }
};

struct LossReport {
    std::vector<SubsetLoss> per_subset;
    double total = 0;
};

/// Binary targets must be exactly 0 or 1; class maps must hold integers in
/// [0, num_classes).
template <class T>
void validate_target(const Tensor4<T>& target, std::size_t num_classes) {
    if (target.shape().c != 1) throw ShapeError("target must have one channel, got " + target.shape().str());
    for (T v : target.data()) {
        if (num_classes == 1) {
            if (v != T(0) && v != T(1)) throw ValidationError("binary target values must be 0 or 1");
        } else if (v < 0 || v != std::floor(v) || v >= static_cast<T>(num_classes)) {
            throw ValidationError("class index outside [0, " + std::to_string(num_classes) + ")");
        }
    }
}

namespace detail {
template <class T>
Var<T> to_target_resolution(const Var<T>& logits, const Tensor4<T>& target) {
    const Shape& ls = logits.shape();
    const Shape& ts = target.shape();
    if (ls.n != ts.n) throw ShapeError("logits batch " + ls.str() + " vs target " + ts.str());
    return ag::upsample_bilinear(logits, ts.h, ts.w);
}

inline double softplus(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }
} // namespace detail

/// Mean binary cross-entropy with logits (one channel) or softmax
/// cross-entropy over channels (class-index target). Logits are upsampled to
/// the target resolution first.
template <class T>
Var<T> ce_loss(const Var<T>& logits_in, const Tensor4<T>& target) {
    const std::size_t classes = logits_in.shape().c;
    Var<T> logits = detail::to_target_resolution(logits_in, target);
    const Tensor4<T>& z = logits.value();
    const Shape& s = z.shape();
    const std::size_t pixels = s.n * s.spatial();
    Tensor4<T> grad(s);
    double loss = 0;
    if (classes == 1) {
        for (std::size_t i = 0; i < z.numel(); ++i) {
            const double zi = z[i], ti = target[i];
            loss += detail::softplus(zi) - zi * ti;
            grad[i] = static_cast<T>((sigmoid_scalar(zi) - ti) / static_cast<double>(pixels));
        }
    } else {
        for (std::size_t n = 0; n < s.n; ++n)
            for (std::size_t p = 0; p < s.spatial(); ++p) {
                double mx = -INFINITY;
                for (std::size_t c = 0; c < classes; ++c) mx = std::max(mx, static_cast<double>(z.plane(n, c)[p]));
                double sum = 0;
                for (std::size_t c = 0; c < classes; ++c) sum += std::exp(z.plane(n, c)[p] - mx);
                const double lse = mx + std::log(sum);
                const auto cls = static_cast<std::size_t>(target.plane(n, 0)[p]);
                if (cls >= classes) throw ValidationError("class index outside [0, num_classes)");
                loss += lse - z.plane(n, cls)[p];
                for (std::size_t c = 0; c < classes; ++c) {
                    const double prob = std::exp(z.plane(n, c)[p] - lse);
                    grad.plane(n, c)[p] = static_cast<T>((prob - (c == cls ? 1.0 : 0.0)) / static_cast<double>(pixels));
                }
            }
    }
    loss /= static_cast<double>(pixels);
    return make_op<T>(Tensor4<T>::full({1, 1, 1, 1}, static_cast<T>(loss)), {logits},
                      [grad = std::move(grad)](Node<T>& n) {
                          Tensor4<T> g = grad;
                          const T seed = n.grad[0];
                          for (auto& v : g.data()) v *= seed;
                          n.inputs[0]->accumulate(std::move(g));
                      });
}

/// Soft Dice loss 1 - (2*sum(p*t) + s) / (sum(p) + sum(t) + s), sums over the
/// whole batch. p = sigmoid(logits) for one channel; for several classes the
/// softmax Dice is averaged over classes.
template <class T>
Var<T> dice_loss(const Var<T>& logits_in, const Tensor4<T>& target, double smooth) {
    const std::size_t classes = logits_in.shape().c;
    Var<T> logits = detail::to_target_resolution(logits_in, target);
    const Tensor4<T>& z = logits.value();
    const Shape& s = z.shape();
    Tensor4<T> prob = activation_forward(z, classes == 1 ? Activation::sigmoid : Activation::softmax_channel);
    Tensor4<T> dprob(s); // d loss / d prob
    double loss = 0;
    for (std::size_t c = 0; c < classes; ++c) {
        auto t_of = [&](std::size_t n, std::size_t p) -> double {
            const double tv = target.plane(n, 0)[p];
            return classes == 1 ? tv : (static_cast<std::size_t>(tv) == c ? 1.0 : 0.0);
        };
        double inter = 0, psum = 0, tsum = 0;
        for (std::size_t n = 0; n < s.n; ++n)
            for (std::size_t p = 0; p < s.spatial(); ++p) {
                const double pv = prob.plane(n, c)[p], tv = t_of(n, p);
                inter += pv * tv;
                psum += pv;
                tsum += tv;
            }
        const double num = 2 * inter + smooth, den = psum + tsum + smooth;
        loss += 1.0 - num / den;
        for (std::size_t n = 0; n < s.n; ++n)
            for (std::size_t p = 0; p < s.spatial(); ++p)
                dprob.plane(n, c)[p] =
                    static_cast<T>(-(2 * t_of(n, p) * den - num) / (den * den) / static_cast<double>(classes));
    }
    loss /= static_cast<double>(classes);
    const Activation kind = classes == 1 ? Activation::sigmoid : Activation::softmax_channel;
    return make_op<T>(Tensor4<T>::full({1, 1, 1, 1}, static_cast<T>(loss)), {logits},
                      [prob = std::move(prob), dprob = std::move(dprob), kind](Node<T>& n) {
                          Tensor4<T> g = activation_backward(n.inputs[0]->value, prob, dprob, kind);
                          const T seed = n.grad[0];
                          for (auto& v : g.data()) v *= seed;
                          n.inputs[0]->accumulate(std::move(g));
                      });
}

/// w_ce * CE + w_dice * Dice on one logit map. Zero-weight terms are skipped.
template <class T>
Var<T> segmentation_loss(const Var<T>& logits, const Tensor4<T>& target, const LossConfig& cfg) {
    std::vector<Var<T>> terms;
    if (cfg.w_ce > 0) terms.push_back(ag::scale(ce_loss(logits, target), static_cast<T>(cfg.w_ce)));
    if (cfg.w_dice > 0) terms.push_back(ag::scale(dice_loss(logits, target, cfg.smooth), static_cast<T>(cfg.w_dice)));
    return terms.size() == 1 ? terms[0] : ag::add(terms[0], terms[1]);
}

template <class T>
struct MutationLoss {
    Var<T> total;
    LossReport report;
};

/// Sums the segmentation loss over all 2^k - 1 non-empty subsets of the k
/// heads, enumerated as binary masks 1 .. 2^k - 1 (bit i = head i+1). Each
/// subset's prediction is the mean of its members' logits at target
/// resolution.
template <class T>
MutationLoss<T> mutation_loss(const std::vector<Var<T>>& heads, const Tensor4<T>& target, const LossConfig& cfg) {
    cfg.validate();
    if (heads.empty() || heads.size() > 16) throw ValidationError("mutation_loss needs between 1 and 16 heads");
    const std::size_t classes = heads[0].shape().c;
    for (const auto& h : heads)
        if (h.shape().c != classes) throw ShapeError("all heads must share num_classes");
    validate_target(target, classes);

    std::vector<Var<T>> up;
    up.reserve(heads.size());
    for (const auto& h : heads) up.push_back(detail::to_target_resolution(h, target));

    MutationLoss<T> out;
    std::vector<Var<T>> subset_losses;
    const unsigned count = (1u << heads.size()) - 1;
    for (unsigned mask = 1; mask <= count; ++mask) {
        std::vector<Var<T>> members;
        for (std::size_t i = 0; i < heads.size(); ++i)
            if (mask & (1u << i)) members.push_back(up[i]);
        Var<T> combined = members.size() == 1 ? members[0] : ag::mean_of(members);
        Var<T> l = segmentation_loss(combined, target, cfg);
        out.report.per_subset.push_back({mask, static_cast<double>(l.item())});
        subset_losses.push_back(std::move(l));
    }
    out.total = ag::sum_scalars(subset_losses);
    out.report.total = static_cast<double>(out.total.item());
    return out;
}

template <class T, std::size_t N>
MutationLoss<T> mutation_loss(const std::array<Var<T>, N>& heads, const Tensor4<T>& target, const LossConfig& cfg) {
    return mutation_loss(std::vector<Var<T>>(heads.begin(), heads.end()), target, cfg);
}

} // namespace emcad
