#pragma once

// Central finite-difference check of reverse-mode gradients. The output is
// reduced to a scalar with a fixed random projection r, so one backward pass
// with seed r gives every d<r, f>/d(theta) at once.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "emcad/autograd.hpp"

namespace emcad {

struct GradcheckOptions {
    double tolerance = 1e-4;
    std::size_t max_coords_per_tensor = 0; // 0 checks every element
    double step = 1e-4;                     // h = step * max(1, |theta|)
    /// Extra step multipliers tried, in order, for a coordinate whose error
    /// exceeds the tolerance at the base step. A smaller step cuts the
    /// truncation error where curvature is high (BN over few elements), a
    /// larger one reduces round-off on tiny gradients; the smallest error is
    /// kept. Empty = base step only.
    std::vector<double> retry_scales;
    /// Replay the base pass's ReLU regions and max-pool winners in the
    /// perturbed passes (see PiecewiseTape).
    bool freeze_piecewise = true;
    std::uint64_t seed = 0x5eed;
};

struct GradcheckEntry {
    std::string name;
    std::size_t checked = 0;
    std::size_t retried = 0;
    double max_rel_error = 0;
    std::size_t worst_index = 0;
    double analytic = 0;
    double numeric = 0;
};

struct GradcheckReport {
    std::vector<GradcheckEntry> entries;
    double max_rel_error = 0;
    double tolerance = 0;
    bool passed() const { return max_rel_error < tolerance; }
};

inline double relative_error(double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

using NamedVars = std::vector<std::pair<std::string, Var<double>>>;

/// forward() must rebuild the graph from the current leaf values on every
/// call. Each leaf in wrt is perturbed in place and restored bit-exactly.
template <class Fn>
GradcheckReport gradcheck(Fn&& forward, NamedVars wrt, const GradcheckOptions& opt = {}) {
    for (auto& [name, v] : wrt) v.zero_grad();
    PiecewiseTape tape;
    auto run = [&](PiecewiseTape::State state) {
        if (!opt.freeze_piecewise) return forward();
        PiecewiseTape::Scope scope(tape, state);
        return forward();
    };
    Var<double> y = run(PiecewiseTape::State::record);
    if (!y.value().all_finite()) throw NumericError("gradcheck: non-finite forward output");

    Prng prng(opt.seed);
    const Tensor4<double> r = Tensor4<double>::randn(y.shape(), prng, 1.0);
    backward(y, &r);

    auto project = [&](const Var<double>& out) {
        if (!out.value().all_finite()) throw NumericError("gradcheck: non-finite forward output");
        double s = 0;
        for (std::size_t i = 0; i < r.numel(); ++i) s += r[i] * out.value()[i];
        return s;
    };

    GradcheckReport report;
    report.tolerance = opt.tolerance;
    for (auto& [name, v] : wrt) {
        const Tensor4<double> analytic = v.grad();
        if (!analytic.all_finite()) throw NumericError("gradcheck: non-finite gradient for " + name);
        std::vector<std::size_t> coords(v.value().numel());
        for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
        if (opt.max_coords_per_tensor && coords.size() > opt.max_coords_per_tensor) {
            for (std::size_t i = 0; i < opt.max_coords_per_tensor; ++i)
                std::swap(coords[i], coords[i + prng.below(coords.size() - i)]);
            coords.resize(opt.max_coords_per_tensor);
            std::sort(coords.begin(), coords.end());
        }
        GradcheckEntry e;
        e.name = name;
        for (std::size_t i : coords) {
            double& theta = v.mutable_value()[i];
            const double orig = theta;
            auto central = [&](double step) {
                const double h = step * std::max(1.0, std::abs(orig));
                theta = orig + h;
                const double hi = theta;
                const double fp = project(run(PiecewiseTape::State::replay));
                theta = orig - h;
                const double lo = theta;
                const double fm = project(run(PiecewiseTape::State::replay));
                theta = orig;
                return (fp - fm) / (hi - lo);
            };
            double numeric = central(opt.step);
            double err = relative_error(analytic[i], numeric);
            if (err >= opt.tolerance && !opt.retry_scales.empty()) {
                ++e.retried;
                for (double scale : opt.retry_scales) {
                    const double n2 = central(opt.step * scale);
                    const double e2 = relative_error(analytic[i], n2);
                    if (e2 < err) {
                        err = e2;
                        numeric = n2;
                    }
                    if (err < opt.tolerance) break;
                }
            }
            ++e.checked;
            if (e.checked == 1 || err > e.max_rel_error) {
                e.max_rel_error = err;
                e.worst_index = i;
                e.analytic = analytic[i];
                e.numeric = numeric;
            }
        }
        report.max_rel_error = std::max(report.max_rel_error, e.max_rel_error);
        report.entries.push_back(std::move(e));
    }
    return report;
}

} // namespace emcad
