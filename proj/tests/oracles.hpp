#pragma once

#include <vector>

#include "emcad/tensor.hpp"

namespace test_oracles {

using emcad::Tensor4;

// Direct per-output-element correlation, written independently of the
// library's loop structure.
inline Tensor4<double> brute_conv(const Tensor4<double>& x, const Tensor4<double>& w, const Tensor4<double>* b,
                                  std::size_t stride, std::size_t pad, std::size_t groups) {
    const auto xs = x.shape(), ws = w.shape();
    const std::size_t k = ws.h;
    const std::size_t oh = (xs.h + 2 * pad - k) / stride + 1, ow = (xs.w + 2 * pad - k) / stride + 1;
    const std::size_t cin_g = xs.c / groups, cout_g = ws.n / groups;
    Tensor4<double> y({xs.n, ws.n, oh, ow});
    for (std::size_t n = 0; n < xs.n; ++n)
        for (std::size_t co = 0; co < ws.n; ++co) {
            const std::size_t g = co / cout_g;
            for (std::size_t i = 0; i < oh; ++i)
                for (std::size_t j = 0; j < ow; ++j) {
                    double acc = b ? (*b)[co] : 0.0;
                    for (std::size_t ci = 0; ci < cin_g; ++ci)
                        for (std::size_t u = 0; u < k; ++u)
                            for (std::size_t v = 0; v < k; ++v) {
                                const long r = static_cast<long>(i * stride + u) - static_cast<long>(pad);
                                const long c = static_cast<long>(j * stride + v) - static_cast<long>(pad);
                                if (r < 0 || c < 0 || r >= static_cast<long>(xs.h) || c >= static_cast<long>(xs.w))
                                    continue;
                                acc += x.at(n, g * cin_g + ci, static_cast<std::size_t>(r), static_cast<std::size_t>(c)) *
                                       w.at(co, ci, u, v);
                            }
                    y.at(n, co, i, j) = acc;
                }
        }
    return y;
}

/// |A n B| counted pixel by pixel, then 2|A n B| / (|A| + |B|), 1 for two
/// empty masks.
inline double counted_dice(const std::vector<float>& a, const std::vector<float>& b) {
    std::size_t na = 0, nb = 0, both = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        na += a[i] == 1.f;
        nb += b[i] == 1.f;
        both += a[i] == 1.f && b[i] == 1.f;
    }
    return na + nb == 0 ? 1.0 : 2.0 * static_cast<double>(both) / static_cast<double>(na + nb);
}

} // namespace test_oracles
