#pragma once

// Named gradient-check cases grouped into three scopes:
//   ops    - every differentiable primitive and loss
//   blocks - each decoder block and the assembled decoder
//   full   - tiny encoder + decoder + MUTATION loss end to end
// Blocks are built with plain He init (bn_conv_gain = 1) and randomized BN
// affine parameters, so no gradient is structurally zero.

#include <chrono>
#include <functional>
#include <string>
#include <vector>

#include "emcad/encoder.hpp"
#include "emcad/gradcheck.hpp"
#include "emcad/loss.hpp"

namespace emcad {

struct GradcheckCase {
    std::string scope;
    std::string name;
    std::function<GradcheckReport(const GradcheckOptions&)> run;
};

struct GradcheckResult {
    std::string scope;
    std::string name;
    GradcheckReport report;
    double seconds = 0;
};

namespace detail {

inline Var<double> leaf(const Shape& s, Prng& prng, double stddev = 1.0) {
    return Var<double>(Tensor4<double>::randn(s, prng, stddev), true);
}

inline Tensor4<double> random_mask(const Shape& s, Prng& prng) {
    Tensor4<double> t(s);
    for (auto& v : t.data()) v = prng.uniform() < 0.3 ? 1.0 : 0.0;
    return t;
}

template <class M>
NamedVars with_params(M& module, const std::string& prefix, NamedVars inputs) {
    for (auto& p : named_parameters<double>(module, prefix)) inputs.push_back(std::move(p));
    return inputs;
}

/// gamma ~ U(0.5, 1.5), beta ~ N(0, 0.5^2). With gamma = 1, beta = 0 a
/// ReLU6 -> BN path is scale invariant and some gradients vanish.
template <class M>
void jitter_affine(M& module, Prng& prng) {
    struct Jitter : ModuleVisitor<double> {
        Prng* prng = nullptr;
        void batchnorm(const std::string&, BatchNorm2d<double>& bn) override {
            for (auto& g : bn.gamma().mutable_value().data()) g = prng->uniform(0.5, 1.5);
            for (auto& b : bn.beta().mutable_value().data()) b = 0.5 * prng->normal();
        }
    } j;
    j.prng = &prng;
    module.visit("", j);
}

/// Large cases check a random subset of coordinates in every tensor unless
/// the caller already asked for a specific sample size.
inline constexpr std::size_t kSampledCoords = 12;
inline GradcheckOptions sampled(GradcheckOptions o, std::size_t n) {
    if (!o.max_coords_per_tensor) o.max_coords_per_tensor = n;
    return o;
}

/// Deep stacks with saturated gates have gradients near 1e-8 where round-off
/// dominates at the base step; such coordinates are retried at 10h and 100h.
inline GradcheckOptions deep(GradcheckOptions o) {
    if (o.retry_scales.empty()) o.retry_scales = {1e-1, 1e-2, 1e1, 1e2};
    return sampled(std::move(o), kSampledCoords);
}

inline InitConfig plain_init() {
    InitConfig init;
    init.bn_conv_gain = 1.0;
    return init;
}

inline std::vector<GradcheckCase> op_cases() {
    std::vector<GradcheckCase> cases;
    auto add = [&](std::string name, std::function<GradcheckReport(const GradcheckOptions&)> fn) {
        cases.push_back({"ops", std::move(name), std::move(fn)});
    };

    auto conv_case = [&](std::string name, Shape xs, std::size_t cout, std::size_t k, ConvGeometry g, bool bias) {
        add(std::move(name), [=](const GradcheckOptions& o) {
            Prng prng(11);
            Var<double> x = leaf(xs, prng);
            Var<double> w = leaf({cout, xs.c / g.groups, k, k}, prng);
            Var<double> b = leaf({1, cout, 1, 1}, prng);
            NamedVars wrt{{"x", x}, {"weight", w}};
            if (bias) wrt.push_back({"bias", b});
            return gradcheck([&] { return ag::conv2d(x, w, bias ? &b : nullptr, g); }, wrt, o);
        });
    };
    conv_case("conv2d 3x3", {1, 2, 4, 4}, 2, 3, {1, 1, 1}, true);
    conv_case("conv2d 3x3 random 1x2x6x6", {1, 2, 6, 6}, 3, 3, {1, 1, 1}, true);
    conv_case("conv2d depthwise 3x3", {1, 3, 6, 6}, 3, 3, {1, 1, 3}, false);
    conv_case("conv2d grouped 3x3", {2, 4, 5, 5}, 6, 3, {1, 1, 2}, true);
    conv_case("conv2d 1x1", {2, 3, 4, 4}, 2, 1, {1, 0, 1}, true);
    conv_case("conv2d stride 2", {1, 2, 6, 6}, 2, 2, {2, 0, 1}, false);
    conv_case("conv2d 7x7", {1, 2, 6, 6}, 1, 7, {1, 3, 1}, true);

    for (Mode mode : {Mode::train, Mode::eval}) {
        add(mode == Mode::train ? "batchnorm train" : "batchnorm eval", [mode](const GradcheckOptions& o) {
            Prng prng(12);
            Var<double> x = leaf({2, 2, 6, 6}, prng);
            Var<double> gamma(Tensor4<double>::randn({1, 2, 1, 1}, prng, 1.0), true);
            Var<double> beta(Tensor4<double>::randn({1, 2, 1, 1}, prng, 1.0), true);
            BatchNormState<double> st(2);
            st.running_mean = Tensor4<double>::randn({1, 2, 1, 1}, prng, 0.5);
            st.running_var = Tensor4<double>::full({1, 2, 1, 1}, 1.7);
            st.mode = mode;
            return gradcheck([&] { return ag::batchnorm(x, gamma, beta, st); },
                             {{"x", x}, {"gamma", gamma}, {"beta", beta}}, o);
        });
    }

    const std::pair<const char*, Activation> acts[] = {{"relu", Activation::relu},
                                                        {"relu6", Activation::relu6},
                                                        {"sigmoid", Activation::sigmoid},
                                                        {"softmax_channel", Activation::softmax_channel}};
    for (const auto& [nm, kind] : acts) {
        const Activation k = kind;
        add(nm, [k](const GradcheckOptions& o) {
            Prng prng(13);
            Var<double> x = leaf({1, 2, 6, 6}, prng, k == Activation::relu6 ? 4.0 : 1.0);
            return gradcheck([&] { return ag::activation(x, k); }, {{"x", x}}, o);
        });
    }

    for (PoolKind kind : {PoolKind::avg, PoolKind::max}) {
        const std::string suffix = kind == PoolKind::avg ? "avg" : "max";
        add("pool_global " + suffix, [kind](const GradcheckOptions& o) {
            Prng prng(14);
            Var<double> x = leaf({1, 2, 6, 6}, prng);
            return gradcheck([&] { return ag::pool_global(x, kind); }, {{"x", x}}, o);
        });
        add("channel_pool " + suffix, [kind](const GradcheckOptions& o) {
            Prng prng(15);
            Var<double> x = leaf({1, 3, 6, 6}, prng);
            return gradcheck([&] { return ag::channel_pool(x, kind); }, {{"x", x}}, o);
        });
    }

    add("upsample_nearest2x", [](const GradcheckOptions& o) {
        Prng prng(16);
        Var<double> x = leaf({1, 2, 6, 6}, prng);
        return gradcheck([&] { return ag::upsample_nearest2x(x); }, {{"x", x}}, o);
    });
    add("upsample_bilinear", [](const GradcheckOptions& o) {
        Prng prng(17);
        Var<double> x = leaf({1, 2, 6, 6}, prng);
        return gradcheck([&] { return ag::upsample_bilinear(x, 11, 13); }, {{"x", x}}, o);
    });
    add("channel_shuffle", [](const GradcheckOptions& o) {
        Prng prng(18);
        Var<double> x = leaf({1, 6, 3, 3}, prng);
        return gradcheck([&] { return ag::channel_shuffle(x, 3); }, {{"x", x}}, o);
    });
    add("concat_channels", [](const GradcheckOptions& o) {
        Prng prng(19);
        Var<double> a = leaf({1, 2, 3, 3}, prng), b = leaf({1, 3, 3, 3}, prng);
        return gradcheck([&] { return ag::concat_channels(a, b); }, {{"a", a}, {"b", b}}, o);
    });
    add("gate channel", [](const GradcheckOptions& o) {
        Prng prng(20);
        Var<double> x = leaf({1, 2, 6, 6}, prng), a = leaf({1, 2, 1, 1}, prng);
        return gradcheck([&] { return ag::gate(x, a); }, {{"x", x}, {"a", a}}, o);
    });
    add("gate spatial", [](const GradcheckOptions& o) {
        Prng prng(21);
        Var<double> x = leaf({1, 2, 6, 6}, prng), a = leaf({1, 1, 6, 6}, prng);
        return gradcheck([&] { return ag::gate(x, a); }, {{"x", x}, {"a", a}}, o);
    });
    add("mul", [](const GradcheckOptions& o) {
        Prng prng(22);
        Var<double> a = leaf({1, 2, 3, 3}, prng), b = leaf({1, 2, 3, 3}, prng);
        return gradcheck([&] { return ag::mul(a, b); }, {{"a", a}, {"b", b}}, o);
    });

    add("ce_loss binary", [](const GradcheckOptions& o) {
        Prng prng(23);
        Var<double> z = leaf({2, 1, 4, 4}, prng);
        Tensor4<double> t = random_mask({2, 1, 8, 8}, prng);
        return gradcheck([&] { return ce_loss(z, t); }, {{"logits", z}}, o);
    });
    add("dice_loss binary", [](const GradcheckOptions& o) {
        Prng prng(24);
        Var<double> z = leaf({2, 1, 4, 4}, prng);
        Tensor4<double> t = random_mask({2, 1, 8, 8}, prng);
        return gradcheck([&] { return dice_loss(z, t, 1.0); }, {{"logits", z}}, o);
    });
    add("ce_loss softmax", [](const GradcheckOptions& o) {
        Prng prng(25);
        Var<double> z = leaf({1, 3, 4, 4}, prng);
        Tensor4<double> t({1, 1, 4, 4});
        for (auto& v : t.data()) v = static_cast<double>(prng.below(3));
        return gradcheck([&] { return ce_loss(z, t); }, {{"logits", z}}, o);
    });
    add("dice_loss softmax", [](const GradcheckOptions& o) {
        Prng prng(26);
        Var<double> z = leaf({1, 3, 4, 4}, prng);
        Tensor4<double> t({1, 1, 4, 4});
        for (auto& v : t.data()) v = static_cast<double>(prng.below(3));
        return gradcheck([&] { return dice_loss(z, t, 1.0); }, {{"logits", z}}, o);
    });
    add("mutation_loss", [](const GradcheckOptions& o) {
        Prng prng(27);
        std::vector<Var<double>> heads;
        NamedVars wrt;
        for (std::size_t i = 0; i < 4; ++i) {
            const std::size_t s = std::size_t{1} << i;
            heads.push_back(leaf({1, 1, s, s}, prng));
            wrt.push_back({"p" + std::to_string(i + 1), heads.back()});
        }
        Tensor4<double> t = random_mask({1, 1, 16, 16}, prng);
        return gradcheck([&] { return mutation_loss(heads, t, LossConfig{}).total; }, wrt, o);
    });
    return cases;
}

inline std::vector<GradcheckCase> block_cases() {
    std::vector<GradcheckCase> cases;
    auto add = [&](std::string name, std::function<GradcheckReport(const GradcheckOptions&)> fn) {
        cases.push_back({"blocks", std::move(name), std::move(fn)});
    };
    add("cab 1x8x4x4", [](const GradcheckOptions& o) {
        Prng prng(31);
        ChannelAttention<double> cab(8, 16, prng);
        Var<double> x = leaf({1, 8, 4, 4}, prng);
        return gradcheck([&] { return cab.forward(x); }, with_params(cab, "cab", {{"x", x}}), o);
    });
    add("sab 1x4x6x6", [](const GradcheckOptions& o) {
        Prng prng(32);
        SpatialAttention<double> sab(7, prng);
        Var<double> x = leaf({1, 4, 6, 6}, prng);
        return gradcheck([&] { return sab.forward(x); }, with_params(sab, "sab", {{"x", x}}), o);
    });
    add("mscb kernels {1} expansion 1", [](const GradcheckOptions& o) {
        Prng prng(33);
        DecoderConfig cfg;
        cfg.kernel_scales = {1};
        cfg.mscb_expansion = 1.0;
        MultiScaleConvBlock<double> mscb(4, 4, cfg, plain_init(), prng);
        jitter_affine(mscb, prng);
        Var<double> x = leaf({2, 4, 4, 4}, prng);
        return gradcheck([&] { return mscb.forward(x); }, with_params(mscb, "mscb", {{"x", x}}), o);
    });
    add("mscb default 1x256x7x7 (sampled)", [](const GradcheckOptions& o) {
        Prng prng(34);
        MultiScaleConvBlock<double> mscb(256, 256, DecoderConfig{}, plain_init(), prng);
        jitter_affine(mscb, prng);
        Var<double> x = leaf({1, 256, 7, 7}, prng);
        return gradcheck([&] { return mscb.forward(x); }, with_params(mscb, "mscb", {{"x", x}}), sampled(o, 8));
    });
    add("mscam 1x8x8x8", [](const GradcheckOptions& o) {
        Prng prng(35);
        MultiScaleAttentionModule<double> m(8, DecoderConfig{}, plain_init(), prng);
        jitter_affine(m, prng);
        Var<double> x = leaf({1, 8, 8, 8}, prng);
        return gradcheck([&] { return m.forward(x); }, with_params(m, "mscam", {{"x", x}}), o);
    });
    add("lgag g,x 1x8x6x6", [](const GradcheckOptions& o) {
        Prng prng(36);
        GroupedAttentionGate<double> gate(8, 8, DecoderConfig{}, plain_init(), prng);
        jitter_affine(gate, prng);
        Var<double> g = leaf({1, 8, 6, 6}, prng), x = leaf({1, 8, 6, 6}, prng);
        return gradcheck([&] { return gate.forward(g, x); }, with_params(gate, "lgag", {{"g", g}, {"x", x}}), o);
    });
    add("eucb 1x4x3x3", [](const GradcheckOptions& o) {
        Prng prng(37);
        UpConvBlock<double> up(4, 2, plain_init(), prng);
        jitter_affine(up, prng);
        Var<double> x = leaf({1, 4, 3, 3}, prng);
        return gradcheck([&] { return up.forward(x); }, with_params(up, "eucb", {{"x", x}}), o);
    });
    add("seg_head", [](const GradcheckOptions& o) {
        Prng prng(38);
        SegmentationHead<double> head(4, 1, plain_init(), prng);
        Var<double> x = leaf({1, 4, 3, 3}, prng);
        return gradcheck([&] { return head.forward(x); }, with_params(head, "head", {{"x", x}}), o);
    });
    add("decoder [4,8,12,16] (sampled)", [](const GradcheckOptions& o) {
        Prng prng(39);
        DecoderConfig cfg;
        cfg.channels = {4, 8, 12, 16};
        Decoder<double> dec(cfg, plain_init(), prng);
        jitter_affine(dec, prng);
        StageFeatures<double> f;
        NamedVars inputs;
        for (std::size_t i = 0; i < 4; ++i) {
            const std::size_t s = std::size_t{16} >> i;
            f.x[i] = leaf({2, cfg.channels[i], s, s}, prng);
            inputs.push_back({"x" + std::to_string(i + 1), f.x[i]});
        }
        Tensor4<double> t = random_mask({2, 1, 64, 64}, prng);
        return gradcheck([&] { return mutation_loss(dec.forward(f).p, t, LossConfig{}).total; },
                         with_params(dec, "decoder", inputs), deep(o));
    });
    return cases;
}

inline std::vector<GradcheckCase> full_cases() {
    return {{"full", "tiny model [8,16,24,32] 2x3x64x64 (sampled)", [](const GradcheckOptions& o) {
                 ModelConfig cfg = ModelConfig::with_channels({8, 16, 24, 32});
                 cfg.init = plain_init();
                 SegmentationModel<double> model(cfg, 40);
                 Prng prng(41);
                 jitter_affine(model, prng);
                 Var<double> img = leaf({2, 3, 64, 64}, prng);
                 Tensor4<double> t = random_mask({2, 1, 64, 64}, prng);
                 return gradcheck([&] { return mutation_loss(model.forward(img).p, t, LossConfig{}).total; },
                                  with_params(model, "", {{"image", img}}), deep(o));
             }}};
}

} // namespace detail

inline std::vector<GradcheckCase> gradcheck_cases(const std::string& scope) {
    std::vector<GradcheckCase> out;
    const bool all = scope == "all";
    if (!all && scope != "ops" && scope != "blocks" && scope != "full")
        throw ValidationError("unknown gradcheck scope '" + scope + "' (ops, blocks, full, all)");
    auto append = [&](std::vector<GradcheckCase> v) {
        for (auto& c : v) out.push_back(std::move(c));
    };
    if (all || scope == "ops") append(detail::op_cases());
    if (all || scope == "blocks") append(detail::block_cases());
    if (all || scope == "full") append(detail::full_cases());
    return out;
}

inline GradcheckResult run_case(const GradcheckCase& c, const GradcheckOptions& opt) {
    const auto t0 = std::chrono::steady_clock::now();
    GradcheckResult r{c.scope, c.name, c.run(opt), 0};
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return r;
}

} // namespace emcad
